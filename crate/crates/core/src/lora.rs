//! Low-rank adapters on the mask–layout branch and the stage freeze policy.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::read_archive;
use crate::model::Denoiser;

pub const DEFAULT_TARGET: &str = "branchB.block*.attn.*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Glob patterns (`*` matches any run of characters) over projection names.
    pub targets: Vec<String>,
    /// Also wrap the attention output projections.
    pub include_output: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 3.0, targets: vec![DEFAULT_TARGET.to_string()], include_output: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Parameter names trained or frozen for a stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

pub fn glob_match(pattern: &str, name: &str) -> bool {
    fn rec(p: &[u8], s: &[u8]) -> bool {
        match p.split_first() {
            None => s.is_empty(),
            Some((b'*', rest)) => (0..=s.len()).any(|i| rec(rest, &s[i..])),
            Some((c, rest)) => s.first() == Some(c) && rec(rest, &s[1..]),
        }
    }
    rec(pattern.as_bytes(), name.as_bytes())
}

pub fn is_relation_param(name: &str) -> bool {
    name.starts_with("relbias.") || name.starts_with("enc.layout.canvas_rel.")
}

pub fn is_lora_param(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Parameters that make up the fine-tuning stage's trainable set.
pub fn is_adapter_param(name: &str) -> bool {
    is_lora_param(name) || is_relation_param(name)
}

/// Attaches adapters to every projection matching the configured targets.
/// Returns the number of wrapped projections.
pub fn wrap_projections(model: &mut Denoiser, cfg: &LoraConfig) -> Result<usize> {
    if model.merged || model.lora.is_some() {
        return Err(Error::InvalidConfig("model already carries adapters".into()));
    }
    if cfg.rank == 0 {
        return Err(Error::InvalidConfig("LoRA rank must be positive".into()));
    }
    let store = model.store().clone();
    let mut count = 0;
    for lin in model.linears_mut() {
        let name = lin.name().to_string();
        if !cfg.targets.iter().any(|p| glob_match(p, &name)) {
            continue;
        }
        if !cfg.include_output && name.ends_with(".o") {
            continue;
        }
        let (i, o) = lin.dims();
        if cfg.rank >= i.min(o) {
            return Err(Error::InvalidConfig(format!(
                "LoRA rank {} is not below min({o}, {i}) for {name}",
                cfg.rank
            )));
        }
        lin.attach_lora(&store, cfg.rank, cfg.alpha)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidConfig(format!("LoRA targets {:?} match no projections", cfg.targets)));
    }
    model.lora = Some(cfg.clone());
    Ok(count)
}

pub fn set_trainable(model: &Denoiser, stage: Stage) -> Partition {
    let store = model.store();
    match stage {
        Stage::Pretrain => store.set_trainable_where(|n| !is_adapter_param(n)),
        Stage::Finetune => store.set_trainable_where(is_adapter_param),
    }
    let (mut trainable, mut frozen) = (Vec::new(), Vec::new());
    for (name, p) in store.entries() {
        if p.is_trainable() {
            trainable.push(name);
        } else {
            frozen.push(name);
        }
    }
    Partition { trainable, frozen }
}

/// Folds every adapter into its base projection.
pub fn merge(model: &mut Denoiser) -> Result<()> {
    if model.merged {
        return Err(Error::AlreadyMerged);
    }
    if model.lora.is_none() {
        return Err(Error::NoAdapters);
    }
    let store = model.store().clone();
    for lin in model.linears_mut() {
        lin.merge_lora(&store)?;
    }
    model.merged = true;
    Ok(())
}

const KIND_KEY: &str = "kind";
const LORA_KEY: &str = "lora_config";
const MODEL_KEY: &str = "model_config";

/// Writes the adapter weights and fine-tuned relation modules.
pub fn save_adapter(model: &Denoiser, path: &Path) -> Result<()> {
    let cfg = model.lora.as_ref().ok_or(Error::NoAdapters)?;
    if model.merged {
        return Err(Error::AlreadyMerged);
    }
    let meta = HashMap::from([
        (KIND_KEY.to_string(), "adapter".to_string()),
        (LORA_KEY.to_string(), serde_json::to_string(cfg).map_err(|e| Error::json("lora config", e))?),
        (
            MODEL_KEY.to_string(),
            serde_json::to_string(model.config()).map_err(|e| Error::json("model config", e))?,
        ),
    ]);
    model.store().save(path, meta, is_adapter_param)
}

/// Wraps `model` as recorded in the adapter file and loads its weights.
pub fn load_adapter(model: &mut Denoiser, path: &Path) -> Result<()> {
    let ar = read_archive(path)?;
    if ar.metadata.get(KIND_KEY).map(String::as_str) != Some("adapter") {
        return Err(Error::Checkpoint(format!("{} is not an adapter checkpoint", path.display())));
    }
    let raw = ar.metadata.get(MODEL_KEY).ok_or_else(|| Error::Checkpoint("missing model config".into()))?;
    let saved: crate::model::ModelConfig =
        serde_json::from_str(raw).map_err(|e| Error::json("adapter model config", e))?;
    if &saved != model.config() {
        return Err(Error::Checkpoint("adapter was trained for a different model configuration".into()));
    }
    let raw = ar.metadata.get(LORA_KEY).ok_or_else(|| Error::Checkpoint("missing LoRA config".into()))?;
    let cfg: LoraConfig = serde_json::from_str(raw).map_err(|e| Error::json("LoRA config", e))?;
    wrap_projections(model, &cfg)?;
    let store = model.store();
    let expected: Vec<String> = store.names().into_iter().filter(|n| is_adapter_param(n)).collect();
    let found: Vec<&String> = ar.tensors.keys().collect();
    if expected.iter().collect::<Vec<_>>() != found {
        return Err(Error::Checkpoint(format!("{}: adapter tensor names do not match the model", path.display())));
    }
    for (name, t) in &ar.tensors {
        store.assign(name, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ParamStore};
    use candle_core::{DType, Device};
    use std::sync::Arc;

    fn model() -> Denoiser {
        let cfg = ModelConfig { depth: 2, ..ModelConfig::desk() };
        Denoiser::new(&cfg, Arc::new(ParamStore::new(1, Device::Cpu, DType::F32))).unwrap()
    }

    #[test]
    fn glob_patterns() {
        assert!(glob_match(DEFAULT_TARGET, "branchB.block0.attn.mask.q"));
        assert!(glob_match(DEFAULT_TARGET, "branchB.block11.attn.layout.o"));
        assert!(!glob_match(DEFAULT_TARGET, "branchA.block0.attn.mask.q"));
        assert!(!glob_match(DEFAULT_TARGET, "branchB.block0.mlp.mask.fc1"));
        assert!(glob_match("*", ""));
    }

    #[test]
    fn wraps_branch_b_attention_only() {
        let mut m = model();
        let n = wrap_projections(&mut m, &LoraConfig::default()).unwrap();
        // depth 2 × two modalities × {q, k, v, o}
        assert_eq!(n, 16);
        let lora_elems = m.store().num_elements(|name, _| is_lora_param(name));
        // each wrapped 64×64 projection adds r(d + k) = 4 · 128
        assert_eq!(lora_elems, 16 * 4 * 128);
        let mut m = model();
        let no_o = LoraConfig { include_output: false, ..Default::default() };
        assert_eq!(wrap_projections(&mut m, &no_o).unwrap(), 12);
        let mut m = model();
        let none = LoraConfig { targets: vec!["nothing.*".into()], ..Default::default() };
        assert!(matches!(wrap_projections(&mut m, &none), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn stage_partitions() {
        let mut m = model();
        wrap_projections(&mut m, &LoraConfig::default()).unwrap();
        let all = m.store().names();
        for stage in [Stage::Pretrain, Stage::Finetune] {
            let p = set_trainable(&m, stage);
            assert_eq!(p.trainable.len() + p.frozen.len(), all.len());
            assert!(p.trainable.iter().all(|n| !p.frozen.contains(n)));
        }
        let ft = set_trainable(&m, Stage::Finetune);
        assert!(ft.trainable.iter().all(|n| !n.starts_with("branchA.")));
        assert!(ft.trainable.contains(&"relbias.size".to_string()));
        assert!(ft.trainable.contains(&"enc.layout.canvas_rel.pos".to_string()));
        let pt = set_trainable(&m, Stage::Pretrain);
        assert!(pt.frozen.contains(&"relbias.pos".to_string()));
        assert!(pt.trainable.iter().all(|n| !is_adapter_param(n)));
    }

    #[test]
    fn merge_state_errors() {
        let mut m = model();
        assert!(matches!(merge(&mut m), Err(Error::NoAdapters)));
        wrap_projections(&mut m, &LoraConfig::default()).unwrap();
        merge(&mut m).unwrap();
        assert!(m.store().names().iter().all(|n| !is_lora_param(n)));
        assert!(matches!(merge(&mut m), Err(Error::AlreadyMerged)));
    }
}
