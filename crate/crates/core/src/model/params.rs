//! Named parameter storage with deterministic per-name initialization.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Uniform on `[-1/√fan_in, 1/√fan_in]`.
    FanIn(usize),
}

#[derive(Debug)]
pub struct Param {
    var: Var,
    trainable: AtomicBool,
}

impl Param {
    /// The value as a graph node; frozen parameters are detached.
    pub fn tensor(&self) -> Tensor {
        if self.is_trainable() {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, on: bool) {
        self.trainable.store(on, Ordering::Relaxed)
    }
}

/// Deterministic 64-bit FNV-1a hash, used to derive per-parameter seeds.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug)]
pub struct ParamStore {
    seed: u64,
    device: Device,
    dtype: DType,
    params: Mutex<BTreeMap<String, Arc<Param>>>,
}

impl ParamStore {
    pub fn new(seed: u64, device: Device, dtype: DType) -> Self {
        Self { seed, device, dtype, params: Mutex::new(BTreeMap::new()) }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, Arc<Param>>> {
        self.params.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Returns the named parameter, creating it when absent. An existing
    /// parameter (for example one loaded from a checkpoint) must have `shape`.
    pub fn get_or_init(&self, name: &str, shape: &[usize], init: Init) -> Result<Arc<Param>> {
        let mut map = self.lock();
        if let Some(p) = map.get(name) {
            if p.var.dims() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.var.dims()
                )));
            }
            return Ok(p.clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std)
                    .map_err(|e| Error::InvalidConfig(format!("init std {std}: {e}")))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let p = Arc::new(Param { var: Var::from_tensor(&t)?, trainable: AtomicBool::new(true) });
        map.insert(name.to_string(), p.clone());
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Option<Arc<Param>> {
        self.lock().get(name).cloned()
    }

    pub fn remove(&self, name: &str) -> Option<Arc<Param>> {
        self.lock().remove(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().is_empty()
    }

    pub fn entries(&self) -> Vec<(String, Arc<Param>)> {
        self.lock().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn set_trainable_where(&self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.lock().iter() {
            p.set_trainable(pred(name));
        }
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.lock().values().filter(|p| p.is_trainable()).map(|p| p.var.clone()).collect()
    }

    pub fn num_elements(&self, pred: impl Fn(&str, &Param) -> bool) -> usize {
        self.lock().iter().filter(|(n, p)| pred(n, p)).map(|(_, p)| p.var.elem_count()).sum()
    }

    /// Overwrites the value of an existing parameter.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if p.var.dims() != value.dims() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name} has shape {:?}, value {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Inserts pre-existing values; used when loading checkpoints.
    pub fn insert(&self, name: &str, value: &Tensor) -> Result<()> {
        let t = value.to_dtype(self.dtype)?.to_device(&self.device)?;
        let p = Arc::new(Param { var: Var::from_tensor(&t)?, trainable: AtomicBool::new(true) });
        self.lock().insert(name.to_string(), p);
        Ok(())
    }

    /// Adds Gaussian noise of scale `std` to the selected parameters.
    pub fn perturb(&self, seed: u64, std: f64, pred: impl Fn(&str) -> bool) -> Result<()> {
        let d = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(format!("std {std}: {e}")))?;
        for (name, p) in self.lock().iter().filter(|(n, _)| pred(n)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
            let noise: Vec<f64> = (0..p.var.elem_count()).map(|_| d.sample(&mut rng)).collect();
            let noise = Tensor::from_vec(noise, p.var.dims(), &self.device)?.to_dtype(self.dtype)?;
            p.var.set(&(p.var.as_tensor() + noise)?)?;
        }
        Ok(())
    }

    /// Order-sensitive FNV digest of the selected parameters' f64 bit patterns.
    pub fn checksum(&self, pred: impl Fn(&str) -> bool) -> Result<u64> {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (name, p) in self.lock().iter().filter(|(n, _)| pred(n)) {
            h ^= fnv1a(name);
            let v = p.var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            for x in v {
                h = (h ^ x.to_bits()).wrapping_mul(0x0100_0000_01b3);
            }
        }
        Ok(h)
    }

    pub fn save(
        &self,
        path: &Path,
        metadata: HashMap<String, String>,
        pred: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let entries: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .lock()
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(n, p)| {
                let v = p.var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
                Ok((n.clone(), p.var.dims().to_vec(), bytes))
            })
            .collect::<Result<_>>()?;
        let views = entries
            .iter()
            .map(|(n, shape, bytes)| {
                safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), bytes)
                    .map(|v| (n.clone(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        safetensors::serialize_to_file(views, Some(metadata), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Raw contents of a checkpoint file.
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(err)?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(err)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != safetensors::Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: expected f32, found {:?}", view.dtype())));
        }
        let v: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::from_vec(v, view.shape(), &Device::Cpu)?);
    }
    Ok(Archive { tensors, metadata: meta.metadata().clone().unwrap_or_default() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initialization_depends_only_on_seed_and_name() {
        let a = ParamStore::new(9, Device::Cpu, DType::F64);
        let b = ParamStore::new(9, Device::Cpu, DType::F64);
        b.get_or_init("other", &[3], Init::Normal(1.0)).unwrap();
        let pa = a.get_or_init("w", &[4, 2], Init::FanIn(2)).unwrap();
        let pb = b.get_or_init("w", &[4, 2], Init::FanIn(2)).unwrap();
        let va = pa.tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let vb = pb.tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(va, vb);
        assert!(va.iter().all(|v| v.abs() <= 1.0 / 2f64.sqrt()));
        assert!(a.get_or_init("w", &[2, 4], Init::Zeros).is_err());
    }

    #[test]
    fn save_and_reload_preserve_values_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let s = ParamStore::new(1, Device::Cpu, DType::F32);
        s.get_or_init("a.w", &[2, 3], Init::Normal(0.5)).unwrap();
        s.get_or_init("b.w", &[5], Init::Const(2.0)).unwrap();
        let path = dir.path().join("x.safetensors");
        let meta = HashMap::from([("config".to_string(), "{}".to_string())]);
        s.save(&path, meta, |n| n.starts_with("a.")).unwrap();
        let ar = read_archive(&path).unwrap();
        assert_eq!(ar.tensors.len(), 1);
        assert_eq!(ar.metadata["config"], "{}");
        let orig = s.get("a.w").unwrap().tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let back = ar.tensors["a.w"].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(orig, back);
    }

    #[test]
    fn frozen_parameters_do_not_receive_gradients() {
        let s = ParamStore::new(1, Device::Cpu, DType::F64);
        let a = s.get_or_init("a", &[2], Init::Const(1.0)).unwrap();
        let b = s.get_or_init("b", &[2], Init::Const(3.0)).unwrap();
        s.set_trainable_where(|n| n == "a");
        let loss = (a.tensor() * b.tensor()).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        assert!(g.get(a.var().as_tensor()).is_some());
        assert!(g.get(b.var().as_tensor()).is_none());
        assert_eq!(s.trainable_vars().len(), 1);
    }
}
