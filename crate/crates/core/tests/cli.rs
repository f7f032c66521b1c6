//! Command-line behavior: exit codes, file outputs, and a tiny end-to-end run.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use layoutmm::cli::{SampleOutput, EXIT_IO, EXIT_USAGE, OUTPUT_ROOT_ENV};

const TINY: &str = "\
[data]
train = 16
val = 4
test = 4
[pretrain]
epochs = 1
batch_size = 8
[eval.sampler]
ddim_steps = 4
";

fn layoutmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layoutmm"))
        .args(args)
        .env("RAYON_NUM_THREADS", "1")
        .env_remove(OUTPUT_ROOT_ENV)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write_config(root: &Path, body: &str) -> PathBuf {
    let path = root.join("run.toml");
    let out = root.join("out");
    std::fs::write(&path, format!("output_dir = {:?}\n{body}", out.to_str().unwrap())).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&layoutmm(&[])), EXIT_USAGE);
    assert_eq!(code(&layoutmm(&["train"])), EXIT_USAGE);

    let cfg = write_config(dir.path(), TINY);
    let out = layoutmm(&["finetune", "--config", s(&cfg)]);
    assert_eq!(code(&out), EXIT_USAGE);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--base"));

    let bad = write_config(dir.path(), "[pretrain]\nepochs = 1\nlearning_rat = 0.1\n");
    assert_eq!(code(&layoutmm(&["synth", "--config", s(&bad)])), EXIT_USAGE);
}

#[test]
fn missing_files_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let missing = dir.path().join("nope.safetensors");
    assert_eq!(code(&layoutmm(&["eval", "--config", s(&cfg), "--checkpoint", s(&missing)])), EXIT_IO);
    assert_eq!(code(&layoutmm(&["synth", "--config", s(&dir.path().join("absent.toml"))])), EXIT_IO);
}

#[test]
fn synth_is_deterministic_and_guards_existing_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, cb) = (write_config(a.path(), TINY), write_config(b.path(), TINY));
    assert_eq!(code(&layoutmm(&["synth", "--config", s(&ca)])), 0);
    assert_eq!(code(&layoutmm(&["synth", "--config", s(&cb)])), 0);
    for split in ["train", "val", "test"] {
        let meta = |root: &Path| std::fs::read(root.join("out/data").join(split).join("meta.jsonl")).unwrap();
        assert_eq!(meta(a.path()), meta(b.path()), "{split}");
        let image = format!("out/data/{split}/images/{split}-00000.png");
        assert_eq!(std::fs::read(a.path().join(&image)).unwrap(), std::fs::read(b.path().join(&image)).unwrap());
    }
    assert_eq!(code(&layoutmm(&["synth", "--config", s(&ca)])), EXIT_USAGE);
    assert_eq!(code(&layoutmm(&["synth", "--config", s(&ca), "--force"])), 0);
}

#[test]
fn train_sample_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(code(&layoutmm(&["synth", "--config", s(&cfg)])), 0);
    let out = layoutmm(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let root = dir.path().join("out");
    let base = root.join("pretrain/base.safetensors");
    assert!(base.exists());
    assert!(root.join("config.toml").exists());
    let log = std::fs::read_to_string(root.join("pretrain/log.jsonl")).unwrap();
    // One line per optimizer step: 16 samples in batches of 8.
    assert_eq!(log.lines().count(), 2);

    let test = root.join("data/test");
    let layout = dir.path().join("layout.json");
    let first = std::fs::read_to_string(test.join("meta.jsonl")).unwrap();
    std::fs::write(&layout, first.lines().next().unwrap()).unwrap();
    let relations = dir.path().join("relations.json");
    std::fs::write(
        &relations,
        r#"[{"subject_index": 1, "object_index": 0, "channel": "position", "code": "above"},
            {"subject_index": 1, "object_index": 2, "channel": "size", "code": "larger"}]"#,
    )
    .unwrap();
    let (canvas, saliency) = (test.join("images/test-00000.png"), test.join("saliency/test-00000.png"));
    let sample = |task: &str, extra: &[&str]| {
        let mut args = vec![
            "sample",
            "--config",
            s(&cfg),
            "--checkpoint",
            s(&base),
            "--task",
            task,
            "--canvas",
            s(&canvas),
            "--saliency",
            s(&saliency),
            "--name",
            task,
        ];
        args.extend_from_slice(extra);
        layoutmm(&args)
    };
    assert_eq!(code(&sample("relationship", &["--layout", s(&layout)])), EXIT_USAGE);
    let out = sample("relationship", &["--layout", s(&layout), "--relations", s(&relations)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json = root.join("samples/relationship.json");
    let parsed: SampleOutput = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(parsed.task, "relationship");
    assert!(root.join("samples/relationship.png").exists());
    assert_eq!(code(&sample("sideways", &[])), EXIT_USAGE);

    let png = dir.path().join("render.png");
    assert_eq!(code(&layoutmm(&["render", "--canvas", s(&canvas), "--layout", s(&json), "--out", s(&png)])), 0);
    let img = image_dims(&png);
    assert_eq!(img, image_dims(&canvas));
}

fn image_dims(path: &Path) -> (u32, u32) {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let be = |o: usize| u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap());
    (be(16), be(20))
}
