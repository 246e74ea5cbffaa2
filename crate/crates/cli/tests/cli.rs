use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use veil::data::{generate_procedural, load_dataset, ProceduralConfig};

const CONFIG: &str = r#"
seed = 7
out_dir = "unused"

[data]
source = "procedural"
n_subjects = 3
frames_per_subject = 12
image_size = [16, 16]
videos_per_subject = 2

[model]
preset = "custom"
latent_dim = 4
decoder_base_channels = 4
encoder_blocks = [
    { branch_channels = [1, 1, 2], stride = 2 },
    { branch_channels = [2, 2, 2], stride = 2 },
]
decoder_blocks = [
    { branch_channels = [2, 2, 2], stride = 1 },
    { branch_channels = [1, 1, 2], stride = 1 },
]
discriminator_blocks = [
    { branch_channels = [1, 1, 2], stride = 2 },
    { branch_channels = [2, 2, 2], stride = 2 },
]

[training]
batch_size = 4
critic_steps = 2
epochs = 1
log_every = 1
checkpoint_every = 2

[training.adam]
learning_rate = 1e-3
beta1 = 0.0
beta2 = 0.9
epsilon = 1e-8

[evaluation.attacker]
epochs = 2
batch_size = 8
latent_hidden = [8]

[morph]
steps = 5
"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Run { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn veil(&self, args: &[&str]) -> Output {
        let config = self.dir.path().join("run.toml");
        let out = self.out();
        let mut full: Vec<&str> = args.to_vec();
        full.extend(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        Command::new(env!("CARGO_BIN_EXE_veil")).args(&full).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.veil(args);
        assert!(
            out.status.success(),
            "veil {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn read(&self, name: &str) -> Vec<u8> {
        fs::read(self.out().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn with_training(extra: &str) -> String {
    CONFIG.replace("[training]\n", &format!("[training]\n{extra}\n"))
}

fn png_size(path: &Path) -> (u32, u32) {
    image::image_dimensions(path).unwrap()
}

#[test]
fn synth_data_is_deterministic_and_round_trips() {
    let a = Run::new(CONFIG);
    let b = Run::new(CONFIG);
    a.ok(&["synth-data"]);
    b.ok(&["synth-data"]);
    assert_eq!(a.read("dataset.veil"), b.read("dataset.veil"));

    let summary: serde_json::Value = serde_json::from_slice(&a.read("dataset_summary.json")).unwrap();
    assert_eq!(summary["samples"], 36);
    assert_eq!(summary["train_samples"].as_u64().unwrap() + summary["test_samples"].as_u64().unwrap(), 36);
    let yaw_total: u64 = summary["pose_histograms_deg"]["yaw"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(yaw_total, 36);

    let (loaded, header) = load_dataset(&a.out().join("dataset.veil")).unwrap();
    let mut pc = ProceduralConfig::new(3, 12, [16, 16], 7);
    pc.videos_per_subject = 2;
    assert_eq!(header.procedural.as_ref(), Some(&pc));
    assert_eq!(loaded, generate_procedural(&pc).unwrap());

    let refused = a.veil(&["synth-data"]);
    assert_eq!(code(&refused), 1);
    assert!(stderr(&refused).contains("--force"));
    a.ok(&["synth-data", "--force"]);
    assert!(a.out().join("synth-data.config.toml").exists());

    let other_seed = Run::new(CONFIG);
    other_seed.ok(&["synth-data", "--seed", "8"]);
    assert_ne!(other_seed.read("dataset.veil"), a.read("dataset.veil"));
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let run = Run::new(&CONFIG.replace("epochs = 1", "epochs = 0"));
    run.ok(&["train"]);
    let summary: serde_json::Value = serde_json::from_slice(&run.read("train_summary.json")).unwrap();
    assert_eq!(summary["generator_steps"], 0);
    let header = veil::training::read_checkpoint_header(&run.out().join("checkpoint.ckpt")).unwrap();
    assert_eq!(header.generator_steps, 0);
    assert!(run.read("train_log.jsonl").is_empty());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let straight = Run::new(&with_training("max_generator_steps = 6\nepochs = 100").replace("epochs = 1\n", ""));
    straight.ok(&["train"]);

    let split = Run::new(&with_training("max_generator_steps = 3\nepochs = 100").replace("epochs = 1\n", ""));
    split.ok(&["train"]);
    let again = split.veil(&["train"]);
    assert_eq!(code(&again), 1, "existing run without --resume: {}", stderr(&again));
    fs::write(
        split.dir.path().join("run.toml"),
        with_training("max_generator_steps = 6\nepochs = 100").replace("epochs = 1\n", ""),
    )
    .unwrap();
    split.ok(&["train", "--resume"]);

    assert_eq!(straight.read("checkpoint.ckpt"), split.read("checkpoint.ckpt"));
    assert_eq!(straight.read("checkpoints/g0000006.ckpt"), split.read("checkpoints/g0000006.ckpt"));
    let lines = |r: &Run| {
        String::from_utf8(r.read("train_log.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_s");
                v
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(lines(&straight), lines(&split));

    fs::write(
        split.dir.path().join("run.toml"),
        with_training("max_generator_steps = 6\nepochs = 100")
            .replace("epochs = 1\n", "")
            .replace("learning_rate = 1e-3", "learning_rate = 5e-1"),
    )
    .unwrap();
    let mismatch = split.veil(&["train", "--resume"]);
    assert_eq!(code(&mismatch), 1);
    assert!(stderr(&mismatch).contains("training.adam.learning_rate"), "{}", stderr(&mismatch));
}

#[test]
fn invalid_configs_exit_with_code_one() {
    let bad_field = Run::new(&CONFIG.replace("batch_size = 4", "batch_size = 4\nbatchsize = 3"));
    let out = bad_field.veil(&["train"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("batchsize"), "{}", stderr(&out));

    let bad_value = Run::new(&CONFIG.replace("critic_steps = 2", "critic_steps = 0"));
    let out = bad_value.veil(&["train"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("critic_steps"), "{}", stderr(&out));

    let seeded = Run::new(&with_training("seed = 3"));
    let out = seeded.veil(&["train"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("training.seed"));

    let run = Run::new(CONFIG);
    let out = Command::new(env!("CARGO_BIN_EXE_veil"))
        .args(["train", "--config", "/nonexistent/run.toml"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert_eq!(code(&run.veil(&["evaluate", "--scenarios", "attack_iv"])), 1);
    assert_eq!(code(&run.veil(&["frobnicate"])), 1);
}

#[test]
fn evaluate_rows_and_determinism() {
    let run = Run::new(CONFIG);
    run.ok(&["train"]);

    let out = run.ok(&["evaluate", "--scenarios", "unconstrained"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(table.lines().nth(1).unwrap().starts_with("Privacy Unconstrained"));

    run.ok(&["evaluate", "--scenarios", "attack_iii,unconstrained,attack_ii,attack_i"]);
    let table = String::from_utf8(run.read("metrics_table.txt")).unwrap();
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split("  ").next().unwrap()).collect();
    assert_eq!(
        labels,
        ["Privacy Unconstrained", "Attack Scenario I", "Attack Scenario II", "Attack Scenario III"]
    );
    let first = run.read("metrics.json");
    run.ok(&["evaluate"]);
    assert_eq!(first, run.read("metrics.json"));
    let reports: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 4);
}

#[test]
fn morph_outputs() {
    let run = Run::new(CONFIG);
    let missing = run.veil(&["morph"]);
    assert_eq!(code(&missing), 2, "{}", stderr(&missing));

    run.ok(&["train"]);
    run.ok(&["morph", "--mode", "pose_morph", "--steps", "2"]);
    let meta: serde_json::Value = serde_json::from_slice(&run.read("pose_morph.json")).unwrap();
    assert_eq!(meta["k"], serde_json::json!([1.0, 0.0]));
    assert_eq!(meta["predicted_pose_deg"].as_array().unwrap().len(), 2);
    assert_eq!(png_size(&run.out().join("pose_morph.png")), (2 * 16 + 3 * 2, 16 + 2 * 2));

    run.ok(&["morph", "--mode", "identity_morph", "--from", "1", "--to", "3"]);
    let meta: serde_json::Value = serde_json::from_slice(&run.read("identity_morph.json")).unwrap();
    assert_eq!(meta["k"].as_array().unwrap().len(), 5);

    run.ok(&["morph", "--mode", "identity_replace", "--target", "2"]);
    assert_eq!(png_size(&run.out().join("identity_replace.png")), (3 * 16 + 4 * 2, 2 * 16 + 3 * 2));
    let meta: serde_json::Value = serde_json::from_slice(&run.read("identity_replace.json")).unwrap();
    assert_eq!(meta["image_indices"].as_array().unwrap().len(), 3);

    let bad = run.veil(&["morph", "--mode", "pose_morph", "--initial", "0", "--final", "999"]);
    assert_eq!(code(&bad), 1);
    let bad = run.veil(&["morph", "--mode", "identity_replace", "--target", "9"]);
    assert_eq!(code(&bad), 1);
    let bad = run.veil(&["morph", "--steps", "1"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn shipped_desk_config_is_valid() {
    let run = Run::new(&fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml")).unwrap());
    let out = run.veil(&["synth-data", "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_slice(&run.read("dataset_summary.json")).unwrap();
    assert_eq!(summary["samples"], 2000);
}
