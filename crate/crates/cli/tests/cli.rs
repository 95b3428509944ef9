use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "\
n_pretrain = 64
n_finetune_train = 64
n_finetune_val = 8
n_finetune_test = 16
image_size = 16
embed_dim = 16
text_embed_dim = 16
proj_dim = 16
layers = 2
text_layers = 2
adapter_bottleneck = 4
mms_bottleneck = 2
batch_size = 16
epochs = 2
pretrain_steps = 10
";

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_harma"))
            .current_dir(self.dir.path())
            .env_remove("HARMA_RUN_DIR")
            .args(args)
            .arg("-q")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    }

    fn pretrained(&self) -> PathBuf {
        let p = self.path("pre/pretrained.bin");
        if !p.exists() {
            self.ok(&["pretrain", "--config", "small.cfg", "--out", "pre"]);
        }
        p
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_data_is_reproducible_and_echoes_config() {
    let env = Env::new();
    let a = env.ok(&["gen-data", "--config", "small.cfg", "--out", "a"]);
    env.ok(&["gen-data", "--config", "small.cfg", "--out", "b"]);
    assert_eq!(a["images"], 152);
    assert_eq!(a["captions"], 760);
    for f in ["manifest.jsonl", "vocab.txt", "images/000000.ppm", "images/000151.ppm"] {
        assert_eq!(fs::read(env.path("a").join(f)).unwrap(), fs::read(env.path("b").join(f)).unwrap(), "{f}");
    }
    let echo = fs::read_to_string(env.path("a/config.txt")).unwrap();
    assert!(echo.contains("n_finetune_train = 64"));
    assert!(echo.contains("margin = 0.2"));
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let env = Env::new();
    fs::write(env.path("file"), "").unwrap();
    let out = env.run(&["gen-data", "--out", "file/sub"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("file/sub"));
}

#[test]
fn config_errors_exit_with_one() {
    let env = Env::new();
    for args in [
        vec!["count-params", "--set", "nope=1"],
        vec!["count-params", "--set", "margin=-1"],
        vec!["count-params", "--config", "missing.cfg"],
        vec!["nonsense"],
    ] {
        assert_eq!(env.run(&args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn missing_checkpoint_names_the_path() {
    let env = Env::new();
    let out = env.run(&["eval", "--checkpoint", "absent.bin"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.bin"));
}

#[test]
fn count_params_modes() {
    let env = Env::new();
    let full = env.ok(&["count-params", "--set", "freeze_mode=full_ft", "--set", "adapter_kind=none"]);
    assert_eq!(full["percent"], 100.0);
    let mga = env.ok(&["count-params"]);
    assert!(mga["percent"].as_f64().unwrap() < 10.0);
    assert_eq!(mga["trainable"], mga["adapter_params_closed_form"]);
    let top = env.ok(&["count-params", "--set", "adapter_layers=top:1"]);
    assert_eq!(top["trainable"].as_u64().unwrap() * 4, mga["trainable"].as_u64().unwrap());
}

#[test]
fn eval_identity_fixture_is_perfect() {
    let env = Env::new();
    fs::write(env.path("id.json"), r#"{"scores": [[1,0,0],[0,1,0],[0,0,1]]}"#).unwrap();
    let r = env.ok(&["eval", "--scores", "id.json", "--out", "e"]);
    assert_eq!(r["metrics"]["mR"], 100.0);
    assert_eq!(read_json(&env.path("e/eval.json")), r);
    fs::write(env.path("bad.json"), r#"{"scores": [[1,0]]}"#).unwrap();
    assert_eq!(env.run(&["eval", "--scores", "bad.json"]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_on_one_seed() {
    let env = Env::new();
    let r = env.ok(&["gradcheck", "--seeds", "1", "--out", "g"]);
    assert_eq!(r["passed"], true);
    assert!(r["max_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn finetune_lowers_loss_and_is_reproducible() {
    let env = Env::new();
    let ckpt = env.pretrained();
    let ck = ckpt.to_str().unwrap();
    let a = env.ok(&["finetune", "--config", "small.cfg", "--checkpoint", ck, "--out", "fa"]);
    let b = env.ok(&["finetune", "--config", "small.cfg", "--checkpoint", ck, "--out", "fb"]);
    let strip = |mut v: Value| {
        v["folds"][0]["checkpoint"] = Value::Null;
        v
    };
    assert_eq!(strip(a.clone()), strip(b));
    assert_eq!(fs::read(env.path("fa/finetuned.bin")).unwrap(), fs::read(env.path("fb/finetuned.bin")).unwrap());
    let fold = &a["folds"][0];
    let initial = fold["initial_train_loss"].as_f64().unwrap();
    let last = fold["epochs"][1]["train_loss"].as_f64().unwrap();
    assert!(last < initial, "{last} >= {initial}");

    let log = fs::read_to_string(env.path("fa/train_log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().filter(|l| l.get("step").is_some()).count(), 8);
    for key in ["total", "triplet", "contrastive", "aux", "lr"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }

    let eval = env.ok(&["eval", "--config", "small.cfg", "--checkpoint", "fa/finetuned.bin", "--out", "ev"]);
    assert_eq!(eval["metrics"], fold["test"]);
}

#[test]
fn k_fold_finetune_averages_folds() {
    let env = Env::new();
    let ckpt = env.pretrained();
    let r = env.ok(&[
        "finetune",
        "--config",
        "small.cfg",
        "--set",
        "k_folds=3",
        "--set",
        "epochs=1",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        "kf",
    ]);
    let folds = r["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 3);
    let mean: f64 = folds.iter().map(|f| f["test"]["mR"].as_f64().unwrap()).sum::<f64>() / 3.0;
    assert!((r["test"]["mR"].as_f64().unwrap() - mean).abs() < 1e-9);
    assert!(env.path("kf/finetuned_fold2.bin").exists());
}

#[test]
fn divergence_saves_last_good_state() {
    let env = Env::new();
    let ckpt = env.pretrained();
    let out = env.run(&[
        "finetune",
        "--config",
        "small.cfg",
        "--set",
        "lr=1e9",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        "div",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    assert!(env.path("div/last_good.bin").exists());
}

#[test]
fn diagnose_writes_embeddings() {
    let env = Env::new();
    let r = env.ok(&["diagnose", "--config", "small.cfg", "--random-init", "--out", "d"]);
    assert!(r["report"]["diagnostics"]["uniformity_image"].as_f64().unwrap() <= 0.0);
    let csv = fs::read_to_string(env.path("d/embeddings.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16 + 80);
}

#[test]
fn ablation_table_structure_and_partial_results() {
    let env = Env::new();
    let r = env.ok(&["ablation", "--config", "small.cfg", "--out", "ab"]);
    let rows = r["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|x| x["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["full_ft", "mga_contrastive", "harma"]);
    assert_eq!(rows[0]["trainable"]["percent"], 100.0);
    let count = env.ok(&["count-params", "--config", "small.cfg"]);
    for row in &rows[1..] {
        assert_eq!(row["trainable"]["trainable"], count["trainable"]);
    }
    for row in rows {
        let t = &row["test"];
        let six: f64 = ["r1_i2t", "r5_i2t", "r10_i2t", "r1_t2i", "r5_t2i", "r10_t2i"]
            .iter()
            .map(|k| t[k].as_f64().unwrap())
            .sum();
        assert!((t["mR"].as_f64().unwrap() - six / 6.0).abs() < 1e-9);
    }
    let md = fs::read_to_string(env.path("ab/ablation.md")).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("| ")).count(), 4);

    let out = env.run(&["ablation", "--config", "small.cfg", "--set", "adapter_kind=none", "--out", "partial"]);
    assert_ne!(out.status.code(), Some(0));
    let partial = read_json(&env.path("partial/ablation.json"));
    assert_eq!(partial["rows"].as_array().unwrap().len(), 1);
    assert!(partial["error"].as_str().unwrap().contains("mga_contrastive"));
}

#[test]
fn run_dir_defaults_to_env_root() {
    let env = Env::new();
    let out = Command::new(env!("CARGO_BIN_EXE_harma"))
        .current_dir(env.dir.path())
        .env("HARMA_RUN_DIR", env.path("root"))
        .args(["count-params", "-q"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(env.path("root/count-params/count_params.json").exists());
    assert!(env.path("root/count-params/config.txt").exists());
}
