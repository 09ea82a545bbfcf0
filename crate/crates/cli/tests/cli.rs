use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# toy dimensions so each run takes well under a second
d_vision = 8
d_text = 8
d_embed = 8
d_input = 6
layers_vision = 2
layers_text = 2
heads = 2
mlp_ratio = 2
frames = 2
patches = 2
fusion_layers_vision = 1
fusion_layers_text = 1
rank = 2
max_caption_len = 8
vocab_size = 32
tau_init = 0.5
corpus_size = 24
train_size = 16
batch_size = 4
epochs = 2
latent_dim = 4
lr = 0.01
";

fn discovla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_discovla")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn kv(text: &str, key: &str) -> f64 {
    text.lines().find_map(|l| l.strip_prefix(&format!("{key}="))).unwrap().parse().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

#[test]
fn count_params_reports_clip_scale_presets() {
    let text = ok(&discovla(&["count-params", "--preset", "lora,b1,full"]));
    assert_eq!(text, "lora\t491520\nb1\t540672\nfull\t557056\n");
}

#[test]
fn train_then_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.display().to_string();
    let trained = ok(&discovla(&["train", "--config", &cfg, "--out-dir", &run_s, "--preset", "full"]));
    for f in ["loss_trace.csv", "checkpoint.json", "metrics.json", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(run.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "step,loss_total,loss_align_vid,loss_align_img,loss_kl,lr");
    assert_eq!(trace.lines().count(), 1 + 8);

    let ck = run.join("checkpoint.json").display().to_string();
    let out_json = dir.path().join("eval.json");
    let feats = dir.path().join("feats.bin");
    let evaluated = ok(&discovla(&[
        "eval",
        "--checkpoint",
        &ck,
        "--out",
        &out_json.display().to_string(),
        "--export-features",
        &feats.display().to_string(),
    ]));
    for key in ["t2v.r1", "t2v.r_sum", "v2t.r1", "v2t.mnr"] {
        assert_eq!(kv(&trained, key), kv(&evaluated, key), "{key}");
    }
    assert!(out_json.exists());
    let table = discovla_core::data::load_feature_file(&feats, 8, 2).unwrap();
    assert_eq!(table.ids.len(), 8);

    let dsl = ok(&discovla(&["eval", "--checkpoint", &ck, "--postprocess", "dsl"]));
    assert_eq!(kv(&dsl, "t2v.queries"), 8.0);

    // the saved configuration replays as a config file
    let replay = discovla(&["train", "--config", &run.join("config.txt").display().to_string(), "--out-dir", &dir.path().join("r2").display().to_string()]);
    assert_eq!(kv(&ok(&replay), "t2v.r_sum"), kv(&trained, "t2v.r_sum"));
}

#[test]
fn gen_data_feeds_training_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let corpus = dir.path().join("data/corpus.json").display().to_string();
    let caps = dir.path().join("caps.tsv").display().to_string();
    let text = ok(&discovla(&["gen-data", "--config", &cfg, "--out", &corpus, "--captions-out", &caps]));
    assert_eq!(text.trim(), "records=24");
    assert_eq!(fs::read_to_string(&caps).unwrap().lines().count(), 24 * 2);

    let run = dir.path().join("run").display().to_string();
    let args = ["train", "--config", &cfg, "--out-dir", &run, "--corpus-path", &corpus, "--pseudo-captions-path", &caps];
    ok(&discovla(&args));
    let ck = dir.path().join("run/checkpoint.json").display().to_string();
    let all = ok(&discovla(&["eval", "--checkpoint", &ck, "--corpus", &corpus]));
    assert_eq!(kv(&all, "t2v.queries"), 24.0);
}

#[test]
fn ablate_requires_seed_out_dir_and_presets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("abl").display().to_string();
    assert!(!discovla(&["ablate", "--out-dir", &out, "--preset", "lora"]).status.success());
    assert!(!discovla(&["ablate", "--seed", "1", "--preset", "lora"]).status.success());
    assert!(!discovla(&["ablate", "--seed", "1", "--out-dir", &out]).status.success());

    let args = ["ablate", "--seed", "3", "--out-dir", &out, "--preset", "lora,b1,full", "--config", &cfg];
    let a = ok(&discovla(&args));
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("lora") && lines[3].starts_with("full"));
    assert!(Path::new(&out).join("ablation.json").exists());
    assert_eq!(ok(&discovla(&args)), a);
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let bad = discovla(&["train", "--config", &cfg, "--no-such-key", "1"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("no_such_key"));
    let missing = discovla(&["eval", "--checkpoint", &dir.path().join("nope.json").display().to_string()]);
    assert!(!missing.status.success());
}
