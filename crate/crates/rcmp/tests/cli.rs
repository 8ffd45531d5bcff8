use std::fs;
use std::path::Path;

use rcmp::cli::{self, resolve, sidecar, TrainArgs, TrainCommandConfig, TrainFlags, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use rcmp::format;
use serde_json::{json, Value};

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn rcmp(args: &[&str]) -> Output {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run(std::iter::once("rcmp").chain(args.iter().copied()), &mut out, &mut err);
    Output { code, stdout: String::from_utf8(out).unwrap(), stderr: String::from_utf8(err).unwrap() }
}

fn ok(args: &[&str]) -> Output {
    let o = rcmp(args);
    assert_eq!(o.code, EXIT_OK, "{args:?}\nstdout: {}\nstderr: {}", o.stdout, o.stderr);
    o
}

fn json_ok(args: &[&str]) -> Value {
    let mut with = vec!["--json"];
    with.extend_from_slice(args);
    serde_json::from_str(ok(&with).stdout.trim()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two groups per class, split one to train and one to test.
const SPLIT: [&str; 6] = ["--split-train", "0.5", "--split-val", "0", "--split-test", "0.5"];

fn tiny_data(dir: &Path) -> String {
    let data = dir.join("data");
    ok(&["gen-data", "--out", p(&data), "--groups-per-class", "2", "--image-size", "16"]);
    p(&data).to_string()
}

fn with_split<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&SPLIT);
    v
}

#[test]
fn desk_pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = tiny_data(d);
    assert!(d.join("data/labels.json").exists() && d.join("data/dataset_manifest.json").exists());

    let dense = d.join("models/dense.rcmp");
    let train = json_ok(&with_split(&["train", "--data", &data, "--out", p(&dense), "--epochs", "1", "--batch-size", "16"]));
    assert_eq!(train["epochs"].as_array().unwrap().len(), 1);
    for suffix in ["config.json", "history.jsonl", "timing.json"] {
        assert!(sidecar(&dense, suffix).exists(), "{suffix}");
    }

    let pruned = d.join("models/pruned.rcmp");
    let prune = json_ok(&with_split(&["prune", "--data", &data, "--model", p(&dense), "--out", p(&pruned)]));
    let reduction = prune["report"]["reduction_percent"].as_f64().unwrap();
    assert!((60.0..70.0).contains(&reduction), "{reduction}");
    assert!(prune["report"]["loss_before"].is_number());
    assert!(sidecar(&pruned, "sparsity.json").exists());

    let tuned = d.join("models/finetuned.rcmp");
    ok(&with_split(&["finetune", "--data", &data, "--model", p(&pruned), "--out", p(&tuned), "--epochs", "1", "--batch-size", "16"]));
    let timing = cli::read_timing(&tuned).unwrap();
    assert!(timing.pipeline_time_ms >= timing.command_time_ms);
    assert!(timing.pipeline_time_ms > cli::read_timing(&pruned).unwrap().pipeline_time_ms);

    let quant = d.join("models/quantized.rcmp");
    let q = json_ok(&with_split(&[
        "quantize", "--data", &data, "--model", p(&dense), "--out", p(&quant),
        "--calibration-batches", "2", "--calibration-batch-size", "8",
    ]));
    assert_eq!(q["calibration_images"], 16);
    let ratio = q["quantized_blob_bytes"].as_f64().unwrap() / q["dense_blob_bytes"].as_f64().unwrap();
    assert!((0.24..0.27).contains(&ratio), "{ratio}");

    for (model, variant) in [(&dense, "dense"), (&pruned, "pruned"), (&tuned, "pruned_finetuned"), (&quant, "quantized")] {
        let out = d.join(format!("reports/{variant}.eval.json"));
        let e = json_ok(&with_split(&["eval", "--data", &data, "--model", p(model), "--out", p(&out)]));
        assert_eq!(e["samples"], 72);
        let doc: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(doc["variant"], variant);
        assert_eq!(doc["metrics"]["per_class"].as_array().unwrap().len(), 6);
        assert_eq!(doc["provenance"]["input_model_sha256"], doc["model_sha256"]);
        let curves = d.join(format!("reports/{variant}.eval_curves"));
        assert_eq!(fs::read_dir(&curves).unwrap().count(), 12, "{}", curves.display());
    }

    let bench_out = d.join("reports/bench.json");
    let b = ok(&with_split(&[
        "bench", "--data", &data, "--dense", p(&dense), "--pruned-finetuned", p(&tuned), "--quantized", p(&quant),
        "--warmup", "1", "--repeats", "3", "--load-repeats", "1", "--out", p(&bench_out),
    ]));
    assert_eq!(b.stdout.lines().count(), 4);
    let reports: Vec<Value> = serde_json::from_str(&fs::read_to_string(&bench_out).unwrap()).unwrap();
    let order: Vec<&str> = reports.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(order, ["dense", "pruned_finetuned", "quantized"]);
    assert!(reports.iter().all(|r| r["measured_count"] == 3 && r["pipeline_time_ms"].is_number()));

    let inspect = ok(&["inspect", "--model", p(&quant)]).stdout;
    assert!(inspect.contains("quantization: u8 affine") && inspect.contains("produced by: quantize"), "{inspect}");
    let inspect = ok(&["inspect", "--model", p(&pruned)]).stdout;
    assert!(inspect.contains("masks stored"), "{inspect}");
}

#[test]
fn zero_quantile_prune_keeps_the_model_hash() {
    let dir = tempfile::tempdir().unwrap();
    let (dense, pruned) = (dir.path().join("dense.rcmp"), dir.path().join("pruned.rcmp"));
    let model = rcmp_core::model::Model::build(rcmp_core::model::ModelConfig::resnet_desk(6), 0).unwrap();
    format::save(&format::StoredModel::Dense(model), None, &dense).unwrap();
    let s = json_ok(&["prune", "--model", p(&dense), "--out", p(&pruned), "--retain-quantile", "0"]);
    assert_eq!(s["model_sha256"], s["input_model_sha256"]);
    let (a, _) = format::load(&dense).unwrap();
    let (b, manifest) = format::load(&pruned).unwrap();
    assert_eq!(format::content_hash(&a), format::content_hash(&b));
    assert_eq!(manifest.provenance.unwrap()["input_model_sha256"], json!(format::content_hash(&a)));
}

#[test]
fn inspect_reports_full_parameter_count() {
    let out = ok(&["inspect", "--preset", "resnet18-full", "--input-size", "224"]).stdout;
    assert!(out.contains("parameters: 11,179,590"), "{out}");
    assert!(out.contains("fc "));
    let s = json_ok(&["inspect", "--preset", "resnet18-full"]);
    assert_eq!(s["parameters"], 11_179_590);
    assert_eq!(cli::thousands(1_000), "1,000");
    assert_eq!(cli::thousands(999), "999");
}

#[test]
fn exit_codes_and_json_errors() {
    assert_eq!(rcmp(&["--help"]).code, EXIT_OK);
    assert_eq!(rcmp(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(rcmp(&["train", "--epochs", "many"]).code, EXIT_USAGE);

    let missing = rcmp(&["--json", "train"]);
    assert_eq!(missing.code, EXIT_USAGE);
    let err: Value = serde_json::from_str(missing.stderr.trim()).unwrap();
    assert_eq!((err["error"]["kind"].as_str(), err["error"]["exit_code"].as_i64()), (Some("usage"), Some(1)));
    assert_eq!(missing.stderr.trim().lines().count(), 1);

    let bad_flag = rcmp(&["--json", "inspect", "--bogus"]);
    assert_eq!(bad_flag.code, EXIT_USAGE);
    assert_eq!(serde_json::from_str::<Value>(bad_flag.stderr.trim()).unwrap()["error"]["kind"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.rcmp");
    fs::write(&junk, b"not a model at all").unwrap();
    let bad = rcmp(&["--json", "inspect", "--model", p(&junk)]);
    assert_eq!(bad.code, EXIT_RUNTIME);
    let err: Value = serde_json::from_str(bad.stderr.trim()).unwrap();
    assert_eq!(err["error"]["kind"], "bad_magic");
    assert_eq!(err["error"]["exit_code"], 2);

    let absent = rcmp(&["inspect", "--model", p(&dir.path().join("absent.rcmp"))]);
    assert_eq!(absent.code, EXIT_RUNTIME);
    assert!(absent.stderr.starts_with("error: ") && absent.stderr.contains("absent.rcmp"));

    let config = dir.path().join("cfg.json");
    fs::write(&config, r#"{"inspect": {"no_such_key": 1}}"#).unwrap();
    assert_eq!(rcmp(&["--config", p(&config), "inspect", "--preset", "resnet-desk"]).code, EXIT_USAGE);
}

fn train_flags(seed: Option<u64>) -> TrainArgs {
    TrainArgs { train: TrainFlags { seed, ..TrainFlags::default() }, ..TrainArgs::default() }
}

#[test]
fn seed_precedence_is_flags_then_file_then_env_then_default() {
    let seed = |flags: Option<u64>, file: Option<Value>, env: Option<&str>| {
        let (c, echoed): (TrainCommandConfig, Value) = resolve("train", &train_flags(flags), file.as_ref(), env).unwrap();
        assert_eq!(echoed["seed"], c.train.seed);
        c.train.seed
    };
    assert_eq!(seed(None, None, None), 0);
    assert_eq!(seed(None, None, Some("5")), 5);
    assert_eq!(seed(None, Some(json!({ "seed": 7 })), Some("5")), 7);
    assert_eq!(seed(None, Some(json!({ "train": { "seed": 8 }, "prune": { "seed": 1 } })), Some("5")), 8);
    assert_eq!(seed(Some(9), Some(json!({ "seed": 7 })), Some("5")), 9);

    let r: Result<(TrainCommandConfig, Value), _> = resolve("train", &train_flags(None), None, Some("abc"));
    assert_eq!(r.unwrap_err().kind(), "usage");
    let r: Result<(TrainCommandConfig, Value), _> = resolve("train", &train_flags(None), Some(&json!({ "sed": 1 })), None);
    assert_eq!(r.unwrap_err().kind(), "usage");

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("cfg.json");
    fs::write(&file, r#"{"groups_per_class": 1, "image_size": 12, "seed": 3}"#).unwrap();
    let out = dir.path().join("d");
    ok(&["--config", p(&file), "gen-data", "--out", p(&out), "--seed", "4"]);
    let echoed: Value = serde_json::from_str(&fs::read_to_string(sidecar(&out, "config.json")).unwrap()).unwrap();
    assert_eq!((echoed["seed"].as_u64(), echoed["image_size"].as_u64()), (Some(4), Some(12)));
}

#[test]
fn identical_configs_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = tiny_data(d);
    let dense = d.join("dense.rcmp");
    let report = d.join("eval.json");
    let train = with_split(&["train", "--data", &data, "--out", p(&dense), "--epochs", "1", "--batch-size", "24", "--seed", "3"]);
    let eval = with_split(&["eval", "--data", &data, "--model", p(&dense), "--out", p(&report)]);
    let mut runs = Vec::new();
    for _ in 0..2 {
        ok(&train);
        ok(&eval);
        runs.push((fs::read(&dense).unwrap(), fs::read(&report).unwrap(), fs::read(sidecar(&dense, "history.jsonl")).unwrap()));
    }
    assert!(runs[0] == runs[1], "repeated runs differ");
}
