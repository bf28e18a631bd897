use std::path::{Path, PathBuf};
use std::process::Command;

use xconsist::ledger::{RunLedger, LEDGER_FILE};
use xconsist::pipeline::attribution_file;
use xconsist::report::{Report, REPORT_JSON};
use xconsist::{read_json, run_all, run_stage, Context, Manifest, Options, Stage};
use xconsist_core::explainers::Method;
use xconsist_core::models::Arch;

const BLOBS: &str = r#"
schema_version = 1
name = "blobs"
master_seed = 3
output_dir = "out"

[dataset]
kind = "blobs"
n_per_class = 30
n_features = 6
n_classes = 3

[training]
epochs = 4

[variations]
seeds = [0, 1, 2]
shuffle_seeds = [0, 1]
dropout_rates = [0.1, 0.25]

[[archs]]
arch = "mlp"

[[archs]]
arch = "svm_rbf"

[explain]
n_samples = 12

[quality]
n_samples = 2
n_perturb = 10
sensitivity_samples = 3
max_models_per_arch = 2
"#;

fn write_manifest(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("manifest.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn context(path: &Path, jobs: usize) -> Context {
    let lm = Manifest::load(path, false).unwrap();
    Context::new(lm, Options { jobs, normalize: false }).unwrap()
}

fn ledger(ctx: &Context) -> RunLedger {
    read_json(&ctx.path(LEDGER_FILE)).unwrap()
}

fn cli(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_xconsist"))
        .args(args)
        .env("RUST_LOG", "error")
        .status()
        .unwrap()
        .code()
        .unwrap()
}

#[test]
fn runs_are_byte_identical_across_job_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ctx_a = context(&write_manifest(a.path(), BLOBS), 1);
    let ctx_b = context(&write_manifest(b.path(), BLOBS), 3);
    run_all(&ctx_a).unwrap();
    run_all(&ctx_b).unwrap();
    let ra = std::fs::read(ctx_a.path(REPORT_JSON)).unwrap();
    let rb = std::fs::read(ctx_b.path(REPORT_JSON)).unwrap();
    assert!(ra == rb, "report.json differs between runs");

    let report: Report = serde_json::from_slice(&ra).unwrap();
    assert_eq!(report.consistency.len(), 3);
    assert!(report.svcca.is_none());
    assert!(report.gaps.iter().any(|g| g == "svcca: absent (not requested)"), "{:?}", report.gaps);
    assert!(report.quality.is_some());
}

#[test]
fn report_matches_published_schema() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{BLOBS}\n[svcca]\nprobe_samples = 18\n");
    let ctx = context(&write_manifest(dir.path(), &text), 1);
    run_all(&ctx).unwrap();
    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/report.schema.json");
    let schema: serde_json::Value = read_json(&schema_path).unwrap();
    let report: serde_json::Value = read_json(&ctx.path(REPORT_JSON)).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&report).map(|e| format!("{}: {e}", e.instance_path())).collect();
    assert!(errors.is_empty(), "{errors:#?}");
    assert!(report["svcca"].is_object());
}

#[test]
fn deleting_an_attribution_recomputes_only_its_dependents() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(dir.path(), BLOBS);
    let ctx = context(&path, 1);
    run_all(&ctx).unwrap();
    let before = std::fs::read(ctx.path(REPORT_JSON)).unwrap();
    let (id, _) = ctx.arch_models(Arch::SvmRbf).remove(1);
    let victim = attribution_file(Method::Shap, &id);
    let untouched = ctx.path(&attribution_file(Method::Shap, &ctx.arch_models(Arch::Mlp)[0].0));
    let mtime = std::fs::metadata(&untouched).unwrap().modified().unwrap();
    std::fs::remove_file(ctx.path(&victim)).unwrap();
    drop(ctx);

    let ctx = context(&path, 1);
    run_all(&ctx).unwrap();
    let stages = ledger(&ctx).stages;
    assert_eq!(stages["train"].cells_run, 0);
    assert_eq!(stages["explain"].cells_run, 1);
    // The regenerated attribution hashes the same, so its dependents stay fresh.
    assert_eq!(stages["consistency"].cells_run, 0);
    assert!(ctx.path(&victim).exists());
    assert_eq!(std::fs::metadata(&untouched).unwrap().modified().unwrap(), mtime);
    assert!(std::fs::read(ctx.path(REPORT_JSON)).unwrap() == before);

    // A third pass has nothing left to do.
    let ctx = context(&path, 1);
    run_all(&ctx).unwrap();
    let stages = ledger(&ctx).stages;
    for stage in ["train", "explain", "consistency", "quality"] {
        assert_eq!(stages[stage].cells_run, 0, "{stage}");
    }
}

#[test]
fn edited_artifact_is_detected_and_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(dir.path(), BLOBS);
    let ctx = context(&path, 1);
    run_stage(&ctx, Stage::Train).unwrap();
    let (id, _) = ctx.arch_models(Arch::Mlp).remove(0);
    let model = ctx.path(&xconsist::pipeline::model_file(&id));
    let original = std::fs::read(&model).unwrap();
    std::fs::write(&model, b"{}").unwrap();
    drop(ctx);

    let ctx = context(&path, 1);
    run_stage(&ctx, Stage::Train).unwrap();
    assert_eq!(ledger(&ctx).stages["train"].cells_run, 1);
    assert!(std::fs::read(&model).unwrap() == original);
}

#[test]
fn stages_out_of_order_report_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(&write_manifest(dir.path(), BLOBS), 1);
    let err = run_stage(&ctx, Stage::Consistency).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}

#[test]
fn svcca_without_a_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(&write_manifest(dir.path(), BLOBS), 1);
    assert_eq!(run_stage(&ctx, Stage::Svcca).unwrap_err().exit_code(), 2);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p.to_str().unwrap().to_string()
    };

    let bad = manifest("bad.toml", &BLOBS.replace("schema_version = 1", "schema_version = 2"));
    assert_eq!(cli(&["train", "--manifest", &bad]), 2);

    let missing = manifest(
        "missing.toml",
        "schema_version = 1\noutput_dir = \"o\"\n[dataset]\nkind = \"idx\"\nimages = \"nope\"\nlabels = \"nope\"\n[[archs]]\narch = \"mlp\"\n",
    );
    assert_eq!(cli(&["train", "--manifest", &missing]), 2);

    let incapable = manifest(
        "incapable.toml",
        &BLOBS.replace("arch = \"svm_rbf\"", "arch = \"svm_rbf\"\nexplainers = [\"int_grad\"]"),
    );
    for cmd in ["train", "explain", "consistency", "quality", "report", "run"] {
        assert_eq!(cli(&[cmd, "--manifest", &incapable]), 3, "{cmd}");
    }

    let ok = manifest("ok.toml", BLOBS);
    assert_eq!(cli(&["explain", "--manifest", &ok]), 4);
    assert_eq!(cli(&["run", "--manifest", &ok, "--jobs", "2"]), 0);
    assert_eq!(cli(&["consistency", "--manifest", &ok, "--normalize"]), 0);
    assert!(dir.path().join("out/consistency_normalized").is_dir());
}
