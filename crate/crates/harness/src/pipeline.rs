//! Stage runners. Each stage turns the manifest into a list of cells, runs
//! them in parallel (up to `--jobs`), and records every output in the
//! ledger. Stages are barriers; later stages read earlier outputs from disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xconsist_core::consistency::{
    build_pairs, consistency, separability, separability_distribution, split_label, write_results_csv,
    ConsistencyReport, Quartiles, VariationPair, LR_GRAD_TOL, LR_LAMBDA, LR_MAX_EPOCHS,
};
use xconsist_core::datasets::{binary_subset, fixed_split, load_idx, stratified_sample, synth_blobs, Dataset, Split};
use xconsist_core::explainers::{
    integrated_gradients, kernel_shap, normalize_attribution, predicted_class, read_attributions, write_attributions,
    Attribution, IgConfig, Method, ShapConfig,
};
use xconsist_core::models::{load_model, save_model, train, Arch, Family, TrainedModel, VariationConfig};
use xconsist_core::numkit::{derive_stream, mean, std_dev, Matrix};
use xconsist_core::quality::{
    consistency_quality_correlation, infidelity, sensitivity_max, write_quality_csv, QualityCorrelation,
    QualityRecord,
};
use xconsist_core::svcca::{layer_curves, write_curves_csv, SvccaCurve, VARIANCE_KEPT};

use crate::error::{HarnessError, Result};
use crate::ledger::{Ledger, StageRecord};
use crate::manifest::{ArchSpec, BackgroundSpec, DatasetSpec, LoadedManifest, QualitySpec};
use crate::{hash_file, hex_sha256, read_json, write_atomic, write_json};

pub const SPLIT_FILE: &str = "data/split.json";
pub const ACCURACY_JSON: &str = "train/accuracy.json";
pub const ACCURACY_CSV: &str = "train/accuracy.csv";
pub const QUALITY_SUMMARY: &str = "quality/summary.json";
pub const QUALITY_CSV: &str = "quality/records.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Train,
    Explain,
    Consistency,
    Quality,
    Svcca,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Train,
        Stage::Explain,
        Stage::Consistency,
        Stage::Quality,
        Stage::Svcca,
        Stage::Report,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Explain => "explain",
            Stage::Consistency => "consistency",
            Stage::Quality => "quality",
            Stage::Svcca => "svcca",
            Stage::Report => "report",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Options {
    pub jobs: usize,
    /// Feed max-abs normalised attributions to the discriminator.
    pub normalize: bool,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            jobs: 1,
            normalize: false,
        }
    }
}

pub struct Context {
    pub lm: LoadedManifest,
    pub opts: Options,
    pub ledger: Ledger,
    out: PathBuf,
    pool: rayon::ThreadPool,
    dataset: OnceLock<Dataset>,
}

// Artifact paths, relative to the output directory.

pub fn model_file(id: &str) -> String {
    format!("models/{id}.json")
}

pub fn attribution_file(method: Method, id: &str) -> String {
    format!("attributions/{method}/{id}.jsonl")
}

pub fn consistency_dir(normalize: bool) -> &'static str {
    if normalize {
        "consistency_normalized"
    } else {
        "consistency"
    }
}

pub fn consistency_file(normalize: bool, arch: Arch, method: Method, ext: &str) -> String {
    format!("{}/{arch}_{method}.{ext}", consistency_dir(normalize))
}

pub fn quality_file(method: Method, id: &str) -> String {
    format!("quality/{method}/{id}.json")
}

pub fn svcca_file(arch: Arch, ext: &str) -> String {
    format!("svcca/{arch}.{ext}")
}

/// Per-model and per-family test accuracy (fractions, not percent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub models: Vec<ModelAccuracy>,
    pub summary: Vec<AccuracySummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelAccuracy {
    pub model_id: String,
    pub arch: Arch,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub dropout_rate: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub arch: Arch,
    /// `None`: every distinct model of the arch.
    pub family: Option<Family>,
    pub n_models: usize,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyArtifact {
    pub normalized: bool,
    pub report: ConsistencyReport,
    pub distribution: Quartiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub records: Vec<QualityRecord>,
    pub correlation: Option<QualityCorrelation>,
    /// Why the correlation is missing, when it is.
    pub correlation_gap: Option<String>,
}

struct Cell<'a> {
    label: String,
    outputs: Vec<String>,
    fingerprint: String,
    compute: Box<dyn FnOnce() -> Result<()> + Send + 'a>,
}

impl<'a> Cell<'a> {
    fn new(
        label: impl Into<String>,
        outputs: Vec<String>,
        fingerprint: String,
        compute: impl FnOnce() -> Result<()> + Send + 'a,
    ) -> Self {
        Self {
            label: label.into(),
            outputs,
            fingerprint,
            compute: Box::new(compute),
        }
    }
}

enum Outcome {
    Ran,
    Skipped,
    Failed(String),
}

/// Counters and failures of one stage invocation.
struct StageRun {
    stage: Stage,
    start: Instant,
    ran: usize,
    skipped: usize,
    failures: Vec<String>,
}

impl StageRun {
    fn new(stage: Stage) -> Self {
        log::info!("stage {}", stage.tag());
        Self {
            stage,
            start: Instant::now(),
            ran: 0,
            skipped: 0,
            failures: Vec::new(),
        }
    }

    fn run(&mut self, ctx: &Context, cells: Vec<Cell<'_>>) {
        let stage = self.stage;
        let outcomes: Vec<Outcome> = ctx
            .pool
            .install(|| cells.into_par_iter().map(|c| ctx.run_cell(stage, c)).collect());
        for o in outcomes {
            match o {
                Outcome::Ran => self.ran += 1,
                Outcome::Skipped => self.skipped += 1,
                Outcome::Failed(msg) => self.failures.push(msg),
            }
        }
    }

    fn fail(&mut self, msg: String) {
        log::error!("{}: {msg}", self.stage.tag());
        self.failures.push(msg);
    }

    fn finish(self, ctx: &Context) -> Result<()> {
        let record = StageRecord {
            wall_clock_s: self.start.elapsed().as_secs_f64(),
            cells_run: self.ran,
            cells_skipped: self.skipped,
            cells_failed: self.failures.len(),
            finished_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        log::info!(
            "stage {} done in {:.1}s: {} run, {} up to date, {} failed",
            self.stage.tag(),
            record.wall_clock_s,
            record.cells_run,
            record.cells_skipped,
            record.cells_failed
        );
        ctx.ledger.record_stage(self.stage.tag(), record)?;
        if self.failures.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Partial {
                failures: self.failures,
            })
        }
    }
}

/// Hash over labelled parts; the crate version is mixed in so a new build
/// does not silently reuse artifacts from an older one.
fn fingerprint(parts: &[&str]) -> String {
    let mut buf = String::from(env!("CARGO_PKG_VERSION"));
    for p in parts {
        buf.push('\u{1f}');
        buf.push_str(p);
    }
    hex_sha256(buf.as_bytes())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("value serializes")
}

pub fn dataset_fingerprint(ds: &Dataset) -> String {
    let mut bytes = Vec::with_capacity(ds.x().as_slice().len() * 8 + ds.len() * 8 + 64);
    bytes.extend_from_slice(ds.name().as_bytes());
    bytes.extend_from_slice(&(ds.n_classes() as u64).to_le_bytes());
    bytes.extend_from_slice(&(ds.n_features() as u64).to_le_bytes());
    for v in ds.x().as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &y in ds.y() {
        bytes.extend_from_slice(&(y as u64).to_le_bytes());
    }
    hex_sha256(&bytes)
}

pub fn prepare_dataset(lm: &LoadedManifest) -> Result<Dataset> {
    let seed = lm.manifest.master_seed;
    match &lm.manifest.dataset {
        DatasetSpec::Idx {
            images,
            labels,
            subset,
            classes,
            ..
        } => {
            let (img, lab) = (lm.resolve(images), lm.resolve(labels));
            let mut ds = load_idx(&img, &lab).map_err(|e| {
                HarnessError::Config(format!(
                    "cannot load dataset {} / {}: {e} (scripts/fetch_mnist.sh writes the default files)",
                    img.display(),
                    lab.display()
                ))
            })?;
            if let Some([a, b]) = classes {
                ds = binary_subset(&ds, *a, *b)?;
            }
            if let Some(n) = subset {
                let idx = stratified_sample(&ds, *n, &mut derive_stream(seed, "dataset/subset"))?;
                ds = ds.subset(&idx);
            }
            Ok(ds)
        }
        DatasetSpec::Blobs {
            n_per_class,
            n_features,
            n_classes,
            separation,
            ..
        } => Ok(synth_blobs(
            *n_per_class,
            *n_features,
            *n_classes,
            *separation,
            &mut derive_stream(seed, "dataset/blobs"),
        )?),
    }
}

/// The attribution procedure shared by the explain and quality stages.
pub struct Explainer {
    pub method: Method,
    pub shap: Option<ShapConfig>,
    pub ig: Option<IgConfig>,
    master_seed: u64,
    /// Describes the configuration for fingerprints.
    pub params: String,
}

impl Explainer {
    /// `label` keys the coalition stream; identical labels reproduce
    /// identical SHAP values.
    pub fn explain(
        &self,
        model: &TrainedModel,
        x: &[f64],
        sample_id: usize,
        target: usize,
        label: &str,
    ) -> Result<Attribution> {
        Ok(match self.method {
            Method::Shap => kernel_shap(
                model,
                x,
                sample_id,
                target,
                self.shap.as_ref().expect("shap config"),
                &mut derive_stream(self.master_seed, label),
            )?,
            Method::IntGrad => {
                integrated_gradients(model, x, sample_id, target, self.ig.as_ref().expect("ig config"))?
            }
            Method::ExactShapley => return Err(HarnessError::Config("exact Shapley is not a pipeline explainer".into())),
        })
    }
}

impl Context {
    pub fn new(lm: LoadedManifest, opts: Options) -> Result<Self> {
        let out = lm.output_dir();
        std::fs::create_dir_all(&out).map_err(|e| HarnessError::io(&out, e))?;
        let ledger = Ledger::open(&out, &lm.content_hash)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs.max(1))
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            lm,
            opts,
            ledger,
            out,
            pool,
            dataset: OnceLock::new(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn dataset(&self) -> Result<&Dataset> {
        if let Some(ds) = self.dataset.get() {
            return Ok(ds);
        }
        let ds = prepare_dataset(&self.lm)?;
        Ok(self.dataset.get_or_init(|| ds))
    }

    pub fn split(&self) -> Result<Split> {
        let path = self.path(SPLIT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|_| {
            HarnessError::Partial {
                failures: vec![format!("{SPLIT_FILE} is missing; run `xconsist train` first")],
            }
        })?;
        let split = Split::from_json(&text)?;
        split.validate(self.dataset()?.len())?;
        Ok(split)
    }

    /// Test-split rows that get explained, in split order.
    pub fn explained_samples(&self, split: &Split) -> Vec<usize> {
        let n = self.lm.manifest.explain.n_samples.unwrap_or(split.test.len());
        split.test[..n.min(split.test.len())].to_vec()
    }

    /// Content hash of an upstream artifact, or an error naming the stage
    /// that produces it.
    fn input_hash(&self, rel: &str, producer: &str) -> std::result::Result<String, String> {
        hash_file(&self.path(rel))
            .map(|(h, _)| h)
            .map_err(|_| format!("missing {rel}; run `xconsist {producer}` first"))
    }

    fn run_cell(&self, stage: Stage, cell: Cell<'_>) -> Outcome {
        if cell.outputs.iter().all(|o| self.ledger.is_fresh(o, &cell.fingerprint)) {
            log::debug!("{}: {} up to date", stage.tag(), cell.label);
            return Outcome::Skipped;
        }
        let t = Instant::now();
        let result = (cell.compute)().and_then(|()| {
            for o in &cell.outputs {
                self.ledger.record(o, stage.tag(), &cell.fingerprint)?;
            }
            Ok(())
        });
        match result {
            Ok(()) => {
                log::info!("{}: {} ({:.1}s)", stage.tag(), cell.label, t.elapsed().as_secs_f64());
                Outcome::Ran
            }
            Err(e) => {
                log::error!("{}: {} failed: {e}", stage.tag(), cell.label);
                Outcome::Failed(format!("{}: {e}", cell.label))
            }
        }
    }

    pub fn arch_spec(&self, arch: Arch) -> Option<&ArchSpec> {
        self.lm.manifest.archs.iter().find(|s| s.arch == arch)
    }

    /// Configs of one arch in manifest order, including per-family
    /// duplicates of the base.
    pub fn arch_configs(&self, arch: Arch) -> Vec<VariationConfig> {
        self.lm.manifest.expand().into_iter().filter(|c| c.arch == arch).collect()
    }

    /// Distinct model ids of one arch, in first-appearance order.
    pub fn arch_models(&self, arch: Arch) -> Vec<(String, VariationConfig)> {
        let mut seen: Vec<(String, VariationConfig)> = Vec::new();
        for c in self.arch_configs(arch) {
            let id = c.model_id();
            if !seen.iter().any(|(s, _)| *s == id) {
                seen.push((id, c));
            }
        }
        seen
    }

    /// (arch, explainer) cells in manifest order. Fails with a capability
    /// error if the manifest explicitly asks for an impossible pairing.
    pub fn explain_matrix(&self) -> Result<Vec<(Arch, Method)>> {
        let mut out = Vec::new();
        for spec in &self.lm.manifest.archs {
            for m in self.lm.manifest.explainers(spec)? {
                out.push((spec.arch, m));
            }
        }
        Ok(out)
    }

    pub fn explainer(&self, method: Method, split: &Split) -> Result<Explainer> {
        let m = &self.lm.manifest;
        let ds = self.dataset()?;
        let d = ds.n_features();
        match method {
            Method::Shap => {
                let spec = &m.explain.shap;
                let background = match spec.background {
                    BackgroundSpec::Stratified { size } => {
                        let train_ds = ds.subset(&split.train);
                        let idx = stratified_sample(&train_ds, size, &mut derive_stream(m.master_seed, "explain/background"))?;
                        train_ds.x().select_rows(&idx)
                    }
                    BackgroundSpec::Zero => Matrix::zeros(1, d),
                };
                let k = spec.n_coalitions.unwrap_or_else(|| ShapConfig::default_coalitions(d));
                let bg_hash = hex_sha256(&background.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>());
                let cfg = ShapConfig::new(background, k, spec.ridge_reg).map_err(|e| HarnessError::Config(e.to_string()))?;
                cfg.validate(d).map_err(|e| HarnessError::Config(e.to_string()))?;
                Ok(Explainer {
                    method,
                    shap: Some(cfg),
                    ig: None,
                    master_seed: m.master_seed,
                    params: format!("shap k={k} ridge={} bg={bg_hash}", spec.ridge_reg),
                })
            }
            Method::IntGrad => Ok(Explainer {
                method,
                shap: None,
                ig: Some(IgConfig::zero(d, m.explain.ig.steps)),
                master_seed: m.master_seed,
                params: format!("ig steps={} baseline=zero", m.explain.ig.steps),
            }),
            Method::ExactShapley => Err(HarnessError::Config("exact Shapley is not a pipeline explainer".into())),
        }
    }

    fn load_model(&self, id: &str) -> Result<TrainedModel> {
        Ok(load_model(&self.path(&model_file(id)))?)
    }
}

fn mkdirs(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    Ok(())
}

/// Runs `write` against a temporary sibling and renames it into place.
fn write_via_tmp(path: &Path, write: impl FnOnce(&Path) -> xconsist_core::Result<()>) -> Result<()> {
    mkdirs(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

pub fn run_train(ctx: &Context) -> Result<()> {
    let mut st = StageRun::new(Stage::Train);
    let m = &ctx.lm.manifest;
    let ds = ctx.dataset()?;
    let ds_fp = dataset_fingerprint(ds);
    let test_fraction = match &m.dataset {
        DatasetSpec::Idx { test_fraction, .. } | DatasetSpec::Blobs { test_fraction, .. } => *test_fraction,
    };
    st.run(
        ctx,
        vec![Cell::new(
            "split",
            vec![SPLIT_FILE.into()],
            fingerprint(&["split", &ds_fp, &test_fraction.to_string(), &m.master_seed.to_string()]),
            move || {
                let split = fixed_split(ds, test_fraction, &mut derive_stream(m.master_seed, "dataset/split"))?;
                write_atomic(&ctx.path(SPLIT_FILE), split.to_json().as_bytes())
            },
        )],
    );
    if !st.failures.is_empty() {
        return st.finish(ctx);
    }
    let split = ctx.split()?;
    let split_hash = ctx.input_hash(SPLIT_FILE, "train").map_err(HarnessError::Config)?;

    let models = m.models();
    let cells = models
        .iter()
        .map(|(id, cfg)| {
            let split = &split;
            Cell::new(
                format!("train {id}"),
                vec![model_file(id)],
                fingerprint(&["model", &ds_fp, &split_hash, &to_json(cfg)]),
                move || {
                    let model = train(ds, split, cfg)?;
                    let path = ctx.path(&model_file(id));
                    mkdirs(&path)?;
                    Ok(save_model(&model, &path)?)
                },
            )
        })
        .collect();
    st.run(ctx, cells);

    let mut parts = vec!["accuracy".to_string(), split_hash.clone()];
    let mut missing = Vec::new();
    for id in models.keys() {
        match ctx.input_hash(&model_file(id), "train") {
            Ok(h) => parts.push(h),
            Err(e) => missing.push(e),
        }
    }
    if missing.is_empty() {
        let parts: Vec<&str> = parts.iter().map(String::as_str).collect();
        let split = &split;
        st.run(
            ctx,
            vec![Cell::new(
                "accuracy table",
                vec![ACCURACY_JSON.into(), ACCURACY_CSV.into()],
                fingerprint(&parts),
                move || write_accuracy(ctx, split),
            )],
        );
    } else {
        st.fail(format!("accuracy table skipped: {}", missing.join("; ")));
    }
    st.finish(ctx)
}

fn write_accuracy(ctx: &Context, split: &Split) -> Result<()> {
    let ds = ctx.dataset()?;
    let x = ds.x().select_rows(&split.test);
    let y: Vec<usize> = split.test.iter().map(|&i| ds.y()[i]).collect();
    let models = ctx.lm.manifest.models();
    let rows: Vec<ModelAccuracy> = ctx.pool.install(|| {
        models
            .par_iter()
            .map(|(id, c)| {
                let model = ctx.load_model(id)?;
                Ok(ModelAccuracy {
                    model_id: id.clone(),
                    arch: c.arch,
                    init_seed: c.init_seed,
                    shuffle_seed: c.shuffle_seed,
                    dropout_rate: c.dropout_rate,
                    accuracy: model.accuracy(&x, &y)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let acc: BTreeMap<&str, f64> = rows.iter().map(|r| (r.model_id.as_str(), r.accuracy)).collect();
    let mut summary = Vec::new();
    for spec in &ctx.lm.manifest.archs {
        let configs = ctx.arch_configs(spec.arch);
        let mut groups: Vec<(Option<Family>, Vec<String>)> = vec![(None, ctx.arch_models(spec.arch).into_iter().map(|(id, _)| id).collect())];
        for fam in ctx.lm.manifest.families(spec) {
            groups.push((Some(fam), configs.iter().filter(|c| c.family == fam).map(|c| c.model_id()).collect()));
        }
        for (family, ids) in groups {
            let vals: Vec<f64> = ids.iter().map(|id| acc[id.as_str()]).collect();
            summary.push(AccuracySummary {
                arch: spec.arch,
                family,
                n_models: vals.len(),
                mean: mean(&vals),
                std: std_dev(&vals),
            });
        }
    }
    let table = AccuracyTable { models: rows, summary };
    write_json(&ctx.path(ACCURACY_JSON), &table)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["arch", "family", "n_models", "mean_accuracy", "std_accuracy"]).expect("in-memory csv");
    for s in &table.summary {
        w.write_record([
            s.arch.tag().to_string(),
            s.family.map_or("all".to_string(), |f| f.tag().to_string()),
            s.n_models.to_string(),
            s.mean.to_string(),
            s.std.to_string(),
        ])
        .expect("in-memory csv");
    }
    write_atomic(&ctx.path(ACCURACY_CSV), &w.into_inner().expect("in-memory csv"))
}

pub fn run_explain(ctx: &Context) -> Result<()> {
    let matrix = ctx.explain_matrix()?;
    let mut st = StageRun::new(Stage::Explain);
    let ds = ctx.dataset()?;
    let split = ctx.split()?;
    let samples = ctx.explained_samples(&split);
    let samples_json = to_json(&samples);
    let mut explainers = BTreeMap::new();
    for &(_, method) in &matrix {
        if let std::collections::btree_map::Entry::Vacant(e) = explainers.entry(method) {
            e.insert(ctx.explainer(method, &split)?);
        }
    }
    let mut cells = Vec::new();
    for &(arch, method) in &matrix {
        let explainer = &explainers[&method];
        for (id, _) in ctx.arch_models(arch) {
            let model_hash = match ctx.input_hash(&model_file(&id), "train") {
                Ok(h) => h,
                Err(e) => {
                    st.fail(e);
                    continue;
                }
            };
            let rel = attribution_file(method, &id);
            let samples = &samples;
            cells.push(Cell::new(
                format!("{method} {id}"),
                vec![rel.clone()],
                fingerprint(&["explain", method.tag(), &model_hash, &samples_json, &explainer.params]),
                move || {
                    let model = ctx.load_model(&id)?;
                    let attrs = samples
                        .par_iter()
                        .map(|&i| {
                            let x = ds.x().row(i);
                            let target = predicted_class(&model, x)?;
                            explainer.explain(&model, x, i, target, &format!("explain/{method}/{id}/{i}"))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let flagged = attrs.iter().filter(|a| a.flag.is_some()).count();
                    if flagged > 0 {
                        log::warn!("{method} {id}: {flagged} attribution(s) needed extra ridge");
                    }
                    write_via_tmp(&ctx.path(&rel), |p| write_attributions(p, &attrs))
                },
            ));
        }
    }
    st.run(ctx, cells);
    st.finish(ctx)
}

pub fn run_consistency(ctx: &Context) -> Result<()> {
    let matrix = ctx.explain_matrix()?;
    let mut st = StageRun::new(Stage::Consistency);
    let normalize = ctx.opts.normalize;
    let seed = ctx.lm.manifest.master_seed;
    let mut cells = Vec::new();
    for (arch, method) in matrix {
        let pairs = build_pairs(&ctx.arch_configs(arch));
        if pairs.is_empty() {
            st.fail(format!("{arch}/{method}: no variation pairs (every family needs at least two values)"));
            continue;
        }
        let ids = ctx.arch_models(arch).into_iter().map(|(id, _)| id).collect::<Vec<_>>();
        let mut parts = vec![
            "consistency".to_string(),
            method.tag().into(),
            normalize.to_string(),
            format!("{LR_LAMBDA} {LR_GRAD_TOL} {LR_MAX_EPOCHS}"),
            to_json(&pairs),
        ];
        let hashes: std::result::Result<Vec<String>, String> =
            ids.iter().map(|id| ctx.input_hash(&attribution_file(method, id), "explain")).collect();
        match hashes {
            Ok(h) => parts.extend(h),
            Err(e) => {
                st.fail(format!("{arch}/{method}: {e}"));
                continue;
            }
        }
        let parts: Vec<&str> = parts.iter().map(String::as_str).collect();
        let json_rel = consistency_file(normalize, arch, method, "json");
        let csv_rel = consistency_file(normalize, arch, method, "csv");
        cells.push(Cell::new(
            format!("{arch}/{method}"),
            vec![json_rel.clone(), csv_rel.clone()],
            fingerprint(&parts),
            move || {
                let mut attrs = BTreeMap::new();
                for id in &ids {
                    let mut a = read_attributions(&ctx.path(&attribution_file(method, id)))?;
                    if normalize {
                        a = a.iter().map(normalize_attribution).collect();
                    }
                    attrs.insert(id.clone(), a);
                }
                let results = pairs
                    .par_iter()
                    .map(|p: &VariationPair| {
                        Ok(separability(
                            p,
                            &attrs[&p.a],
                            &attrs[&p.b],
                            &mut derive_stream(seed, &split_label(p, method.tag())),
                        )?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let artifact = ConsistencyArtifact {
                    normalized: normalize,
                    report: consistency(arch.tag(), method.tag(), &results)?,
                    distribution: separability_distribution(arch.tag(), method.tag(), &results)?,
                };
                write_json(&ctx.path(&json_rel), &artifact)?;
                write_via_tmp(&ctx.path(&csv_rel), |p| write_results_csv(p, &results))
            },
        ));
    }
    st.run(ctx, cells);
    st.finish(ctx)
}

fn quality_record(
    ctx: &Context,
    q: &QualitySpec,
    explainer: &Explainer,
    id: &str,
    cfg: &VariationConfig,
) -> Result<QualityRecord> {
    let ds = ctx.dataset()?;
    let seed = ctx.lm.manifest.master_seed;
    let method = explainer.method;
    let model = ctx.load_model(id)?;
    let attrs = read_attributions(&ctx.path(&attribution_file(method, id)))?;
    let attrs = &attrs[..q.n_samples.min(attrs.len())];
    let per_sample = attrs
        .par_iter()
        .map(|a| {
            let x = ds.x().row(a.sample_id);
            let inf = infidelity(
                &model,
                a,
                x,
                q.n_perturb,
                q.sigma,
                &mut derive_stream(seed, &format!("quality/infidelity/{method}/{id}/{}", a.sample_id)),
            )?;
            // Re-explanations are keyed by the perturbed input itself so the
            // result does not depend on evaluation order.
            let explain = |xp: &[f64]| -> xconsist_core::Result<Vec<f64>> {
                let key = hex_sha256(&xp.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>());
                explainer
                    .explain(&model, xp, a.sample_id, a.target_class, &format!("quality/{method}/{id}/{key}"))
                    .map(|r| r.values)
                    .map_err(|e| match e {
                        HarnessError::Core(c) => c,
                        other => xconsist_core::Error::Config(other.to_string()),
                    })
            };
            let sens = sensitivity_max(
                &explain,
                x,
                q.radius,
                q.sensitivity_samples,
                &mut derive_stream(seed, &format!("quality/sensitivity/{method}/{id}/{}", a.sample_id)),
            )?;
            let correct = predicted_class(&model, x)? == ds.y()[a.sample_id];
            Ok((inf, sens, correct))
        })
        .collect::<Result<Vec<_>>>()?;
    let inf: Vec<f64> = per_sample.iter().map(|s| s.0).collect();
    let sens: Vec<f64> = per_sample.iter().filter_map(|s| s.1).collect();
    if sens.is_empty() {
        return Err(HarnessError::Core(xconsist_core::Error::Degenerate(format!(
            "{id}: every explained sample has an all-zero attribution"
        ))));
    }
    Ok(QualityRecord {
        model_id: id.to_string(),
        arch: cfg.arch.tag().into(),
        explainer: method.tag().into(),
        dataset: ds.name().into(),
        dropout: cfg.dropout_rate,
        seed: cfg.init_seed,
        shuffle: cfg.shuffle_seed,
        infidelity: mean(&inf),
        sensitivity_max: mean(&sens),
        expl_accuracy: per_sample.iter().filter(|s| s.2).count() as f64 / per_sample.len() as f64,
        n_samples: per_sample.len(),
    })
}

pub fn run_quality(ctx: &Context) -> Result<()> {
    let Some(q) = ctx.lm.manifest.quality.clone() else {
        return Err(HarnessError::Config(
            "the manifest has no [quality] section; add one to score infidelity and sensitivity".into(),
        ));
    };
    let matrix = ctx.explain_matrix()?;
    let mut st = StageRun::new(Stage::Quality);
    let split = ctx.split()?;
    let mut explainers = BTreeMap::new();
    for &(_, method) in &matrix {
        if let std::collections::btree_map::Entry::Vacant(e) = explainers.entry(method) {
            e.insert(ctx.explainer(method, &split)?);
        }
    }
    let q_json = to_json(&q);
    let mut cells = Vec::new();
    let mut record_files = Vec::new();
    for &(arch, method) in &matrix {
        let explainer = &explainers[&method];
        let models = ctx.arch_models(arch);
        let limit = q.max_models_per_arch.unwrap_or(models.len());
        for (id, cfg) in models.into_iter().take(limit) {
            let inputs = ctx
                .input_hash(&model_file(&id), "train")
                .and_then(|mh| ctx.input_hash(&attribution_file(method, &id), "explain").map(|ah| (mh, ah)));
            let (mh, ah) = match inputs {
                Ok(h) => h,
                Err(e) => {
                    st.fail(format!("quality {method} {id}: {e}"));
                    continue;
                }
            };
            let rel = quality_file(method, &id);
            record_files.push(rel.clone());
            let q = &q;
            cells.push(Cell::new(
                format!("quality {method} {id}"),
                vec![rel.clone()],
                fingerprint(&["quality", &q_json, &mh, &ah, &explainer.params]),
                move || {
                    let record = quality_record(ctx, q, explainer, &id, &cfg)?;
                    write_json(&ctx.path(&rel), &record)
                },
            ));
        }
    }
    st.run(ctx, cells);

    // Summary joins the records with whatever consistency reports exist.
    let mut parts = vec!["quality-summary".to_string()];
    let mut missing = Vec::new();
    for rel in &record_files {
        match ctx.input_hash(rel, "quality") {
            Ok(h) => parts.push(h),
            Err(e) => missing.push(e),
        }
    }
    let normalize = ctx.opts.normalize;
    let report_files: Vec<String> = matrix
        .iter()
        .map(|&(a, m)| consistency_file(normalize, a, m, "json"))
        .filter(|rel| ctx.path(rel).exists())
        .collect();
    for rel in &report_files {
        parts.push(ctx.input_hash(rel, "consistency").unwrap_or_default());
    }
    if !missing.is_empty() {
        st.fail(format!("quality summary skipped: {}", missing.join("; ")));
        return st.finish(ctx);
    }
    let parts: Vec<&str> = parts.iter().map(String::as_str).collect();
    let expected_reports = matrix.len();
    st.run(
        ctx,
        vec![Cell::new(
            "quality summary",
            vec![QUALITY_SUMMARY.into(), QUALITY_CSV.into()],
            fingerprint(&parts),
            move || {
                let records = record_files
                    .iter()
                    .map(|rel| read_json::<QualityRecord>(&ctx.path(rel)))
                    .collect::<Result<Vec<_>>>()?;
                let reports = report_files
                    .iter()
                    .map(|rel| read_json::<ConsistencyArtifact>(&ctx.path(rel)).map(|a| a.report))
                    .collect::<Result<Vec<_>>>()?;
                let mut gap = (reports.len() < expected_reports).then(|| {
                    format!(
                        "{} of {expected_reports} consistency reports present; run `xconsist consistency` first",
                        reports.len()
                    )
                });
                let correlation = match consistency_quality_correlation(&reports, &records) {
                    Ok(c) => Some(c),
                    Err(e) => {
                        gap.get_or_insert_with(|| e.to_string());
                        None
                    }
                };
                let summary = QualitySummary {
                    records,
                    correlation,
                    correlation_gap: gap,
                };
                write_json(&ctx.path(QUALITY_SUMMARY), &summary)?;
                write_via_tmp(&ctx.path(QUALITY_CSV), |p| write_quality_csv(p, &summary.records))
            },
        )],
    );
    st.finish(ctx)
}

pub fn run_svcca(ctx: &Context) -> Result<()> {
    let Some(spec) = ctx.lm.manifest.svcca.clone() else {
        return Err(HarnessError::Config(
            "the manifest has no [svcca] section, so no model was checkpointed; add `[svcca]` (for example \
             `archs = [\"mlp\"]`) and rerun `xconsist train`"
                .into(),
        ));
    };
    let mut st = StageRun::new(Stage::Svcca);
    let ds = ctx.dataset()?;
    let split = ctx.split()?;
    let probe_ids: Vec<usize> = split.test[..spec.probe_samples.min(split.test.len())].to_vec();
    let probe = ds.x().select_rows(&probe_ids);
    let mut cells = Vec::new();
    for &arch in &spec.archs {
        let configs: Vec<VariationConfig> = ctx
            .arch_configs(arch)
            .into_iter()
            .filter(|c| spec.families.contains(&c.family))
            .collect();
        let pairs = build_pairs(&configs);
        let mut ids: Vec<String> = configs.iter().map(VariationConfig::model_id).collect();
        ids.dedup();
        let hashes: std::result::Result<Vec<String>, String> =
            ids.iter().map(|id| ctx.input_hash(&model_file(id), "train")).collect();
        let hashes = match hashes {
            Ok(h) => h,
            Err(e) => {
                st.fail(format!("svcca {arch}: {e}"));
                continue;
            }
        };
        let mut parts = vec!["svcca".to_string(), VARIANCE_KEPT.to_string(), to_json(&probe_ids), to_json(&pairs)];
        parts.extend(hashes);
        let parts: Vec<&str> = parts.iter().map(String::as_str).collect();
        let (json_rel, csv_rel) = (svcca_file(arch, "json"), svcca_file(arch, "csv"));
        let probe = &probe;
        cells.push(Cell::new(
            format!("svcca {arch}"),
            vec![json_rel.clone(), csv_rel.clone()],
            fingerprint(&parts),
            move || {
                let mut models = BTreeMap::new();
                for id in &ids {
                    let m = ctx.load_model(id)?;
                    if m.checkpoints().is_empty() {
                        return Err(HarnessError::Config(format!(
                            "{id} was trained without checkpoints; rerun `xconsist train` with this [svcca] section"
                        )));
                    }
                    models.insert(id.clone(), m);
                }
                let curves: Vec<SvccaCurve> = pairs
                    .par_iter()
                    .map(|p| Ok(layer_curves(p, &models[&p.a], &models[&p.b], probe)?))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .flatten()
                    .collect();
                write_json(&ctx.path(&json_rel), &curves)?;
                write_via_tmp(&ctx.path(&csv_rel), |p| write_curves_csv(p, &curves))
            },
        ));
    }
    st.run(ctx, cells);
    st.finish(ctx)
}

/// Runs one stage. `Report` tolerates missing inputs and records gaps.
pub fn run_stage(ctx: &Context, stage: Stage) -> Result<()> {
    match stage {
        Stage::Train => run_train(ctx),
        Stage::Explain => run_explain(ctx),
        Stage::Consistency => run_consistency(ctx),
        Stage::Quality => run_quality(ctx),
        Stage::Svcca => run_svcca(ctx),
        Stage::Report => crate::report::run_report(ctx).map(|_| ()),
    }
}

/// Every stage in order. Optional stages the manifest leaves out are
/// skipped; the first failing stage stops the run.
pub fn run_all(ctx: &Context) -> Result<()> {
    for stage in Stage::ALL {
        let optional_absent = match stage {
            Stage::Quality => ctx.lm.manifest.quality.is_none(),
            Stage::Svcca => ctx.lm.manifest.svcca.is_none(),
            _ => false,
        };
        if optional_absent {
            log::info!("stage {} not requested by the manifest", stage.tag());
            continue;
        }
        run_stage(ctx, stage)?;
    }
    Ok(())
}
