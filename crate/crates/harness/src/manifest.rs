//! Experiment manifest: the single input that determines every artifact of
//! a run. TOML or JSON, selected by file extension.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xconsist_core::explainers::Method;
use xconsist_core::models::{Arch, Family, VariationConfig};

use crate::error::{HarnessError, Result};
use crate::hex_sha256;

pub const SCHEMA_VERSION: u32 = 1;

/// Subset size and held-out share applied by `--desk-scale` (2000 / 500).
pub const DESK_SUBSET: usize = 2500;
pub const DESK_TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub master_seed: u64,
    /// Relative paths resolve against the manifest's directory.
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub training: TrainingSpec,
    #[serde(default)]
    pub variations: VariationSpec,
    pub archs: Vec<ArchSpec>,
    #[serde(default)]
    pub explain: ExplainSpec,
    #[serde(default)]
    pub quality: Option<QualitySpec>,
    #[serde(default)]
    pub svcca: Option<SvccaSpec>,
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// IDX image/label pair (MNIST layout).
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Stratified subset drawn before splitting.
        #[serde(default)]
        subset: Option<usize>,
        /// Keep two labels only, relabelled 0 and 1.
        #[serde(default)]
        classes: Option<[usize; 2]>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    Blobs {
        n_per_class: usize,
        n_features: usize,
        n_classes: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    DESK_TEST_FRACTION
}

fn default_separation() -> f64 {
    6.0
}

/// Knobs shared by every variation; the family knobs come from
/// [`VariationSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSpec {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Dropout of the base configuration (archs with dropout only).
    pub dropout_rate: f64,
    pub svm_c: f64,
    pub svm_gamma: Option<f64>,
    pub ensemble_member: Arch,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        let c = VariationConfig::default();
        Self {
            epochs: c.epochs,
            learning_rate: c.learning_rate,
            momentum: c.momentum,
            batch_size: c.batch_size,
            dropout_rate: c.dropout_rate,
            svm_c: c.svm_c,
            svm_gamma: c.svm_gamma,
            ensemble_member: c.ensemble_member,
        }
    }
}

/// Values swept by each family. The base configuration uses the first seed,
/// the first shuffle seed and `training.dropout_rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationSpec {
    pub seeds: Vec<u64>,
    pub shuffle_seeds: Vec<u64>,
    pub dropout_rates: Vec<f64>,
}

impl Default for VariationSpec {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            shuffle_seeds: (0..5).collect(),
            dropout_rates: vec![0.1, 0.2, 0.25, 0.3, 0.4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub arch: Arch,
    /// Omitted: every family that applies to the architecture.
    #[serde(default)]
    pub families: Option<Vec<Family>>,
    /// Omitted: `explain.explainers` minus the ones the arch cannot run.
    #[serde(default)]
    pub explainers: Option<Vec<Method>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSpec {
    pub explainers: Vec<Method>,
    /// Leading test samples to explain; omitted means the whole test split.
    pub n_samples: Option<usize>,
    pub shap: ShapSpec,
    pub ig: IgSpec,
}

impl Default for ExplainSpec {
    fn default() -> Self {
        Self {
            explainers: vec![Method::Shap, Method::IntGrad],
            n_samples: None,
            shap: ShapSpec::default(),
            ig: IgSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapSpec {
    pub background: BackgroundSpec,
    /// Omitted: `2d + 2048`.
    pub n_coalitions: Option<usize>,
    pub ridge_reg: f64,
}

impl Default for ShapSpec {
    fn default() -> Self {
        Self {
            background: BackgroundSpec::Stratified { size: 50 },
            n_coalitions: None,
            ridge_reg: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackgroundSpec {
    /// Stratified draw from the training split.
    Stratified { size: usize },
    /// A single all-zero reference.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IgSpec {
    /// Riemann steps along the straight path from the zero baseline.
    pub steps: usize,
}

impl Default for IgSpec {
    fn default() -> Self {
        Self { steps: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualitySpec {
    /// Leading explained samples scored per model.
    pub n_samples: usize,
    pub sigma: f64,
    pub n_perturb: usize,
    pub radius: f64,
    pub sensitivity_samples: usize,
    /// Cap on scored models per architecture, in variation order.
    pub max_models_per_arch: Option<usize>,
}

impl Default for QualitySpec {
    fn default() -> Self {
        use xconsist_core::quality::*;
        Self {
            n_samples: 10,
            sigma: DEFAULT_SIGMA,
            n_perturb: DEFAULT_PERTURBATIONS,
            radius: DEFAULT_RADIUS,
            sensitivity_samples: DEFAULT_SENSITIVITY_SAMPLES,
            max_models_per_arch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvccaSpec {
    pub archs: Vec<Arch>,
    pub families: Vec<Family>,
    /// Leading test samples used as the shared probe set.
    pub probe_samples: usize,
}

impl Default for SvccaSpec {
    fn default() -> Self {
        Self {
            archs: vec![Arch::Mlp],
            families: vec![Family::Seed],
            probe_samples: 500,
        }
    }
}

/// Families a given architecture varies over when the manifest does not
/// say. The SVM has no dropout; the ensemble's dropout column is left out
/// as in the reference table.
pub fn default_families(arch: Arch) -> Vec<Family> {
    match arch {
        Arch::SvmRbf | Arch::LogReg | Arch::VotingEnsemble => vec![Family::Seed, Family::Shuffle],
        Arch::Mlp | Arch::SmallCnn | Arch::Cnn => Family::ALL.to_vec(),
    }
}

/// Capability matrix: every command asks this one function.
pub fn capable(arch: Arch, method: Method) -> bool {
    match method {
        Method::Shap => true,
        Method::IntGrad => arch.is_neural(),
        Method::ExactShapley => false,
    }
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(format!("manifest: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("manifest: {e}")))
    }

    /// Parses by extension (`.json`, otherwise TOML), applies `desk_scale`
    /// and validates.
    pub fn load(path: &Path, desk_scale: bool) -> Result<LoadedManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut manifest = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text)?,
            _ => Self::from_toml(&text)?,
        };
        if desk_scale {
            manifest.apply_desk_scale();
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        LoadedManifest::new(manifest, base_dir)
    }

    /// Forces the 2000 / 500 stratified MNIST subset.
    pub fn apply_desk_scale(&mut self) {
        match &mut self.dataset {
            DatasetSpec::Idx {
                subset, test_fraction, ..
            } => {
                *subset = Some(DESK_SUBSET);
                *test_fraction = DESK_TEST_FRACTION;
            }
            DatasetSpec::Blobs { .. } => log::warn!("--desk-scale has no effect on a blobs dataset"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(HarnessError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return cfg(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.archs.is_empty() {
            return cfg("archs is empty".into());
        }
        let tf = match &self.dataset {
            DatasetSpec::Idx { test_fraction, .. } | DatasetSpec::Blobs { test_fraction, .. } => *test_fraction,
        };
        if !(tf > 0.0 && tf < 1.0) {
            return cfg(format!("test_fraction {tf} outside (0, 1)"));
        }
        let v = &self.variations;
        if v.seeds.is_empty() || v.shuffle_seeds.is_empty() || v.dropout_rates.is_empty() {
            return cfg("every variation list needs at least one value".into());
        }
        for (name, dup) in [
            ("seeds", has_duplicates(&v.seeds)),
            ("shuffle_seeds", has_duplicates(&v.shuffle_seeds)),
            ("dropout_rates", has_duplicates(&v.dropout_rates)),
        ] {
            if dup {
                return cfg(format!("variations.{name} repeats a value"));
            }
        }
        let mut seen = Vec::new();
        for spec in &self.archs {
            if seen.contains(&spec.arch) {
                return cfg(format!("architecture {} listed twice", spec.arch));
            }
            seen.push(spec.arch);
            for fam in self.families(spec) {
                if fam == Family::Dropout && !spec.arch.uses_dropout() {
                    return cfg(format!("{} has no dropout to vary", spec.arch));
                }
            }
        }
        for m in self.explain.explainers.iter().chain(self.archs.iter().flat_map(|a| a.explainers.iter().flatten())) {
            if !matches!(m, Method::Shap | Method::IntGrad) {
                return cfg(format!("explainer {m} is for small oracle problems only"));
            }
        }
        if self.explain.n_samples == Some(0) {
            return cfg("explain.n_samples must be positive".into());
        }
        if self.explain.ig.steps == 0 {
            return cfg("explain.ig.steps must be positive".into());
        }
        if let BackgroundSpec::Stratified { size: 0 } = self.explain.shap.background {
            return cfg("SHAP background must be non-empty".into());
        }
        if let Some(q) = &self.quality {
            if q.n_samples == 0 || q.n_perturb == 0 || q.sensitivity_samples == 0 {
                return cfg("quality sample counts must be positive".into());
            }
            if !(q.sigma > 0.0) || !(q.radius > 0.0) {
                return cfg("quality sigma and radius must be positive".into());
            }
        }
        if let Some(s) = &self.svcca {
            for a in &s.archs {
                let Some(spec) = self.archs.iter().find(|x| x.arch == *a) else {
                    return cfg(format!("svcca arch {a} is not in archs"));
                };
                if !a.is_neural() {
                    return cfg(format!("svcca needs layer activations; {a} has none"));
                }
                if !s.families.iter().any(|f| self.families(spec).contains(f)) {
                    return cfg(format!("svcca families {:?} are not trained for {a}", s.families));
                }
            }
            if s.probe_samples < 2 {
                return cfg("svcca.probe_samples must be at least 2".into());
            }
        }
        // Surface per-config problems (bad dropout range etc.) up front.
        for c in self.expand() {
            c.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Explicit per-arch explainer requests the arch cannot honour.
    pub fn check_capabilities(&self) -> Result<()> {
        for spec in self.archs.iter().filter(|s| s.explainers.is_some()) {
            self.explainers(spec)?;
        }
        Ok(())
    }

    pub fn families(&self, spec: &ArchSpec) -> Vec<Family> {
        spec.families.clone().unwrap_or_else(|| default_families(spec.arch))
    }

    /// Explainers to run for an arch. Explicit per-arch requests that the
    /// arch cannot honour are a capability error; the global list is
    /// filtered with a warning.
    pub fn explainers(&self, spec: &ArchSpec) -> Result<Vec<Method>> {
        match &spec.explainers {
            Some(list) => {
                if let Some(m) = list.iter().find(|m| !capable(spec.arch, **m)) {
                    return Err(HarnessError::Capability(format!("{} cannot be explained with {m}", spec.arch)));
                }
                Ok(list.clone())
            }
            None => Ok(self
                .explain
                .explainers
                .iter()
                .copied()
                .filter(|m| {
                    let ok = capable(spec.arch, *m);
                    if !ok {
                        log::warn!("skipping {m} for {}: not supported", spec.arch);
                    }
                    ok
                })
                .collect()),
        }
    }

    fn base_config(&self, arch: Arch) -> VariationConfig {
        let t = &self.training;
        VariationConfig {
            arch,
            family: Family::Seed,
            init_seed: self.variations.seeds[0],
            shuffle_seed: self.variations.shuffle_seeds[0],
            dropout_rate: if arch.uses_dropout() { t.dropout_rate } else { 0.0 },
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            master_seed: self.master_seed,
            svm_c: t.svm_c,
            svm_gamma: t.svm_gamma,
            ensemble_member: t.ensemble_member,
            checkpoints: false,
        }
    }

    /// Every (arch, family, value) configuration in manifest order. The
    /// base configuration appears once per family.
    pub fn expand(&self) -> Vec<VariationConfig> {
        let mut out = Vec::new();
        for spec in &self.archs {
            let base = self.base_config(spec.arch);
            let checkpointed = |fam: Family| {
                self.svcca
                    .as_ref()
                    .is_some_and(|s| s.archs.contains(&spec.arch) && s.families.contains(&fam))
            };
            for fam in self.families(spec) {
                let mut push = |f: &dyn Fn(&mut VariationConfig)| {
                    let mut c = base.clone();
                    c.family = fam;
                    c.checkpoints = checkpointed(fam);
                    f(&mut c);
                    out.push(c);
                };
                match fam {
                    Family::Seed => self.variations.seeds.iter().for_each(|&s| push(&|c| c.init_seed = s)),
                    Family::Shuffle => self.variations.shuffle_seeds.iter().for_each(|&s| push(&|c| c.shuffle_seed = s)),
                    Family::Dropout => self.variations.dropout_rates.iter().for_each(|&r| push(&|c| c.dropout_rate = r)),
                }
            }
        }
        out
    }

    /// Distinct models to train, by id. A model shared between families is
    /// checkpointed if any of them needs it.
    pub fn models(&self) -> BTreeMap<String, VariationConfig> {
        let mut models: BTreeMap<String, VariationConfig> = BTreeMap::new();
        for c in self.expand() {
            models
                .entry(c.model_id())
                .and_modify(|m| m.checkpoints |= c.checkpoints)
                .or_insert(c);
        }
        models
    }
}

fn has_duplicates<T: PartialEq>(xs: &[T]) -> bool {
    xs.iter().enumerate().any(|(i, x)| xs[..i].contains(x))
}

/// A validated manifest plus where it was read from.
#[derive(Clone, Debug)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub base_dir: PathBuf,
    /// Hash of the manifest content with `output_dir` blanked, so the same
    /// experiment written to two places hashes the same.
    pub content_hash: String,
}

impl LoadedManifest {
    pub fn new(manifest: Manifest, base_dir: PathBuf) -> Result<Self> {
        manifest.validate()?;
        manifest.check_capabilities()?;
        let mut blank = manifest.clone();
        blank.output_dir = PathBuf::new();
        let json = serde_json::to_string(&blank).expect("manifest serializes");
        Ok(Self {
            content_hash: hex_sha256(json.as_bytes()),
            manifest,
            base_dir,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.manifest.output_dir)
    }
}
