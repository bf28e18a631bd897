//! The model zoo, trained under a controlled variation matrix.
//!
//! Every random choice during training comes from a stream labelled by the
//! architecture and the variation knob that owns it:
//!
//! * `train/<arch>/seed=<s>/init`: weight initialisation,
//! * `train/<arch>/seed=<s>/dropout/epoch=<e>`: dropout masks,
//! * `train/<arch>/shuffle=<s>/epoch=<e>`: mini-batch order.
//!
//! Changing one knob therefore leaves the streams of the others untouched.

pub mod nn;
mod persist;
pub mod svm;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{hex_digest, Dataset, Split};
use crate::error::{Error, Result};
use crate::numkit::{derive_stream, permutation, Matrix};
use nn::{softmax_rows, Network, Spec};
use svm::SvmModel;

pub const MLP_HIDDEN: [usize; 2] = [412, 512];
pub const SMALL_CNN_FILTERS: usize = 16;
pub const CNN_FILTERS: [usize; 2] = [8, 16];
pub const CNN_HIDDEN: usize = 64;
pub const ENSEMBLE_MEMBERS: usize = 3;
pub const SVM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    SmallCnn,
    Cnn,
    SvmRbf,
    LogReg,
    VotingEnsemble,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::Mlp,
        Arch::SmallCnn,
        Arch::Cnn,
        Arch::SvmRbf,
        Arch::LogReg,
        Arch::VotingEnsemble,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::SmallCnn => "small_cnn",
            Arch::Cnn => "cnn",
            Arch::SvmRbf => "svm_rbf",
            Arch::LogReg => "log_reg",
            Arch::VotingEnsemble => "voting_ensemble",
        }
    }

    /// Trained by backpropagation (and so exposes input gradients).
    pub fn is_neural(self) -> bool {
        !matches!(self, Arch::SvmRbf)
    }

    /// Has hidden layers that dropout can act on.
    pub fn uses_dropout(self) -> bool {
        matches!(self, Arch::Mlp | Arch::SmallCnn | Arch::Cnn | Arch::VotingEnsemble)
    }

    pub fn needs_image(self) -> bool {
        matches!(self, Arch::SmallCnn | Arch::Cnn)
    }

    fn layer_spec(self, n_classes: usize, dropout: f64) -> Option<Vec<Spec>> {
        use Spec::*;
        Some(match self {
            Arch::Mlp => vec![
                Dense(MLP_HIDDEN[0]),
                Relu,
                Dropout(dropout),
                Dense(MLP_HIDDEN[1]),
                Relu,
                Dropout(dropout),
                Dense(n_classes),
            ],
            Arch::SmallCnn => vec![Conv(SMALL_CNN_FILTERS), Relu, MaxPool, Dropout(dropout), Dense(n_classes)],
            Arch::Cnn => vec![
                Conv(CNN_FILTERS[0]),
                Relu,
                MaxPool,
                Conv(CNN_FILTERS[1]),
                Relu,
                MaxPool,
                Dropout(dropout),
                Dense(CNN_HIDDEN),
                Relu,
                Dropout(dropout),
                Dense(n_classes),
            ],
            Arch::LogReg => vec![Dense(n_classes)],
            Arch::SvmRbf | Arch::VotingEnsemble => return None,
        })
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}")))
    }
}

/// Which training knob a group of variations changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Seed,
    Shuffle,
    Dropout,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Seed, Family::Shuffle, Family::Dropout];

    pub fn tag(self) -> &'static str {
        match self {
            Family::Seed => "seed",
            Family::Shuffle => "shuffle",
            Family::Dropout => "dropout",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One point in the variation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationConfig {
    pub arch: Arch,
    pub family: Family,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Root of every stream this model draws from.
    pub master_seed: u64,
    pub svm_c: f64,
    /// `None` selects `1 / (d·var(X))`.
    pub svm_gamma: Option<f64>,
    pub ensemble_member: Arch,
    /// Snapshot parameters before training and after every epoch.
    pub checkpoints: bool,
}

impl Default for VariationConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Mlp,
            family: Family::Seed,
            init_seed: 0,
            shuffle_seed: 0,
            dropout_rate: 0.25,
            epochs: 10,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            master_seed: 0,
            svm_c: 1.0,
            svm_gamma: None,
            ensemble_member: Arch::Mlp,
            checkpoints: false,
        }
    }
}

/// Fields that influence the fitted parameters; hashed into the model id.
#[derive(Serialize)]
struct IdentityFields<'a> {
    arch: Arch,
    init_seed: u64,
    shuffle_seed: u64,
    dropout_rate: f64,
    epochs: usize,
    learning_rate: f64,
    momentum: f64,
    batch_size: usize,
    master_seed: u64,
    svm_c: f64,
    svm_gamma: Option<f64>,
    ensemble_member: Option<Arch>,
    #[serde(skip)]
    _marker: std::marker::PhantomData<&'a ()>,
}

impl VariationConfig {
    /// Content hash of the parameter-relevant fields (16 hex digits). The
    /// `family` tag and checkpoint flag do not change the fitted model and
    /// are excluded, so a base configuration shared by several families is
    /// trained once.
    pub fn model_id(&self) -> String {
        let fields = IdentityFields {
            arch: self.arch,
            init_seed: self.init_seed,
            shuffle_seed: self.shuffle_seed,
            dropout_rate: self.dropout_rate,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            master_seed: self.master_seed,
            svm_c: self.svm_c,
            svm_gamma: self.svm_gamma,
            ensemble_member: (self.arch == Arch::VotingEnsemble).then_some(self.ensemble_member),
            _marker: std::marker::PhantomData,
        };
        let json = serde_json::to_string(&fields).expect("config serializes");
        format!("{}-{}", self.arch.tag(), &hex_digest(json.as_bytes())[..16])
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !self.arch.uses_dropout() && self.dropout_rate != 0.0 {
            return Err(Error::Config(format!("dropout does not apply to {}", self.arch)));
        }
        if self.arch.is_neural() && self.arch != Arch::VotingEnsemble {
            if self.epochs == 0 || self.batch_size == 0 {
                return Err(Error::Config("epochs and batch_size must be positive".into()));
            }
            if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
                return Err(Error::Config("learning rate must be positive, momentum in [0, 1)".into()));
            }
        }
        if self.arch == Arch::VotingEnsemble
            && !matches!(self.ensemble_member, Arch::Mlp | Arch::SmallCnn | Arch::Cnn | Arch::LogReg)
        {
            return Err(Error::Config(format!(
                "ensemble members must be neural, got {}",
                self.ensemble_member
            )));
        }
        if self.arch == Arch::SvmRbf && !(self.svm_c > 0.0) {
            return Err(Error::Config("svm_c must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub network: Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Body {
    Net(Network),
    Svm(SvmModel),
    Ensemble(Vec<Network>),
}

/// Anything that maps feature rows to class probabilities.
///
/// Explainers and quality metrics only depend on this trait, so they run on
/// trained models and on analytic test functions alike.
pub trait Classifier: Sync {
    fn id(&self) -> &str;
    fn n_features(&self) -> usize;
    fn n_classes(&self) -> usize;

    /// samples × classes
    fn predict_proba_batch(&self, x: &Matrix) -> Result<Matrix>;

    /// Differentiable class scores used by gradient explainers.
    fn logits_batch(&self, _x: &Matrix) -> Result<Matrix> {
        Err(Error::Capability(format!("{} has no differentiable logits", self.id())))
    }

    /// `∂ logit[class] / ∂ x` for every row of `x`.
    fn logit_gradient_batch(&self, _x: &Matrix, _class: usize) -> Result<Matrix> {
        Err(Error::Capability(format!("{} does not expose input gradients", self.id())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    config: VariationConfig,
    id: String,
    n_features: usize,
    n_classes: usize,
    body: Body,
    training_log: Vec<EpochLog>,
    checkpoints: Vec<Checkpoint>,
}

fn check_split(ds: &Dataset, split: &Split) -> Result<()> {
    split.validate(ds.len())
}

/// Fits one variation. Neural architectures use mini-batch SGD with
/// momentum on cross-entropy; `SvmRbf` solves the dual by SMO.
pub fn train(ds: &Dataset, split: &Split, cfg: &VariationConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    check_split(ds, split)?;
    if cfg.arch.needs_image() || (cfg.arch == Arch::VotingEnsemble && cfg.ensemble_member.needs_image()) {
        if ds.image_shape().is_none() {
            return Err(Error::Config(format!("{} needs image-shaped features", cfg.arch)));
        }
    }
    let x = ds.x().select_rows(&split.train);
    let y: Vec<usize> = split.train.iter().map(|&i| ds.y()[i]).collect();
    let n_classes = ds.n_classes();
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();

    let body = match cfg.arch {
        Arch::SvmRbf => {
            // Data order is the only thing the shuffle knob can touch here.
            let order = permutation(
                x.rows(),
                &mut derive_stream(cfg.master_seed, &format!("train/svm_rbf/shuffle={}", cfg.shuffle_seed)),
            );
            let xs = x.select_rows(&order);
            let ys: Vec<usize> = order.iter().map(|&i| y[i]).collect();
            let gamma = cfg.svm_gamma.unwrap_or_else(|| svm::default_gamma(&xs));
            Body::Svm(SvmModel::fit(&xs, &ys, n_classes, cfg.svm_c, gamma, SVM_TOLERANCE)?)
        }
        Arch::VotingEnsemble => {
            let mut members = Vec::with_capacity(ENSEMBLE_MEMBERS);
            for k in 0..ENSEMBLE_MEMBERS {
                let part: Vec<usize> = (k..x.rows()).step_by(ENSEMBLE_MEMBERS).collect();
                let xk = x.select_rows(&part);
                let yk: Vec<usize> = part.iter().map(|&i| y[i]).collect();
                let prefix = format!("train/voting_ensemble/member={k}/{}", cfg.ensemble_member);
                let (net, member_log, _) =
                    fit_network(cfg.ensemble_member, &xk, &yk, n_classes, ds.image_shape(), cfg, &prefix, false)?;
                if k == 0 {
                    log = member_log;
                }
                members.push(net);
            }
            Body::Ensemble(members)
        }
        arch => {
            let prefix = format!("train/{arch}");
            let (net, net_log, cps) =
                fit_network(arch, &x, &y, n_classes, ds.image_shape(), cfg, &prefix, cfg.checkpoints)?;
            log = net_log;
            checkpoints = cps;
            Body::Net(net)
        }
    };
    Ok(TrainedModel {
        id: cfg.model_id(),
        config: cfg.clone(),
        n_features: ds.n_features(),
        n_classes,
        body,
        training_log: log,
        checkpoints,
    })
}

#[allow(clippy::too_many_arguments)]
fn fit_network(
    arch: Arch,
    x: &Matrix,
    y: &[usize],
    n_classes: usize,
    image: Option<(usize, usize)>,
    cfg: &VariationConfig,
    prefix: &str,
    keep_checkpoints: bool,
) -> Result<(Network, Vec<EpochLog>, Vec<Checkpoint>)> {
    let dropout = if arch.uses_dropout() { cfg.dropout_rate } else { 0.0 };
    let spec = arch.layer_spec(n_classes, dropout).expect("neural architecture");
    let mut init = derive_stream(cfg.master_seed, &format!("{prefix}/seed={}/init", cfg.init_seed));
    let mut net = Network::build(x.cols(), image, &spec, &mut init)?;
    let mut checkpoints = Vec::new();
    if keep_checkpoints {
        checkpoints.push(Checkpoint {
            epoch: 0,
            network: net.clone(),
        });
    }
    let mut velocity: Vec<(Matrix, Vec<f64>)> = net
        .layers()
        .iter()
        .filter_map(|l| match l {
            nn::Layer::Dense { w, b } | nn::Layer::Conv { w, b, .. } => {
                Some((Matrix::zeros(w.rows(), w.cols()), vec![0.0; b.len()]))
            }
            _ => None,
        })
        .collect();
    let n = x.rows();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let order = permutation(
            n,
            &mut derive_stream(cfg.master_seed, &format!("{prefix}/shuffle={}/epoch={epoch}", cfg.shuffle_seed)),
        );
        let mut drop_rng = derive_stream(
            cfg.master_seed,
            &format!("{prefix}/seed={}/dropout/epoch={epoch}", cfg.init_seed),
        );
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(batch);
            let trace = net.forward_trace(&xb, Some(&mut drop_rng))?;
            let mut probs = trace.logits.clone();
            softmax_rows(&mut probs);
            let bs = batch.len() as f64;
            let mut d_logits = probs.clone();
            for (r, &i) in batch.iter().enumerate() {
                let label = y[i];
                let row = probs.row(r);
                loss_sum -= row[label].max(1e-300).ln();
                let arg = argmax(row);
                correct += usize::from(arg == label);
                let g = d_logits.row_mut(r);
                g[label] -= 1.0;
                g.iter_mut().for_each(|v| *v /= bs);
            }
            if !loss_sum.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: "loss is not finite".into(),
                });
            }
            let (grads, _) = net.backward(trace, d_logits, true);
            let (lr, mu) = (cfg.learning_rate, cfg.momentum);
            net.for_each_param_mut(|k, w, b| {
                let (vw, vb) = &mut velocity[k];
                let g = &grads[k];
                for ((p, v), gv) in w.as_mut_slice().iter_mut().zip(vw.as_mut_slice()).zip(g.w.as_slice()) {
                    *v = mu * *v - lr * gv;
                    *p += *v;
                }
                for ((p, v), gv) in b.iter_mut().zip(vb.iter_mut()).zip(&g.b) {
                    *v = mu * *v - lr * gv;
                    *p += *v;
                }
            });
        }
        if !net.is_finite() {
            return Err(Error::Training {
                epoch,
                msg: "parameters are not finite".into(),
            });
        }
        log.push(EpochLog {
            epoch,
            loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
        });
        if keep_checkpoints {
            checkpoints.push(Checkpoint {
                epoch,
                network: net.clone(),
            });
        }
    }
    Ok((net, log, checkpoints))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl TrainedModel {
    pub fn config(&self) -> &VariationConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn body(&self) -> &Body {
        &self.body
    }

    pub fn training_log(&self) -> &[EpochLog] {
        &self.training_log
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    /// Weight matrices per layer (per member, concatenated, for ensembles).
    pub fn layers(&self) -> Vec<&Matrix> {
        match &self.body {
            Body::Net(n) => n.parameter_matrices(),
            Body::Ensemble(ms) => ms.iter().flat_map(|n| n.parameter_matrices()).collect(),
            Body::Svm(s) => vec![&s.support, &s.coef],
        }
    }

    /// Builds a model around an existing body, e.g. hand-set weights in tests.
    pub fn from_parts(config: VariationConfig, body: Body, n_classes: usize) -> Result<Self> {
        let n_features = match &body {
            Body::Net(n) => n.n_inputs(),
            Body::Svm(s) => s.n_features(),
            Body::Ensemble(ms) => ms
                .first()
                .ok_or_else(|| Error::Config("empty ensemble".into()))?
                .n_inputs(),
        };
        Ok(Self {
            id: config.model_id(),
            config,
            n_features,
            n_classes,
            body,
            training_log: Vec::new(),
            checkpoints: Vec::new(),
        })
    }

    fn check_features(&self, cols: usize) -> Result<()> {
        if cols != self.n_features {
            return Err(Error::Shape(format!(
                "model {} expects {} features, got {cols}",
                self.id, self.n_features
            )));
        }
        Ok(())
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.predict_proba_batch(&m)?.into_vec())
    }

    pub fn input_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.logit_gradient_batch(&m, class)?.into_vec())
    }

    /// Fraction of `split.test` rows classified correctly.
    pub fn accuracy(&self, x: &Matrix, y: &[usize]) -> Result<f64> {
        let p = self.predict_proba_batch(x)?;
        let correct = p.row_iter().zip(y).filter(|(r, &l)| argmax(r) == l).count();
        Ok(correct as f64 / y.len().max(1) as f64)
    }

    /// Post-nonlinearity activations of parametric layer `layer`, as
    /// neurons × samples.
    pub fn layer_activations(&self, x: &Matrix, layer: usize) -> Result<Matrix> {
        self.check_features(x.cols())?;
        match &self.body {
            Body::Net(n) => Ok(n.activations(x, layer)?.transpose()),
            _ => Err(Error::Capability(format!("{} has no single layer stack", self.arch()))),
        }
    }

    /// As [`Self::layer_activations`], with the parameters saved at `epoch`.
    pub fn checkpoint_activations(&self, epoch: usize, x: &Matrix, layer: usize) -> Result<Matrix> {
        self.check_features(x.cols())?;
        let cp = self.checkpoints.iter().find(|c| c.epoch == epoch).ok_or_else(|| {
            let have: Vec<usize> = self.checkpoints.iter().map(|c| c.epoch).collect();
            Error::MissingCheckpoints(format!("{}: no epoch {epoch}; available {have:?}", self.id))
        })?;
        Ok(cp.network.activations(x, layer)?.transpose())
    }

    pub fn n_layers(&self) -> usize {
        match &self.body {
            Body::Net(n) => n.n_parametric(),
            _ => 0,
        }
    }
}

impl Classifier for TrainedModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn n_features(&self) -> usize {
        self.n_features
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict_proba_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.check_features(x.cols())?;
        match &self.body {
            Body::Net(n) => {
                let mut l = n.logits(x)?;
                softmax_rows(&mut l);
                Ok(l)
            }
            Body::Svm(s) => s.predict_proba(x),
            Body::Ensemble(ms) => {
                let mut acc = Matrix::zeros(x.rows(), self.n_classes);
                for n in ms {
                    let mut p = n.logits(x)?;
                    softmax_rows(&mut p);
                    acc.as_mut_slice().iter_mut().zip(p.as_slice()).for_each(|(a, v)| *a += v);
                }
                Ok(acc.scale(1.0 / ms.len() as f64))
            }
        }
    }

    /// Network logits; for ensembles, the log of the averaged probabilities.
    fn logits_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.check_features(x.cols())?;
        match &self.body {
            Body::Net(n) => n.logits(x),
            Body::Ensemble(_) => {
                let mut p = self.predict_proba_batch(x)?;
                p.as_mut_slice().iter_mut().for_each(|v| *v = v.max(1e-300).ln());
                Ok(p)
            }
            Body::Svm(_) => Err(Error::Capability("svm_rbf does not expose differentiable logits".into())),
        }
    }

    fn logit_gradient_batch(&self, x: &Matrix, class: usize) -> Result<Matrix> {
        self.check_features(x.cols())?;
        if class >= self.n_classes {
            return Err(Error::Config(format!("class {class} out of range")));
        }
        match &self.body {
            Body::Net(n) => {
                let trace = n.forward_trace(x, None)?;
                let mut up = Matrix::zeros(x.rows(), self.n_classes);
                for r in 0..x.rows() {
                    up.set(r, class, 1.0);
                }
                Ok(n.backward(trace, up, false).1)
            }
            Body::Ensemble(ms) => {
                // ∂ log p̄_c = Σ_k p_kc (e_c − p_k)ᵀ J_k / (K p̄_c)
                let k = ms.len() as f64;
                let mut member_probs = Vec::with_capacity(ms.len());
                let mut pbar = vec![0.0; x.rows()];
                for n in ms {
                    let trace = n.forward_trace(x, None)?;
                    let mut p = trace.logits.clone();
                    softmax_rows(&mut p);
                    for r in 0..x.rows() {
                        pbar[r] += p.get(r, class) / k;
                    }
                    member_probs.push((trace, p));
                }
                let mut grad = Matrix::zeros(x.rows(), x.cols());
                for (n, (trace, p)) in ms.iter().zip(member_probs) {
                    let mut up = Matrix::zeros(x.rows(), self.n_classes);
                    for r in 0..x.rows() {
                        let pc = p.get(r, class);
                        let scale = pc / (k * pbar[r].max(1e-300));
                        for j in 0..self.n_classes {
                            let e = if j == class { 1.0 } else { 0.0 };
                            up.set(r, j, scale * (e - p.get(r, j)));
                        }
                    }
                    let g = n.backward(trace, up, false).1;
                    grad.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(a, v)| *a += v);
                }
                Ok(grad)
            }
            Body::Svm(_) => Err(Error::Capability("svm_rbf does not expose input gradients".into())),
        }
    }
}

pub use persist::{load_model, save_model, MODEL_FORMAT_VERSION};
