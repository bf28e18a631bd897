//! Per-sample feature attributions: KernelSHAP, exact Shapley values by
//! enumeration, and Integrated Gradients.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{argmax, Classifier};
use crate::numkit::{Cholesky, Matrix, RngStream};

/// Largest feature count [`exact_shapley`] will enumerate.
pub const EXACT_MAX_FEATURES: usize = 15;
/// Rows per model call when evaluating masked inputs.
const EVAL_CHUNK: usize = 4096;
/// Ridge escalation attempts before giving up on the regression.
const RIDGE_ATTEMPTS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Shap,
    IntGrad,
    ExactShapley,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Shap => "shap",
            Method::IntGrad => "int_grad",
            Method::ExactShapley => "exact_shapley",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Shap, Method::IntGrad, Method::ExactShapley]
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown explainer {s:?}")))
    }
}

/// One explanation of one model output.
///
/// `output` is the explained quantity at the sample: the target-class
/// probability for Shapley methods, the target logit for IG. `base_value`
/// is the same quantity at the reference (background mean or IG baseline).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub model_id: String,
    pub sample_id: usize,
    pub method: Method,
    pub target_class: usize,
    pub values: Vec<f64>,
    pub base_value: f64,
    pub output: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

impl Attribution {
    /// `|base + Σφ − output|`
    pub fn efficiency_gap(&self) -> f64 {
        (self.base_value + self.values.iter().sum::<f64>() - self.output).abs()
    }

    /// Completeness gap relative to `|output − base|`.
    pub fn relative_completeness_error(&self) -> f64 {
        self.efficiency_gap() / (self.output - self.base_value).abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapConfig {
    /// Reference rows; absent features take these values, outputs averaged.
    pub background: Matrix,
    pub n_coalitions: usize,
    pub ridge_reg: f64,
}

impl ShapConfig {
    pub fn new(background: Matrix, n_coalitions: usize, ridge_reg: f64) -> Result<Self> {
        let cfg = Self {
            background,
            n_coalitions,
            ridge_reg,
        };
        cfg.validate(cfg.background.cols())?;
        Ok(cfg)
    }

    /// The budget the library falls back to when none is given.
    pub fn default_coalitions(d: usize) -> usize {
        2 * d + 2048
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.background.rows() == 0 {
            return Err(Error::Config("SHAP background set is empty".into()));
        }
        if self.background.cols() != d {
            return Err(Error::Shape(format!(
                "background has {} features, model has {d}",
                self.background.cols()
            )));
        }
        if self.n_coalitions < 2 * d + 2 {
            return Err(Error::Config(format!(
                "n_coalitions {} below 2d+2 = {}",
                self.n_coalitions,
                2 * d + 2
            )));
        }
        if !(self.ridge_reg >= 0.0) {
            return Err(Error::Config("ridge_reg must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgConfig {
    pub baseline: Vec<f64>,
    pub steps: usize,
}

impl IgConfig {
    /// All-zero baseline.
    pub fn zero(d: usize, steps: usize) -> Self {
        Self {
            baseline: vec![0.0; d],
            steps,
        }
    }
}

/// The class the model predicts for `x`.
pub fn predicted_class(model: &dyn Classifier, x: &[f64]) -> Result<usize> {
    let p = model.predict_proba_batch(&Matrix::from_vec(1, x.len(), x.to_vec())?)?;
    Ok(argmax(p.row(0)))
}

fn check_input(model: &dyn Classifier, x: &[f64], target: usize) -> Result<()> {
    if x.len() != model.n_features() {
        return Err(Error::Shape(format!(
            "sample has {} features, model {} expects {}",
            x.len(),
            model.id(),
            model.n_features()
        )));
    }
    if target >= model.n_classes() {
        return Err(Error::Config(format!("target class {target} out of range")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample"));
    }
    Ok(())
}

/// Mean target-class probability over the background for each coalition.
/// `present[k]` lists the features taken from `x` in coalition `k`.
fn coalition_values(
    model: &dyn Classifier,
    x: &[f64],
    background: &Matrix,
    present: &[Vec<usize>],
    target: usize,
) -> Result<Vec<f64>> {
    let (nb, d) = background.shape();
    let per_chunk = (EVAL_CHUNK / nb).max(1);
    let mut out = Vec::with_capacity(present.len());
    for group in present.chunks(per_chunk) {
        let mut rows = Vec::with_capacity(group.len() * nb * d);
        for feats in group {
            for r in background.row_iter() {
                let start = rows.len();
                rows.extend_from_slice(r);
                for &j in feats {
                    rows[start + j] = x[j];
                }
            }
        }
        let p = model.predict_proba_batch(&Matrix::from_vec(group.len() * nb, d, rows)?)?;
        for k in 0..group.len() {
            let s: f64 = (0..nb).map(|b| p.get(k * nb + b, target)).sum();
            out.push(s / nb as f64);
        }
    }
    Ok(out)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Coalitions over `m` features as bitsets, with regression weights.
struct Coalitions {
    m: usize,
    masks: Vec<Vec<u64>>,
    weights: Vec<f64>,
    index: HashMap<Vec<u64>, usize>,
}

impl Coalitions {
    fn new(m: usize) -> Self {
        Self {
            m,
            masks: Vec::new(),
            weights: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn add(&mut self, mask: Vec<u64>, w: f64) -> bool {
        if let Some(&k) = self.index.get(&mask) {
            self.weights[k] += w;
            false
        } else {
            self.index.insert(mask.clone(), self.masks.len());
            self.masks.push(mask);
            self.weights.push(w);
            true
        }
    }

    fn complement(&self, mask: &[u64]) -> Vec<u64> {
        let mut c: Vec<u64> = mask.iter().map(|w| !w).collect();
        let tail = self.m % 64;
        if tail != 0 {
            *c.last_mut().expect("non-empty") &= (1u64 << tail) - 1;
        }
        c
    }

    fn members(&self, mask: &[u64]) -> Vec<usize> {
        (0..self.m).filter(|&j| mask[j / 64] >> (j % 64) & 1 == 1).collect()
    }
}

fn mask_of(m: usize, feats: impl IntoIterator<Item = usize>) -> Vec<u64> {
    let mut mask = vec![0u64; m.div_ceil(64)];
    for j in feats {
        mask[j / 64] |= 1 << (j % 64);
    }
    mask
}

/// Visits every size-`s` subset of `0..m` in lexicographic order.
fn for_each_subset(m: usize, s: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..s).collect();
    loop {
        f(&idx);
        let Some(i) = (0..s).rev().find(|&i| idx[i] != i + m - s) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..s {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Shapley kernel weight of one coalition of size `s` among `m` features.
fn kernel_weight(m: usize, s: usize) -> f64 {
    (m - 1) as f64 / (binomial(m, s) * s as f64 * (m - s) as f64)
}

/// Every proper non-empty coalition with its exact kernel weight.
fn enumerate_all(m: usize) -> Coalitions {
    let mut c = Coalitions::new(m);
    for s in 1..m {
        let w = kernel_weight(m, s);
        for_each_subset(m, s, |feats| {
            c.add(mask_of(m, feats.iter().copied()), w);
        });
    }
    c
}

/// Enumerates whole coalition sizes (smallest and largest first) while the
/// budget covers them, then samples the remaining sizes in complementary
/// pairs in proportion to the kernel.
fn sample_coalitions(m: usize, budget: usize, rng: &mut RngStream) -> Coalitions {
    let n_sizes = m / 2; // ceil((m − 1) / 2)
    let n_paired = (m - 1) / 2;
    let mut size_w: Vec<f64> = (1..=n_sizes)
        .map(|s| {
            let w = (m - 1) as f64 / (s * (m - s)) as f64;
            if s <= n_paired {
                2.0 * w
            } else {
                w
            }
        })
        .collect();
    let total: f64 = size_w.iter().sum();
    size_w.iter_mut().for_each(|w| *w /= total);

    let mut c = Coalitions::new(m);
    let mut left = budget as f64;
    let mut remaining = size_w.clone();
    let mut n_full = 0;
    for s in 1..=n_sizes {
        let paired = s <= n_paired;
        let count = binomial(m, s) * if paired { 2.0 } else { 1.0 };
        if left * remaining[s - 1] / count < 1.0 - 1e-8 {
            break;
        }
        n_full += 1;
        left -= count;
        if remaining[s - 1] < 1.0 {
            let rest = 1.0 - remaining[s - 1];
            remaining.iter_mut().for_each(|w| *w /= rest);
        }
        let w = size_w[s - 1] / binomial(m, s) / if paired { 2.0 } else { 1.0 };
        for_each_subset(m, s, |feats| {
            let mask = mask_of(m, feats.iter().copied());
            if paired {
                let comp = c.complement(&mask);
                c.add(comp, w);
            }
            c.add(mask, w);
        });
    }
    let n_fixed = c.masks.len();
    let mut left = budget.saturating_sub(n_fixed);
    if n_full == n_sizes || left == 0 {
        return c;
    }

    let tail = &size_w[n_full..];
    let weight_left: f64 = tail.iter().sum();
    let cdf: Vec<f64> = tail
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / weight_left;
            Some(*acc)
        })
        .collect();
    let mut scratch: Vec<usize> = (0..m).collect();
    let mut attempts = 0;
    while left > 0 && attempts < 4 * budget {
        attempts += 1;
        let u = rng.uniform();
        let pick = cdf.iter().position(|&p| u < p).unwrap_or(cdf.len() - 1);
        let s = n_full + pick + 1;
        // Partial Fisher–Yates: the first `s` entries become the subset.
        for i in 0..s {
            let j = i + rng.below(m - i);
            scratch.swap(i, j);
        }
        let mask = mask_of(m, scratch[..s].iter().copied());
        let comp = c.complement(&mask);
        if c.add(mask, 1.0) {
            left -= 1;
        }
        if left > 0 && s <= n_paired && c.add(comp, 1.0) {
            left -= 1;
        }
    }
    let sampled: f64 = c.weights[n_fixed..].iter().sum();
    if sampled > 0.0 {
        c.weights[n_fixed..].iter_mut().for_each(|w| *w *= weight_left / sampled);
    }
    c
}

/// Solves `min Σ w_k (y_k − z_kᵀφ)² + λ‖φ‖²` subject to `1ᵀφ = total`.
/// Returns the solution and the ridge actually used.
fn constrained_wls(coal: &Coalitions, y: &[f64], total: f64, ridge: f64) -> Result<(Vec<f64>, f64)> {
    let (m, k) = (coal.m, coal.masks.len());
    let mut z = Matrix::zeros(k, m);
    let mut zw = Matrix::zeros(k, m);
    let mut rhs = vec![0.0; m];
    for (r, (mask, &w)) in coal.masks.iter().zip(&coal.weights).enumerate() {
        for j in coal.members(mask) {
            z.set(r, j, 1.0);
            zw.set(r, j, w);
            rhs[j] += w * y[r];
        }
    }
    let gram = z.t_matmul(&zw)?;
    let scale = (0..m).map(|j| gram.get(j, j)).sum::<f64>() / m as f64;
    let mut lambda = ridge;
    for _ in 0..RIDGE_ATTEMPTS {
        let mut a = gram.clone();
        for j in 0..m {
            a.set(j, j, a.get(j, j) + lambda);
        }
        match Cholesky::factor(&a) {
            Ok(ch) => {
                let phi0 = ch.solve(&rhs)?;
                let u = ch.solve(&vec![1.0; m])?;
                let gap = total - phi0.iter().sum::<f64>();
                let denom: f64 = u.iter().sum();
                let phi: Vec<f64> = phi0.iter().zip(&u).map(|(p, ui)| p + ui * gap / denom).collect();
                if phi.iter().all(|v| v.is_finite()) {
                    return Ok((phi, lambda));
                }
            }
            Err(Error::NotPositiveDefinite { .. }) => {}
            Err(e) => return Err(e),
        }
        lambda = if lambda == 0.0 { 1e-10 * scale.max(f64::MIN_POSITIVE) } else { lambda * 100.0 };
    }
    Err(Error::Solver(format!(
        "SHAP regression over {m} features stays singular up to ridge {lambda:e}"
    )))
}

/// KernelSHAP attribution of the target-class probability.
///
/// Features equal to `x` across the whole background cannot change any
/// coalition value; they get exactly zero and are left out of the
/// regression. When the budget covers all `2^m − 2` coalitions of the
/// remaining `m` features they are enumerated with exact kernel weights,
/// which reproduces Shapley values up to the ridge term.
pub fn kernel_shap(
    model: &dyn Classifier,
    x: &[f64],
    sample_id: usize,
    target: usize,
    cfg: &ShapConfig,
    rng: &mut RngStream,
) -> Result<Attribution> {
    check_input(model, x, target)?;
    cfg.validate(model.n_features())?;
    let bg = &cfg.background;
    let varying: Vec<usize> = (0..x.len())
        .filter(|&j| bg.row_iter().any(|r| r[j] != x[j]))
        .collect();
    let m = varying.len();
    let ends = coalition_values(model, x, bg, &[Vec::new(), varying.clone()], target)?;
    let (base, fx) = (ends[0], ends[1]);
    let mut values = vec![0.0; x.len()];
    let mut flag = None;
    if m == 1 {
        values[varying[0]] = fx - base;
    } else if m > 1 {
        let full = m < 31 && cfg.n_coalitions as f64 >= 2f64.powi(m as i32) - 2.0;
        let coal = if full {
            enumerate_all(m)
        } else {
            sample_coalitions(m, cfg.n_coalitions, rng)
        };
        let present: Vec<Vec<usize>> = coal
            .masks
            .iter()
            .map(|mask| coal.members(mask).into_iter().map(|j| varying[j]).collect())
            .collect();
        let y: Vec<f64> = coalition_values(model, x, bg, &present, target)?
            .into_iter()
            .map(|v| v - base)
            .collect();
        let (phi, lambda) = constrained_wls(&coal, &y, fx - base, cfg.ridge_reg)?;
        if lambda != cfg.ridge_reg {
            log::warn!("{} sample {sample_id}: SHAP ridge raised to {lambda:e}", model.id());
            flag = Some(format!("ridge raised to {lambda:e}"));
        }
        for (j, p) in varying.iter().zip(phi) {
            values[*j] = p;
        }
    }
    Ok(Attribution {
        model_id: model.id().to_string(),
        sample_id,
        method: Method::Shap,
        target_class: target,
        values,
        base_value: base,
        output: fx,
        flag,
    })
}

/// Shapley values of the target-class probability by enumerating all
/// `2^d` coalitions.
pub fn exact_shapley(
    model: &dyn Classifier,
    x: &[f64],
    sample_id: usize,
    target: usize,
    background: &Matrix,
) -> Result<Attribution> {
    check_input(model, x, target)?;
    let d = x.len();
    if d > EXACT_MAX_FEATURES {
        return Err(Error::Capability(format!(
            "exact Shapley enumeration is limited to {EXACT_MAX_FEATURES} features, got {d}"
        )));
    }
    if background.rows() == 0 || background.cols() != d {
        return Err(Error::Config("background must be non-empty with matching width".into()));
    }
    let subsets: Vec<Vec<usize>> = (0..1usize << d)
        .map(|s| (0..d).filter(|j| s >> j & 1 == 1).collect())
        .collect();
    let v = coalition_values(model, x, background, &subsets, target)?;
    let fact: Vec<f64> = (0..=d).scan(1.0, |acc, i| {
        if i > 0 {
            *acc *= i as f64;
        }
        Some(*acc)
    }).collect();
    let mut values = vec![0.0; d];
    for (i, value) in values.iter_mut().enumerate() {
        let bit = 1usize << i;
        *value = (0..1usize << d)
            .filter(|s| s & bit == 0)
            .map(|s| {
                let k = s.count_ones() as usize;
                fact[k] * fact[d - k - 1] / fact[d] * (v[s | bit] - v[s])
            })
            .sum();
    }
    Ok(Attribution {
        model_id: model.id().to_string(),
        sample_id,
        method: Method::ExactShapley,
        target_class: target,
        values,
        base_value: v[0],
        output: v[(1 << d) - 1],
        flag: None,
    })
}

/// Integrated Gradients of the target logit along the straight path from
/// the baseline, by a right Riemann sum over `steps` points.
pub fn integrated_gradients(
    model: &dyn Classifier,
    x: &[f64],
    sample_id: usize,
    target: usize,
    cfg: &IgConfig,
) -> Result<Attribution> {
    check_input(model, x, target)?;
    if cfg.steps == 0 {
        return Err(Error::Config("IG needs at least one step".into()));
    }
    let d = x.len();
    if cfg.baseline.len() != d {
        return Err(Error::Shape(format!("baseline has {} features, expected {d}", cfg.baseline.len())));
    }
    let m = cfg.steps;
    let mut path = Vec::with_capacity(m * d);
    for k in 1..=m {
        let t = k as f64 / m as f64;
        path.extend(x.iter().zip(&cfg.baseline).map(|(xi, bi)| bi + t * (xi - bi)));
    }
    let path = Matrix::from_vec(m, d, path)?;
    let grads = model.logit_gradient_batch(&path, target)?;
    let mut values = vec![0.0; d];
    for g in grads.row_iter() {
        values.iter_mut().zip(g).for_each(|(v, gi)| *v += gi);
    }
    for ((v, xi), bi) in values.iter_mut().zip(x).zip(&cfg.baseline) {
        *v *= (xi - bi) / m as f64;
    }
    let ends = model.logits_batch(&Matrix::from_vec(2, d, [cfg.baseline.as_slice(), x].concat())?)?;
    Ok(Attribution {
        model_id: model.id().to_string(),
        sample_id,
        method: Method::IntGrad,
        target_class: target,
        values,
        base_value: ends.get(0, target),
        output: ends.get(1, target),
        flag: None,
    })
}

/// Scales values into `[-1, 1]` by the largest magnitude. An all-zero
/// attribution comes back unchanged with `flag` set.
pub fn normalize_attribution(a: &Attribution) -> Attribution {
    let peak = a.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = a.clone();
    if peak == 0.0 {
        out.flag = Some("all-zero attribution left unnormalized".into());
    } else {
        out.values.iter_mut().for_each(|v| *v /= peak);
    }
    out
}

/// Writes one JSON object per line.
pub fn write_attributions(path: &Path, attrs: &[Attribution]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(fs::File::create(&tmp)?);
    for a in attrs {
        serde_json::to_writer(&mut w, a)?;
        w.write_all(b"\n")?;
    }
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_attributions(path: &Path) -> Result<Vec<Attribution>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset,
                msg: e.to_string(),
            })?);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}
