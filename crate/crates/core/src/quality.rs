//! Explanation quality: infidelity, max-sensitivity, and how both relate to
//! consistency across architectures.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyReport;
use crate::error::{Error, Result};
use crate::explainers::{Attribution, Method};
use crate::models::Classifier;
use crate::numkit::{pearson, Matrix, RngStream};

pub const DEFAULT_SIGMA: f64 = 0.1;
pub const DEFAULT_PERTURBATIONS: usize = 100;
pub const DEFAULT_RADIUS: f64 = 0.02;
pub const DEFAULT_SENSITIVITY_SAMPLES: usize = 10;

/// The scalar an attribution explains: target probability for Shapley
/// methods, target logit for IG.
fn explained_output(model: &dyn Classifier, method: Method, x: &Matrix, target: usize) -> Result<Vec<f64>> {
    let out = match method {
        Method::IntGrad => model.logits_batch(x)?,
        Method::Shap | Method::ExactShapley => model.predict_proba_batch(x)?,
    };
    Ok((0..out.rows()).map(|r| out.get(r, target)).collect())
}

/// Monte-Carlo `E[(Iᵀφ − (f(x) − f(x − I)))²]` with `I ~ N(0, σ²)`.
pub fn infidelity(
    model: &dyn Classifier,
    attrib: &Attribution,
    x: &[f64],
    n_perturb: usize,
    sigma: f64,
    stream: &mut RngStream,
) -> Result<f64> {
    let d = x.len();
    if attrib.values.len() != d || model.n_features() != d {
        return Err(Error::Shape(format!(
            "infidelity: sample has {d} features, attribution {}, model {}",
            attrib.values.len(),
            model.n_features()
        )));
    }
    if n_perturb == 0 || !(sigma >= 0.0) {
        return Err(Error::Config("infidelity needs n_perturb ≥ 1 and σ ≥ 0".into()));
    }
    let noise: Vec<f64> = (0..n_perturb * d).map(|_| sigma * stream.normal()).collect();
    let mut rows = Vec::with_capacity((n_perturb + 1) * d);
    rows.extend_from_slice(x);
    for p in noise.chunks(d) {
        rows.extend(x.iter().zip(p).map(|(a, b)| a - b));
    }
    let f = explained_output(model, attrib.method, &Matrix::from_vec(n_perturb + 1, d, rows)?, attrib.target_class)?;
    let total: f64 = noise
        .chunks(d)
        .zip(&f[1..])
        .map(|(p, fp)| {
            let predicted: f64 = p.iter().zip(&attrib.values).map(|(a, b)| a * b).sum();
            (predicted - (f[0] - fp)).powi(2)
        })
        .sum();
    Ok(total / n_perturb as f64)
}

/// `max ‖E(x+δ) − E(x)‖₂ / ‖E(x)‖₂` over `n_samples` draws of `δ`, uniform
/// in the ℓ∞ ball of `radius`. Directions are drawn first and scaled by
/// `radius`, so one stream gives comparable values across radii.
///
/// Returns `None` when `E(x)` is zero and the ratio is undefined.
pub fn sensitivity_max(
    explain: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    radius: f64,
    n_samples: usize,
    stream: &mut RngStream,
) -> Result<Option<f64>> {
    if !(radius >= 0.0) {
        return Err(Error::Config("sensitivity radius must be non-negative".into()));
    }
    let base = explain(x)?;
    let norm = base.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(None);
    }
    let mut worst = 0.0f64;
    for _ in 0..n_samples {
        let dirs: Vec<f64> = (0..x.len()).map(|_| stream.uniform_in(-1.0, 1.0)).collect();
        if radius == 0.0 {
            continue;
        }
        let moved: Vec<f64> = x.iter().zip(&dirs).map(|(a, u)| a + radius * u).collect();
        let e = explain(&moved)?;
        let diff = e.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    Ok(Some(worst))
}

/// One row of the quality table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRecord {
    pub model_id: String,
    pub arch: String,
    pub explainer: String,
    pub dataset: String,
    pub dropout: f64,
    pub seed: u64,
    pub shuffle: u64,
    pub infidelity: f64,
    pub sensitivity_max: f64,
    /// Base-task accuracy on the explained samples.
    pub expl_accuracy: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub arch: String,
    pub explainer: String,
    pub consistency: f64,
    pub infidelity: f64,
    pub sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityCorrelation {
    /// `None` when either column has zero variance.
    pub pearson_infidelity: Option<f64>,
    pub pearson_sensitivity: Option<f64>,
    pub n_points: usize,
    pub points: Vec<ScatterPoint>,
}

/// Pearson correlation between consistency and mean quality, one point per
/// (arch, explainer) present in both inputs.
pub fn consistency_quality_correlation(
    reports: &[ConsistencyReport],
    quality: &[QualityRecord],
) -> Result<QualityCorrelation> {
    let mut sums: BTreeMap<(&str, &str), (f64, f64, usize)> = BTreeMap::new();
    for q in quality {
        let e = sums.entry((&q.arch, &q.explainer)).or_insert((0.0, 0.0, 0));
        e.0 += q.infidelity;
        e.1 += q.sensitivity_max;
        e.2 += 1;
    }
    let points: Vec<ScatterPoint> = reports
        .iter()
        .filter_map(|r| {
            sums.get(&(r.arch.as_str(), r.explainer.as_str())).map(|&(i, s, n)| ScatterPoint {
                arch: r.arch.clone(),
                explainer: r.explainer.clone(),
                consistency: r.c_overall,
                infidelity: i / n as f64,
                sensitivity: s / n as f64,
            })
        })
        .collect();
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "correlation needs at least 3 matched (arch, explainer) points, got {}",
            points.len()
        )));
    }
    let c: Vec<f64> = points.iter().map(|p| p.consistency).collect();
    let inf: Vec<f64> = points.iter().map(|p| p.infidelity).collect();
    let sen: Vec<f64> = points.iter().map(|p| p.sensitivity).collect();
    Ok(QualityCorrelation {
        pearson_infidelity: pearson(&c, &inf),
        pearson_sensitivity: pearson(&c, &sen),
        n_points: points.len(),
        points,
    })
}

pub fn write_quality_csv(path: &Path, records: &[QualityRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "model_type,explainer,dataset,dropout,seed,shuffle,expl_accuracy,sensitivity,infidelity,model_id")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            r.arch, r.explainer, r.dataset, r.dropout, r.seed, r.shuffle, r.expl_accuracy, r.sensitivity_max, r.infidelity, r.model_id
        )?;
    }
    f.flush()?;
    Ok(())
}
