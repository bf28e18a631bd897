//! SVCCA similarity between layer representations of two training
//! variations, tracked across epoch checkpoints.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consistency::VariationPair;
use crate::error::{Error, Result};
use crate::models::TrainedModel;
use crate::numkit::{svd, Matrix};

/// Share of squared singular-value mass kept by the SVD step.
pub const VARIANCE_KEPT: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvccaCurve {
    pub pair: VariationPair,
    pub layer_idx: usize,
    /// `(epoch, similarity)` with strictly increasing epochs.
    pub per_epoch: Vec<(usize, f64)>,
}

/// Orthonormal basis (samples × r) of the dominant row space of a centered
/// neurons × samples matrix.
fn dominant_subspace(acts: &Matrix, what: &str) -> Result<Matrix> {
    let mut centered = acts.clone();
    centered.center_rows();
    let scale = acts.frobenius_norm().powi(2).max(1.0);
    let dec = svd(&centered)?;
    let energy: Vec<f64> = dec.s.iter().map(|s| s * s).collect();
    let total: f64 = energy.iter().sum();
    // Centering constant rows leaves only rounding residue.
    if !(total > 1e-24 * scale) {
        return Err(Error::Degenerate(format!("{what}: activations have zero variance")));
    }
    let mut kept = 0.0;
    let mut r = 0;
    while r < energy.len() && kept < VARIANCE_KEPT * total {
        kept += energy[r];
        r += 1;
    }
    Ok(dec.v.leading_cols(r.max(1)))
}

/// Mean canonical correlation between the SVD-truncated representations.
/// Inputs are neurons × samples with equal sample counts.
pub fn svcca_similarity(acts_a: &Matrix, acts_b: &Matrix) -> Result<f64> {
    named_similarity(acts_a, acts_b, "a", "b")
}

fn named_similarity(acts_a: &Matrix, acts_b: &Matrix, name_a: &str, name_b: &str) -> Result<f64> {
    if acts_a.cols() != acts_b.cols() {
        return Err(Error::Shape(format!(
            "SVCCA needs equal sample counts, got {} and {}",
            acts_a.cols(),
            acts_b.cols()
        )));
    }
    if acts_a.rows() < 2 || acts_b.rows() < 2 {
        return Err(Error::Shape("SVCCA needs at least two neurons per side".into()));
    }
    let va = dominant_subspace(acts_a, name_a)?;
    let vb = dominant_subspace(acts_b, name_b)?;
    // Canonical correlations of two subspaces: singular values of VaᵀVb.
    let cross = va.t_matmul(&vb)?;
    let rho = svd(&cross)?.s;
    let k = va.cols().min(vb.cols());
    let mean = rho.iter().take(k).map(|r| r.clamp(0.0, 1.0)).sum::<f64>() / k as f64;
    Ok(mean.clamp(0.0, 1.0))
}

/// One curve per layer, evaluated at every checkpoint epoch both models
/// share.
pub fn layer_curves(
    pair: &VariationPair,
    m_a: &TrainedModel,
    m_b: &TrainedModel,
    probe_x: &Matrix,
) -> Result<Vec<SvccaCurve>> {
    if m_a.arch() != m_b.arch() || m_a.n_layers() != m_b.n_layers() {
        return Err(Error::Config(format!(
            "layer curves need identical architectures ({} vs {})",
            m_a.arch(),
            m_b.arch()
        )));
    }
    let epochs_of = |m: &TrainedModel| -> Vec<usize> { m.checkpoints().iter().map(|c| c.epoch).collect() };
    let (ea, eb) = (epochs_of(m_a), epochs_of(m_b));
    let shared: Vec<usize> = ea.iter().filter(|e| eb.contains(e)).copied().collect();
    if shared.is_empty() {
        return Err(Error::MissingCheckpoints(format!(
            "no shared checkpoints: {} has {ea:?}, {} has {eb:?}",
            pair.a, pair.b
        )));
    }
    let mut curves = Vec::with_capacity(m_a.n_layers());
    for layer in 0..m_a.n_layers() {
        let mut per_epoch = Vec::with_capacity(shared.len());
        for &epoch in &shared {
            let a = m_a.checkpoint_activations(epoch, probe_x, layer)?;
            let b = m_b.checkpoint_activations(epoch, probe_x, layer)?;
            let sim = named_similarity(
                &a,
                &b,
                &format!("{} layer {layer} epoch {epoch}", pair.a),
                &format!("{} layer {layer} epoch {epoch}", pair.b),
            )?;
            per_epoch.push((epoch, sim));
        }
        curves.push(SvccaCurve {
            pair: pair.clone(),
            layer_idx: layer,
            per_epoch,
        });
    }
    Ok(curves)
}

pub fn write_curves_csv(path: &Path, curves: &[SvccaCurve]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "pair_id,layer,epoch,similarity")?;
    for c in curves {
        for (e, s) in &c.per_epoch {
            writeln!(f, "{},{},{e},{s}", c.pair.id(), c.layer_idx)?;
        }
    }
    f.flush()?;
    Ok(())
}
