//! Explanation separability between training variations and the aggregate
//! consistency score.
//!
//! For two variations `a` and `b`, a logistic-regression discriminator is
//! trained to tell their attribution vectors apart. Its held-out accuracy
//! `M` gives the separability `S = 2|M − 0.5|`, and consistency over `α`
//! pairs is `C = 1 − ΣS / α`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::hex_digest;
use crate::error::{Error, Result};
use crate::explainers::Attribution;
use crate::models::{Arch, Family, VariationConfig};
use crate::numkit::{permutation, RngStream};

/// Fraction of samples held out from discriminator training.
pub const HOLDOUT_FRACTION: f64 = 0.2;
pub const LR_LAMBDA: f64 = 1e-4;
pub const LR_GRAD_TOL: f64 = 1e-6;
pub const LR_MAX_EPOCHS: usize = 500;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariationPair {
    pub a: String,
    pub b: String,
    pub family: Family,
}

impl VariationPair {
    /// Order-independent identifier; seeds the discriminator split.
    pub fn id(&self) -> String {
        let (lo, hi) = if self.a <= self.b { (&self.a, &self.b) } else { (&self.b, &self.a) };
        format!("{}/{lo}~{hi}", self.family)
    }
}

/// The config with the family's own knob blanked; members of one family
/// group agree on everything else.
fn group_key(cfg: &VariationConfig) -> String {
    let mut c = cfg.clone();
    match cfg.family {
        Family::Seed => c.init_seed = 0,
        Family::Shuffle => c.shuffle_seed = 0,
        Family::Dropout => c.dropout_rate = 0.0,
    }
    c.checkpoints = false;
    c.model_id()
}

/// All unordered pairs within each family group. Groups with fewer than
/// two distinct models are skipped with a warning.
pub fn build_pairs(configs: &[VariationConfig]) -> Vec<VariationPair> {
    let mut groups: BTreeMap<(Arch, Family, String), Vec<String>> = BTreeMap::new();
    for c in configs {
        let ids = groups.entry((c.arch, c.family, group_key(c))).or_default();
        let id = c.model_id();
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let mut pairs = Vec::new();
    for ((arch, family, _), ids) in groups {
        if ids.len() < 2 {
            log::warn!("{arch}/{family}: {} variant(s), no pairs formed", ids.len());
            continue;
        }
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                pairs.push(VariationPair {
                    a: ids[i].clone(),
                    b: ids[j].clone(),
                    family,
                });
            }
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityResult {
    pub pair: VariationPair,
    /// Held-out discriminator accuracy.
    pub m: f64,
    pub s: f64,
    /// Set when all attribution vectors were identical and `m` was forced.
    pub degenerate: bool,
    pub n_train: usize,
    pub n_test: usize,
}

/// `S = 2|M − 0.5|`
pub fn separability_score(m: f64) -> f64 {
    2.0 * (m - 0.5).abs()
}

/// L2-regularised logistic regression with intercept, fitted by full-batch
/// Nesterov-accelerated gradient descent on `mean log-loss + λ/2 ‖w‖²`
/// (intercept unpenalised).
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    pub w: Vec<f64>,
    pub b: f64,
    pub epochs: usize,
    pub grad_norm: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Largest eigenvalue of `[X 1]ᵀ[X 1]` by power iteration, padded by 2%
/// so the derived step stays below the stability limit.
fn spectral_norm_sq(rows: &[&[f64]]) -> f64 {
    let d = rows.first().map_or(0, |r| r.len());
    let mut v = vec![1.0 / ((d + 1) as f64).sqrt(); d + 1];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut next = vec![0.0; d + 1];
        for r in rows {
            let xv = r.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d];
            next.iter_mut().zip(r.iter()).for_each(|(n, a)| *n += a * xv);
            next[d] += xv;
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let converged = (norm - lambda).abs() <= 1e-6 * norm;
        lambda = norm;
        v = next;
        if converged {
            break;
        }
    }
    1.02 * lambda
}

impl LogisticRegression {
    pub fn fit(rows: &[&[f64]], labels: &[bool], lambda: f64, tol: f64, max_epochs: usize) -> Self {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        // Lipschitz constant of the gradient: ‖[X 1]‖₂² / (4n) + λ.
        let step = 1.0 / (spectral_norm_sq(rows) / (4.0 * n as f64) + lambda);
        // Parameters are packed as [w, b]; `y` is the extrapolated point.
        let mut x = vec![0.0; d + 1];
        let mut y = x.clone();
        let mut g = vec![0.0; d + 1];
        let mut t = 1.0f64;
        let mut grad_norm = f64::INFINITY;
        let mut epochs = 0;
        while epochs < max_epochs {
            g[..d].iter_mut().zip(&y[..d]).for_each(|(gi, wi)| *gi = lambda * wi);
            g[d] = 0.0;
            for (r, &label) in rows.iter().zip(labels) {
                let z = y[d] + r.iter().zip(&y[..d]).map(|(a, c)| a * c).sum::<f64>();
                let e = (sigmoid(z) - f64::from(u8::from(label))) / n as f64;
                g[d] += e;
                g[..d].iter_mut().zip(r.iter()).for_each(|(gi, v)| *gi += e * v);
            }
            grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if grad_norm < tol {
                x.clone_from(&y);
                break;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            for i in 0..=d {
                let xi = y[i] - step * g[i];
                y[i] = xi + beta * (xi - x[i]);
                x[i] = xi;
            }
            t = t_next;
            epochs += 1;
        }
        let b = x.pop().unwrap_or(0.0);
        Self { w: x, b, epochs, grad_norm }
    }

    pub fn predict(&self, row: &[f64]) -> bool {
        self.b + row.iter().zip(&self.w).map(|(a, c)| a * c).sum::<f64>() > 0.0
    }
}

fn by_sample<'a>(attrs: &'a [Attribution], side: &str) -> Result<BTreeMap<usize, &'a Attribution>> {
    let mut map = BTreeMap::new();
    for a in attrs {
        if map.insert(a.sample_id, a).is_some() {
            return Err(Error::Pairing(format!("side {side} has sample {} twice", a.sample_id)));
        }
    }
    Ok(map)
}

/// Separability of two attribution sets over the same samples.
///
/// Samples (not rows) are split 80/20, so both explanations of a sample
/// land on the same side of the split and each side holds equally many
/// rows of either label.
pub fn separability(
    pair: &VariationPair,
    attribs_a: &[Attribution],
    attribs_b: &[Attribution],
    split_stream: &mut RngStream,
) -> Result<SeparabilityResult> {
    let (ma, mb) = (by_sample(attribs_a, "a")?, by_sample(attribs_b, "b")?);
    if ma.len() != mb.len() || ma.keys().ne(mb.keys()) {
        let missing: Vec<usize> = ma.keys().filter(|k| !mb.contains_key(k)).take(5).copied().collect();
        let extra: Vec<usize> = mb.keys().filter(|k| !ma.contains_key(k)).take(5).copied().collect();
        return Err(Error::Pairing(format!(
            "{}: sample sets differ ({} vs {}); only in a: {missing:?}, only in b: {extra:?}",
            pair.id(),
            ma.len(),
            mb.len()
        )));
    }
    let t = ma.len();
    if t < 2 {
        return Err(Error::Pairing(format!("{}: need at least 2 samples, got {t}", pair.id())));
    }
    let d = ma.values().next().expect("non-empty").values.len();
    if ma.values().chain(mb.values()).any(|a| a.values.len() != d) {
        return Err(Error::Pairing(format!("{}: attribution lengths differ", pair.id())));
    }
    let ids: Vec<usize> = ma.keys().copied().collect();
    let n_test = ((t as f64 * HOLDOUT_FRACTION).round() as usize).clamp(1, t - 1);
    let order = permutation(t, split_stream);
    let (test_ids, train_ids) = order.split_at(n_test);

    let first = &ma[&ids[0]].values;
    let degenerate = ma.values().chain(mb.values()).all(|a| &a.values == first);
    if degenerate {
        return Ok(SeparabilityResult {
            pair: pair.clone(),
            m: 0.5,
            s: 0.0,
            degenerate: true,
            n_train: 2 * train_ids.len(),
            n_test: 2 * n_test,
        });
    }

    let rows_of = |idx: &[usize]| -> (Vec<&[f64]>, Vec<bool>) {
        let mut rows = Vec::with_capacity(2 * idx.len());
        let mut labels = Vec::with_capacity(2 * idx.len());
        for &i in idx {
            rows.push(ma[&ids[i]].values.as_slice());
            labels.push(false);
            rows.push(mb[&ids[i]].values.as_slice());
            labels.push(true);
        }
        (rows, labels)
    };
    let (train_rows, train_labels) = rows_of(train_ids);
    let lr = LogisticRegression::fit(&train_rows, &train_labels, LR_LAMBDA, LR_GRAD_TOL, LR_MAX_EPOCHS);
    let (test_rows, test_labels) = rows_of(test_ids);
    let correct = test_rows
        .iter()
        .zip(&test_labels)
        .filter(|(r, &y)| lr.predict(r) == y)
        .count();
    let m = correct as f64 / test_rows.len() as f64;
    Ok(SeparabilityResult {
        pair: pair.clone(),
        m,
        s: separability_score(m),
        degenerate: false,
        n_train: train_rows.len(),
        n_test: test_rows.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub arch: String,
    pub explainer: String,
    pub c_overall: f64,
    pub c_per_family: BTreeMap<Family, f64>,
    pub alpha: usize,
    pub results: Vec<SeparabilityResult>,
}

fn consistency_of(results: &[&SeparabilityResult]) -> f64 {
    1.0 - results.iter().map(|r| r.s).sum::<f64>() / results.len() as f64
}

/// `C = 1 − ΣS/α`, overall and per family.
pub fn consistency(arch: &str, explainer: &str, results: &[SeparabilityResult]) -> Result<ConsistencyReport> {
    if results.is_empty() {
        return Err(Error::InsufficientData("consistency needs at least one pair".into()));
    }
    let all: Vec<&SeparabilityResult> = results.iter().collect();
    let mut per_family = BTreeMap::new();
    for fam in Family::ALL {
        let sub: Vec<&SeparabilityResult> = results.iter().filter(|r| r.pair.family == fam).collect();
        if !sub.is_empty() {
            per_family.insert(fam, consistency_of(&sub));
        }
    }
    Ok(ConsistencyReport {
        arch: arch.to_string(),
        explainer: explainer.to_string(),
        c_overall: consistency_of(&all),
        c_per_family: per_family,
        alpha: results.len(),
        results: results.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub arch: String,
    pub explainer: String,
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Five-number summary of `S` for one (arch, explainer) group.
pub fn separability_distribution(arch: &str, explainer: &str, results: &[SeparabilityResult]) -> Result<Quartiles> {
    if results.is_empty() {
        return Err(Error::InsufficientData("no separability results".into()));
    }
    let mut s: Vec<f64> = results.iter().map(|r| r.s).collect();
    s.sort_by(f64::total_cmp);
    Ok(Quartiles {
        arch: arch.to_string(),
        explainer: explainer.to_string(),
        n: s.len(),
        min: s[0],
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
        max: s[s.len() - 1],
    })
}

/// Raw `(pair, M, S)` rows.
pub fn write_results_csv(path: &Path, results: &[SeparabilityResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "pair_id,model_a,model_b,family,m,s,degenerate,n_train,n_test")?;
    for r in results {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.pair.id(),
            r.pair.a,
            r.pair.b,
            r.pair.family,
            r.m,
            r.s,
            r.degenerate,
            r.n_train,
            r.n_test
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Stream label for the discriminator split of a pair.
pub fn split_label(pair: &VariationPair, explainer: &str) -> String {
    format!("consistency/{explainer}/{}", hex_digest(pair.id().as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explainers::Method;
    use crate::numkit::derive_stream;

    fn attrs(model: &str, vals: &[Vec<f64>]) -> Vec<Attribution> {
        vals.iter()
            .enumerate()
            .map(|(i, v)| Attribution {
                model_id: model.into(),
                sample_id: i,
                method: Method::Shap,
                target_class: 0,
                values: v.clone(),
                base_value: 0.0,
                output: v.iter().sum(),
                flag: None,
            })
            .collect()
    }

    fn noise(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = derive_stream(seed, "test/noise");
        (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
    }

    fn pair(f: Family) -> VariationPair {
        VariationPair {
            a: "a".into(),
            b: "b".into(),
            family: f,
        }
    }

    fn cfg(arch: Arch, family: Family, init: u64, shuffle: u64, dropout: f64) -> VariationConfig {
        VariationConfig {
            arch,
            family,
            init_seed: init,
            shuffle_seed: shuffle,
            dropout_rate: dropout,
            ..Default::default()
        }
    }

    #[test]
    fn metric_endpoints() {
        assert_eq!(separability_score(0.5), 0.0);
        assert_eq!(separability_score(1.0), 1.0);
        assert_eq!(separability_score(0.0), 1.0);
        let mk = |m: f64| SeparabilityResult {
            pair: pair(Family::Seed),
            m,
            s: separability_score(m),
            degenerate: false,
            n_train: 0,
            n_test: 0,
        };
        assert_eq!(consistency("x", "y", &[mk(0.5)]).unwrap().c_overall, 1.0);
        assert_eq!(consistency("x", "y", &[mk(1.0)]).unwrap().c_overall, 0.0);
        assert_eq!(consistency("x", "y", &[mk(1.0), mk(0.5)]).unwrap().c_overall, 0.5);
        assert!(consistency("x", "y", &[]).is_err());
    }

    #[test]
    fn pairs_stay_within_families() {
        let mut cs: Vec<VariationConfig> = (0..5).map(|s| cfg(Arch::Mlp, Family::Seed, s, 0, 0.25)).collect();
        assert_eq!(build_pairs(&cs).len(), 10);
        cs = (0..3)
            .map(|s| cfg(Arch::Mlp, Family::Seed, s, 0, 0.25))
            .chain((0..3).map(|s| cfg(Arch::Mlp, Family::Shuffle, 0, s, 0.25)))
            .collect();
        let pairs = build_pairs(&cs);
        assert_eq!(pairs.len(), 6);
        let fam = |id: &str| cs.iter().find(|c| c.model_id() == id).unwrap().clone();
        for p in &pairs {
            // The shared base model sits in both groups; every other member
            // must belong to the pair's family.
            for id in [&p.a, &p.b] {
                let c = fam(id);
                assert!(c.family == p.family || (c.init_seed == 0 && c.shuffle_seed == 0));
            }
        }
        assert!(build_pairs(&[cfg(Arch::Mlp, Family::Dropout, 0, 0, 0.1)]).is_empty());
    }

    #[test]
    fn copies_are_inseparable() {
        let v = noise(200, 30, 1);
        let r = separability(&pair(Family::Seed), &attrs("a", &v), &attrs("b", &v), &mut derive_stream(0, "s")).unwrap();
        assert_eq!(r.m, 0.5);
        assert_eq!(r.s, 0.0);
    }

    #[test]
    fn offset_feature_is_separable() {
        let v = noise(200, 30, 2);
        let w: Vec<Vec<f64>> = v
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r[0] += 10.0;
                r
            })
            .collect();
        let r = separability(&pair(Family::Seed), &attrs("a", &v), &attrs("b", &w), &mut derive_stream(0, "s")).unwrap();
        assert!(r.m > 0.97 && r.s > 0.95, "{r:?}");
    }

    #[test]
    fn independent_noise_is_near_chance() {
        let r = separability(
            &pair(Family::Seed),
            &attrs("a", &noise(500, 20, 3)),
            &attrs("b", &noise(500, 20, 4)),
            &mut derive_stream(0, "s"),
        )
        .unwrap();
        assert!(r.s < 0.2, "{r:?}");
    }

    #[test]
    fn degenerate_and_mismatched_inputs() {
        let same = vec![vec![1.0, 2.0]; 10];
        let r = separability(&pair(Family::Seed), &attrs("a", &same), &attrs("b", &same), &mut derive_stream(0, "s")).unwrap();
        assert!(r.degenerate && r.m == 0.5);
        let short = attrs("b", &same[..9]);
        assert!(matches!(
            separability(&pair(Family::Seed), &attrs("a", &same), &short, &mut derive_stream(0, "s")),
            Err(Error::Pairing(_))
        ));
    }

    #[test]
    fn relabeling_leaves_s_unchanged() {
        let (v, w) = (noise(100, 10, 5), noise(100, 10, 6));
        let w: Vec<Vec<f64>> = w.iter().map(|r| r.iter().map(|x| x * 0.5 + 0.3).collect()).collect();
        let p = pair(Family::Seed);
        let q = VariationPair { a: "b".into(), b: "a".into(), family: Family::Seed };
        assert_eq!(p.id(), q.id());
        let r1 = separability(&p, &attrs("a", &v), &attrs("b", &w), &mut derive_stream(0, &split_label(&p, "shap"))).unwrap();
        let r2 = separability(&q, &attrs("b", &w), &attrs("a", &v), &mut derive_stream(0, &split_label(&q, "shap"))).unwrap();
        assert_eq!(r1.s, r2.s);
    }

    #[test]
    fn logistic_regression_converges_on_separable_data() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { -1.0 } else { 1.0 }, 0.3]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 2 == 1).collect();
        let lr = LogisticRegression::fit(&refs, &labels, 1e-2, 1e-8, 100_000);
        assert!(lr.grad_norm < 1e-8);
        assert!(refs.iter().zip(&labels).all(|(r, &y)| lr.predict(r) == y));
    }

    #[test]
    fn quartiles() {
        let mk = |s: f64| SeparabilityResult {
            pair: pair(Family::Seed),
            m: 0.5 + s / 2.0,
            s,
            degenerate: false,
            n_train: 0,
            n_test: 0,
        };
        let q = separability_distribution("a", "e", &[mk(0.0), mk(0.5), mk(1.0)]).unwrap();
        assert_eq!((q.min, q.median, q.max), (0.0, 0.5, 1.0));
        let one = separability_distribution("a", "e", &[mk(0.3)]).unwrap();
        assert!([one.min, one.q1, one.median, one.q3, one.max].iter().all(|v| *v == 0.3));
    }
}
