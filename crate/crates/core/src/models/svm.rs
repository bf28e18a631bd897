//! RBF support vector classifier: SMO on the dual with second-order working
//! set selection, one-vs-rest for multiclass, Platt-scaled probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

const TAU: f64 = 1e-12;
const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Debug)]
pub struct SmoOutcome {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    /// Final maximal KKT violation `m(α) − M(α)`.
    pub violation: f64,
    /// Dual objective `eᵀα − ½αᵀQα` after every iteration.
    pub objective_trace: Vec<f64>,
}

/// Solves `min ½αᵀQα − eᵀα` s.t. `yᵀα = 0`, `0 ≤ α ≤ c`, with
/// `Q_ij = y_i y_j K_ij`, stopping when the maximal violating pair gap is
/// below `tol`.
pub fn smo(kernel: &Matrix, y: &[f64], c: f64, tol: f64, max_iter: usize) -> Result<SmoOutcome> {
    let n = y.len();
    if kernel.shape() != (n, n) {
        return Err(Error::Shape(format!("kernel {:?} for {n} labels", kernel.shape())));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Config("SMO labels must be ±1".into()));
    }
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut trace = Vec::new();
    let up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);

    let mut iterations = 0;
    let violation = loop {
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..n {
            if up(alpha[t], y[t]) && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i_sel = t;
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = usize::MAX;
        let mut obj_min = f64::INFINITY;
        if i_sel != usize::MAX {
            let ki = kernel.row(i_sel);
            for t in 0..n {
                if !low(alpha[t], y[t]) {
                    continue;
                }
                let yg = y[t] * grad[t];
                gmax2 = gmax2.max(yg);
                let b = gmax + yg;
                if b > 0.0 {
                    let a = ki[i_sel] + kernel.get(t, t) - 2.0 * ki[t];
                    let a = if a > 0.0 { a } else { TAU };
                    let obj = -(b * b) / a;
                    if obj <= obj_min {
                        obj_min = obj;
                        j_sel = t;
                    }
                }
            }
        }
        let gap = gmax + gmax2;
        if gap < tol || j_sel == usize::MAX {
            break gap.max(0.0);
        }
        if iterations >= max_iter {
            return Err(Error::Solver(format!(
                "SMO did not reach tolerance {tol} within {max_iter} iterations (gap {gap:.3e})"
            )));
        }
        iterations += 1;

        let (i, j) = (i_sel, j_sel);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let kij = kernel.get(i, j);
        if y[i] != y[j] {
            let quad = (kernel.get(i, i) + kernel.get(j, j) + 2.0 * (y[i] * y[j] * kij)).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (kernel.get(i, i) + kernel.get(j, j) - 2.0 * (y[i] * y[j] * kij)).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        let (ki, kj) = (kernel.row(i), kernel.row(j));
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
        trace.push(alpha.iter().zip(&grad).map(|(a, g)| 0.5 * a * (1.0 - g)).sum());
    };

    Ok(SmoOutcome {
        rho: compute_rho(&alpha, &grad, y, c),
        alpha,
        iterations,
        violation,
        objective_trace: trace,
    })
}

fn compute_rho(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> f64 {
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg)
            } else {
                lb = lb.max(yg)
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg)
            } else {
                lb = lb.max(yg)
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    }
}

/// Platt sigmoid `P(y=1 | f) = 1 / (1 + exp(a·f + b))`, fitted with the
/// regularised-target Newton method of Lin, Lin & Weng.
pub fn platt_fit(decision: &[f64], positive: &[bool]) -> (f64, f64) {
    let prior1 = positive.iter().filter(|&&p| p).count() as f64;
    let prior0 = positive.len() as f64 - prior1;
    let hi = (prior1 + 1.0) / (prior1 + 2.0);
    let lo = 1.0 / (prior0 + 2.0);
    let t: Vec<f64> = positive.iter().map(|&p| if p { hi } else { lo }).collect();
    let (max_iter, min_step, sigma, eps) = (100, 1e-10, 1e-12, 1e-5);

    let objective = |a: f64, b: f64| -> f64 {
        decision
            .iter()
            .zip(&t)
            .map(|(f, ti)| {
                let fapb = f * a + b;
                if fapb >= 0.0 {
                    ti * fapb + (1.0 + (-fapb).exp()).ln()
                } else {
                    (ti - 1.0) * fapb + (1.0 + fapb.exp()).ln()
                }
            })
            .sum()
    };
    let (mut a, mut b) = (0.0, ((prior0 + 1.0) / (prior1 + 1.0)).ln());
    let mut fval = objective(a, b);
    for _ in 0..max_iter {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (sigma, sigma, 0.0, 0.0, 0.0);
        for (f, ti) in decision.iter().zip(&t) {
            let fapb = f * a + b;
            let (p, q) = if fapb >= 0.0 {
                let e = (-fapb).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = fapb.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < eps && g2.abs() < eps {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        while step >= min_step {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
        }
        if step < min_step {
            break;
        }
    }
    (a, b)
}

fn platt_prob(a: f64, b: f64, f: f64) -> f64 {
    let fapb = f * a + b;
    if fapb >= 0.0 {
        let e = (-fapb).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + fapb.exp())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub gamma: f64,
    pub c: f64,
    /// Union of support vectors over all one-vs-rest problems.
    pub support: Matrix,
    /// `α_i y_i` per support vector (rows) and class (columns).
    pub coef: Matrix,
    pub rho: Vec<f64>,
    pub platt: Vec<(f64, f64)>,
    pub iterations: Vec<usize>,
}

/// `exp(−γ‖a_i − b_j‖²)` for every row pair.
pub fn rbf_kernel(a: &Matrix, b: &Matrix, gamma: f64) -> Result<Matrix> {
    let cross = a.matmul_t(b)?;
    let na: Vec<f64> = a.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let nb: Vec<f64> = b.row_iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut k = cross;
    for i in 0..k.rows() {
        let ni = na[i];
        for (j, v) in k.row_mut(i).iter_mut().enumerate() {
            let d2 = (ni + nb[j] - 2.0 * *v).max(0.0);
            *v = (-gamma * d2).exp();
        }
    }
    Ok(k)
}

/// `1 / (d · var(X))` over all entries, the usual "scale" heuristic.
pub fn default_gamma(x: &Matrix) -> f64 {
    let vals = x.as_slice();
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (x.cols() as f64 * var)
    } else {
        1.0
    }
}

impl SvmModel {
    pub fn fit(x: &Matrix, y: &[usize], n_classes: usize, c: f64, gamma: f64, tol: f64) -> Result<Self> {
        let n = x.rows();
        let kernel = rbf_kernel(x, x, gamma)?;
        let max_iter = (100 * n).max(100_000);
        let mut alphas = Vec::with_capacity(n_classes);
        let mut rho = Vec::with_capacity(n_classes);
        let mut platt = Vec::with_capacity(n_classes);
        let mut iterations = Vec::with_capacity(n_classes);
        for class in 0..n_classes {
            let ys: Vec<f64> = y.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
            if ys.iter().all(|&v| v < 0.0) || ys.iter().all(|&v| v > 0.0) {
                return Err(Error::Solver(format!("class {class} has no positive or no negative samples")));
            }
            let out = smo(&kernel, &ys, c, tol, max_iter)?;
            let decision: Vec<f64> = (0..n)
                .map(|i| {
                    kernel
                        .row(i)
                        .iter()
                        .zip(out.alpha.iter().zip(&ys))
                        .map(|(k, (a, yy))| k * a * yy)
                        .sum::<f64>()
                        - out.rho
                })
                .collect();
            let positive: Vec<bool> = ys.iter().map(|&v| v > 0.0).collect();
            platt.push(platt_fit(&decision, &positive));
            rho.push(out.rho);
            iterations.push(out.iterations);
            alphas.push((out.alpha, ys));
        }
        let sv_idx: Vec<usize> = (0..n).filter(|&i| alphas.iter().any(|(a, _)| a[i] > 0.0)).collect();
        let support = x.select_rows(&sv_idx);
        let mut coef = Matrix::zeros(sv_idx.len(), n_classes);
        for (r, &i) in sv_idx.iter().enumerate() {
            for (class, (a, ys)) in alphas.iter().enumerate() {
                coef.set(r, class, a[i] * ys[i]);
            }
        }
        Ok(Self {
            gamma,
            c,
            support,
            coef,
            rho,
            platt,
            iterations,
        })
    }

    pub fn n_features(&self) -> usize {
        self.support.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.rho.len()
    }

    /// One-vs-rest decision values, samples × classes.
    pub fn decision(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = Vec::with_capacity(x.rows() * self.n_classes());
        for start in (0..x.rows()).step_by(PREDICT_CHUNK) {
            let idx: Vec<usize> = (start..(start + PREDICT_CHUNK).min(x.rows())).collect();
            let k = rbf_kernel(&x.select_rows(&idx), &self.support, self.gamma)?;
            let mut dec = k.matmul(&self.coef)?;
            for r in 0..dec.rows() {
                dec.row_mut(r).iter_mut().zip(&self.rho).for_each(|(v, rho)| *v -= rho);
            }
            out.extend_from_slice(dec.as_slice());
        }
        Matrix::from_vec(x.rows(), self.n_classes(), out)
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let mut dec = self.decision(x)?;
        for r in 0..dec.rows() {
            let row = dec.row_mut(r);
            for (v, &(a, b)) in row.iter_mut().zip(&self.platt) {
                *v = platt_prob(a, b, *v).max(1e-300);
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(dec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth_blobs;
    use crate::numkit::derive_stream;

    fn binary_problem() -> (Matrix, Vec<f64>) {
        let ds = synth_blobs(40, 2, 2, 3.0, &mut derive_stream(3, "svm")).unwrap();
        let y = ds.y().iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        (ds.x().clone(), y)
    }

    #[test]
    fn smo_satisfies_kkt_and_objective_is_monotone() {
        let (x, y) = binary_problem();
        let gamma = default_gamma(&x);
        let k = rbf_kernel(&x, &x, gamma).unwrap();
        let c = 1.0;
        let out = smo(&k, &y, c, 1e-3, 100_000).unwrap();
        assert!(out.violation < 1e-3);
        let ya: f64 = out.alpha.iter().zip(&y).map(|(a, yy)| a * yy).sum();
        assert!(ya.abs() < 1e-9);
        assert!(out.alpha.iter().all(|&a| (0.0..=c).contains(&a)));
        for w in out.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "dual objective decreased: {} -> {}", w[0], w[1]);
        }
        // Margin conditions: α=0 ⇒ y f ≥ 1, free ⇒ y f = 1, α=C ⇒ y f ≤ 1.
        for i in 0..y.len() {
            let f: f64 = (0..y.len()).map(|j| out.alpha[j] * y[j] * k.get(i, j)).sum::<f64>() - out.rho;
            let m = y[i] * f;
            let tol = 1e-3;
            if out.alpha[i] <= 0.0 {
                assert!(m >= 1.0 - tol, "sample {i}: margin {m}");
            } else if out.alpha[i] >= c {
                assert!(m <= 1.0 + tol, "sample {i}: margin {m}");
            } else {
                assert!((m - 1.0).abs() <= tol, "sample {i}: margin {m}");
            }
        }
    }

    #[test]
    fn smo_reports_iteration_cap() {
        let (x, y) = binary_problem();
        let k = rbf_kernel(&x, &x, 1.0).unwrap();
        assert!(matches!(smo(&k, &y, 10.0, 1e-3, 1), Err(Error::Solver(_))));
    }

    #[test]
    fn multiclass_probabilities() {
        let ds = synth_blobs(30, 4, 3, 8.0, &mut derive_stream(4, "svm3")).unwrap();
        let m = SvmModel::fit(ds.x(), ds.y(), 3, 1.0, default_gamma(ds.x()), 1e-3).unwrap();
        let p = m.predict_proba(ds.x()).unwrap();
        let mut correct = 0;
        for (r, &l) in p.row_iter().zip(ds.y()) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let arg = (0..3).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
            correct += usize::from(arg == l);
        }
        assert!(correct as f64 / ds.len() as f64 > 0.95);
    }

    #[test]
    fn platt_orders_probabilities_by_decision() {
        let dec = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let pos = [false, false, true, false, true, true];
        let (a, b) = platt_fit(&dec, &pos);
        assert!(a < 0.0);
        assert!(platt_prob(a, b, 2.0) > platt_prob(a, b, -2.0));
    }
}
