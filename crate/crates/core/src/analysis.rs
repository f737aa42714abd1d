//! Numerical verification tools: finite differences, sigmoid-derivative
//! scans, weight-Jacobian norm probes, and gradient checks that bind the
//! blocked kernels to an independent oracle.
//!
//! The probes quantify the structural contrast between the two mechanisms:
//! the sigmoid weight Jacobian is diagonal with entries bounded by 1/4 no
//! matter how scores are scaled, while the softmax weight Jacobian is dense
//! and the composed attention map grows more sensitive as scores sharpen.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::JaggedBatch;
use crate::error::{Error, Result};
use crate::kernel::{
    blocked_backward_dkdv, blocked_backward_dq, blocked_forward, sigmoid_eval, SigmoidMode,
    TileConfig,
};
use crate::reference::{dense_forward, weight_jacobian_row, AttentionConfig, Mechanism};
use crate::tensor::{rel_err, SquareMatrix, Tensor4};

/// Entries with both analytic and numeric magnitude below this are treated
/// as zero in gradcheck comparisons; below it, central differences measure
/// cancellation noise rather than the derivative.
pub const GRADCHECK_ATOL: f64 = 1e-8;

/// Central-difference gradient of a scalar function: per coordinate,
/// `(f(x + h e) - f(x - h e)) / (2h)`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Probe {
                coordinate: format!("{i}"),
                message: format!("f(x +/- h) = {plus} / {minus}"),
            });
        }
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Result of scanning `sigma'(x) = sigma(x)(1 - sigma(x))` over a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidScan {
    pub max_derivative: f64,
    pub argmax: f64,
}

/// Maximum sigmoid derivative over a grid. Always `<= 0.25`, attained at 0.
pub fn sigmoid_derivative_scan(grid: &[f64]) -> Result<SigmoidScan> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("derivative scan needs a non-empty grid".into()));
    }
    let mut best = f64::NEG_INFINITY;
    let mut arg = grid[0];
    for &x in grid {
        let s = sigmoid_eval(x, SigmoidMode::Exact);
        let d = s * (1.0 - s);
        if d > best {
            best = d;
            arg = x;
        }
    }
    Ok(SigmoidScan {
        max_derivative: best,
        argmax: arg,
    })
}

/// Spectral norm by power iteration on `A^T A` (matrices here are tiny and
/// explicit, so the simple fixed-budget scheme is auditable).
pub fn spectral_norm(m: &SquareMatrix, max_iters: usize, tol: f64) -> f64 {
    let n = m.n;
    if n == 0 {
        return 0.0;
    }
    let mul = |x: &[f64], out: &mut [f64]| {
        for i in 0..n {
            let row = m.row(i);
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * x[j];
            }
            out[i] = acc;
        }
    };
    let mul_t = |x: &[f64], out: &mut [f64]| {
        out.fill(0.0);
        for i in 0..n {
            let row = m.row(i);
            let xi = x[i];
            for j in 0..n {
                out[j] += row[j] * xi;
            }
        }
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    // Generic start vector: the uniform vector would sit exactly in the
    // null space of a softmax weight Jacobian (rows sum to zero).
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            let bits = crate::seed::splitmix64(i as u64 + 1);
            0.5 + (bits % 1024) as f64 / 1024.0
        })
        .collect();
    let v0 = norm(&v);
    for x in v.iter_mut() {
        *x /= v0;
    }
    let mut av = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut sigma = 0.0;
    for _ in 0..max_iters {
        mul(&v, &mut av);
        let new_sigma = norm(&av);
        if new_sigma < 1e-300 {
            return 0.0;
        }
        mul_t(&av, &mut w);
        let wn = norm(&w);
        if wn < 1e-300 {
            return new_sigma;
        }
        for i in 0..n {
            v[i] = w[i] / wn;
        }
        if (new_sigma - sigma).abs() <= tol * new_sigma.max(1.0) {
            return new_sigma;
        }
        sigma = new_sigma;
    }
    sigma
}

/// Weight-Jacobian spectral norms for both mechanisms across score scalings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianProbeReport {
    pub scale_factors: Vec<f64>,
    pub softmax_spectral_norms: Vec<f64>,
    pub sigmoid_spectral_norms: Vec<f64>,
    /// `max |t * s_j|` per scale factor.
    pub max_score_inf_norm: Vec<f64>,
}

/// Probe the weight-Jacobian spectral norm of both mechanisms on `t * scores`
/// for each `t`. Sigmoid norms are bounded by 1/4 everywhere; softmax norms
/// are recorded for the report rather than asserted, since their behavior
/// depends on how probability mass concentrates.
pub fn jacobian_norm_probe(scores: &[f64], scale_factors: &[f64]) -> Result<JacobianProbeReport> {
    let distinct = scores
        .iter()
        .any(|&s| (s - scores[0]).abs() > f64::EPSILON);
    if scores.len() < 2 || !distinct {
        return Err(Error::Parameter(
            "probe needs at least 2 distinct score values (scaling is trivial otherwise)".into(),
        ));
    }
    let mut report = JacobianProbeReport {
        scale_factors: scale_factors.to_vec(),
        softmax_spectral_norms: Vec::with_capacity(scale_factors.len()),
        sigmoid_spectral_norms: Vec::with_capacity(scale_factors.len()),
        max_score_inf_norm: Vec::with_capacity(scale_factors.len()),
    };
    for &t in scale_factors {
        let scaled: Vec<f64> = scores.iter().map(|&s| t * s).collect();
        let inf_norm = scaled.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
        let softmax_j = weight_jacobian_row(&scaled, Mechanism::Softmax);
        let sigmoid_j = weight_jacobian_row(&scaled, Mechanism::Sigmoid);
        report
            .softmax_spectral_norms
            .push(spectral_norm(&softmax_j, 50, 1e-10));
        report
            .sigmoid_spectral_norms
            .push(spectral_norm(&sigmoid_j, 50, 1e-10));
        report.max_score_inf_norm.push(inf_norm);
    }
    Ok(report)
}

/// Worst-case relative gradcheck error per gradient tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err_dq: f64,
    pub max_rel_err_dk: f64,
    pub max_rel_err_dv: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err_dq
            .max(self.max_rel_err_dk)
            .max(self.max_rel_err_dv)
    }
}

fn gradcheck_rel_err(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() <= GRADCHECK_ATOL && numeric.abs() <= GRADCHECK_ATOL {
        0.0
    } else {
        rel_err(analytic, numeric)
    }
}

/// Check the blocked kernels' gradients against central finite differences
/// of the scalar loss `sum(dOut . O)` with a seeded random `dOut`.
///
/// Fails with the offending coordinate if any element diverges past 1e-3.
/// Instances are limited to 1e4 score entries to keep the oracle tractable.
pub fn gradcheck_attention(
    batch: &JaggedBatch<f64>,
    cfg: &AttentionConfig,
    tiles: &TileConfig,
    h: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    let [z, l_q, heads, d] = batch.q.dims();
    let l_k = batch.l_k();
    let score_entries = z * heads * l_q * l_k;
    if score_entries > 10_000 {
        return Err(Error::Parameter(format!(
            "instance too large for finite differences ({score_entries} score entries > 1e4)"
        )));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Parameter(format!("step h must be finite and > 0 (got {h})")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d_out = Tensor4::zeros(batch.q.dims());
    for zz in 0..z {
        for l in 0..batch.n_q[zz] {
            for hh in 0..heads {
                for slot in d_out.row_mut(zz, l, hh).iter_mut() {
                    *slot = rng.random_range(-1.0..1.0);
                }
            }
        }
    }

    let loss = |b: &JaggedBatch<f64>| -> f64 {
        let (out, _) = blocked_forward(b, cfg, tiles).expect("forward in gradcheck");
        out.data()
            .iter()
            .zip(d_out.data().iter())
            .map(|(&o, &g)| o * g)
            .sum()
    };

    let (dq, _) = blocked_backward_dq(batch, cfg, tiles, &d_out)?;
    let (dk, dv, _) = blocked_backward_dkdv(batch, cfg, tiles, &d_out)?;

    let mut report = GradcheckReport {
        max_rel_err_dq: 0.0,
        max_rel_err_dk: 0.0,
        max_rel_err_dv: 0.0,
    };

    for (tensor_name, which) in [("dq", 0usize), ("dk", 1), ("dv", 2)] {
        let valid_len = |zz: usize| match which {
            0 => batch.n_q[zz],
            _ => batch.n_k[zz],
        };
        for zz in 0..z {
            for l in 0..valid_len(zz) {
                for hh in 0..heads {
                    for dd in 0..d {
                        let mut plus = batch.clone();
                        let mut minus = batch.clone();
                        {
                            let (tp, tm) = match which {
                                0 => (&mut plus.q, &mut minus.q),
                                1 => (&mut plus.k, &mut minus.k),
                                _ => (&mut plus.v, &mut minus.v),
                            };
                            *tp.at_mut(zz, l, hh, dd) += h;
                            *tm.at_mut(zz, l, hh, dd) -= h;
                        }
                        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                        let analytic = match which {
                            0 => dq.at(zz, l, hh, dd),
                            1 => dk.at(zz, l, hh, dd),
                            _ => dv.at(zz, l, hh, dd),
                        };
                        let err = gradcheck_rel_err(analytic, numeric);
                        if err > 1e-3 {
                            return Err(Error::Gradcheck {
                                tensor: match which {
                                    0 => "dQ",
                                    1 => "dK",
                                    _ => "dV",
                                },
                                coordinate: format!("(z={zz}, l={l}, h={hh}, d={dd})"),
                                analytic,
                                numeric,
                                rel_err: err,
                            });
                        }
                        let slot = match tensor_name {
                            "dq" => &mut report.max_rel_err_dq,
                            "dk" => &mut report.max_rel_err_dk,
                            _ => &mut report.max_rel_err_dv,
                        };
                        *slot = slot.max(err);
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Spectral norms of the composed attention map's Jacobian with respect to
/// the query input, estimated by finite differences on tiny instances.
///
/// The score scale is multiplied by each factor `t`, sharpening the weights.
/// Recorded, not asserted: the interesting signal is the trend contrast
/// between mechanisms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputJacobianProbe {
    pub scale_factors: Vec<f64>,
    pub softmax_norms: Vec<f64>,
    pub sigmoid_norms: Vec<f64>,
}

pub fn composed_input_jacobian_probe(
    n: usize,
    d: usize,
    scale_factors: &[f64],
    seed: u64,
) -> Result<InputJacobianProbe> {
    if n == 0 || n > 8 || d == 0 || d > 8 {
        return Err(Error::Parameter(format!(
            "composed probe is for tiny instances (1..=8), got n={n}, d={d}"
        )));
    }
    let batch: JaggedBatch<f64> =
        crate::batch::generate_batch_with_lengths(&[n], n, 1, d, seed)?;
    let vars = n * d;
    let h = 1e-5;
    let mut probe = InputJacobianProbe {
        scale_factors: scale_factors.to_vec(),
        softmax_norms: Vec::new(),
        sigmoid_norms: Vec::new(),
    };
    for &t in scale_factors {
        for mechanism in [Mechanism::Softmax, Mechanism::Sigmoid] {
            let cfg = match mechanism {
                Mechanism::Softmax => AttentionConfig::softmax(d),
                Mechanism::Sigmoid => AttentionConfig::sigmoid(d),
            };
            let cfg = cfg.with_scale(AttentionConfig::default_scale(d) * t);
            let forward_vec = |b: &JaggedBatch<f64>| -> Vec<f64> {
                dense_forward(b, &cfg).expect("probe forward").data().to_vec()
            };
            // Explicit Jacobian d vec(O) / d vec(Q), column per input coord.
            let mut jac = SquareMatrix::zeros(vars);
            for col in 0..vars {
                let (l, dd) = (col / d, col % d);
                let mut plus = batch.clone();
                let mut minus = batch.clone();
                *plus.q.at_mut(0, l, 0, dd) += h;
                *minus.q.at_mut(0, l, 0, dd) -= h;
                let op = forward_vec(&plus);
                let om = forward_vec(&minus);
                for row in 0..vars {
                    *jac.at_mut(row, col) = (op[row] - om[row]) / (2.0 * h);
                }
            }
            let norm = spectral_norm(&jac, 50, 1e-10);
            match mechanism {
                Mechanism::Softmax => probe.softmax_norms.push(norm),
                Mechanism::Sigmoid => probe.sigmoid_norms.push(norm),
            }
        }
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::generate_batch_with_lengths;
    use crate::reference::BiasMode;

    #[test]
    fn finite_diff_recovers_known_gradient() {
        let grad = finite_diff_gradient(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5)
            .unwrap();
        assert!((grad[0] - 2.0).abs() <= 1e-8);
        assert!((grad[1] - 4.0).abs() <= 1e-8);
    }

    #[test]
    fn finite_diff_of_sigmoid_at_zero_is_one_quarter() {
        let grad =
            finite_diff_gradient(|x| sigmoid_eval(x[0], SigmoidMode::Exact), &[0.0], 1e-5)
                .unwrap();
        assert!((grad[0] - 0.25).abs() <= 1e-9);
    }

    #[test]
    fn finite_diff_flags_non_finite_evaluations() {
        let err = finite_diff_gradient(|x| (1.0 / x[1]).ln(), &[1.0, 0.0], 1e-5).unwrap_err();
        match err {
            Error::Probe { coordinate, .. } => assert_eq!(coordinate, "0"),
            other => panic!("expected probe error, got {other}"),
        }
    }

    #[test]
    fn derivative_scan_anchors() {
        let scan = sigmoid_derivative_scan(&[0.0]).unwrap();
        assert_eq!(scan.max_derivative, 0.25);
        let scan = sigmoid_derivative_scan(&[-100.0, 100.0]).unwrap();
        assert!(scan.max_derivative < 1e-40);
        let grid: Vec<f64> = (-10_000..=10_000).map(|i| i as f64 * 1e-3).collect();
        let scan = sigmoid_derivative_scan(&grid).unwrap();
        assert!(scan.max_derivative <= 0.25);
        assert!(0.25 - scan.max_derivative < 1e-7);
        assert!(scan.argmax.abs() <= 1e-3);
        assert!(sigmoid_derivative_scan(&[]).is_err());
    }

    #[test]
    fn spectral_norm_of_known_matrices() {
        let mut m = SquareMatrix::zeros(2);
        *m.at_mut(0, 0) = 3.0;
        *m.at_mut(1, 1) = -4.0;
        assert!((spectral_norm(&m, 50, 1e-10) - 4.0).abs() <= 1e-9);
        let zero = SquareMatrix::zeros(3);
        assert_eq!(spectral_norm(&zero, 50, 1e-10), 0.0);
    }

    #[test]
    fn probe_bounds_sigmoid_and_records_softmax() {
        let report = jacobian_norm_probe(&[1.0, -1.0], &[0.0, 1.0, 5.0, 10.0]).unwrap();
        for &s in &report.sigmoid_spectral_norms {
            assert!(s <= 0.25 + 1e-12);
        }
        // t = 0 collapses both to the uniform case: sigma'(0) = 1/4 puts the
        // sigmoid norm at exactly 0.25; the softmax Jacobian there is
        // [[.25,-.25],[-.25,.25]], whose spectral norm is 0.5 (eigenvector
        // [1,-1]).
        assert!((report.sigmoid_spectral_norms[0] - 0.25).abs() <= 1e-10);
        assert!((report.softmax_spectral_norms[0] - 0.5).abs() <= 1e-10);
        // Far past saturation the softmax row Jacobian collapses.
        assert!(report.softmax_spectral_norms[3] < report.softmax_spectral_norms[1]);
        assert_eq!(report.max_score_inf_norm, vec![0.0, 1.0, 5.0, 10.0]);
    }

    #[test]
    fn probe_rejects_degenerate_scores() {
        assert!(jacobian_norm_probe(&[2.0, 2.0], &[1.0]).is_err());
        assert!(jacobian_norm_probe(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn softmax_jacobian_has_dense_coupling() {
        let jac = weight_jacobian_row(&[0.5, -0.25, 1.5], Mechanism::Softmax);
        let mut off_diag_nonzero = false;
        for i in 0..3 {
            for j in 0..3 {
                if i != j && jac.at(i, j) != 0.0 {
                    off_diag_nonzero = true;
                }
            }
        }
        assert!(off_diag_nonzero);
        let jac = weight_jacobian_row(&[0.5, -0.25, 1.5], Mechanism::Sigmoid);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(jac.at(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn gradcheck_small_instance_passes_tightly() {
        let batch: JaggedBatch<f64> = generate_batch_with_lengths(&[4], 4, 1, 2, 7).unwrap();
        let cfg = AttentionConfig::sigmoid(2);
        let report =
            gradcheck_attention(&batch, &cfg, &TileConfig::new(2, 2), 1e-5, 11).unwrap();
        assert!(report.worst() <= 1e-6, "worst {}", report.worst());
    }

    #[test]
    fn gradcheck_saturated_instance_reports_finite_errors() {
        let batch: JaggedBatch<f64> = generate_batch_with_lengths(&[4], 4, 1, 2, 13).unwrap();
        let cfg = AttentionConfig::sigmoid(2).with_bias(BiasMode::Fixed(30.0));
        let report =
            gradcheck_attention(&batch, &cfg, &TileConfig::new(2, 2), 1e-5, 17).unwrap();
        assert!(report.worst().is_finite());
    }

    #[test]
    fn gradcheck_rejects_oversized_instances() {
        let batch: JaggedBatch<f64> =
            generate_batch_with_lengths(&[128, 128], 128, 1, 2, 19).unwrap();
        let cfg = AttentionConfig::sigmoid(2);
        assert!(matches!(
            gradcheck_attention(&batch, &cfg, &TileConfig::default(), 1e-5, 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn composed_probe_runs_on_tiny_instances() {
        let probe = composed_input_jacobian_probe(3, 2, &[1.0, 4.0], 23).unwrap();
        assert_eq!(probe.softmax_norms.len(), 2);
        assert_eq!(probe.sigmoid_norms.len(), 2);
        assert!(probe.softmax_norms.iter().all(|x| x.is_finite() && *x > 0.0));
        assert!(probe.sigmoid_norms.iter().all(|x| x.is_finite() && *x > 0.0));
        assert!(composed_input_jacobian_probe(64, 2, &[1.0], 0).is_err());
    }
}
