//! Dense, unblocked attention oracle.
//!
//! Double precision throughout, written for auditability: it materializes the
//! full score matrix, applies masking at score level with a true `-inf`
//! sentinel, and exposes closed-form backward passes and per-row attention
//! weight Jacobians. The blocked kernels are verified against this module.

use serde::{Deserialize, Serialize};

use crate::batch::JaggedBatch;
use crate::error::{Error, Result};
use crate::kernel::{sigmoid_eval, SigmoidMode};
use crate::tensor::{SquareMatrix, Tensor4};

/// Attention weight nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Softmax,
    Sigmoid,
}

/// How the additive score bias `b` is resolved.
///
/// Softmax is shift-invariant, so any bias is a no-op there and is not
/// applied; `None` is legal only for softmax. Sigmoid attention needs an
/// explicit choice: `LogSeqLen` is `b = -ln(n_k[z])` per sequence, which
/// keeps total attention mass comparable to a normalized row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum BiasMode {
    None,
    Fixed(f64),
    LogSeqLen,
}

/// Mechanism, score scale, and bias resolution for one attention call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub mechanism: Mechanism,
    /// Score scale `alpha`, by default `1/sqrt(D)`.
    pub scale: f64,
    pub bias_mode: BiasMode,
}

impl AttentionConfig {
    pub fn default_scale(head_dim: usize) -> f64 {
        1.0 / (head_dim as f64).sqrt()
    }

    pub fn softmax(head_dim: usize) -> Self {
        Self {
            mechanism: Mechanism::Softmax,
            scale: Self::default_scale(head_dim),
            bias_mode: BiasMode::None,
        }
    }

    /// Sigmoid attention with the `-ln(n)` bias.
    pub fn sigmoid(head_dim: usize) -> Self {
        Self {
            mechanism: Mechanism::Sigmoid,
            scale: Self::default_scale(head_dim),
            bias_mode: BiasMode::LogSeqLen,
        }
    }

    pub fn with_bias(mut self, bias_mode: BiasMode) -> Self {
        self.bias_mode = bias_mode;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Parameter(format!(
                "scale must be finite and > 0 (got {})",
                self.scale
            )));
        }
        match (self.mechanism, self.bias_mode) {
            (Mechanism::Sigmoid, BiasMode::None) => Err(Error::Parameter(
                "bias_mode none is only legal for softmax; sigmoid needs fixed or log-seq-len".into(),
            )),
            (_, BiasMode::Fixed(b)) if !b.is_finite() => {
                Err(Error::Parameter(format!("fixed bias must be finite (got {b})")))
            }
            _ => Ok(()),
        }
    }

    /// Bias for a sequence with `n_k` valid keys. Softmax is shift-invariant,
    /// so the bias resolves to zero there regardless of mode.
    pub fn bias_for(&self, n_k: usize) -> f64 {
        if self.mechanism == Mechanism::Softmax {
            return 0.0;
        }
        match self.bias_mode {
            BiasMode::None => 0.0,
            BiasMode::Fixed(b) => b,
            BiasMode::LogSeqLen => -((n_k as f64).ln()),
        }
    }
}

/// Dense scaled-and-biased score tensor `[Z, H, L_q, L_k]` with masked
/// entries (query or key beyond the valid length) set to `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub s: Tensor4<f64>,
}

impl ScoreMatrix {
    pub fn dims(&self) -> [usize; 4] {
        self.s.dims()
    }
}

/// Materialize the masked score matrix. Masked entries are set directly to
/// the sentinel; pad-region data is never read.
pub fn score_matrix(batch: &JaggedBatch<f64>, cfg: &AttentionConfig) -> Result<ScoreMatrix> {
    cfg.validate()?;
    let [z, l_q, h, d] = batch.q.dims();
    let l_k = batch.l_k();
    let mut s = Tensor4::zeros([z, h, l_q, l_k]);
    s.fill(f64::NEG_INFINITY);
    for zz in 0..z {
        let bias = cfg.bias_for(batch.n_k[zz]);
        for hh in 0..h {
            for i in 0..batch.n_q[zz] {
                let q_row = batch.q.row(zz, i, hh);
                let out = s.row_mut(zz, hh, i);
                for (j, slot) in out.iter_mut().enumerate().take(batch.n_k[zz]) {
                    let k_row = batch.k.row(zz, j, hh);
                    let mut dot = 0.0;
                    for dd in 0..d {
                        dot += q_row[dd] * k_row[dd];
                    }
                    *slot = dot * cfg.scale + bias;
                }
            }
        }
    }
    Ok(ScoreMatrix { s })
}

/// Stable softmax of one score row; `-inf` entries get weight exactly 0 and a
/// fully masked row yields all zeros rather than NaN.
pub fn softmax_row(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![0.0; scores.len()];
    }
    let mut out: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for w in out.iter_mut() {
        *w /= sum;
    }
    out
}

/// Attention weights for one masked score row under the given mechanism.
pub fn weight_row(scores: &[f64], mechanism: Mechanism) -> Vec<f64> {
    match mechanism {
        Mechanism::Softmax => softmax_row(scores),
        Mechanism::Sigmoid => scores
            .iter()
            .map(|&s| sigmoid_eval(s, SigmoidMode::Exact))
            .collect(),
    }
}

/// Dense forward pass. Padded query rows produce all-zero output; padded keys
/// carry weight exactly 0 and their values are never read.
pub fn dense_forward(batch: &JaggedBatch<f64>, cfg: &AttentionConfig) -> Result<Tensor4<f64>> {
    let mut out = Tensor4::zeros(batch.q.dims());
    dense_forward_into(batch, cfg, &mut out)?;
    Ok(out)
}

/// Forward pass into a caller-provided buffer (cleared first).
pub fn dense_forward_into(
    batch: &JaggedBatch<f64>,
    cfg: &AttentionConfig,
    out: &mut Tensor4<f64>,
) -> Result<()> {
    cfg.validate()?;
    check_like(batch, out, "out")?;
    let [z, _l_q, h, d] = batch.q.dims();
    out.fill(0.0);
    let mut scores = Vec::new();
    for zz in 0..z {
        let n_q = batch.n_q[zz];
        let n_k = batch.n_k[zz];
        let bias = cfg.bias_for(n_k);
        for hh in 0..h {
            for i in 0..n_q {
                let q_row = batch.q.row(zz, i, hh);
                scores.clear();
                scores.resize(n_k, 0.0);
                for (j, slot) in scores.iter_mut().enumerate() {
                    let k_row = batch.k.row(zz, j, hh);
                    let mut dot = 0.0;
                    for dd in 0..d {
                        dot += q_row[dd] * k_row[dd];
                    }
                    *slot = dot * cfg.scale + bias;
                }
                let weights = weight_row(&scores, cfg.mechanism);
                let out_row = out.row_mut(zz, i, hh);
                for (j, &w) in weights.iter().enumerate() {
                    let v_row = batch.v.row(zz, j, hh);
                    for dd in 0..d {
                        out_row[dd] += w * v_row[dd];
                    }
                }
            }
        }
    }
    Ok(())
}

fn check_like(batch: &JaggedBatch<f64>, grad: &Tensor4<f64>, name: &str) -> Result<()> {
    if grad.dims() != batch.q.dims() {
        return Err(Error::Dimension(format!(
            "{name} dims {:?} do not match output dims {:?}",
            grad.dims(),
            batch.q.dims()
        )));
    }
    Ok(())
}

/// Closed-form dense backward pass: given upstream `d_out` (shaped like the
/// output), returns `(dQ, dK, dV)`. Padded positions receive exactly zero
/// gradient.
pub fn dense_backward(
    batch: &JaggedBatch<f64>,
    cfg: &AttentionConfig,
    d_out: &Tensor4<f64>,
) -> Result<(Tensor4<f64>, Tensor4<f64>, Tensor4<f64>)> {
    cfg.validate()?;
    check_like(batch, d_out, "d_out")?;
    let [z, l_q, h, d] = batch.q.dims();
    let l_k = batch.l_k();
    let mut dq = Tensor4::zeros([z, l_q, h, d]);
    let mut dk = Tensor4::zeros([z, l_k, h, d]);
    let mut dv = Tensor4::zeros([z, l_k, h, d]);
    let mut scores = Vec::new();
    let mut dp = Vec::new();
    let mut ds = Vec::new();
    for zz in 0..z {
        let n_q = batch.n_q[zz];
        let n_k = batch.n_k[zz];
        let bias = cfg.bias_for(n_k);
        for hh in 0..h {
            for i in 0..n_q {
                let q_row = batch.q.row(zz, i, hh);
                let do_row = d_out.row(zz, i, hh);
                scores.clear();
                scores.resize(n_k, 0.0);
                for (j, slot) in scores.iter_mut().enumerate() {
                    let k_row = batch.k.row(zz, j, hh);
                    let mut dot = 0.0;
                    for dd in 0..d {
                        dot += q_row[dd] * k_row[dd];
                    }
                    *slot = dot * cfg.scale + bias;
                }
                let weights = weight_row(&scores, cfg.mechanism);
                // dP_ij = <dOut_i, V_j>
                dp.clear();
                dp.resize(n_k, 0.0);
                for (j, slot) in dp.iter_mut().enumerate() {
                    let v_row = batch.v.row(zz, j, hh);
                    let mut dot = 0.0;
                    for dd in 0..d {
                        dot += do_row[dd] * v_row[dd];
                    }
                    *slot = dot;
                }
                // dS from the weight Jacobian of the mechanism.
                ds.clear();
                ds.resize(n_k, 0.0);
                match cfg.mechanism {
                    Mechanism::Softmax => {
                        let inner: f64 =
                            weights.iter().zip(dp.iter()).map(|(&p, &g)| p * g).sum();
                        for j in 0..n_k {
                            ds[j] = weights[j] * (dp[j] - inner);
                        }
                    }
                    Mechanism::Sigmoid => {
                        for j in 0..n_k {
                            ds[j] = weights[j] * (1.0 - weights[j]) * dp[j];
                        }
                    }
                }
                // dQ_i += alpha * sum_j dS_ij K_j ; dK_j += alpha * dS_ij Q_i ;
                // dV_j += P_ij dOut_i
                let dq_row = dq.row_mut(zz, i, hh);
                for j in 0..n_k {
                    let k_row = batch.k.row(zz, j, hh);
                    let g = ds[j] * cfg.scale;
                    for dd in 0..d {
                        dq_row[dd] += g * k_row[dd];
                    }
                }
                for j in 0..n_k {
                    let g = ds[j] * cfg.scale;
                    let w = weights[j];
                    let dk_row = dk.row_mut(zz, j, hh);
                    for dd in 0..d {
                        dk_row[dd] += g * q_row[dd];
                    }
                    let dv_row = dv.row_mut(zz, j, hh);
                    for dd in 0..d {
                        dv_row[dd] += w * do_row[dd];
                    }
                }
            }
        }
    }
    Ok((dq, dk, dv))
}

/// Jacobian of the attention-weight row with respect to its score row.
///
/// Softmax: `J[j][k] = p_j (delta_jk - p_k)`. Sigmoid: diagonal with
/// `J[j][j] = sigma(s_j) (1 - sigma(s_j))`, zeros elsewhere.
pub fn weight_jacobian_row(scores: &[f64], mechanism: Mechanism) -> SquareMatrix {
    let n = scores.len();
    let mut jac = SquareMatrix::zeros(n);
    match mechanism {
        Mechanism::Softmax => {
            let p = softmax_row(scores);
            for j in 0..n {
                for k in 0..n {
                    let delta = if j == k { 1.0 } else { 0.0 };
                    *jac.at_mut(j, k) = p[j] * (delta - p[k]);
                }
            }
        }
        Mechanism::Sigmoid => {
            for (j, &s) in scores.iter().enumerate() {
                let w = sigmoid_eval(s, SigmoidMode::Exact);
                *jac.at_mut(j, j) = w * (1.0 - w);
            }
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::{generate_batch_with_lengths, JaggedBatch};
    use crate::tensor::{max_rel_err_scaled, Tensor4};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_token_batch(q: f64, k: f64, v: &[f64]) -> JaggedBatch<f64> {
        let d = v.len();
        let qt = Tensor4::from_vec([1, 1, 1, d], {
            let mut row = vec![0.0; d];
            row[0] = q;
            row
        })
        .unwrap();
        let kt = Tensor4::from_vec([1, 1, 1, d], {
            let mut row = vec![0.0; d];
            row[0] = k;
            row
        })
        .unwrap();
        let vt = Tensor4::from_vec([1, 1, 1, d], v.to_vec()).unwrap();
        JaggedBatch::new(qt, kt, vt, vec![1], vec![1]).unwrap()
    }

    #[test]
    fn softmax_single_token_weight_is_one() {
        let batch = single_token_batch(0.3, -1.7, &[2.5, -4.0]);
        let cfg = AttentionConfig::softmax(2);
        let out = dense_forward(&batch, &cfg).unwrap();
        // Simplex of size 1: output is exactly v0.
        assert_eq!(out.row(0, 0, 0), batch.v.row(0, 0, 0));
    }

    #[test]
    fn sigmoid_single_token_matches_closed_form() {
        let batch = single_token_batch(1.25, 0.5, &[3.0, -1.0]);
        // n = 1 => log-seq-len bias is -ln(1) = 0.
        let cfg = AttentionConfig::sigmoid(2);
        let out = dense_forward(&batch, &cfg).unwrap();
        let score = 1.25 * 0.5 * cfg.scale;
        let w = 1.0 / (1.0 + (-score).exp());
        assert!((out.at(0, 0, 0, 0) - w * 3.0).abs() < 1e-15);
        assert!((out.at(0, 0, 0, 1) - w * (-1.0)).abs() < 1e-15);
    }

    /// Independent three-nested-loop scalar implementation, structured
    /// differently from `dense_forward` on purpose.
    fn scalar_loop_forward(batch: &JaggedBatch<f64>, cfg: &AttentionConfig) -> Tensor4<f64> {
        let [z, l_q, h, d] = batch.q.dims();
        let mut out = Tensor4::zeros([z, l_q, h, d]);
        for zz in 0..z {
            for hh in 0..h {
                for i in 0..batch.n_q[zz] {
                    let n_k = batch.n_k[zz];
                    let b = cfg.bias_for(n_k);
                    let score = |j: usize| {
                        let mut s = 0.0;
                        for dd in 0..d {
                            s += batch.q.at(zz, i, hh, dd) * batch.k.at(zz, j, hh, dd);
                        }
                        s * cfg.scale + b
                    };
                    for dd in 0..d {
                        let mut acc = 0.0;
                        match cfg.mechanism {
                            Mechanism::Softmax => {
                                let mut m = f64::NEG_INFINITY;
                                for j in 0..n_k {
                                    m = m.max(score(j));
                                }
                                let mut denom = 0.0;
                                for j in 0..n_k {
                                    denom += (score(j) - m).exp();
                                }
                                for j in 0..n_k {
                                    acc += (score(j) - m).exp() / denom
                                        * batch.v.at(zz, j, hh, dd);
                                }
                            }
                            Mechanism::Sigmoid => {
                                for j in 0..n_k {
                                    let s = score(j);
                                    acc += 1.0 / (1.0 + (-s).exp()) * batch.v.at(zz, j, hh, dd);
                                }
                            }
                        }
                        *out.at_mut(zz, i, hh, dd) = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn dense_forward_matches_scalar_loop_oracle() {
        let batch: JaggedBatch<f64> =
            generate_batch_with_lengths(&[8, 5], 8, 2, 4, 17).unwrap();
        for cfg in [AttentionConfig::softmax(4), AttentionConfig::sigmoid(4)] {
            let fast = dense_forward(&batch, &cfg).unwrap();
            let slow = scalar_loop_forward(&batch, &cfg);
            let err = max_rel_err_scaled(fast.data(), slow.data());
            assert!(err <= 1e-12, "{:?}: err {err}", cfg.mechanism);
        }
    }

    #[test]
    fn softmax_valid_weights_sum_to_one_and_sigmoid_in_unit_interval() {
        let batch: JaggedBatch<f64> =
            generate_batch_with_lengths(&[6, 3], 8, 1, 4, 23).unwrap();
        let sm = score_matrix(&batch, &AttentionConfig::softmax(4)).unwrap();
        for zz in 0..2 {
            for i in 0..batch.n_q[zz] {
                let row = sm.s.row(zz, 0, i);
                let w = softmax_row(row);
                let sum: f64 = w.iter().take(batch.n_k[zz]).sum();
                assert!((sum - 1.0).abs() <= 1e-6);
                // Masked tail carries weight exactly zero.
                assert!(w[batch.n_k[zz]..].iter().all(|&x| x == 0.0));
            }
        }
        let sg = score_matrix(&batch, &AttentionConfig::sigmoid(4)).unwrap();
        for zz in 0..2 {
            for i in 0..batch.n_q[zz] {
                for &s in sg.s.row(zz, 0, i).iter().take(batch.n_k[zz]) {
                    let w = sigmoid_eval(s, SigmoidMode::Exact);
                    assert!(w > 0.0 && w < 1.0);
                }
            }
        }
    }

    #[test]
    fn dense_backward_zero_upstream_gives_zero_gradients() {
        let batch: JaggedBatch<f64> =
            generate_batch_with_lengths(&[5, 2], 6, 2, 3, 31).unwrap();
        let d_out = Tensor4::zeros(batch.q.dims());
        for cfg in [AttentionConfig::softmax(3), AttentionConfig::sigmoid(3)] {
            let (dq, dk, dv) = dense_backward(&batch, &cfg, &d_out).unwrap();
            assert!(dq.data().iter().all(|&x| x == 0.0));
            assert!(dk.data().iter().all(|&x| x == 0.0));
            assert!(dv.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let batch: JaggedBatch<f64> =
            generate_batch_with_lengths(&[3], 3, 1, 2, 41).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut d_out = Tensor4::zeros(batch.q.dims());
        for i in 0..3 {
            for dd in 0..2 {
                *d_out.at_mut(0, i, 0, dd) = rng.random_range(-1.0..1.0);
            }
        }
        let h = 1e-5;
        for cfg in [AttentionConfig::softmax(2), AttentionConfig::sigmoid(2)] {
            let (dq, dk, dv) = dense_backward(&batch, &cfg, &d_out).unwrap();
            let loss = |b: &JaggedBatch<f64>| -> f64 {
                let out = dense_forward(b, &cfg).unwrap();
                out.data()
                    .iter()
                    .zip(d_out.data().iter())
                    .map(|(&o, &g)| o * g)
                    .sum()
            };
            for (name, analytic, which) in [("q", &dq, 0), ("k", &dk, 1), ("v", &dv, 2)] {
                for i in 0..3 {
                    for dd in 0..2 {
                        let mut plus = batch.clone();
                        let mut minus = batch.clone();
                        let (tp, tm) = match which {
                            0 => (&mut plus.q, &mut minus.q),
                            1 => (&mut plus.k, &mut minus.k),
                            _ => (&mut plus.v, &mut minus.v),
                        };
                        *tp.at_mut(0, i, 0, dd) += h;
                        *tm.at_mut(0, i, 0, dd) -= h;
                        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                        let a = analytic.at(0, i, 0, dd);
                        let err = crate::tensor::rel_err(a, numeric);
                        assert!(
                            err <= 1e-6,
                            "{name}[{i},{dd}] {:?}: analytic {a} vs fd {numeric} (rel {err})",
                            cfg.mechanism
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn saturated_negative_scores_annihilate_gradients() {
        let batch: JaggedBatch<f64> =
            generate_batch_with_lengths(&[4], 4, 1, 3, 3).unwrap();
        let cfg = AttentionConfig::sigmoid(3).with_bias(BiasMode::Fixed(-20.0));
        let mut d_out = Tensor4::zeros(batch.q.dims());
        d_out.fill(1.0);
        let (dq, dk, dv) = dense_backward(&batch, &cfg, &d_out).unwrap();
        for g in [&dq, &dk] {
            assert!(g.data().iter().all(|&x| x.abs() < 1e-7));
        }
        // sigma(-20) ~ 2e-9, so dV is tiny as well.
        assert!(dv.data().iter().all(|&x| x.abs() < 1e-7));
    }

    #[test]
    fn pad_mutation_leaves_dense_forward_bitwise_unchanged() {
        let batch: JaggedBatch<f64> =
            generate_batch_with_lengths(&[5, 3], 8, 2, 4, 59).unwrap();
        for cfg in [AttentionConfig::softmax(4), AttentionConfig::sigmoid(4)] {
            let base = dense_forward(&batch, &cfg).unwrap();
            let mut poisoned = batch.clone();
            poisoned.poison_padding(1e6);
            let out = dense_forward(&poisoned, &cfg).unwrap();
            assert_eq!(base, out);
            poisoned.poison_padding(f64::NAN);
            let out = dense_forward(&poisoned, &cfg).unwrap();
            assert_eq!(base, out);
        }
    }

    #[test]
    fn sigmoid_jacobian_is_quarter_diagonal_at_zero() {
        let jac = weight_jacobian_row(&[0.0, 0.0], Mechanism::Sigmoid);
        assert_eq!(jac.at(0, 0), 0.25);
        assert_eq!(jac.at(1, 1), 0.25);
        assert_eq!(jac.at(0, 1), 0.0);
        assert_eq!(jac.at(1, 0), 0.0);
    }

    #[test]
    fn softmax_jacobian_at_uniform_two_scores() {
        // p = (0.5, 0.5) plugged into p_j (delta_jk - p_k).
        let jac = weight_jacobian_row(&[0.0, 0.0], Mechanism::Softmax);
        assert!((jac.at(0, 0) - 0.25).abs() < 1e-15);
        assert!((jac.at(0, 1) + 0.25).abs() < 1e-15);
        assert!((jac.at(1, 0) + 0.25).abs() < 1e-15);
        assert!((jac.at(1, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_jacobian_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..50 {
            let n = rng.random_range(2..9);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
            let jac = weight_jacobian_row(&scores, Mechanism::Softmax);
            for j in 0..n {
                let sum: f64 = jac.row(j).iter().sum();
                assert!(sum.abs() <= 1e-12, "row {j} sums to {sum}");
            }
        }
    }

    #[test]
    fn sigmoid_config_rejects_missing_bias() {
        let cfg = AttentionConfig::sigmoid(4).with_bias(BiasMode::None);
        assert!(cfg.validate().is_err());
    }
}
