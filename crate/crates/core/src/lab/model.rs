//! Encoder model with manual analytic gradients.
//!
//! Parameters live in one flat `Vec<f64>` described by a segment layout, so
//! clipping, AdamW, the global gradient norm, and finite-difference checks
//! all operate on plain slices. The attention sublayer builds a
//! [`JaggedBatch`] from the projected Q/K/V and routes through the blocked
//! sigmoid kernels (or the dense softmax reference), inheriting their
//! padding semantics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::JaggedBatch;
use crate::error::{Error, Result};
use crate::kernel::{
    blocked_backward_dkdv, blocked_backward_dq, blocked_forward, sigmoid_eval, SigmoidMode,
    TileConfig,
};
use crate::reference::{
    dense_backward, dense_forward, softmax_row, AttentionConfig, BiasMode, Mechanism,
};
use crate::tensor::Tensor4;

use super::data::TokenBatch;
use super::EncoderConfig;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
    One,
}

/// One named parameter block inside the flat vector.
#[derive(Debug, Clone)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Weight matrices decay; biases, norms, and embeddings do not.
    pub decay: bool,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct LayerSegs {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Segs {
    embed: usize,
    pos: usize,
    layers: Vec<LayerSegs>,
    final_g: usize,
    final_b: usize,
    head_w: usize,
    head_b: usize,
}

/// Encoder with a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: EncoderConfig,
    pub theta: Vec<f64>,
    /// Bias resolution for sigmoid attention; defaults to `-ln(n)` per
    /// sequence and is exposed for saturation experiments.
    pub attn_bias: BiasMode,
    /// Tile geometry used by the attention sublayer.
    pub tiles: TileConfig,
    segments: Vec<Segment>,
    segs: Segs,
}

struct LayoutBuilder {
    segments: Vec<Segment>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, len: usize, decay: bool, init: Init) -> usize {
        let idx = self.segments.len();
        self.segments.push(Segment {
            name,
            offset: self.total,
            len,
            decay,
            init,
        });
        self.total += len;
        idx
    }
}

fn build_layout(cfg: &EncoderConfig) -> (Vec<Segment>, Segs, usize) {
    let dm = cfg.d_model;
    let ff = cfg.ffn_mult * dm;
    let mut b = LayoutBuilder {
        segments: Vec::new(),
        total: 0,
    };
    let embed = b.push("embed".into(), cfg.vocab_size * dm, false, Init::Normal);
    let pos = b.push("pos".into(), cfg.max_len * dm, false, Init::Normal);
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        layers.push(LayerSegs {
            ln1_g: b.push(p("ln1.gamma"), dm, false, Init::One),
            ln1_b: b.push(p("ln1.beta"), dm, false, Init::Zero),
            wq: b.push(p("wq"), dm * dm, true, Init::Normal),
            bq: b.push(p("bq"), dm, false, Init::Zero),
            wk: b.push(p("wk"), dm * dm, true, Init::Normal),
            bk: b.push(p("bk"), dm, false, Init::Zero),
            wv: b.push(p("wv"), dm * dm, true, Init::Normal),
            bv: b.push(p("bv"), dm, false, Init::Zero),
            wo: b.push(p("wo"), dm * dm, true, Init::Normal),
            bo: b.push(p("bo"), dm, false, Init::Zero),
            ln2_g: b.push(p("ln2.gamma"), dm, false, Init::One),
            ln2_b: b.push(p("ln2.beta"), dm, false, Init::Zero),
            w1: b.push(p("w1"), dm * ff, true, Init::Normal),
            b1: b.push(p("b1"), ff, false, Init::Zero),
            w2: b.push(p("w2"), ff * dm, true, Init::Normal),
            b2: b.push(p("b2"), dm, false, Init::Zero),
        });
    }
    let final_g = b.push("final_ln.gamma".into(), dm, false, Init::One);
    let final_b = b.push("final_ln.beta".into(), dm, false, Init::Zero);
    let head_w = b.push("head.w".into(), dm * cfg.vocab_size, true, Init::Normal);
    let head_b = b.push("head.b".into(), cfg.vocab_size, false, Init::Zero);
    let segs = Segs {
        embed,
        pos,
        layers,
        final_g,
        final_b,
        head_w,
        head_b,
    };
    let total = b.total;
    (b.segments, segs, total)
}

// -- small dense kernels ----------------------------------------------------

fn matmul(x: &[f64], rows: usize, inner: usize, w: &[f64], cols: usize, out: &mut [f64]) {
    out[..rows * cols].fill(0.0);
    for r in 0..rows {
        let x_row = &x[r * inner..(r + 1) * inner];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        for (i, &xv) in x_row.iter().enumerate() {
            let w_row = &w[i * cols..(i + 1) * cols];
            for (o, &wv) in out_row.iter_mut().zip(w_row.iter()) {
                *o += xv * wv;
            }
        }
    }
}

/// `dw += x^T dy`
fn matmul_add_xt_dy(x: &[f64], rows: usize, inner: usize, dy: &[f64], cols: usize, dw: &mut [f64]) {
    for r in 0..rows {
        let x_row = &x[r * inner..(r + 1) * inner];
        let dy_row = &dy[r * cols..(r + 1) * cols];
        for (i, &xv) in x_row.iter().enumerate() {
            let dw_row = &mut dw[i * cols..(i + 1) * cols];
            for (dwv, &dyv) in dw_row.iter_mut().zip(dy_row.iter()) {
                *dwv += xv * dyv;
            }
        }
    }
}

/// `dx += dy w^T`
fn matmul_add_dy_wt(dy: &[f64], rows: usize, cols: usize, w: &[f64], inner: usize, dx: &mut [f64]) {
    for r in 0..rows {
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let dx_row = &mut dx[r * inner..(r + 1) * inner];
        for (i, dxv) in dx_row.iter_mut().enumerate() {
            let w_row = &w[i * cols..(i + 1) * cols];
            let mut acc = 0.0;
            for (dyv, wv) in dy_row.iter().zip(w_row.iter()) {
                acc += dyv * wv;
            }
            *dxv += acc;
        }
    }
}

fn add_bias(out: &mut [f64], rows: usize, cols: usize, bias: &[f64]) {
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        for (o, &b) in row.iter_mut().zip(bias.iter()) {
            *o += b;
        }
    }
}

fn add_bias_grad(dy: &[f64], rows: usize, cols: usize, db: &mut [f64]) {
    for r in 0..rows {
        let row = &dy[r * cols..(r + 1) * cols];
        for (dbv, &dyv) in db.iter_mut().zip(row.iter()) {
            *dbv += dyv;
        }
    }
}

// -- layer norm ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], rows: usize, dm: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LnCache) {
    let mut out = vec![0.0; rows * dm];
    let mut xhat = vec![0.0; rows * dm];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dm..(r + 1) * dm];
        let mean = row.iter().sum::<f64>() / dm as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dm as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..dm {
            let xh = (row[c] - mean) * rs;
            xhat[r * dm + c] = xh;
            out[r * dm + c] = gamma[c] * xh + beta[c];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Accumulates `dx` into `dx_out` and parameter grads into `dgamma`/`dbeta`.
fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    gamma: &[f64],
    rows: usize,
    dm: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx_out: &mut [f64],
) {
    for r in 0..rows {
        let dy_row = &dy[r * dm..(r + 1) * dm];
        let xhat_row = &cache.xhat[r * dm..(r + 1) * dm];
        let rs = cache.rstd[r];
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for c in 0..dm {
            let g = dy_row[c] * gamma[c];
            mean_g += g;
            mean_gx += g * xhat_row[c];
            dgamma[c] += dy_row[c] * xhat_row[c];
            dbeta[c] += dy_row[c];
        }
        mean_g /= dm as f64;
        mean_gx /= dm as f64;
        let dx_row = &mut dx_out[r * dm..(r + 1) * dm];
        for c in 0..dm {
            let g = dy_row[c] * gamma[c];
            dx_row[c] += rs * (g - mean_g - xhat_row[c] * mean_gx);
        }
    }
}

// -- GELU ---------------------------------------------------------------------

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let phi_big = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let phi_small = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_big + x * phi_small
}

// -- caches ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Input to the q/k/v projections (LN1 output in pre-norm, the block
    /// input in post-norm).
    attn_in: Vec<f64>,
    ln1: LnCache,
    /// Projected q/k/v per head; retained because the backward kernels
    /// recompute scores from it.
    pub batch: JaggedBatch<f64>,
    /// Concatenated head outputs (input to the output projection).
    concat: Vec<f64>,
    /// Input to the MLP (LN2 output in pre-norm, the post-attention state
    /// in post-norm).
    mlp_in: Vec<f64>,
    ln2: LnCache,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
    final_ln: Option<LnCache>,
    xf: Vec<f64>,
    rows: usize,
}

/// Layer-0 attention instrumentation for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    /// max |alpha q.k + b| over valid positions.
    pub max_abs_score: f64,
    /// Largest diagonal weight-Jacobian entry: `sigma'(s)` for sigmoid,
    /// `p (1 - p)` for softmax. Bounded by 1/4 for both.
    pub max_weight_deriv: f64,
}

impl Model {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (segments, segs, total) = build_layout(cfg);
        let mut theta = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for seg in &segments {
            let view = &mut theta[seg.offset..seg.offset + seg.len];
            match seg.init {
                Init::Zero => {}
                Init::One => view.fill(1.0),
                Init::Normal => {
                    for slot in view.iter_mut() {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        *slot = x * INIT_STD;
                    }
                }
            }
        }
        let attn_bias = match cfg.mechanism {
            Mechanism::Sigmoid => BiasMode::LogSeqLen,
            Mechanism::Softmax => BiasMode::None,
        };
        Ok(Self {
            cfg: *cfg,
            theta,
            attn_bias,
            tiles: TileConfig::new(32, 32),
            segments,
            segs,
        })
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.offset..s.offset + s.len)
    }

    pub fn attention_config(&self) -> AttentionConfig {
        let base = match self.cfg.mechanism {
            Mechanism::Sigmoid => AttentionConfig::sigmoid(self.cfg.head_dim()),
            Mechanism::Softmax => AttentionConfig::softmax(self.cfg.head_dim()),
        };
        match self.cfg.mechanism {
            Mechanism::Sigmoid => base.with_bias(self.attn_bias),
            Mechanism::Softmax => base,
        }
    }

    fn view(&self, seg: usize) -> &[f64] {
        let s = &self.segments[seg];
        &self.theta[s.offset..s.offset + s.len]
    }

    fn validate_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.batch_size == 0 || batch.max_len == 0 {
            return Err(Error::Dimension("empty token batch".into()));
        }
        if batch.max_len > self.cfg.max_len {
            return Err(Error::Dimension(format!(
                "batch max_len {} exceeds model max_len {}",
                batch.max_len, self.cfg.max_len
            )));
        }
        if batch.tokens.len() != batch.batch_size * batch.max_len
            || batch.lengths.len() != batch.batch_size
        {
            return Err(Error::Dimension("token batch shape mismatch".into()));
        }
        for (i, &t) in batch.tokens.iter().enumerate() {
            if t as usize >= self.cfg.vocab_size {
                return Err(Error::Validation(format!(
                    "token {t} at flat position {i} out of range (vocab {})",
                    self.cfg.vocab_size
                )));
            }
        }
        for (b, &len) in batch.lengths.iter().enumerate() {
            if len == 0 || len > batch.max_len {
                return Err(Error::Dimension(format!(
                    "length {len} of sequence {b} out of range 1..={}",
                    batch.max_len
                )));
            }
        }
        for &(pos, _) in &batch.masked {
            if pos >= batch.tokens.len() {
                return Err(Error::Dimension(format!("masked position {pos} out of range")));
            }
        }
        Ok(())
    }

    fn project_to_heads(&self, flat: &[f64], batch: &TokenBatch) -> Tensor4<f64> {
        let (bsz, l) = (batch.batch_size, batch.max_len);
        let (heads, hd) = (self.cfg.heads, self.cfg.head_dim());
        let dm = self.cfg.d_model;
        let mut t = Tensor4::zeros([bsz, l, heads, hd]);
        for b in 0..bsz {
            for pos in 0..batch.lengths[b] {
                let row = &flat[(b * l + pos) * dm..(b * l + pos + 1) * dm];
                for h in 0..heads {
                    t.row_mut(b, pos, h).copy_from_slice(&row[h * hd..(h + 1) * hd]);
                }
            }
        }
        t
    }

    fn heads_to_flat(&self, t: &Tensor4<f64>, batch: &TokenBatch) -> Vec<f64> {
        let (bsz, l) = (batch.batch_size, batch.max_len);
        let (heads, hd) = (self.cfg.heads, self.cfg.head_dim());
        let dm = self.cfg.d_model;
        let mut flat = vec![0.0; bsz * l * dm];
        for b in 0..bsz {
            for pos in 0..l {
                let row = &mut flat[(b * l + pos) * dm..(b * l + pos + 1) * dm];
                for h in 0..heads {
                    row[h * hd..(h + 1) * hd].copy_from_slice(t.row(b, pos, h));
                }
            }
        }
        flat
    }

    fn attention_forward(&self, attn_in: &[f64], batch: &TokenBatch, ls: &LayerSegs)
        -> Result<(JaggedBatch<f64>, Vec<f64>)> {
        let rows = batch.batch_size * batch.max_len;
        let dm = self.cfg.d_model;
        let mut qf = vec![0.0; rows * dm];
        let mut kf = vec![0.0; rows * dm];
        let mut vf = vec![0.0; rows * dm];
        matmul(attn_in, rows, dm, self.view(ls.wq), dm, &mut qf);
        add_bias(&mut qf, rows, dm, self.view(ls.bq));
        matmul(attn_in, rows, dm, self.view(ls.wk), dm, &mut kf);
        add_bias(&mut kf, rows, dm, self.view(ls.bk));
        matmul(attn_in, rows, dm, self.view(ls.wv), dm, &mut vf);
        add_bias(&mut vf, rows, dm, self.view(ls.bv));
        let q4 = self.project_to_heads(&qf, batch);
        let k4 = self.project_to_heads(&kf, batch);
        let v4 = self.project_to_heads(&vf, batch);
        let jag = JaggedBatch::from_parts(q4, k4, v4, batch.lengths.clone(), batch.lengths.clone())?;
        let cfg = self.attention_config();
        let out4 = match self.cfg.mechanism {
            Mechanism::Sigmoid => blocked_forward(&jag, &cfg, &self.tiles)?.0,
            Mechanism::Softmax => dense_forward(&jag, &cfg)?,
        };
        let concat = self.heads_to_flat(&out4, batch);
        Ok((jag, concat))
    }

    /// Gradients of the attention sublayer: given `d_proj` (gradient at the
    /// output-projection output), accumulates parameter grads and returns
    /// the gradient at the sublayer input.
    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        lc: &LayerCache,
        batch: &TokenBatch,
        ls: &LayerSegs,
        d_proj: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        let rows = batch.batch_size * batch.max_len;
        let dm = self.cfg.d_model;
        let seg = |i: usize| {
            let s = &self.segments[i];
            s.offset..s.offset + s.len
        };

        matmul_add_xt_dy(&lc.concat, rows, dm, d_proj, dm, &mut grads[seg(ls.wo)]);
        add_bias_grad(d_proj, rows, dm, &mut grads[seg(ls.bo)]);
        let mut dconcat = vec![0.0; rows * dm];
        matmul_add_dy_wt(d_proj, rows, dm, self.view(ls.wo), dm, &mut dconcat);

        // Route through the attention kernels. Pad rows of d_out are zeroed
        // by the head reshape (they are analytically zero anyway).
        let d_out4 = self.project_to_heads(&dconcat, batch);
        let cfg = self.attention_config();
        let (dq4, dk4, dv4) = match self.cfg.mechanism {
            Mechanism::Sigmoid => {
                let (dq, _) = blocked_backward_dq(&lc.batch, &cfg, &self.tiles, &d_out4)?;
                let (dk, dv, _) = blocked_backward_dkdv(&lc.batch, &cfg, &self.tiles, &d_out4)?;
                (dq, dk, dv)
            }
            Mechanism::Softmax => dense_backward(&lc.batch, &cfg, &d_out4)?,
        };
        let dqf = self.heads_to_flat(&dq4, batch);
        let dkf = self.heads_to_flat(&dk4, batch);
        let dvf = self.heads_to_flat(&dv4, batch);

        matmul_add_xt_dy(&lc.attn_in, rows, dm, &dqf, dm, &mut grads[seg(ls.wq)]);
        add_bias_grad(&dqf, rows, dm, &mut grads[seg(ls.bq)]);
        matmul_add_xt_dy(&lc.attn_in, rows, dm, &dkf, dm, &mut grads[seg(ls.wk)]);
        add_bias_grad(&dkf, rows, dm, &mut grads[seg(ls.bk)]);
        matmul_add_xt_dy(&lc.attn_in, rows, dm, &dvf, dm, &mut grads[seg(ls.wv)]);
        add_bias_grad(&dvf, rows, dm, &mut grads[seg(ls.bv)]);

        let mut d_attn_in = vec![0.0; rows * dm];
        matmul_add_dy_wt(&dqf, rows, dm, self.view(ls.wq), dm, &mut d_attn_in);
        matmul_add_dy_wt(&dkf, rows, dm, self.view(ls.wk), dm, &mut d_attn_in);
        matmul_add_dy_wt(&dvf, rows, dm, self.view(ls.wv), dm, &mut d_attn_in);
        Ok(d_attn_in)
    }

    /// Forward pass: logits at every position plus the caches the backward
    /// pass needs. Loss is computed separately on masked positions only.
    pub fn forward(&self, batch: &TokenBatch) -> Result<(Vec<f64>, ForwardCache)> {
        self.validate_batch(batch)?;
        let (bsz, l) = (batch.batch_size, batch.max_len);
        let rows = bsz * l;
        let dm = self.cfg.d_model;
        let ff = self.cfg.ffn_mult * dm;

        let embed = self.view(self.segs.embed);
        let pos_table = self.view(self.segs.pos);
        let mut x = vec![0.0; rows * dm];
        for r in 0..rows {
            let tok = batch.tokens[r] as usize;
            let pos = r % l;
            let out_row = &mut x[r * dm..(r + 1) * dm];
            let e_row = &embed[tok * dm..(tok + 1) * dm];
            let p_row = &pos_table[pos * dm..(pos + 1) * dm];
            for c in 0..dm {
                out_row[c] = e_row[c] + p_row[c];
            }
        }

        let mut layers = Vec::with_capacity(self.cfg.layers);
        for ls in &self.segs.layers {
            let cache = if self.cfg.prenorm {
                let (xn1, ln1) =
                    layer_norm(&x, rows, dm, self.view(ls.ln1_g), self.view(ls.ln1_b));
                let (jag, concat) = self.attention_forward(&xn1, batch, ls)?;
                let mut proj = vec![0.0; rows * dm];
                matmul(&concat, rows, dm, self.view(ls.wo), dm, &mut proj);
                add_bias(&mut proj, rows, dm, self.view(ls.bo));
                for (xv, pv) in x.iter_mut().zip(proj.iter()) {
                    *xv += pv;
                }
                let (xn2, ln2) =
                    layer_norm(&x, rows, dm, self.view(ls.ln2_g), self.view(ls.ln2_b));
                let mut h_pre = vec![0.0; rows * ff];
                matmul(&xn2, rows, dm, self.view(ls.w1), ff, &mut h_pre);
                add_bias(&mut h_pre, rows, ff, self.view(ls.b1));
                let h_act: Vec<f64> = h_pre.iter().map(|&v| gelu(v)).collect();
                let mut mlp = vec![0.0; rows * dm];
                matmul(&h_act, rows, ff, self.view(ls.w2), dm, &mut mlp);
                add_bias(&mut mlp, rows, dm, self.view(ls.b2));
                for (xv, mv) in x.iter_mut().zip(mlp.iter()) {
                    *xv += mv;
                }
                LayerCache {
                    attn_in: xn1,
                    ln1,
                    batch: jag,
                    concat,
                    mlp_in: xn2,
                    ln2,
                    h_pre,
                    h_act,
                }
            } else {
                // Post-norm wiring: x -> attn -> LN1(x + attn) -> mlp ->
                // LN2(mid + mlp).
                let attn_in = x.clone();
                let (jag, concat) = self.attention_forward(&attn_in, batch, ls)?;
                let mut proj = vec![0.0; rows * dm];
                matmul(&concat, rows, dm, self.view(ls.wo), dm, &mut proj);
                add_bias(&mut proj, rows, dm, self.view(ls.bo));
                for (pv, xv) in proj.iter_mut().zip(x.iter()) {
                    *pv += xv;
                }
                let (x_mid, ln1) =
                    layer_norm(&proj, rows, dm, self.view(ls.ln1_g), self.view(ls.ln1_b));
                let mlp_in = x_mid;
                let mut h_pre = vec![0.0; rows * ff];
                matmul(&mlp_in, rows, dm, self.view(ls.w1), ff, &mut h_pre);
                add_bias(&mut h_pre, rows, ff, self.view(ls.b1));
                let h_act: Vec<f64> = h_pre.iter().map(|&v| gelu(v)).collect();
                let mut sum2 = vec![0.0; rows * dm];
                matmul(&h_act, rows, ff, self.view(ls.w2), dm, &mut sum2);
                add_bias(&mut sum2, rows, dm, self.view(ls.b2));
                for (sv, mv) in sum2.iter_mut().zip(mlp_in.iter()) {
                    *sv += mv;
                }
                let (y, ln2) =
                    layer_norm(&sum2, rows, dm, self.view(ls.ln2_g), self.view(ls.ln2_b));
                x = y;
                LayerCache {
                    attn_in,
                    ln1,
                    batch: jag,
                    concat,
                    mlp_in,
                    ln2,
                    h_pre,
                    h_act,
                }
            };
            layers.push(cache);
        }

        let (xf, final_ln) = if self.cfg.prenorm {
            let (xf, ln) = layer_norm(
                &x,
                rows,
                dm,
                self.view(self.segs.final_g),
                self.view(self.segs.final_b),
            );
            (xf, Some(ln))
        } else {
            (x.clone(), None)
        };

        let vocab = self.cfg.vocab_size;
        let mut logits = vec![0.0; rows * vocab];
        matmul(&xf, rows, dm, self.view(self.segs.head_w), vocab, &mut logits);
        add_bias(&mut logits, rows, vocab, self.view(self.segs.head_b));

        Ok((
            logits,
            ForwardCache {
                layers,
                final_ln,
                xf,
                rows,
            },
        ))
    }

    /// Backward pass from `dlogits`; returns the flat gradient vector
    /// (same layout as `theta`).
    pub fn backward(
        &self,
        batch: &TokenBatch,
        cache: &ForwardCache,
        dlogits: &[f64],
    ) -> Result<Vec<f64>> {
        let rows = cache.rows;
        let dm = self.cfg.d_model;
        let ff = self.cfg.ffn_mult * dm;
        let vocab = self.cfg.vocab_size;
        assert_eq!(dlogits.len(), rows * vocab, "dlogits shape mismatch");
        let mut grads = vec![0.0; self.theta.len()];
        let seg = |i: usize| {
            let s = &self.segments[i];
            s.offset..s.offset + s.len
        };

        matmul_add_xt_dy(&cache.xf, rows, dm, dlogits, vocab, &mut grads[seg(self.segs.head_w)]);
        add_bias_grad(dlogits, rows, vocab, &mut grads[seg(self.segs.head_b)]);
        let mut dxf = vec![0.0; rows * dm];
        matmul_add_dy_wt(dlogits, rows, vocab, self.view(self.segs.head_w), dm, &mut dxf);

        let mut dx = vec![0.0; rows * dm];
        if let Some(final_ln) = &cache.final_ln {
            let gamma = self.view(self.segs.final_g).to_vec();
            let mut dgamma = vec![0.0; dm];
            let mut dbeta = vec![0.0; dm];
            layer_norm_backward(&dxf, final_ln, &gamma, rows, dm, &mut dgamma, &mut dbeta, &mut dx);
            add_into(&mut grads[seg(self.segs.final_g)], &dgamma);
            add_into(&mut grads[seg(self.segs.final_b)], &dbeta);
        } else {
            dx.copy_from_slice(&dxf);
        }

        for (l_idx, ls) in self.segs.layers.iter().enumerate().rev() {
            let lc = &cache.layers[l_idx];
            if self.cfg.prenorm {
                // MLP branch.
                let d_mlp = dx.clone();
                let mut dh_act = vec![0.0; rows * ff];
                matmul_add_dy_wt(&d_mlp, rows, dm, self.view(ls.w2), ff, &mut dh_act);
                matmul_add_xt_dy(&lc.h_act, rows, ff, &d_mlp, dm, &mut grads[seg(ls.w2)]);
                add_bias_grad(&d_mlp, rows, dm, &mut grads[seg(ls.b2)]);
                let mut dh_pre = dh_act;
                for (g, &pre) in dh_pre.iter_mut().zip(lc.h_pre.iter()) {
                    *g *= gelu_grad(pre);
                }
                matmul_add_xt_dy(&lc.mlp_in, rows, dm, &dh_pre, ff, &mut grads[seg(ls.w1)]);
                add_bias_grad(&dh_pre, rows, ff, &mut grads[seg(ls.b1)]);
                let mut dxn2 = vec![0.0; rows * dm];
                matmul_add_dy_wt(&dh_pre, rows, ff, self.view(ls.w1), dm, &mut dxn2);

                let mut dx_mid = dx.clone();
                let gamma2 = self.view(ls.ln2_g).to_vec();
                let mut dg2 = vec![0.0; dm];
                let mut db2 = vec![0.0; dm];
                layer_norm_backward(&dxn2, &lc.ln2, &gamma2, rows, dm, &mut dg2, &mut db2, &mut dx_mid);
                add_into(&mut grads[seg(ls.ln2_g)], &dg2);
                add_into(&mut grads[seg(ls.ln2_b)], &db2);

                // Attention branch.
                let d_attn_in = self.attention_backward(lc, batch, ls, &dx_mid, &mut grads)?;
                let mut dx_in = dx_mid;
                let gamma1 = self.view(ls.ln1_g).to_vec();
                let mut dg1 = vec![0.0; dm];
                let mut db1 = vec![0.0; dm];
                layer_norm_backward(
                    &d_attn_in,
                    &lc.ln1,
                    &gamma1,
                    rows,
                    dm,
                    &mut dg1,
                    &mut db1,
                    &mut dx_in,
                );
                add_into(&mut grads[seg(ls.ln1_g)], &dg1);
                add_into(&mut grads[seg(ls.ln1_b)], &db1);
                dx = dx_in;
            } else {
                // y = LN2(x_mid + MLP(x_mid)); x_mid = LN1(x_in + Attn(x_in)).
                let gamma2 = self.view(ls.ln2_g).to_vec();
                let mut dsum2 = vec![0.0; rows * dm];
                let mut dg2 = vec![0.0; dm];
                let mut db2 = vec![0.0; dm];
                layer_norm_backward(&dx, &lc.ln2, &gamma2, rows, dm, &mut dg2, &mut db2, &mut dsum2);
                add_into(&mut grads[seg(ls.ln2_g)], &dg2);
                add_into(&mut grads[seg(ls.ln2_b)], &db2);

                let mut dh_act = vec![0.0; rows * ff];
                matmul_add_dy_wt(&dsum2, rows, dm, self.view(ls.w2), ff, &mut dh_act);
                matmul_add_xt_dy(&lc.h_act, rows, ff, &dsum2, dm, &mut grads[seg(ls.w2)]);
                add_bias_grad(&dsum2, rows, dm, &mut grads[seg(ls.b2)]);
                let mut dh_pre = dh_act;
                for (g, &pre) in dh_pre.iter_mut().zip(lc.h_pre.iter()) {
                    *g *= gelu_grad(pre);
                }
                matmul_add_xt_dy(&lc.mlp_in, rows, dm, &dh_pre, ff, &mut grads[seg(ls.w1)]);
                add_bias_grad(&dh_pre, rows, ff, &mut grads[seg(ls.b1)]);
                let mut dx_mid = dsum2.clone();
                matmul_add_dy_wt(&dh_pre, rows, ff, self.view(ls.w1), dm, &mut dx_mid);

                let gamma1 = self.view(ls.ln1_g).to_vec();
                let mut dsum1 = vec![0.0; rows * dm];
                let mut dg1 = vec![0.0; dm];
                let mut db1 = vec![0.0; dm];
                layer_norm_backward(&dx_mid, &lc.ln1, &gamma1, rows, dm, &mut dg1, &mut db1, &mut dsum1);
                add_into(&mut grads[seg(ls.ln1_g)], &dg1);
                add_into(&mut grads[seg(ls.ln1_b)], &db1);

                let d_attn_in = self.attention_backward(lc, batch, ls, &dsum1, &mut grads)?;
                let mut dx_in = dsum1;
                for (a, b) in dx_in.iter_mut().zip(d_attn_in.iter()) {
                    *a += b;
                }
                dx = dx_in;
            }
        }

        // Embedding and position table scatter.
        {
            let l = batch.max_len;
            let embed_range = seg(self.segs.embed);
            let pos_range = seg(self.segs.pos);
            for r in 0..rows {
                let tok = batch.tokens[r] as usize;
                let pos = r % l;
                let dx_row = &dx[r * dm..(r + 1) * dm];
                for c in 0..dm {
                    grads[embed_range.start + tok * dm + c] += dx_row[c];
                    grads[pos_range.start + pos * dm + c] += dx_row[c];
                }
            }
        }
        Ok(grads)
    }

    /// Layer-0 attention score instrumentation, recomputed from the cached
    /// projections.
    pub fn layer0_score_stats(&self, cache: &ForwardCache) -> ScoreStats {
        score_stats(&cache.layers[0].batch, &self.attention_config())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

/// Max |score| and max diagonal weight-derivative over valid positions.
pub fn score_stats(batch: &JaggedBatch<f64>, cfg: &AttentionConfig) -> ScoreStats {
    let [z, _l_q, h, d] = batch.q.dims();
    let mut max_abs = 0.0f64;
    let mut max_deriv = 0.0f64;
    let mut has_nan = false;
    let mut row = Vec::new();
    for zz in 0..z {
        let bias = cfg.bias_for(batch.n_k[zz]);
        for hh in 0..h {
            for i in 0..batch.n_q[zz] {
                let q_row = batch.q.row(zz, i, hh);
                row.clear();
                for j in 0..batch.n_k[zz] {
                    let k_row = batch.k.row(zz, j, hh);
                    let mut dot = 0.0;
                    for dd in 0..d {
                        dot += q_row[dd] * k_row[dd];
                    }
                    let s = dot * cfg.scale + bias;
                    if s.is_nan() {
                        has_nan = true;
                    }
                    max_abs = max_abs.max(s.abs());
                    row.push(s);
                }
                match cfg.mechanism {
                    Mechanism::Sigmoid => {
                        for &s in &row {
                            let w = sigmoid_eval(s, SigmoidMode::Exact);
                            max_deriv = max_deriv.max(w * (1.0 - w));
                        }
                    }
                    Mechanism::Softmax => {
                        for &p in softmax_row(&row).iter() {
                            max_deriv = max_deriv.max(p * (1.0 - p));
                        }
                    }
                }
            }
        }
    }
    if has_nan {
        // Divergence is recorded verbatim, not suppressed.
        return ScoreStats {
            max_abs_score: f64::NAN,
            max_weight_deriv: f64::NAN,
        };
    }
    ScoreStats {
        max_abs_score: max_abs,
        max_weight_deriv: max_deriv,
    }
}

/// Mean cross-entropy over masked positions and its gradient w.r.t. logits.
pub fn masked_cross_entropy(
    logits: &[f64],
    vocab: usize,
    masked: &[(usize, u32)],
) -> Result<(f64, Vec<f64>)> {
    if masked.is_empty() {
        return Err(Error::EmptyInput("loss needs at least one masked position".into()));
    }
    let m = masked.len() as f64;
    let mut dlogits = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for &(r, target) in masked {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[target as usize];
        let drow = &mut dlogits[r * vocab..(r + 1) * vocab];
        for (c, slot) in drow.iter_mut().enumerate() {
            let p = (row[c] - lse).exp();
            *slot = (p - if c == target as usize { 1.0 } else { 0.0 }) / m;
        }
    }
    Ok((loss / m, dlogits))
}
