//! Multi-head self-attention with optional masking, and single-scale
//! deformable attention with differentiable bilinear sampling.
//!
//! Deformable attention samples a small fixed set of interpolated points
//! around each query's reference box instead of attending to every key:
//! per head, `out = sum_k A_k * W_value x(p + dp_k)` with `sum_k A_k = 1`,
//! offsets and weights both produced by linear projections of the query
//! content. Sampling locations are the box center displaced by offsets
//! scaled by half the box size.

use rand::Rng;

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::Error;
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Value treated as "blocked" in an additive attention mask.
pub const MASK_BLOCK_VALUE: f64 = -1e30;

/// Attention mask over (query, key) pairs.
///
/// Stored as a boolean blocked matrix; `additive()` renders the conventional
/// 0 / large-negative form. Blocked keys receive exactly zero weight, and a
/// query with every key blocked produces a zero output row.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl AttnMask {
    pub fn all_allowed(rows: usize, cols: usize) -> Self {
        AttnMask {
            rows,
            cols,
            blocked: vec![false; rows * cols],
        }
    }

    pub fn from_blocked(rows: usize, cols: usize, blocked: Vec<bool>) -> Self {
        assert!(
            blocked.len() == rows * cols,
            "mask storage {} vs {}x{}",
            blocked.len(),
            rows,
            cols
        );
        AttnMask { rows, cols, blocked }
    }

    /// Interpret an additive mask: entries at or below `MASK_BLOCK_VALUE / 2`
    /// are blocked, zeros are allowed.
    pub fn from_additive(m: &Tensor) -> Self {
        let rows = m.rows();
        let cols = m.cols();
        AttnMask {
            rows,
            cols,
            blocked: m.data().iter().map(|&v| v <= MASK_BLOCK_VALUE / 2.0).collect(),
        }
    }

    pub fn additive(&self) -> Tensor {
        Tensor::new(
            &[self.rows, self.cols],
            self.blocked
                .iter()
                .map(|&b| if b { MASK_BLOCK_VALUE } else { 0.0 })
                .collect(),
        )
    }

    pub fn is_blocked(&self, q: usize, k: usize) -> bool {
        self.blocked[q * self.cols + k]
    }

    pub fn set_blocked(&mut self, q: usize, k: usize, blocked: bool) {
        self.blocked[q * self.cols + k] = blocked;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn blocked_slice(&self) -> &[bool] {
        &self.blocked
    }

    fn row_fully_blocked(&self, q: usize) -> bool {
        self.blocked[q * self.cols..(q + 1) * self.cols].iter().all(|&b| b)
    }
}

/// Single-scale deformable attention hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct DeformAttnConfig {
    pub n_heads: usize,
    pub n_points: usize,
    pub model_dim: usize,
}

impl DeformAttnConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.n_points < 1 {
            return Err(Error::config("deformable attention needs n_points >= 1"));
        }
        if self.n_heads < 1 || self.model_dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} must be divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

/// Feature map reconstructed from kept tokens; dropped positions are
/// zero-filled for sampling only and are never attention keys.
///
/// Layout is `[H*W, C]` row-major over grid positions.
pub struct FeatureMap2D {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap2D {
    /// Scatter kept token features into the full grid, zeros elsewhere.
    pub fn from_kept_tokens(kept: &Var, kept_idx: &[usize], height: usize, width: usize) -> Self {
        let full = kept.scatter_rows(kept_idx, height * width);
        FeatureMap2D {
            tokens: full,
            height,
            width,
        }
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Sample the channel vector at continuous grid coordinates `(x, y)`.
    pub fn sample_point(&self, x: f64, y: f64) -> Var {
        let pts = self
            .tokens
            .tape()
            .constant(Tensor::new(&[1, 2], vec![x, y]));
        self.tokens.bilinear_sample(&pts, self.height, self.width)
    }
}

/// Projection weights of one multi-head attention block, bound to a tape.
pub struct MhsaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Persistent parameters of one multi-head attention block.
#[derive(Clone, Debug)]
pub struct MhsaParams {
    pub wq: Parameter,
    pub bq: Parameter,
    pub wk: Parameter,
    pub bk: Parameter,
    pub wv: Parameter,
    pub bv: Parameter,
    pub wo: Parameter,
    pub bo: Parameter,
}

impl MhsaParams {
    pub fn new<R: Rng>(prefix: &str, dim: usize, rng: &mut R) -> Self {
        let w = |rng: &mut R| Tensor::randn(&[dim, dim], 0.02, rng);
        MhsaParams {
            wq: Parameter::new(format!("{prefix}.wq"), w(rng)),
            bq: Parameter::new(format!("{prefix}.bq"), Tensor::zeros(&[dim])),
            wk: Parameter::new(format!("{prefix}.wk"), w(rng)),
            bk: Parameter::new(format!("{prefix}.bk"), Tensor::zeros(&[dim])),
            wv: Parameter::new(format!("{prefix}.wv"), w(rng)),
            bv: Parameter::new(format!("{prefix}.bv"), Tensor::zeros(&[dim])),
            wo: Parameter::new(format!("{prefix}.wo"), w(rng)),
            bo: Parameter::new(format!("{prefix}.bo"), Tensor::zeros(&[dim])),
        }
    }

    pub fn bind(&self, tape: &Tape) -> MhsaVars {
        MhsaVars {
            wq: tape.param(&self.wq),
            bq: tape.param(&self.bq),
            wk: tape.param(&self.wk),
            bk: tape.param(&self.bk),
            wv: tape.param(&self.wv),
            bv: tape.param(&self.bv),
            wo: tape.param(&self.wo),
            bo: tape.param(&self.bo),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]
    }
}

/// Output of [`mhsa`]: the projected result plus per-head attention weights.
pub struct MhsaOutput {
    pub out: Var,
    /// One `[n_q, n_k]` probability matrix per head.
    pub attn: Vec<Var>,
}

/// Standard multi-head attention. Queries/keys/values are `[n, dim]` inputs;
/// the mask, when present, blocks (query, key) pairs. Fully blocked queries
/// yield exactly zero output rows.
pub fn mhsa(
    q_in: &Var,
    k_in: &Var,
    v_in: &Var,
    w: &MhsaVars,
    n_heads: usize,
    mask: Option<&AttnMask>,
) -> MhsaOutput {
    let dim = q_in.shape()[1];
    assert!(
        dim % n_heads == 0,
        "attention dim {} not divisible by {} heads",
        dim,
        n_heads
    );
    let n_q = q_in.shape()[0];
    let n_k = k_in.shape()[0];
    if let Some(m) = mask {
        assert!(
            m.rows() == n_q && m.cols() == n_k,
            "mask {}x{} vs attention {}x{}",
            m.rows(),
            m.cols(),
            n_q,
            n_k
        );
    }
    let dh = dim / n_heads;
    let q = q_in.matmul(&w.wq).add_bias(&w.bq);
    let k = k_in.matmul(&w.wk).add_bias(&w.bk);
    let v = v_in.matmul(&w.wv).add_bias(&w.bv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut attn = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(c0, c1);
        let kh = k.slice_cols(c0, c1);
        let vh = v.slice_cols(c0, c1);
        let logits = qh.matmul(&kh.t()).scale(scale);
        let probs = logits.softmax_last(mask.map(|m| m.blocked_slice()));
        heads.push(probs.matmul(&vh));
        attn.push(probs);
    }
    let head_refs: Vec<&Var> = heads.iter().collect();
    let merged = Var::concat_cols(&head_refs);
    let mut out = merged.matmul(&w.wo).add_bias(&w.bo);
    if let Some(m) = mask {
        let fully: Vec<usize> = (0..n_q).filter(|&r| m.row_fully_blocked(r)).collect();
        if !fully.is_empty() {
            let mut row_mask = vec![false; n_q * dim];
            for r in fully {
                row_mask[r * dim..(r + 1) * dim].fill(true);
            }
            out = out.masked_fill(&row_mask, 0.0);
        }
    }
    MhsaOutput { out, attn }
}

/// Bound projection weights of one deformable attention block.
pub struct DeformVars {
    pub w_offset: Var,
    pub b_offset: Var,
    pub w_weight: Var,
    pub b_weight: Var,
    pub w_value: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Persistent parameters of one deformable attention block.
#[derive(Clone, Debug)]
pub struct DeformParams {
    pub w_offset: Parameter,
    pub b_offset: Parameter,
    pub w_weight: Parameter,
    pub b_weight: Parameter,
    pub w_value: Parameter,
    pub w_out: Parameter,
    pub b_out: Parameter,
}

impl DeformParams {
    pub fn new<R: Rng>(prefix: &str, cfg: &DeformAttnConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let mk = cfg.n_heads * cfg.n_points;
        // Offset projection starts at zero weights with biases spreading the
        // initial sampling points around the reference box, one direction per
        // head, growing radius per point.
        let mut b_offset = Tensor::zeros(&[mk * 2]);
        for m in 0..cfg.n_heads {
            let theta = std::f64::consts::TAU * m as f64 / cfg.n_heads as f64;
            for k in 0..cfg.n_points {
                let r = (k + 1) as f64 / cfg.n_points as f64;
                b_offset.data_mut()[(m * cfg.n_points + k) * 2] = theta.cos() * r;
                b_offset.data_mut()[(m * cfg.n_points + k) * 2 + 1] = theta.sin() * r;
            }
        }
        DeformParams {
            w_offset: Parameter::new(format!("{prefix}.w_offset"), Tensor::zeros(&[d, mk * 2])),
            b_offset: Parameter::new(format!("{prefix}.b_offset"), b_offset),
            w_weight: Parameter::new(format!("{prefix}.w_weight"), Tensor::zeros(&[d, mk])),
            b_weight: Parameter::new(format!("{prefix}.b_weight"), Tensor::zeros(&[mk])),
            w_value: Parameter::new(format!("{prefix}.w_value"), Tensor::randn(&[d, d], 0.02, rng)),
            w_out: Parameter::new(format!("{prefix}.w_out"), Tensor::randn(&[d, d], 0.02, rng)),
            b_out: Parameter::new(format!("{prefix}.b_out"), Tensor::zeros(&[d])),
        }
    }

    pub fn bind(&self, tape: &Tape) -> DeformVars {
        DeformVars {
            w_offset: tape.param(&self.w_offset),
            b_offset: tape.param(&self.b_offset),
            w_weight: tape.param(&self.w_weight),
            b_weight: tape.param(&self.b_weight),
            w_value: tape.param(&self.w_value),
            w_out: tape.param(&self.w_out),
            b_out: tape.param(&self.b_out),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.w_offset,
            &self.b_offset,
            &self.w_weight,
            &self.b_weight,
            &self.w_value,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.w_offset,
            &mut self.b_offset,
            &mut self.w_weight,
            &mut self.b_weight,
            &mut self.w_value,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

/// Output of [`deform_attn`]: result rows plus per-head normalized sampling
/// weights (each row sums to one).
pub struct DeformAttnOutput {
    pub out: Var,
    pub attn_weights: Vec<Var>,
}

/// Single-scale deformable attention over one feature map.
///
/// `z_q` is `[n_q, dim]` query content, `refs` the per-query reference boxes
/// in normalized coordinates. Sampling points for head m, point k are
/// `(cx + dx * w/2, cy + dy * h/2)` converted to grid coordinates.
pub fn deform_attn(
    z_q: &Var,
    refs: &[BBox],
    map: &FeatureMap2D,
    w: &DeformVars,
    cfg: &DeformAttnConfig,
) -> DeformAttnOutput {
    cfg.validate().expect("invalid deformable attention config");
    let n_q = z_q.shape()[0];
    assert!(
        refs.len() == n_q,
        "deform_attn got {} reference boxes for {} queries",
        refs.len(),
        n_q
    );
    assert!(
        z_q.shape()[1] == cfg.model_dim && map.channels() == cfg.model_dim,
        "deform_attn dims: queries {:?}, map {} channels, config {}",
        z_q.shape(),
        map.channels(),
        cfg.model_dim
    );
    let tape = z_q.tape();
    let (m_heads, k_pts, dh) = (cfg.n_heads, cfg.n_points, cfg.head_dim());
    let (gw, gh) = (map.width as f64, map.height as f64);

    let offsets = z_q.matmul(&w.w_offset).add_bias(&w.b_offset);
    let weight_logits = z_q.matmul(&w.w_weight).add_bias(&w.b_weight);

    let col = |vals: Vec<f64>| tape.constant(Tensor::new(&[n_q, 1], vals));
    let cx = col(refs.iter().map(|b| b.cx).collect());
    let cy = col(refs.iter().map(|b| b.cy).collect());
    let half_w = col(refs.iter().map(|b| b.w * 0.5).collect());
    let half_h = col(refs.iter().map(|b| b.h * 0.5).collect());

    let mut head_outs = Vec::with_capacity(m_heads);
    let mut attn_weights = Vec::with_capacity(m_heads);
    for m in 0..m_heads {
        // Sampling points, one [n_q, 2] block per point, stacked k-major.
        let mut point_blocks = Vec::with_capacity(k_pts);
        for k in 0..k_pts {
            let base = (m * k_pts + k) * 2;
            let dx = offsets.slice_cols(base, base + 1);
            let dy = offsets.slice_cols(base + 1, base + 2);
            let px = cx.add(&dx.mul(&half_w)).scale(gw).add_scalar(-0.5);
            let py = cy.add(&dy.mul(&half_h)).scale(gh).add_scalar(-0.5);
            point_blocks.push(Var::concat_cols(&[&px, &py]));
        }
        let block_refs: Vec<&Var> = point_blocks.iter().collect();
        let points = Var::concat_rows(&block_refs);
        let sampled = map.tokens.bilinear_sample(&points, map.height, map.width);
        let w_val_h = w.w_value.slice_cols(m * dh, (m + 1) * dh);
        let values = sampled.matmul(&w_val_h);
        let a_m = weight_logits
            .slice_cols(m * k_pts, (m + 1) * k_pts)
            .softmax_last(None);
        head_outs.push(Var::weighted_block_sum(&values, &a_m));
        attn_weights.push(a_m);
    }
    let head_refs: Vec<&Var> = head_outs.iter().collect();
    let merged = Var::concat_cols(&head_refs);
    let out = merged.matmul(&w.w_out).add_bias(&w.b_out);
    DeformAttnOutput { out, attn_weights }
}
