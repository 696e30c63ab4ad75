//! Standard multi-head attention and its variants: linear (no softmax),
//! hard (uniform over the argmax set), causal and sliding-window masking,
//! and rotary positions.

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{self, Mask, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Softmax,
    /// No softmax at all; scores are used as attention weights directly.
    Linear,
    /// Zero-temperature softmax: uniform over the row's argmax set.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    None,
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    None,
    Rotary { theta: f64 },
}

/// Shape and mode parameters for one attention evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Sequence length in original tokens.
    pub seq_len: usize,
    /// Model dimension D = H * d.
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Pseudo-heads per head; 1 for plain MHA.
    pub pseudo: usize,
    pub score_mode: ScoreMode,
    pub mask_mode: MaskMode,
    /// Sliding window measured in original tokens; converted to virtual
    /// tokens (window * P) internally.
    pub window: Option<usize>,
    pub positional: Positional,
}

impl AttentionConfig {
    pub fn plain_mha(seq_len: usize, heads: usize, head_dim: usize) -> Self {
        AttentionConfig {
            seq_len,
            d_model: heads * head_dim,
            heads,
            head_dim,
            pseudo: 1,
            score_mode: ScoreMode::Softmax,
            mask_mode: MaskMode::None,
            window: None,
            positional: Positional::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.heads * self.head_dim {
            return Err(Error::InvalidConfig(format!(
                "d_model {} != heads {} * head_dim {}",
                self.d_model, self.heads, self.head_dim
            )));
        }
        if self.pseudo == 0 {
            return Err(Error::InvalidConfig("pseudo-head count must be >= 1".into()));
        }
        if let Some(w) = self.window {
            if w == 0 || w > self.seq_len {
                return Err(Error::InvalidConfig(format!(
                    "window {} outside 1..={}",
                    w, self.seq_len
                )));
            }
        }
        if let Positional::Rotary { theta } = self.positional {
            if theta <= 0.0 {
                return Err(Error::InvalidConfig("rotary theta must be > 0".into()));
            }
            if self.head_dim % 2 != 0 {
                return Err(Error::InvalidConfig(
                    "rotary positions require an even head dimension".into(),
                ));
            }
        }
        Ok(())
    }

    /// Attention mask over a virtual sequence of length `l`, at virtual-token
    /// granularity. Returns None when nothing is masked.
    pub fn virtual_mask(&self, l: usize) -> Result<Option<Mask>> {
        let causal = self.mask_mode == MaskMode::Causal;
        match (causal, self.window) {
            (false, None) => Ok(None),
            (causal, window) => {
                let wv = window.map(|w| w * self.pseudo).unwrap_or(l.max(1));
                Ok(Some(sliding_window_mask(l, l, wv, causal)?))
            }
        }
    }
}

/// Per-head projection bank. For plain MHA every matrix is D x d; the exact
/// theorem constructions use rectangular banks (query/key width differs from
/// value width), which this type permits.
#[derive(Debug, Clone)]
pub struct HeadBank {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
}

impl HeadBank {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.wq.len();
        if h == 0 || self.wk.len() != h || self.wv.len() != h {
            return Err(Error::InvalidConfig(format!(
                "head bank with {} query, {} key, {} value matrices",
                self.wq.len(),
                self.wk.len(),
                self.wv.len()
            )));
        }
        let qshape = self.wq[0].shape().to_vec();
        let vshape = self.wv[0].shape().to_vec();
        for m in 0..h {
            if self.wq[m].shape() != qshape.as_slice() || self.wk[m].shape() != qshape.as_slice() {
                return Err(Error::shape("head bank q/k", &qshape, self.wq[m].shape()));
            }
            if self.wv[m].shape() != vshape.as_slice() {
                return Err(Error::shape("head bank v", &vshape, self.wv[m].shape()));
            }
        }
        if qshape[0] != vshape[0] {
            return Err(Error::shape("head bank input dims", &qshape, &vshape));
        }
        Ok(())
    }

    /// Total number of stored weights.
    pub fn entry_count(&self) -> usize {
        self.wq.iter().map(Tensor::numel).sum::<usize>()
            + self.wk.iter().map(Tensor::numel).sum::<usize>()
            + self.wv.iter().map(Tensor::numel).sum::<usize>()
    }
}

/// Plain MHA parameters: H per-head D x d projections plus the D x D output
/// projection.
#[derive(Debug, Clone)]
pub struct MhaParams {
    pub heads: HeadBank,
    pub wo: Tensor,
}

impl MhaParams {
    pub fn random(heads: usize, d_model: usize, head_dim: usize, rng: &mut CounterRng) -> Self {
        let scale = 1.0 / (d_model as f64).sqrt();
        let mut mat = |r: usize, c: usize, rng: &mut CounterRng| {
            Tensor::from_fn(&[r, c], |_| rng.normal() * scale)
        };
        let wq = (0..heads).map(|_| mat(d_model, head_dim, rng)).collect();
        let wk = (0..heads).map(|_| mat(d_model, head_dim, rng)).collect();
        let wv = (0..heads).map(|_| mat(d_model, head_dim, rng)).collect();
        let wo = mat(d_model, d_model, rng);
        MhaParams {
            heads: HeadBank { wq, wk, wv },
            wo,
        }
    }

    pub fn validate(&self, d_model: usize, head_dim: usize) -> Result<()> {
        self.heads.validate()?;
        for m in 0..self.heads.heads() {
            if self.heads.wq[m].shape() != [d_model, head_dim] {
                return Err(Error::shape(
                    "mha projection",
                    &[d_model, head_dim],
                    self.heads.wq[m].shape(),
                ));
            }
        }
        if self.wo.shape() != [d_model, d_model] {
            return Err(Error::shape("mha output projection", &[d_model, d_model], self.wo.shape()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.heads.entry_count() + self.wo.numel()
    }
}

/// Row-wise hard attention: the zero-temperature softmax limit. Each row is
/// the uniform distribution over its unmasked argmax set, so exact ties share
/// the mass equally.
pub fn hard_attention_rows(s: &Tensor, mask: Option<&Mask>) -> Result<Tensor> {
    if s.shape().len() != 2 {
        return Err(Error::InvalidShape {
            shape: s.shape().to_vec(),
            reason: "hard_attention_rows expects a 2-D tensor".into(),
        });
    }
    let (m, n) = (s.rows(), s.cols());
    if let Some(mk) = mask {
        if mk.rows != m || mk.cols != n {
            return Err(Error::shape("hard attention mask", s.shape(), &[mk.rows, mk.cols]));
        }
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let vis = |j: usize| mask.map_or(true, |mk| mk.visible(i, j));
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if vis(j) {
                max = max.max(s.at(&[i, j]));
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let ties: Vec<usize> = (0..n).filter(|&j| vis(j) && s.at(&[i, j]) == max).collect();
        let w = 1.0 / ties.len() as f64;
        for j in ties {
            out.set(&[i, j], w);
        }
    }
    Ok(out)
}

/// The linear-attention score factor X_hat Wq Wk^T X_hat^T, exactly as the
/// polynomial-filter constructions use it (no softmax, no scaling).
pub fn linear_attention_matrix(x_hat: &Tensor, wq: &Tensor, wk: &Tensor) -> Result<Tensor> {
    let q = tensor::matmul(x_hat, wq)?;
    let k = tensor::matmul(x_hat, wk)?;
    tensor::matmul(&q, &k.transpose()?)
}

/// Rotary rotation at arbitrary (possibly fractional or negative) positions.
/// Pair j of a d-dimensional row is rotated by angle position * theta^(-2j/d).
pub fn rotary_with_positions(t: &Tensor, theta: f64, positions: &[f64]) -> Result<Tensor> {
    if t.shape().len() != 2 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "rotary expects a 2-D tensor".into(),
        });
    }
    let (l, d) = (t.rows(), t.cols());
    if d % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "rotary requires an even dimension, got {d}"
        )));
    }
    if positions.len() != l {
        return Err(Error::shape("rotary positions", t.shape(), &[positions.len()]));
    }
    let mut out = Tensor::zeros(&[l, d]);
    for i in 0..l {
        for j in 0..d / 2 {
            let freq = theta.powf(-2.0 * j as f64 / d as f64);
            let angle = positions[i] * freq;
            let (sin, cos) = angle.sin_cos();
            let a = t.at(&[i, 2 * j]);
            let b = t.at(&[i, 2 * j + 1]);
            out.set(&[i, 2 * j], cos * a - sin * b);
            out.set(&[i, 2 * j + 1], sin * a + cos * b);
        }
    }
    Ok(out)
}

/// Rotary rotation at integer token positions, applied identically to queries
/// and keys.
pub fn rotary_positions(t: &Tensor, theta: f64, positions: &[usize]) -> Result<Tensor> {
    let pf: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
    rotary_with_positions(t, theta, &pf)
}

/// Visibility mask for sliding-window attention over virtual tokens:
/// (i, j) is visible iff j <= i (when causal) and i - j < window.
pub fn sliding_window_mask(lq: usize, lk: usize, window_virtual: usize, causal: bool) -> Result<Mask> {
    if window_virtual == 0 {
        return Err(Error::InvalidConfig("window must be >= 1".into()));
    }
    Ok(Mask::from_fn(lq, lk, |i, j| {
        (!causal || j <= i) && (i as i64 - j as i64) < window_virtual as i64
    }))
}

/// Turn raw scores into attention weights under the given mode.
pub fn attention_weights(scores: &Tensor, mode: ScoreMode, mask: Option<&Mask>) -> Result<Tensor> {
    match mode {
        ScoreMode::Softmax => tensor::softmax_rows(scores, mask),
        ScoreMode::Hard => hard_attention_rows(scores, mask),
        ScoreMode::Linear => match mask {
            None => Ok(scores.clone()),
            Some(mk) => Ok(Tensor::from_fn(scores.shape(), |ix| {
                if mk.visible(ix[0], ix[1]) {
                    scores.at(ix)
                } else {
                    0.0
                }
            })),
        },
    }
}

/// One head of attention over already-projected q/k/v. Scores are scaled by
/// 1/sqrt(d_qk) in softmax and hard modes and left unscaled in linear mode,
/// so the linear-attention theorem constructions hold with exact equality.
pub fn head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mode: ScoreMode,
    mask: Option<&Mask>,
) -> Result<Tensor> {
    let scores = tensor::matmul(q, &k.transpose()?)?;
    let scores = match mode {
        ScoreMode::Linear => scores,
        _ => scores.scale(1.0 / (q.cols() as f64).sqrt()),
    };
    let weights = attention_weights(&scores, mode, mask)?;
    tensor::matmul(&weights, v)
}

/// Per-head attention outputs for a bank over input x (no output projection).
pub fn bank_attend(
    x: &Tensor,
    bank: &HeadBank,
    mode: ScoreMode,
    mask: Option<&Mask>,
    positional: Positional,
) -> Result<Vec<Tensor>> {
    bank.validate()?;
    let l = x.rows();
    let positions: Vec<usize> = (0..l).collect();
    let mut outs = Vec::with_capacity(bank.heads());
    for h in 0..bank.heads() {
        let mut q = tensor::matmul(x, &bank.wq[h])?;
        let mut k = tensor::matmul(x, &bank.wk[h])?;
        if let Positional::Rotary { theta } = positional {
            q = rotary_positions(&q, theta, &positions)?;
            k = rotary_positions(&k, theta, &positions)?;
        }
        let v = tensor::matmul(x, &bank.wv[h])?;
        outs.push(head_attention(&q, &k, &v, mode, mask)?);
    }
    Ok(outs)
}

/// Standard multi-head attention forward pass.
pub fn mha_forward(x: &Tensor, params: &MhaParams, cfg: &AttentionConfig) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.pseudo != 1 {
        return Err(Error::InvalidConfig(
            "mha_forward requires pseudo == 1; use iha_forward for P > 1".into(),
        ));
    }
    if x.shape() != [cfg.seq_len, cfg.d_model] {
        return Err(Error::shape("mha input", &[cfg.seq_len, cfg.d_model], x.shape()));
    }
    params.validate(cfg.d_model, cfg.head_dim)?;
    let mask = cfg.virtual_mask(cfg.seq_len)?;
    let outs = bank_attend(x, &params.heads, cfg.score_mode, mask.as_ref(), cfg.positional)?;
    let refs: Vec<&Tensor> = outs.iter().collect();
    let concat = Tensor::concat_cols(&refs)?;
    tensor::matmul(&concat, &params.wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;

    fn rng(seed: u64) -> CounterRng {
        CounterRng::new(seed)
    }

    fn random_tensor(r: &mut CounterRng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| r.symmetric())
    }

    /// Fully-unrolled scalar reference MHA: explicit loops, softmax by hand.
    fn mha_scalar_oracle(x: &Tensor, params: &MhaParams, heads: usize, d: usize) -> Tensor {
        let n = x.rows();
        let dm = x.cols();
        let mut concat = Tensor::zeros(&[n, heads * d]);
        for h in 0..heads {
            let proj = |w: &Tensor, i: usize, c: usize| -> f64 {
                (0..dm).map(|t| x.at(&[i, t]) * w.at(&[t, c])).sum()
            };
            for i in 0..n {
                // scores for query i
                let mut scores = vec![0.0; n];
                for j in 0..n {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += proj(&params.heads.wq[h], i, c) * proj(&params.heads.wk[h], j, c);
                    }
                    scores[j] = s / (d as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..d {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += exps[j] / z * proj(&params.heads.wv[h], j, c);
                    }
                    concat.set(&[i, h * d + c], acc);
                }
            }
        }
        matmul(&concat, &params.wo).unwrap()
    }

    #[test]
    fn single_token_softmax_is_identity_weighting() {
        let mut r = rng(1);
        let (h, d) = (2, 3);
        let params = MhaParams::random(h, h * d, d, &mut r);
        let cfg = AttentionConfig::plain_mha(1, h, d);
        let x = random_tensor(&mut r, &[1, h * d]);
        let got = mha_forward(&x, &params, &cfg).unwrap();
        // With one key the attention weight is 1, so output = [xWv] Wo.
        let vs: Vec<Tensor> = (0..h)
            .map(|m| matmul(&x, &params.heads.wv[m]).unwrap())
            .collect();
        let refs: Vec<&Tensor> = vs.iter().collect();
        let want = matmul(&Tensor::concat_cols(&refs).unwrap(), &params.wo).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn repeated_token_head_outputs_reduce_to_value_projection() {
        let mut r = rng(2);
        let (h, d, n) = (2, 2, 5);
        let params = MhaParams::random(h, h * d, d, &mut r);
        let xvec = random_tensor(&mut r, &[1, h * d]);
        let x = Tensor::from_fn(&[n, h * d], |ix| xvec.at(&[0, ix[1]]));
        let outs = bank_attend(&x, &params.heads, ScoreMode::Softmax, None, Positional::None).unwrap();
        for m in 0..h {
            let want_row = matmul(&xvec, &params.heads.wv[m]).unwrap();
            let want = Tensor::from_fn(&[n, d], |ix| want_row.at(&[0, ix[1]]));
            assert!(outs[m].max_abs_diff(&want).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn mha_matches_scalar_loop_oracle() {
        let mut r = rng(3);
        let (h, d, n) = (2, 2, 3);
        let params = MhaParams::random(h, h * d, d, &mut r);
        let cfg = AttentionConfig::plain_mha(n, h, d);
        let x = random_tensor(&mut r, &[n, h * d]);
        let got = mha_forward(&x, &params, &cfg).unwrap();
        let want = mha_scalar_oracle(&x, &params, h, d);
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn softmax_outputs_are_convex_combinations_of_values() {
        let mut r = rng(4);
        let (h, d, n) = (2, 3, 6);
        let params = MhaParams::random(h, h * d, d, &mut r);
        let x = random_tensor(&mut r, &[n, h * d]);
        let outs = bank_attend(&x, &params.heads, ScoreMode::Softmax, None, Positional::None).unwrap();
        for m in 0..h {
            let v = matmul(&x, &params.heads.wv[m]).unwrap();
            for i in 0..n {
                for c in 0..d {
                    let col: Vec<f64> = (0..n).map(|j| v.at(&[j, c])).collect();
                    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-12;
                    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-12;
                    let o = outs[m].at(&[i, c]);
                    assert!(o >= lo && o <= hi, "head {m} out[{i},{c}]={o} outside [{lo},{hi}]");
                }
            }
        }
    }

    #[test]
    fn linear_attention_recovers_adjacency_powers() {
        let mut r = rng(5);
        let (n, d) = (4, 2);
        let a = random_tensor(&mut r, &[n, n]);
        let x = random_tensor(&mut r, &[n, d]);
        let x_hat = Tensor::concat_cols(&[&x, &Tensor::eye(n)]).unwrap();
        // Wq = [0_{d x n}; A^i], Wk = [0_{d x n}; I]
        let a2 = matmul(&a, &a).unwrap();
        let wq = stack_below(&Tensor::zeros(&[d, n]), &a2);
        let wk = stack_below(&Tensor::zeros(&[d, n]), &Tensor::eye(n));
        let got = linear_attention_matrix(&x_hat, &wq, &wk).unwrap();
        assert!(got.max_abs_diff(&a2).unwrap() <= 1e-12);

        // A = I gives I for any power.
        let wq_i = stack_below(&Tensor::zeros(&[d, n]), &Tensor::eye(n));
        let got_i = linear_attention_matrix(&x_hat, &wq_i, &wk).unwrap();
        assert!(got_i.max_abs_diff(&Tensor::eye(n)).unwrap() <= 1e-12);
    }

    fn stack_below(top: &Tensor, bottom: &Tensor) -> Tensor {
        let cols = top.cols();
        let rows = top.rows() + bottom.rows();
        Tensor::from_fn(&[rows, cols], |ix| {
            if ix[0] < top.rows() {
                top.at(ix)
            } else {
                bottom.at(&[ix[0] - top.rows(), ix[1]])
            }
        })
    }

    #[test]
    fn hard_attention_splits_ties_uniformly() {
        let s = Tensor::from_rows(&[vec![1.0, 0.0, 1.0, 0.0]]).unwrap();
        let w = hard_attention_rows(&s, None).unwrap();
        assert_eq!(w.data(), &[0.5, 0.0, 0.5, 0.0]);

        let s = Tensor::from_rows(&[vec![5.0, 1.0, 1.0]]).unwrap();
        let w = hard_attention_rows(&s, None).unwrap();
        assert_eq!(w.data(), &[1.0, 0.0, 0.0]);

        let s = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let w = hard_attention_rows(&s, None).unwrap();
        assert_eq!(w.data(), &[0.5, 0.5]);
    }

    #[test]
    fn hard_attention_fully_masked_row_errors() {
        let s = Tensor::zeros(&[1, 2]);
        let mask = Mask::from_fn(1, 2, |_, _| false);
        assert!(matches!(
            hard_attention_rows(&s, Some(&mask)).unwrap_err(),
            Error::DegenerateRow { row: 0 }
        ));
    }

    #[test]
    fn rotary_at_position_zero_is_identity() {
        let mut r = rng(6);
        let t = random_tensor(&mut r, &[3, 4]);
        let got = rotary_positions(&t, 10_000.0, &[0, 0, 0]).unwrap();
        assert!(got.max_abs_diff(&t).unwrap() <= 1e-15);
    }

    #[test]
    fn rotary_two_dim_quarter_turn() {
        // d=2, theta=1: angle equals the position itself.
        let t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let got = rotary_with_positions(&t, 1.0, &[std::f64::consts::FRAC_PI_2]).unwrap();
        assert!((got.at(&[0, 0]) - 0.0).abs() <= 1e-12);
        assert!((got.at(&[0, 1]) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rotary_inner_products_depend_only_on_position_difference() {
        let mut r = rng(7);
        let q = random_tensor(&mut r, &[1, 8]);
        let k = random_tensor(&mut r, &[1, 8]);
        let theta = 500_000.0;
        let dot = |a: &Tensor, b: &Tensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        let base = dot(
            &rotary_positions(&q, theta, &[11]).unwrap(),
            &rotary_positions(&k, theta, &[4]).unwrap(),
        );
        for shift in [1usize, 9, 100] {
            let moved = dot(
                &rotary_positions(&q, theta, &[11 + shift]).unwrap(),
                &rotary_positions(&k, theta, &[4 + shift]).unwrap(),
            );
            assert!((base - moved).abs() <= 1e-10);
        }
    }

    #[test]
    fn rotary_rejects_odd_dimension() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(rotary_positions(&t, 10.0, &[0, 1]).is_err());
    }

    #[test]
    fn window_masks_match_their_definitions() {
        // Full window, causal: lower triangular.
        let m = sliding_window_mask(4, 4, 4, true).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.visible(i, j), j <= i);
            }
        }
        // Window 1, causal: the diagonal.
        let m = sliding_window_mask(4, 4, 1, true).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.visible(i, j), i == j);
            }
        }
        // Window 2, causal: j in {i-1, i}.
        let m = sliding_window_mask(4, 4, 2, true).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = j <= i && i - j < 2;
                assert_eq!(m.visible(i, j), want);
            }
        }
        assert!(sliding_window_mask(2, 2, 0, true).is_err());
    }

    #[test]
    fn causal_mask_keeps_self_position_visible() {
        let cfg = AttentionConfig {
            mask_mode: MaskMode::Causal,
            window: Some(1),
            ..AttentionConfig::plain_mha(5, 1, 2)
        };
        let mask = cfg.virtual_mask(5).unwrap().unwrap();
        for i in 0..5 {
            assert!(mask.visible(i, i));
        }
    }

    #[test]
    fn mha_is_linear_on_repeated_token_subspace() {
        let mut r = rng(8);
        let (h, d, n) = (2, 2, 4);
        let params = MhaParams::random(h, h * d, d, &mut r);
        let cfg = AttentionConfig::plain_mha(n, h, d);
        let x1 = random_tensor(&mut r, &[1, h * d]);
        let x2 = random_tensor(&mut r, &[1, h * d]);
        let lift = |v: &Tensor| Tensor::from_fn(&[n, h * d], |ix| v.at(&[0, ix[1]]));
        let f1 = mha_forward(&lift(&x1), &params, &cfg).unwrap();
        let f2 = mha_forward(&lift(&x2), &params, &cfg).unwrap();
        let fsum = mha_forward(&lift(&x1.add(&x2).unwrap()), &params, &cfg).unwrap();
        let superposition = f1.add(&f2).unwrap();
        assert!(fsum.max_abs_diff(&superposition).unwrap() <= 1e-9);
    }

    #[test]
    fn config_invariants_enforced() {
        let mut cfg = AttentionConfig::plain_mha(4, 2, 2);
        cfg.d_model = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = AttentionConfig::plain_mha(4, 2, 2);
        cfg.window = Some(9);
        assert!(cfg.validate().is_err());
        let mut cfg = AttentionConfig::plain_mha(4, 2, 3);
        cfg.positional = Positional::Rotary { theta: 10.0 };
        assert!(cfg.validate().is_err(), "odd head_dim with rotary");
    }
}
