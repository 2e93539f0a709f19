use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::attention::{AttentionCache, MultiHeadAttention};
use super::tensor::gemm;
use super::{Grads, NnError, PaddingMask, ParamId, ParamStore, Tensor2};
use crate::math;

fn check_cols(op: &'static str, x: &Tensor2, cols: usize) -> Result<(), NnError> {
    if x.cols() != cols {
        return Err(NnError::Shape {
            op,
            left: x.shape(),
            right: (x.rows(), cols),
        });
    }
    Ok(())
}

fn add_col_sums(g: &mut Tensor2, dy: &Tensor2, rows: usize) {
    let gb = g.data_mut();
    for r in 0..rows {
        for (a, b) in gb.iter_mut().zip(dy.row(r)) {
            *a += b;
        }
    }
}

/// `y = x W + b` with `W: in × out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let w = ps.add_weight(alloc::format!("{name}.w"), in_dim, in_dim, out_dim, rng);
        let b = ps.add_zeros(alloc::format!("{name}.b"), 1, out_dim);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor2) -> Result<Tensor2, NnError> {
        check_cols("linear", x, self.in_dim)?;
        let b = ps.get(self.b);
        let mut y = Tensor2::zeros(x.rows(), self.out_dim);
        for r in 0..x.rows() {
            y.row_mut(r).copy_from_slice(b.data());
        }
        gemm(1.0, x, false, ps.get(self.w), false, 1.0, &mut y);
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, ps: &ParamStore, x: &Tensor2, dy: &Tensor2, g: &mut Grads) -> Tensor2 {
        gemm(1.0, x, true, dy, false, 1.0, g.get_mut(self.w));
        add_col_sums(g.get_mut(self.b), dy, dy.rows());
        let mut dx = Tensor2::zeros(x.rows(), self.in_dim);
        gemm(1.0, dy, false, ps.get(self.w), true, 0.0, &mut dx);
        dx
    }

    /// Parameter gradients only.
    pub fn backward_params(&self, x: &Tensor2, dy: &Tensor2, g: &mut Grads) {
        gemm(1.0, x, true, dy, false, 1.0, g.get_mut(self.w));
        add_col_sums(g.get_mut(self.b), dy, dy.rows());
    }
}

/// Kernel-3 convolution over the sequence axis with same padding.
///
/// With stride 2 the output has `ceil(len / 2)` rows and output `t` is centred
/// on input `2t`. Inputs at or beyond the valid length read as zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv1d {
    /// `(3 · in) × out`, tap-major.
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct Conv1dCache {
    col: Tensor2,
    in_rows: usize,
    in_mask: PaddingMask,
    out_mask: PaddingMask,
}

const KERNEL: usize = 3;

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let w = ps.add_weight(alloc::format!("{name}.w"), KERNEL * in_dim, KERNEL * in_dim, out_dim, rng);
        let b = ps.add_zeros(alloc::format!("{name}.b"), 1, out_dim);
        Self {
            w,
            b,
            in_dim,
            out_dim,
            stride,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        len.div_ceil(self.stride)
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor2, mask: PaddingMask) -> Result<(Tensor2, Conv1dCache), NnError> {
        check_cols("conv1d", x, self.in_dim)?;
        let out_rows = self.out_len(x.rows());
        let out_mask = mask.strided(self.stride);
        let valid_in = mask.valid_len.min(x.rows());
        let mut col = Tensor2::zeros(out_rows, KERNEL * self.in_dim);
        for t in 0..out_mask.valid_len.min(out_rows) {
            let row = col.row_mut(t);
            for k in 0..KERNEL {
                let src = (self.stride * t + k) as isize - 1;
                if src >= 0 && (src as usize) < valid_in {
                    row[k * self.in_dim..(k + 1) * self.in_dim].copy_from_slice(x.row(src as usize));
                }
            }
        }
        let mut y = Tensor2::zeros(out_rows, self.out_dim);
        let b = ps.get(self.b);
        for r in 0..out_mask.valid_len.min(out_rows) {
            y.row_mut(r).copy_from_slice(b.data());
        }
        gemm(1.0, &col, false, ps.get(self.w), false, 1.0, &mut y);
        out_mask.apply(&mut y);
        Ok((
            y,
            Conv1dCache {
                col,
                in_rows: x.rows(),
                in_mask: mask,
                out_mask,
            },
        ))
    }

    pub fn backward(&self, ps: &ParamStore, cache: &Conv1dCache, dy: &Tensor2, g: &mut Grads) -> Tensor2 {
        let mut dy = dy.clone();
        cache.out_mask.apply(&mut dy);
        gemm(1.0, &cache.col, true, &dy, false, 1.0, g.get_mut(self.w));
        add_col_sums(g.get_mut(self.b), &dy, cache.out_mask.valid_len.min(dy.rows()));
        let mut dcol = Tensor2::zeros(dy.rows(), KERNEL * self.in_dim);
        gemm(1.0, &dy, false, ps.get(self.w), true, 0.0, &mut dcol);
        let valid_in = cache.in_mask.valid_len.min(cache.in_rows);
        let mut dx = Tensor2::zeros(cache.in_rows, self.in_dim);
        for t in 0..dy.rows() {
            for k in 0..KERNEL {
                let src = (self.stride * t + k) as isize - 1;
                if src >= 0 && (src as usize) < valid_in {
                    let d = &dcol.row(t)[k * self.in_dim..(k + 1) * self.in_dim];
                    for (a, b) in dx.row_mut(src as usize).iter_mut().zip(d) {
                        *a += b;
                    }
                }
            }
        }
        dx
    }
}

const LN_EPS: f64 = 1e-5;

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor2,
    inv_std: Vec<f64>,
    mask: PaddingMask,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = ps.add_filled(alloc::format!("{name}.gamma"), 1, dim, 1.0);
        let beta = ps.add_zeros(alloc::format!("{name}.beta"), 1, dim);
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor2, mask: PaddingMask) -> Result<(Tensor2, LayerNormCache), NnError> {
        check_cols("layer_norm", x, self.dim)?;
        let gamma = ps.get(self.gamma).data();
        let beta = ps.get(self.beta).data();
        let valid = mask.valid_len.min(x.rows());
        let mut xhat = Tensor2::zeros(x.rows(), self.dim);
        let mut y = Tensor2::zeros(x.rows(), self.dim);
        let mut inv_std = vec![0.0; x.rows()];
        let n = self.dim as f64;
        for r in 0..valid {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / math::sqrt(var + LN_EPS);
            inv_std[r] = is;
            let xh = xhat.row_mut(r);
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let xh = xhat.row(r).to_vec();
            for (c, o) in y.row_mut(r).iter_mut().enumerate() {
                *o = gamma[c] * xh[c] + beta[c];
            }
        }
        Ok((y, LayerNormCache { xhat, inv_std, mask }))
    }

    pub fn backward(&self, ps: &ParamStore, cache: &LayerNormCache, dy: &Tensor2, g: &mut Grads) -> Tensor2 {
        let gamma = ps.get(self.gamma).data().to_vec();
        let valid = cache.mask.valid_len.min(dy.rows());
        let n = self.dim as f64;
        let mut dx = Tensor2::zeros(dy.rows(), self.dim);
        let mut dgamma = vec![0.0; self.dim];
        let mut dbeta = vec![0.0; self.dim];
        let mut dxhat = vec![0.0; self.dim];
        for r in 0..valid {
            let xh = cache.xhat.row(r);
            let d = dy.row(r);
            for c in 0..self.dim {
                dgamma[c] += d[c] * xh[c];
                dbeta[c] += d[c];
                dxhat[c] = d[c] * gamma[c];
            }
            let mean_d = dxhat.iter().sum::<f64>() / n;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
            let is = cache.inv_std[r];
            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
            }
        }
        for (a, b) in g.get_mut(self.gamma).data_mut().iter_mut().zip(&dgamma) {
            *a += b;
        }
        for (a, b) in g.get_mut(self.beta).data_mut().iter_mut().zip(&dbeta) {
            *a += b;
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + math::tanh(u))
}

/// `d gelu / dx`.
pub fn gelu_backward(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = math::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    x: Tensor2,
    pre: Tensor2,
    act: Tensor2,
    mask: PaddingMask,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(ps, &alloc::format!("{name}.fc1"), dim, hidden, rng),
            l2: Linear::new(ps, &alloc::format!("{name}.fc2"), hidden, out, rng),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor2, mask: PaddingMask) -> Result<(Tensor2, FeedForwardCache), NnError> {
        let pre = self.l1.forward(ps, x)?;
        let act = pre.map(gelu);
        let mut y = self.l2.forward(ps, &act)?;
        mask.apply(&mut y);
        Ok((
            y,
            FeedForwardCache {
                x: x.clone(),
                pre,
                act,
                mask,
            },
        ))
    }

    pub fn backward(&self, ps: &ParamStore, cache: &FeedForwardCache, dy: &Tensor2, g: &mut Grads) -> Tensor2 {
        let mut dy = dy.clone();
        cache.mask.apply(&mut dy);
        let mut dact = self.l2.backward(ps, &cache.act, &dy, g);
        for (d, p) in dact.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= gelu_backward(*p);
        }
        self.l1.backward(ps, &cache.x, &dact, g)
    }
}

/// Lookup table of `vocab × dim` rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, vocab: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let table = ps.add_normal(alloc::format!("{name}.table"), vocab, dim, std, rng);
        Self { table, vocab, dim }
    }

    /// Rows for `ids`; fails on an id outside the table.
    pub fn forward(&self, ps: &ParamStore, ids: &[usize]) -> Result<Tensor2, NnError> {
        let table = ps.get(self.table);
        let mut y = Tensor2::zeros(ids.len(), self.dim);
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.vocab {
                return Err(NnError::Shape {
                    op: "embedding lookup",
                    left: (id, 1),
                    right: (self.vocab, self.dim),
                });
            }
            y.row_mut(r).copy_from_slice(table.row(id));
        }
        Ok(y)
    }

    pub fn backward(&self, ids: &[usize], dy: &Tensor2, g: &mut Grads) {
        let gt = g.get_mut(self.table);
        for (r, &id) in ids.iter().enumerate() {
            for (a, b) in gt.row_mut(id).iter_mut().zip(dy.row(r)) {
                *a += b;
            }
        }
    }
}

/// Mean of the valid rows as a `1 × dim` tensor.
pub fn mean_pool(x: &Tensor2, mask: PaddingMask) -> Tensor2 {
    let valid = mask.valid_len.min(x.rows());
    let mut y = Tensor2::zeros(1, x.cols());
    if valid == 0 {
        return y;
    }
    for r in 0..valid {
        for (a, b) in y.data_mut().iter_mut().zip(x.row(r)) {
            *a += b;
        }
    }
    y.scale(1.0 / valid as f64);
    y
}

pub fn mean_pool_backward(dy: &Tensor2, rows: usize, mask: PaddingMask) -> Tensor2 {
    let valid = mask.valid_len.min(rows);
    let mut dx = Tensor2::zeros(rows, dy.cols());
    if valid == 0 {
        return dx;
    }
    let s = 1.0 / valid as f64;
    for r in 0..valid {
        for (a, b) in dx.row_mut(r).iter_mut().zip(dy.data()) {
            *a = b * s;
        }
    }
    dx
}

/// Fixed sine/cosine position table: even columns `sin`, odd columns `cos`.
pub fn sinusoidal_position_encoding(len: usize, dim: usize) -> Tensor2 {
    Tensor2::from_fn(len, dim, |pos, c| {
        let i = (c / 2) as f64;
        let angle = pos as f64 / math::powf(10_000.0, 2.0 * i / dim as f64);
        if c % 2 == 0 {
            math::sin(angle)
        } else {
            math::cos(angle)
        }
    })
}

/// Mean squared error over `pred` and its gradient, counting only rows
/// `< mask.valid_len`, scaled by `weight`.
pub fn mse(pred: &Tensor2, target: &Tensor2, mask: PaddingMask, weight: f64) -> (f64, Tensor2) {
    let valid = mask.valid_len.min(pred.rows());
    let count = (valid * pred.cols()).max(1) as f64;
    let mut grad = Tensor2::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for r in 0..valid {
        for c in 0..pred.cols() {
            let d = pred.get(r, c) - target.get(r, c);
            loss += d * d;
            grad.set(r, c, 2.0 * d * weight / count);
        }
    }
    (loss / count, grad)
}

/// Summed softmax cross-entropy over rows that carry a target.
/// Returns the loss and `dL/dlogits`.
pub fn cross_entropy_rows(logits: &Tensor2, targets: &[Option<usize>]) -> (f64, Tensor2) {
    let mut grad = Tensor2::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = grad.row_mut(r);
        let mut z = 0.0;
        for (o, &v) in g.iter_mut().zip(row) {
            *o = math::exp(v - max);
            z += *o;
        }
        for o in g.iter_mut() {
            *o /= z;
        }
        loss += -(row[t] - max - math::ln(z));
        g[t] -= 1.0;
    }
    (loss, grad)
}

/// Pre-norm transformer layer: self-attention then a GELU MLP, each wrapped
/// in a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct TransformerCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    ff: FeedForwardCache,
    mask: PaddingMask,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        causal: bool,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &alloc::format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(ps, &alloc::format!("{name}.attn"), dim, dim, heads, causal, rng)?,
            ln2: LayerNorm::new(ps, &alloc::format!("{name}.ln2"), dim),
            ff: FeedForward::new(ps, &alloc::format!("{name}.ff"), dim, hidden, dim, rng),
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor2, mask: PaddingMask) -> Result<(Tensor2, TransformerCache), NnError> {
        let (h, ln1) = self.ln1.forward(ps, x, mask)?;
        let (a, attn) = self.attn.forward(ps, &h, mask, &h, mask)?;
        let mut y = x.clone();
        y.add_assign(&a);
        let (h2, ln2) = self.ln2.forward(ps, &y, mask)?;
        let (f, ff) = self.ff.forward(ps, &h2, mask)?;
        y.add_assign(&f);
        mask.apply(&mut y);
        Ok((y, TransformerCache { ln1, attn, ln2, ff, mask }))
    }

    pub fn backward(&self, ps: &ParamStore, cache: &TransformerCache, dy: &Tensor2, g: &mut Grads) -> Tensor2 {
        let mut dy = dy.clone();
        cache.mask.apply(&mut dy);
        let dh2 = self.ff.backward(ps, &cache.ff, &dy, g);
        let mut dmid = dy;
        dmid.add_assign(&self.ln2.backward(ps, &cache.ln2, &dh2, g));
        let (dq, dkv) = self.attn.backward(ps, &cache.attn, &dmid, g);
        let mut dh = dq;
        dh.add_assign(&dkv);
        let mut dx = dmid;
        dx.add_assign(&self.ln1.backward(ps, &cache.ln1, &dh, g));
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn identity_linear_passes_input_through() {
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "id", 3, 3, &mut substream(0, "t"));
        *ps.get_mut(lin.w) = Tensor2::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 });
        let x = Tensor2::from_fn(4, 3, |r, c| (r * 3 + c) as f64 - 2.5);
        assert_eq!(lin.forward(&ps, &x).unwrap(), x);
    }

    #[test]
    fn linear_reports_both_shapes() {
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "l", 3, 2, &mut substream(0, "t"));
        let err = lin.forward(&ps, &Tensor2::zeros(4, 5)).unwrap_err();
        assert_eq!(
            err,
            NnError::Shape {
                op: "linear",
                left: (4, 5),
                right: (4, 3)
            }
        );
    }

    #[test]
    fn strided_conv_lengths_follow_ceil() {
        let mut ps = ParamStore::new();
        let conv = Conv1d::new(&mut ps, "c", 2, 2, 2, &mut substream(0, "t"));
        for (n, m) in [(26, 13), (13, 7), (7, 4), (32, 16), (1, 1)] {
            let (y, _) = conv.forward(&ps, &Tensor2::zeros(n, 2), PaddingMask::new(n)).unwrap();
            assert_eq!(y.rows(), m);
        }
    }

    #[test]
    fn padded_conv_matches_unpadded() {
        let mut ps = ParamStore::new();
        let mut rng = substream(1, "t");
        let conv = Conv1d::new(&mut ps, "c", 3, 4, 2, &mut rng);
        let x = Tensor2::from_fn(7, 3, |r, c| (r as f64 - c as f64 * 0.3).sin());
        let (y, _) = conv.forward(&ps, &x, PaddingMask::new(7)).unwrap();
        let mut xp = x.padded(12);
        xp.data_mut()[7 * 3..].fill(9.0);
        let (yp, _) = conv.forward(&ps, &xp, PaddingMask::new(7)).unwrap();
        assert_eq!(yp.truncated(4), y);
        assert!(yp.data()[4 * 4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn position_encoding_first_rows() {
        let pe = sinusoidal_position_encoding(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(1, 2) - (1.0f64 / 100.0).sin()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let logits = Tensor2::zeros(2, 4);
        let (loss, grad) = cross_entropy_rows(&logits, &[Some(1), None]);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((grad.get(0, 1) + 0.75).abs() < 1e-12);
        assert!(grad.row(1).iter().all(|&g| g == 0.0));
    }
}
