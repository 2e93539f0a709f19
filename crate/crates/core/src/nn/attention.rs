use alloc::vec::Vec;

use rand::Rng;

use super::layers::Linear;
use super::tensor::gemm_raw;
use super::{Grads, NnError, PaddingMask, ParamStore, Tensor2};
use crate::math;

/// Scaled dot-product attention with `heads` heads of `dim / heads` channels.
///
/// Queries come from one sequence and keys/values from another (the same one
/// for self-attention). Padded keys and, when `causal`, future keys are
/// excluded before the softmax; padded queries produce zero output.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub dim: usize,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    xq: Tensor2,
    xkv: Tensor2,
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    probs: Vec<Tensor2>,
    ctx: Tensor2,
    q_mask: PaddingMask,
}

impl MultiHeadAttention {
    /// `dim` is the query/output width, `kv_dim` the width of the context.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        causal: bool,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::Heads { heads, dim });
        }
        Ok(Self {
            wq: Linear::new(ps, &alloc::format!("{name}.q"), dim, dim, rng),
            wk: Linear::new(ps, &alloc::format!("{name}.k"), kv_dim, dim, rng),
            wv: Linear::new(ps, &alloc::format!("{name}.v"), kv_dim, dim, rng),
            wo: Linear::new(ps, &alloc::format!("{name}.o"), dim, dim, rng),
            dim,
            heads,
            causal,
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        xq: &Tensor2,
        q_mask: PaddingMask,
        xkv: &Tensor2,
        kv_mask: PaddingMask,
    ) -> Result<(Tensor2, AttentionCache), NnError> {
        let kv_valid = kv_mask.valid_len.min(xkv.rows());
        if kv_valid == 0 {
            return Err(NnError::Shape {
                op: "attention context",
                left: xq.shape(),
                right: (0, xkv.cols()),
            });
        }
        let q = self.wq.forward(ps, xq)?;
        let k = self.wk.forward(ps, xkv)?;
        let v = self.wv.forward(ps, xkv)?;
        let (lq, lk, d, hd) = (xq.rows(), xkv.rows(), self.dim, self.head_dim());
        let q_valid = q_mask.valid_len.min(lq);
        let scale = 1.0 / math::sqrt(hd as f64);
        let mut probs = Vec::with_capacity(self.heads);
        let mut ctx = Tensor2::zeros(lq, d);
        for h in 0..self.heads {
            let mut s = Tensor2::zeros(lq, lk);
            let off = h * hd;
            gemm_raw(lq, hd, lk, scale, &q.data()[off..], (d, 1), &k.data()[off..], (1, d), 0.0, s.data_mut(), (lk, 1));
            for i in 0..lq {
                let row = s.row_mut(i);
                if i >= q_valid {
                    row.fill(0.0);
                    continue;
                }
                let limit = if self.causal { kv_valid.min(i + 1) } else { kv_valid };
                let max = row[..limit].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in &mut row[..limit] {
                    *x = math::exp(*x - max);
                    z += *x;
                }
                for x in &mut row[..limit] {
                    *x /= z;
                }
                row[limit..].fill(0.0);
            }
            gemm_raw(lq, lk, hd, 1.0, s.data(), (lk, 1), &v.data()[off..], (d, 1), 0.0, &mut ctx.data_mut()[off..], (d, 1));
            probs.push(s);
        }
        let mut out = self.wo.forward(ps, &ctx)?;
        q_mask.apply(&mut out);
        Ok((
            out,
            AttentionCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                probs,
                ctx,
                q_mask,
            },
        ))
    }

    /// Returns gradients with respect to the query input and the context.
    pub fn backward(&self, ps: &ParamStore, cache: &AttentionCache, dy: &Tensor2, g: &mut Grads) -> (Tensor2, Tensor2) {
        let mut dy = dy.clone();
        cache.q_mask.apply(&mut dy);
        let dctx = self.wo.backward(ps, &cache.ctx, &dy, g);
        let (lq, lk, d, hd) = (cache.xq.rows(), cache.xkv.rows(), self.dim, self.head_dim());
        let scale = 1.0 / math::sqrt(hd as f64);
        let mut dq = Tensor2::zeros(lq, d);
        let mut dk = Tensor2::zeros(lk, d);
        let mut dv = Tensor2::zeros(lk, d);
        let mut ds = Tensor2::zeros(lq, lk);
        for h in 0..self.heads {
            let off = h * hd;
            let p = &cache.probs[h];
            gemm_raw(lq, hd, lk, 1.0, &dctx.data()[off..], (d, 1), &cache.v.data()[off..], (1, d), 0.0, ds.data_mut(), (lk, 1));
            gemm_raw(lk, lq, hd, 1.0, p.data(), (1, lk), &dctx.data()[off..], (d, 1), 0.0, &mut dv.data_mut()[off..], (d, 1));
            for i in 0..lq {
                let pr = p.row(i);
                let dr = ds.row_mut(i);
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (x, &pv) in dr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot);
                }
            }
            gemm_raw(lq, lk, hd, scale, ds.data(), (lk, 1), &cache.k.data()[off..], (d, 1), 0.0, &mut dq.data_mut()[off..], (d, 1));
            gemm_raw(lk, lq, hd, scale, ds.data(), (1, lk), &cache.q.data()[off..], (d, 1), 0.0, &mut dk.data_mut()[off..], (d, 1));
        }
        let dxq = self.wq.backward(ps, &cache.xq, &dq, g);
        let mut dxkv = self.wk.backward(ps, &cache.xkv, &dk, g);
        dxkv.add_assign(&self.wv.backward(ps, &cache.xkv, &dv, g));
        (dxq, dxkv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn single_valid_key_returns_its_value_projection() {
        let mut ps = ParamStore::new();
        let mut rng = substream(2, "attn");
        let attn = MultiHeadAttention::new(&mut ps, "a", 4, 4, 2, false, &mut rng).unwrap();
        let x = Tensor2::from_fn(1, 4, |_, c| c as f64 * 0.7 - 1.0);
        let (out, _) = attn.forward(&ps, &x, PaddingMask::new(1), &x, PaddingMask::new(1)).unwrap();
        let v = attn.wv.forward(&ps, &x).unwrap();
        let expect = attn.wo.forward(&ps, &v).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut ps = ParamStore::new();
        let err = MultiHeadAttention::new(&mut ps, "a", 6, 6, 4, false, &mut substream(0, "a")).unwrap_err();
        assert_eq!(err, NnError::Heads { heads: 4, dim: 6 });
    }

    #[test]
    fn padded_keys_do_not_change_valid_outputs() {
        let mut ps = ParamStore::new();
        let mut rng = substream(3, "attn");
        let attn = MultiHeadAttention::new(&mut ps, "a", 4, 4, 2, false, &mut rng).unwrap();
        let x = Tensor2::from_fn(3, 4, |r, c| ((r * 4 + c) as f64).cos());
        let (out, _) = attn.forward(&ps, &x, PaddingMask::new(3), &x, PaddingMask::new(3)).unwrap();
        let mut xp = x.padded(5);
        xp.data_mut()[12..].fill(3.0);
        let (outp, _) = attn.forward(&ps, &xp, PaddingMask::new(3), &xp, PaddingMask::new(3)).unwrap();
        for (a, b) in out.data().iter().zip(outp.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(outp.data()[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causal_first_position_sees_only_itself() {
        let mut ps = ParamStore::new();
        let mut rng = substream(4, "attn");
        let attn = MultiHeadAttention::new(&mut ps, "a", 4, 4, 1, true, &mut rng).unwrap();
        let x = Tensor2::from_fn(3, 4, |r, c| (r + c) as f64);
        let (out, _) = attn.forward(&ps, &x, PaddingMask::new(3), &x, PaddingMask::new(3)).unwrap();
        let first = x.truncated(1);
        let (solo, _) = attn.forward(&ps, &first, PaddingMask::new(1), &first, PaddingMask::new(1)).unwrap();
        for (a, b) in out.row(0).iter().zip(solo.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
