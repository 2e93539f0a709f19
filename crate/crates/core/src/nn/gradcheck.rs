//! Central finite-difference checks for the analytic backward passes.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{
    cross_entropy_rows, gelu, gelu_backward, mean_pool, mean_pool_backward, mse, sigmoid, Conv1d, Embedding,
    FeedForward, Grads, LayerNorm, Linear, MultiHeadAttention, NnError, PaddingMask, ParamStore, Tensor2,
    TransformerBlock,
};
use crate::math;
use crate::rng::{normal, substream};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Gradients below this magnitude are compared in absolute rather than
/// relative terms. Some gradients are exactly zero (an attention key bias
/// shifts every logit equally), and central differences of an `O(10)` loss
/// at `eps = 1e-5` carry roughly `1e-10` of rounding noise.
pub const REL_FLOOR: f64 = 1e-5;

pub fn rel_error(a: f64, n: f64) -> f64 {
    let d = math::abs(a - n);
    if d == 0.0 {
        return 0.0;
    }
    d / math::abs(a).max(math::abs(n)).max(REL_FLOOR)
}

/// A scalar function of parameters and inputs with its analytic gradient.
///
/// Implementations evaluate the loss and, when `grads` is given, write
/// `dL/dparam` into the `Grads` and `dL/dinput` into the vector (one tensor
/// per input, same shapes).
pub trait Objective {
    fn eval(&self, ps: &ParamStore, inputs: &[Tensor2], grads: Option<(&mut Grads, &mut Vec<Tensor2>)>) -> f64;
}

impl<F> Objective for F
where
    F: Fn(&ParamStore, &[Tensor2], Option<(&mut Grads, &mut Vec<Tensor2>)>) -> f64,
{
    fn eval(&self, ps: &ParamStore, inputs: &[Tensor2], grads: Option<(&mut Grads, &mut Vec<Tensor2>)>) -> f64 {
        self(ps, inputs, grads)
    }
}

/// Maximum relative error between analytic and central-difference
/// gradients over every parameter scalar and every input scalar.
pub fn max_rel_error(obj: &impl Objective, ps: &mut ParamStore, inputs: &mut [Tensor2], eps: f64) -> f64 {
    let mut g = Grads::zeros_like(ps);
    let mut dx: Vec<Tensor2> = inputs.iter().map(|t| Tensor2::zeros(t.rows(), t.cols())).collect();
    obj.eval(ps, inputs, Some((&mut g, &mut dx)));
    let mut worst = 0.0f64;
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        for j in 0..ps.get(id).data().len() {
            let orig = ps.get(id).data()[j];
            ps.get_mut(id).data_mut()[j] = orig + eps;
            let lp = obj.eval(ps, inputs, None);
            ps.get_mut(id).data_mut()[j] = orig - eps;
            let lm = obj.eval(ps, inputs, None);
            ps.get_mut(id).data_mut()[j] = orig;
            let e = rel_error(g.get(id).data()[j], (lp - lm) / (2.0 * eps));
            worst = worst.max(e);
        }
    }
    for i in 0..inputs.len() {
        for j in 0..inputs[i].data().len() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + eps;
            let lp = obj.eval(ps, inputs, None);
            inputs[i].data_mut()[j] = orig - eps;
            let lm = obj.eval(ps, inputs, None);
            inputs[i].data_mut()[j] = orig;
            let e = rel_error(dx[i].data()[j], (lp - lm) / (2.0 * eps));
            worst = worst.max(e);
        }
    }
    worst
}

/// Random `rows × cols` tensor with standard normal entries.
pub fn random_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| normal(rng))
}

/// `Σ y ⊙ r`: turns a tensor output into a scalar with a known gradient `r`.
pub fn probe(y: &Tensor2, r: &Tensor2) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance
    }
}

fn result(name: &str, err: f64, tol: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        max_rel_error: err,
        tolerance: tol,
    }
}

fn perturb_params<R: Rng + ?Sized>(ps: &mut ParamStore, scale: f64, rng: &mut R) {
    for p in ps.tensors_mut() {
        for v in p.value.data_mut() {
            *v += scale * normal(rng);
        }
    }
}

/// Runs every layer check on random 5×8 inputs. Affine layers are held to
/// 1e−6, everything else to 1e−4.
pub fn layer_suite(seed: u64) -> Result<Vec<CheckResult>, NnError> {
    let mut rng = substream(seed, "gradcheck");
    let (rows, dim) = (5usize, 8usize);
    let mut out = Vec::new();

    {
        let mut ps = ParamStore::new();
        let lin = Linear::new(&mut ps, "lin", dim, 6, &mut rng);
        perturb_params(&mut ps, 0.3, &mut rng);
        let r = random_tensor(rows, 6, &mut rng);
        let mut x = vec![random_tensor(rows, dim, &mut rng)];
        let f = |ps: &ParamStore, xs: &[Tensor2], gr: Option<(&mut Grads, &mut Vec<Tensor2>)>| {
            let y = lin.forward(ps, &xs[0]).unwrap();
            if let Some((g, dx)) = gr {
                dx[0] = lin.backward(ps, &xs[0], &r, g);
            }
            probe(&y, &r)
        };
        out.push(result("linear", max_rel_error(&f, &mut ps, &mut x, DEFAULT_EPS), 1e-6));
    }

    for (stride, name, tol) in [(1usize, "conv1d stride 1", 1e-6), (2, "conv1d stride 2", 1e-6)] {
        let mut ps = ParamStore::new();
        let conv = Conv1d::new(&mut ps, "conv", dim, 6, stride, &mut rng);
        perturb_params(&mut ps, 0.3, &mut rng);
        let mask = PaddingMask::new(4);
        let r = random_tensor(conv.out_len(rows), 6, &mut rng);
        let mut x = vec![random_tensor(rows, dim, &mut rng)];
        let f = |ps: &ParamStore, xs: &[Tensor2], gr: Option<(&mut Grads, &mut Vec<Tensor2>)>| {
            let (y, cache) = conv.forward(ps, &xs[0], mask).unwrap();
            if let Some((g, dx)) = gr {
                dx[0] = conv.backward(ps, &cache, &r, g);
            }
            probe(&y, &r)
        };
        out.push(result(name, max_rel_error(&f, &mut ps, &mut x, DEFAULT_EPS), tol));
    }

    {
        let mut ps = ParamStore::new();
        let ln = LayerNorm::new(&mut ps, "ln", dim);
        perturb_params(&mut ps, 0.3, &mut rng);
        let mask = PaddingMask::new(4);
        let r = random_tensor(rows, dim, &mut rng);
        let mut x = vec![random_tensor(rows, dim, &mut rng)];
        let f = |ps: &ParamStore, xs: &[Tensor2], gr: Option<(&mut Grads, &mut Vec<Tensor2>)>| {
            let (y, cache) = ln.forward(ps, &xs[0], mask).unwrap();
            if let Some((g, dx)) = gr {
                dx[0] = ln.backward(ps, &cache, &r, g);
            }
            probe(&y, &r)
        };
        out.push(result("layer norm", max_rel_error(&f, &mut ps, &mut x, DEFAULT_EPS), 1e-4));
    }

    {
        let mut ps = ParamStore::new();
        let r = random_tensor(rows, dim, &mut rng);
        let mut x = vec![random_tensor(rows, dim, &mut rng)];
        let f = |_: &ParamStore, xs: &[Tensor2], gr: Option<(&mut Grads, &mut Vec<Tensor2>)>| {
            let y = xs[0].map(gelu);
            let s = xs[0].map(sigmoid);
            if let Some((_, dx)) = gr {
                dx[0] = Tensor2::from_fn(rows, dim, |i, j| {
                    let v = xs[0].get(i, j);
                    r.get(i, j) * (gelu_backward(v) + sigmoid(v) * (1.0 - sigmoid(v)))
                });
            }
            probe(&y, &r) + probe(&s, &r)
        };
        out.push(result("gelu + sigmoid", max_rel_error(&f, &mut ps, &mut x, DEFAULT_EPS), 1e-4));
    }

    {
        let mut ps = ParamStore::new();
        let ff = FeedForward::new(&mut ps, "ff", dim, 12, dim, &mut rng);
        perturb_params(&mut ps, 0.3, &mut rng);
        let mask = PaddingMask::new(4);
        let r = random_tensor(rows, dim, &mut rng);
        let mut x = vec![random_tensor(rows, dim, &mut rng)];
        let f = |ps: &ParamStore, xs: &[Tensor2], gr: Option<(&mut Grads, &mut Vec<Tensor2>)>| {
            let (y, cache) = ff.forward(ps, &xs[0], mask).unwrap();
            if let Some((g, dx)) = gr {
                dx[0] = ff.backward(ps, &cache, &r, g);
            }
            probe(&y, &r)
        };
        out.push(result("feed-forward", max_rel_error(&f, &mut ps, &mut x, DEFAULT_EPS), 1e-4));
    }

    for (causal, name) in [(false, "self-attention (masked)"), (true, "causal self-attention")] {
        let mut ps = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut ps, "sa", dim, dim, 2, causal, &mut rng)?;
        perturb_params(&mut ps, 0.3, &mut rng);
        let mask = PaddingMask::new(4);
        let r = random_tensor(rows, dim, &mut rng);
        let mut x = vec![random_tensor(rows, dim, &mut rng)];
        let f = |ps: &ParamStore, xs: &[Tensor2], gr: Option<(&mut Grads, &mut Vec<Tensor2>)>| {
            let (y, cache) = attn.forward(ps, &xs[0], mask, &xs[0], mask).unwrap();
            if let Some((g, dx)) = gr {
                let (dq, dkv) = attn.backward(ps, &cache, &r, g);
                let mut d = dq;
                d.add_assign(&dkv);
                dx[0] = d;
            }
            probe(&y, &r)
        };
        out.push(result(name, max_rel_error(&f, &mut ps, &mut x, DEFAULT_EPS), 1e-4));
    }

    {
        let mut ps = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut ps, "ca", dim, 6, 2, false, &mut rng)?;
        perturb_params(&mut ps, 0.3, &mut rng);
        let (qm, km) = (PaddingMask::new(4), PaddingMask::new(2));
        let r = random_tensor(rows, dim, &mut rng);
        let mut x = vec![random_tensor(rows, dim, &mut rng), random_tensor(3, 6, &mut rng)];
        let f = |ps: &ParamStore, xs: &[Tensor2], gr: Option<(&mut Grads, &mut Vec<Tensor2>)>| {
            let (y, cache) = attn.forward(ps, &xs[0], qm, &xs[1], km).unwrap();
            if let Some((g, dx)) = gr {
                let (dq, dkv) = attn.backward(ps, &cache, &r, g);
                dx[0] = dq;
                dx[1] = dkv;
            }
            probe(&y, &r)
        };
        out.push(result("cross-attention", max_rel_error(&f, &mut ps, &mut x, DEFAULT_EPS), 1e-4));
    }

    {
        let mut ps = ParamStore::new();
        let block = TransformerBlock::new(&mut ps, "tb", dim, 2, 16, false, &mut rng)?;
        perturb_params(&mut ps, 0.2, &mut rng);
        let mask = PaddingMask::new(4);
        let r = random_tensor(rows, dim, &mut rng);
        let mut x = vec![random_tensor(rows, dim, &mut rng)];
        let f = |ps: &ParamStore, xs: &[Tensor2], gr: Option<(&mut Grads, &mut Vec<Tensor2>)>| {
            let (y, cache) = block.forward(ps, &xs[0], mask).unwrap();
            if let Some((g, dx)) = gr {
                dx[0] = block.backward(ps, &cache, &r, g);
            }
            probe(&y, &r)
        };
        out.push(result("transformer block", max_rel_error(&f, &mut ps, &mut x, DEFAULT_EPS), 1e-4));
    }

    {
        let mut ps = ParamStore::new();
        let emb = Embedding::new(&mut ps, "emb", 7, dim, 1.0, &mut rng);
        let ids = [3usize, 0, 3, 6, 1];
        let mask = PaddingMask::new(4);
        let r = random_tensor(1, dim, &mut rng);
        let mut x: Vec<Tensor2> = Vec::new();
        let f = |ps: &ParamStore, _: &[Tensor2], gr: Option<(&mut Grads, &mut Vec<Tensor2>)>| {
            let e = emb.forward(ps, &ids).unwrap();
            let y = mean_pool(&e, mask);
            if let Some((g, _)) = gr {
                let de = mean_pool_backward(&r, ids.len(), mask);
                emb.backward(&ids, &de, g);
            }
            probe(&y, &r)
        };
        out.push(result("embedding + mean pool", max_rel_error(&f, &mut ps, &mut x, DEFAULT_EPS), 1e-6));
    }

    {
        let mut ps = ParamStore::new();
        let target = random_tensor(rows, dim, &mut rng);
        let labels = [Some(1usize), None, Some(7), Some(0), None];
        let mask = PaddingMask::new(4);
        let mut x = vec![random_tensor(rows, dim, &mut rng)];
        let f = |_: &ParamStore, xs: &[Tensor2], gr: Option<(&mut Grads, &mut Vec<Tensor2>)>| {
            let (l1, d1) = mse(&xs[0], &target, mask, 1.0);
            let (l2, d2) = cross_entropy_rows(&xs[0], &labels);
            if let Some((_, dx)) = gr {
                let mut d = d1;
                d.add_assign(&d2);
                dx[0] = d;
            }
            l1 + l2
        };
        out.push(result("mse + cross-entropy", max_rel_error(&f, &mut ps, &mut x, DEFAULT_EPS), 1e-4));
    }

    Ok(out)
}
