use htp_core::nn::{AdamW, Grads, OptimizerState, ParamStore, Tensor2};

/// f(x) = ½ Σ a_i (x_i − c_i)², minimized at c.
#[test]
fn adamw_converges_on_convex_quadratic() {
    let a = [1.0, 4.0, 0.25, 2.0];
    let c = [3.0, -1.0, 0.5, 2.0];
    let mut ps = ParamStore::new();
    let id = ps.add("x", Tensor2::zeros(1, 4), true);
    let opt = AdamW {
        lr: 0.05,
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut st = OptimizerState::new(&ps);
    let mut g = Grads::zeros_like(&ps);
    for _ in 0..3000 {
        g.zero();
        let x = ps.get(id).row(0).to_vec();
        for i in 0..4 {
            g.get_mut(id).data_mut()[i] = a[i] * (x[i] - c[i]);
        }
        opt.step(&mut ps, &g, &mut st, 0.05).unwrap();
    }
    for (x, c) in ps.get(id).row(0).iter().zip(c) {
        assert!((x - c).abs() < 1e-3, "{x} vs {c}");
    }
}

#[test]
fn weight_decay_shrinks_toward_zero_without_gradient() {
    let mut ps = ParamStore::new();
    let id = ps.add("x", Tensor2::from_vec(1, 1, vec![1.0]).unwrap(), true);
    let opt = AdamW {
        lr: 0.1,
        weight_decay: 0.5,
        ..AdamW::default()
    };
    let mut st = OptimizerState::new(&ps);
    let g = Grads::zeros_like(&ps);
    opt.step(&mut ps, &g, &mut st, 0.1).unwrap();
    assert!((ps.get(id).data()[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-12);
}
