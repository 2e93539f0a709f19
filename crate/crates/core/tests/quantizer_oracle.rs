use htp_core::nn::Tensor2;
use htp_core::rng::{normal, substream};
use htp_core::rqvae::{residual_quantize, RqCodebooks};
use proptest::prelude::*;

/// Greedy residual search written without the library's lookup.
fn oracle(h: &[f64], books: &[Vec<Vec<f64>>]) -> Vec<usize> {
    let mut r = h.to_vec();
    let mut out = Vec::new();
    for book in books {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, row) in book.iter().enumerate() {
            let d: f64 = r.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        for (a, b) in r.iter_mut().zip(&book[best]) {
            *a -= b;
        }
        out.push(best);
    }
    out
}

#[test]
fn residual_quantize_matches_greedy_oracle() {
    let d = 8;
    let sizes = [32, 64, 128, 256];
    let mut rng = substream(11, "quantizer-oracle");
    let books: Vec<Vec<Vec<f64>>> = sizes
        .iter()
        .enumerate()
        .map(|(l, &c)| {
            let s = 0.5f64.powi(l as i32);
            (0..c).map(|_| (0..d).map(|_| s * normal(&mut rng)).collect()).collect()
        })
        .collect();
    let tensors: Vec<Tensor2> = books
        .iter()
        .map(|b| Tensor2::from_fn(b.len(), d, |r, c| b[r][c]))
        .collect();
    let refs: Vec<&Tensor2> = tensors.iter().collect();
    let n = 10_000;
    let h = Tensor2::from_fn(n, d, |_, _| normal(&mut rng));
    let q = residual_quantize(&h, &refs).unwrap();
    for j in 0..n {
        let want = oracle(h.row(j), &books);
        let got: Vec<usize> = (0..sizes.len()).map(|l| q.indices[l][j]).collect();
        assert_eq!(got, want, "row {j}");
    }
}

#[test]
fn monotone_residual_with_zero_rows() {
    let mut rng = substream(3, "zero-rows");
    let d = 4;
    let books: Vec<Tensor2> = [4, 8, 16]
        .iter()
        .map(|&c| Tensor2::from_fn(c, d, |r, _| if r == 0 { 0.0 } else { normal(&mut rng) }))
        .collect();
    let rq = RqCodebooks::new(books).unwrap();
    let h = Tensor2::from_fn(200, d, |_, _| normal(&mut rng));
    let q = rq.quantize(&h).unwrap();
    let mut norms: Vec<Tensor2> = q.residuals.clone();
    norms.push(q.final_residual.clone());
    for j in 0..200 {
        let n: Vec<f64> = norms.iter().map(|t| t.row(j).iter().map(|x| x * x).sum()).collect();
        assert!(n.windows(2).all(|w| w[1] <= w[0] + 1e-12), "row {j}: {n:?}");
    }
}

proptest! {
    #[test]
    fn sum_plus_residual_is_input(vals in proptest::collection::vec(-3.0f64..3.0, 12), seed in 0u64..1000) {
        let mut rng = substream(seed, "books");
        let books: Vec<Tensor2> = [4, 4].iter().map(|&c| Tensor2::from_fn(c, 3, |_, _| normal(&mut rng))).collect();
        let refs: Vec<&Tensor2> = books.iter().collect();
        let h = Tensor2::from_vec(4, 3, vals).unwrap();
        let q = residual_quantize(&h, &refs).unwrap();
        for (i, x) in h.data().iter().enumerate() {
            prop_assert!((q.sum.data()[i] + q.final_residual.data()[i] - x).abs() < 1e-12);
        }
    }
}
