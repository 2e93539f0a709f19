mod common;

use htp_core::geo::BBox;
use htp_core::traj::{make_labels, reconstruct_from_labels, DatasetStats};

fn max_error_deg(noise_m: f64, seed: u64) -> f64 {
    let net = common::city(12, 12, seed);
    let data = common::simulate(&net, 500, noise_m, seed);
    let bbox: BBox = net.bbox().padded_m(300.0);
    let stats = DatasetStats::fit(bbox, data.iter().map(|(t, r)| (t, r))).unwrap();
    let mut worst: f64 = 0.0;
    for (t, r) in &data {
        let l = make_labels(t, r, &stats).unwrap();
        let back = reconstruct_from_labels(r, &l.labels, &stats).unwrap();
        assert_eq!(back.clamped, 0);
        for (a, b) in t.points.iter().zip(&back.points) {
            worst = worst.max((a.lon - b.lon).abs()).max((a.lat - b.lat).abs());
        }
    }
    worst
}

#[test]
fn labels_invert_on_noisy_and_noiseless_trajectories() {
    let noisy = max_error_deg(1.0, 1);
    let clean = max_error_deg(0.0, 2);
    assert!(noisy < 1e-7 && clean < 1e-7, "noisy {noisy:e}, noiseless {clean:e}");
}

#[test]
fn percent_labels_sum_to_final_fraction() {
    let net = common::city(8, 8, 3);
    let data = common::simulate(&net, 50, 1.0, 3);
    let stats = DatasetStats::fit(net.bbox(), data.iter().map(|(t, r)| (t, r))).unwrap();
    for (t, r) in &data {
        let l = make_labels(t, r, &stats).unwrap().labels;
        let cum = l.cumulative();
        assert!(cum.windows(2).all(|w| w[1] >= w[0]), "alignment must be forward-monotone");
        assert!(cum.iter().all(|c| (0.0..=1.0).contains(c)));
    }
}
