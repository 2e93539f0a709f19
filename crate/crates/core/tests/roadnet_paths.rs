mod common;

use htp_core::roadnet::RoadNetwork;

/// Length of the cheapest segment walk from `src` to `dst`, by exhaustive
/// enumeration of simple walks.
fn brute_force(net: &RoadNetwork, src: usize, dst: usize) -> f64 {
    fn go(net: &RoadNetwork, cur: usize, dst: usize, cost: f64, seen: &mut Vec<bool>, best: &mut f64) {
        if cost >= *best {
            return;
        }
        if cur == dst {
            *best = cost;
            return;
        }
        for &n in net.successors(cur) {
            if !seen[n] {
                seen[n] = true;
                go(net, n, dst, cost + net.segments()[n].length_m, seen, best);
                seen[n] = false;
            }
        }
    }
    let mut seen = vec![false; net.num_segments()];
    seen[src] = true;
    let mut best = f64::INFINITY;
    go(net, src, dst, net.segments()[src].length_m, &mut seen, &mut best);
    best
}

#[test]
fn shortest_path_matches_enumeration() {
    let net = common::city(3, 3, 5);
    let v = net.num_segments();
    for src in 0..v {
        for dst in (0..v).step_by(3) {
            let r = net.shortest_path(src, dst).unwrap();
            assert_eq!((r.segment_ids[0], *r.segment_ids.last().unwrap()), (src, dst));
            let cost: f64 = r.segment_ids.iter().map(|&s| net.segments()[s].length_m).sum();
            let oracle = brute_force(&net, src, dst);
            assert!((cost - oracle).abs() < 1e-6, "{src}->{dst}: {cost} vs {oracle}");
            for w in r.segment_ids.windows(2) {
                assert!(net.is_adjacent(w[0], w[1]));
            }
        }
    }
}

#[test]
fn route_length_is_sum_of_segments() {
    let net = common::city(5, 5, 2);
    let r = net.shortest_path(0, net.num_segments() - 1).unwrap();
    let sum: f64 = r.segment_ids.iter().map(|&s| net.segments()[s].length_m).sum();
    assert!((r.len_m() - sum).abs() < 1e-6 * sum);
    assert!((r.seg_cum_fraction.last().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn city_is_deterministic_per_seed() {
    let a = common::city(4, 4, 9);
    let b = common::city(4, 4, 9);
    assert_eq!(a.adjacency_pairs(), b.adjacency_pairs());
    assert_eq!(a.segments(), b.segments());
}
