use htp_core::patternlm::{generate, train_lm, ConditionBuckets, GenOptions, LmConfig, LmTrainConfig, PatternLm};
use htp_core::rng::substream;
use htp_core::rqvae::{downsample_len, PatternCode};
use htp_core::tokens::{encode_pattern_tokens, QaConditions, Vocabulary};
use rand::Rng;

#[test]
fn small_model_memorizes_fifty_sequences() {
    let sizes = vec![8, 8, 8, 8];
    let vocab = Vocabulary::new(60, sizes.clone()).unwrap();
    let mut rng = substream(1, "memorize");
    let mut conds = Vec::new();
    let mut answers = Vec::new();
    for i in 0..50usize {
        let n = rng.random_range(12..=24);
        let (m, parity) = downsample_len(n).unwrap();
        let code = PatternCode {
            indices: sizes.iter().map(|&c| (0..m).map(|_| rng.random_range(0..c)).collect()).collect(),
            parity,
        };
        answers.push(encode_pattern_tokens(&code, &vocab).unwrap());
        // Distinct routes make every prefix unique.
        conds.push(QaConditions {
            route: vec![i, (i + 7) % 60, 59 - i],
            road_names: vec![],
            start_time_s: 3600.0 * (6 + i % 12) as f64,
            travel_time_s: 10.0 * n as f64,
            distance_m: 100.0 * n as f64,
            interval_s: 10.0,
        });
    }
    let buckets = ConditionBuckets::fit(&conds);
    let cfg = LmConfig {
        layers: 2,
        dim: 32,
        heads: 2,
        context: 64,
        ff_hidden: 64,
    };
    let mut lm = PatternLm::new(cfg, vocab, buckets, 3).unwrap();
    let corpus: Vec<_> = conds
        .iter()
        .zip(&answers)
        .enumerate()
        .map(|(i, (c, a))| lm.sequence(i as u64, c, a).unwrap())
        .collect();
    let tcfg = LmTrainConfig {
        epochs: 200,
        batch_size: 10,
        lr: 3e-3,
        weight_decay: 0.0,
        ..LmTrainConfig::default()
    };
    let hist = train_lm(&mut lm, &corpus, &tcfg, |_| true).unwrap();
    let greedy = GenOptions {
        temperature: 0.0,
        top_k: 0,
        max_tokens: 64,
        constrained: true,
    };
    let mut hits = 0;
    for (c, a) in conds.iter().zip(&answers) {
        let prefix = lm.condition_prefix(c).unwrap();
        let g = generate(&lm, &prefix, &greedy, &mut substream(0, "greedy")).unwrap();
        hits += usize::from(&g.tokens == a);
    }
    assert!(hits >= 48, "{hits}/50 memorized; final loss {:?}", hist.last());
}
