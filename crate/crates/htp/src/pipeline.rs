//! Pipeline stages on in-memory data. The subcommands in
//! [`commands`](crate::commands) wrap these with file IO.

use htp_core::geo::{haversine_m, BBox, GridSpec, LonLat};
use htp_core::metrics::{evaluate as evaluate_metrics, EvalTrajectory, MetricsConfig, MetricsReport};
use htp_core::patternlm::{
    generate as lm_generate, train_lm as lm_train, ConditionBuckets, GenOptions, LmEpoch, LmSequence, LmTrainConfig,
    PatternLm,
};
use htp_core::rng::{shuffle, substream};
use htp_core::roadnet::{build_synthetic_city, RoadNetwork};
use htp_core::rqvae::{
    downsample_len, train as rq_train, upsample_len, EpochMetrics, RoadFeatures, RqVae, TrainConfig, TrainSample,
};
use htp_core::tokens::{decode_pattern_tokens, encode_pattern_tokens, main_road_names, QaConditions, SftRecord, Vocabulary};
use htp_core::traj::{
    filter_dataset, make_labels, normalize_traj, reconstruct_from_labels, simulate_trajectory, CongestionZone,
    DatasetStats, GpsTrajectory, SimParams, SpeedProfile,
};
use htp_core::{nn::Tensor2, tokens::render_qa_pair};
use log::info;
use rand::Rng;

use crate::config::{CityConfig, LmSection, PipelineConfig, RqvaeModelConfig, SimConfig};
use crate::error::{HtpError, Result};
use crate::formats::{CodeRecord, GenerationRecord, LabelRecord};

pub fn synth_city(cfg: &CityConfig, seed: u64) -> Result<RoadNetwork> {
    Ok(build_synthetic_city(cfg.rows, cfg.cols, cfg.spacing_m, cfg.jitter_frac, seed)?)
}

/// Network bounding box grown by the configured margin.
pub fn dataset_bbox(net: &RoadNetwork, sim: &SimConfig) -> BBox {
    net.bbox().padded_m(sim.margin_m)
}

/// Metric grid over the dataset bounding box.
pub fn metric_grid(bbox: &BBox, cfg: &MetricsConfig) -> Result<GridSpec> {
    GridSpec::covering(bbox, cfg.cell_m).map_err(|e| HtpError::data(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<GpsTrajectory>,
    pub test: Vec<GpsTrajectory>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn congestion_zones(net: &RoadNetwork, cfg: &SimConfig, seed: u64) -> Vec<CongestionZone> {
    let mut rng = substream(seed, "zones");
    let b = net.bbox();
    (0..cfg.zones)
        .map(|_| CongestionZone {
            center: LonLat::new(
                uniform(&mut rng, b.min_lon, b.max_lon),
                uniform(&mut rng, b.min_lat, b.max_lat),
            ),
            radius_m: uniform(&mut rng, cfg.zone_radius_min_m, cfg.zone_radius_max_m),
            speed_factor: uniform(&mut rng, cfg.zone_factor_min, cfg.zone_factor_max),
        })
        .collect()
}

/// Simulates trips between random segment pairs until `cfg.count`
/// trajectories survive filtering, then splits them into train and test.
pub fn synth_data(net: &RoadNetwork, cfg: &SimConfig, seed: u64) -> Result<Dataset> {
    if cfg.intervals_s.is_empty() {
        return Err(HtpError::Usage("sim.intervals_s must not be empty".into()));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(HtpError::Usage("sim.test_fraction must be in [0, 1)".into()));
    }
    let zones = congestion_zones(net, cfg, seed);
    let bbox = dataset_bbox(net, cfg);
    let mut rng = substream(seed, "sim");
    let v = net.num_segments();
    let mut kept: Vec<GpsTrajectory> = Vec::with_capacity(cfg.count);
    let mut attempts = 0;
    while kept.len() < cfg.count {
        if attempts >= cfg.max_attempts {
            return Err(HtpError::data(format!(
                "only {} of {} trajectories after {attempts} simulated trips",
                kept.len(),
                cfg.count
            )));
        }
        attempts += 1;
        let src = rng.random_range(0..v);
        let dst = rng.random_range(0..v);
        let route = net.shortest_path(src, dst)?;
        let speed = SpeedProfile {
            base_mps: uniform(&mut rng, cfg.speed_min_mps, cfg.speed_max_mps),
            segment_factors: route
                .segment_ids
                .iter()
                .map(|_| uniform(&mut rng, cfg.segment_factor_min, cfg.segment_factor_max))
                .collect(),
        };
        let interval_s = cfg.intervals_s[rng.random_range(0..cfg.intervals_s.len())];
        let params = SimParams {
            zones: &zones,
            gps_noise_m: cfg.gps_noise_m,
            lane_offset_m: cfg.lane_offset_m,
            interval_s,
        };
        let start = 3600.0 * uniform(&mut rng, cfg.start_hour_min, cfg.start_hour_max);
        let start = (start / 60.0).floor() * 60.0;
        let Ok(mut t) = simulate_trajectory(&route, &speed, &params, start, &mut rng) else {
            continue;
        };
        t.id = kept.len() as u64;
        if let Some(t) = filter_dataset(vec![t], &bbox).pop() {
            kept.push(t);
        }
    }
    info!("simulated {attempts} trips, kept {}", kept.len());
    let mut order: Vec<usize> = (0..kept.len()).collect();
    shuffle(&mut order, &mut substream(seed, "split"));
    let n_test = (cfg.test_fraction * kept.len() as f64).round() as usize;
    let mut is_test = vec![false; kept.len()];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (test, train): (Vec<_>, Vec<_>) = kept.into_iter().partition(|t| is_test[t.id as usize]);
    Ok(Dataset { train, test })
}

pub fn fit_stats(net: &RoadNetwork, sim: &SimConfig, train: &[GpsTrajectory]) -> Result<DatasetStats> {
    let routes = train
        .iter()
        .map(|t| net.route(&t.route))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DatasetStats::fit(dataset_bbox(net, sim), train.iter().zip(&routes))?)
}

/// Labels of every trajectory and the total number of clamped projections.
pub fn label_all(net: &RoadNetwork, trajs: &[GpsTrajectory], stats: &DatasetStats) -> Result<(Vec<LabelRecord>, usize)> {
    let mut out = Vec::with_capacity(trajs.len());
    let mut clamped = 0;
    for t in trajs {
        let route = net.route(&t.route)?;
        let l = make_labels(t, &route, stats)?;
        clamped += l.clamped;
        out.push(LabelRecord::new(t.id, l.labels));
    }
    Ok((out, clamped))
}

fn check_aligned(trajs: &[GpsTrajectory], labels: &[LabelRecord]) -> Result<()> {
    if trajs.len() != labels.len() {
        return Err(HtpError::data(format!(
            "{} trajectories but {} label records",
            trajs.len(),
            labels.len()
        )));
    }
    for (t, l) in trajs.iter().zip(labels) {
        if t.id != l.id || l.rel_percent.len() != t.len() || l.offsets.len() != t.len() {
            return Err(HtpError::data(format!("labels for trajectory {} do not match it", t.id)));
        }
    }
    Ok(())
}

pub fn normalized_points(t: &GpsTrajectory, stats: &DatasetStats) -> Result<Tensor2> {
    let p = normalize_traj(&t.points, &stats.bbox)?;
    Ok(Tensor2::from_fn(p.len(), 2, |r, c| p[r][c]))
}

pub fn training_samples(trajs: &[GpsTrajectory], labels: &[LabelRecord], stats: &DatasetStats) -> Result<Vec<TrainSample>> {
    check_aligned(trajs, labels)?;
    trajs
        .iter()
        .zip(labels)
        .map(|(t, l)| {
            let p = normalize_traj(&t.points, &stats.bbox)?;
            Ok(TrainSample::new(&p, t.route.clone(), &l.labels()))
        })
        .collect()
}

pub fn road_features(net: &RoadNetwork, stats: &DatasetStats) -> RoadFeatures {
    RoadFeatures::new(net, &stats.bbox)
}

/// Root mean square of every percent label.
pub fn percent_scale(labels: &[LabelRecord]) -> Result<f64> {
    let (mut ss, mut n) = (0.0, 0usize);
    for l in labels {
        ss += l.rel_percent.iter().map(|x| x * x).sum::<f64>();
        n += l.rel_percent.len();
    }
    let s = (ss / n.max(1) as f64).sqrt();
    if s > 0.0 && s.is_finite() {
        Ok(s)
    } else {
        Err(HtpError::data("percent labels are all zero"))
    }
}

/// Trains the autoencoder. `on_epoch` may stop training early by returning
/// false.
#[allow(clippy::too_many_arguments)]
pub fn train_rqvae(
    net: &RoadNetwork,
    stats: &DatasetStats,
    trajs: &[GpsTrajectory],
    labels: &[LabelRecord],
    model_cfg: &RqvaeModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics, &RqVae) -> bool,
) -> Result<(RqVae, Vec<EpochMetrics>)> {
    let mut cfg = model_cfg.with_vocab(net.num_segments());
    cfg.percent_scale = percent_scale(labels)?;
    let mut model = RqVae::new(cfg, seed)?;
    let data = training_samples(trajs, labels, stats)?;
    let roads = road_features(net, stats);
    let tc = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let hist = rq_train(&mut model, &data, &roads, &tc, |m, model| {
        info!(
            "rqvae epoch {} loss {:.5} (q {:.5} percent {:.6} offset {:.5}) utilization {:?}",
            m.epoch, m.loss_total, m.loss_q, m.loss_percent, m.loss_offset, m.utilization
        );
        on_epoch(m, model)
    })?;
    Ok((model, hist))
}

pub fn encode_all(model: &RqVae, trajs: &[GpsTrajectory], stats: &DatasetStats) -> Result<Vec<CodeRecord>> {
    trajs
        .iter()
        .map(|t| Ok(CodeRecord::new(t.id, &model.encode(&normalized_points(t, stats)?)?)))
        .collect()
}

/// Generation conditions of a trajectory.
pub fn conditions(net: &RoadNetwork, t: &GpsTrajectory) -> Result<QaConditions> {
    let mut distance_m = 0.0;
    for &id in &t.route {
        distance_m += net.segment(id)?.length_m;
    }
    Ok(QaConditions {
        route: t.route.clone(),
        road_names: main_road_names(net, &t.route),
        start_time_s: t.start_time_s,
        travel_time_s: t.travel_time_s(),
        distance_m,
        interval_s: t.interval_s,
    })
}

fn check_codes(trajs: &[GpsTrajectory], codes: &[CodeRecord]) -> Result<()> {
    if trajs.len() != codes.len() || trajs.iter().zip(codes).any(|(t, c)| t.id != c.traj_id) {
        return Err(HtpError::data("pattern codes are not aligned with the trajectories"));
    }
    Ok(())
}

/// Question/answer pairs ordered by trajectory id.
pub fn sft_records(
    net: &RoadNetwork,
    trajs: &[GpsTrajectory],
    codes: &[CodeRecord],
    vocab: &Vocabulary,
) -> Result<Vec<SftRecord>> {
    check_codes(trajs, codes)?;
    let mut pairs: Vec<(&GpsTrajectory, &CodeRecord)> = trajs.iter().zip(codes).collect();
    pairs.sort_by_key(|(t, _)| t.id);
    pairs
        .into_iter()
        .map(|(t, c)| {
            let ans = encode_pattern_tokens(&c.code()?, vocab)?;
            let (question, answer) = render_qa_pair(&conditions(net, t)?, &ans, vocab)?;
            Ok(SftRecord { question, answer })
        })
        .collect()
}

pub fn lm_vocabulary(net: &RoadNetwork, codebook_sizes: &[usize]) -> Result<Vocabulary> {
    Ok(Vocabulary::new(net.num_segments(), codebook_sizes.to_vec())?)
}

pub fn train_pattern_lm(
    net: &RoadNetwork,
    trajs: &[GpsTrajectory],
    codes: &[CodeRecord],
    vocab: &Vocabulary,
    section: &LmSection,
    seed: u64,
    mut on_epoch: impl FnMut(&LmEpoch) -> bool,
) -> Result<(PatternLm, Vec<LmEpoch>)> {
    check_codes(trajs, codes)?;
    let conds = trajs.iter().map(|t| conditions(net, t)).collect::<Result<Vec<_>>>()?;
    let buckets = ConditionBuckets::fit(&conds);
    let mut model = PatternLm::new(section.model.clone(), vocab.clone(), buckets, seed)?;
    let corpus = trajs
        .iter()
        .zip(codes)
        .zip(&conds)
        .map(|((t, c), cond)| {
            let ans = encode_pattern_tokens(&c.code()?, vocab)?;
            Ok(model.sequence(t.id, cond, &ans)?)
        })
        .collect::<Result<Vec<LmSequence>>>()?;
    let tc = LmTrainConfig {
        seed,
        ..section.train.clone()
    };
    let hist = lm_train(&mut model, &corpus, &tc, |e| {
        info!("lm epoch {} loss {:.4}", e.epoch, e.loss);
        on_epoch(e)
    })?;
    Ok((model, hist))
}

/// Decodes a pattern code along `route` into GPS points.
pub fn decode_to_points(
    rq: &RqVae,
    roads: &RoadFeatures,
    net: &RoadNetwork,
    stats: &DatasetStats,
    code: &htp_core::rqvae::PatternCode,
    route_ids: &[usize],
) -> Result<Vec<LonLat>> {
    let n = upsample_len(code.len(), code.parity);
    let pred = rq.decode(roads, code, route_ids, n)?;
    let route = net.route(route_ids)?;
    Ok(reconstruct_from_labels(&route, &pred.to_labels(), stats)?.points)
}

/// Everything generation needs, borrowed.
pub struct Generator<'a> {
    pub lm: &'a PatternLm,
    pub rq: &'a RqVae,
    pub roads: &'a RoadFeatures,
    pub net: &'a RoadNetwork,
    pub stats: &'a DatasetStats,
}

impl Generator<'_> {
    /// Exactly `count` records, cycling over `sources` for conditions. An
    /// invalid sequence is retried up to `retries` times and then recorded
    /// as invalid.
    pub fn run(
        &self,
        sources: &[GpsTrajectory],
        count: usize,
        opts: &GenOptions,
        retries: usize,
        seed: u64,
    ) -> Result<Vec<GenerationRecord>> {
        if sources.is_empty() && count > 0 {
            return Err(HtpError::data("no condition records to generate from"));
        }
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let src = &sources[i % sources.len()];
            let cond = conditions(self.net, src)?;
            let prefix = self.lm.condition_prefix(&cond)?;
            let mut rng = substream(seed, &format!("sample/{i}"));
            let mut rec = GenerationRecord {
                id: i as u64,
                source_id: src.id,
                conditions: cond,
                tokens: String::new(),
                valid: false,
                attempts: 0,
                points: Vec::new(),
            };
            for _ in 0..=retries {
                rec.attempts += 1;
                let g = lm_generate(self.lm, &prefix, opts, &mut rng)?;
                rec.tokens = self.lm.vocab.render(&g.tokens).unwrap_or_default();
                let Ok(code) = decode_pattern_tokens(&g.tokens, &self.lm.vocab) else {
                    continue;
                };
                // A code can parse yet imply a length the decoder rejects.
                if let Ok(points) = decode_to_points(self.rq, self.roads, self.net, self.stats, &code, &src.route) {
                    rec.points = points;
                    rec.valid = true;
                    break;
                }
            }
            out.push(rec);
        }
        Ok(out)
    }
}

/// Held-out reconstruction through the autoencoder's predicted labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionSummary {
    pub trajectories: Vec<GpsTrajectory>,
    /// Mean distance between original and reconstructed points.
    pub mean_displacement_m: f64,
    /// Mean distance between consecutive original points.
    pub mean_step_m: f64,
}

pub fn reconstruct_all(
    rq: &RqVae,
    net: &RoadNetwork,
    stats: &DatasetStats,
    trajs: &[GpsTrajectory],
) -> Result<ReconstructionSummary> {
    let roads = road_features(net, stats);
    let (mut disp, mut nd, mut step, mut ns) = (0.0, 0usize, 0.0, 0usize);
    let mut out = Vec::with_capacity(trajs.len());
    for t in trajs {
        downsample_len(t.len())?;
        let pts = normalized_points(t, stats)?;
        let code = rq.encode(&pts)?;
        let rec = decode_to_points(rq, &roads, net, stats, &code, &t.route)?;
        for (a, b) in t.points.iter().zip(&rec) {
            disp += haversine_m(*a, *b);
            nd += 1;
        }
        for w in t.points.windows(2) {
            step += haversine_m(w[0], w[1]);
            ns += 1;
        }
        out.push(GpsTrajectory {
            points: rec,
            ..t.clone()
        });
    }
    Ok(ReconstructionSummary {
        trajectories: out,
        mean_displacement_m: disp / nd.max(1) as f64,
        mean_step_m: step / ns.max(1) as f64,
    })
}

pub fn eval_set_real(trajs: &[GpsTrajectory]) -> Vec<EvalTrajectory> {
    trajs
        .iter()
        .map(|t| EvalTrajectory {
            points: t.points.clone(),
            route: t.route.clone(),
        })
        .collect()
}

pub fn eval_set_generated(recs: &[GenerationRecord]) -> Vec<EvalTrajectory> {
    recs.iter()
        .filter(|r| r.valid)
        .map(|r| EvalTrajectory {
            points: r.points.clone(),
            route: r.conditions.route.clone(),
        })
        .collect()
}

pub fn evaluate(
    net: &RoadNetwork,
    cfg: &PipelineConfig,
    real: &[EvalTrajectory],
    gen: &[EvalTrajectory],
) -> Result<MetricsReport> {
    let grid = metric_grid(&dataset_bbox(net, &cfg.sim), &cfg.metrics)?;
    Ok(evaluate_metrics(real, gen, net, &grid, &cfg.metrics)?)
}
