use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{LossBreakdown, RoadFeatures, RqVae, SampleRef};
use super::quantizer::residual_quantize;
use super::{downsample_len, RqError};
use crate::nn::{clip_grad_norm, cosine_lr, AdamW, Grads, OptimizerState, Tensor2};
use crate::rng::{normal, shuffle, substream, StreamRng};
use crate::traj::RelativeLabels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the end of the cosine schedule.
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Re-seed codebook rows that went unused for a whole epoch.
    pub restart_dead_codes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 1e-4,
            min_lr: 0.0,
            warmup_steps: 0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            restart_dead_codes: true,
        }
    }
}

/// One labelled training trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// `n × 2` normalized points.
    pub points: Tensor2,
    pub route: Vec<usize>,
    /// `n × 1` relative-percent labels.
    pub percent: Tensor2,
    /// `n × 2` normalized offset labels.
    pub offsets: Tensor2,
}

impl TrainSample {
    pub fn new(points: &[[f64; 2]], route: Vec<usize>, labels: &RelativeLabels) -> Self {
        let n = points.len();
        Self {
            points: Tensor2::from_fn(n, 2, |r, c| points[r][c]),
            route,
            percent: Tensor2::from_fn(labels.rel_percent.len(), 1, |r, _| labels.rel_percent[r]),
            offsets: Tensor2::from_fn(labels.offsets.len(), 2, |r, c| labels.offsets[r][c]),
        }
    }

    pub fn sample(&self) -> SampleRef<'_> {
        SampleRef {
            points: &self.points,
            route: &self.route,
        }
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub loss_q: f64,
    pub loss_percent: f64,
    pub loss_offset: f64,
    pub loss_total: f64,
    /// Fraction of each codebook's rows selected at least once this epoch.
    pub utilization: Vec<f64>,
    /// Rows re-seeded after this epoch, per level.
    pub restarted: Vec<usize>,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
}

/// Positions kept per level for re-seeding dead codebook rows.
const RESERVOIR: usize = 4096;

struct Reservoir {
    rows: Vec<Vec<f64>>,
    seen: usize,
}

impl Reservoir {
    fn offer<R: Rng + ?Sized>(&mut self, row: &[f64], rng: &mut R) {
        self.seen += 1;
        if self.rows.len() < RESERVOIR {
            self.rows.push(row.to_vec());
        } else {
            let k = rng.random_range(0..self.seen);
            if k < RESERVOIR {
                self.rows[k] = row.to_vec();
            }
        }
    }
}

/// Batches of indices with similar encoded length `m`, in random order.
fn make_batches(data: &[TrainSample], batch: usize, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    shuffle(&mut order, rng);
    order.sort_by_key(|&i| data[i].points.rows().div_ceil(8));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    shuffle(&mut batches, rng);
    batches
}

/// Seeds every codebook level from the leading batches of the first epoch,
/// taken until the pool holds twice the largest codebook: level `l` draws
/// its rows from the residuals left after quantizing with levels `< l`.
fn init_codebooks(model: &mut RqVae, data: &[TrainSample], batches: &[Vec<usize>], rng: &mut StreamRng) -> Result<(), RqError> {
    let want = 2 * model.cfg.codebook_sizes.iter().copied().max().unwrap_or(0);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for &i in batches.iter().flatten() {
        if rows.len() >= want {
            break;
        }
        let hq = model.encode_hq(&data[i].points)?;
        for r in 0..hq.rows() {
            rows.push(hq.row(r).to_vec());
        }
    }
    let d = model.cfg.d_q;
    let mut resid = Tensor2::from_fn(rows.len(), d, |r, c| rows[r][c]);
    let scale = crate::math::sqrt(resid.sum_sq() / resid.data().len().max(1) as f64).max(1e-6);
    for l in 0..model.cfg.levels() {
        let size = model.cfg.codebook_sizes[l];
        let mut picks: Vec<usize> = (0..resid.rows()).collect();
        shuffle(&mut picks, rng);
        for k in 0..size {
            let (src, jitter) = if k < picks.len() {
                (picks[k], 0.0)
            } else {
                (rng.random_range(0..resid.rows()), 1e-3 * scale)
            };
            let v: Vec<f64> = resid.row(src).iter().map(|x| x + jitter * normal(rng)).collect();
            model.set_codebook_row(l, k, &v);
        }
        let book = model.ps.get(model.codebook_ids()[l]).clone();
        let q = residual_quantize(&resid, &[&book])?;
        resid = q.final_residual;
    }
    Ok(())
}

/// Trains `model` on `data`. `on_epoch` sees each epoch's metrics and the
/// model after any codebook re-seeding; returning `false` stops training.
///
/// A non-finite loss or gradient restores the parameters from the end of
/// the last completed epoch and returns [`RqError::NonFinite`].
pub fn train(
    model: &mut RqVae,
    data: &[TrainSample],
    roads: &RoadFeatures,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &RqVae) -> bool,
) -> Result<Vec<EpochMetrics>, RqError> {
    if data.is_empty() {
        return Err(RqError::Config("empty training set".into()));
    }
    for s in data {
        downsample_len(s.len())?;
    }
    let mut rng = substream(cfg.seed, "train");
    let opt = AdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut state = OptimizerState::new(&model.ps);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size.max(1)) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let levels = model.cfg.levels();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.ps.clone();
    let mut step: u64 = 0;
    let mut g = Grads::zeros_like(&model.ps);

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(data, cfg.batch_size, &mut rng);
        if epoch == 1 {
            init_codebooks(model, data, &batches, &mut rng)?;
            last_good = model.ps.clone();
        }
        let mut usage: Vec<Vec<u64>> = model.cfg.codebook_sizes.iter().map(|&c| vec![0; c]).collect();
        let mut reservoirs: Vec<Reservoir> = (0..levels)
            .map(|_| Reservoir {
                rows: Vec::new(),
                seen: 0,
            })
            .collect();
        let (mut sum_q, mut sum_p, mut sum_o) = (0.0, 0.0, 0.0);
        let (mut all_n, mut all_m) = (0usize, 0usize);
        let mut lr = cfg.lr;

        for (bi, batch) in batches.iter().enumerate() {
            g.zero();
            let n_tot: usize = batch.iter().map(|&i| data[i].len()).sum();
            let m_tot: usize = batch.iter().map(|&i| data[i].len().div_ceil(8)).sum();
            for &i in batch {
                let s = &data[i];
                let (n, m) = (s.len(), s.len().div_ceil(8));
                let out = model.step(
                    roads,
                    s.sample(),
                    &s.percent,
                    &s.offsets,
                    None,
                    n as f64 / n_tot as f64,
                    m as f64 / m_tot as f64,
                    Some(&mut g),
                )?;
                let l = out.losses;
                if !l.total().is_finite() {
                    model.ps = last_good;
                    return Err(RqError::NonFinite { epoch, step: bi });
                }
                sum_q += l.q * m as f64;
                sum_p += l.percent * n as f64;
                sum_o += l.offset * n as f64;
                all_n += n;
                all_m += m;
                for (lv, idx) in out.indices.iter().enumerate() {
                    for (j, &k) in idx.iter().enumerate() {
                        usage[lv][k] += 1;
                        reservoirs[lv].offer(out.residuals[lv].row(j), &mut rng);
                    }
                }
            }
            if !g.is_finite() {
                model.ps = last_good;
                return Err(RqError::NonFinite { epoch, step: bi });
            }
            clip_grad_norm(&mut g, cfg.grad_clip);
            lr = cosine_lr(cfg.lr, cfg.min_lr, cfg.warmup_steps, step, total_steps);
            opt.step(&mut model.ps, &g, &mut state, lr)?;
            step += 1;
        }

        let utilization: Vec<f64> = usage
            .iter()
            .map(|u| u.iter().filter(|&&c| c > 0).count() as f64 / u.len() as f64)
            .collect();
        let mut restarted = vec![0; levels];
        if cfg.restart_dead_codes {
            for l in 0..levels {
                let pool = &reservoirs[l].rows;
                if pool.is_empty() {
                    continue;
                }
                let id = model.codebook_ids()[l];
                for k in 0..usage[l].len() {
                    if usage[l][k] == 0 {
                        let v = pool[rng.random_range(0..pool.len())].clone();
                        model.set_codebook_row(l, k, &v);
                        state.m[id.index()].row_mut(k).fill(0.0);
                        state.v[id.index()].row_mut(k).fill(0.0);
                        restarted[l] += 1;
                    }
                }
            }
        }
        if !model.ps.is_finite() {
            model.ps = last_good;
            return Err(RqError::NonFinite { epoch, step: batches.len() });
        }
        last_good = model.ps.clone();

        let (q, p, o) = (sum_q / all_m as f64, sum_p / all_n as f64, sum_o / all_n as f64);
        let metrics = EpochMetrics {
            epoch,
            loss_q: q,
            loss_percent: p,
            loss_offset: o,
            loss_total: LossBreakdown { q, percent: p, offset: o }.total(),
            utilization,
            restarted,
            lr,
        };
        let go_on = on_epoch(&metrics, model);
        history.push(metrics);
        if !go_on {
            break;
        }
    }
    Ok(history)
}
