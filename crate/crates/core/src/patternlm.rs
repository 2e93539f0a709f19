//! Small decoder-only language model over pattern tokens.
//!
//! The input is a discrete condition prefix (start hour, travel-time bucket,
//! distance bucket, interval bucket, then the route's road tokens) followed
//! by the answer: a pattern sequence as produced by
//! [`encode_pattern_tokens`](crate::tokens::encode_pattern_tokens). Only
//! answer positions are trained. Generation can be restricted to tokens the
//! sequence grammar allows at each step, which makes every completed output
//! decodable.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;
use crate::nn::{
    clip_grad_norm, cosine_lr, cross_entropy_rows, AdamW, Embedding, Grads, LayerNorm, LayerNormCache, Linear,
    NnError, OptimizerState, PaddingMask, ParamId, ParamStore, Tensor2, TransformerBlock, TransformerCache,
};
use crate::rng::{shuffle, substream};
use crate::tokens::{decode_pattern_tokens, QaConditions, Token, TokenError, Vocabulary};

pub const HOUR_BINS: usize = 24;
pub const TIME_BINS: usize = 16;
pub const DIST_BINS: usize = 16;
pub const INTERVAL_BINS: usize = 8;
pub const CONDITION_TOKENS: usize = HOUR_BINS + TIME_BINS + DIST_BINS + INTERVAL_BINS;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LmError {
    #[error("sequence {id} has {len} tokens, context is {context}")]
    Context { id: u64, len: usize, context: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Log-spaced bucket boundaries for the continuous conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionBuckets {
    pub time_edges: Vec<f64>,
    pub dist_edges: Vec<f64>,
    pub interval_edges: Vec<f64>,
}

fn log_edges(values: impl Iterator<Item = f64>, bins: usize) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        let v = v.max(1.0);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        lo = 1.0;
        hi = 1.0;
    }
    let (a, b) = (math::ln(lo), math::ln(hi));
    (1..bins).map(|k| math::exp(a + (b - a) * k as f64 / bins as f64)).collect()
}

fn bucket(edges: &[f64], v: f64) -> usize {
    edges.iter().take_while(|&&e| e <= v).count()
}

impl ConditionBuckets {
    /// Boundaries spanning the training conditions' range, 16 bins for time
    /// and distance, 8 for the interval. Values below 1 are clamped to 1.
    pub fn fit(conds: &[QaConditions]) -> Self {
        Self {
            time_edges: log_edges(conds.iter().map(|c| c.travel_time_s), TIME_BINS),
            dist_edges: log_edges(conds.iter().map(|c| c.distance_m), DIST_BINS),
            interval_edges: log_edges(conds.iter().map(|c| c.interval_s), INTERVAL_BINS),
        }
    }

    /// `[hour, time, distance, interval]` bin indices.
    pub fn bins(&self, c: &QaConditions) -> [usize; 4] {
        let hour = (c.start_time_s / 3600.0) as usize % HOUR_BINS;
        [
            hour,
            bucket(&self.time_edges, c.travel_time_s),
            bucket(&self.dist_edges, c.distance_m),
            bucket(&self.interval_edges, c.interval_s),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub context: usize,
    pub ff_hidden: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 128,
            heads: 4,
            context: 512,
            ff_hidden: 512,
        }
    }
}

/// One training sequence: condition prefix then answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmSequence {
    pub id: u64,
    pub tokens: Vec<usize>,
    /// Index of the first answer token.
    pub answer_start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternLm {
    pub cfg: LmConfig,
    pub vocab: Vocabulary,
    pub buckets: ConditionBuckets,
    pub ps: ParamStore,
    embed: Embedding,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    out: Linear,
}

struct Forward {
    blocks: Vec<TransformerCache>,
    ln: LayerNormCache,
    /// Final normalized hidden states of the rows that produce logits.
    hidden: Tensor2,
}

impl PatternLm {
    pub fn new(cfg: LmConfig, vocab: Vocabulary, buckets: ConditionBuckets, seed: u64) -> Result<Self, LmError> {
        if cfg.dim == 0 || cfg.layers == 0 || cfg.context == 0 || cfg.ff_hidden == 0 {
            return Err(LmError::Config("dimensions must be positive".into()));
        }
        let mut rng = substream(seed, "init");
        let mut ps = ParamStore::new();
        let total = vocab.len() + CONDITION_TOKENS;
        let embed = Embedding::new(&mut ps, "lm.embed", total, cfg.dim, 0.02, &mut rng);
        let pos = ps.add_normal("lm.pos", cfg.context, cfg.dim, 0.02, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|i| {
                TransformerBlock::new(&mut ps, &format!("lm.block{i}"), cfg.dim, cfg.heads, cfg.ff_hidden, true, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let ln_f = LayerNorm::new(&mut ps, "lm.ln_f", cfg.dim);
        let out = Linear::new(&mut ps, "lm.out", cfg.dim, total, &mut rng);
        Ok(Self {
            cfg,
            vocab,
            buckets,
            ps,
            embed,
            pos,
            blocks,
            ln_f,
            out,
        })
    }

    /// Rebuilds a model around saved parameters.
    pub fn from_parts(cfg: LmConfig, vocab: Vocabulary, buckets: ConditionBuckets, ps: &ParamStore) -> Result<Self, LmError> {
        let mut m = Self::new(cfg, vocab, buckets, 0)?;
        m.ps.load_from(ps)?;
        Ok(m)
    }

    /// Base vocabulary plus condition tokens.
    pub fn total_vocab(&self) -> usize {
        self.vocab.len() + CONDITION_TOKENS
    }

    pub fn condition_prefix(&self, c: &QaConditions) -> Result<Vec<usize>, LmError> {
        if c.route.is_empty() {
            return Err(TokenError::IncompleteCondition("route").into());
        }
        let [h, t, d, i] = self.buckets.bins(c);
        let base = self.vocab.len();
        let mut out = vec![
            base + h,
            base + HOUR_BINS + t,
            base + HOUR_BINS + TIME_BINS + d,
            base + HOUR_BINS + TIME_BINS + DIST_BINS + i,
        ];
        for &r in &c.route {
            out.push(self.vocab.id(Token::Road(r))?);
        }
        Ok(out)
    }

    pub fn sequence(&self, id: u64, c: &QaConditions, answer: &[usize]) -> Result<LmSequence, LmError> {
        let mut tokens = self.condition_prefix(c)?;
        let answer_start = tokens.len();
        tokens.extend_from_slice(answer);
        if tokens.len() > self.cfg.context {
            return Err(LmError::Context {
                id,
                len: tokens.len(),
                context: self.cfg.context,
            });
        }
        Ok(LmSequence {
            id,
            tokens,
            answer_start,
        })
    }

    fn forward(&self, tokens: &[usize], rows: &[usize]) -> Result<(Tensor2, Forward), LmError> {
        let len = tokens.len();
        if len > self.cfg.context {
            return Err(LmError::Context {
                id: 0,
                len,
                context: self.cfg.context,
            });
        }
        let mut x = self.embed.forward(&self.ps, tokens)?;
        let pos = self.ps.get(self.pos);
        for r in 0..len {
            for (a, b) in x.row_mut(r).iter_mut().zip(pos.row(r)) {
                *a += b;
            }
        }
        let mask = PaddingMask::new(len);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&self.ps, &x, mask)?;
            caches.push(c);
            x = y;
        }
        let (h, ln) = self.ln_f.forward(&self.ps, &x, mask)?;
        let hidden = Tensor2::from_fn(rows.len(), self.cfg.dim, |r, c| h.get(rows[r], c));
        let logits = self.out.forward(&self.ps, &hidden)?;
        Ok((
            logits,
            Forward {
                blocks: caches,
                ln,
                hidden,
            },
        ))
    }

    /// Summed answer-position cross-entropy of one sequence and the number of
    /// targets; gradients scaled by `weight` go into `g`.
    pub fn loss(&self, seq: &LmSequence, weight: f64, g: Option<&mut Grads>) -> Result<(f64, usize), LmError> {
        let len = seq.tokens.len();
        let start = seq.answer_start.max(1);
        if start >= len {
            return Ok((0.0, 0));
        }
        // Row p predicts token p + 1.
        let rows: Vec<usize> = (start - 1..len - 1).collect();
        let targets: Vec<Option<usize>> = rows.iter().map(|&p| Some(seq.tokens[p + 1])).collect();
        let (logits, fw) = self.forward(&seq.tokens, &rows)?;
        let (loss, mut dlogits) = cross_entropy_rows(&logits, &targets);
        if let Some(g) = g {
            dlogits.scale(weight);
            let dh_rows = self.out.backward(&self.ps, &fw.hidden, &dlogits, g);
            let mut dh = Tensor2::zeros(len, self.cfg.dim);
            for (i, &p) in rows.iter().enumerate() {
                dh.row_mut(p).copy_from_slice(dh_rows.row(i));
            }
            let mut dx = self.ln_f.backward(&self.ps, &fw.ln, &dh, g);
            for (b, c) in self.blocks.iter().zip(&fw.blocks).rev() {
                dx = b.backward(&self.ps, c, &dx, g);
            }
            let gp = g.get_mut(self.pos);
            for r in 0..len {
                for (a, b) in gp.row_mut(r).iter_mut().zip(dx.row(r)) {
                    *a += b;
                }
            }
            self.embed.backward(&seq.tokens, &dx, g);
        }
        Ok((loss, rows.len()))
    }

    /// Logits for the token following `tokens`.
    pub fn next_logits(&self, tokens: &[usize]) -> Result<Vec<f64>, LmError> {
        if tokens.is_empty() {
            return Err(LmError::Config("empty context".into()));
        }
        let (logits, _) = self.forward(tokens, &[tokens.len() - 1])?;
        Ok(logits.into_data())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            min_lr: 0.0,
            warmup_steps: 0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmEpoch {
    pub epoch: usize,
    /// Mean cross-entropy per answer token.
    pub loss: f64,
    pub lr: f64,
}

/// Trains on answer positions only. Each batch's gradient is the mean over
/// its answer tokens.
pub fn train_lm(
    model: &mut PatternLm,
    corpus: &[LmSequence],
    cfg: &LmTrainConfig,
    mut on_epoch: impl FnMut(&LmEpoch) -> bool,
) -> Result<Vec<LmEpoch>, LmError> {
    if corpus.is_empty() {
        return Err(LmError::Config("empty corpus".into()));
    }
    for s in corpus {
        if s.tokens.len() > model.cfg.context {
            return Err(LmError::Context {
                id: s.id,
                len: s.tokens.len(),
                context: model.cfg.context,
            });
        }
        if let Some(&bad) = s.tokens.iter().find(|&&t| t >= model.total_vocab()) {
            return Err(LmError::Config(format!("sequence {} has token id {bad}", s.id)));
        }
    }
    let mut rng = substream(cfg.seed, "train");
    let opt = AdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut state = OptimizerState::new(&model.ps);
    let bs = cfg.batch_size.max(1);
    let total_steps = (corpus.len().div_ceil(bs) * cfg.epochs) as u64;
    let mut g = Grads::zeros_like(&model.ps);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        let mut lr = cfg.lr;
        for batch in order.chunks(bs) {
            let targets: usize = batch
                .iter()
                .map(|&i| corpus[i].tokens.len().saturating_sub(corpus[i].answer_start.max(1)))
                .sum();
            if targets == 0 {
                continue;
            }
            g.zero();
            for &i in batch {
                let (l, c) = model.loss(&corpus[i], 1.0 / targets as f64, Some(&mut g))?;
                sum += l;
                count += c;
            }
            if !sum.is_finite() || !g.is_finite() {
                return Err(LmError::NonFinite { epoch });
            }
            clip_grad_norm(&mut g, cfg.grad_clip);
            lr = cosine_lr(cfg.lr, cfg.min_lr, cfg.warmup_steps, step, total_steps);
            opt.step(&mut model.ps, &g, &mut state, lr)?;
            step += 1;
        }
        let e = LmEpoch {
            epoch,
            loss: sum / count.max(1) as f64,
            lr,
        };
        let go_on = on_epoch(&e);
        history.push(e);
        if !go_on {
            break;
        }
    }
    Ok(history)
}

/// Position inside the pattern-sequence grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrammarState {
    Start,
    Length,
    TEnd,
    PBegin,
    /// Inside the pattern region after `count` pattern tokens.
    Pattern { count: usize },
    Done,
}

/// Incremental checker for the answer grammar.
#[derive(Debug, Clone)]
pub struct Grammar<'a> {
    vocab: &'a Vocabulary,
    pub state: GrammarState,
}

impl<'a> Grammar<'a> {
    pub fn new(vocab: &'a Vocabulary) -> Self {
        Self {
            vocab,
            state: GrammarState::Start,
        }
    }

    pub fn allows(&self, id: usize) -> bool {
        let t = self.vocab.token(id);
        match self.state {
            GrammarState::Start => t == Some(Token::TBegin),
            GrammarState::Length => matches!(t, Some(Token::Length(_))),
            GrammarState::TEnd => t == Some(Token::TEnd),
            GrammarState::PBegin => t == Some(Token::PBegin),
            GrammarState::Pattern { count } => {
                let levels = self.vocab.levels();
                match t {
                    Some(Token::Pattern { level, .. }) => level == count % levels,
                    Some(Token::PEnd) => count > 0 && count % levels == 0,
                    _ => false,
                }
            }
            GrammarState::Done => false,
        }
    }

    /// Advances on `id`; returns false (and leaves the state alone) if the
    /// grammar forbids it.
    pub fn advance(&mut self, id: usize) -> bool {
        if !self.allows(id) {
            return false;
        }
        self.state = match self.state {
            GrammarState::Start => GrammarState::Length,
            GrammarState::Length => GrammarState::TEnd,
            GrammarState::TEnd => GrammarState::PBegin,
            GrammarState::PBegin => GrammarState::Pattern { count: 0 },
            GrammarState::Pattern { count } => {
                if self.vocab.token(id) == Some(Token::PEnd) {
                    GrammarState::Done
                } else {
                    GrammarState::Pattern { count: count + 1 }
                }
            }
            GrammarState::Done => GrammarState::Done,
        };
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenOptions {
    /// 0 means greedy.
    pub temperature: f64,
    /// 0 means no top-k cut.
    pub top_k: usize,
    pub max_tokens: usize,
    pub constrained: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 50,
            max_tokens: 512,
            constrained: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    /// Answer tokens only.
    pub tokens: Vec<usize>,
    /// Whether `<|p_end|>` was produced.
    pub complete: bool,
}

/// Samples one id from `logits` restricted to `allowed`. Greedy ties go to
/// the smaller id.
fn sample_token<R: Rng + ?Sized>(logits: &[f64], allowed: &[usize], opts: &GenOptions, rng: &mut R) -> usize {
    if opts.temperature <= 0.0 {
        let mut best = allowed[0];
        for &i in allowed {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let mut cand: Vec<usize> = allowed.to_vec();
    if opts.top_k > 0 && cand.len() > opts.top_k {
        cand.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        cand.truncate(opts.top_k);
    }
    let max = cand.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = cand.iter().map(|&i| math::exp((logits[i] - max) / opts.temperature)).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, &wk) in w.iter().enumerate() {
        if u < wk {
            return cand[k];
        }
        u -= wk;
    }
    cand[cand.len() - 1]
}

/// Autoregressive continuation of a condition prefix. Stops after
/// `<|p_end|>` or `max_tokens` answer tokens, whichever comes first; the
/// context length is also a hard stop.
pub fn generate<R: Rng + ?Sized>(
    model: &PatternLm,
    prefix: &[usize],
    opts: &GenOptions,
    rng: &mut R,
) -> Result<Generation, LmError> {
    let pend = model.vocab.id(Token::PEnd)?;
    let mut tokens = prefix.to_vec();
    let mut grammar = Grammar::new(&model.vocab);
    let all: Vec<usize> = (0..model.total_vocab()).collect();
    let mut out = Vec::new();
    while out.len() < opts.max_tokens && tokens.len() < model.cfg.context {
        let logits = model.next_logits(&tokens)?;
        let allowed: Vec<usize> = if opts.constrained {
            (0..model.vocab.len()).filter(|&i| grammar.allows(i)).collect()
        } else {
            all.clone()
        };
        let id = sample_token(&logits, &allowed, opts, rng);
        grammar.advance(id);
        tokens.push(id);
        out.push(id);
        if id == pend {
            return Ok(Generation {
                tokens: out,
                complete: true,
            });
        }
    }
    Ok(Generation {
        tokens: out,
        complete: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub total: usize,
    pub valid: usize,
    pub validity: f64,
    /// Error category → count.
    pub errors: BTreeMap<String, usize>,
}

pub fn structural_validity<S: AsRef<[usize]>>(seqs: &[S], vocab: &Vocabulary) -> ValidityReport {
    let mut errors = BTreeMap::new();
    let mut valid = 0;
    for s in seqs {
        match decode_pattern_tokens(s.as_ref(), vocab) {
            Ok(_) => valid += 1,
            Err(e) => *errors.entry(String::from(e.category())).or_insert(0) += 1,
        }
    }
    ValidityReport {
        total: seqs.len(),
        valid,
        validity: if seqs.is_empty() { 1.0 } else { valid as f64 / seqs.len() as f64 },
        errors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rqvae::{ParityRecord, PatternCode};
    use crate::tokens::encode_pattern_tokens;

    fn vocab() -> Vocabulary {
        Vocabulary::new(10, vec![3, 4, 5, 6]).unwrap()
    }

    fn cond(route: Vec<usize>, t: f64) -> QaConditions {
        QaConditions {
            route,
            road_names: vec!["Street R0".into()],
            start_time_s: t,
            travel_time_s: 300.0 + t / 100.0,
            distance_m: 1000.0 + t / 50.0,
            interval_s: 15.0,
        }
    }

    fn small() -> LmConfig {
        LmConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            context: 64,
            ff_hidden: 32,
        }
    }

    #[test]
    fn buckets_are_monotone() {
        let cs: Vec<_> = (0..20).map(|i| cond(vec![1], i as f64 * 3000.0)).collect();
        let b = ConditionBuckets::fit(&cs);
        assert_eq!(b.time_edges.len(), TIME_BINS - 1);
        let mut last = [0; 4];
        for c in &cs {
            let bins = b.bins(c);
            assert!(bins[1] >= last[1] && bins[2] >= last[2]);
            assert!(bins[1] < TIME_BINS && bins[3] < INTERVAL_BINS);
            last = bins;
        }
        assert_eq!(b.bins(&cs[19])[1], TIME_BINS - 1);
        assert_eq!(b.bins(&cs[0])[1], 0);
    }

    #[test]
    fn condition_positions_carry_no_loss() {
        let v = vocab();
        let c = cond(vec![1, 2, 3], 3600.0);
        let m = PatternLm::new(small(), v.clone(), ConditionBuckets::fit(&[c.clone()]), 1).unwrap();
        let code = PatternCode {
            indices: vec![vec![0, 1], vec![1, 2], vec![2, 3], vec![3, 4]],
            parity: ParityRecord { bits: [true, false, true] },
        };
        let ans = encode_pattern_tokens(&code, &v).unwrap();
        let seq = m.sequence(7, &c, &ans).unwrap();
        let (_, n) = m.loss(&seq, 1.0, None).unwrap();
        assert_eq!(n, ans.len());
        // Changing the last condition token's target cannot matter: it is
        // never a target.
        let mut g = Grads::zeros_like(&m.ps);
        m.loss(&seq, 1.0, Some(&mut g)).unwrap();
        let mut only_prefix = seq.clone();
        only_prefix.tokens.truncate(seq.answer_start);
        assert_eq!(m.loss(&only_prefix, 1.0, None).unwrap(), (0.0, 0));
        let long = cond((0..10).cycle().take(70).collect(), 0.0);
        assert!(matches!(m.sequence(9, &long, &ans), Err(LmError::Context { id: 9, .. })));
    }

    #[test]
    fn constrained_generation_is_grammatical() {
        let v = vocab();
        let c = cond(vec![4, 5], 7200.0);
        let m = PatternLm::new(small(), v.clone(), ConditionBuckets::fit(&[c.clone()]), 2).unwrap();
        let prefix = m.condition_prefix(&c).unwrap();
        let mut rng = substream(3, "sample");
        let opts = GenOptions {
            max_tokens: 40,
            ..GenOptions::default()
        };
        let mut complete = 0;
        for _ in 0..20 {
            let gen = generate(&m, &prefix, &opts, &mut rng).unwrap();
            let mut gr = Grammar::new(&v);
            for &t in &gen.tokens {
                assert!(gr.advance(t));
            }
            if gen.complete {
                complete += 1;
                decode_pattern_tokens(&gen.tokens, &v).unwrap();
            }
        }
        assert!(complete > 0);
        let greedy = GenOptions {
            temperature: 0.0,
            ..opts
        };
        let a = generate(&m, &prefix, &greedy, &mut substream(1, "x")).unwrap();
        let b = generate(&m, &prefix, &greedy, &mut substream(2, "y")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validity_report_counts_categories() {
        let v = vocab();
        let code = PatternCode {
            indices: vec![vec![0], vec![1], vec![2], vec![3]],
            parity: ParityRecord { bits: [false; 3] },
        };
        let good = encode_pattern_tokens(&code, &v).unwrap();
        let r = structural_validity(&[good.clone(), good.clone()], &v);
        assert_eq!((r.valid, r.validity), (2, 1.0));
        let mut bad1 = good.clone();
        bad1[0] = 0;
        let mut bad2 = good;
        bad2.pop();
        let r = structural_validity(&[bad1, bad2], &v);
        assert_eq!(r.validity, 0.0);
        assert_eq!(r.errors["missing_boundary"], 1);
        assert_eq!(r.errors["truncated"], 1);
    }
}

#[cfg(test)]
mod gradient_tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_error;
    use crate::rqvae::{ParityRecord, PatternCode};
    use crate::tokens::encode_pattern_tokens;

    #[test]
    fn loss_gradients_match_finite_differences() {
        let v = Vocabulary::new(4, vec![2, 3]).unwrap();
        let c = QaConditions {
            route: vec![0, 3],
            road_names: vec!["x".into()],
            start_time_s: 100.0,
            travel_time_s: 60.0,
            distance_m: 400.0,
            interval_s: 10.0,
        };
        let cfg = LmConfig {
            layers: 1,
            dim: 4,
            heads: 2,
            context: 16,
            ff_hidden: 8,
        };
        let mut m = PatternLm::new(cfg, v.clone(), ConditionBuckets::fit(&[c.clone()]), 4).unwrap();
        let mut rng = substream(9, "perturb");
        for p in m.ps.tensors_mut() {
            for x in p.value.data_mut() {
                *x += 0.3 * crate::rng::normal(&mut rng);
            }
        }
        let code = PatternCode {
            indices: vec![vec![1, 0], vec![2, 1]],
            parity: ParityRecord { bits: [false, true, false] },
        };
        let seq = m.sequence(1, &c, &encode_pattern_tokens(&code, &v).unwrap()).unwrap();
        let base = m.clone();
        let obj = |ps: &ParamStore, _: &[Tensor2], grads: Option<(&mut Grads, &mut Vec<Tensor2>)>| {
            let mut mm = base.clone();
            mm.ps = ps.clone();
            mm.loss(&seq, 1.0, grads.map(|(g, _)| g)).unwrap().0
        };
        let err = max_rel_error(&obj, &mut m.ps, &mut [], 1e-5);
        assert!(err < 1e-4, "max relative error {err:e}");
    }
}
