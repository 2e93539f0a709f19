use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::quantizer::{residual_quantize, PatternCode, RqCodebooks};
use super::{downsample_len, stage_lengths, ParityRecord, RqError, RqvaeConfig, DOWNSAMPLE_STEPS};
use crate::geo::BBox;
use crate::nn::{
    gelu, gelu_backward, mean_pool, mean_pool_backward, mse, sigmoid, sinusoidal_position_encoding, AttentionCache,
    Conv1d, Conv1dCache, Embedding, FeedForward, FeedForwardCache, Grads, LayerNorm, LayerNormCache, Linear,
    MultiHeadAttention, PaddingMask, ParamId, ParamStore, Tensor2, TransformerBlock, TransformerCache,
};
use crate::rng::{normal, substream};
use crate::roadnet::{segment_spatial_input, RoadNetwork};
use crate::traj::RelativeLabels;

/// Normalized linestring of every road segment, indexed by segment id.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadFeatures {
    geoms: Vec<Tensor2>,
}

impl RoadFeatures {
    pub fn new(net: &RoadNetwork, bbox: &BBox) -> Self {
        let geoms = net
            .segments()
            .iter()
            .map(|s| {
                let pts = segment_spatial_input(s, bbox);
                Tensor2::from_fn(pts.len(), 2, |r, c| pts[r][c])
            })
            .collect();
        Self { geoms }
    }

    pub fn from_geometries(geoms: Vec<Tensor2>) -> Self {
        Self { geoms }
    }

    pub fn len(&self) -> usize {
        self.geoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geoms.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&Tensor2, RqError> {
        self.geoms.get(id).ok_or(RqError::UnknownSegment(id))
    }
}

/// One trajectory as the model sees it: `n × 2` normalized points and the
/// segment ids of its route.
#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    pub points: &'a Tensor2,
    pub route: &'a [usize],
}

/// Quantizer state held fixed while probing the rest of the network with
/// finite differences. The decoder input becomes `H_q + offset`, and the
/// stop-gradient operands of the quantization loss are the stored values.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenQuant {
    pub indices: Vec<Vec<usize>>,
    pub offset: Tensor2,
    pub residuals: Vec<Tensor2>,
    pub selected: Vec<Tensor2>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub q: f64,
    pub percent: f64,
    pub offset: f64,
}

impl LossBreakdown {
    pub fn reconstruction(&self) -> f64 {
        self.percent + self.offset
    }

    pub fn total(&self) -> f64 {
        self.q + self.percent + self.offset
    }
}

/// Decoder outputs: `n × 1` percent increments in `(0, 1)` and `n × 2`
/// normalized offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub percent: Tensor2,
    pub offsets: Tensor2,
    /// Percent outputs pinned against 0 or 1 by the sigmoid.
    pub saturated: usize,
}

impl Prediction {
    pub fn to_labels(&self) -> RelativeLabels {
        RelativeLabels {
            rel_percent: self.percent.data().to_vec(),
            offsets: (0..self.offsets.rows())
                .map(|r| [self.offsets.get(r, 0), self.offsets.get(r, 1)])
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    pub prediction: Prediction,
    pub indices: Vec<Vec<usize>>,
    /// Input to each quantizer level, used for codebook re-seeding.
    pub residuals: Vec<Tensor2>,
    pub h_q: Tensor2,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    conv: Conv1d,
    ln: LayerNorm,
    attn: MultiHeadAttention,
    down: Conv1d,
}

struct EncBlockCache {
    conv: Conv1dCache,
    pre: Tensor2,
    ln: LayerNormCache,
    attn: AttentionCache,
    down: Conv1dCache,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    conv: Conv1d,
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross: MultiHeadAttention,
}

struct DecStageCache {
    in_rows: usize,
    conv: Conv1dCache,
    pre: Tensor2,
    ln_self: LayerNormCache,
    self_attn: AttentionCache,
    ln_cross: LayerNormCache,
    cross: AttentionCache,
}

struct RoadCache {
    ids: Vec<usize>,
    geoms: Vec<Tensor2>,
    blocks: Vec<TransformerCache>,
}

/// The trajectory autoencoder. Layer handles index into `ps`.
#[derive(Debug, Clone)]
pub struct RqVae {
    pub cfg: RqvaeConfig,
    pub ps: ParamStore,
    input: Linear,
    enc: Vec<EncoderBlock>,
    proj_q: Linear,
    books: Vec<ParamId>,
    proj_up: Linear,
    road_embed: Embedding,
    road_spatial: Linear,
    road_blocks: Vec<TransformerBlock>,
    dec: Vec<DecoderStage>,
    percent_head: FeedForward,
    offset_head: FeedForward,
}

fn add_assign_pe(x: &mut Tensor2, valid: usize) {
    let pe = sinusoidal_position_encoding(valid, x.cols());
    for (a, b) in x.data_mut().iter_mut().zip(pe.data()) {
        *a += b;
    }
}

impl RqVae {
    pub fn new(cfg: RqvaeConfig, seed: u64) -> Result<Self, RqError> {
        cfg.validate()?;
        let mut rng = substream(seed, "init");
        Self::build(cfg, &mut rng)
    }

    /// Rebuilds the layer topology for `cfg` and loads `ps` into it; names
    /// and shapes must match exactly.
    pub fn from_parts(cfg: RqvaeConfig, ps: &ParamStore) -> Result<Self, RqError> {
        let mut model = Self::new(cfg, 0)?;
        model.ps.load_from(ps)?;
        Ok(model)
    }

    fn build<R: Rng + ?Sized>(cfg: RqvaeConfig, rng: &mut R) -> Result<Self, RqError> {
        let mut ps = ParamStore::new();
        let ch = cfg.channels;
        let hd = cfg.head_dim;
        let input = Linear::new(&mut ps, "enc.input", 2, ch[0], rng);
        let mut enc = Vec::with_capacity(DOWNSAMPLE_STEPS);
        for i in 0..DOWNSAMPLE_STEPS {
            let name = format!("enc.block{i}");
            enc.push(EncoderBlock {
                conv: Conv1d::new(&mut ps, &format!("{name}.conv"), ch[i], ch[i], 1, rng),
                ln: LayerNorm::new(&mut ps, &format!("{name}.ln"), ch[i]),
                attn: MultiHeadAttention::new(&mut ps, &format!("{name}.attn"), ch[i], ch[i], ch[i] / hd, false, rng)?,
                down: Conv1d::new(&mut ps, &format!("{name}.down"), ch[i], ch[i + 1], 2, rng),
            });
        }
        let proj_q = Linear::new(&mut ps, "quant.proj", cfg.d_e(), cfg.d_q, rng);
        let mut books = Vec::with_capacity(cfg.levels());
        for (l, &size) in cfg.codebook_sizes.iter().enumerate() {
            let t = Tensor2::from_fn(size, cfg.d_q, |_, _| normal(rng));
            books.push(ps.add(format!("quant.codebook{l}"), t, false));
        }
        let proj_up = Linear::new(&mut ps, "quant.up", cfg.d_q, cfg.d_e(), rng);
        let road_embed = Embedding::new(&mut ps, "road.embed", cfg.vocab, cfg.road_dim, 1.0, rng);
        let road_spatial = Linear::new(&mut ps, "road.spatial", 2, cfg.road_dim, rng);
        let mut road_blocks = Vec::with_capacity(cfg.road_layers);
        for i in 0..cfg.road_layers {
            road_blocks.push(TransformerBlock::new(
                &mut ps,
                &format!("road.block{i}"),
                cfg.road_dim,
                cfg.road_dim / hd,
                cfg.road_ff,
                false,
                rng,
            )?);
        }
        let mut dec = Vec::with_capacity(DOWNSAMPLE_STEPS);
        for s in 0..DOWNSAMPLE_STEPS {
            let (cin, cout) = (ch[3 - s], ch[2 - s]);
            let name = format!("dec.stage{s}");
            dec.push(DecoderStage {
                conv: Conv1d::new(&mut ps, &format!("{name}.conv"), cin, cout, 1, rng),
                ln_self: LayerNorm::new(&mut ps, &format!("{name}.ln_self"), cout),
                self_attn: MultiHeadAttention::new(&mut ps, &format!("{name}.self"), cout, cout, cout / hd, false, rng)?,
                ln_cross: LayerNorm::new(&mut ps, &format!("{name}.ln_cross"), cout),
                cross: MultiHeadAttention::new(&mut ps, &format!("{name}.cross"), cout, cfg.road_dim, cout / hd, false, rng)?,
            });
        }
        let percent_head = FeedForward::new(&mut ps, "head.percent", ch[0], cfg.head_hidden, 1, rng);
        let offset_head = FeedForward::new(&mut ps, "head.offset", ch[0], cfg.head_hidden, 2, rng);
        Ok(Self {
            cfg,
            ps,
            input,
            enc,
            proj_q,
            books,
            proj_up,
            road_embed,
            road_spatial,
            road_blocks,
            dec,
            percent_head,
            offset_head,
        })
    }

    pub fn codebook_ids(&self) -> &[ParamId] {
        &self.books
    }

    pub fn codebooks(&self) -> RqCodebooks {
        RqCodebooks::new(self.books.iter().map(|&id| self.ps.get(id).clone()).collect())
            .expect("model codebooks satisfy the size ordering")
    }

    pub fn set_codebook_row(&mut self, level: usize, row: usize, values: &[f64]) {
        self.ps.get_mut(self.books[level]).row_mut(row).copy_from_slice(values);
    }

    fn check_sample(&self, s: SampleRef<'_>) -> Result<(usize, ParityRecord), RqError> {
        if s.points.cols() != 2 {
            return Err(crate::nn::NnError::Shape {
                op: "trajectory input",
                left: s.points.shape(),
                right: (s.points.rows(), 2),
            }
            .into());
        }
        if s.route.is_empty() {
            return Err(RqError::Config("empty route".into()));
        }
        if let Some(&bad) = s.route.iter().find(|&&id| id >= self.cfg.vocab) {
            return Err(RqError::UnknownSegment(bad));
        }
        downsample_len(s.points.rows())
    }

    /// Encoder on a possibly padded `rows × 2` input whose first
    /// `mask.valid_len` rows hold data. Returns `H_e` and its mask.
    fn encode_fwd(&self, points: &Tensor2, mask: PaddingMask) -> Result<(Tensor2, PaddingMask, Vec<EncBlockCache>), RqError> {
        let ps = &self.ps;
        let mut h = self.input.forward(ps, points)?;
        let valid = mask.valid_len.min(h.rows());
        add_assign_pe(&mut h, valid);
        mask.apply(&mut h);
        let mut mask = mask;
        let mut caches = Vec::with_capacity(self.enc.len());
        for b in &self.enc {
            let (pre, conv) = b.conv.forward(ps, &h, mask)?;
            let a = pre.map(gelu);
            let (l, ln) = b.ln.forward(ps, &a, mask)?;
            let (s, attn) = b.attn.forward(ps, &l, mask, &l, mask)?;
            let mut h2 = a;
            h2.add_assign(&s);
            let (d, down) = b.down.forward(ps, &h2, mask)?;
            caches.push(EncBlockCache { conv, pre, ln, attn, down });
            mask = mask.strided(2);
            h = d;
        }
        Ok((h, mask, caches))
    }

    fn encode_bwd(&self, caches: &[EncBlockCache], points: &Tensor2, dh_e: Tensor2, g: &mut Grads) {
        let ps = &self.ps;
        let mut dh = dh_e;
        for (b, c) in self.enc.iter().zip(caches).rev() {
            let dh2 = b.down.backward(ps, &c.down, &dh, g);
            let (dq, dkv) = b.attn.backward(ps, &c.attn, &dh2, g);
            let mut dl = dq;
            dl.add_assign(&dkv);
            let mut da = dh2;
            da.add_assign(&b.ln.backward(ps, &c.ln, &dl, g));
            for (d, p) in da.data_mut().iter_mut().zip(c.pre.data()) {
                *d *= gelu_backward(*p);
            }
            dh = b.conv.backward(ps, &c.conv, &da, g);
        }
        self.input.backward_params(points, &dh, g);
    }

    fn road_fwd(&self, route: &[usize], roads: &RoadFeatures) -> Result<(Tensor2, RoadCache), RqError> {
        let ps = &self.ps;
        let mut h = self.road_embed.forward(ps, route)?;
        let mut geoms = Vec::with_capacity(route.len());
        for (i, &id) in route.iter().enumerate() {
            let geom = roads.get(id)?;
            let y = self.road_spatial.forward(ps, geom)?;
            let pooled = mean_pool(&y, PaddingMask::full(&y));
            for (a, b) in h.row_mut(i).iter_mut().zip(pooled.data()) {
                *a += b;
            }
            geoms.push(geom.clone());
        }
        add_assign_pe(&mut h, route.len());
        let mask = PaddingMask::full(&h);
        let mut blocks = Vec::with_capacity(self.road_blocks.len());
        for b in &self.road_blocks {
            let (y, c) = b.forward(ps, &h, mask)?;
            blocks.push(c);
            h = y;
        }
        Ok((
            h,
            RoadCache {
                ids: route.to_vec(),
                geoms,
                blocks,
            },
        ))
    }

    fn road_bwd(&self, cache: &RoadCache, dhr: Tensor2, g: &mut Grads) {
        let ps = &self.ps;
        let mut dh = dhr;
        for (b, c) in self.road_blocks.iter().zip(&cache.blocks).rev() {
            dh = b.backward(ps, c, &dh, g);
        }
        self.road_embed.backward(&cache.ids, &dh, g);
        for (i, geom) in cache.geoms.iter().enumerate() {
            let row = Tensor2::from_vec(1, dh.cols(), dh.row(i).to_vec()).expect("row shape");
            let dy = mean_pool_backward(&row, geom.rows(), PaddingMask::full(geom));
            self.road_spatial.backward_params(geom, &dy, g);
        }
    }

    fn decode_fwd(&self, z: &Tensor2, parity: ParityRecord, hr: &Tensor2) -> Result<(Tensor2, Vec<DecStageCache>), RqError> {
        let ps = &self.ps;
        let lens = stage_lengths(z.rows(), parity);
        let mut h = self.proj_up.forward(ps, z)?;
        let road_mask = PaddingMask::full(hr);
        let mut caches = Vec::with_capacity(self.dec.len());
        for (s, st) in self.dec.iter().enumerate() {
            let len = lens[s + 1];
            let mut u = Tensor2::from_fn(len, h.cols(), |j, c| h.get(j / 2, c));
            add_assign_pe(&mut u, len);
            let mask = PaddingMask::new(len);
            let (pre, conv) = st.conv.forward(ps, &u, mask)?;
            let mut x = pre.map(gelu);
            let (l, ln_self) = st.ln_self.forward(ps, &x, mask)?;
            let (a, self_attn) = st.self_attn.forward(ps, &l, mask, &l, mask)?;
            x.add_assign(&a);
            let (l, ln_cross) = st.ln_cross.forward(ps, &x, mask)?;
            let (a, cross) = st.cross.forward(ps, &l, mask, hr, road_mask)?;
            x.add_assign(&a);
            caches.push(DecStageCache {
                in_rows: h.rows(),
                conv,
                pre,
                ln_self,
                self_attn,
                ln_cross,
                cross,
            });
            h = x;
        }
        Ok((h, caches))
    }

    /// Returns `dL/dz` and accumulates `dL/dH_r′` into `dhr`.
    fn decode_bwd(&self, caches: &[DecStageCache], z: &Tensor2, dh: Tensor2, dhr: &mut Tensor2, g: &mut Grads) -> Tensor2 {
        let ps = &self.ps;
        let mut dx = dh;
        for (st, c) in self.dec.iter().zip(caches).rev() {
            let (dq, dkv) = st.cross.backward(ps, &c.cross, &dx, g);
            dhr.add_assign(&dkv);
            dx.add_assign(&st.ln_cross.backward(ps, &c.ln_cross, &dq, g));
            let (dq, dkv) = st.self_attn.backward(ps, &c.self_attn, &dx, g);
            let mut dl = dq;
            dl.add_assign(&dkv);
            dx.add_assign(&st.ln_self.backward(ps, &c.ln_self, &dl, g));
            for (d, p) in dx.data_mut().iter_mut().zip(c.pre.data()) {
                *d *= gelu_backward(*p);
            }
            let du = st.conv.backward(ps, &c.conv, &dx, g);
            let mut dprev = Tensor2::zeros(c.in_rows, du.cols());
            for j in 0..du.rows() {
                for (a, b) in dprev.row_mut(j / 2).iter_mut().zip(du.row(j)) {
                    *a += b;
                }
            }
            dx = dprev;
        }
        self.proj_up.backward(ps, z, &dx, g)
    }

    fn heads_fwd(&self, h: &Tensor2) -> Result<(Prediction, Tensor2, FeedForwardCache, FeedForwardCache), RqError> {
        let mask = PaddingMask::full(h);
        let (logit, pc) = self.percent_head.forward(&self.ps, h, mask)?;
        let percent = logit.map(sigmoid);
        let saturated = percent.data().iter().filter(|&&p| !(1e-6..=1.0 - 1e-6).contains(&p)).count();
        let (offsets, oc) = self.offset_head.forward(&self.ps, h, mask)?;
        Ok((
            Prediction {
                percent,
                offsets,
                saturated,
            },
            logit,
            pc,
            oc,
        ))
    }

    /// `H_q` of one unpadded trajectory.
    pub fn encode_hq(&self, points: &Tensor2) -> Result<Tensor2, RqError> {
        downsample_len(points.rows())?;
        let (he, _, _) = self.encode_fwd(points, PaddingMask::full(points))?;
        Ok(self.proj_q.forward(&self.ps, &he)?)
    }

    /// Encoder output `H_e` for a padded input. Rows at or beyond the
    /// returned valid length are zero.
    pub fn encode_padded(&self, points: &Tensor2, mask: PaddingMask) -> Result<(Tensor2, PaddingMask), RqError> {
        let (he, m, _) = self.encode_fwd(points, mask)?;
        Ok((he, m))
    }

    /// Gradient of `Σ H_e ⊙ probe` with respect to the parameters, for a
    /// padded input.
    pub fn encode_padded_grad(&self, points: &Tensor2, mask: PaddingMask, probe: &Tensor2) -> Result<Grads, RqError> {
        let (_, _, caches) = self.encode_fwd(points, mask)?;
        let mut g = Grads::zeros_like(&self.ps);
        self.encode_bwd(&caches, points, probe.clone(), &mut g);
        Ok(g)
    }

    /// Pattern code of one trajectory.
    pub fn encode(&self, points: &Tensor2) -> Result<PatternCode, RqError> {
        let (_, parity) = downsample_len(points.rows())?;
        let hq = self.encode_hq(points)?;
        let books: Vec<&Tensor2> = self.books.iter().map(|&id| self.ps.get(id)).collect();
        let q = residual_quantize(&hq, &books)?;
        Ok(PatternCode {
            indices: q.indices,
            parity,
        })
    }

    /// Decodes a pattern code along `route` to `n` points. The parity record
    /// must reproduce `n` from the code length.
    pub fn decode(&self, roads: &RoadFeatures, code: &PatternCode, route: &[usize], n: usize) -> Result<Prediction, RqError> {
        let got = stage_lengths(code.len(), code.parity)[DOWNSAMPLE_STEPS];
        if got != n || code.is_empty() {
            return Err(RqError::Length {
                m: code.len(),
                parity: code.parity.to_ints(),
                got,
                expected: n,
            });
        }
        if let Some(&bad) = route.iter().find(|&&id| id >= self.cfg.vocab) {
            return Err(RqError::UnknownSegment(bad));
        }
        let z = self.codebooks().lookup_sum(code)?;
        let (hr, _) = self.road_fwd(route, roads)?;
        let (h, _) = self.decode_fwd(&z, code.parity, &hr)?;
        Ok(self.heads_fwd(&h)?.0)
    }

    /// Encodes then decodes one trajectory.
    pub fn reconstruct(&self, roads: &RoadFeatures, s: SampleRef<'_>) -> Result<Prediction, RqError> {
        let code = self.encode(s.points)?;
        self.decode(roads, &code, s.route, s.points.rows())
    }

    /// Quantizer state at the current parameters, for [`FrozenQuant`] probes.
    pub fn freeze_quantizer(&self, s: SampleRef<'_>) -> Result<FrozenQuant, RqError> {
        self.check_sample(s)?;
        let hq = self.encode_hq(s.points)?;
        let books: Vec<&Tensor2> = self.books.iter().map(|&id| self.ps.get(id)).collect();
        let q = residual_quantize(&hq, &books)?;
        let mut offset = q.sum.clone();
        for (a, b) in offset.data_mut().iter_mut().zip(hq.data()) {
            *a -= b;
        }
        Ok(FrozenQuant {
            indices: q.indices,
            offset,
            residuals: q.residuals,
            selected: q.selected,
        })
    }

    /// Loss of one trajectory against its labels and, when `g` is given,
    /// the gradient scaled by `recon_w` (percent and offset terms) and
    /// `quant_w` (quantization term), accumulated into `g`.
    ///
    /// `percent` is `n × 1`, `offsets` is `n × 2`. With `frozen`, the
    /// quantizer is replaced by the stored state.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        roads: &RoadFeatures,
        s: SampleRef<'_>,
        percent: &Tensor2,
        offsets: &Tensor2,
        frozen: Option<&FrozenQuant>,
        recon_w: f64,
        quant_w: f64,
        g: Option<&mut Grads>,
    ) -> Result<StepOutput, RqError> {
        let (m, parity) = self.check_sample(s)?;
        let n = s.points.rows();
        if percent.shape() != (n, 1) || offsets.shape() != (n, 2) {
            return Err(crate::nn::NnError::Shape {
                op: "labels",
                left: percent.shape(),
                right: offsets.shape(),
            }
            .into());
        }
        let ps = &self.ps;
        let (he, _, enc_caches) = self.encode_fwd(s.points, PaddingMask::full(s.points))?;
        let hq = self.proj_q.forward(ps, &he)?;
        debug_assert_eq!(hq.rows(), m);
        let levels = self.books.len();

        // Per level: current selected rows E, current residual r, and the
        // stop-gradient operands r̄ and Ē.
        let (indices, residuals, selected, rbar, ebar, z) = match frozen {
            None => {
                let books: Vec<&Tensor2> = self.books.iter().map(|&id| ps.get(id)).collect();
                let q = residual_quantize(&hq, &books)?;
                (q.indices, q.residuals.clone(), q.selected.clone(), q.residuals, q.selected, q.sum)
            }
            Some(f) => {
                let mut residuals = Vec::with_capacity(levels);
                let mut selected = Vec::with_capacity(levels);
                let mut r = hq.clone();
                for l in 0..levels {
                    let book = ps.get(self.books[l]);
                    residuals.push(r.clone());
                    selected.push(Tensor2::from_fn(m, self.cfg.d_q, |j, c| book.get(f.indices[l][j], c)));
                    for (a, b) in r.data_mut().iter_mut().zip(f.selected[l].data()) {
                        *a -= b;
                    }
                }
                let mut z = hq.clone();
                z.add_assign(&f.offset);
                (f.indices.clone(), residuals, selected, f.residuals.clone(), f.selected.clone(), z)
            }
        };

        let mut loss_q = 0.0;
        for l in 0..levels {
            let mut cb = 0.0;
            let mut cm = 0.0;
            for ((e, r), (rb, eb)) in selected[l]
                .data()
                .iter()
                .zip(residuals[l].data())
                .zip(rbar[l].data().iter().zip(ebar[l].data()))
            {
                cb += (rb - e) * (rb - e);
                cm += (r - eb) * (r - eb);
            }
            loss_q += (cb + self.cfg.beta * cm) / m as f64;
        }
        loss_q /= levels as f64;

        let (hr, road_cache) = self.road_fwd(s.route, roads)?;
        let (h, dec_caches) = self.decode_fwd(&z, parity, &hr)?;
        let (prediction, logit, pc, oc) = self.heads_fwd(&h)?;
        let full = PaddingMask::new(n);
        let inv = 1.0 / self.cfg.percent_scale;
        let (loss_p, mut dperc) = mse(&prediction.percent.map(|x| x * inv), &percent.map(|x| x * inv), full, recon_w);
        dperc.data_mut().iter_mut().for_each(|d| *d *= inv);
        let (loss_o, doff) = mse(&prediction.offsets, offsets, full, recon_w);

        if let Some(g) = g {
            let mut dlogit = dperc;
            for (d, &x) in dlogit.data_mut().iter_mut().zip(logit.data()) {
                let sg = sigmoid(x);
                *d *= sg * (1.0 - sg);
            }
            let mut dh = self.percent_head.backward(ps, &pc, &dlogit, g);
            dh.add_assign(&self.offset_head.backward(ps, &oc, &doff, g));
            let mut dhr = Tensor2::zeros(hr.rows(), hr.cols());
            let dz = self.decode_bwd(&dec_caches, &z, dh, &mut dhr, g);
            self.road_bwd(&road_cache, dhr, g);

            // Straight-through: the decoder-input gradient passes to H_q.
            let mut dhq = dz;
            let scale = quant_w / (levels as f64 * m as f64);
            for l in 0..levels {
                let gb = g.get_mut(self.books[l]);
                for j in 0..m {
                    let k = indices[l][j];
                    for c in 0..self.cfg.d_q {
                        let e = selected[l].get(j, c);
                        gb.data_mut()[k * self.cfg.d_q + c] += 2.0 * scale * (e - rbar[l].get(j, c));
                        let r = residuals[l].get(j, c);
                        dhq.data_mut()[j * self.cfg.d_q + c] += 2.0 * scale * self.cfg.beta * (r - ebar[l].get(j, c));
                    }
                }
            }
            let dhe = self.proj_q.backward(ps, &he, &dhq, g);
            self.encode_bwd(&enc_caches, s.points, dhe, g);
        }

        Ok(StepOutput {
            losses: LossBreakdown {
                q: loss_q,
                percent: loss_p,
                offset: loss_o,
            },
            prediction,
            indices,
            residuals,
            h_q: hq,
        })
    }
}

/// Configuration small enough to finite-difference every parameter.
pub fn toy_config(vocab: usize) -> RqvaeConfig {
    RqvaeConfig {
        channels: [8, 8, 16, 16],
        d_q: 4,
        head_dim: 4,
        codebook_sizes: alloc::vec![3, 5, 7, 9],
        beta: 0.25,
        road_dim: 8,
        road_layers: 1,
        road_ff: 16,
        head_hidden: 8,
        vocab,
        percent_scale: 0.1,
    }
}

/// Finite-difference check of the whole network on a random `n`-point toy
/// trajectory, with the quantizer frozen at the base point so the
/// straight-through gradient is the exact derivative. Returns the largest
/// relative error over every parameter scalar.
pub fn full_path_gradcheck(seed: u64, n: usize) -> Result<f64, RqError> {
    let mut rng = substream(seed, "gradcheck");
    let vocab = 6;
    let mut model = RqVae::new(toy_config(vocab), seed)?;
    for p in model.ps.tensors_mut() {
        for v in p.value.data_mut() {
            *v += 0.1 * normal(&mut rng);
        }
    }
    let geoms = (0..vocab)
        .map(|_| Tensor2::from_fn(3, 2, |_, _| rng.random::<f64>()))
        .collect();
    let roads = RoadFeatures::from_geometries(geoms);
    let route = [2usize, 0, 5];
    let points = Tensor2::from_fn(n, 2, |_, _| rng.random::<f64>());
    let percent = Tensor2::from_fn(n, 1, |_, _| 0.1 * rng.random::<f64>());
    let offsets = Tensor2::from_fn(n, 2, |_, _| normal(&mut rng));
    let s = SampleRef {
        points: &points,
        route: &route,
    };
    let frozen = model.freeze_quantizer(s)?;
    let mut g = Grads::zeros_like(&model.ps);
    model.step(&roads, s, &percent, &offsets, Some(&frozen), 1.0, 1.0, Some(&mut g))?;
    let eps = crate::nn::gradcheck::DEFAULT_EPS;
    let mut worst = 0.0f64;
    let ids: Vec<ParamId> = model.ps.ids().collect();
    for id in ids {
        for j in 0..model.ps.get(id).data().len() {
            let orig = model.ps.get(id).data()[j];
            model.ps.get_mut(id).data_mut()[j] = orig + eps;
            let lp = model.step(&roads, s, &percent, &offsets, Some(&frozen), 1.0, 1.0, None)?.losses.total();
            model.ps.get_mut(id).data_mut()[j] = orig - eps;
            let lm = model.step(&roads, s, &percent, &offsets, Some(&frozen), 1.0, 1.0, None)?.losses.total();
            model.ps.get_mut(id).data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            worst = worst.max(crate::nn::gradcheck::rel_error(g.get(id).data()[j], numeric));
        }
    }
    Ok(worst)
}
