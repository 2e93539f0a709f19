//! One function per subcommand. Each reads its inputs from the run
//! directory, writes its outputs there, and never modifies an input.

use std::path::{Path, PathBuf};

use htp_core::metrics::EvalTrajectory;
use htp_core::nn::gradcheck::{layer_suite, CheckResult};
use htp_core::patternlm::{structural_validity, PatternLm};
use htp_core::rqvae::{full_path_gradcheck, RqVae};
use htp_core::traj::{DatasetStats, GpsTrajectory};
use log::info;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{HtpError, Result};
use crate::formats::{
    check_header, codebook_records, read_json, read_jsonl, read_network, write_json, write_jsonl, CodeRecord,
    GenerationRecord, LabelRecord, LmCheckpoint, NetworkFile, RqvaeCheckpoint, VocabFile, CHECKPOINT_VERSION,
};
use crate::pipeline::{self, Generator};
use crate::plot;

const RQVAE_FORMAT: &str = "htp-rqvae";
const LM_FORMAT: &str = "htp-patternlm";

/// File names inside the run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn network(&self) -> PathBuf {
        self.p("network.json")
    }
    pub fn train(&self) -> PathBuf {
        self.p("train.jsonl")
    }
    pub fn test(&self) -> PathBuf {
        self.p("test.jsonl")
    }
    pub fn stats(&self) -> PathBuf {
        self.p("stats.json")
    }
    pub fn train_labels(&self) -> PathBuf {
        self.p("train_labels.jsonl")
    }
    pub fn test_labels(&self) -> PathBuf {
        self.p("test_labels.jsonl")
    }
    pub fn rqvae(&self) -> PathBuf {
        self.p("rqvae.json")
    }
    pub fn rqvae_log(&self) -> PathBuf {
        self.p("rqvae_log.jsonl")
    }
    pub fn codebooks(&self) -> PathBuf {
        self.p("codebooks.json")
    }
    pub fn vocab(&self) -> PathBuf {
        self.p("vocab.json")
    }
    pub fn train_codes(&self) -> PathBuf {
        self.p("train_codes.jsonl")
    }
    pub fn test_codes(&self) -> PathBuf {
        self.p("test_codes.jsonl")
    }
    pub fn sft_train(&self) -> PathBuf {
        self.p("sft_train.jsonl")
    }
    pub fn sft_test(&self) -> PathBuf {
        self.p("sft_test.jsonl")
    }
    pub fn lm(&self) -> PathBuf {
        self.p("lm.json")
    }
    pub fn lm_log(&self) -> PathBuf {
        self.p("lm_log.jsonl")
    }
    pub fn generated(&self) -> PathBuf {
        self.p("generated.jsonl")
    }
    pub fn reconstructed(&self) -> PathBuf {
        self.p("reconstructed.jsonl")
    }
    pub fn reconstruction_summary(&self) -> PathBuf {
        self.p("reconstruction.json")
    }
    pub fn report(&self) -> PathBuf {
        self.p("report.json")
    }
    pub fn plots(&self) -> PathBuf {
        self.p("plots")
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(HtpError::data(format!("{} not found; run `htp {hint}` first", path.display())))
    }
}

fn trajectories(path: &Path) -> Result<Vec<GpsTrajectory>> {
    require(path, "synth-data")?;
    read_jsonl(path)
}

pub fn synth_city(cfg: &PipelineConfig) -> Result<()> {
    let l = Layout::new(&cfg.paths.dir);
    let net = pipeline::synth_city(&cfg.city, cfg.seed)?;
    write_json(&l.network(), &NetworkFile::from_network(&net))?;
    println!("{} segments -> {}", net.num_segments(), l.network().display());
    Ok(())
}

pub fn synth_data(cfg: &PipelineConfig) -> Result<()> {
    let l = Layout::new(&cfg.paths.dir);
    require(&l.network(), "synth-city")?;
    let net = read_network(&l.network())?;
    let d = pipeline::synth_data(&net, &cfg.sim, cfg.seed)?;
    write_jsonl(&l.train(), &d.train)?;
    write_jsonl(&l.test(), &d.test)?;
    println!("{} train / {} test trajectories", d.train.len(), d.test.len());
    Ok(())
}

pub fn make_labels(cfg: &PipelineConfig) -> Result<()> {
    let l = Layout::new(&cfg.paths.dir);
    let net = read_network(&l.network())?;
    let train = trajectories(&l.train())?;
    let test = trajectories(&l.test())?;
    let stats = pipeline::fit_stats(&net, &cfg.sim, &train)?;
    let (tl, c1) = pipeline::label_all(&net, &train, &stats)?;
    let (sl, c2) = pipeline::label_all(&net, &test, &stats)?;
    write_json(&l.stats(), &stats)?;
    write_jsonl(&l.train_labels(), &tl)?;
    write_jsonl(&l.test_labels(), &sl)?;
    println!(
        "offset scale ({:.3e}, {:.3e}) deg; {} clamped projections",
        stats.offset_scale[0],
        stats.offset_scale[1],
        c1 + c2
    );
    Ok(())
}

pub fn load_rqvae(path: &Path) -> Result<(RqVae, DatasetStats)> {
    require(path, "train-rqvae")?;
    let ck: RqvaeCheckpoint = read_json(path)?;
    check_header(path, &ck.format, RQVAE_FORMAT, ck.version)?;
    Ok((RqVae::from_parts(ck.config, &ck.params)?, ck.stats))
}

pub fn save_rqvae(path: &Path, model: &RqVae, stats: &DatasetStats) -> Result<()> {
    write_json(
        path,
        &RqvaeCheckpoint {
            format: RQVAE_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.cfg.clone(),
            stats: *stats,
            params: model.ps.clone(),
        },
    )
}

pub fn train_rqvae(cfg: &PipelineConfig) -> Result<()> {
    let l = Layout::new(&cfg.paths.dir);
    let net = read_network(&l.network())?;
    let train = trajectories(&l.train())?;
    require(&l.stats(), "make-labels")?;
    let stats: DatasetStats = read_json(&l.stats())?;
    let labels: Vec<LabelRecord> = read_jsonl(&l.train_labels())?;
    let (model, hist) = pipeline::train_rqvae(
        &net,
        &stats,
        &train,
        &labels,
        &cfg.rqvae.model,
        &cfg.rqvae.train,
        cfg.seed,
        |_, _| true,
    )?;
    save_rqvae(&l.rqvae(), &model, &stats)?;
    write_jsonl(&l.rqvae_log(), &hist)?;
    write_json(&l.codebooks(), &codebook_records(&model.codebooks()))?;
    if let (Some(first), Some(last)) = (hist.first(), hist.last()) {
        println!(
            "loss {:.5} -> {:.5} over {} epochs; final utilization {:?}",
            first.loss_total,
            last.loss_total,
            hist.len(),
            last.utilization
        );
    }
    Ok(())
}

pub fn tokenize(cfg: &PipelineConfig) -> Result<()> {
    let l = Layout::new(&cfg.paths.dir);
    let net = read_network(&l.network())?;
    let (model, stats) = load_rqvae(&l.rqvae())?;
    let vocab = pipeline::lm_vocabulary(&net, &model.cfg.codebook_sizes)?;
    for (src, dst) in [(l.train(), l.train_codes()), (l.test(), l.test_codes())] {
        let trajs = trajectories(&src)?;
        write_jsonl(&dst, &pipeline::encode_all(&model, &trajs, &stats)?)?;
    }
    write_json(&l.vocab(), &VocabFile::new(&vocab))?;
    println!("vocabulary of {} tokens", vocab.len());
    Ok(())
}

fn read_vocab(l: &Layout) -> Result<htp_core::tokens::Vocabulary> {
    require(&l.vocab(), "tokenize")?;
    read_json::<VocabFile>(&l.vocab())?.vocabulary()
}

pub fn export_sft(cfg: &PipelineConfig) -> Result<()> {
    let l = Layout::new(&cfg.paths.dir);
    let net = read_network(&l.network())?;
    let vocab = read_vocab(&l)?;
    for (src, codes, dst) in [
        (l.train(), l.train_codes(), l.sft_train()),
        (l.test(), l.test_codes(), l.sft_test()),
    ] {
        let trajs = trajectories(&src)?;
        let codes: Vec<CodeRecord> = read_jsonl(&codes)?;
        let recs = pipeline::sft_records(&net, &trajs, &codes, &vocab)?;
        write_jsonl(&dst, &recs)?;
        println!("{} records -> {}", recs.len(), dst.display());
    }
    Ok(())
}

pub fn load_lm(path: &Path) -> Result<PatternLm> {
    require(path, "train-lm")?;
    let ck: LmCheckpoint = read_json(path)?;
    check_header(path, &ck.format, LM_FORMAT, ck.version)?;
    Ok(PatternLm::from_parts(ck.config, ck.vocab, ck.buckets, &ck.params)?)
}

pub fn save_lm(path: &Path, m: &PatternLm) -> Result<()> {
    write_json(
        path,
        &LmCheckpoint {
            format: LM_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: m.cfg.clone(),
            vocab: m.vocab.clone(),
            buckets: m.buckets.clone(),
            params: m.ps.clone(),
        },
    )
}

pub fn train_lm(cfg: &PipelineConfig) -> Result<()> {
    let l = Layout::new(&cfg.paths.dir);
    let net = read_network(&l.network())?;
    let vocab = read_vocab(&l)?;
    let train = trajectories(&l.train())?;
    let codes: Vec<CodeRecord> = read_jsonl(&l.train_codes())?;
    let (model, hist) = pipeline::train_pattern_lm(&net, &train, &codes, &vocab, &cfg.lm, cfg.seed, |_| true)?;
    save_lm(&l.lm(), &model)?;
    write_jsonl(&l.lm_log(), &hist)?;
    if let (Some(a), Some(b)) = (hist.first(), hist.last()) {
        println!("loss {:.4} -> {:.4} over {} epochs", a.loss, b.loss, hist.len());
    }
    Ok(())
}

pub fn generate(cfg: &PipelineConfig, count: Option<usize>) -> Result<()> {
    let l = Layout::new(&cfg.paths.dir);
    let net = read_network(&l.network())?;
    let (rq, stats) = load_rqvae(&l.rqvae())?;
    let lm = load_lm(&l.lm())?;
    let test = trajectories(&l.test())?;
    let roads = pipeline::road_features(&net, &stats);
    let g = Generator {
        lm: &lm,
        rq: &rq,
        roads: &roads,
        net: &net,
        stats: &stats,
    };
    let count = count.unwrap_or(test.len());
    let recs = g.run(&test, count, &cfg.lm.generate, cfg.lm.retries, cfg.seed)?;
    write_jsonl(&l.generated(), &recs)?;
    let valid = recs.iter().filter(|r| r.valid).count();
    println!("{} records, {valid} valid, {} short", recs.len(), recs.len() - valid);
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReconstructionFile {
    trajectories: usize,
    mean_displacement_m: f64,
    mean_step_m: f64,
    ratio: f64,
}

pub fn reconstruct(cfg: &PipelineConfig) -> Result<()> {
    let l = Layout::new(&cfg.paths.dir);
    let net = read_network(&l.network())?;
    let (rq, stats) = load_rqvae(&l.rqvae())?;
    let test = trajectories(&l.test())?;
    let s = pipeline::reconstruct_all(&rq, &net, &stats, &test)?;
    write_jsonl(&l.reconstructed(), &s.trajectories)?;
    let summary = ReconstructionFile {
        trajectories: s.trajectories.len(),
        mean_displacement_m: s.mean_displacement_m,
        mean_step_m: s.mean_step_m,
        ratio: s.mean_displacement_m / s.mean_step_m,
    };
    write_json(&l.reconstruction_summary(), &summary)?;
    println!(
        "mean displacement {:.2} m, mean step {:.2} m (ratio {:.3})",
        summary.mean_displacement_m, summary.mean_step_m, summary.ratio
    );
    Ok(())
}

/// Real set from a trajectory file; generated set from a generation file,
/// or from a trajectory file when `gen_is_trajectories`.
pub fn evaluate(cfg: &PipelineConfig, real: Option<&Path>, gen: Option<&Path>, gen_is_trajectories: bool) -> Result<()> {
    let l = Layout::new(&cfg.paths.dir);
    let net = read_network(&l.network())?;
    let real_path = real.map_or_else(|| l.test(), Path::to_path_buf);
    let gen_path = gen.map_or_else(|| l.generated(), Path::to_path_buf);
    let real = pipeline::eval_set_real(&trajectories(&real_path)?);
    require(&gen_path, "generate")?;
    let gen: Vec<EvalTrajectory> = if gen_is_trajectories {
        pipeline::eval_set_real(&read_jsonl::<GpsTrajectory>(&gen_path)?)
    } else {
        let recs: Vec<GenerationRecord> = read_jsonl(&gen_path)?;
        let vocab = read_vocab(&l)?;
        let ids: Vec<Vec<usize>> = recs
            .iter()
            .map(|r| vocab.parse_sequence(&r.tokens).unwrap_or_default())
            .collect();
        let v = structural_validity(&ids, &vocab);
        info!("structural validity {:.3} ({:?})", v.validity, v.errors);
        pipeline::eval_set_generated(&recs)
    };
    let report = pipeline::evaluate(&net, cfg, &real, &gen)?;
    write_json(&l.report(), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| HtpError::data(e.to_string()))?);
    Ok(())
}

pub fn plot(cfg: &PipelineConfig, svg: bool) -> Result<()> {
    let l = Layout::new(&cfg.paths.dir);
    let net = read_network(&l.network())?;
    let real = trajectories(&l.test())?;
    require(&l.generated(), "generate")?;
    let gen: Vec<GenerationRecord> = read_jsonl(&l.generated())?;
    let gen_pts: Vec<&[htp_core::geo::LonLat]> = gen.iter().filter(|r| r.valid).map(|r| r.points.as_slice()).collect();
    let real_pts: Vec<&[htp_core::geo::LonLat]> = real.iter().map(|t| t.points.as_slice()).collect();
    let grid = pipeline::metric_grid(&pipeline::dataset_bbox(&net, &cfg.sim), &cfg.metrics)?;
    let written = plot::write_all(&l.plots(), &real_pts, &gen_pts, &grid, svg)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

/// Prints the finite-difference table; fails when any check fails.
pub fn gradcheck(seed: u64) -> Result<()> {
    let mut rows: Vec<CheckResult> = layer_suite(seed)?;
    rows.push(CheckResult {
        name: "encoder -> quantizer -> decoder".into(),
        max_rel_error: full_path_gradcheck(seed, 24)?,
        tolerance: 1e-3,
    });
    println!("{:<36} {:>12} {:>10}  result", "check", "max rel err", "tolerance");
    let mut failed = 0;
    for r in &rows {
        let ok = r.passed();
        failed += usize::from(!ok);
        println!(
            "{:<36} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(HtpError::Numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

/// Every stage in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<()> {
    synth_city(cfg)?;
    synth_data(cfg)?;
    make_labels(cfg)?;
    train_rqvae(cfg)?;
    tokenize(cfg)?;
    export_sft(cfg)?;
    train_lm(cfg)?;
    generate(cfg, None)?;
    reconstruct(cfg)?;
    evaluate(cfg, None, None, false)?;
    plot(cfg, true)
}
