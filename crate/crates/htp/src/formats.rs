//! On-disk formats: JSON documents and JSON Lines record files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use htp_core::geo::LonLat;
use htp_core::nn::{ParamStore, Tensor2};
use htp_core::patternlm::{ConditionBuckets, LmConfig};
use htp_core::roadnet::{RoadNetwork, RoadSegment};
use htp_core::rqvae::{ParityRecord, PatternCode, RqCodebooks, RqvaeConfig};
use htp_core::tokens::{QaConditions, Vocabulary};
use htp_core::traj::{DatasetStats, RelativeLabels};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HtpError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HtpError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HtpError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HtpError::data(e.to_string()))?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HtpError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| HtpError::io(path, e))
}

/// Reads one record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| HtpError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| HtpError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| HtpError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HtpError::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| HtpError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(|e| HtpError::data(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| HtpError::io(path, e))?;
    }
    w.flush().map_err(|e| HtpError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: usize,
    pub points: Vec<LonLat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// Road network file: segments ordered by id plus `(from, to)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    pub segments: Vec<SegmentRecord>,
    pub adjacency: Vec<[usize; 2]>,
}

impl NetworkFile {
    pub fn from_network(net: &RoadNetwork) -> Self {
        Self {
            segments: net
                .segments()
                .iter()
                .map(|s| SegmentRecord {
                    id: s.id,
                    points: s.geometry.points().to_vec(),
                    name: s.name.clone(),
                })
                .collect(),
            adjacency: net.adjacency_pairs().into_iter().map(|(i, j)| [i, j]).collect(),
        }
    }

    pub fn to_network(&self) -> Result<RoadNetwork> {
        let segs = self
            .segments
            .iter()
            .map(|s| RoadSegment::new(s.id, s.points.clone(), s.name.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let adj: Vec<(usize, usize)> = self.adjacency.iter().map(|p| (p[0], p[1])).collect();
        Ok(RoadNetwork::new(segs, &adj)?)
    }
}

pub fn read_network(path: &Path) -> Result<RoadNetwork> {
    read_json::<NetworkFile>(path)?.to_network()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: u64,
    pub rel_percent: Vec<f64>,
    pub offsets: Vec<[f64; 2]>,
}

impl LabelRecord {
    pub fn new(id: u64, l: RelativeLabels) -> Self {
        Self {
            id,
            rel_percent: l.rel_percent,
            offsets: l.offsets,
        }
    }

    pub fn labels(&self) -> RelativeLabels {
        RelativeLabels {
            rel_percent: self.rel_percent.clone(),
            offsets: self.offsets.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqvaeCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: RqvaeConfig,
    pub stats: DatasetStats,
    pub params: ParamStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: LmConfig,
    pub vocab: Vocabulary,
    pub buckets: ConditionBuckets,
    pub params: ParamStore,
}

pub fn check_header(path: &Path, format: &str, want: &str, version: u32) -> Result<()> {
    if format != want {
        return Err(HtpError::data(format!(
            "{}: expected a {want} checkpoint, found {format}",
            path.display()
        )));
    }
    if version != CHECKPOINT_VERSION {
        return Err(HtpError::data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookRecord {
    pub level: usize,
    pub size: usize,
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

pub fn codebook_records(books: &RqCodebooks) -> Vec<CodebookRecord> {
    books
        .levels()
        .iter()
        .enumerate()
        .map(|(level, t)| CodebookRecord {
            level,
            size: t.rows(),
            dim: t.cols(),
            rows: (0..t.rows()).map(|r| t.row(r).to_vec()).collect(),
        })
        .collect()
}

pub fn codebooks_from_records(recs: &[CodebookRecord]) -> Result<RqCodebooks> {
    let mut levels = Vec::with_capacity(recs.len());
    for (i, r) in recs.iter().enumerate() {
        if r.level != i || r.rows.len() != r.size || r.rows.iter().any(|row| row.len() != r.dim) {
            return Err(HtpError::data(format!("codebook record {i} is inconsistent")));
        }
        let data: Vec<f64> = r.rows.iter().flatten().copied().collect();
        levels.push(Tensor2::from_vec(r.size, r.dim, data)?);
    }
    Ok(RqCodebooks::new(levels)?)
}

/// Pattern code of one trajectory, level-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRecord {
    pub traj_id: u64,
    pub parity_bits: [u8; 3],
    pub indices: Vec<Vec<usize>>,
}

impl CodeRecord {
    pub fn new(traj_id: u64, code: &PatternCode) -> Self {
        Self {
            traj_id,
            parity_bits: code.parity.to_ints(),
            indices: code.indices.clone(),
        }
    }

    pub fn code(&self) -> Result<PatternCode> {
        let parity = ParityRecord::from_ints(self.parity_bits)
            .ok_or_else(|| HtpError::data(format!("trajectory {}: parity bits must be 0 or 1", self.traj_id)))?;
        Ok(PatternCode {
            indices: self.indices.clone(),
            parity,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabFile {
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub codebook_sizes: Vec<usize>,
    pub tokens: BTreeMap<String, usize>,
}

impl VocabFile {
    pub fn new(vocab: &Vocabulary) -> Self {
        Self {
            v: vocab.num_roads(),
            l: vocab.levels(),
            codebook_sizes: vocab.codebook_sizes().to_vec(),
            tokens: vocab.to_map(),
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let v = Vocabulary::new(self.v, self.codebook_sizes.clone())?;
        if v.levels() != self.l || v.to_map() != self.tokens {
            return Err(HtpError::data("vocabulary file does not match its metadata"));
        }
        Ok(v)
    }
}

/// One generated trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: u64,
    /// Id of the held-out trajectory whose conditions were used.
    pub source_id: u64,
    pub conditions: QaConditions,
    pub tokens: String,
    pub valid: bool,
    pub attempts: usize,
    /// Empty unless valid.
    pub points: Vec<LonLat>,
}
