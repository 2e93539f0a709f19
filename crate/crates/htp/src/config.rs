//! Pipeline configuration, read from TOML. Every field has a default, so a
//! config file only needs the values it changes.

use std::path::{Path, PathBuf};

use htp_core::metrics::MetricsConfig;
use htp_core::patternlm::{GenOptions, LmConfig, LmTrainConfig};
use htp_core::rqvae::{RqvaeConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HtpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub city: CityConfig,
    pub sim: SimConfig,
    pub rqvae: RqvaeSection,
    pub lm: LmSection,
    pub metrics: MetricsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            city: CityConfig::default(),
            sim: SimConfig::default(),
            rqvae: RqvaeSection::default(),
            lm: LmSection::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HtpError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            HtpError::Usage(msg) => HtpError::Usage(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HtpError::Usage(format!("malformed config: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding every pipeline artifact.
    pub dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("run") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CityConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing_m: f64,
    pub jitter_frac: f64,
}

impl Default for CityConfig {
    fn default() -> Self {
        Self {
            rows: 20,
            cols: 20,
            spacing_m: 250.0,
            jitter_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Trajectories kept after filtering.
    pub count: usize,
    pub test_fraction: f64,
    /// Each trip picks one of these sampling intervals.
    pub intervals_s: Vec<f64>,
    pub speed_min_mps: f64,
    pub speed_max_mps: f64,
    /// Per-segment speed multipliers are drawn from this range.
    pub segment_factor_min: f64,
    pub segment_factor_max: f64,
    pub zones: usize,
    pub zone_radius_min_m: f64,
    pub zone_radius_max_m: f64,
    pub zone_factor_min: f64,
    pub zone_factor_max: f64,
    pub gps_noise_m: f64,
    pub lane_offset_m: f64,
    /// Earliest and latest departure, hours.
    pub start_hour_min: f64,
    pub start_hour_max: f64,
    /// Margin added around the network to form the dataset bounding box.
    pub margin_m: f64,
    /// Give up after this many simulated trips.
    pub max_attempts: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            test_fraction: 0.1,
            intervals_s: vec![10.0, 15.0],
            speed_min_mps: 9.0,
            speed_max_mps: 13.0,
            segment_factor_min: 0.8,
            segment_factor_max: 1.2,
            zones: 6,
            zone_radius_min_m: 400.0,
            zone_radius_max_m: 700.0,
            zone_factor_min: 0.4,
            zone_factor_max: 0.6,
            gps_noise_m: 1.0,
            lane_offset_m: 5.0,
            start_hour_min: 6.0,
            start_hour_max: 22.0,
            margin_m: 300.0,
            max_attempts: 100_000,
        }
    }
}

/// Model hyper-parameters; the road vocabulary comes from the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RqvaeModelConfig {
    pub channels: [usize; 4],
    pub d_q: usize,
    pub head_dim: usize,
    pub codebook_sizes: Vec<usize>,
    pub beta: f64,
    pub road_dim: usize,
    pub road_layers: usize,
    pub road_ff: usize,
    pub head_hidden: usize,
}

impl Default for RqvaeModelConfig {
    fn default() -> Self {
        let c = RqvaeConfig::with_vocab(1);
        Self {
            channels: c.channels,
            d_q: c.d_q,
            head_dim: c.head_dim,
            codebook_sizes: c.codebook_sizes,
            beta: c.beta,
            road_dim: c.road_dim,
            road_layers: c.road_layers,
            road_ff: c.road_ff,
            head_hidden: c.head_hidden,
        }
    }
}

impl RqvaeModelConfig {
    pub fn with_vocab(&self, vocab: usize) -> RqvaeConfig {
        RqvaeConfig {
            channels: self.channels,
            d_q: self.d_q,
            head_dim: self.head_dim,
            codebook_sizes: self.codebook_sizes.clone(),
            beta: self.beta,
            road_dim: self.road_dim,
            road_layers: self.road_layers,
            road_ff: self.road_ff,
            head_hidden: self.head_hidden,
            vocab,
            percent_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RqvaeSection {
    pub model: RqvaeModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub model: LmConfig,
    pub train: LmTrainConfig,
    pub generate: GenOptions,
    /// Extra attempts per condition when a generation is invalid.
    pub retries: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        Self {
            model: LmConfig::default(),
            train: LmTrainConfig::default(),
            generate: GenOptions::default(),
            retries: 3,
        }
    }
}
