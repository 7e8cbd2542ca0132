//! Run configuration: one JSON document with a section per module.

use std::fs;
use std::path::Path;

use prospectr::clf::ClfConfig;
use prospectr::mae::MaeConfig;
use prospectr::preprocess::PreprocessConfig;
use prospectr::pu::{Metric, NegativeCount, SamplingConfig};
use prospectr::synth::WorldSpec;
use prospectr::xai::XaiConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RasterSection {
    /// Evaluate every `map_stride`-th pixel when predicting maps.
    pub map_stride: usize,
    /// Windows per encoder forward pass.
    pub batch: usize,
    /// Window side for raw-pixel features; 1 is the center pixel's band vector.
    pub raw_window: usize,
}

impl Default for RasterSection {
    fn default() -> Self {
        Self {
            map_stride: 1,
            batch: 64,
            raw_window: 1,
        }
    }
}

/// Similarity features for likely-negative selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityFeatures {
    /// Pretrained encoder features when an encoder is given, raw otherwise.
    #[default]
    Auto,
    Encoder,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PuSection {
    pub filter_range: f64,
    pub n_negatives: NegativeCount,
    pub metric: Metric,
    /// Oversample the minority class of the training split.
    pub oversample: bool,
    pub features: SimilarityFeatures,
}

impl Default for PuSection {
    fn default() -> Self {
        let s = SamplingConfig::default();
        Self {
            filter_range: s.filter_range,
            n_negatives: s.n_negatives,
            metric: s.metric,
            oversample: s.oversample,
            features: SimilarityFeatures::Auto,
        }
    }
}

impl PuSection {
    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            filter_range: self.filter_range,
            n_negatives: self.n_negatives,
            metric: self.metric,
            oversample: self.oversample,
        }
    }
}

/// The compared models of the results tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Frozen pretrained encoder + MLP head.
    Ssl,
    /// Same architecture trained end to end from scratch.
    Vit,
    /// MLP on raw pixels.
    Ann,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ssl => "ssl",
            Method::Vit => "vit",
            Method::Ann => "ann",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub filter_ranges: Vec<f64>,
    pub drop_fraction: f64,
    /// Methods compared by `ablate-sparsity`.
    pub sparsity_methods: Vec<Method>,
    /// Map stride used for the mean likelihood of `ablate-filter-range`.
    pub map_stride: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Ssl, Method::Vit, Method::Ann],
            alpha: 0.05,
            filter_ranges: vec![0.0, 0.10, 0.75],
            drop_fraction: 0.5,
            sparsity_methods: vec![Method::Ssl, Method::Vit],
            map_stride: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub raster: RasterSection,
    pub preprocess: PreprocessConfig,
    pub mae: MaeConfig,
    pub pu: PuSection,
    pub clf: ClfConfig,
    pub xai: XaiConfig,
    pub eval: EvalSection,
    pub synth: WorldSpec,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            raster: RasterSection::default(),
            preprocess: PreprocessConfig::default(),
            mae: MaeConfig::default(),
            pu: PuSection::default(),
            clf: ClfConfig::default(),
            xai: XaiConfig::default(),
            eval: EvalSection::default(),
            synth: WorldSpec::default(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| bad(format!("run config: {e}")))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| bad(format!("{}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(bad("seeds must list at least one seed"));
        }
        if self.raster.map_stride == 0 || self.eval.map_stride == 0 || self.raster.batch == 0 || self.raster.raw_window == 0 {
            return Err(bad("strides, batch and raw_window must be positive"));
        }
        self.preprocess.validate()?;
        self.mae.encoder.validate()?;
        if !(0.0..1.0).contains(&self.mae.mask_ratio) {
            return Err(bad(format!("mask ratio {} outside [0, 1)", self.mae.mask_ratio)));
        }
        self.pu.sampling().validate()?;
        if !(0.0..1.0).contains(&self.clf.dropout) {
            return Err(bad(format!("dropout {} outside [0, 1)", self.clf.dropout)));
        }
        if self.clf.mc_passes == 0 {
            return Err(bad("mc_passes must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.clf.threshold) {
            return Err(bad(format!("threshold {} outside [0, 1]", self.clf.threshold)));
        }
        if self.xai.steps < 8 || self.xai.stride == 0 {
            return Err(bad("xai needs at least 8 steps and a positive stride"));
        }
        if self.eval.methods.is_empty() || self.eval.sparsity_methods.is_empty() {
            return Err(bad("eval method lists must not be empty"));
        }
        if self.eval.alpha != 0.05 && self.eval.alpha != 0.01 {
            return Err(bad("eval alpha must be 0.05 or 0.01"));
        }
        if self.eval.filter_ranges.is_empty() || self.eval.filter_ranges.iter().any(|f| !(0.0..1.0).contains(f)) {
            return Err(bad("filter ranges must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.eval.drop_fraction) {
            return Err(bad("drop fraction must lie in [0, 1)"));
        }
        self.synth.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
