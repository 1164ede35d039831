//! Run configuration. Every constant carries the symbol it is known by in
//! the detection literature (`R`, `K`, `phi`, `lambda1`, ...), so the file
//! reads as a direct parameter table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;

/// Environment variable naming the default config file for the CLI.
pub const CONFIG_ENV: &str = "CENTERFPA_CONFIG";

/// The fifteen object categories of the aerial benchmark the defaults target.
pub const DEFAULT_CLASSES: [&str; 15] = [
    "plane",
    "ship",
    "storage-tank",
    "baseball-diamond",
    "tennis-court",
    "basketball-court",
    "ground-track-field",
    "harbor",
    "bridge",
    "large-vehicle",
    "small-vehicle",
    "helicopter",
    "roundabout",
    "soccer-ball-field",
    "swimming-pool",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output stride between input image and head maps.
    #[serde(rename = "R")]
    pub output_stride: usize,
    /// Maximum number of peaks decoded per image.
    #[serde(rename = "K")]
    pub max_objects: usize,
    /// Heatmap value at or above which a cell is a positive sample.
    pub phi: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Weight of the size loss.
    pub lambda1: f64,
    /// Weight of the offset loss.
    pub lambda2: f64,
    pub tile: usize,
    pub stride: usize,
    pub nms_iou: f64,
    /// IoU above which a detection matches a ground truth during evaluation.
    pub match_iou: f64,
    /// Decoded peaks scoring below this are discarded before NMS.
    pub score_floor: f64,
    pub scales: Vec<f64>,
    pub classes: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            output_stride: 4,
            max_objects: 160,
            phi: 1.0,
            alpha: 2.0,
            beta: 4.0,
            lambda1: 0.1,
            lambda2: 1.0,
            tile: 1024,
            stride: 824,
            nms_iou: 0.45,
            match_iou: 0.5,
            score_floor: 0.05,
            scales: vec![0.5, 1.0, 1.5],
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            phi: self.phi,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn class_id(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn class_name(&self, id: usize) -> Result<&str> {
        self.classes
            .get(id)
            .map(String::as_str)
            .ok_or(Error::ClassOutOfRange {
                class_id: id,
                num_classes: self.classes.len(),
            })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.output_stride == 0 {
            return fail("R must be positive".into());
        }
        if self.max_objects == 0 {
            return fail("K must be positive".into());
        }
        if !(self.phi > 0.0 && self.phi <= 1.0) {
            return fail(format!("phi must lie in (0, 1], got {}", self.phi));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return fail("alpha and beta must be non-negative".into());
        }
        if !(self.lambda1.is_finite() && self.lambda2.is_finite()) {
            return fail("lambda1 and lambda2 must be finite".into());
        }
        if self.stride == 0 || self.stride > self.tile {
            return fail(format!(
                "tile stride {} must lie in 1..={}",
                self.stride, self.tile
            ));
        }
        if !self.tile.is_multiple_of(self.output_stride) {
            return fail(format!(
                "tile {} is not a multiple of R = {}",
                self.tile, self.output_stride
            ));
        }
        for (name, v) in [
            ("nms_iou", self.nms_iou),
            ("match_iou", self.match_iou),
            ("score_floor", self.score_floor),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return fail(format!("scales must be non-empty and positive: {:?}", self.scales));
        }
        if self.classes.is_empty() {
            return fail("at least one class is required".into());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.is_empty() || c.chars().any(char::is_whitespace) {
                return fail(format!("class name {c:?} must be non-empty without whitespace"));
            }
            if self.classes[..i].contains(c) {
                return fail(format!("duplicate class name {c:?}"));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a class-list file: one class name per line, blank lines ignored.
pub fn read_class_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}
