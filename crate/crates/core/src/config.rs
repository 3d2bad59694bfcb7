use serde::{Deserialize, Serialize};

use crate::cache::LineGeometry;
use crate::page::PageGeometry;

/// Report thresholds. An issue is reported when its score reaches the
/// threshold and listed as informational within a factor of ten below it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub remote_min: f64,
    pub sharing_min: f64,
    pub migration_min: f64,
    pub duplicate_read_fraction: f64,
    pub imbalance_ratio: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            remote_min: 1500.0,
            sharing_min: 1.0,
            migration_min: 150.0,
            duplicate_read_fraction: 0.9,
            imbalance_ratio: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerConfig {
    pub page_size: u64,
    pub line_size: u64,
    pub word_size: u64,
    pub blocks_per_page: u64,
    pub page_detail_threshold: u64,
    pub word_track_threshold: u64,
    /// Share of a page's accesses its dominant thread span must cover.
    pub span_quantile: f64,
    pub thresholds: Thresholds,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        AnalyzerConfig {
            page_size: 4096,
            line_size: 64,
            word_size: 8,
            blocks_per_page: 64,
            page_detail_threshold: 64,
            word_track_threshold: 16,
            span_quantile: 0.9,
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("--{flag}: {reason}")]
pub struct ConfigError {
    pub flag: &'static str,
    pub reason: String,
}

fn err(flag: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        flag,
        reason: reason.into(),
    }
}

impl AnalyzerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (flag, v) in [
            ("page-size", self.page_size),
            ("line-size", self.line_size),
            ("word-size", self.word_size),
        ] {
            if !v.is_power_of_two() {
                return Err(err(flag, format!("{v} is not a power of two")));
            }
        }
        if self.word_size > self.line_size {
            return Err(err("word-size", "must not exceed --line-size"));
        }
        if self.line_size > self.page_size {
            return Err(err("line-size", "must not exceed --page-size"));
        }
        if self.blocks_per_page == 0
            || !self.page_size.is_multiple_of(self.blocks_per_page)
            || !(self.page_size / self.blocks_per_page).is_power_of_two()
        {
            return Err(err(
                "blocks-per-page",
                format!("must divide --page-size ({}) into power-of-two blocks", self.page_size),
            ));
        }
        if self.page_size / self.blocks_per_page < self.word_size {
            return Err(err("blocks-per-page", "blocks would be smaller than a word"));
        }
        if !(self.span_quantile > 0.0 && self.span_quantile <= 1.0) {
            return Err(err("span-quantile", "must lie in (0, 1]"));
        }
        let t = &self.thresholds;
        for (flag, v) in [
            ("remote-min", t.remote_min),
            ("sharing-min", t.sharing_min),
            ("migration-min", t.migration_min),
            ("duplicate-read-fraction", t.duplicate_read_fraction),
            ("imbalance-ratio", t.imbalance_ratio),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(err(flag, format!("{v} must be a positive number")));
            }
        }
        Ok(())
    }

    pub fn page_geometry(&self) -> PageGeometry {
        PageGeometry {
            page_size: self.page_size,
            blocks_per_page: self.blocks_per_page,
            detail_threshold: self.page_detail_threshold,
        }
    }

    pub fn line_geometry(&self) -> LineGeometry {
        LineGeometry {
            line_size: self.line_size,
            word_size: self.word_size,
            word_track_threshold: self.word_track_threshold,
        }
    }
}
