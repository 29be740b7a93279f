//! Run-wide defaults in one place.

use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::loss::BootstrapParams;
use crate::optim::{TrainConfig, DEFAULT_EPOCHS, DEFAULT_LR0, DEFAULT_MOMENTUM};
use crate::scoring::{Connectivity, ScoringParams, CAC_HU_THRESHOLD, DEFAULT_PROB_THRESHOLD, MIN_LESION_MM2};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Config {
    pub prob_threshold: f64,
    pub hu_threshold: i16,
    pub min_lesion_mm2: f64,
    pub connectivity: Connectivity,
    pub bootstrap: BootstrapParams,
    pub lr0: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            prob_threshold: DEFAULT_PROB_THRESHOLD,
            hu_threshold: CAC_HU_THRESHOLD,
            min_lesion_mm2: MIN_LESION_MM2,
            connectivity: Connectivity::Volume26,
            bootstrap: BootstrapParams::default(),
            lr0: DEFAULT_LR0,
            momentum: DEFAULT_MOMENTUM,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.scoring().validate()?;
        self.bootstrap.validate()?;
        if !(self.lr0 > 0.0) {
            return Err(invalid!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if self.epochs == 0 {
            return Err(invalid!("epochs must be positive"));
        }
        Ok(())
    }

    pub fn scoring(&self) -> ScoringParams {
        ScoringParams {
            prob_threshold: self.prob_threshold,
            hu_threshold: self.hu_threshold,
            min_lesion_mm2: self.min_lesion_mm2,
            connectivity: self.connectivity,
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr0: self.lr0,
            momentum: self.momentum,
            bootstrap: self.bootstrap,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// `key value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let rows: [(&str, String); 11] = [
            ("prob_threshold", format!("{:?}", self.prob_threshold)),
            ("hu_threshold", self.hu_threshold.to_string()),
            ("min_lesion_mm2", format!("{:?}", self.min_lesion_mm2)),
            ("connectivity", self.connectivity.to_string()),
            ("bootstrap_t", format!("{:?}", self.bootstrap.t)),
            ("bootstrap_alpha", format!("{:?}", self.bootstrap.alpha)),
            ("bootstrap_beta", format!("{:?}", self.bootstrap.beta)),
            ("lr0", format!("{:?}", self.lr0)),
            ("momentum", format!("{:?}", self.momentum)),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k} {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::default();
        let text = c.render();
        for line in [
            "prob_threshold 0.5",
            "hu_threshold 130",
            "min_lesion_mm2 1.0",
            "connectivity 26",
            "bootstrap_t 0.9",
            "bootstrap_alpha 8.0",
            "bootstrap_beta 1.0",
            "lr0 0.001",
            "momentum 0.9",
            "epochs 25",
        ] {
            assert!(text.lines().any(|l| l == line), "{line}");
        }
        assert!(c.validate().is_ok());
    }
}
