use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output classes of the classifier head.
pub const CLASSES: usize = 2;

/// One convolution stage: `filters` square kernels of side `kernel`, followed
/// by batch normalization and ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
}

const fn stage(filters: usize, kernel: usize) -> ConvStage {
    ConvStage { filters, kernel }
}

/// Three conv stages of one encoder column; pooling follows stages 1 and 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteColumnSpec {
    pub stages: [ConvStage; 3],
}

impl SteColumnSpec {
    pub fn out_channels(&self) -> usize {
        self.stages[2].filters
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StannConfig {
    pub n_channels: usize,
    pub timesteps: usize,
    pub columns: Vec<SteColumnSpec>,
    /// Dropout after the first and second pooling of every column.
    pub ste_dropout: [f64; 2],
    pub hidden: usize,
    /// Dropout after the first and second BiLSTM layer.
    pub ran_dropout: [f64; 2],
    pub dense: usize,
}

impl StannConfig {
    /// Full-size network for `n` channels and `k` samples per window.
    pub fn full(n_channels: usize, timesteps: usize) -> Self {
        Self {
            n_channels,
            timesteps,
            columns: vec![
                SteColumnSpec { stages: [stage(25, 5), stage(50, 3), stage(25, 3)] },
                SteColumnSpec { stages: [stage(30, 5), stage(60, 3), stage(30, 3)] },
                SteColumnSpec { stages: [stage(40, 3), stage(80, 1), stage(40, 1)] },
            ],
            ste_dropout: [0.5, 0.4],
            hidden: 80,
            ran_dropout: [0.3, 0.2],
            dense: 128,
        }
    }

    /// Same topology with narrow layers, sized for single-core test runs.
    pub fn desk(n_channels: usize, timesteps: usize) -> Self {
        Self {
            columns: vec![
                SteColumnSpec { stages: [stage(4, 5), stage(8, 3), stage(4, 3)] },
                SteColumnSpec { stages: [stage(4, 5), stage(6, 3), stage(4, 3)] },
                SteColumnSpec { stages: [stage(4, 3), stage(8, 1), stage(4, 1)] },
            ],
            hidden: 8,
            dense: 16,
            ..Self::full(n_channels, timesteps)
        }
    }

    /// Single-filter columns and a two-unit recurrent layer.
    pub fn tiny(n_channels: usize, timesteps: usize) -> Self {
        Self {
            columns: vec![
                SteColumnSpec { stages: [stage(1, 5), stage(1, 3), stage(1, 3)] },
                SteColumnSpec { stages: [stage(1, 5), stage(1, 3), stage(1, 3)] },
                SteColumnSpec { stages: [stage(1, 3), stage(1, 1), stage(1, 1)] },
            ],
            hidden: 2,
            dense: 4,
            ..Self::full(n_channels, timesteps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels < 4 || self.timesteps < 4 {
            return Err(Error::arg(format!(
                "input {}x{} is too small for two 2x2 poolings",
                self.n_channels, self.timesteps
            )));
        }
        if self.columns.is_empty() {
            return Err(Error::arg("encoder needs at least one column"));
        }
        for (c, col) in self.columns.iter().enumerate() {
            for (s, st) in col.stages.iter().enumerate() {
                if st.filters == 0 || st.kernel % 2 == 0 {
                    return Err(Error::arg(format!(
                        "column {} stage {} needs filters > 0 and an odd kernel (got {}x{})",
                        c + 1,
                        s + 1,
                        st.filters,
                        st.kernel
                    )));
                }
            }
        }
        for &r in self.ste_dropout.iter().chain(&self.ran_dropout) {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::arg(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        if self.hidden == 0 || self.dense == 0 {
            return Err(Error::arg("hidden and dense widths must be positive"));
        }
        Ok(())
    }

    /// Spatial size of the encoder output after two poolings.
    pub fn ste_dims(&self) -> (usize, usize) {
        (self.n_channels / 4, self.timesteps / 4)
    }

    pub fn merged_channels(&self) -> usize {
        self.columns.iter().map(SteColumnSpec::out_channels).sum()
    }

    pub fn fusion_width(&self) -> usize {
        let (h, w) = self.ste_dims();
        h * w + 2 * self.hidden
    }
}
