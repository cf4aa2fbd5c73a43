//! SSL objectives: InfoNCE over a negative queue, intermediate MSE between
//! pooled block taps, Barlow Twins on cross-correlation matrices, and their
//! scaled combination over a block mask.

pub mod barlow;
pub mod info_nce;
pub mod intermediate;

pub use barlow::{barlow_twins_loss, cross_correlation};
pub use info_nce::info_nce_loss;
pub use intermediate::{combined_loss, intermediate_mse_loss};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfoNceConfig {
    pub temperature: f64,
    pub queue_size: usize,
}

impl Default for InfoNceConfig {
    fn default() -> Self {
        InfoNceConfig {
            temperature: 0.07,
            queue_size: 65536,
        }
    }
}

impl InfoNceConfig {
    /// Desk-scale default: standard temperature, small queue.
    pub fn desk_scale() -> Self {
        InfoNceConfig {
            temperature: 0.07,
            queue_size: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.queue_size == 0 {
            return Err(Error::Config("queue_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarlowConfig {
    pub lambda: f64,
    pub scale: f64,
}

impl Default for BarlowConfig {
    fn default() -> Self {
        BarlowConfig {
            lambda: 5e-3,
            scale: 5e-5,
        }
    }
}

impl BarlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.scale < 0.0 {
            return Err(Error::Config(format!("scale must be >= 0, got {}", self.scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MseConfig {
    pub scale: f64,
}

impl Default for MseConfig {
    fn default() -> Self {
        MseConfig { scale: 0.25 }
    }
}

impl MseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 0.0 {
            return Err(Error::Config(format!("scale must be >= 0, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Set of 1-indexed block numbers receiving the intermediate loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    blocks: BTreeSet<usize>,
}

impl BlockMask {
    pub fn all(num_blocks: usize) -> Self {
        BlockMask {
            blocks: (1..=num_blocks).collect(),
        }
    }

    pub fn from_blocks(blocks: impl IntoIterator<Item = usize>) -> Self {
        BlockMask {
            blocks: blocks.into_iter().collect(),
        }
    }

    /// Parse a comma-separated list such as `"1,2,3,4"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut blocks = BTreeSet::new();
        for part in s.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let b: usize = part
                .parse()
                .map_err(|_| Error::Config(format!("bad block index {part:?} in mask {s:?}")))?;
            blocks.insert(b);
        }
        if blocks.is_empty() {
            return Err(Error::Config(format!("block mask {s:?} is empty")));
        }
        Ok(BlockMask { blocks })
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("block mask must be nonempty".into()));
        }
        for &b in &self.blocks {
            if b == 0 || b > num_blocks {
                return Err(Error::Config(format!(
                    "block mask references block {b}, model has blocks 1..={num_blocks}"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, block_1indexed: usize) -> bool {
        self.blocks.contains(&block_1indexed)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().copied()
    }

    pub fn to_string_spec(&self) -> String {
        self.blocks
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}
