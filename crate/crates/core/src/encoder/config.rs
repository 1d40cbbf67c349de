use serde::{Deserialize, Serialize};

use crate::error::{Result, VaceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Depthwise first stage; channels mix only in the pointwise head.
    ChannelAware,
    /// First stage is a full convolution over all input channels.
    SharedKernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub patch_len: usize,
    pub d_z: usize,
    pub c_e: usize,
    pub kernel_sizes: Vec<usize>,
    pub variant: EncoderVariant,
    pub batchnorm: bool,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(channels: usize, patch_len: usize) -> Self {
        Self {
            channels,
            patch_len,
            d_z: 64,
            c_e: 8,
            kernel_sizes: vec![9, 7, 5, 3],
            variant: EncoderVariant::ChannelAware,
            batchnorm: true,
            seed: 0,
        }
    }

    /// Number of feature maps produced by each depthwise stage.
    pub fn feature_maps(&self) -> usize {
        self.channels * self.c_e
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(VaceError::Config("encoder needs at least one input channel".into()));
        }
        if self.c_e == 0 {
            return Err(VaceError::Config("channel expansion must be at least 1".into()));
        }
        if self.d_z < 2 {
            return Err(VaceError::Config("embedding dimension must be at least 2".into()));
        }
        if self.kernel_sizes.is_empty() {
            return Err(VaceError::Config("at least one convolution stage is required".into()));
        }
        for &k in &self.kernel_sizes {
            if k % 2 == 0 || k > self.patch_len {
                return Err(VaceError::Config(format!(
                    "kernel size {k} must be odd and at most the patch length {}",
                    self.patch_len
                )));
            }
        }
        Ok(())
    }
}
