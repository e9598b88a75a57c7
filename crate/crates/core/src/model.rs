//! Full pipeline configuration and the parameter layout it implies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::instance;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub decoder: DecoderConfig,
    /// Position-sensitive grid size of the instance head.
    pub k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            decoder: DecoderConfig::default(),
            k: 7,
        }
    }
}

impl ModelConfig {
    pub fn with_classes(classes: usize) -> Self {
        let mut cfg = Self::default();
        cfg.detector.classes = classes;
        cfg
    }
}

/// Detector and decoder built from one [`ModelConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub detector: Detector,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        if cfg.decoder.level_channels != cfg.detector.channels {
            return Err(Error::InvalidArgument(format!(
                "decoder levels {:?} do not match detector pyramid {:?}",
                cfg.decoder.level_channels, cfg.detector.channels
            )));
        }
        if cfg.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        Ok(Self {
            detector: Detector::new(cfg.detector.clone())?,
            decoder: Decoder::new(cfg.decoder.clone())?,
            cfg,
        })
    }

    pub fn classes(&self) -> usize {
        self.cfg.detector.classes
    }

    pub fn init_detector(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.detector.init_params(store, rng);
    }

    pub fn init_semantic(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.decoder.init_params(store, rng);
        self.decoder.init_semantic_head(store, rng);
    }

    pub fn init_instance(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.decoder.init_params(store, rng);
        instance::init_ps_head(store, self.cfg.decoder.top_channels, self.cfg.k, rng);
    }
}
