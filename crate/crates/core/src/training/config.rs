use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SPATIAL_MULTIPLE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub crop: usize,
    pub batch: usize,
    pub iters: usize,
    pub w_l1: f64,
    pub w_msssim: f64,
    pub w_deep: f64,
    /// Number of MS-SSIM scales requested (reduced automatically for small crops).
    pub msssim_scales: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping (`"none"` in config files).
    #[serde(with = "clip_serde")]
    pub clip_norm: Option<f64>,
    pub augment: bool,
    pub log_every: usize,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

mod clip_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Norm(f64),
        Off(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(c) => Repr::Norm(*c),
            None => Repr::Off("none".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Norm(c) => Ok(Some(c)),
            Repr::Off(s) if s == "none" => Ok(None),
            Repr::Off(s) => Err(serde::de::Error::custom(format!(
                "clip_norm must be a number or \"none\", got {s:?}"
            ))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_start: 1e-4,
            lr_end: 6.25e-6,
            schedule: Schedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            crop: 384,
            batch: 4,
            iters: 1000,
            w_l1: 1.0,
            w_msssim: 0.4,
            w_deep: 0.25,
            msssim_scales: 5,
            seed: 0,
            clip_norm: Some(1.0),
            augment: true,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("train config", d));
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return bad(format!(
                "need 0 < lr_end <= lr_start, got {} and {}",
                self.lr_end, self.lr_start
            ));
        }
        if self.crop == 0 || !self.crop.is_multiple_of(SPATIAL_MULTIPLE) {
            return bad(format!(
                "crop {} must be a positive multiple of {SPATIAL_MULTIPLE}",
                self.crop
            ));
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("need beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm {c} must be > 0"));
            }
        }
        if self.msssim_scales == 0 || self.msssim_scales > 5 {
            return bad(format!("msssim_scales {} outside 1..=5", self.msssim_scales));
        }
        Ok(())
    }
}
