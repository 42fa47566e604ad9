//! Audio in, azimuth out: frontend, decomposition and likelihood fusion chained
//! over every frame of an utterance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::awd::{decompose_with_plan, AwdConfig, BandPlan};
use crate::dictionary::SteeringDictionary;
use crate::error::{Error, Result};
use crate::frontend::{
    stft_frames, track_noise_floor, MultichannelAudio, SpectralFrame, StftConfig,
};
use crate::likelihood::{
    aggregate_and_estimate, frame_likelihood, AggregateEstimate, BandWeights, LikelihoodConfig,
    LikelihoodGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub stft: StftConfig,
    pub noise_window_frames: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            noise_window_frames: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleConfig {
    pub frontend: FrontendConfig,
    pub awd: AwdConfig,
    pub likelihood: LikelihoodConfig,
    /// Largest inter-component delay the delay estimator must resolve, seconds.
    pub max_delay: f64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            awd: AwdConfig::default(),
            likelihood: LikelihoodConfig::default(),
            max_delay: 7.5e-3,
        }
    }
}

impl MleConfig {
    pub fn with_defaults() -> Self {
        Self::default()
    }
}

/// Result of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct MleOutput {
    pub estimate: AggregateEstimate,
    /// Per-frame grids, in frame order.
    pub frame_grids: Vec<LikelihoodGrid>,
}

/// Prepares spectral frames (STFT and SNR tracking) for `audio`.
pub fn analyze(audio: &MultichannelAudio, cfg: &FrontendConfig) -> Result<Vec<SpectralFrame>> {
    let mut frames = stft_frames(audio, &cfg.stft)?;
    track_noise_floor(&mut frames, cfg.noise_window_frames)?;
    Ok(frames)
}

pub struct MleEstimator<'a> {
    dict: &'a SteeringDictionary,
    cfg: MleConfig,
}

impl<'a> MleEstimator<'a> {
    pub fn new(dict: &'a SteeringDictionary, cfg: MleConfig) -> Result<Self> {
        cfg.awd.validate()?;
        cfg.likelihood.energy.validate()?;
        if !(cfg.likelihood.kappa > 0.0) {
            return Err(Error::Config(format!(
                "kappa must be > 0, got {}",
                cfg.likelihood.kappa
            )));
        }
        Ok(Self { dict, cfg })
    }

    pub fn config(&self) -> &MleConfig {
        &self.cfg
    }

    pub fn estimate(&self, audio: &MultichannelAudio) -> Result<MleOutput> {
        let frames = analyze(audio, &self.cfg.frontend)?;
        self.estimate_frames(&frames)
    }

    pub fn estimate_frames(&self, frames: &[SpectralFrame]) -> Result<MleOutput> {
        let first = frames
            .first()
            .ok_or_else(|| Error::NoEstimate("no frames".into()))?;
        let plan = BandPlan::new(&first.bin_frequencies, self.cfg.awd.band_hz, self.dict)?;
        self.cfg
            .likelihood
            .delay
            .validate(first.bin_spacing(), self.cfg.max_delay)?;
        let azimuths = self.dict.grid.azimuths();

        let frame_grids = frames
            .par_iter()
            .map(|frame| {
                let mut components =
                    decompose_with_plan(frame, self.dict, &self.cfg.awd, &plan)?.components;
                let band = BandWeights::from_frame(
                    frame,
                    plan.bins.clone(),
                    &self.cfg.likelihood.delay.weight,
                );
                Ok(frame_likelihood(&mut components, &band, &azimuths, &self.cfg.likelihood).0)
            })
            .collect::<Result<Vec<_>>>()?;
        let snr: Vec<f64> = frames.iter().map(|f| f.frame_snr_db).collect();
        let estimate =
            aggregate_and_estimate(&frame_grids, &snr, &self.cfg.likelihood.frame_weight)?;
        Ok(MleOutput {
            estimate,
            frame_grids,
        })
    }
}
