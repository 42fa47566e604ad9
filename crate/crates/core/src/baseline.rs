//! Textbook SRP-PHAT direction estimator built on GCC-PHAT cross spectra.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dictionary::{ArrayGeometry, Direction};
use crate::error::{Error, Result};
use crate::frontend::{band_bins, SpectralFrame};

/// PHAT-weighted cross spectrum `X conj(Y) / |X conj(Y)|`; zero bins stay zero.
pub fn gcc_phat_spectrum(x: &[Complex64], y: &[Complex64]) -> Vec<Complex64> {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let c = a * b.conj();
            let n = c.norm();
            if n > 0.0 {
                c / n
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect()
}

/// Circular GCC from a one-sided `x conj(y)` spectrum of an `n_fft`-point
/// transform, upsampled by `oversample` via zero padding. Index `i` holds lag
/// `i / oversample` samples, the delay of `y` relative to `x`; negative lags
/// wrap to the end.
pub fn gcc_phat_lags(one_sided: &[Complex64], n_fft: usize, oversample: usize) -> Vec<f64> {
    let n = n_fft * oversample;
    let half = n_fft / 2;
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    for (k, v) in one_sided.iter().enumerate().take(half + 1) {
        // y conj(x) puts the peak at the delay of y
        full[k] = v.conj();
        if k != 0 && k != half {
            full[n - k] = *v;
        }
    }
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    ifft.process(&mut full);
    full.iter().map(|v| v.re / n_fft as f64).collect()
}

/// Signed lag (samples, fractional when oversampled) of the largest value.
pub fn peak_lag(lags: &[f64], oversample: usize) -> f64 {
    let n = lags.len();
    let best = lags
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    let signed = if best > n / 2 {
        best as f64 - n as f64
    } else {
        best as f64
    };
    signed / oversample as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FrameAggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrpConfig {
    pub azimuths: Vec<f64>,
    /// Polar angles searched; the map keeps the best level per azimuth.
    pub elevations: Vec<f64>,
    pub band_hz: (f64, f64),
    pub aggregation: FrameAggregation,
    pub speed_of_sound: f64,
}

impl SrpConfig {
    pub fn new(azimuths: Vec<f64>) -> Self {
        Self {
            azimuths,
            elevations: vec![TAU / 4.0],
            band_hz: (300.0, 4000.0),
            aggregation: FrameAggregation::Mean,
            speed_of_sound: crate::dictionary::DEFAULT_SPEED_OF_SOUND,
        }
    }
}

/// Precomputed pair steering phases for one array and bin layout.
pub struct SrpPhat {
    cfg: SrpConfig,
    pairs: Vec<(usize, usize)>,
    bins: std::ops::Range<usize>,
    /// `[candidate][pair][bin]` flattened, candidate = elevation-major.
    steering: Vec<Complex64>,
}

impl SrpPhat {
    pub fn new(geometry: &ArrayGeometry, bin_frequencies: &[f64], cfg: SrpConfig) -> Result<Self> {
        geometry.validate()?;
        if cfg.azimuths.is_empty() || cfg.elevations.is_empty() {
            return Err(Error::Config("SRP grid is empty".into()));
        }
        let bins = band_bins(bin_frequencies, cfg.band_hz);
        if bins.is_empty() {
            return Err(Error::Config(format!("no bins in band {:?}", cfg.band_hz)));
        }
        let m = geometry.mic_count();
        let pairs: Vec<(usize, usize)> = (0..m)
            .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
            .collect();
        let c = cfg.speed_of_sound;
        let mut steering = Vec::with_capacity(
            cfg.elevations.len() * cfg.azimuths.len() * pairs.len() * bins.len(),
        );
        for &theta in &cfg.elevations {
            for &phi in &cfg.azimuths {
                let u = Direction::new(theta, phi).unit_vector();
                let tau: Vec<f64> = geometry
                    .mic_positions
                    .iter()
                    .map(|r| -(r[0] * u[0] + r[1] * u[1] + r[2] * u[2]) / c)
                    .collect();
                for &(i, j) in &pairs {
                    for b in bins.clone() {
                        steering.push(Complex64::from_polar(
                            1.0,
                            bin_frequencies[b] * (tau[i] - tau[j]),
                        ));
                    }
                }
            }
        }
        Ok(Self {
            cfg,
            pairs,
            bins,
            steering,
        })
    }

    /// Steered response power of one frame over the azimuth grid.
    pub fn frame_map(&self, frame: &SpectralFrame) -> Vec<f64> {
        let nb = self.bins.len();
        let np = self.pairs.len();
        let cross: Vec<Vec<Complex64>> = self
            .pairs
            .iter()
            .map(|&(i, j)| {
                let x: Vec<Complex64> = self.bins.clone().map(|b| frame.spectra[b][i]).collect();
                let y: Vec<Complex64> = self.bins.clone().map(|b| frame.spectra[b][j]).collect();
                gcc_phat_spectrum(&x, &y)
            })
            .collect();
        let n_az = self.cfg.azimuths.len();
        let mut map = vec![f64::NEG_INFINITY; n_az];
        for e in 0..self.cfg.elevations.len() {
            for (a, slot) in map.iter_mut().enumerate() {
                let cand = e * n_az + a;
                let mut p = 0.0;
                for (pi, g) in cross.iter().enumerate() {
                    let s = &self.steering[(cand * np + pi) * nb..(cand * np + pi + 1) * nb];
                    for (x, w) in g.iter().zip(s) {
                        p += x.re * w.re - x.im * w.im;
                    }
                }
                if p > *slot {
                    *slot = p;
                }
            }
        }
        map
    }

    /// Aggregated map over frames that carry any signal.
    pub fn map(&self, frames: &[SpectralFrame]) -> Result<Vec<f64>> {
        let active: Vec<&SpectralFrame> = frames
            .iter()
            .filter(|f| {
                self.bins
                    .clone()
                    .any(|b| f.spectra[b].iter().any(|v| v.norm_sqr() > 0.0))
            })
            .collect();
        if active.is_empty() {
            return Err(Error::NoEstimate("silent input".into()));
        }
        let maps: Vec<Vec<f64>> = active.par_iter().map(|f| self.frame_map(f)).collect();
        let n_az = self.cfg.azimuths.len();
        let out = match self.cfg.aggregation {
            FrameAggregation::Mean => (0..n_az)
                .map(|a| maps.iter().map(|m| m[a]).sum::<f64>() / maps.len() as f64)
                .collect(),
            FrameAggregation::Max => (0..n_az)
                .map(|a| maps.iter().map(|m| m[a]).fold(f64::NEG_INFINITY, f64::max))
                .collect(),
        };
        Ok(out)
    }

    pub fn estimate(&self, frames: &[SpectralFrame]) -> Result<f64> {
        let map = self.map(frames)?;
        let mut best = 0;
        for i in 1..map.len() {
            if map[i] > map[best] {
                best = i;
            }
        }
        Ok(self.cfg.azimuths[best])
    }
}

/// One-shot SRP-PHAT azimuth estimate.
pub fn srp_phat_estimate(
    frames: &[SpectralFrame],
    geometry: &ArrayGeometry,
    cfg: &SrpConfig,
) -> Result<f64> {
    let first = frames
        .first()
        .ok_or_else(|| Error::NoEstimate("no frames".into()))?;
    SrpPhat::new(geometry, &first.bin_frequencies, cfg.clone())?.estimate(frames)
}
