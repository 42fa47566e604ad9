//! Acoustic wave decomposition by broadband matching pursuit.
//!
//! Each component has one dictionary direction shared across the band and a
//! complex weight per frequency bin.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dictionary::SteeringDictionary;
use crate::error::{Error, Result};
use crate::frontend::{band_bins, SpectralFrame};

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalComponent {
    /// Index into the dictionary direction grid.
    pub direction_index: usize,
    pub theta: f64,
    pub phi: f64,
    /// Complex weight per analysis bin.
    pub alpha: Vec<Complex64>,
    pub energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AwdConfig {
    pub max_components: usize,
    pub residual_stop_ratio: f64,
    /// Analysis band in Hz.
    pub band_hz: (f64, f64),
    /// Cyclic refinement sweeps after each extraction (0 = plain pursuit):
    /// every earlier component is added back and its atom re-selected.
    pub refine_sweeps: usize,
    /// Least-squares re-fit of all weights on the selected atoms after every
    /// support change (orthogonal matching pursuit).
    pub reproject: bool,
    pub score_weighting: ScoreWeighting,
}

/// How bins are weighted in the atom-selection score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreWeighting {
    /// Correlation power summed over bins.
    #[default]
    Power,
    /// Each bin's correlation power divided by that bin's frame energy, so
    /// every bin gets an equal vote (as PHAT does for cross-correlation).
    Whitened,
}

impl Default for AwdConfig {
    fn default() -> Self {
        Self {
            max_components: 6,
            residual_stop_ratio: 0.05,
            band_hz: (300.0, 4000.0),
            refine_sweeps: 0,
            reproject: false,
            score_weighting: ScoreWeighting::Power,
        }
    }
}

impl AwdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_components == 0 {
            return Err(Error::Config("max_components must be >= 1".into()));
        }
        if !(self.residual_stop_ratio > 0.0 && self.residual_stop_ratio < 1.0) {
            return Err(Error::Config(format!(
                "residual_stop_ratio must be in (0, 1), got {}",
                self.residual_stop_ratio
            )));
        }
        if !(self.band_hz.0 > 0.0 && self.band_hz.1 > self.band_hz.0) {
            return Err(Error::Config(format!("invalid band {:?}", self.band_hz)));
        }
        Ok(())
    }
}

/// Mapping from frame bins in the analysis band to dictionary frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPlan {
    /// Frame bin indices, ascending and contiguous.
    pub bins: std::ops::Range<usize>,
    /// Dictionary frequency index for each band bin.
    pub dict_freqs: Vec<usize>,
}

impl BandPlan {
    pub fn new(
        bin_frequencies: &[f64],
        band_hz: (f64, f64),
        dict: &SteeringDictionary,
    ) -> Result<Self> {
        let bins = band_bins(bin_frequencies, band_hz);
        if bins.is_empty() {
            return Err(Error::Config(format!(
                "no frame bins inside band {band_hz:?} Hz"
            )));
        }
        let dict_freqs = bins
            .clone()
            .map(|b| {
                dict.frequency_index(bin_frequencies[b]).ok_or_else(|| {
                    Error::Config(format!(
                        "dictionary has no entry for bin {b} ({:.3} rad/s)",
                        bin_frequencies[b]
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bins, dict_freqs })
    }

    pub fn len(&self) -> usize {
        self.dict_freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dict_freqs.is_empty()
    }
}

/// Components plus the residual left after extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub components: Vec<DirectionalComponent>,
    /// `residual[band_bin][mic]`.
    pub residual: Vec<Vec<Complex64>>,
    /// Residual energy before the first step and after each extraction.
    pub residual_energy: Vec<f64>,
}

fn energy(field: &[Vec<Complex64>]) -> f64 {
    field.iter().flatten().map(Complex64::norm_sqr).sum()
}

pub fn decompose(
    frame: &SpectralFrame,
    dict: &SteeringDictionary,
    cfg: &AwdConfig,
) -> Result<Vec<DirectionalComponent>> {
    let plan = BandPlan::new(&frame.bin_frequencies, cfg.band_hz, dict)?;
    Ok(decompose_with_plan(frame, dict, cfg, &plan)?.components)
}

struct AtomSearch {
    correlations: Vec<Complex64>,
    scores: Vec<f64>,
    /// Score multiplier per band bin.
    bin_weights: Vec<f64>,
}

impl AtomSearch {
    /// Best-scoring direction and its per-bin weights, `None` for a silent residual.
    fn best_atom(
        &mut self,
        dict: &SteeringDictionary,
        plan: &BandPlan,
        residual: &[Vec<Complex64>],
    ) -> Option<(usize, Vec<Complex64>)> {
        let m = dict.mic_count();
        let n_dir = self.scores.len();
        self.scores.iter_mut().for_each(|s| *s = 0.0);
        for (i, (&fi, p)) in plan.dict_freqs.iter().zip(residual).enumerate() {
            let atoms = dict.frequency_slice(fi);
            let row = &mut self.correlations[i * n_dir..(i + 1) * n_dir];
            for (d, (c, score)) in row.iter_mut().zip(self.scores.iter_mut()).enumerate() {
                let psi = &atoms[d * m..(d + 1) * m];
                let mut acc = Complex64::new(0.0, 0.0);
                for (a, x) in psi.iter().zip(p) {
                    acc += a.conj() * x;
                }
                *c = acc;
                *score += self.bin_weights[i] * acc.norm_sqr();
            }
        }
        // First maximum wins ties, i.e. the lowest direction index.
        let mut best = 0;
        for d in 1..n_dir {
            if self.scores[d] > self.scores[best] {
                best = d;
            }
        }
        if self.scores[best] <= 0.0 {
            return None;
        }
        let alpha = (0..plan.len())
            .map(|i| self.correlations[i * n_dir + best])
            .collect();
        Some((best, alpha))
    }
}

/// `residual += sign · α ψ(d)` over the band.
fn subtract(
    dict: &SteeringDictionary,
    plan: &BandPlan,
    residual: &mut [Vec<Complex64>],
    d: usize,
    alpha: &[Complex64],
    sign: f64,
) {
    for ((&fi, p), a) in plan.dict_freqs.iter().zip(residual).zip(alpha) {
        for (x, psi) in p.iter_mut().zip(dict.vector(fi, d)) {
            *x += sign * a * psi;
        }
    }
}

fn component(dict: &SteeringDictionary, d: usize, alpha: Vec<Complex64>) -> DirectionalComponent {
    let dir = dict.grid.entries[d];
    DirectionalComponent {
        direction_index: d,
        theta: dir.theta,
        phi: dir.phi,
        alpha,
        energy: 0.0,
    }
}

/// Replaces component `k`'s atom by the best match for the residual of the
/// others; the move is kept only if it does not raise the residual energy.
fn reselect_projected(
    dict: &SteeringDictionary,
    plan: &BandPlan,
    original: &[Vec<Complex64>],
    components: &mut Vec<DirectionalComponent>,
    k: usize,
    residual: Vec<Vec<Complex64>>,
    search: &mut AtomSearch,
) -> Vec<Vec<Complex64>> {
    let before = energy(&residual);
    let mut others = components.clone();
    others.remove(k);
    let partial = least_squares_fit(dict, plan, original, &mut others);
    let Some((best, alpha)) = search.best_atom(dict, plan, &partial) else {
        return residual;
    };
    if best == components[k].direction_index {
        return residual;
    }
    let mut trial = components.clone();
    trial[k] = component(dict, best, alpha);
    let refit = least_squares_fit(dict, plan, original, &mut trial);
    if energy(&refit) <= before {
        *components = trial;
        refit
    } else {
        residual
    }
}

/// Per-bin least-squares weights of `components` against `original`;
/// updates every `alpha` and returns the residual.
fn least_squares_fit(
    dict: &SteeringDictionary,
    plan: &BandPlan,
    original: &[Vec<Complex64>],
    components: &mut [DirectionalComponent],
) -> Vec<Vec<Complex64>> {
    let s = components.len();
    let mut residual = original.to_vec();
    for (i, (&fi, p)) in plan.dict_freqs.iter().zip(original).enumerate() {
        let atoms: Vec<&[Complex64]> = components
            .iter()
            .map(|c| dict.vector(fi, c.direction_index))
            .collect();
        let dot = |a: &[Complex64], b: &[Complex64]| -> Complex64 {
            a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
        };
        // Tiny ridge keeps near-collinear low-frequency atoms solvable.
        let gram = DMatrix::from_fn(s, s, |r, c| {
            dot(atoms[r], atoms[c]) + if r == c { 1e-10 } else { 0.0 }
        });
        let rhs = DVector::from_fn(s, |r, _| dot(atoms[r], p));
        let weights = gram
            .cholesky()
            .expect("ridge-regularised Gram matrix is positive definite")
            .solve(&rhs);
        for (c, (comp, psi)) in components.iter_mut().zip(&atoms).enumerate() {
            comp.alpha[i] = weights[c];
            for (x, v) in residual[i].iter_mut().zip(psi.iter()) {
                *x -= weights[c] * v;
            }
        }
    }
    residual
}

/// Greedy broadband matching pursuit against the dictionary.
pub fn decompose_with_plan(
    frame: &SpectralFrame,
    dict: &SteeringDictionary,
    cfg: &AwdConfig,
    plan: &BandPlan,
) -> Result<Decomposition> {
    cfg.validate()?;
    let m = dict.mic_count();
    if frame.channel_count() != m {
        return Err(Error::MalformedInput(format!(
            "frame has {} channels, dictionary has {m} microphones",
            frame.channel_count()
        )));
    }
    let n_dir = dict.direction_count();
    let mut residual: Vec<Vec<Complex64>> = plan
        .bins
        .clone()
        .map(|b| frame.spectra[b].clone())
        .collect();
    let total = energy(&residual);
    let mut trace = vec![total];
    let mut components = Vec::new();
    if total == 0.0 {
        return Ok(Decomposition {
            components,
            residual,
            residual_energy: trace,
        });
    }

    let original = residual.clone();
    let bin_weights = original
        .iter()
        .map(|p| {
            let e: f64 = p.iter().map(Complex64::norm_sqr).sum();
            match cfg.score_weighting {
                ScoreWeighting::Power => 1.0,
                ScoreWeighting::Whitened if e > 0.0 => 1.0 / e,
                ScoreWeighting::Whitened => 0.0,
            }
        })
        .collect();
    let mut search = AtomSearch {
        correlations: vec![Complex64::new(0.0, 0.0); plan.len() * n_dir],
        scores: vec![0.0; n_dir],
        bin_weights,
    };
    while components.len() < cfg.max_components {
        let Some((best, alpha)) = search.best_atom(dict, plan, &residual) else {
            break;
        };
        subtract(dict, plan, &mut residual, best, &alpha, -1.0);
        components.push(component(dict, best, alpha));
        if cfg.reproject {
            residual = least_squares_fit(dict, plan, &original, &mut components);
        }
        for _ in 0..cfg.refine_sweeps {
            for k in 0..components.len() {
                if cfg.reproject {
                    residual = reselect_projected(
                        dict,
                        plan,
                        &original,
                        &mut components,
                        k,
                        residual,
                        &mut search,
                    );
                } else {
                    let old = &components[k];
                    let (old_index, old_alpha) = (old.direction_index, old.alpha.clone());
                    subtract(dict, plan, &mut residual, old_index, &old_alpha, 1.0);
                    let (best, alpha) = search
                        .best_atom(dict, plan, &residual)
                        .expect("residual holds the component just added back");
                    subtract(dict, plan, &mut residual, best, &alpha, -1.0);
                    components[k] = component(dict, best, alpha);
                }
            }
        }
        let e = energy(&residual);
        trace.push(e);
        if e < cfg.residual_stop_ratio * total {
            break;
        }
    }
    Ok(Decomposition {
        components,
        residual,
        residual_energy: trace,
    })
}
