//! Delay- and energy-based log-likelihoods of each directional component,
//! their fusion on the azimuth grid, and SNR-weighted temporal aggregation.

use std::f64::consts::{PI, SQRT_2, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::awd::DirectionalComponent;
use crate::error::{Error, Result};
use crate::frontend::{snr_weight, SigmoidWeightConfig, SpectralFrame};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelayConfig {
    /// Frequency shift as a whole number of STFT bins.
    pub delta_bins: usize,
    /// Standard deviation of the delay estimate, seconds.
    pub sigma: f64,
    pub corr_threshold: f64,
    pub weight: SigmoidWeightConfig,
    /// Fewer usable bins than this and the pair delay is unavailable.
    pub min_bins: usize,
    /// Bins where either component is below this fraction of the frame RMS are skipped.
    pub magnitude_floor: f64,
}

impl Default for DelayConfig {
    fn default() -> Self {
        Self {
            delta_bins: 2,
            sigma: 0.25e-3,
            corr_threshold: 0.4,
            weight: SigmoidWeightConfig::bin_default(),
            min_bins: 8,
            magnitude_floor: 1e-6,
        }
    }
}

impl DelayConfig {
    /// Shift in rad/s for a given bin spacing.
    pub fn delta(&self, bin_spacing: f64) -> f64 {
        self.delta_bins as f64 * bin_spacing
    }

    /// Checks parameters and that `delta * max_delay < pi`, i.e. no phase
    /// wrap for any delay up to `max_delay` seconds.
    pub fn validate(&self, bin_spacing: f64, max_delay: f64) -> Result<()> {
        if self.delta_bins == 0 {
            return Err(Error::Config("delta must be at least one bin".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.corr_threshold) {
            return Err(Error::Config(format!(
                "corr_threshold must be in [0, 1], got {}",
                self.corr_threshold
            )));
        }
        SigmoidWeightConfig::new(self.weight.midpoint_db, self.weight.slope)?;
        let bound = self.delta(bin_spacing) * max_delay;
        if bound >= PI {
            return Err(Error::Config(format!(
                "delta * max_delay = {bound:.3} rad wraps; reduce delta_bins or the max delay"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyConfig {
    pub nu: f64,
    pub epsilon: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            nu: 0.5,
            epsilon: -20.0,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::Config(format!(
                "nu must be in (0, 1], got {}",
                self.nu
            )));
        }
        if !(self.epsilon < -(16f64.ln())) {
            return Err(Error::Config(format!(
                "epsilon {} is not well below -log(M)",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-bin state shared by every component pair of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BandWeights {
    /// SNR weight per band bin.
    pub weights: Vec<f64>,
    /// Bin spacing in rad/s.
    pub bin_spacing: f64,
    /// RMS magnitude of the observed band spectrum.
    pub frame_rms: f64,
}

impl BandWeights {
    pub fn from_frame(
        frame: &SpectralFrame,
        bins: std::ops::Range<usize>,
        weight: &SigmoidWeightConfig,
    ) -> Self {
        let count = (bins.len() * frame.channel_count()).max(1);
        let frame_rms = (bins
            .clone()
            .flat_map(|b| frame.spectra[b].iter())
            .map(Complex64::norm_sqr)
            .sum::<f64>()
            / count as f64)
            .sqrt();
        Self {
            weights: bins.map(|b| snr_weight(frame.snr_db[b], weight)).collect(),
            bin_spacing: frame.bin_spacing(),
            frame_rms,
        }
    }
}

/// Weighted mean phase slope between two components: `tau_k - tau_l` in
/// seconds, positive when `k` arrives after `l`. `None` when too few bins
/// carry usable phase.
pub fn pair_delay(
    comp_l: &DirectionalComponent,
    comp_k: &DirectionalComponent,
    band: &BandWeights,
    cfg: &DelayConfig,
) -> Option<f64> {
    let n = comp_l.alpha.len().min(comp_k.alpha.len());
    let shift = cfg.delta_bins;
    if n <= shift || band.bin_spacing <= 0.0 {
        return None;
    }
    let floor = cfg.magnitude_floor * band.frame_rms;
    let unit = |a: Complex64| {
        let r = a.norm();
        if r > floor && r > 0.0 {
            Some(a / r)
        } else {
            None
        }
    };
    // q(w) = u_l(w) * conj(u_k(w)); the product form keeps q_kl == conj(q_lk) bit-exactly.
    let q: Vec<Option<Complex64>> = comp_l.alpha[..n]
        .iter()
        .zip(&comp_k.alpha[..n])
        .map(|(&a, &b)| Some(unit(a)? * unit(b)?.conj()))
        .collect();
    let delta = cfg.delta(band.bin_spacing);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut used = 0;
    for i in 0..n - shift {
        let (Some(q0), Some(q1)) = (q[i], q[i + shift]) else {
            continue;
        };
        let w = band.weights.get(i).copied().unwrap_or(0.0);
        let r = q1 * q0.conj();
        num += w * r.arg() / delta;
        den += w;
        used += 1;
    }
    if used < cfg.min_bins || den <= 0.0 {
        return None;
    }
    Some(num / den)
}

/// Pearson correlation of the magnitude spectra; `None` on zero variance.
pub fn magnitude_correlation(a: &[Complex64], b: &[Complex64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let ma: Vec<f64> = a[..n].iter().map(|v| v.norm()).collect();
    let mb: Vec<f64> = b[..n].iter().map(|v| v.norm()).collect();
    let mean_a = ma.iter().sum::<f64>() / n as f64;
    let mean_b = mb.iter().sum::<f64>() / n as f64;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ma.iter().zip(&mb) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale = (saa * sbb).sqrt();
    if !(scale > 1e-300 * n as f64)
        || saa <= 1e-24 * ma.iter().map(|v| v * v).sum::<f64>()
        || sbb <= 1e-24 * mb.iter().map(|v| v * v).sum::<f64>()
    {
        return None;
    }
    Some((sab / scale).clamp(-1.0, 1.0))
}

/// True when the two components look like delayed copies of one source.
pub fn correlation_gate(
    comp_l: &DirectionalComponent,
    comp_k: &DirectionalComponent,
    cfg: &DelayConfig,
) -> bool {
    magnitude_correlation(&comp_l.alpha, &comp_k.alpha).is_some_and(|r| r >= cfg.corr_threshold)
}

/// `ln(erfc(x))`, finite for all finite `x`.
pub fn ln_erfc(x: f64) -> f64 {
    if x < 25.0 {
        erfc(x).ln()
    } else {
        // Asymptotic expansion; erfc underflows well before this matters.
        let x2 = x * x;
        let series = 1.0 - 0.5 / x2 + 0.75 / (x2 * x2) - 1.875 / (x2 * x2 * x2);
        -x2 - (x * PI.sqrt()).ln() + series.ln()
    }
}

/// Square matrix of pair delays; `None` marks unavailable pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayMatrix {
    size: usize,
    values: Vec<Option<f64>>,
}

impl DelayMatrix {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            values: vec![None; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, l: usize, k: usize) -> Option<f64> {
        self.values[l * self.size + k]
    }

    /// Stores `rho` for (l, k) and `-rho` for (k, l).
    pub fn set_pair(&mut self, l: usize, k: usize, rho: f64) {
        self.values[l * self.size + k] = Some(rho);
        self.values[k * self.size + l] = Some(-rho);
    }
}

/// Log-probability that each component arrives first.
pub fn first_arrival_loglik(delays: &DelayMatrix, sigma: f64) -> Vec<f64> {
    let n = delays.size();
    (0..n)
        .map(|l| {
            (0..n)
                .filter(|&k| k != l)
                .filter_map(|k| delays.get(l, k))
                .map(|rho| ln_erfc(-rho / (sigma * SQRT_2)))
                .sum()
        })
        .collect()
}

pub fn component_energy(comp: &DirectionalComponent, weights: &[f64]) -> f64 {
    comp.alpha
        .iter()
        .zip(weights)
        .map(|(a, w)| a.norm_sqr() * w)
        .sum()
}

/// Uniform log-probability over the components whose energy clears
/// `nu * max`, `epsilon` for the rest.
pub fn energy_loglik(energies: &[f64], cfg: &EnergyConfig) -> Vec<f64> {
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let passes = |e: f64| e > cfg.nu * max || e == max;
    let count = energies.iter().filter(|&&e| passes(e)).count();
    let log_m = -(count.max(1) as f64).ln();
    energies
        .iter()
        .map(|&e| if passes(e) { log_m } else { cfg.epsilon })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodGrid {
    pub azimuths: Vec<f64>,
    pub values: Vec<f64>,
    /// Variance (rad^2) of the azimuth spread around each component.
    pub kappa: f64,
}

impl LikelihoodGrid {
    pub fn new(azimuths: Vec<f64>, kappa: f64) -> Self {
        let values = vec![f64::NEG_INFINITY; azimuths.len()];
        Self {
            azimuths,
            values,
            kappa,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|v| *v == f64::NEG_INFINITY)
    }

    /// Max-combines one component's score, spread by a circular quadratic penalty.
    pub fn apply(&mut self, phi: f64, score: f64) {
        for (a, v) in self.azimuths.iter().zip(&mut self.values) {
            let d = circular_distance(*a, phi);
            let candidate = score - d * d / (2.0 * self.kappa);
            if candidate > *v {
                *v = candidate;
            }
        }
    }

    /// Index of the maximum; ties go to the lowest azimuth.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.values.len() {
            if self.values[i] > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Absolute angular difference wrapped to `[0, pi]`.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Applies `(phi_l, beta_l + gamma_l)` pairs to `grid`.
pub fn update_frame_likelihood(
    mut grid: LikelihoodGrid,
    components: &[(f64, f64)],
) -> LikelihoodGrid {
    for &(phi, score) in components {
        grid.apply(phi, score);
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEstimate {
    pub aggregate: LikelihoodGrid,
    pub phi_hat: f64,
    /// Temporal weight of every input frame (0 for skipped frames).
    pub frame_weights: Vec<f64>,
    pub frames_used: usize,
}

/// SNR-weighted sum of the per-frame grids and its argmax.
pub fn aggregate_and_estimate(
    grids: &[LikelihoodGrid],
    frame_snr_db: &[f64],
    weight: &SigmoidWeightConfig,
) -> Result<AggregateEstimate> {
    let first = grids
        .first()
        .ok_or_else(|| Error::NoEstimate("no frames".into()))?;
    if frame_snr_db.len() != grids.len() {
        return Err(Error::MalformedInput(format!(
            "{} grids but {} frame SNR values",
            grids.len(),
            frame_snr_db.len()
        )));
    }
    let mut total = vec![0.0; first.azimuths.len()];
    let mut frame_weights = Vec::with_capacity(grids.len());
    let mut used = 0;
    for (g, &snr) in grids.iter().zip(frame_snr_db) {
        if g.azimuths != first.azimuths {
            return Err(Error::MalformedInput(
                "grids use different azimuth sets".into(),
            ));
        }
        if g.is_empty() {
            frame_weights.push(0.0);
            continue;
        }
        let eta = snr_weight(snr, weight);
        frame_weights.push(eta);
        used += 1;
        for (t, v) in total.iter_mut().zip(&g.values) {
            *t += eta * v;
        }
    }
    if used == 0 {
        return Err(Error::NoEstimate("every frame is empty".into()));
    }
    let aggregate = LikelihoodGrid {
        azimuths: first.azimuths.clone(),
        values: total,
        kappa: first.kappa,
    };
    let phi_hat = aggregate.azimuths[aggregate.argmax()];
    Ok(AggregateEstimate {
        aggregate,
        phi_hat,
        frame_weights,
        frames_used: used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LikelihoodConfig {
    pub delay: DelayConfig,
    pub energy: EnergyConfig,
    /// Azimuth spread variance in rad^2.
    pub kappa: f64,
    pub frame_weight: SigmoidWeightConfig,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        Self {
            delay: DelayConfig::default(),
            energy: EnergyConfig::default(),
            kappa: 10f64.to_radians().powi(2),
            frame_weight: SigmoidWeightConfig::frame_default(),
        }
    }
}

/// Per-component terms of one frame, kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores {
    pub energies: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub delays: DelayMatrix,
}

/// Scores every component of one frame and folds them into a fresh grid.
pub fn frame_likelihood(
    components: &mut [DirectionalComponent],
    band: &BandWeights,
    azimuths: &[f64],
    cfg: &LikelihoodConfig,
) -> (LikelihoodGrid, FrameScores) {
    let n = components.len();
    for c in components.iter_mut() {
        c.energy = component_energy(c, &band.weights);
    }
    let energies: Vec<f64> = components.iter().map(|c| c.energy).collect();
    let gamma = if n == 0 {
        Vec::new()
    } else {
        energy_loglik(&energies, &cfg.energy)
    };
    let mut delays = DelayMatrix::new(n);
    for l in 0..n {
        for k in l + 1..n {
            if !correlation_gate(&components[l], &components[k], &cfg.delay) {
                continue;
            }
            if let Some(rho) = pair_delay(&components[l], &components[k], band, &cfg.delay) {
                delays.set_pair(l, k, rho);
            }
        }
    }
    let beta = first_arrival_loglik(&delays, cfg.delay.sigma);
    let scored: Vec<(f64, f64)> = components
        .iter()
        .zip(beta.iter().zip(&gamma))
        .map(|(c, (b, g))| (c.phi, b + g))
        .collect();
    let grid = update_frame_likelihood(LikelihoodGrid::new(azimuths.to_vec(), cfg.kappa), &scored);
    (
        grid,
        FrameScores {
            energies,
            gamma,
            beta,
            delays,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SPACING: f64 = TAU * 31.25;

    fn comp(phi: f64, alpha: Vec<Complex64>) -> DirectionalComponent {
        DirectionalComponent {
            direction_index: 0,
            theta: PI / 2.0,
            phi,
            alpha,
            energy: 0.0,
        }
    }

    fn band(n: usize) -> BandWeights {
        BandWeights {
            weights: vec![1.0; n],
            bin_spacing: SPACING,
            frame_rms: 1.0,
        }
    }

    fn random_spectrum(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::from_polar(rng.random_range(0.2..2.0), rng.random_range(-PI..PI)))
            .collect()
    }

    /// Bin `i` of the test band sits at `(10 + i)` bins.
    fn delayed(a: &[Complex64], tau: f64) -> Vec<Complex64> {
        a.iter()
            .enumerate()
            .map(|(i, v)| v * Complex64::from_polar(1.0, -SPACING * (10 + i) as f64 * tau))
            .collect()
    }

    #[test]
    fn identical_components_have_zero_delay() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_spectrum(&mut rng, 119);
        let c = comp(0.0, a);
        assert_eq!(
            pair_delay(&c, &c, &band(119), &DelayConfig::default()),
            Some(0.0)
        );
    }

    #[test]
    fn pure_delay_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_spectrum(&mut rng, 119);
        let tau0 = 0.5e-3;
        let l = comp(0.0, a.clone());
        let k = comp(0.0, delayed(&a, tau0));
        let cfg = DelayConfig::default();
        assert!(cfg.delta(SPACING) * tau0 < PI);
        let rho = pair_delay(&l, &k, &band(119), &cfg).unwrap();
        assert!((rho - 5e-4).abs() < 1e-5, "rho {rho}");
    }

    #[test]
    fn too_few_bins_unavailable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = random_spectrum(&mut rng, 40);
        for v in a.iter_mut().skip(8) {
            *v = Complex64::new(0.0, 0.0);
        }
        let c = comp(0.0, a);
        assert_eq!(pair_delay(&c, &c, &band(40), &DelayConfig::default()), None);
    }

    #[test]
    fn delay_bound_validation() {
        let cfg = DelayConfig::default();
        assert!(cfg.validate(SPACING, 7.9e-3).is_ok());
        assert!(cfg.validate(SPACING, 8.1e-3).is_err());
    }

    #[test]
    fn gate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spectrum(&mut rng, 256);
        let cfg = DelayConfig {
            corr_threshold: 0.5,
            ..DelayConfig::default()
        };
        let l = comp(0.0, a.clone());
        let scaled: Vec<Complex64> = delayed(&a, 1e-3).iter().map(|v| v * 0.3).collect();
        let k = comp(1.0, scaled);
        assert_relative_eq!(
            magnitude_correlation(&l.alpha, &k.alpha).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert!(correlation_gate(&l, &k, &cfg));

        let flat = comp(0.0, vec![Complex64::from_polar(1.0, 0.3); 256]);
        assert!(!correlation_gate(&flat, &l, &cfg));
        assert!(!correlation_gate(&l, &flat, &cfg));
    }

    #[test]
    fn independent_spectra_fail_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = DelayConfig {
            corr_threshold: 0.5,
            ..DelayConfig::default()
        };
        let mut small = 0;
        let trials = 200;
        for _ in 0..trials {
            let l = comp(0.0, random_spectrum(&mut rng, 256));
            let k = comp(0.0, random_spectrum(&mut rng, 256));
            let r = magnitude_correlation(&l.alpha, &k.alpha).unwrap();
            if r.abs() < 0.3 {
                small += 1;
            }
            assert!(!correlation_gate(&l, &k, &cfg));
        }
        assert_eq!(small, trials);
    }

    #[test]
    fn first_arrival_examples() {
        let sigma = 0.25e-3;
        assert_eq!(first_arrival_loglik(&DelayMatrix::new(1), sigma), vec![0.0]);

        let mut m = DelayMatrix::new(2);
        m.set_pair(0, 1, 0.0);
        assert_eq!(first_arrival_loglik(&m, sigma), vec![0.0, 0.0]);

        let mut m = DelayMatrix::new(2);
        m.set_pair(0, 1, 3.0 * sigma);
        let b = first_arrival_loglik(&m, sigma);
        assert_relative_eq!(b[0], 0.6918, epsilon = 1e-3);
        assert_relative_eq!(b[1], -5.915, epsilon = 1e-3);
    }

    #[test]
    fn erfc_complement() {
        for i in -60..=60 {
            let x = i as f64 * 0.1;
            assert_relative_eq!(0.5 * erfc(-x) + 0.5 * erfc(x), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn ln_erfc_continuous_and_finite() {
        let below = ln_erfc(25.0 - 1e-9);
        let above = ln_erfc(25.0);
        assert_relative_eq!(below, above, max_relative = 1e-9);
        assert!(ln_erfc(1e3).is_finite());
        assert_relative_eq!(ln_erfc(-40.0), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(ln_erfc(0.0), 0.0);
    }

    #[test]
    fn energy_examples() {
        let c = comp(0.0, vec![Complex64::new(0.0, 0.0); 10]);
        assert_eq!(component_energy(&c, &[1.0; 10]), 0.0);
        let c = comp(0.0, vec![Complex64::from_polar(1.0, 0.7); 10]);
        assert_relative_eq!(component_energy(&c, &[1.0; 10]), 10.0, epsilon = 1e-12);
        let w: Vec<f64> = (0..10).map(|i| if i < 5 { 0.5 } else { 1.0 }).collect();
        assert_relative_eq!(component_energy(&c, &w), 7.5, epsilon = 1e-12);
    }

    #[test]
    fn energy_loglik_examples() {
        let cfg = EnergyConfig::default();
        assert_eq!(energy_loglik(&[3.0], &cfg), vec![0.0]);
        let g = energy_loglik(&[2.0; 4], &cfg);
        for v in &g {
            assert_relative_eq!(*v, -(4f64.ln()), epsilon = 1e-15);
        }
        let g = energy_loglik(&[1.0, 0.6, 0.3], &cfg);
        assert_eq!(g, vec![-(2f64.ln()), -(2f64.ln()), -20.0]);
        // nu = 1 still keeps the maximum
        let g = energy_loglik(
            &[1.0, 0.6],
            &EnergyConfig {
                nu: 1.0,
                epsilon: -20.0,
            },
        );
        assert_eq!(g, vec![0.0, -20.0]);
    }

    #[test]
    fn grid_update_examples() {
        let az: Vec<f64> = (0..72).map(|k| (k as f64 * 5.0).to_radians()).collect();
        let kappa = 10f64.to_radians().powi(2);
        let phi = az[10];
        let g = update_frame_likelihood(LikelihoodGrid::new(az.clone(), kappa), &[(phi, 2.0)]);
        assert_eq!(g.values[10], 2.0);
        let d = az[11] - az[10];
        assert_relative_eq!(g.values[11], 2.0 - d * d / (2.0 * kappa), epsilon = 1e-12);
        assert_relative_eq!(g.values[9], 2.0 - d * d / (2.0 * kappa), epsilon = 1e-12);

        let g = update_frame_likelihood(
            LikelihoodGrid::new(az.clone(), kappa),
            &[(phi, 2.0), (phi, 1.0)],
        );
        assert_eq!(g.values[10], 2.0);

        // 358° component, grid point at 2° (a 1° grid for exact points)
        let fine: Vec<f64> = (0..360).map(|k| (k as f64).to_radians()).collect();
        let g = update_frame_likelihood(
            LikelihoodGrid::new(fine, kappa),
            &[(358f64.to_radians(), 0.0)],
        );
        let four = 4f64.to_radians();
        assert_relative_eq!(g.values[2], -four * four / (2.0 * kappa), epsilon = 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let az: Vec<f64> = (0..72).map(|k| (k as f64 * 5.0).to_radians()).collect();
        let kappa = 10f64.to_radians().powi(2);
        let w = SigmoidWeightConfig::new(10.0, 0.5).unwrap();
        let a = update_frame_likelihood(LikelihoodGrid::new(az.clone(), kappa), &[(az[6], 0.0)]);
        let b = update_frame_likelihood(LikelihoodGrid::new(az.clone(), kappa), &[(az[24], 0.0)]);

        let one = aggregate_and_estimate(std::slice::from_ref(&a), &[14.0], &w).unwrap();
        assert_eq!(one.phi_hat, az[6]);
        let eta = snr_weight(14.0, &w);
        for (x, y) in one.aggregate.values.iter().zip(&a.values) {
            assert_relative_eq!(*x, eta * y, epsilon = 1e-12);
        }

        let two = aggregate_and_estimate(&[a.clone(), a.clone()], &[14.0, 3.0], &w).unwrap();
        assert_eq!(two.phi_hat, az[6]);

        // frame weights 0.9 and 0.1
        let snr_a = 10.0 + (9f64).ln() / 0.5;
        let snr_b = 10.0 - (9f64).ln() / 0.5;
        let est = aggregate_and_estimate(&[a.clone(), b.clone()], &[snr_a, snr_b], &w).unwrap();
        assert_relative_eq!(est.frame_weights[0], 0.9, epsilon = 1e-12);
        assert_relative_eq!(est.frame_weights[1], 0.1, epsilon = 1e-12);
        // Oracle: brute-force weighted sum of the two quadratic penalties.
        let oracle = az
            .iter()
            .map(|&phi| {
                let da = circular_distance(phi, az[6]);
                let db = circular_distance(phi, az[24]);
                -(0.9 * da * da + 0.1 * db * db) / (2.0 * kappa)
            })
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            });
        assert_eq!(est.phi_hat, az[oracle.0]);
        // The log-domain penalties pull the peak to the weighted mean (39°).
        assert_eq!(oracle.0, 8);
        // Peaks 10° apart: the weighted mean (31°) rounds to frame A's peak.
        let c = update_frame_likelihood(LikelihoodGrid::new(az.clone(), kappa), &[(az[8], 0.0)]);
        let est = aggregate_and_estimate(&[a.clone(), c], &[snr_a, snr_b], &w).unwrap();
        assert_eq!(est.phi_hat, az[6]);

        let empty = LikelihoodGrid::new(az.clone(), kappa);
        let est = aggregate_and_estimate(&[empty.clone(), b.clone()], &[30.0, 0.0], &w).unwrap();
        assert_eq!(est.frames_used, 1);
        assert_eq!(est.phi_hat, az[24]);
        assert!(matches!(
            aggregate_and_estimate(&[empty], &[30.0], &w),
            Err(Error::NoEstimate(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn pair_delay_antisymmetric(seed in 0u64..10_000, tau in -4e-3f64..4e-3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_spectrum(&mut rng, 119);
            let mut b = delayed(&a, tau);
            for v in &mut b { *v *= Complex64::from_polar(rng.random_range(0.5..1.5), rng.random_range(-0.3..0.3)); }
            let weights: Vec<f64> = (0..119).map(|_| rng.random_range(0.0..1.0)).collect();
            let bw = BandWeights { weights, bin_spacing: SPACING, frame_rms: 1.0 };
            let cfg = DelayConfig::default();
            let l = comp(0.0, a);
            let k = comp(0.0, b);
            let lk = pair_delay(&l, &k, &bw, &cfg).unwrap();
            let kl = pair_delay(&k, &l, &bw, &cfg).unwrap();
            proptest::prop_assert_eq!(lk + kl, 0.0);
        }

        #[test]
        fn energy_loglik_normalized(energies in proptest::collection::vec(0.0f64..100.0, 1..16),
                                    nu in 0.05f64..1.0) {
            let cfg = EnergyConfig { nu, epsilon: -20.0 };
            let g = energy_loglik(&energies, &cfg);
            let passing: Vec<f64> = g.iter().copied().filter(|&v| v != cfg.epsilon).collect();
            let m = passing.len();
            proptest::prop_assert!(m >= 1);
            // exp(-ln M) summed M times
            let total: f64 = passing.iter().map(|v| v.exp()).sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
            proptest::prop_assert!(passing.iter().all(|&v| v == -(m as f64).ln()));
        }

        #[test]
        fn beta_permutation_equivariant(seed in 0u64..10_000, n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sigma = 0.25e-3;
            let mut m = DelayMatrix::new(n);
            for l in 0..n { for k in l + 1..n {
                if rng.random_bool(0.8) { m.set_pair(l, k, rng.random_range(-3e-3..3e-3)); }
            }}
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() { perm.swap(i, rng.random_range(0..=i)); }
            let mut pm = DelayMatrix::new(n);
            for l in 0..n { for k in l + 1..n {
                if let Some(r) = m.get(perm[l], perm[k]) { pm.set_pair(l, k, r); }
            }}
            let b = first_arrival_loglik(&m, sigma);
            let pb = first_arrival_loglik(&pm, sigma);
            for i in 0..n {
                proptest::prop_assert!((pb[i] - b[perm[i]]).abs() < 1e-9);
            }
        }

        #[test]
        fn grid_update_idempotent(scores in proptest::collection::vec((0.0f64..TAU, -50.0f64..5.0), 1..8)) {
            let az: Vec<f64> = (0..72).map(|k| (k as f64 * 5.0).to_radians()).collect();
            let g1 = update_frame_likelihood(LikelihoodGrid::new(az, 0.03), &scores);
            let g2 = update_frame_likelihood(g1.clone(), &scores);
            proptest::prop_assert_eq!(g1, g2);
        }
    }
}
