//! Batch evaluation: scenario grids, both estimators, error reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{FrameAggregation, SrpConfig, SrpPhat};
use crate::dictionary::{
    build_freefield_dictionary, build_rigid_sphere_dictionary, ArrayGeometry, DirectionGrid,
    SteeringDictionary, SteeringModel,
};
use crate::error::{Error, Result};
use crate::estimator::{analyze, MleConfig, MleEstimator, MleOutput};
use crate::frontend::{band_bins, read_mono_wav, MultichannelAudio};
use crate::simulator::{
    placed_scenario, simulate_capture, GroundTruth, NoiseKind, Placement, RoomScenario,
    SimulatedCapture,
};
use crate::stimulus::synthetic_speech;

/// Env var capping the utterance worker pool.
pub const THREADS_ENV: &str = "WAVEDOA_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Mle,
    Srp,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Mle => "mle",
            EstimatorKind::Srp => "srp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    /// `circle8`, `star4`, or `custom` (uses `positions`).
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default)]
    pub positions: Vec<[f64; 3]>,
}

fn default_preset() -> String {
    "circle8".into()
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            preset: default_preset(),
            positions: Vec::new(),
        }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<ArrayGeometry> {
        match self.preset.as_str() {
            "circle8" => Ok(ArrayGeometry::circle8()),
            "star4" => Ok(ArrayGeometry::star4()),
            "custom" => ArrayGeometry::new("custom", self.positions.clone()),
            other => Err(Error::Config(format!("unknown geometry preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionaryConfig {
    pub model: SteeringModel,
    pub sphere_radius: f64,
    pub azimuth_step_deg: f64,
    pub elevation_levels_deg: Vec<f64>,
    /// Load a prebuilt dictionary instead of building one.
    pub path: Option<PathBuf>,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        Self {
            model: SteeringModel::FreeField,
            sphere_radius: 0.04,
            azimuth_step_deg: 5.0,
            elevation_levels_deg: vec![60.0, 90.0, 120.0],
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomConfig {
    pub id: String,
    pub dims: [f64; 3],
    /// One value for every wall, or six (x0, x1, y0, y1, z0, z1).
    pub absorption: Vec<f64>,
    #[serde(default = "default_order")]
    pub max_image_order: usize,
}

fn default_order() -> usize {
    6
}

impl RoomConfig {
    pub fn absorption6(&self) -> Result<[f64; 6]> {
        match self.absorption.as_slice() {
            [a] => Ok([*a; 6]),
            [a, b, c, d, e, f] => Ok([*a, *b, *c, *d, *e, *f]),
            other => Err(Error::Config(format!(
                "room `{}`: absorption needs 1 or 6 values, got {}",
                self.id,
                other.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioGridConfig {
    pub placements: Vec<Placement>,
    pub angles_deg: Vec<f64>,
    pub snr_db: Vec<f64>,
    pub distance_m: f64,
    pub noise_file: Option<PathBuf>,
}

impl Default for ScenarioGridConfig {
    fn default() -> Self {
        Self {
            placements: vec![Placement::Center],
            angles_deg: (0..36).map(|k| k as f64 * 10.0).collect(),
            snr_db: vec![0.0, 5.0, 10.0, 20.0, 30.0],
            distance_m: 2.0,
            noise_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StimulusConfig {
    /// Number of seeded synthetic utterances.
    pub synthetic: usize,
    pub duration_s: f64,
    pub wav: Vec<PathBuf>,
}

impl Default for StimulusConfig {
    fn default() -> Self {
        Self {
            synthetic: 1,
            duration_s: 2.0,
            wav: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrpSection {
    pub aggregation: FrameAggregation,
}

impl Default for SrpSection {
    fn default() -> Self {
        Self {
            aggregation: FrameAggregation::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub sample_rate: f64,
    pub speed_of_sound: f64,
    pub estimators: Vec<EstimatorKind>,
    pub out_dir: Option<PathBuf>,
    pub geometry: GeometryConfig,
    pub dictionary: DictionaryConfig,
    pub mle: MleConfig,
    pub srp: SrpSection,
    pub rooms: Vec<RoomConfig>,
    pub scenarios: ScenarioGridConfig,
    pub stimuli: StimulusConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            sample_rate: 16000.0,
            speed_of_sound: crate::dictionary::DEFAULT_SPEED_OF_SOUND,
            estimators: vec![EstimatorKind::Mle, EstimatorKind::Srp],
            out_dir: None,
            geometry: GeometryConfig::default(),
            dictionary: DictionaryConfig::default(),
            mle: MleConfig::with_defaults(),
            srp: SrpSection::default(),
            rooms: vec![RoomConfig {
                id: "anechoic".into(),
                dims: [4.0, 5.0, 3.0],
                absorption: vec![1.0],
                max_image_order: 0,
            }],
            scenarios: ScenarioGridConfig::default(),
            stimuli: StimulusConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// SHA-256 of the canonical JSON form. The output directory is left out:
    /// it says where results go, not what the experiment is.
    pub fn hash(&self) -> String {
        let canonical = Self {
            out_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn grid(&self) -> Result<DirectionGrid> {
        let levels: Vec<f64> = self
            .dictionary
            .elevation_levels_deg
            .iter()
            .map(|d| d.to_radians())
            .collect();
        DirectionGrid::regular(self.dictionary.azimuth_step_deg.to_radians(), &levels)
    }

    /// Angular frequencies of the STFT bins inside the analysis band.
    pub fn analysis_frequencies(&self) -> Vec<f64> {
        let n = self.mle.frontend.stft.frame_len;
        let all: Vec<f64> = (0..=n / 2)
            .map(|k| std::f64::consts::TAU * k as f64 * self.sample_rate / n as f64)
            .collect();
        all[band_bins(&all, self.mle.awd.band_hz)].to_vec()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.speed_of_sound > 0.0) {
            return Err(Error::Config(
                "sample rate and speed of sound must be positive".into(),
            ));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators selected".into()));
        }
        let grid = self.grid()?;
        self.geometry.build()?;
        self.mle.awd.validate()?;
        self.mle.likelihood.energy.validate()?;
        let spacing =
            std::f64::consts::TAU * self.sample_rate / self.mle.frontend.stft.frame_len as f64;
        self.mle
            .likelihood
            .delay
            .validate(spacing, self.mle.max_delay)?;
        let sc = &self.scenarios;
        if self.rooms.is_empty()
            || sc.placements.is_empty()
            || sc.angles_deg.is_empty()
            || sc.snr_db.is_empty()
        {
            return Err(Error::Config("empty scenario grid".into()));
        }
        if self.stimuli.synthetic == 0 && self.stimuli.wav.is_empty() {
            return Err(Error::Config("no stimuli".into()));
        }
        for room in &self.rooms {
            room.absorption6()?;
        }
        let azimuths = grid.azimuths();
        for a in &sc.angles_deg {
            let r = a.to_radians().rem_euclid(std::f64::consts::TAU);
            if !azimuths
                .iter()
                .any(|g| crate::likelihood::circular_distance(*g, r) < 1e-9)
            {
                return Err(Error::Config(format!(
                    "angle {a}° is not a dictionary azimuth"
                )));
            }
        }
        for p in self.stimuli.wav.iter().chain(&sc.noise_file) {
            if !p.exists() {
                return Err(Error::Config(format!("missing file {}", p.display())));
            }
        }
        if let Some(p) = &self.dictionary.path {
            if !p.exists() {
                return Err(Error::Config(format!("missing dictionary {}", p.display())));
            }
        }
        Ok(())
    }

    /// Builds (or loads) the dictionary for this configuration.
    pub fn dictionary(&self) -> Result<SteeringDictionary> {
        let geometry = self.geometry.build()?;
        let dict = if let Some(path) = &self.dictionary.path {
            SteeringDictionary::load(path)?
        } else {
            let grid = self.grid()?;
            let freqs = self.analysis_frequencies();
            match self.dictionary.model {
                SteeringModel::FreeField => {
                    build_freefield_dictionary(&geometry, &grid, &freqs, self.speed_of_sound)?
                }
                SteeringModel::RigidSphere => build_rigid_sphere_dictionary(
                    &geometry,
                    self.dictionary.sphere_radius,
                    &grid,
                    &freqs,
                    self.speed_of_sound,
                )?,
            }
        };
        if dict.geometry.mic_positions != geometry.mic_positions {
            return Err(Error::Config(
                "dictionary geometry does not match the configured array".into(),
            ));
        }
        Ok(dict)
    }

    /// Every scenario of the grid, in report order.
    pub fn scenarios(&self) -> Result<Vec<ScenarioSpec>> {
        let sc = &self.scenarios;
        let n_stim = self.stimuli.wav.len() + self.stimuli.synthetic;
        let mut out = Vec::new();
        for (ri, room) in self.rooms.iter().enumerate() {
            let absorption = room.absorption6()?;
            for (pi, &placement) in sc.placements.iter().enumerate() {
                for (ai, &angle) in sc.angles_deg.iter().enumerate() {
                    for &snr in &sc.snr_db {
                        for stim in 0..n_stim {
                            let mut scenario = placed_scenario(
                                room.dims,
                                absorption,
                                room.max_image_order,
                                placement,
                                sc.distance_m,
                                angle.to_radians(),
                                snr,
                            );
                            if let Some(path) = &sc.noise_file {
                                scenario.noise = NoiseKind::Recorded(path.clone());
                            }
                            scenario.validate()?;
                            out.push(ScenarioSpec {
                                id: format!(
                                    "{}-{}-az{:05.1}-snr{:+05.1}-s{}",
                                    room.id,
                                    placement.name(),
                                    angle,
                                    snr,
                                    stim
                                ),
                                room: room.id.clone(),
                                placement,
                                angle_deg: angle,
                                snr_db: snr,
                                stimulus: stim,
                                // SNR is left out so every SNR level of a
                                // scenario sees the same noise realisation.
                                noise_seed: mix_seed(
                                    self.seed,
                                    &[ri as u64, pi as u64, ai as u64, stim as u64],
                                ),
                                scenario,
                            });
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("empty scenario grid".into()));
        }
        Ok(out)
    }

    /// Every configured stimulus, in index order.
    pub fn all_stimuli(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.stimuli.wav.len() + self.stimuli.synthetic)
            .map(|i| self.stimulus(i))
            .collect()
    }

    /// Mono stimulus `index`: configured WAV files first, then synthetic ones.
    pub fn stimulus(&self, index: usize) -> Result<Vec<f64>> {
        if let Some(path) = self.stimuli.wav.get(index) {
            let (samples, fs) = read_mono_wav(path)?;
            if (fs - self.sample_rate).abs() > 0.5 {
                return Err(Error::Config(format!(
                    "{} is {fs} Hz, experiment runs at {} Hz",
                    path.display(),
                    self.sample_rate
                )));
            }
            return Ok(samples);
        }
        let k = index - self.stimuli.wav.len();
        Ok(synthetic_speech(
            self.stimuli.duration_s,
            self.sample_rate,
            mix_seed(self.seed, &[0x5eed, k as u64]),
        ))
    }
}

/// SplitMix64-style combination of a base seed with indices.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        z = z
            .wrapping_add(p.wrapping_mul(0xbf58_476d_1ce4_e5b9))
            .wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub id: String,
    pub room: String,
    pub placement: Placement,
    pub angle_deg: f64,
    pub snr_db: f64,
    pub stimulus: usize,
    pub noise_seed: u64,
    pub scenario: RoomScenario,
}

/// Absolute angular error in degrees, wrapped to `[0, 180]`.
pub fn circular_abs_error(truth: f64, estimate: f64) -> f64 {
    let d = (truth.to_degrees() - estimate.to_degrees()).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Ground-truth sidecar line for one simulated capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub scenario_id: String,
    pub wav: String,
    pub room: String,
    pub placement: String,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub distance_m: f64,
    pub snr_db: f64,
    pub stimulus: usize,
}

impl ScenarioSpec {
    /// Simulates this scenario with the given mono stimulus.
    pub fn simulate(
        &self,
        stimulus: &[f64],
        geometry: &ArrayGeometry,
        cfg: &ExperimentConfig,
    ) -> Result<SimulatedCapture> {
        simulate_capture(
            stimulus,
            cfg.sample_rate,
            &self.scenario,
            geometry,
            cfg.speed_of_sound,
            self.noise_seed,
        )
    }

    pub fn truth_record(&self, truth: &GroundTruth, wav: impl Into<String>) -> TruthRecord {
        TruthRecord {
            scenario_id: self.id.clone(),
            wav: wav.into(),
            room: self.room.clone(),
            placement: self.placement.name().into(),
            azimuth_deg: truth.azimuth.to_degrees(),
            elevation_deg: truth.elevation.to_degrees(),
            distance_m: truth.distance,
            snr_db: self.snr_db,
            stimulus: self.stimulus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub scenario_id: String,
    pub room: String,
    pub placement: String,
    pub snr_db: f64,
    pub stimulus: usize,
    pub estimator: String,
    pub truth_deg: f64,
    pub estimate_deg: f64,
    pub abs_error_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub scenario_id: String,
    pub estimator: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub count: usize,
    pub failures: usize,
    pub mae_deg: f64,
    pub p50_deg: f64,
    pub p90_deg: f64,
    pub p95_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub records: Vec<UtteranceRecord>,
    pub failures: Vec<FailureRecord>,
    pub config_hash: String,
}

/// Nearest-rank percentile of an unsorted sample; `NaN` when empty.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Empirical CDF: one `(error, fraction <= error)` point per distinct error.
pub fn error_cdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, e) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *e => last.1 = frac,
            _ => out.push((*e, frac)),
        }
    }
    out
}

impl ErrorReport {
    pub fn estimators(&self) -> Vec<String> {
        let mut names: Vec<String> = self.records.iter().map(|r| r.estimator.clone()).collect();
        names.extend(self.failures.iter().map(|f| f.estimator.clone()));
        names.sort();
        names.dedup();
        names
    }

    pub fn errors(&self, estimator: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.estimator == estimator)
            .map(|r| r.abs_error_deg)
            .collect()
    }

    /// Mean absolute error per (estimator, SNR), SNR ascending.
    pub fn mae_by_snr(&self) -> Vec<(String, f64, usize, f64)> {
        let mut groups: BTreeMap<(String, i64), (f64, Vec<f64>)> = BTreeMap::new();
        for r in &self.records {
            // SNRs are grouped by their value in milli-dB.
            let key = (r.estimator.clone(), (r.snr_db * 1000.0).round() as i64);
            groups
                .entry(key)
                .or_insert_with(|| (r.snr_db, Vec::new()))
                .1
                .push(r.abs_error_deg);
        }
        groups
            .into_iter()
            .map(|((est, _), (snr, errs))| {
                let mae = errs.iter().sum::<f64>() / errs.len() as f64;
                (est, snr, errs.len(), mae)
            })
            .collect()
    }

    pub fn summary(&self, estimator: &str) -> EstimatorSummary {
        let errs = self.errors(estimator);
        EstimatorSummary {
            estimator: estimator.to_string(),
            count: errs.len(),
            failures: self
                .failures
                .iter()
                .filter(|f| f.estimator == estimator)
                .count(),
            mae_deg: if errs.is_empty() {
                f64::NAN
            } else {
                errs.iter().sum::<f64>() / errs.len() as f64
            },
            p50_deg: percentile(&errs, 50.0),
            p90_deg: percentile(&errs, 90.0),
            p95_deg: percentile(&errs, 95.0),
        }
    }

    pub fn records_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "scenario_id",
            "room",
            "placement",
            "snr_db",
            "stimulus",
            "estimator",
            "truth_deg",
            "estimate_deg",
            "abs_error_deg",
        ])?;
        for r in &self.records {
            w.write_record([
                r.scenario_id.clone(),
                r.room.clone(),
                r.placement.clone(),
                format!("{:.3}", r.snr_db),
                r.stimulus.to_string(),
                r.estimator.clone(),
                format!("{:.6}", r.truth_deg),
                format!("{:.6}", r.estimate_deg),
                format!("{:.6}", r.abs_error_deg),
            ])?;
        }
        into_string(w)
    }

    pub fn mae_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["estimator", "snr_db", "count", "mae_deg"])?;
        for (est, snr, n, mae) in self.mae_by_snr() {
            w.write_record([est, format!("{snr:.3}"), n.to_string(), format!("{mae:.6}")])?;
        }
        into_string(w)
    }

    pub fn cdf_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["estimator", "abs_error_deg", "cdf"])?;
        for est in self.estimators() {
            for (e, f) in error_cdf(&self.errors(&est)) {
                w.write_record([est.clone(), format!("{e:.6}"), format!("{f:.6}")])?;
            }
        }
        into_string(w)
    }

    pub fn summary_json(&self) -> Result<String> {
        let summaries: Vec<EstimatorSummary> =
            self.estimators().iter().map(|e| self.summary(e)).collect();
        let doc = serde_json::json!({
            "config_hash": self.config_hash,
            "records": self.records.len(),
            "failures": self.failures,
            "estimators": summaries,
            "percentile_method": "nearest-rank",
            "baseline_note": "srp is textbook SRP-PHAT without robustness heuristics",
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Writes `records.csv`, `mae_by_snr.csv`, `cdf.csv` and `summary.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("records.csv"), self.records_csv()?)?;
        std::fs::write(dir.join("mae_by_snr.csv"), self.mae_csv()?)?;
        std::fs::write(dir.join("cdf.csv"), self.cdf_csv()?)?;
        std::fs::write(dir.join("summary.json"), self.summary_json()?)?;
        if !self.failures.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("failures.csv"))?;
            for f in &self.failures {
                w.serialize(f)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where per-frame likelihood CSVs go; `None` disables the dump.
    pub dump_likelihood: Option<PathBuf>,
    /// Worker count; falls back to `WAVEDOA_THREADS`, then rayon's default.
    pub threads: Option<usize>,
}

/// Worker pool size from the environment, if set.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n > 0)
}

/// CSV rows `frame,phi_deg,chi` for every frame of one utterance.
pub fn likelihood_dump_csv(output: &MleOutput) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frame", "phi_deg", "chi"])?;
    for (t, g) in output.frame_grids.iter().enumerate() {
        for (phi, v) in g.azimuths.iter().zip(&g.values) {
            w.write_record([
                t.to_string(),
                format!("{:.3}", phi.to_degrees()),
                format!("{v:.6}"),
            ])?;
        }
    }
    into_string(w)
}

struct Outcome {
    records: Vec<UtteranceRecord>,
    failures: Vec<FailureRecord>,
}

/// Simulates and estimates every scenario of `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ErrorReport> {
    cfg.validate()?;
    let dict = cfg.dictionary()?;
    let geometry = dict.geometry.clone();
    let specs = cfg.scenarios()?;
    let stimuli = cfg.all_stimuli()?;
    let mle = MleEstimator::new(&dict, cfg.mle)?;
    let bin_freqs: Vec<f64> = (0..=cfg.mle.frontend.stft.frame_len / 2)
        .map(|k| {
            std::f64::consts::TAU * k as f64 * cfg.sample_rate
                / cfg.mle.frontend.stft.frame_len as f64
        })
        .collect();
    let srp = SrpPhat::new(
        &geometry,
        &bin_freqs,
        SrpConfig {
            azimuths: dict.grid.azimuths(),
            elevations: vec![std::f64::consts::FRAC_PI_2],
            band_hz: cfg.mle.awd.band_hz,
            aggregation: cfg.srp.aggregation,
            speed_of_sound: cfg.speed_of_sound,
        },
    )?;
    if let Some(dir) = &opts.dump_likelihood {
        std::fs::create_dir_all(dir)?;
    }

    let run_one = |spec: &ScenarioSpec| -> Outcome {
        let mut out = Outcome {
            records: Vec::new(),
            failures: Vec::new(),
        };
        let fail_all = |out: &mut Outcome, e: &Error| {
            for est in &cfg.estimators {
                out.failures.push(FailureRecord {
                    scenario_id: spec.id.clone(),
                    estimator: est.name().into(),
                    error: e.to_string(),
                });
            }
        };
        let capture = match spec.simulate(&stimuli[spec.stimulus], &geometry, cfg) {
            Ok(c) => c,
            Err(e) => {
                fail_all(&mut out, &e);
                return out;
            }
        };
        let frames = match analyze(&capture.audio, &cfg.mle.frontend) {
            Ok(f) => f,
            Err(e) => {
                fail_all(&mut out, &e);
                return out;
            }
        };
        for est in &cfg.estimators {
            let result = match est {
                EstimatorKind::Mle => mle.estimate_frames(&frames).and_then(|o| {
                    if let Some(dir) = &opts.dump_likelihood {
                        std::fs::write(
                            dir.join(format!("{}.csv", spec.id)),
                            likelihood_dump_csv(&o)?,
                        )?;
                    }
                    Ok(o.estimate.phi_hat)
                }),
                EstimatorKind::Srp => srp.estimate(&frames),
            };
            match result {
                Ok(phi) => out.records.push(UtteranceRecord {
                    scenario_id: spec.id.clone(),
                    room: spec.room.clone(),
                    placement: spec.placement.name().into(),
                    snr_db: spec.snr_db,
                    stimulus: spec.stimulus,
                    estimator: est.name().into(),
                    truth_deg: capture.truth.azimuth.to_degrees(),
                    estimate_deg: phi.to_degrees(),
                    abs_error_deg: circular_abs_error(capture.truth.azimuth, phi),
                }),
                Err(e) => out.failures.push(FailureRecord {
                    scenario_id: spec.id.clone(),
                    estimator: est.name().into(),
                    error: e.to_string(),
                }),
            }
        }
        out
    };

    let threads = opts.threads.or_else(threads_from_env).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<Outcome> = pool.install(|| specs.par_iter().map(run_one).collect());

    let mut report = ErrorReport {
        records: Vec::new(),
        failures: Vec::new(),
        config_hash: cfg.hash(),
    };
    for o in outcomes {
        report.records.extend(o.records);
        report.failures.extend(o.failures);
    }
    for f in &report.failures {
        log::warn!("{} [{}]: {}", f.scenario_id, f.estimator, f.error);
    }
    Ok(report)
}

/// Estimates the azimuth of a recorded capture with the selected estimators.
pub fn estimate_capture(
    audio: &MultichannelAudio,
    dict: &SteeringDictionary,
    cfg: &ExperimentConfig,
    estimators: &[EstimatorKind],
) -> Result<Vec<(EstimatorKind, Result<MleOrSrp>)>> {
    let frames = analyze(audio, &cfg.mle.frontend)?;
    let first = frames.first().ok_or(Error::EmptyInput)?;
    let mut out = Vec::new();
    for est in estimators {
        let r = match est {
            EstimatorKind::Mle => MleEstimator::new(dict, cfg.mle)
                .and_then(|m| m.estimate_frames(&frames))
                .map(MleOrSrp::Mle),
            EstimatorKind::Srp => SrpPhat::new(
                &dict.geometry,
                &first.bin_frequencies,
                SrpConfig {
                    azimuths: dict.grid.azimuths(),
                    elevations: vec![std::f64::consts::FRAC_PI_2],
                    band_hz: cfg.mle.awd.band_hz,
                    aggregation: cfg.srp.aggregation,
                    speed_of_sound: cfg.speed_of_sound,
                },
            )
            .and_then(|s| s.estimate(&frames))
            .map(MleOrSrp::Srp),
        };
        out.push((*est, r));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum MleOrSrp {
    Mle(MleOutput),
    Srp(f64),
}

impl MleOrSrp {
    pub fn azimuth(&self) -> f64 {
        match self {
            MleOrSrp::Mle(o) => o.estimate.phi_hat,
            MleOrSrp::Srp(phi) => *phi,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circular_error_examples() {
        let r = f64::to_radians;
        assert_eq!(circular_abs_error(r(10.0), r(10.0)), 0.0);
        assert!((circular_abs_error(r(350.0), r(10.0)) - 20.0).abs() < 1e-9);
        assert!((circular_abs_error(0.0, r(180.0)) - 180.0).abs() < 1e-9);
    }

    #[test]
    fn percentiles_and_cdf() {
        let v = [5.0, 0.0, 10.0, 0.0, 20.0];
        assert_eq!(percentile(&v, 50.0), 5.0);
        assert_eq!(percentile(&v, 90.0), 20.0);
        assert_eq!(percentile(&v, 20.0), 0.0);
        let cdf = error_cdf(&v);
        assert_eq!(cdf, vec![(0.0, 0.4), (5.0, 0.6), (10.0, 0.8), (20.0, 1.0)]);
    }

    #[test]
    fn empty_grid_is_config_error() {
        let mut cfg = ExperimentConfig::default();
        cfg.scenarios.angles_deg.clear();
        assert!(matches!(
            run_experiment(&cfg, &RunOptions::default()),
            Err(Error::Config(_))
        ));
        let mut cfg = ExperimentConfig::default();
        cfg.rooms.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn off_grid_angle_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.scenarios.angles_deg = vec![12.5];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let text = r#"
            seed = 9
            estimators = ["mle"]
            [geometry]
            preset = "star4"
            [mle.likelihood.delay]
            sigma = 0.0003
            [[rooms]]
            id = "live"
            dims = [4.0, 5.0, 3.0]
            absorption = [0.3]
            [scenarios]
            placements = ["corner"]
            angles_deg = [0.0, 90.0]
            snr_db = [20.0]
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.mle.likelihood.delay.sigma, 0.0003);
        assert_eq!(cfg.mle.likelihood.delay.delta_bins, 2);
        assert_eq!(cfg.scenarios.placements, vec![Placement::Corner]);
        cfg.validate().unwrap();
        assert_eq!(cfg.scenarios().unwrap().len(), 2);
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn hash_tracks_experiment_not_output_location() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn seeds_independent_of_snr() {
        let mut cfg = ExperimentConfig::default();
        cfg.scenarios.angles_deg = vec![0.0, 10.0];
        cfg.scenarios.snr_db = vec![0.0, 30.0];
        let specs = cfg.scenarios().unwrap();
        assert_eq!(specs.len(), 4);
        assert_eq!(specs[0].noise_seed, specs[1].noise_seed);
        assert_ne!(specs[0].noise_seed, specs[2].noise_seed);
    }
}
