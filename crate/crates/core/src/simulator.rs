//! Shoebox-room image-source simulation with calibrated additive noise.

use std::f64::consts::{PI, TAU};
use std::path::PathBuf;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dictionary::ArrayGeometry;
use crate::error::{Error, Result};
use crate::frontend::{read_mono_wav, MultichannelAudio};

/// Fractional-delay interpolator length (odd).
pub const SINC_TAPS: usize = 81;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "path")]
pub enum NoiseKind {
    #[default]
    White,
    /// Multichannel (or mono, reused for every mic) noise recording.
    Recorded(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomScenario {
    pub room_dims: [f64; 3],
    /// Absorption of the walls at x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
    pub wall_absorption: [f64; 6],
    pub source_pos: [f64; 3],
    pub array_center: [f64; 3],
    /// Rotation of the array about +z, radians.
    pub array_rotation: f64,
    pub max_image_order: usize,
    pub snr_db: f64,
    #[serde(default)]
    pub noise: NoiseKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Azimuth in the array frame, `[0, 2pi)`.
    pub azimuth: f64,
    /// Polar angle from +z.
    pub elevation: f64,
    pub distance: f64,
}

impl RoomScenario {
    fn inside(&self, p: &[f64; 3]) -> bool {
        p.iter()
            .zip(&self.room_dims)
            .all(|(v, l)| *v > 0.0 && v < l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.room_dims.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Geometry(format!(
                "bad room size {:?}",
                self.room_dims
            )));
        }
        if self
            .wall_absorption
            .iter()
            .any(|a| !(*a > 0.0 && *a <= 1.0))
        {
            return Err(Error::Geometry(format!(
                "absorption must be in (0, 1], got {:?}",
                self.wall_absorption
            )));
        }
        if !self.inside(&self.source_pos) {
            return Err(Error::Geometry(format!(
                "source {:?} outside room {:?}",
                self.source_pos, self.room_dims
            )));
        }
        if !self.inside(&self.array_center) {
            return Err(Error::Geometry(format!(
                "array centre {:?} outside room",
                self.array_center
            )));
        }
        Ok(())
    }

    /// World coordinates of every microphone.
    pub fn mic_positions(&self, geometry: &ArrayGeometry) -> Vec<[f64; 3]> {
        geometry
            .rotated(self.array_rotation)
            .into_iter()
            .map(|p| {
                [
                    p[0] + self.array_center[0],
                    p[1] + self.array_center[1],
                    p[2] + self.array_center[2],
                ]
            })
            .collect()
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let v = [
            self.source_pos[0] - self.array_center[0],
            self.source_pos[1] - self.array_center[1],
            self.source_pos[2] - self.array_center[2],
        ];
        let distance = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let azimuth = (v[1].atan2(v[0]) - self.array_rotation).rem_euclid(TAU);
        GroundTruth {
            azimuth: if azimuth >= TAU { 0.0 } else { azimuth },
            elevation: (v[2] / distance).clamp(-1.0, 1.0).acos(),
            distance,
        }
    }

    fn reflection_coefficients(&self) -> [f64; 6] {
        self.wall_absorption.map(|a| (1.0 - a).max(0.0).sqrt())
    }
}

/// One image source: path length in metres and amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePath {
    pub distance: f64,
    pub gain: f64,
    pub order: usize,
}

/// Enumerates the image sources seen by `mic` up to the scenario's order.
/// Images whose reflection product is zero are dropped.
pub fn image_paths(scenario: &RoomScenario, mic: &[f64; 3]) -> Vec<ImagePath> {
    let beta = scenario.reflection_coefficients();
    let n = scenario.max_image_order as i64;
    let l = scenario.room_dims;
    let s = scenario.source_pos;
    let mut paths = Vec::new();
    for mx in -n..=n {
        for my in -n..=n {
            for mz in -n..=n {
                for q in 0..=1i64 {
                    for j in 0..=1i64 {
                        for k in 0..=1i64 {
                            let order =
                                (2 * mx - q).abs() + (2 * my - j).abs() + (2 * mz - k).abs();
                            if order > n {
                                continue;
                            }
                            let img = [
                                (1 - 2 * q) as f64 * s[0] + 2.0 * mx as f64 * l[0],
                                (1 - 2 * j) as f64 * s[1] + 2.0 * my as f64 * l[1],
                                (1 - 2 * k) as f64 * s[2] + 2.0 * mz as f64 * l[2],
                            ];
                            let refl = beta[0].powi((mx - q).abs() as i32)
                                * beta[1].powi(mx.abs() as i32)
                                * beta[2].powi((my - j).abs() as i32)
                                * beta[3].powi(my.abs() as i32)
                                * beta[4].powi((mz - k).abs() as i32)
                                * beta[5].powi(mz.abs() as i32);
                            if refl == 0.0 {
                                continue;
                            }
                            let d = ((img[0] - mic[0]).powi(2)
                                + (img[1] - mic[1]).powi(2)
                                + (img[2] - mic[2]).powi(2))
                            .sqrt();
                            paths.push(ImagePath {
                                distance: d,
                                gain: refl / d,
                                order: order as usize,
                            });
                        }
                    }
                }
            }
        }
    }
    paths
}

/// Hann-windowed sinc centred at fractional offset `frac`, taps `-half..=half`.
fn fractional_delay_kernel(frac: f64) -> Vec<f64> {
    let half = (SINC_TAPS / 2) as i64;
    (-half..=half)
        .map(|i| {
            let t = i as f64 - frac;
            if t.abs() > half as f64 + 1.0 {
                return 0.0;
            }
            let window = 0.5 * (1.0 + (PI * t / (half as f64 + 1.0)).cos());
            let sinc = if t.abs() < 1e-12 {
                1.0
            } else {
                (PI * t).sin() / (PI * t)
            };
            window * sinc
        })
        .collect()
}

/// Room impulse response from the scenario's source to `mic`.
pub fn image_source_rir(
    scenario: &RoomScenario,
    mic: &[f64; 3],
    fs: f64,
    c: f64,
) -> Result<Vec<f64>> {
    scenario.validate()?;
    if !scenario.inside(mic) {
        return Err(Error::Geometry(format!("microphone {mic:?} outside room")));
    }
    if !(fs > 0.0 && c > 0.0) {
        return Err(Error::Config(
            "sample rate and speed of sound must be positive".into(),
        ));
    }
    let paths = image_paths(scenario, mic);
    let half = SINC_TAPS / 2;
    let max_delay = paths
        .iter()
        .map(|p| p.distance / c * fs)
        .fold(0.0f64, f64::max);
    let mut rir = vec![0.0; max_delay.ceil() as usize + half + 2];
    for p in &paths {
        let delay = p.distance / c * fs;
        // Delays within float noise of an integer get an exact delta.
        let nearest = delay.round();
        let (base, frac) = if (delay - nearest).abs() < 1e-9 {
            (nearest, 0.0)
        } else {
            (delay.floor(), delay - delay.floor())
        };
        let base = base as i64;
        if frac == 0.0 {
            rir[base as usize] += p.gain;
            continue;
        }
        for (i, h) in fractional_delay_kernel(frac).into_iter().enumerate() {
            let idx = base + i as i64 - half as i64;
            if idx >= 0 && (idx as usize) < rir.len() {
                rir[idx as usize] += p.gain * h;
            }
        }
    }
    Ok(rir)
}

/// Linear convolution truncated to the length of `signal`.
pub fn convolve_truncated(signal: &[f64], kernel: &[f64]) -> Vec<f64> {
    if signal.is_empty() || kernel.is_empty() {
        return vec![0.0; signal.len()];
    }
    let full = signal.len() + kernel.len() - 1;
    let n = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex64> = signal.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    a.resize(n, Complex64::new(0.0, 0.0));
    let mut b: Vec<Complex64> = kernel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    b.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    a.iter()
        .take(signal.len())
        .map(|v| v.re / n as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedCapture {
    pub audio: MultichannelAudio,
    pub truth: GroundTruth,
    /// Mean per-sample power of the reverberant speech across channels.
    pub speech_power: f64,
    /// Mean per-sample power of the added noise across channels.
    pub noise_power: f64,
}

fn mean_power(channels: &[Vec<f64>]) -> f64 {
    let n: usize = channels.iter().map(Vec::len).sum();
    channels.iter().flatten().map(|v| v * v).sum::<f64>() / n.max(1) as f64
}

fn noise_channels(
    kind: &NoiseKind,
    m: usize,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    match kind {
        NoiseKind::White => Ok((0..m)
            .map(|_| {
                (0..len)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()),
        NoiseKind::Recorded(path) => {
            let rec = match MultichannelAudio::read_wav(path) {
                Ok(a) => a.into_channels(),
                Err(Error::MalformedInput(_)) => vec![read_mono_wav(path)?.0],
                Err(e) => return Err(e),
            };
            if rec[0].is_empty() {
                return Err(Error::InvalidStimulus(format!(
                    "noise file {} is empty",
                    path.display()
                )));
            }
            let offset = rng.random_range(0..rec[0].len());
            Ok((0..m)
                .map(|ch| {
                    let src = &rec[ch % rec.len()];
                    (0..len).map(|i| src[(offset + i) % src.len()]).collect()
                })
                .collect())
        }
    }
}

/// Reverberant multichannel capture of `speech` plus noise at the scenario SNR.
pub fn simulate_capture(
    speech: &[f64],
    fs: f64,
    scenario: &RoomScenario,
    geometry: &ArrayGeometry,
    c: f64,
    seed: u64,
) -> Result<SimulatedCapture> {
    if speech.iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidStimulus("speech is silent".into()));
    }
    scenario.validate()?;
    let mics = scenario.mic_positions(geometry);
    let clean = mics
        .iter()
        .map(|mic| {
            Ok(convolve_truncated(
                speech,
                &image_source_rir(scenario, mic, fs, c)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let speech_power = mean_power(&clean);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = noise_channels(&scenario.noise, mics.len(), speech.len(), &mut rng)?;
    let raw_power = mean_power(&raw);
    if raw_power == 0.0 {
        return Err(Error::InvalidStimulus("noise is silent".into()));
    }
    let target = speech_power / 10f64.powf(scenario.snr_db / 10.0);
    let gain = (target / raw_power).sqrt();
    let noise: Vec<Vec<f64>> = raw
        .into_iter()
        .map(|ch| ch.into_iter().map(|v| v * gain).collect())
        .collect();
    let noise_power = mean_power(&noise);
    let mixed = clean
        .iter()
        .zip(&noise)
        .map(|(s, n)| s.iter().zip(n).map(|(a, b)| a + b).collect())
        .collect();
    Ok(SimulatedCapture {
        audio: MultichannelAudio::new(mixed, fs)?,
        truth: scenario.ground_truth(),
        speech_power,
        noise_power,
    })
}

/// Where the array sits in the room.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    Center,
    Wall,
    Corner,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::Center => "center",
            Placement::Wall => "wall",
            Placement::Corner => "corner",
        }
    }

    /// Array centre for a room of the given size at `height`, and the world
    /// direction (radians) pointing into open space from there.
    pub fn layout(self, room: [f64; 3], height: f64) -> ([f64; 3], f64) {
        match self {
            Placement::Center => ([room[0] / 2.0, room[1] / 2.0, height], PI / 2.0),
            Placement::Wall => ([room[0] / 2.0, 0.5, height], PI / 2.0),
            Placement::Corner => ([0.5, 0.5, height], PI / 4.0),
        }
    }
}

/// A scenario with the source `distance` metres from the array along the
/// placement's open direction and the array turned so the source appears at
/// `azimuth` in the array frame.
pub fn placed_scenario(
    room_dims: [f64; 3],
    wall_absorption: [f64; 6],
    max_image_order: usize,
    placement: Placement,
    distance: f64,
    azimuth: f64,
    snr_db: f64,
) -> RoomScenario {
    let height = 1.2f64.min(room_dims[2] / 2.0);
    let (center, open) = placement.layout(room_dims, height);
    RoomScenario {
        room_dims,
        wall_absorption,
        source_pos: [
            center[0] + distance * open.cos(),
            center[1] + distance * open.sin(),
            height,
        ],
        array_center: center,
        array_rotation: (open - azimuth).rem_euclid(TAU),
        max_image_order,
        snr_db,
        noise: NoiseKind::White,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const C: f64 = 343.0;
    const FS: f64 = 16000.0;

    fn anechoic(source: [f64; 3], mic_center: [f64; 3]) -> RoomScenario {
        RoomScenario {
            room_dims: [6.0, 6.0, 3.0],
            wall_absorption: [1.0; 6],
            source_pos: source,
            array_center: mic_center,
            array_rotation: 0.0,
            max_image_order: 0,
            snr_db: 30.0,
            noise: NoiseKind::White,
        }
    }

    #[test]
    fn order_zero_is_direct_path() {
        // 70 samples of travel.
        let d = 70.0 * C / FS;
        let mic = [1.0, 2.0, 1.5];
        let mut s = anechoic([1.0 + d, 2.0, 1.5], mic);
        let rir = image_source_rir(&s, &mic, FS, C).unwrap();
        let nonzero: Vec<(usize, f64)> = rir
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() > 0.0)
            .map(|(i, v)| (i, *v))
            .collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0].0, 70);
        assert_relative_eq!(nonzero[0].1, 1.0 / d, epsilon = 1e-12);

        // full absorption: higher orders change nothing
        s.max_image_order = 4;
        assert_eq!(image_source_rir(&s, &mic, FS, C).unwrap(), rir);
    }

    #[test]
    fn single_reflective_wall() {
        let mic = [2.0, 3.0, 1.5];
        let src = [3.0, 3.5, 1.5];
        let mut s = anechoic(src, mic);
        s.max_image_order = 1;
        s.wall_absorption[0] = 0.5; // wall x = 0
        let paths = image_paths(&s, &mic);
        assert_eq!(paths.len(), 2);
        let mirror = [-src[0], src[1], src[2]];
        let expected = ((mirror[0] - mic[0]).powi(2) + (mirror[1] - mic[1]).powi(2)).sqrt();
        let refl = paths.iter().find(|p| p.order == 1).unwrap();
        assert_relative_eq!(refl.distance, expected, epsilon = 1e-12);
        assert_relative_eq!(refl.gain, 0.5f64.sqrt() / expected, epsilon = 1e-12);
        let rir = image_source_rir(&s, &mic, FS, C).unwrap();
        let peak = (expected / C * FS).round() as usize;
        let local = rir[peak - 2..=peak + 2]
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        assert!((rir[peak].abs() - local).abs() < 1e-15);
    }

    #[test]
    fn rir_energy_non_increasing_in_absorption() {
        let mic = [1.2, 1.7, 1.1];
        let mut last = f64::INFINITY;
        for a in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let s = RoomScenario {
                room_dims: [4.0, 5.0, 3.0],
                wall_absorption: [a; 6],
                source_pos: [2.5, 3.1, 1.4],
                array_center: mic,
                array_rotation: 0.0,
                max_image_order: 3,
                snr_db: 20.0,
                noise: NoiseKind::White,
            };
            let e: f64 = image_source_rir(&s, &mic, FS, C)
                .unwrap()
                .iter()
                .map(|v| v * v)
                .sum();
            assert!(e <= last);
            last = e;
        }
    }

    #[test]
    fn doubling_distance_halves_direct_amplitude() {
        let mic = [1.0, 1.0, 1.0];
        let d = 64.0 * C / FS;
        let a = image_source_rir(&anechoic([1.0 + d, 1.0, 1.0], mic), &mic, FS, C).unwrap();
        let b = image_source_rir(&anechoic([1.0 + 2.0 * d, 1.0, 1.0], mic), &mic, FS, C).unwrap();
        let pa = a.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let pb = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert_relative_eq!(pa / pb, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_outside_positions() {
        let s = anechoic([7.0, 1.0, 1.0], [1.0, 1.0, 1.0]);
        assert!(matches!(
            image_source_rir(&s, &[1.0, 1.0, 1.0], FS, C),
            Err(Error::Geometry(_))
        ));
        let s = anechoic([2.0, 1.0, 1.0], [1.0, 1.0, 1.0]);
        assert!(matches!(
            image_source_rir(&s, &[1.0, -1.0, 1.0], FS, C),
            Err(Error::Geometry(_))
        ));
    }

    fn tone(len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| {
                (TAU * 440.0 * n as f64 / FS).sin() + 0.5 * (TAU * 1234.0 * n as f64 / FS).sin()
            })
            .collect()
    }

    #[test]
    fn snr_calibration() {
        let geometry = ArrayGeometry::circle8();
        let mut s = placed_scenario(
            [4.0, 5.0, 3.0],
            [0.3; 6],
            2,
            Placement::Center,
            1.5,
            0.7,
            0.0,
        );
        let cap = simulate_capture(&tone(8000), FS, &s, &geometry, C, 9).unwrap();
        let ratio_db = 10.0 * (cap.speech_power / cap.noise_power).log10();
        assert!(ratio_db.abs() < 0.1);
        s.snr_db = 17.0;
        let cap = simulate_capture(&tone(8000), FS, &s, &geometry, C, 9).unwrap();
        assert!((10.0 * (cap.speech_power / cap.noise_power).log10() - 17.0).abs() < 0.1);
    }

    #[test]
    fn silent_speech_rejected() {
        let s = placed_scenario(
            [4.0, 5.0, 3.0],
            [0.3; 6],
            1,
            Placement::Center,
            1.5,
            0.0,
            10.0,
        );
        assert!(matches!(
            simulate_capture(&[0.0; 100], FS, &s, &ArrayGeometry::circle8(), C, 1),
            Err(Error::InvalidStimulus(_))
        ));
    }

    #[test]
    fn seeded_noise_is_deterministic() {
        let s = placed_scenario(
            [4.0, 5.0, 3.0],
            [0.3; 6],
            1,
            Placement::Wall,
            1.5,
            1.0,
            10.0,
        );
        let g = ArrayGeometry::star4();
        let a = simulate_capture(&tone(4000), FS, &s, &g, C, 42).unwrap();
        let b = simulate_capture(&tone(4000), FS, &s, &g, C, 42).unwrap();
        let c = simulate_capture(&tone(4000), FS, &s, &g, C, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.audio, c.audio);
    }

    #[test]
    fn rotation_shifts_truth() {
        let mut s = placed_scenario(
            [4.0, 5.0, 3.0],
            [0.3; 6],
            1,
            Placement::Center,
            1.5,
            0.0,
            10.0,
        );
        let before = s.ground_truth().azimuth;
        s.array_rotation += PI / 2.0;
        let after = s.ground_truth().azimuth;
        let diff = (before - after).rem_euclid(TAU);
        assert_relative_eq!(diff, PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn placed_scenarios_hit_requested_azimuth() {
        for placement in [Placement::Center, Placement::Wall, Placement::Corner] {
            for k in 0..36 {
                let az = (k as f64 * 10.0).to_radians();
                let s = placed_scenario([4.0, 5.0, 3.0], [0.3; 6], 2, placement, 2.0, az, 20.0);
                s.validate().unwrap();
                let t = s.ground_truth();
                assert!(crate::likelihood::circular_distance(t.azimuth, az) < 1e-9);
                assert_relative_eq!(t.distance, 2.0, epsilon = 1e-12);
                assert_relative_eq!(t.elevation, PI / 2.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn convolution_matches_direct() {
        let x: Vec<f64> = (0..300)
            .map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5)
            .collect();
        let h = [0.5, -0.25, 0.125, 0.0, 1.0];
        let y = convolve_truncated(&x, &h);
        for n in 0..x.len() {
            let direct: f64 = (0..h.len())
                .filter(|&k| k <= n)
                .map(|k| h[k] * x[n - k])
                .sum();
            assert!((y[n] - direct).abs() < 1e-12);
        }
    }
}
