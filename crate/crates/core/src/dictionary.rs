//! Device acoustic dictionary: steering vectors for every (frequency, direction).
//!
//! Directions use `theta` as the polar angle from +z (90° is the horizontal
//! plane) and `phi` as the azimuth from +x towards +y. A direction names where
//! the wave arrives *from*; `unit_vector` points from the array towards the
//! source. Spectra follow the `exp(-j w t_delay)` convention of the DFT, so a
//! microphone closer to the source sees a phase advance.

use std::f64::consts::{E, PI, TAU};
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub name: String,
    pub mic_positions: Vec<[f64; 3]>,
}

impl ArrayGeometry {
    pub fn new(name: impl Into<String>, mic_positions: Vec<[f64; 3]>) -> Result<Self> {
        let geometry = Self {
            name: name.into(),
            mic_positions,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mic_positions.len() < 2 {
            return Err(Error::Geometry(format!(
                "need at least 2 microphones, got {}",
                self.mic_positions.len()
            )));
        }
        if self.mic_positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Geometry("non-finite microphone coordinate".into()));
        }
        for (i, a) in self.mic_positions.iter().enumerate() {
            for b in &self.mic_positions[i + 1..] {
                if dist(a, b) < 1e-9 {
                    return Err(Error::Geometry(format!("coincident microphones at {a:?}")));
                }
            }
        }
        Ok(())
    }

    /// Uniform circle in the horizontal plane, first mic on +x.
    pub fn uniform_circle(count: usize, radius: f64) -> Result<Self> {
        let positions = (0..count)
            .map(|i| {
                let a = TAU * i as f64 / count as f64;
                [radius * a.cos(), radius * a.sin(), 0.0]
            })
            .collect();
        Self::new(format!("circle{count}"), positions)
    }

    /// 8 microphones on a 4 cm radius circle.
    pub fn circle8() -> Self {
        Self::uniform_circle(8, 0.04).expect("valid geometry")
    }

    /// Centre microphone plus three raised microphones at 3 cm, 120° apart.
    pub fn star4() -> Self {
        let mut positions = vec![[0.0, 0.0, 0.0]];
        for i in 0..3 {
            let a = TAU * i as f64 / 3.0;
            positions.push([0.03 * a.cos(), 0.03 * a.sin(), 0.01]);
        }
        Self::new("star4", positions).expect("valid geometry")
    }

    pub fn mic_count(&self) -> usize {
        self.mic_positions.len()
    }

    /// Largest inter-microphone distance in metres.
    pub fn aperture(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.mic_positions.iter().enumerate() {
            for b in &self.mic_positions[i + 1..] {
                best = best.max(dist(a, b));
            }
        }
        best
    }

    /// Mic positions rotated by `angle` about +z.
    pub fn rotated(&self, angle: f64) -> Vec<[f64; 3]> {
        let (s, c) = angle.sin_cos();
        self.mic_positions
            .iter()
            .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
            .collect()
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    /// Polar angle from +z in radians.
    pub theta: f64,
    /// Azimuth in radians, `[0, 2pi)`.
    pub phi: f64,
}

impl Direction {
    pub fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }

    pub fn unit_vector(&self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [st * cp, st * sp, ct]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionGrid {
    pub entries: Vec<Direction>,
    pub azimuth_step: f64,
    pub elevation_levels: Vec<f64>,
}

impl DirectionGrid {
    /// Regular grid: every azimuth multiple of `azimuth_step` at each polar
    /// level. Entries are ordered level-major, azimuth-minor.
    pub fn regular(azimuth_step: f64, elevation_levels: &[f64]) -> Result<Self> {
        if !(azimuth_step > 0.0) || azimuth_step > TAU {
            return Err(Error::Config(format!(
                "azimuth step must be in (0, 2pi], got {azimuth_step}"
            )));
        }
        let count = (TAU / azimuth_step).round() as usize;
        if count == 0 || ((count as f64) * azimuth_step - TAU).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "azimuth step {azimuth_step} rad does not divide the circle"
            )));
        }
        if elevation_levels.is_empty() {
            return Err(Error::Config("no elevation levels".into()));
        }
        for (i, &t) in elevation_levels.iter().enumerate() {
            if !(0.0..=PI).contains(&t) {
                return Err(Error::Config(format!("elevation {t} outside [0, pi]")));
            }
            if elevation_levels[..i].iter().any(|&u| (u - t).abs() < 1e-12) {
                return Err(Error::Config(format!("duplicate elevation {t}")));
            }
        }
        let step = TAU / count as f64;
        let entries = elevation_levels
            .iter()
            .flat_map(|&theta| (0..count).map(move |k| Direction::new(theta, k as f64 * step)))
            .collect();
        Ok(Self {
            entries,
            azimuth_step: step,
            elevation_levels: elevation_levels.to_vec(),
        })
    }

    /// 5° azimuth step at polar angles 60°, 90°, 120°.
    pub fn default_grid() -> Self {
        Self::regular(
            5f64.to_radians(),
            &[60f64.to_radians(), 90f64.to_radians(), 120f64.to_radians()],
        )
        .expect("valid grid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn azimuth_count(&self) -> usize {
        (TAU / self.azimuth_step).round() as usize
    }

    /// The distinct azimuths of the grid, ascending.
    pub fn azimuths(&self) -> Vec<f64> {
        (0..self.azimuth_count())
            .map(|k| k as f64 * self.azimuth_step)
            .collect()
    }

    /// Index of `phi` in `azimuths()`.
    pub fn azimuth_index(&self, phi: f64) -> usize {
        let k = (phi.rem_euclid(TAU) / self.azimuth_step).round() as usize;
        k % self.azimuth_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SteeringModel {
    #[default]
    FreeField,
    RigidSphere,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringDictionary {
    pub geometry: ArrayGeometry,
    pub grid: DirectionGrid,
    /// Angular frequencies in rad/s.
    pub frequencies: Vec<f64>,
    pub model: SteeringModel,
    /// Flattened `[frequency][direction][mic]`.
    vectors: Vec<Complex64>,
}

impl SteeringDictionary {
    pub fn mic_count(&self) -> usize {
        self.geometry.mic_count()
    }

    pub fn direction_count(&self) -> usize {
        self.grid.len()
    }

    pub fn vector(&self, freq: usize, dir: usize) -> &[Complex64] {
        let m = self.mic_count();
        let start = (freq * self.direction_count() + dir) * m;
        &self.vectors[start..start + m]
    }

    /// All direction vectors at one frequency, `[direction][mic]` flattened.
    pub fn frequency_slice(&self, freq: usize) -> &[Complex64] {
        let stride = self.direction_count() * self.mic_count();
        &self.vectors[freq * stride..(freq + 1) * stride]
    }

    pub fn raw_vectors(&self) -> &[Complex64] {
        &self.vectors
    }

    /// Index of the dictionary frequency equal to `omega` (within 1e-6 rad/s).
    pub fn frequency_index(&self, omega: f64) -> Option<usize> {
        self.frequencies
            .iter()
            .position(|&w| (w - omega).abs() <= 1e-6 * omega.abs().max(1.0))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for n in [
            self.mic_count(),
            self.frequencies.len(),
            self.direction_count(),
        ] {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        w.write_all(&[match self.model {
            SteeringModel::FreeField => 0u8,
            SteeringModel::RigidSphere => 1u8,
        }])?;
        let name = self.geometry.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&self.grid.azimuth_step.to_le_bytes())?;
        w.write_all(&(self.grid.elevation_levels.len() as u32).to_le_bytes())?;
        for v in &self.grid.elevation_levels {
            w.write_all(&v.to_le_bytes())?;
        }
        for p in &self.geometry.mic_positions {
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in &self.frequencies {
            w.write_all(&v.to_le_bytes())?;
        }
        for d in &self.grid.entries {
            w.write_all(&d.theta.to_le_bytes())?;
            w.write_all(&d.phi.to_le_bytes())?;
        }
        for c in &self.vectors {
            w.write_all(&c.re.to_le_bytes())?;
            w.write_all(&c.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a dictionary file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dictionary version {version}"
            )));
        }
        let m = read_u32(&mut r)? as usize;
        let nf = read_u32(&mut r)? as usize;
        let nd = read_u32(&mut r)? as usize;
        let mut model = [0u8; 1];
        read_exact(&mut r, &mut model)?;
        let model = match model[0] {
            0 => SteeringModel::FreeField,
            1 => SteeringModel::RigidSphere,
            other => return Err(Error::Format(format!("unknown steering model tag {other}"))),
        };
        let name_len = read_u32(&mut r)? as usize;
        if name_len > r.len() {
            return Err(Error::Format("truncated dictionary file".into()));
        }
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Format("geometry name not UTF-8".into()))?;
        let azimuth_step = read_f64(&mut r)?;
        let n_levels = read_u32(&mut r)? as usize;

        // Everything after this point has a known size; check it up front so a
        // truncated or padded file never yields a partial dictionary.
        let expected = 8 * (n_levels + 3 * m + nf + 2 * nd + 2 * nf * nd * m);
        if r.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, header implies {expected}",
                r.len()
            )));
        }
        let elevation_levels = (0..n_levels)
            .map(|_| read_f64(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let mic_positions = (0..m)
            .map(|_| Ok([read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?]))
            .collect::<Result<Vec<_>>>()?;
        let frequencies = (0..nf)
            .map(|_| read_f64(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let entries = (0..nd)
            .map(|_| Ok(Direction::new(read_f64(&mut r)?, read_f64(&mut r)?)))
            .collect::<Result<Vec<_>>>()?;
        let vectors = (0..nf * nd * m)
            .map(|_| Ok(Complex64::new(read_f64(&mut r)?, read_f64(&mut r)?)))
            .collect::<Result<Vec<_>>>()?;
        let geometry = ArrayGeometry {
            name,
            mic_positions,
        };
        geometry
            .validate()
            .map_err(|e| Error::Format(format!("stored geometry invalid: {e}")))?;
        Ok(Self {
            geometry,
            grid: DirectionGrid {
                entries,
                azimuth_step,
                elevation_levels,
            },
            frequencies,
            model,
            vectors,
        })
    }
}

const MAGIC: &[u8; 8] = b"WDOADICT";
const FORMAT_VERSION: u32 = 1;

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated dictionary file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn check_inputs(grid: &DirectionGrid, frequencies: &[f64], c: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("empty direction grid".into()));
    }
    if frequencies.is_empty() {
        return Err(Error::Config("empty frequency list".into()));
    }
    if let Some(w) = frequencies.iter().find(|w| !(**w > 0.0)) {
        return Err(Error::Config(format!(
            "frequency {w} rad/s is not positive"
        )));
    }
    if !(c > 0.0) {
        return Err(Error::Config(format!("speed of sound {c} is not positive")));
    }
    Ok(())
}

fn normalize(v: &mut [Complex64]) {
    let norm = v.iter().map(Complex64::norm_sqr).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v {
            *x /= norm;
        }
    }
}

/// Plane-wave steering: `exp(j w (r_m . u) / c)` normalised to unit norm.
pub fn build_freefield_dictionary(
    geometry: &ArrayGeometry,
    grid: &DirectionGrid,
    frequencies: &[f64],
    c: f64,
) -> Result<SteeringDictionary> {
    geometry.validate()?;
    check_inputs(grid, frequencies, c)?;
    let m = geometry.mic_count();
    let scale = 1.0 / (m as f64).sqrt();
    let vectors = frequencies
        .par_iter()
        .flat_map_iter(|&w| {
            grid.entries.iter().flat_map(move |d| {
                let u = d.unit_vector();
                geometry.mic_positions.iter().map(move |r| {
                    let tau = -dot(r, &u) / c;
                    Complex64::from_polar(scale, -w * tau)
                })
            })
        })
        .collect();
    Ok(SteeringDictionary {
        geometry: geometry.clone(),
        grid: grid.clone(),
        frequencies: frequencies.to_vec(),
        model: SteeringModel::FreeField,
        vectors,
    })
}

/// Minimum series order used for sphere scattering at size parameter `ka`.
pub fn sphere_truncation_order(ka: f64) -> usize {
    (E * ka / 2.0).ceil() as usize + 4
}

/// Total surface pressure of a rigid sphere of radius `radius`, centred at the
/// origin, under a unit plane wave, for every mic on the sphere.
pub fn build_rigid_sphere_dictionary(
    geometry: &ArrayGeometry,
    radius: f64,
    grid: &DirectionGrid,
    frequencies: &[f64],
    c: f64,
) -> Result<SteeringDictionary> {
    geometry.validate()?;
    check_inputs(grid, frequencies, c)?;
    if !(radius > 0.0) {
        return Err(Error::Geometry(format!(
            "sphere radius {radius} is not positive"
        )));
    }
    for p in &geometry.mic_positions {
        let r = dot(p, p).sqrt();
        if (r - radius).abs() > 1e-6 {
            return Err(Error::Geometry(format!(
                "microphone {p:?} is {r} m from the centre, sphere radius is {radius} m"
            )));
        }
    }
    let mic_dirs: Vec<[f64; 3]> = geometry
        .mic_positions
        .iter()
        .map(|p| {
            let r = dot(p, p).sqrt();
            [p[0] / r, p[1] / r, p[2] / r]
        })
        .collect();

    let per_freq: Vec<Vec<Complex64>> = frequencies
        .par_iter()
        .map(|&w| {
            let ka = w * radius / c;
            let coeffs = surface_modal_coefficients(ka, sphere_truncation_order(ka));
            let mut out = Vec::with_capacity(grid.len() * mic_dirs.len());
            for d in &grid.entries {
                let u = d.unit_vector();
                let start = out.len();
                for md in &mic_dirs {
                    // Angle between the mic and the propagation direction (-u).
                    let cos_gamma = -dot(md, &u);
                    let p = legendre_series(&coeffs, cos_gamma);
                    // Modal sum uses the exp(-i w t) convention; conjugate into
                    // the exp(+j w t) convention of the STFT.
                    out.push(p.conj());
                }
                normalize(&mut out[start..]);
            }
            out
        })
        .collect();
    Ok(SteeringDictionary {
        geometry: geometry.clone(),
        grid: grid.clone(),
        frequencies: frequencies.to_vec(),
        model: SteeringModel::RigidSphere,
        vectors: per_freq.into_iter().flatten().collect(),
    })
}

/// `(2n+1) i^n * i / ((ka)^2 h_n'(ka))` for n = 0..=order.
fn surface_modal_coefficients(ka: f64, order: usize) -> Vec<Complex64> {
    let h = spherical_hankel1(order + 1, ka);
    let i = Complex64::new(0.0, 1.0);
    (0..=order)
        .map(|n| {
            let dh = if n == 0 {
                -h[1]
            } else {
                h[n - 1] - h[n] * ((n + 1) as f64 / ka)
            };
            let i_pow = i.powu(n as u32);
            i_pow * i * (2 * n + 1) as f64 / (dh * ka * ka)
        })
        .collect()
}

fn legendre_series(coeffs: &[Complex64], x: f64) -> Complex64 {
    let mut p_prev = 1.0;
    let mut p = x;
    let mut sum = coeffs[0] * p_prev;
    if coeffs.len() > 1 {
        sum += coeffs[1] * p;
    }
    for (n, c) in coeffs.iter().enumerate().skip(2) {
        let k = (n - 1) as f64;
        let next = ((2.0 * k + 1.0) * x * p - k * p_prev) / (k + 1.0);
        p_prev = p;
        p = next;
        sum += c * p;
    }
    sum
}

/// Spherical Hankel functions of the first kind `h_n = j_n + i y_n`, n = 0..=n_max.
fn spherical_hankel1(n_max: usize, x: f64) -> Vec<Complex64> {
    let j = spherical_bessel_j(n_max, x);
    let y = spherical_bessel_y(n_max, x);
    j.into_iter()
        .zip(y)
        .map(|(a, b)| Complex64::new(a, b))
        .collect()
}

/// `j_n` by downward (Miller) recurrence, normalised against `j_0` or `j_1`.
fn spherical_bessel_j(n_max: usize, x: f64) -> Vec<f64> {
    let start = n_max + 20 + x.ceil() as usize;
    let mut vals = vec![0.0; start + 2];
    vals[start + 1] = 0.0;
    vals[start] = 1e-30;
    for n in (1..=start).rev() {
        vals[n - 1] = (2 * n + 1) as f64 / x * vals[n] - vals[n + 1];
        if vals[n - 1].abs() > 1e250 {
            for v in &mut vals[n - 1..] {
                *v *= 1e-250;
            }
        }
    }
    let j0 = if x < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    };
    let j1 = if x < 1e-4 {
        x / 3.0
    } else {
        x.sin() / (x * x) - x.cos() / x
    };
    let scale = if j0.abs() >= j1.abs() {
        j0 / vals[0]
    } else {
        j1 / vals[1]
    };
    vals.truncate(n_max + 1);
    vals.iter_mut().for_each(|v| *v *= scale);
    vals
}

/// `y_n` by upward recurrence (stable for the irregular solution).
fn spherical_bessel_y(n_max: usize, x: f64) -> Vec<f64> {
    let mut vals = Vec::with_capacity(n_max + 1);
    vals.push(-x.cos() / x);
    if n_max >= 1 {
        vals.push(-x.cos() / (x * x) - x.sin() / x);
    }
    for n in 1..n_max {
        let next = (2 * n + 1) as f64 / x * vals[n] - vals[n - 1];
        vals.push(next);
    }
    vals
}
