//! Seeded speech-like test stimulus: voiced syllables (harmonic source shaped
//! by three formants) interleaved with short fricatives and pauses.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Leading silence, seconds; gives the noise tracker a speech-free start.
pub const LEAD_SILENCE: f64 = 0.2;

struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    z: [f64; 2],
}

impl Biquad {
    /// Constant-peak-gain resonator at `freq` Hz with bandwidth `bw` Hz.
    fn bandpass(freq: f64, bw: f64, fs: f64) -> Self {
        let w0 = TAU * freq / fs;
        let q = freq / bw;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

fn formant_gain(f: f64, formants: &[(f64, f64)]) -> f64 {
    formants
        .iter()
        .map(|&(fc, bw)| 1.0 / (1.0 + ((f - fc) / (bw / 2.0)).powi(2)).sqrt())
        .sum::<f64>()
        / (1.0 + f / 1000.0)
}

/// `duration` seconds of speech-like signal at `fs`, peak-normalised to 0.5.
pub fn synthetic_speech(duration: f64, fs: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (duration * fs).round() as usize;
    let mut out = vec![0.0; len];
    let mut t = LEAD_SILENCE;
    let base_f0 = rng.random_range(100.0..190.0);
    while t < duration - 0.15 {
        let syl = rng.random_range(0.12f64..0.28).min(duration - 0.05 - t);
        let start = (t * fs) as usize;
        let n = (syl * fs) as usize;
        let level = rng.random_range(0.5..1.0);
        if rng.random_bool(0.8) {
            let formants = [
                (rng.random_range(300.0..800.0), 90.0),
                (rng.random_range(900.0..2300.0), 120.0),
                (rng.random_range(2400.0..3200.0), 180.0),
            ];
            let f0_start = base_f0 * rng.random_range(0.85..1.15);
            let f0_end = base_f0 * rng.random_range(0.85..1.15);
            let harmonics = (4000.0 / (base_f0 * 0.85)) as usize;
            let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..TAU)).collect();
            let mut phase = 0.0;
            for i in 0..n {
                let frac = i as f64 / n as f64;
                let f0 = f0_start + (f0_end - f0_start) * frac;
                phase += TAU * f0 / fs;
                let env = (PI * frac).sin().powf(0.6);
                let mut v = 0.0;
                for (h, ph) in phases.iter().enumerate() {
                    let f = f0 * (h + 1) as f64;
                    if f > 4200.0 {
                        break;
                    }
                    v += formant_gain(f, &formants) * ((h + 1) as f64 * phase + ph).sin();
                }
                out[start + i] += level * env * v;
            }
        } else {
            let mut filt = Biquad::bandpass(rng.random_range(2500.0..3500.0), 1500.0, fs);
            for i in 0..n {
                let frac = i as f64 / n as f64;
                let env = (PI * frac).sin();
                let x: f64 = rng.sample(StandardNormal);
                out[start + i] += 0.6 * level * env * filt.process(x);
            }
        }
        t += syl + rng.random_range(0.03..0.12);
    }
    let peak = out.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}
