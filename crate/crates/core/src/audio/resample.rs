use super::AudioBuffer;
use crate::error::{Error, Result};

/// Lobes of the sinc kept on each side of the centre tap, measured at the
/// lower of the two rates. At unity scale this gives 32 taps per phase.
const HALF_LOBES: usize = 16;
const KAISER_BETA: f64 = 8.0;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.94;

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Rational polyphase resampler with a Kaiser-windowed sinc kernel.
///
/// The conversion `source -> target` is reduced to `up / down`; phase `p`
/// holds the kernel sampled at input offsets `k - p / up`. Each phase is
/// normalised to unit DC gain.
#[derive(Debug, Clone)]
pub struct Resampler {
    source_rate: u32,
    target_rate: u32,
    up: u64,
    down: u64,
    reach: usize,
    table: Vec<f64>,
}

impl Resampler {
    pub fn new(source_rate: u32, target_rate: u32) -> Result<Self> {
        if source_rate == 0 || target_rate == 0 {
            return Err(Error::InvalidArgument("sample rates must be positive".into()));
        }
        let g = gcd(u64::from(source_rate), u64::from(target_rate));
        let up = u64::from(target_rate) / g;
        let down = u64::from(source_rate) / g;
        let scale = (f64::from(target_rate) / f64::from(source_rate)).min(1.0);
        let cutoff = ROLLOFF * scale;
        let reach = (HALF_LOBES as f64 / scale).ceil() as usize;
        let taps = 2 * reach;
        let norm = bessel_i0(KAISER_BETA);

        let mut table = vec![0.0; up as usize * taps];
        for (p, phase) in table.chunks_exact_mut(taps).enumerate() {
            let frac = p as f64 / up as f64;
            for (i, h) in phase.iter_mut().enumerate() {
                let x = (i as f64 - (reach as f64 - 1.0)) - frac;
                let t = x / reach as f64;
                let w = if t.abs() <= 1.0 {
                    bessel_i0(KAISER_BETA * (1.0 - t * t).sqrt()) / norm
                } else {
                    0.0
                };
                *h = sinc(cutoff * x) * w;
            }
            let sum: f64 = phase.iter().sum();
            for h in phase.iter_mut() {
                *h /= sum;
            }
        }

        Ok(Self {
            source_rate,
            target_rate,
            up,
            down,
            reach,
            table,
        })
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        let num = input_len as u128 * u128::from(self.target_rate);
        let den = u128::from(self.source_rate);
        ((num + den / 2) / den) as usize
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        if self.source_rate == self.target_rate {
            return input.to_vec();
        }
        let taps = 2 * self.reach;
        let n = input.len() as i64;
        let out_len = self.output_len(input.len());
        let mut out = Vec::with_capacity(out_len);
        for j in 0..out_len as u64 {
            let pos = j * self.down;
            let base = (pos / self.up) as i64;
            let phase = (pos % self.up) as usize;
            let coeffs = &self.table[phase * taps..(phase + 1) * taps];
            let first = base - (self.reach as i64 - 1);
            let lo = (-first).max(0) as usize;
            let hi = ((n - first).max(0) as usize).min(taps);
            let mut acc = 0.0;
            if lo < hi {
                let start = (first + lo as i64) as usize;
                for (c, x) in coeffs[lo..hi].iter().zip(&input[start..start + (hi - lo)]) {
                    acc += c * x;
                }
            }
            out.push(acc);
        }
        out
    }
}

/// Band-limited conversion of `buffer` to `target_rate`.
pub fn resample(buffer: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target rate must be positive".into()));
    }
    if target_rate == buffer.sample_rate() {
        return Ok(buffer.clone());
    }
    let r = Resampler::new(buffer.sample_rate(), target_rate)?;
    AudioBuffer::new(r.process(buffer.samples()), target_rate)
}
