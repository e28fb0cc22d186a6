use std::f64::consts::PI;

/// Transposed direct-form II biquad.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    pub fn lowpass(cutoff_hz: f64, q: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / sample_rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: (1.0 - cos) / 2.0 / a0,
            b1: (1.0 - cos) / a0,
            b2: (1.0 - cos) / 2.0 / a0,
            a1: -2.0 * cos / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    pub fn highpass(cutoff_hz: f64, q: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / sample_rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: (1.0 + cos) / 2.0 / a0,
            b1: -(1.0 + cos) / a0,
            b2: (1.0 + cos) / 2.0 / a0,
            a1: -2.0 * cos / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    /// Constant-skirt band-pass (peak gain Q).
    pub fn bandpass(center_hz: f64, q: f64, sample_rate: f64) -> Self {
        let w0 = 2.0 * PI * center_hz / sample_rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b0: alpha / a0,
            b1: 0.0,
            b2: -alpha / a0,
            a1: -2.0 * cos / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    pub fn apply(&self, x: &mut [f64]) {
        let (mut s1, mut s2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let input = *v;
            let out = self.b0 * input + s1;
            s1 = self.b1 * input - self.a1 * out + s2;
            s2 = self.b2 * input - self.a2 * out;
            *v = out;
        }
    }
}

/// Pole-pair Q values of a 4th-order Butterworth response.
const BUTTERWORTH4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_5];

pub fn butterworth4_highpass(cutoff_hz: f64, sample_rate: f64) -> [Biquad; 2] {
    BUTTERWORTH4_Q.map(|q| Biquad::highpass(cutoff_hz, q, sample_rate))
}

pub fn butterworth4_lowpass(cutoff_hz: f64, sample_rate: f64) -> [Biquad; 2] {
    BUTTERWORTH4_Q.map(|q| Biquad::lowpass(cutoff_hz, q, sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gain_at(filters: &[Biquad], freq: f64, rate: f64) -> f64 {
        let n = rate as usize;
        let mut x: Vec<f64> = (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / rate).sin())
            .collect();
        for f in filters {
            f.apply(&mut x);
        }
        let tail = &x[n / 2..];
        (tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64 * 2.0).sqrt()
    }

    #[test]
    fn butterworth_corner_is_minus_3_db() {
        let rate = 44_100.0;
        let lp = butterworth4_lowpass(2000.0, rate);
        assert!((gain_at(&lp, 2000.0, rate) - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.01);
        assert!(gain_at(&lp, 200.0, rate) > 0.99);
        assert!(gain_at(&lp, 8000.0, rate) < 0.01);
        let hp = butterworth4_highpass(100.0, rate);
        assert!((gain_at(&hp, 100.0, rate) - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.01);
        assert!(gain_at(&hp, 1000.0, rate) > 0.99);
    }
}
