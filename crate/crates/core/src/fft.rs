//! Power-of-two real FFTs with per-thread plan caching.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use crate::error::{Error, Result};

/// Forward real FFT; returns `n/2 + 1` bins (DC through Nyquist).
pub fn rfft(x: &[f64]) -> Result<Vec<Complex64>> {
    let plan = RealFft::cached(x.len())?;
    let mut out = vec![Complex64::new(0.0, 0.0); plan.bins()];
    plan.forward(x, &mut out);
    Ok(out)
}

/// Inverse of [`rfft`]; `n` is the real output length.
pub fn irfft(spectrum: &[Complex64], n: usize) -> Result<Vec<f64>> {
    let plan = RealFft::cached(n)?;
    if spectrum.len() != plan.bins() {
        return Err(Error::dim(
            "irfft",
            format!("length {n} needs {} bins, got {}", plan.bins(), spectrum.len()),
        ));
    }
    let mut out = vec![0.0; n];
    plan.inverse(spectrum, &mut out);
    Ok(out)
}

pub struct RealFft {
    n: usize,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
    real_buf: RefCell<Vec<f64>>,
    spec_buf: RefCell<Vec<Complex64>>,
    scratch: RefCell<Vec<Complex64>>,
}

impl std::fmt::Debug for RealFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RealFft").field("n", &self.n).finish()
    }
}

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
    static PLANS: RefCell<HashMap<usize, Rc<RealFft>>> = RefCell::new(HashMap::new());
}

impl RealFft {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::Length(n));
        }
        let (forward, inverse) = PLANNER.with(|p| {
            let mut p = p.borrow_mut();
            (p.plan_fft_forward(n), p.plan_fft_inverse(n))
        });
        let scratch = forward.get_scratch_len().max(inverse.get_scratch_len());
        Ok(Self {
            n,
            real_buf: RefCell::new(vec![0.0; n]),
            spec_buf: RefCell::new(forward.make_output_vec()),
            scratch: RefCell::new(vec![Complex64::new(0.0, 0.0); scratch]),
            forward,
            inverse,
        })
    }

    pub fn cached(n: usize) -> Result<Rc<Self>> {
        if let Some(p) = PLANS.with(|p| p.borrow().get(&n).cloned()) {
            return Ok(p);
        }
        let plan = Rc::new(Self::new(n)?);
        PLANS.with(|p| p.borrow_mut().insert(n, plan.clone()));
        Ok(plan)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    /// `x` may be shorter than `n`; the tail is treated as zero padding.
    pub fn forward(&self, x: &[f64], out: &mut [Complex64]) {
        debug_assert!(x.len() <= self.n && out.len() == self.bins());
        let mut buf = self.real_buf.borrow_mut();
        buf[..x.len()].copy_from_slice(x);
        buf[x.len()..].fill(0.0);
        self.forward
            .process_with_scratch(&mut buf, out, &mut self.scratch.borrow_mut())
            .expect("buffer lengths fixed by the plan");
    }

    /// Writes the first `out.len()` samples (at most `n`) of the inverse.
    pub fn inverse(&self, spectrum: &[Complex64], out: &mut [f64]) {
        debug_assert!(spectrum.len() == self.bins() && out.len() <= self.n);
        let mut spec = self.spec_buf.borrow_mut();
        spec.copy_from_slice(spectrum);
        // a real signal has real DC and Nyquist bins
        spec[0].im = 0.0;
        let last = spec.len() - 1;
        spec[last].im = 0.0;
        let mut buf = self.real_buf.borrow_mut();
        self.inverse
            .process_with_scratch(&mut spec, &mut buf, &mut self.scratch.borrow_mut())
            .expect("buffer lengths fixed by the plan");
        let scale = 1.0 / self.n as f64;
        out.iter_mut().zip(buf.iter()).for_each(|(o, v)| *o = v * scale);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use std::f64::consts::PI;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| {
                        Complex64::from_polar(v, -2.0 * PI * (k * t) as f64 / n as f64)
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn unit_impulse_is_flat() {
        let s = rfft(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.len(), 3);
        for b in s {
            assert!((b - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn constant_signal() {
        let c = 2.5;
        let s = rfft(&[c; 4]).unwrap();
        assert!((s[0] - Complex64::new(4.0 * c, 0.0)).norm() < 1e-14);
        assert!(s[1].norm() < 1e-14 && s[2].norm() < 1e-14);
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = SeededRng::new(1);
        for n in [1usize, 2, 4, 16, 64] {
            let x = rng.normal_vec(n);
            let fast = rfft(&x).unwrap();
            let slow = naive_dft(&x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-12, "n={n}");
            }
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(matches!(rfft(&[0.0; 6]), Err(Error::Length(6))));
        assert!(matches!(irfft(&[Complex64::new(0.0, 0.0); 4], 6), Err(Error::Length(6))));
    }

    #[test]
    fn round_trip_all_sizes() {
        let mut rng = SeededRng::new(2);
        let mut n = 4;
        while n <= 1024 {
            let x = rng.normal_vec(n);
            let back = irfft(&rfft(&x).unwrap(), n).unwrap();
            let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "n={n} err={err}");
            n *= 2;
        }
    }

    #[test]
    fn linearity() {
        let mut rng = SeededRng::new(3);
        let x = rng.normal_vec(32);
        let y = rng.normal_vec(32);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let (fx, fy, fc) = (rfft(&x).unwrap(), rfft(&y).unwrap(), rfft(&combo).unwrap());
        for k in 0..fc.len() {
            assert!((fc[k] - (fx[k] * 2.0 - fy[k] * 0.5)).norm() < 1e-12);
        }
    }
}
