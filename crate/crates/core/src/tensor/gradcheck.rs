//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Coordinates whose absolute error is below this pass regardless of relative error.
    pub abs_tol: f64,
    /// Upper bound on perturbed coordinates per input; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error among coordinates that exceed the absolute tolerance.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub failures: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            checked: self.checked + other.checked,
            failures: self.failures + other.failures,
        }
    }
}

/// Compares the tape gradient of `f` with central differences at `inputs`.
///
/// Every input is treated as a trainable leaf. `f` must build a scalar.
pub fn check_gradients<T, F>(inputs: &[Tensor<T>], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .map(|&v| grads.get(v).expect("param leaf").to_vec())
        .collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t)).collect();
        Ok(f(&tape, &vars)?.item().as_f64())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        failures: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            work[which].data_mut()[j] = orig + T::lit(cfg.step);
            let plus = eval(&work)?;
            work[which].data_mut()[j] = orig - T::lit(cfg.step);
            let minus = eval(&work)?;
            work[which].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[which][j].as_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs > cfg.abs_tol {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= cfg.rel_tol || !rel.is_finite() {
                    report.failures += 1;
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::<f64>::from_f64([3], &[0.7, -1.3, 2.0]).unwrap();
        let cfg = GradCheckConfig::default();
        let good = check_gradients(&[x.clone()], |_, v| Ok(v[0].square().sum_all()), &cfg).unwrap();
        assert!(good.passed(), "{good:?}");
        let bad = check_gradients(&[x], |_, v| Ok(v[0].broken_square().sum_all()), &cfg).unwrap();
        assert!(!bad.passed());
        assert_eq!(bad.failures, 3);
    }
}
