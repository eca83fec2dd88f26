//! Stretched and clamped Hard Concrete gates.
//!
//! A binary-concrete sample `s = sigmoid((log e - log(1 - e) + u) / tau)` is
//! stretched to `(l, r)` and clamped to `[0, 1]`, which puts point masses on
//! exactly 0 and 1 while staying reparameterizable in `u`.

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Scalar, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HCParams {
    /// Lower stretch limit, `<= 0`.
    pub l: f64,
    /// Upper stretch limit, `>= 1`.
    pub r: f64,
    /// Temperature, `> 0`.
    pub tau: f64,
}

impl Default for HCParams {
    fn default() -> Self {
        Self {
            l: -0.2,
            r: 1.0,
            tau: 0.2,
        }
    }
}

impl HCParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.l <= 0.0 && self.r >= 1.0 && self.tau > 0.0) || !self.l.is_finite() || !self.r.is_finite() {
            return Err(Error::Config(format!(
                "hard concrete needs l <= 0, r >= 1, tau > 0 (got l={}, r={}, tau={})",
                self.l, self.r, self.tau
            )));
        }
        Ok(())
    }

    /// `tau * log(-l / r)`, the location shift of `P(z > 0)`.
    fn l0_shift(&self) -> std::result::Result<f64, NumericsError> {
        if self.l >= 0.0 {
            return Err(NumericsError::Domain {
                op: "prob_nonzero",
                detail: "l = 0 leaves no mass at zero (log of 0)".into(),
            });
        }
        Ok(self.tau * (-self.l / self.r).ln())
    }
}

/// Uniform draws strictly inside `(0, 1)`.
pub fn uniform_noise<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.sample::<f64, _>(Open01)).max(T::min_positive_value()).min(T::one() - T::epsilon()))
        .collect();
    Tensor::new(shape, data).expect("noise shape")
}

fn logistic_noise<T: Scalar>(noise: &Tensor<T>) -> std::result::Result<Tensor<T>, NumericsError> {
    if noise.data().iter().any(|&e| e <= T::zero() || e >= T::one()) {
        return Err(NumericsError::Domain {
            op: "hard_concrete_sample",
            detail: "noise must lie strictly inside (0, 1)".into(),
        });
    }
    Ok(noise.map(|e| e.ln() - (T::one() - e).ln()))
}

/// Reparameterized sample `z = clamp(sigmoid((logit(e) + u) / tau) * (r - l) + l, 0, 1)`.
pub fn sample<'t, T: Scalar>(u: Var<'t, T>, noise: &Tensor<T>, hc: &HCParams) -> Result<Var<'t, T>> {
    if noise.shape() != u.shape() {
        return Err(Error::Dimension(format!(
            "noise {:?} for logits {:?}",
            noise.shape(),
            u.shape()
        )));
    }
    let eps = u.tape().constant(logistic_noise(noise)?);
    let z = u
        .add(eps)?
        .scale(1.0 / hc.tau)?
        .sigmoid()?
        .affine(hc.r - hc.l, hc.l)?
        .clamp(0.0, 1.0)?;
    Ok(z)
}

/// `P(z > 0) = sigmoid(u - tau * log(-l / r))`, elementwise.
pub fn prob_nonzero<'t, T: Scalar>(u: Var<'t, T>, hc: &HCParams) -> Result<Var<'t, T>> {
    let shift = hc.l0_shift()?;
    Ok(u.affine(1.0, -shift)?.sigmoid()?)
}

/// Sum of [`prob_nonzero`] over every entry: the differentiable L0 surrogate.
pub fn expected_l0<'t, T: Scalar>(u: Var<'t, T>, hc: &HCParams) -> Result<Var<'t, T>> {
    Ok(prob_nonzero(u, hc)?.sum()?)
}

/// Inference gate `clamp(sigmoid(u) * (r - l) + l, 0, 1)`.
pub fn deterministic_gate<'t, T: Scalar>(u: Var<'t, T>, hc: &HCParams) -> Result<Var<'t, T>> {
    Ok(u.sigmoid()?.affine(hc.r - hc.l, hc.l)?.clamp(0.0, 1.0)?)
}

/// Scalar forms of the same maps, for diagnostics and reports.
pub mod scalar {
    use super::HCParams;

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    pub fn sample(u: f64, noise: f64, hc: &HCParams) -> f64 {
        let s = sigmoid((noise.ln() - (1.0 - noise).ln() + u) / hc.tau);
        (s * (hc.r - hc.l) + hc.l).clamp(0.0, 1.0)
    }

    pub fn prob_nonzero(u: f64, hc: &HCParams) -> f64 {
        sigmoid(u - hc.tau * (-hc.l / hc.r).ln())
    }

    pub fn deterministic_gate(u: f64, hc: &HCParams) -> f64 {
        (sigmoid(u) * (hc.r - hc.l) + hc.l).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hc() -> HCParams {
        HCParams::default()
    }

    fn run<T: Scalar>(u: &[f64], f: impl for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>) -> Vec<f64> {
        let tape = Tape::<T>::new();
        let x = tape.constant(Tensor::from_f64(&[u.len()], u).unwrap());
        f(x).unwrap().value().to_f64_vec()
    }

    #[test]
    fn saturated_samples() {
        let mid = Tensor::<f64>::from_f64(&[1], &[0.5]).unwrap();
        let hi = run::<f64>(&[10.0], |u| sample(u, &mid, &hc()));
        assert_eq!(hi, vec![1.0]);
        let lo = run::<f64>(&[-10.0], |u| sample(u, &mid, &hc()));
        assert_eq!(lo, vec![0.0]);
    }

    #[test]
    fn noise_on_the_boundary_is_rejected() {
        let tape = Tape::<f64>::new();
        let u = tape.leaf(Tensor::zeros(&[2]));
        let bad = Tensor::from_f64(&[2], &[0.0, 0.5]).unwrap();
        assert!(matches!(
            sample(u, &bad, &hc()),
            Err(Error::Numerics(NumericsError::Domain { .. }))
        ));
    }

    #[test]
    fn prob_nonzero_values() {
        let p = run::<f64>(&[-100.0, 0.0], |u| prob_nonzero(u, &hc()));
        assert!(p[0] < 1e-20);
        // sigmoid(0.2 * ln 5)
        assert!((p[1] - 0.579_784).abs() < 1e-5, "{}", p[1]);
        let xs: Vec<f64> = (-20..20).map(|i| i as f64 * 0.37).collect();
        let ps = run::<f64>(&xs, |u| prob_nonzero(u, &hc()));
        assert!(ps.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_lower_limit_is_a_domain_error() {
        let tape = Tape::<f64>::new();
        let u = tape.leaf(Tensor::zeros(&[1]));
        let degenerate = HCParams { l: 0.0, ..hc() };
        assert!(prob_nonzero(u, &degenerate).is_err());
    }

    #[test]
    fn expected_l0_sums_probabilities() {
        let tape = Tape::<f64>::new();
        let saturated = tape.leaf(Tensor::full(&[9], -100.0));
        assert!(expected_l0(saturated, &hc()).unwrap().item() < 1e-18);
        let centered = tape.leaf(Tensor::zeros(&[9]));
        let l0 = expected_l0(centered, &hc()).unwrap().item();
        assert!((l0 - 9.0 * 0.579_784).abs() < 1e-4, "{l0}");
    }

    #[test]
    fn expected_l0_gradient_matches_finite_differences() {
        let p = Tensor::from_f64(&[6], &[-3.0, -1.0, -0.2, 0.4, 1.1, 2.5]).unwrap();
        let err = grad_check(|u| expected_l0(u, &hc()), &p, 1e-3).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn deterministic_gate_values() {
        let g = run::<f64>(&[0.0, 60.0, -60.0], |u| deterministic_gate(u, &hc()));
        assert!((g[0] - 0.4).abs() < 1e-12);
        assert_eq!(g[1], 1.0);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn f32_gate_saturates_to_exactly_one() {
        let g = run::<f32>(&[20.0], |u| deterministic_gate(u, &hc()));
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn noise_is_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n: Tensor<f32> = uniform_noise(&mut rng, &[10_000]);
        assert!(n.data().iter().all(|&e| e > 0.0 && e < 1.0));
    }

    #[test]
    fn moderate_logits_put_mass_on_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 200_000;
        let zeros = (0..draws)
            .filter(|_| scalar::sample(0.0, rng.sample(Open01), &hc()) == 0.0)
            .count();
        let frac = zeros as f64 / draws as f64;
        assert!((frac - (1.0 - 0.579_784)).abs() < 0.004, "{frac}");
    }

    #[test]
    fn reparameterized_gradient_matches_finite_differences() {
        // E[z * c] over a frozen noise set, differentiated in u.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise: Tensor<f64> = uniform_noise(&mut rng, &[32, 4]);
        let p = Tensor::from_f64(&[4], &[-0.7, 0.1, 0.9, 1.6]).unwrap();
        let weights = Tensor::from_f64(&[4], &[0.5, -1.0, 2.0, 1.5]).unwrap();
        let err = grad_check::<_, Error>(
            |u| {
                let tape = u.tape();
                let z = sample(u.expand(&[32])?, &noise, &hc())?;
                Ok(z.mul(tape.constant(weights.clone()))?.mean()?)
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
