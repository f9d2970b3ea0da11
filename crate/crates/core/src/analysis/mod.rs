//! Analytic predictions and statistical comparison tools.

mod compare;
mod stationary;

pub use compare::{compare_histogram, ks_two_sample, HistogramComparison, Reference};
pub use stationary::{
    cir_stationary, pss_log_density, CirStationary, GridAxis, StationaryDensity, StationaryGrid,
    StationaryOutcome,
};

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::models::{ExponentialFamily, ExternalSource, Face, Model};

/// Probability that a bounded martingale started at `phi0` ends at `phi_plus`
/// rather than `phi_minus`.
pub fn absorption_probability(phi0: f64, phi_minus: f64, phi_plus: f64) -> Result<f64> {
    if !(phi_minus < phi_plus) || !(phi_minus..=phi_plus).contains(&phi0) {
        return Err(Error::InvalidInput(format!(
            "need {phi_minus} <= {phi0} <= {phi_plus} with a non-empty interval"
        )));
    }
    Ok((phi0 - phi_minus) / (phi_plus - phi_minus))
}

/// Probability that a REM state seen `k0` times out of `m` eventually takes
/// every sample.
pub fn rem_absorption_probability(k0: u64, m: u64) -> Result<f64> {
    if m == 0 || k0 > m {
        return Err(Error::InvalidInput(format!(
            "need 0 <= k0 = {k0} <= M = {m}, M >= 1"
        )));
    }
    Ok(k0 as f64 / m as f64)
}

/// Shannon entropy of `f(·|θ)`, in nats. For the Ising model this counts
/// spin configurations, not sectors.
pub fn entropy(model: &Model, theta: &[f64]) -> Result<f64> {
    model.validate_theta(theta)?;
    let log_z = model.log_partition(theta)?;
    let mean = model.moments(theta)?;
    let dot = dot_skipping_zero_weight(theta, &mean);
    match model {
        Model::Poisson(_) => Ok(log_z - dot + poisson_mean_log_factorial(theta[0].exp())),
        _ => Ok(log_z - dot),
    }
}

/// Entropy of a boundary distribution.
pub fn face_entropy(model: &Model, face: &Face) -> Result<f64> {
    match model {
        Model::Ising(m) => {
            model.face_stats(face)?;
            Ok(m.face_entropy(face))
        }
        Model::Rem(_) => match face {
            Face::Vertex(_) => Ok(0.0),
            Face::Edge { p_b, .. } => Ok(binary_entropy(*p_b)),
        },
        Model::Poisson(_) => Ok(0.0),
    }
}

fn binary_entropy(p: f64) -> f64 {
    let h = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    h(p) + h(1.0 - p)
}

/// `Σ θ_a w_a` with terms of zero weight dropped (REM parameters can be
/// `-inf` where the weight vanishes).
fn dot_skipping_zero_weight(theta: &[f64], weights: &[f64]) -> f64 {
    theta
        .iter()
        .zip(weights)
        .map(|(t, w)| if *w == 0.0 { 0.0 } else { t * w })
        .sum()
}

/// `E[log s!]` for `s ~ Poisson(mean)`, summed until the remaining mass is
/// negligible.
fn poisson_mean_log_factorial(mean: f64) -> f64 {
    if mean == 0.0 {
        return 0.0;
    }
    let log_mean = mean.ln();
    let upper = (mean + 40.0 * mean.sqrt() + 40.0).ceil() as u64;
    let mut total = 0.0;
    for s in 2..=upper {
        let lf = ln_gamma(s as f64 + 1.0);
        total += (s as f64 * log_mean - mean - lf).exp() * lf;
    }
    total
}

/// `D_KL(q | f(·|θ))`.
///
/// For a point mass `q` this is `-log f(s|θ)` (an Ising sector is read as the
/// uniform distribution over its configurations, which gives the same
/// expression with the sector probability).
pub fn kl_divergence(q: &ExternalSource, model: &Model, theta: &[f64]) -> Result<f64> {
    model.validate_theta(theta)?;
    match q {
        ExternalSource::PointMass(s) => {
            model.check_state(*s)?;
            let lp = model.log_prob(*s, theta)?;
            if lp == f64::NEG_INFINITY {
                return Err(Error::SupportError(format!(
                    "state {s} has zero model probability"
                )));
            }
            Ok(-lp)
        }
        ExternalSource::Model(theta_q) => {
            model.validate_theta(theta_q)?;
            let mean_q = model.moments(theta_q)?;
            let mut cross = 0.0;
            for ((tq, t), w) in theta_q.iter().zip(theta).zip(&mean_q) {
                if *w == 0.0 {
                    continue;
                }
                if *t == f64::NEG_INFINITY {
                    return Err(Error::SupportError("q puts mass where the model has none".into()));
                }
                cross += (tq - t) * w;
            }
            let kl = cross - model.log_partition(theta_q)? + model.log_partition(theta)?;
            Ok(kl.max(0.0))
        }
    }
}

/// Gradient of `D_KL(q|θ)` in `θ`: `⟨φ⟩_θ - ⟨φ⟩_q`.
pub fn kl_gradient(q: &ExternalSource, model: &Model, theta: &[f64]) -> Result<Vec<f64>> {
    let mean = model.moments(theta)?;
    let mean_q = model.external_moments(q)?;
    Ok(mean.iter().zip(&mean_q).map(|(a, b)| a - b).collect())
}

/// Sample mean and unbiased variance.
pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Binomial standard error of a frequency estimated from `n` trials.
pub fn binomial_std_error(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Least-squares slope of `ys` against `xs`.
pub fn linear_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::PoissonParametrization;
    use proptest::prelude::*;

    #[test]
    fn absorption_examples() {
        assert_eq!(absorption_probability(10.0, -10.0, 10.0).unwrap(), 1.0);
        assert_eq!(absorption_probability(0.0, -10.0, 10.0).unwrap(), 0.5);
        assert!((absorption_probability(4.0, -10.0, 10.0).unwrap() - 0.7).abs() < 1e-15);
        assert!(absorption_probability(11.0, -10.0, 10.0).is_err());
        assert!(absorption_probability(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn rem_absorption_examples() {
        assert_eq!(rem_absorption_probability(20, 20).unwrap(), 1.0);
        assert_eq!(rem_absorption_probability(5, 20).unwrap(), 0.25);
        assert_eq!(rem_absorption_probability(0, 20).unwrap(), 0.0);
        assert!(rem_absorption_probability(21, 20).is_err());
    }

    #[test]
    fn poisson_kl_closed_form() {
        let model = Model::poisson(PoissonParametrization::Natural);
        let kl = kl_divergence(&ExternalSource::Model(vec![0.0]), &model, &[2f64.ln()]).unwrap();
        assert!((kl - (1.0 - 2f64.ln())).abs() < 1e-12, "{kl}");
        assert!((kl - 0.306853).abs() < 1e-6);
    }

    #[test]
    fn kl_of_identical_distributions_vanishes() {
        let model = Model::ising(8, true).unwrap();
        let theta = vec![0.3, -0.2];
        let kl = kl_divergence(&ExternalSource::Model(theta.clone()), &model, &theta).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn rem_kl_support_mismatch() {
        let model = Model::rem(3).unwrap();
        let theta = vec![0.0, f64::NEG_INFINITY, 0.0];
        let q = ExternalSource::Model(vec![0.0, 0.0, 0.0]);
        assert!(matches!(
            kl_divergence(&q, &model, &theta),
            Err(Error::SupportError(_))
        ));
        assert!(matches!(
            kl_divergence(&ExternalSource::PointMass(1), &model, &theta),
            Err(Error::SupportError(_))
        ));
        // the reverse direction is fine
        let kl = kl_divergence(&ExternalSource::Model(theta), &model, &[0.0; 3]).unwrap();
        assert!((kl - (1.5f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_uniform_models() {
        let ising = Model::ising(10, true).unwrap();
        assert!((entropy(&ising, &[0.0, 0.0]).unwrap() - 10.0 * 2f64.ln()).abs() < 1e-12);
        let rem = Model::rem(8).unwrap();
        assert!((entropy(&rem, &[0.0; 8]).unwrap() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn poisson_entropy_matches_direct_sum() {
        let model = Model::poisson(PoissonParametrization::Natural);
        let mean: f64 = 3.5;
        let direct: f64 = (0..200)
            .map(|s| {
                let lp = s as f64 * mean.ln() - mean - ln_gamma(s as f64 + 1.0);
                -lp.exp() * lp
            })
            .sum();
        assert!((entropy(&model, &[mean.ln()]).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn face_entropies() {
        let ising = Model::ising(4, true).unwrap();
        assert_eq!(face_entropy(&ising, &Face::Vertex(0)).unwrap(), 0.0);
        assert!((face_entropy(&ising, &Face::Vertex(2)).unwrap() - 6f64.ln()).abs() < 1e-12);
        let rem = Model::rem(3).unwrap();
        let e = face_entropy(&rem, &Face::Edge { a: 0, b: 1, p_b: 0.5 }).unwrap();
        assert!((e - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn slope_of_a_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        assert!((linear_slope(&xs, &ys) + 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn absorption_is_linear(a in -5.0f64..5.0, w in 0.1f64..5.0, s in 0.0f64..1.0) {
            let (lo, hi) = (a, a + w);
            let p = absorption_probability(lo + s * w, lo, hi).unwrap();
            prop_assert!((p - s).abs() < 1e-12);
        }

        #[test]
        fn kl_is_nonnegative(t1 in -2.0f64..2.0, t2 in -1.0f64..1.0, q1 in -2.0f64..2.0, q2 in -1.0f64..1.0) {
            let model = Model::ising(6, true).unwrap();
            let kl = kl_divergence(&ExternalSource::Model(vec![q1, q2]), &model, &[t1, t2]).unwrap();
            prop_assert!(kl >= 0.0);
        }

        #[test]
        fn entropy_peaks_at_origin(t1 in -2.0f64..2.0, t2 in -1.0f64..1.0) {
            let model = Model::ising(6, true).unwrap();
            prop_assert!(entropy(&model, &[t1, t2]).unwrap() <= entropy(&model, &[0.0, 0.0]).unwrap() + 1e-12);
        }
    }
}
