//! Model comparison criteria.
//!
//! Two complementary scores rank fitted models. The deviance information
//! criterion penalizes the posterior mean deviance `D_bar` with the
//! effective parameter count `p_D = D_bar - D(theta_bar)`, where `theta_bar`
//! averages each parameter on its sampling scale. The posterior predictive
//! loss decomposes into a goodness-of-fit term `G` (squared distance between
//! observations and replicate means) and a penalty `P` (total replicate
//! variance), combined as `D_k = k/(k+1) G + P`. Lower is better for both.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::covariance::CovContext;
use crate::error::{Error, Result};
use crate::inference::{log_likelihood_at, PosteriorSamples};
use crate::linalg;
use crate::model::{ModelKind, ObservationModel};

/// Deviance information criterion from per-draw deviances and the deviance
/// at the posterior mean state: returns `(D_bar, p_D, DIC)` with
/// `DIC = D_bar + p_D = 2 D_bar - D(theta_bar)`.
///
/// A negative `p_D` (posterior mean in a low-density region) is reported
/// verbatim.
pub fn dic(deviance_draws: &[f64], deviance_at_mean: f64) -> Result<(f64, f64, f64)> {
    if deviance_draws.is_empty() {
        return Err(Error::Config("DIC needs at least one deviance draw".into()));
    }
    let d_bar = deviance_draws.iter().sum::<f64>() / deviance_draws.len() as f64;
    let p_d = d_bar - deviance_at_mean;
    Ok((d_bar, p_d, d_bar + p_d))
}

/// Posterior predictive loss from per-site replicate means and variances:
/// returns `(G, P, D_k)`.
pub fn ppl(rep_means: &[f64], rep_vars: &[f64], observed: &[f64], k: f64) -> Result<(f64, f64, f64)> {
    let n = observed.len();
    if rep_means.len() != n || rep_vars.len() != n {
        return Err(Error::Config(format!(
            "replicate summaries ({}, {}) do not match {} observations",
            rep_means.len(),
            rep_vars.len(),
            n
        )));
    }
    if !(k > 0.0) {
        return Err(Error::Domain(format!("loss weight k must be positive, got {k}")));
    }
    let g: f64 = rep_means.iter().zip(observed).map(|(m, z)| (z - m) * (z - m)).sum();
    let p: f64 = rep_vars.iter().sum();
    Ok((g, p, k / (k + 1.0) * g + p))
}

/// Mean squared error between point predictions and observations.
pub fn mse(predicted: &[f64], observed: &[f64]) -> Result<f64> {
    if predicted.len() != observed.len() || observed.is_empty() {
        return Err(Error::Config(format!(
            "{} predictions for {} observations",
            predicted.len(),
            observed.len()
        )));
    }
    Ok(predicted.iter().zip(observed).map(|(p, z)| (z - p) * (z - p)).sum::<f64>()
        / observed.len() as f64)
}

/// All within-sample criteria for one fitted model.
#[derive(Debug, Clone)]
pub struct Criteria {
    pub kind: ModelKind,
    /// Goodness-of-fit term of the predictive loss.
    pub g: f64,
    /// Variance penalty of the predictive loss.
    pub p: f64,
    /// Combined loss `k/(k+1) G + P`.
    pub d_k: f64,
    pub k: f64,
    pub d_bar: f64,
    pub p_d: f64,
    pub dic: f64,
    /// Mean squared error of the replicate means, `G / n`.
    pub mse: f64,
    /// Held-out predictive log density, when a holdout set was scored.
    pub pred_loglik: Option<f64>,
}

/// Scores a fitted model on its own data.
///
/// One replicate data set is drawn per retained state: the latent surface is
/// drawn from its conditional law given the data at that state and observed
/// again under fresh noise, `Z_rep = Q beta + (Y | z, theta) + eps_new`.
/// Per-site replicate means and variances across draws feed the predictive
/// loss, and per-draw deviances plus the deviance at the scale-wise
/// posterior mean feed the DIC. Replicates use their own stream seeded by
/// `seed`, so scores are reproducible.
pub fn evaluate_model(
    data: &ObservationModel,
    ctx: &CovContext,
    samples: &PosteriorSamples,
    k: f64,
    seed: u64,
) -> Result<Criteria> {
    if samples.is_empty() {
        return Err(Error::Config("model evaluation needs retained draws".into()));
    }
    if samples.kind != ctx.kind {
        return Err(Error::Config(format!(
            "samples are for {} but the context expects {}",
            samples.kind, ctx.kind
        )));
    }
    let n = data.n();
    let m = samples.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sum = vec![0.0f64; n];
    let mut sum_sq = vec![0.0f64; n];
    let winds = data.winds.as_deref();
    for state in &samples.states {
        let sigma2 = state.sigma2();
        let sigma_y = ctx.correlation(&state.delta, &data.sites, winds)?.into_matrix() * sigma2;
        let mut sigma_z = sigma_y.clone();
        for i in 0..n {
            sigma_z[(i, i)] += state.tau2;
        }
        let (chol_z, _) = linalg::cholesky_with_jitter(&sigma_z, "replicate conditioning")?;
        let resid = &data.response - &data.design * &state.beta;
        // Conditional moments of Y given the data at this state.
        let mean_y = &sigma_y * chol_z.solve(&resid);
        let mut rep_cov = &sigma_y - &sigma_y * chol_z.solve(&sigma_y);
        for i in 0..n {
            rep_cov[(i, i)] += state.tau2;
        }
        linalg::symmetrize(&mut rep_cov);
        let (chol_rep, _) = linalg::cholesky_with_jitter(&rep_cov, "replicate draw")?;
        let xi = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let rep = &data.design * &state.beta + mean_y + chol_rep.l() * xi;
        for i in 0..n {
            sum[i] += rep[i];
            sum_sq[i] += rep[i] * rep[i];
        }
    }
    let rep_means: Vec<f64> = sum.iter().map(|s| s / m as f64).collect();
    // Population variance over draws; the replicate set is the population of
    // interest, not a sample from a larger one.
    let rep_vars: Vec<f64> = sum_sq
        .iter()
        .zip(&rep_means)
        .map(|(s2, mean)| (s2 / m as f64 - mean * mean).max(0.0))
        .collect();
    let observed: Vec<f64> = data.response.iter().cloned().collect();
    let (g, p, d_k) = ppl(&rep_means, &rep_vars, &observed, k)?;

    let mean_state = samples.posterior_mean_state()?;
    let dev_at_mean = -2.0 * log_likelihood_at(data, ctx, &mean_state)?;
    let (d_bar, p_d, dic_value) = dic(&samples.deviance_draws(), dev_at_mean)?;

    Ok(Criteria {
        kind: samples.kind,
        g,
        p,
        d_k,
        k,
        d_bar,
        p_d,
        dic: dic_value,
        mse: g / n as f64,
        pred_loglik: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{run_chain, ChainSetup};
    use crate::model::{ChainConfig, PriorSpec};
    use crate::geo::Site;
    use approx::assert_relative_eq;

    #[test]
    fn dic_reproduces_published_style_rows() {
        // D_bar 326.06 with D at the mean 323.02 gives p_D 3.04, DIC 329.10.
        let (d_bar, p_d, dic_value) = dic(&[326.06], 323.02).unwrap();
        assert_relative_eq!(d_bar, 326.06, epsilon = 1e-10);
        assert_relative_eq!(p_d, 3.04, epsilon = 1e-10);
        assert_relative_eq!(dic_value, 329.10, epsilon = 1e-10);

        // D_bar 289.79 with p_D 4.03 lands on DIC 293.82.
        let (_, p_d, dic_value) = dic(&[289.79], 289.79 - 4.03).unwrap();
        assert_relative_eq!(p_d, 4.03, epsilon = 1e-10);
        assert!((dic_value - 293.82).abs() < 1e-10);

        // The identity DIC = 2 D_bar - D(theta_bar) holds for spread draws.
        let draws = [289.0, 290.5, 288.7, 291.1];
        let (d_bar, p_d, dic_value) = dic(&draws, 285.76).unwrap();
        assert_relative_eq!(dic_value, 2.0 * d_bar - 285.76, epsilon = 1e-12);
        assert_relative_eq!(p_d, d_bar - 285.76, epsilon = 1e-12);

        // A constant deviance has no effective parameters.
        let (d_bar, p_d, dic_value) = dic(&[5.0, 5.0, 5.0], 5.0).unwrap();
        assert_eq!((d_bar, p_d, dic_value), (5.0, 0.0, 5.0));

        assert!(dic(&[], 1.0).is_err());
    }

    #[test]
    fn predictive_loss_combines_fit_and_penalty() {
        // G 458.77 and P 1395.79 at k = 1 give D_1 = G/2 + P = 1625.175.
        let rep_means = [1.0, 2.0];
        let rep_vars = [1395.79 / 2.0, 1395.79 / 2.0];
        // Choose observations so (z1-1)^2 + (z2-2)^2 = 458.77.
        let observed = [1.0 + 458.77f64.sqrt(), 2.0];
        let (g, p, d1) = ppl(&rep_means, &rep_vars, &observed, 1.0).unwrap();
        assert_relative_eq!(g, 458.77, epsilon = 1e-9);
        assert_relative_eq!(p, 1395.79, epsilon = 1e-9);
        assert_relative_eq!(d1, 458.77 / 2.0 + 1395.79, epsilon = 1e-9);

        // G 90.38, P 464.93 give D_1 = 510.12 to published rounding.
        let d1: f64 = 90.38 / 2.0 + 464.93;
        assert!((d1 - 510.12).abs() < 0.01);

        // Larger k weights fit more heavily.
        let (_, _, d9) = ppl(&rep_means, &rep_vars, &observed, 9.0).unwrap();
        assert!(d9 > d1);

        // Degenerate replication that matches the data exactly scores zero.
        let (g, p, dk) = ppl(&[1.0, 2.0], &[0.0, 0.0], &[1.0, 2.0], 1.0).unwrap();
        assert_eq!((g, p, dk), (0.0, 0.0, 0.0));

        // Limits of the loss weight: huge k recovers G + P, tiny k just P.
        let (g, p, d_inf) = ppl(&rep_means, &rep_vars, &observed, 1e12).unwrap();
        assert_relative_eq!(d_inf, g + p, max_relative = 1e-9);
        let (_, p, d_zero) = ppl(&rep_means, &rep_vars, &observed, 1e-12).unwrap();
        assert_relative_eq!(d_zero, p, max_relative = 1e-9);

        assert!(ppl(&rep_means, &rep_vars, &observed, 0.0).is_err());
        assert!(ppl(&rep_means, &rep_vars, &[1.0], 1.0).is_err());
    }

    #[test]
    fn mse_is_the_mean_squared_error() {
        let got = mse(&[1.0, 2.0, 3.0], &[1.5, 2.0, 1.0]).unwrap();
        assert_relative_eq!(got, (0.25 + 0.0 + 4.0) / 3.0, epsilon = 1e-14);
        // Residuals 3 and 4 average to 12.5.
        assert_relative_eq!(mse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5, epsilon = 1e-14);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn replicates_follow_the_conditional_observation_law() {
        // Many copies of a single state over far-apart sites, so the
        // correlation is the identity and the conditional law is closed
        // form: Y | z shrinks the residual by sigma2 / (sigma2 + tau2) and
        // each replicate has variance tau2 + sigma2 tau2 / (sigma2 + tau2).
        use crate::model::{Delta, ParameterState};
        use nalgebra::DVector;
        let sites = vec![
            Site::new(0.0, 0.0),
            Site::new(40.0, 0.0),
            Site::new(0.0, 40.0),
            Site::new(40.0, 40.0),
        ];
        let z = DVector::from_column_slice(&[0.3, -0.1, 0.2, 0.05]);
        let data = ObservationModel::with_constant_mean(z.clone(), sites, None).unwrap();
        let state = ParameterState {
            beta: DVector::from_element(1, 0.1),
            tau2: 0.5,
            eta: 0.25, // sigma2 = 2
            delta: Delta::M1 { phi: 0.5 },
        };
        let samples = PosteriorSamples {
            kind: ModelKind::M1,
            nu: 1.0,
            states: vec![state; 6000],
            log_liks: vec![-3.0; 6000],
            acceptance: vec![],
            config: ChainConfig::reference(ModelKind::M1),
        };
        let ctx = CovContext::new(ModelKind::M1, 1.0);
        let crit = evaluate_model(&data, &ctx, &samples, 1.0, 7).unwrap();
        // Shrinkage 2/2.5 = 0.8 leaves a fifth of each residual in G, and
        // the replicate variance is 0.4 + 0.5 = 0.9 per site.
        assert_relative_eq!(crit.p, 4.0 * 0.9, max_relative = 0.1);
        let want_g: f64 = z.iter().map(|zi| 0.04 * (zi - 0.1) * (zi - 0.1)).sum();
        assert!((crit.g - want_g).abs() < 0.02, "G = {}, want about {}", crit.g, want_g);
        assert_relative_eq!(crit.mse, crit.g / 4.0, epsilon = 1e-12);
        assert_relative_eq!(crit.d_k, crit.g / 2.0 + crit.p, epsilon = 1e-12);
        // Identical draws make the deviance degenerate: p_D measures the
        // gap between the average deviance and the deviance at the mean.
        assert_relative_eq!(crit.d_bar, 6.0, epsilon = 1e-12);
    }

    #[test]
    fn evaluation_is_reproducible_and_consistent_with_a_short_chain() {
        let sites: Vec<Site> = (0..10)
            .map(|k| {
                let t = k as f64;
                Site::new((t * 0.7).sin() * 3.0, (t * 1.3).cos() * 3.0 + 0.2 * t)
            })
            .collect();
        let z = DVector::from_iterator(10, (0..10).map(|k| ((k * 3 + 1) % 7) as f64 * 0.3));
        let data = ObservationModel::with_constant_mean(z, sites, None).unwrap();
        let priors = PriorSpec::reference(data.max_dist());
        let config = ChainConfig {
            iterations: 400,
            burn_in: 100,
            thinning: 5,
            seed: 3,
            adapt_window: 25,
            initial_step: 0.5,
            step_overrides: Default::default(),
        };
        let setup = ChainSetup {
            data: &data,
            kind: ModelKind::M1,
            nu: 1.0,
            conv_grid: None,
            priors: &priors,
            config: &config,
            init: None,
        };
        let samples = run_chain(&setup).unwrap();
        let ctx = CovContext::new(ModelKind::M1, 1.0);
        let a = evaluate_model(&data, &ctx, &samples, 1.0, 11).unwrap();
        let b = evaluate_model(&data, &ctx, &samples, 1.0, 11).unwrap();
        assert_eq!(a.dic, b.dic);
        assert_eq!(a.g, b.g);
        assert!(a.g.is_finite() && a.p > 0.0 && a.dic.is_finite());
        assert_relative_eq!(a.dic, a.d_bar + a.p_d, epsilon = 1e-12);
    }
}
