//! Posterior predictive inference at unobserved sites.
//!
//! Every retained posterior draw defines a joint Gaussian law over the
//! observed and target sites; conditioning on the data gives that draw's
//! predictive normal. Summaries average over draws: means and variances use
//! the exact mixture moments, interval endpoints come from one simulated
//! predictive draw per retained state. All conditioning goes through
//! Cholesky solves, never an explicit inverse.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::covariance::{exp_corr, CovContext};
use crate::error::{Error, Result};
use crate::geo::{Site, WindVector};
use crate::linalg;
use crate::model::{ObservationModel, ParameterState};

/// Conditional mean and covariance of the trailing block of a joint normal
/// given the leading block.
#[derive(Debug, Clone)]
pub struct ConditionalMvn {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Conditions the last `joint.nrows() - n_fit` coordinates of a joint normal
/// on the first `n_fit` taking the value `observed`. `prior_mean` covers the
/// full joint vector, fit block first.
pub fn conditional_mvn(
    joint: &DMatrix<f64>,
    n_fit: usize,
    prior_mean: &DVector<f64>,
    observed: &DVector<f64>,
) -> Result<ConditionalMvn> {
    let total = joint.nrows();
    if joint.ncols() != total {
        return Err(Error::Config(format!("joint covariance is {}x{}", total, joint.ncols())));
    }
    if n_fit == 0 || n_fit >= total {
        return Err(Error::Config(format!(
            "conditioning block must be a proper leading block, got {n_fit} of {total}"
        )));
    }
    if prior_mean.len() != total || observed.len() != n_fit {
        return Err(Error::Config(format!(
            "mean length {} and observation length {} do not match the {}+{} split",
            prior_mean.len(),
            observed.len(),
            n_fit,
            total - n_fit
        )));
    }
    let nt = total - n_fit;
    let s_ff = joint.view((0, 0), (n_fit, n_fit)).into_owned();
    let s_tf = joint.view((n_fit, 0), (nt, n_fit)).into_owned();
    let s_tt = joint.view((n_fit, n_fit), (nt, nt)).into_owned();
    let (chol, _) = linalg::cholesky_with_jitter(&s_ff, "conditioning block")?;

    let resid = observed - prior_mean.rows(0, n_fit);
    let mean = prior_mean.rows(n_fit, nt) + &s_tf * chol.solve(&resid);
    let mut cov = &s_tt - &s_tf * chol.solve(&s_tf.transpose());
    linalg::symmetrize(&mut cov);
    Ok(ConditionalMvn { mean, cov })
}

/// What to predict and how.
#[derive(Debug, Clone)]
pub struct PredictionSpec<'a> {
    pub targets: &'a [Site],
    /// Winds at the targets; required by M3 and M4.
    pub winds: Option<&'a [WindVector]>,
    /// Mean design at the targets; defaults to an intercept column and is
    /// required whenever the fitted trend has more than one coefficient.
    pub design: Option<&'a DMatrix<f64>>,
    /// Predict the observable (with measurement noise) rather than the
    /// latent smooth surface.
    pub include_nugget: bool,
    /// Simulated predictive values per retained draw feeding the interval
    /// estimates; means and variances are exact regardless.
    pub draws_per_state: usize,
    pub seed: u64,
}

impl<'a> PredictionSpec<'a> {
    /// Observation-scale prediction, the default.
    pub fn observation(targets: &'a [Site]) -> Self {
        PredictionSpec {
            targets,
            winds: None,
            design: None,
            include_nugget: true,
            draws_per_state: 1,
            seed: 0,
        }
    }

    /// Noise-free latent surface prediction.
    pub fn latent(targets: &'a [Site]) -> Self {
        PredictionSpec { include_nugget: false, ..PredictionSpec::observation(targets) }
    }

    pub fn with_winds(mut self, winds: &'a [WindVector]) -> Self {
        self.winds = Some(winds);
        self
    }

    pub fn with_design(mut self, design: &'a DMatrix<f64>) -> Self {
        self.design = Some(design);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_draws_per_state(mut self, draws: usize) -> Self {
        self.draws_per_state = draws;
        self
    }
}

/// Per-site posterior predictive summaries.
#[derive(Debug, Clone)]
pub struct PredictiveSummary {
    pub sites: Vec<Site>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub lower95: Vec<f64>,
    pub upper95: Vec<f64>,
}

/// Joint mean vectors and covariance over fit sites followed by targets for
/// one parameter state.
struct JointPieces {
    prior_mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn joint_pieces(
    data: &ObservationModel,
    ctx: &CovContext,
    state: &ParameterState,
    spec: &PredictionSpec,
    include_nugget: bool,
) -> Result<JointPieces> {
    let n = data.n();
    let t = spec.targets.len();
    let mut sites = Vec::with_capacity(n + t);
    sites.extend_from_slice(&data.sites);
    sites.extend_from_slice(spec.targets);

    let joined_winds: Option<Vec<WindVector>> = if ctx.kind.needs_wind() {
        let fit = data.winds_for(ctx.kind)?;
        let target = spec.winds.ok_or_else(|| {
            Error::Config(format!(
                "{} prediction requires winds at every target site; \
                 interpolate the observed wind field to the targets first",
                ctx.kind
            ))
        })?;
        if target.len() != t {
            return Err(Error::Config(format!("{} winds for {} targets", target.len(), t)));
        }
        let mut w = fit.to_vec();
        w.extend_from_slice(target);
        Some(w)
    } else {
        None
    };

    let p = data.design.ncols();
    let target_design = match spec.design {
        Some(d) => {
            if d.nrows() != t || d.ncols() != p {
                return Err(Error::Config(format!(
                    "target design is {}x{} but {t}x{p} is required",
                    d.nrows(),
                    d.ncols()
                )));
            }
            d.clone()
        }
        None if p == 1 => DMatrix::from_element(t, 1, 1.0),
        None => {
            return Err(Error::Config(
                "the fitted trend has covariates; supply a target design matrix".into(),
            ))
        }
    };

    let sigma2 = state.sigma2();
    let omega = ctx.correlation(&state.delta, &sites, joined_winds.as_deref())?;
    let mut cov = omega.into_matrix() * sigma2;
    for i in 0..n {
        cov[(i, i)] += state.tau2;
    }
    if include_nugget {
        for i in n..(n + t) {
            cov[(i, i)] += state.tau2;
        }
    }

    let mut prior_mean = DVector::zeros(n + t);
    prior_mean.rows_mut(0, n).copy_from(&(&data.design * &state.beta));
    prior_mean.rows_mut(n, t).copy_from(&(&target_design * &state.beta));
    Ok(JointPieces { prior_mean, cov })
}

/// Monte Carlo posterior predictive summaries at the target sites, averaging
/// over the retained draws in `states`.
pub fn predict(
    data: &ObservationModel,
    ctx: &CovContext,
    states: &[ParameterState],
    spec: &PredictionSpec,
) -> Result<PredictiveSummary> {
    if states.is_empty() {
        return Err(Error::Config("prediction needs at least one retained draw".into()));
    }
    let t = spec.targets.len();
    if t == 0 {
        return Err(Error::Config("no target sites to predict at".into()));
    }
    if spec.draws_per_state == 0 {
        return Err(Error::Config("draws_per_state must be at least 1".into()));
    }
    let m = states.len();
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut sum_mean = vec![0.0f64; t];
    let mut sum_mean_sq = vec![0.0f64; t];
    let mut sum_var = vec![0.0f64; t];
    let mut draws = vec![Vec::with_capacity(m * spec.draws_per_state); t];

    for state in states {
        let pieces = joint_pieces(data, ctx, state, spec, spec.include_nugget)?;
        let cond = conditional_mvn(&pieces.cov, data.n(), &pieces.prior_mean, &data.response)?;
        for k in 0..t {
            let mu = cond.mean[k];
            let var = cond.cov[(k, k)].max(0.0);
            sum_mean[k] += mu;
            sum_mean_sq[k] += mu * mu;
            sum_var[k] += var;
            // Interval endpoints only need the marginal law at each site.
            for _ in 0..spec.draws_per_state {
                let z: f64 = rng.sample(StandardNormal);
                draws[k].push(mu + var.sqrt() * z);
            }
        }
    }

    let mut mean = vec![0.0f64; t];
    let mut sd = vec![0.0f64; t];
    let mut lower95 = vec![0.0f64; t];
    let mut upper95 = vec![0.0f64; t];
    for k in 0..t {
        mean[k] = sum_mean[k] / m as f64;
        let var = sum_var[k] / m as f64 + sum_mean_sq[k] / m as f64 - mean[k] * mean[k];
        sd[k] = var.max(0.0).sqrt();
        draws[k].sort_by(|a, b| a.partial_cmp(b).expect("finite predictive draws"));
        lower95[k] = empirical_quantile(&draws[k], 0.025);
        upper95[k] = empirical_quantile(&draws[k], 0.975);
    }
    Ok(PredictiveSummary { sites: spec.targets.to_vec(), mean, sd, lower95, upper95 })
}

fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Log posterior predictive density of held-out observations: the log of the
/// draw-averaged conditional density, computed with log-sum-exp.
pub fn predictive_log_likelihood(
    data: &ObservationModel,
    ctx: &CovContext,
    states: &[ParameterState],
    spec: &PredictionSpec,
    observed: &DVector<f64>,
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Config("predictive density needs at least one retained draw".into()));
    }
    let t = spec.targets.len();
    if observed.len() != t {
        return Err(Error::Config(format!("{} held-out values for {} targets", observed.len(), t)));
    }
    let mut lps = Vec::with_capacity(states.len());
    for state in states {
        // Held-out values are observations, so the nugget always enters.
        let pieces = joint_pieces(data, ctx, state, spec, true)?;
        let cond = conditional_mvn(&pieces.cov, data.n(), &pieces.prior_mean, &data.response)?;
        let (chol, _) = linalg::cholesky_with_jitter(&cond.cov, "held-out predictive density")?;
        lps.push(linalg::mvn_ln_pdf(observed, &cond.mean, &chol));
    }
    let max = lps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical(format!("all predictive densities degenerate (max log {max})")));
    }
    let sum: f64 = lps.iter().map(|lp| (lp - max).exp()).sum();
    Ok(max + sum.ln() - (states.len() as f64).ln())
}

/// Interpolates wind directions to `targets` from directions observed at
/// `obs_sites`.
///
/// Each unit-vector component gets an independent Gaussian-process smoother
/// (constant mean, exponential correlation, no nugget) whose range and
/// variance maximize the marginal likelihood. Conditional means are
/// renormalized to unit length; a near-zero resultant (opposing winds
/// cancelling) is an error rather than an arbitrary direction.
pub fn interp_wind(
    obs_sites: &[Site],
    obs_winds: &[WindVector],
    targets: &[Site],
) -> Result<Vec<WindVector>> {
    let n = obs_sites.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "wind interpolation needs at least three observed directions, got {n}"
        )));
    }
    if obs_winds.len() != n {
        return Err(Error::Config(format!("{} winds for {} sites", obs_winds.len(), n)));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if obs_sites[i] == obs_sites[j] {
                return Err(Error::CoincidentSites {
                    context: Some(format!("wind observations {i} and {j} share a location")),
                });
            }
        }
    }
    let u: Vec<f64> = obs_winds.iter().map(|w| w.u()).collect();
    let v: Vec<f64> = obs_winds.iter().map(|w| w.v()).collect();
    let u_hat = gp_smooth(obs_sites, &u, targets)?;
    let v_hat = gp_smooth(obs_sites, &v, targets)?;
    let mut out = Vec::with_capacity(targets.len());
    for (k, (uu, vv)) in u_hat.iter().zip(&v_hat).enumerate() {
        if uu.hypot(*vv) < 1e-8 {
            return Err(Error::ZeroWind {
                context: Some(format!(
                    "ambiguous interpolated direction at target {k} ({}, {}): \
                     the component means nearly cancel",
                    targets[k].x, targets[k].y
                )),
            });
        }
        out.push(WindVector::new(*uu, *vv)?);
    }
    Ok(out)
}

/// Maximum-likelihood Gaussian-process smoother for one scalar field:
/// profiles the constant mean and variance in closed form and scans the
/// exponential correlation range on a log grid.
fn gp_smooth(sites: &[Site], values: &[f64], targets: &[Site]) -> Result<Vec<f64>> {
    let n = sites.len();
    let z = DVector::from_column_slice(values);
    if n == 1 {
        return Ok(vec![z[0]; targets.len()]);
    }
    let mut dmax = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            dmax = dmax.max(sites[i].dist(&sites[j]));
        }
    }
    let ones = DVector::from_element(n, 1.0);

    let profile = |phi: f64| -> Result<(f64, f64, f64)> {
        let mut gram = DMatrix::identity(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let r = exp_corr(sites[i].dist(&sites[j]), phi);
                gram[(i, j)] = r;
                gram[(j, i)] = r;
            }
        }
        let (chol, _) = linalg::cholesky_with_jitter(&gram, "wind smoother")?;
        let ri_one = chol.solve(&ones);
        let ri_z = chol.solve(&z);
        let mu = ones.dot(&ri_z) / ones.dot(&ri_one);
        let resid = &z - &ones * mu;
        // Floor keeps the log likelihood finite when the field is constant.
        let s2 = (resid.dot(&chol.solve(&resid)) / n as f64).max(1e-12);
        let ll = -0.5 * (n as f64 * s2.ln() + linalg::ln_det(&chol) + n as f64);
        Ok((ll, mu, s2))
    };

    // Log-spaced range scan from a small fraction of the domain to far
    // beyond it; the profile likelihood is smooth, so a fine grid suffices.
    let lo = (dmax * 1e-2).ln();
    let hi = (dmax * 10.0).ln();
    let grid = 120;
    let mut best = (f64::NEG_INFINITY, dmax, 0.0);
    for g in 0..grid {
        let phi = (lo + (hi - lo) * g as f64 / (grid - 1) as f64).exp();
        let (ll, mu, _) = profile(phi)?;
        if ll > best.0 {
            best = (ll, phi, mu);
        }
    }
    let (_, phi, mu) = best;

    let mut gram = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let r = exp_corr(sites[i].dist(&sites[j]), phi);
            gram[(i, j)] = r;
            gram[(j, i)] = r;
        }
    }
    let (chol, _) = linalg::cholesky_with_jitter(&gram, "wind smoother")?;
    let weights = chol.solve(&(&z - &ones * mu));
    Ok(targets
        .iter()
        .map(|t| {
            let cross = DVector::from_iterator(n, sites.iter().map(|s| exp_corr(t.dist(s), phi)));
            mu + cross.dot(&weights)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovContext;
    use crate::inference::log_likelihood_at;
    use crate::model::{Delta, ModelKind};
    use approx::assert_relative_eq;

    fn spread_sites(n: usize) -> Vec<Site> {
        (0..n)
            .map(|k| {
                let t = k as f64;
                Site::new((t * 1.7).sin() * 3.0 + 0.23 * t, (t * 0.9).cos() * 3.0 - 0.31 * t)
            })
            .collect()
    }

    #[test]
    fn conditioning_matches_the_dense_inverse_oracle() {
        // Pseudo-random SPD joint covariance over 9 points, condition on the
        // first 5.
        let n = 9;
        let raw = DMatrix::from_fn(n, n, |i, j| ((i * 31 + j * 17 + 7) % 23) as f64 / 23.0 - 0.4);
        let joint = &raw * raw.transpose() + DMatrix::identity(n, n) * 2.0;
        let prior_mean = DVector::from_fn(n, |i, _| (i as f64 * 0.77).sin());
        let observed = DVector::from_fn(5, |i, _| ((i * 13 + 3) % 7) as f64 * 0.3 - 0.8);

        let got = conditional_mvn(&joint, 5, &prior_mean, &observed).unwrap();

        let s_ff = joint.view((0, 0), (5, 5)).into_owned();
        let s_tf = joint.view((5, 0), (4, 5)).into_owned();
        let s_tt = joint.view((5, 5), (4, 4)).into_owned();
        let inv = s_ff.try_inverse().unwrap();
        let mean = prior_mean.rows(5, 4)
            + &s_tf * &inv * (&observed - prior_mean.rows(0, 5));
        let cov = &s_tt - &s_tf * &inv * s_tf.transpose();
        assert!((got.mean - mean).amax() < 1e-10);
        assert!((got.cov - cov).amax() < 1e-10);
    }

    #[test]
    fn conditioning_rejects_bad_splits() {
        let joint = DMatrix::identity(4, 4);
        let mean = DVector::zeros(4);
        assert!(conditional_mvn(&joint, 0, &mean, &DVector::zeros(0)).is_err());
        assert!(conditional_mvn(&joint, 4, &mean, &DVector::zeros(4)).is_err());
        assert!(conditional_mvn(&joint, 2, &mean, &DVector::zeros(3)).is_err());
    }

    fn m1_state(tau2: f64, eta: f64, phi: f64) -> ParameterState {
        ParameterState {
            beta: DVector::from_element(1, 0.7),
            tau2,
            eta,
            delta: Delta::M1 { phi },
        }
    }

    #[test]
    fn a_vanishing_nugget_reproduces_the_data_exactly() {
        let sites = spread_sites(6);
        let z = DVector::from_iterator(6, (0..6).map(|k| (k as f64 * 0.9).cos() * 2.0));
        let data = ObservationModel::with_constant_mean(z.clone(), sites.clone(), None).unwrap();
        // sigma2 = tau2 / eta = 1 with an essentially zero nugget.
        let state = m1_state(1e-14, 1e-14, 2.0);
        let ctx = CovContext::new(ModelKind::M1, 1.0);
        let spec = PredictionSpec::observation(&sites);
        let out = predict(&data, &ctx, &[state], &spec).unwrap();
        for k in 0..6 {
            assert!((out.mean[k] - z[k]).abs() < 1e-8, "site {k}: {} vs {}", out.mean[k], z[k]);
            assert!(out.sd[k] < 1e-6);
        }
    }

    #[test]
    fn faraway_targets_revert_to_the_trend_and_prior_variance() {
        let sites = spread_sites(8);
        let z = DVector::from_iterator(8, (0..8).map(|k| 0.7 + 0.1 * (k as f64).sin()));
        let data = ObservationModel::with_constant_mean(z, sites, None).unwrap();
        let state = m1_state(0.25, 0.25, 1.0); // sigma2 = 1
        let ctx = CovContext::new(ModelKind::M1, 1.0);
        let far = [Site::new(4000.0, -3900.0)];
        let spec = PredictionSpec::observation(&far);
        let out = predict(&data, &ctx, &[state.clone()], &spec).unwrap();
        assert_relative_eq!(out.mean[0], 0.7, epsilon = 1e-12);
        assert_relative_eq!(out.sd[0], (1.0f64 + 0.25).sqrt(), epsilon = 1e-12);

        let latent = PredictionSpec::latent(&far);
        let out2 = predict(&data, &ctx, &[state], &latent).unwrap();
        assert_relative_eq!(out2.sd[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn predictive_density_matches_the_joint_likelihood_ratio() {
        // For one draw, ln p(held-out | data) = ln p(joint) - ln p(data).
        let sites = spread_sites(9);
        let (fit_sites, hold_sites) = sites.split_at(6);
        let z = DVector::from_iterator(9, (0..9).map(|k| ((k * 5 + 2) % 11) as f64 * 0.4 - 1.8));
        let z_fit = DVector::from_iterator(6, z.iter().take(6).cloned());
        let z_hold = DVector::from_iterator(3, z.iter().skip(6).cloned());

        let fit = ObservationModel::with_constant_mean(z_fit, fit_sites.to_vec(), None).unwrap();
        let joint = ObservationModel::with_constant_mean(z.clone(), sites.clone(), None).unwrap();
        let state = m1_state(0.3, 0.6, 1.4);
        let ctx = CovContext::new(ModelKind::M1, 1.0);

        let spec = PredictionSpec::observation(hold_sites);
        let got =
            predictive_log_likelihood(&fit, &ctx, &[state.clone()], &spec, &z_hold).unwrap();
        let want = log_likelihood_at(&joint, &ctx, &state).unwrap()
            - log_likelihood_at(&fit, &ctx, &state).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-9);

        // Averaging identical draws changes nothing.
        let two = predictive_log_likelihood(
            &fit,
            &ctx,
            &[state.clone(), state],
            &spec,
            &z_hold,
        )
        .unwrap();
        assert_relative_eq!(two, want, epsilon = 1e-9);
    }

    #[test]
    fn predictions_are_reproducible_for_a_seed() {
        let sites = spread_sites(7);
        let z = DVector::from_iterator(7, (0..7).map(|k| (k as f64).sqrt()));
        let data = ObservationModel::with_constant_mean(z, sites, None).unwrap();
        let states = vec![m1_state(0.2, 0.5, 1.0), m1_state(0.25, 0.4, 1.3)];
        let ctx = CovContext::new(ModelKind::M1, 1.0);
        let targets = [Site::new(0.5, 0.5), Site::new(-1.0, 2.0)];
        let spec = PredictionSpec::observation(&targets).with_seed(9);
        let a = predict(&data, &ctx, &states, &spec).unwrap();
        let b = predict(&data, &ctx, &states, &spec).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.lower95, b.lower95);
        assert_eq!(a.upper95, b.upper95);
        assert!(a.lower95.iter().zip(&a.upper95).all(|(l, u)| l < u));
    }

    #[test]
    fn constant_winds_interpolate_to_the_same_direction() {
        let sites = spread_sites(5);
        let winds = vec![WindVector::from_angle(1.1); 5];
        let targets = [Site::new(0.0, 0.0), Site::new(10.0, -4.0)];
        let out = interp_wind(&sites, &winds, &targets).unwrap();
        for w in out {
            assert_relative_eq!(w.angle(), 1.1, epsilon = 1e-9);
            assert_relative_eq!(w.u().hypot(w.v()), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn wind_interpolation_reproduces_observed_directions() {
        let sites = spread_sites(6);
        let winds: Vec<WindVector> =
            (0..6).map(|k| WindVector::from_angle(0.3 + 0.25 * k as f64)).collect();
        let out = interp_wind(&sites, &winds, &sites).unwrap();
        for (got, want) in out.iter().zip(&winds) {
            assert_relative_eq!(got.angle(), want.angle(), epsilon = 1e-6);
        }
    }

    #[test]
    fn opposing_winds_cancel_between_stations() {
        // Four stations all blowing toward the origin: the component means
        // cancel exactly there by symmetry.
        let sites = vec![
            Site::new(-1.0, 0.0),
            Site::new(1.0, 0.0),
            Site::new(0.0, -1.0),
            Site::new(0.0, 1.0),
        ];
        let winds = vec![
            WindVector::new(1.0, 0.0).unwrap(),
            WindVector::new(-1.0, 0.0).unwrap(),
            WindVector::new(0.0, 1.0).unwrap(),
            WindVector::new(0.0, -1.0).unwrap(),
        ];
        let err = interp_wind(&sites, &winds, &[Site::new(0.0, 0.0)]).unwrap_err();
        assert!(matches!(err, Error::ZeroWind { .. }));
        assert!(err.to_string().contains("ambiguous"));
    }

    #[test]
    fn wind_interpolation_rejects_duplicates_and_tiny_networks() {
        let sites = vec![Site::new(0.0, 0.0), Site::new(0.0, 0.0), Site::new(1.0, 0.0)];
        let winds =
            vec![WindVector::from_angle(0.1), WindVector::from_angle(0.2), WindVector::from_angle(0.3)];
        let err = interp_wind(&sites, &winds, &[Site::new(1.0, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::CoincidentSites { .. }));

        let two = interp_wind(&sites[1..], &winds[1..], &[Site::new(1.0, 1.0)]);
        assert!(two.is_err());
    }

    #[test]
    fn independent_blocks_condition_to_their_own_marginal() {
        // Zero cross-covariance: conditioning changes nothing.
        let mut joint = DMatrix::identity(5, 5) * 3.0;
        joint[(0, 1)] = 0.5;
        joint[(1, 0)] = 0.5;
        let prior_mean = DVector::from_column_slice(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        let observed = DVector::from_column_slice(&[1.0, -1.0, 2.0]);
        let got = conditional_mvn(&joint, 3, &prior_mean, &observed).unwrap();
        assert!((got.mean - DVector::from_column_slice(&[0.4, 0.5])).amax() < 1e-12);
        assert!((got.cov - DMatrix::identity(2, 2) * 3.0).amax() < 1e-12);

        // Perfect correlation: scalar blocks with unit covariance transfer
        // the observation exactly.
        let ones = DMatrix::from_element(2, 2, 1.0);
        let got = conditional_mvn(
            &ones,
            1,
            &DVector::zeros(2),
            &DVector::from_element(1, 2.0),
        )
        .unwrap();
        assert!((got.mean[0] - 2.0).abs() < 1e-9);
        assert!(got.cov[(0, 0)].abs() < 1e-9);
    }

    #[test]
    fn single_draw_prediction_solves_the_kriging_system() {
        use crate::covariance::matern_corr;
        let sites = spread_sites(5);
        let z = DVector::from_column_slice(&[1.2, -0.4, 0.8, 0.1, -0.9]);
        let data = ObservationModel::with_constant_mean(z.clone(), sites.clone(), None).unwrap();
        let state = m1_state(0.3, 0.5, 1.6); // sigma2 = 0.6
        let ctx = CovContext::new(ModelKind::M1, 1.0);
        let targets = [Site::new(0.4, -0.2), Site::new(-1.1, 0.8)];
        let spec = PredictionSpec::latent(&targets);
        let out = predict(&data, &ctx, &[state.clone()], &spec).unwrap();

        // Kriging oracle with an explicit dense solve.
        let sigma2 = state.sigma2();
        let corr = |a: Site, b: Site| matern_corr(a.dist(&b) / 1.6, 1.0).unwrap();
        let mut s_ff = DMatrix::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                s_ff[(i, j)] = sigma2 * corr(sites[i], sites[j]);
            }
            s_ff[(i, i)] += state.tau2;
        }
        let inv = s_ff.try_inverse().unwrap();
        let resid = &z - DVector::from_element(5, state.beta[0]);
        let weights = &inv * resid;
        for (k, target) in targets.iter().enumerate() {
            let cross = DVector::from_iterator(5, sites.iter().map(|s| sigma2 * corr(*target, *s)));
            let want = state.beta[0] + cross.dot(&weights);
            assert!((out.mean[k] - want).abs() < 1e-10, "target {k}: {} vs {want}", out.mean[k]);
        }
    }

    #[test]
    fn centered_data_predict_to_the_zero_surface() {
        let sites = spread_sites(6);
        let data =
            ObservationModel::with_constant_mean(DVector::zeros(6), sites, None).unwrap();
        let state = ParameterState {
            beta: DVector::zeros(1),
            tau2: 0.3,
            eta: 0.5,
            delta: Delta::M1 { phi: 1.0 },
        };
        let ctx = CovContext::new(ModelKind::M1, 1.0);
        let targets = [Site::new(0.2, 0.2), Site::new(5.0, -3.0)];
        let out = predict(&data, &ctx, &[state], &PredictionSpec::observation(&targets)).unwrap();
        assert!(out.mean.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn observation_scale_variance_never_drops_below_the_nugget() {
        let sites = spread_sites(7);
        let z = DVector::from_iterator(7, (0..7).map(|k| (k as f64 * 1.7).sin()));
        let data = ObservationModel::with_constant_mean(z, sites.clone(), None).unwrap();
        let states = vec![m1_state(0.2, 0.4, 1.0), m1_state(0.3, 0.8, 2.0)];
        let ctx = CovContext::new(ModelKind::M1, 1.0);
        let targets = [Site::new(0.1, 0.1), sites[2], Site::new(9.0, 9.0)];
        let out = predict(&data, &ctx, &states, &PredictionSpec::observation(&targets)).unwrap();
        let min_tau2 = 0.2f64;
        for sd in &out.sd {
            assert!(sd * sd >= min_tau2 * 0.999, "variance {} under the nugget floor", sd * sd);
        }
    }

    #[test]
    fn predictive_density_is_a_stable_mixture() {
        let sites = spread_sites(8);
        let (fit_sites, hold_sites) = sites.split_at(6);
        let z = DVector::from_iterator(8, (0..8).map(|k| (k as f64 * 0.6).cos()));
        let z_fit = DVector::from_iterator(6, z.iter().take(6).cloned());
        let z_hold = DVector::from_iterator(2, z.iter().skip(6).cloned());
        let fit = ObservationModel::with_constant_mean(z_fit, fit_sites.to_vec(), None).unwrap();
        let ctx = CovContext::new(ModelKind::M1, 1.0);
        let spec = PredictionSpec::observation(hold_sites);

        let a = m1_state(0.3, 0.6, 1.4);
        let b = m1_state(0.5, 0.9, 0.8);
        let lp_a = predictive_log_likelihood(&fit, &ctx, &[a.clone()], &spec, &z_hold).unwrap();
        let lp_b = predictive_log_likelihood(&fit, &ctx, &[b.clone()], &spec, &z_hold).unwrap();
        let mixed =
            predictive_log_likelihood(&fit, &ctx, &[a.clone(), b.clone()], &spec, &z_hold).unwrap();
        let want = ((lp_a.exp() + lp_b.exp()) / 2.0).ln();
        assert_relative_eq!(mixed, want, epsilon = 1e-10);

        // Sample order is irrelevant.
        let swapped = predictive_log_likelihood(&fit, &ctx, &[b, a], &spec, &z_hold).unwrap();
        assert_eq!(mixed, swapped);
    }

    #[test]
    fn predictions_permute_with_the_targets() {
        let sites = spread_sites(6);
        let z = DVector::from_iterator(6, (0..6).map(|k| (k as f64) * 0.4 - 1.0));
        let data = ObservationModel::with_constant_mean(z, sites, None).unwrap();
        let states = vec![m1_state(0.2, 0.5, 1.1)];
        let ctx = CovContext::new(ModelKind::M1, 1.0);
        let t1 = Site::new(0.3, 0.7);
        let t2 = Site::new(-0.9, 0.1);
        let fwd = predict(&data, &ctx, &states, &PredictionSpec::observation(&[t1, t2])).unwrap();
        let rev = predict(&data, &ctx, &states, &PredictionSpec::observation(&[t2, t1])).unwrap();
        assert_eq!(fwd.mean[0], rev.mean[1]);
        assert_eq!(fwd.mean[1], rev.mean[0]);
        assert_eq!(fwd.sd[0], rev.sd[1]);
        assert_eq!(fwd.sd[1], rev.sd[0]);
    }
}
