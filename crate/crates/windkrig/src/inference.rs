//! Posterior sampling for all five models.
//!
//! The marginal likelihood of the observations is Gaussian with mean
//! `Q beta` and covariance `Sigma = tau2 (I + eta^{-1} Omega(delta))`, where
//! `Omega` is the unit-diagonal correlation built in [`crate::covariance`].
//! Factorizing `A = I + eta^{-1} Omega` instead of `Sigma` keeps the
//! triangular solves well scaled: `ln |Sigma| = n ln tau2 + ln |A|` and the
//! quadratic form is `r' A^{-1} r / tau2`. A is the identity plus a positive
//! semidefinite term, so its factorization is stable for any eta > 0.
//!
//! One sweep updates: `beta` by its conjugate normal draw; `tau2`, `eta`,
//! and the positive correlation parameters by random-walk Metropolis on the
//! log scale; M2's rotation on the logit scale of (0, pi/2); and for M5 the
//! latent fields sitewise and their hyperparameters, the latter touching
//! only the field priors. Proposal steps adapt toward acceptance 0.35 in
//! batches during burn-in and stay frozen afterwards.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::covariance::{
    build_covariance, m5_sigma_fields, ns_prefactor, ns_quad_q, sq_exp_corr, CovContext,
    CovarianceMatrix, GridSpec,
};
use crate::error::{Error, Result};
use crate::geo::{KernelMatrix, Site};
use crate::linalg;
use crate::model::{
    ChainConfig, Delta, LatentFields, ModelKind, ObservationModel, ParameterState, PriorSpec,
};

/// Marginal Gaussian log likelihood of the data at `state`, given the
/// unit-diagonal correlation `omega` implied by `state.delta`.
pub fn log_likelihood(
    data: &ObservationModel,
    state: &ParameterState,
    omega: &CovarianceMatrix,
) -> Result<f64> {
    let n = data.n();
    if omega.n() != n {
        return Err(Error::Config(format!("correlation is {}x{} but there are {n} sites", omega.n(), omega.n())));
    }
    if state.beta.len() != data.design.ncols() {
        return Err(Error::Config(format!(
            "{} coefficients for {} design columns",
            state.beta.len(),
            data.design.ncols()
        )));
    }
    if !(state.tau2 > 0.0 && state.eta > 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    let (a_chol, _) = crate::linalg::cholesky_with_jitter(
        &a_matrix(omega.matrix(), state.eta),
        "likelihood factorization",
    )?;
    let r = &data.response - &data.design * &state.beta;
    let quad = r.dot(&a_chol.solve(&r));
    Ok(gaussian_ln_lik(n, state.tau2, linalg::ln_det(&a_chol), quad))
}

fn a_matrix(omega: &DMatrix<f64>, eta: f64) -> DMatrix<f64> {
    let n = omega.nrows();
    let mut a = omega / eta;
    for i in 0..n {
        a[(i, i)] += 1.0;
    }
    a
}

fn gaussian_ln_lik(n: usize, tau2: f64, ln_det_a: f64, quad: f64) -> f64 {
    -0.5 * (n as f64 * ((2.0 * std::f64::consts::PI).ln() + tau2.ln()) + ln_det_a + quad / tau2)
}

fn normal_ln_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * variance).ln() + (x - mean) * (x - mean) / variance)
}

/// Joint log prior density of a parameter state. Returns negative infinity
/// off the support (nonpositive variances, rotation outside (0, pi/2)).
/// `sites` enters only through the M5 latent-field Gaussian processes.
pub fn log_prior(state: &ParameterState, priors: &PriorSpec, sites: &[Site]) -> Result<f64> {
    let mut lp = 0.0;
    for b in state.beta.iter() {
        lp += normal_ln_pdf(*b, 0.0, priors.beta_variance);
    }
    lp += priors.tau2.ln_pdf(state.tau2);
    lp += priors.eta.ln_pdf(state.eta);
    if lp == f64::NEG_INFINITY {
        return Ok(lp);
    }
    match &state.delta {
        Delta::M1 { phi } => lp += priors.delta.ln_pdf(*phi),
        Delta::M2 { phi, theta, lambda1, lambda2 } => {
            lp += priors.delta.ln_pdf(*phi);
            lp += priors.delta.ln_pdf(*lambda1);
            lp += priors.delta.ln_pdf(*lambda2);
            if *theta > 0.0 && *theta < std::f64::consts::FRAC_PI_2 {
                lp += (2.0 / std::f64::consts::PI).ln();
            } else {
                return Ok(f64::NEG_INFINITY);
            }
        }
        Delta::M3 { lambda1_sq, lambda2_sq } => {
            lp += priors.delta.ln_pdf(*lambda1_sq);
            lp += priors.delta.ln_pdf(*lambda2_sq);
        }
        Delta::M4 { phi1, phi2 } => {
            lp += priors.delta.ln_pdf(*phi1);
            lp += priors.delta.ln_pdf(*phi2);
        }
        Delta::M5(fields) => {
            lp += m5_prior(fields, priors, sites)?;
        }
    }
    Ok(lp)
}

/// Hyperprior plus latent-field prior density for M5.
fn m5_prior(fields: &LatentFields, priors: &PriorSpec, sites: &[Site]) -> Result<f64> {
    fields.validate(sites.len())?;
    let mut lp = normal_ln_pdf(fields.mu_lambda1, 0.0, priors.mu_lambda_variance)
        + normal_ln_pdf(fields.mu_lambda2, 0.0, priors.mu_lambda_variance)
        + normal_ln_pdf(fields.mu_gamma, 0.0, 1.0)
        + priors.sigma2_field.ln_pdf(fields.sigma2_lambda)
        + priors.sigma2_field.ln_pdf(fields.sigma2_gamma)
        + priors.phi_field.ln_pdf(fields.phi_lambda)
        + priors.phi_field.ln_pdf(fields.phi_gamma);
    if lp == f64::NEG_INFINITY {
        return Ok(lp);
    }
    let lambda = FieldGram::new(sites, fields.phi_lambda)?;
    let gamma = FieldGram::new(sites, fields.phi_gamma)?;
    lp += lambda.ln_pdf(&fields.log_lambda1, fields.mu_lambda1, fields.sigma2_lambda);
    lp += lambda.ln_pdf(&fields.log_lambda2, fields.mu_lambda2, fields.sigma2_lambda);
    lp += gamma.ln_pdf(&fields.gamma, fields.mu_gamma, fields.sigma2_gamma);
    Ok(lp)
}

/// Cached squared-exponential prior correlation for one latent field range.
struct FieldGram {
    chol: Cholesky<f64, Dyn>,
    ln_det: f64,
    n: usize,
}

impl FieldGram {
    fn new(sites: &[Site], phi: f64) -> Result<Self> {
        let n = sites.len();
        let mut gram = DMatrix::identity(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let r = sq_exp_corr(sites[i].dist(&sites[j]), phi);
                gram[(i, j)] = r;
                gram[(j, i)] = r;
            }
        }
        let (chol, _) = linalg::cholesky_with_jitter(&gram, "latent field prior")?;
        let ln_det = linalg::ln_det(&chol);
        Ok(FieldGram { chol, ln_det, n })
    }

    fn quad(&self, values: &[f64], mu: f64) -> f64 {
        let centered = DVector::from_iterator(self.n, values.iter().map(|v| v - mu));
        centered.dot(&self.chol.solve(&centered))
    }

    fn ln_pdf(&self, values: &[f64], mu: f64, sigma2: f64) -> f64 {
        -0.5 * (self.n as f64 * ((2.0 * std::f64::consts::PI).ln() + sigma2.ln())
            + self.ln_det
            + self.quad(values, mu) / sigma2)
    }
}

/// Conjugate normal draw of the mean coefficients given everything else.
///
/// The full conditional is normal with precision
/// `Q' Sigma^{-1} Q + V0^{-1}` and mean
/// `(Q' Sigma^{-1} Q + V0^{-1})^{-1} Q' Sigma^{-1} z`, where `V0` is the
/// diagonal prior variance.
pub fn gibbs_beta<R: Rng + ?Sized>(
    data: &ObservationModel,
    state: &ParameterState,
    omega: &CovarianceMatrix,
    priors: &PriorSpec,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let (a_chol, _) = linalg::cholesky_with_jitter(
        &a_matrix(omega.matrix(), state.eta),
        "beta conditional",
    )?;
    gibbs_beta_with(data, state.tau2, &a_chol, priors, rng)
}

fn gibbs_beta_with<R: Rng + ?Sized>(
    data: &ObservationModel,
    tau2: f64,
    a_chol: &Cholesky<f64, Dyn>,
    priors: &PriorSpec,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let p = data.design.ncols();
    let w = a_chol.solve(&data.design);
    let mut precision = (data.design.transpose() * &w) / tau2;
    for k in 0..p {
        precision[(k, k)] += 1.0 / priors.beta_variance;
    }
    let rhs = (w.transpose() * &data.response) / tau2;
    let prec_chol = Cholesky::new(precision)
        .ok_or_else(|| Error::Numerical("coefficient precision matrix is not positive definite".into()))?;
    let mean = prec_chol.solve(&rhs);
    let xi = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
    // Sample = mean + L^{-T} xi where precision = L L'.
    let l = prec_chol.l();
    let spread = l
        .transpose()
        .solve_upper_triangular(&xi)
        .ok_or_else(|| Error::Numerical("triangular solve failed in beta draw".into()))?;
    Ok(mean + spread)
}

/// One random-walk Metropolis update of a block of positive parameters on
/// the log scale (shared step, independent normal increments, log-density
/// Jacobian included).
///
/// `log_target` evaluates the log posterior density (up to a constant) at a
/// candidate block on the original scale; negative infinity rejects the
/// candidate. The current values must have finite log target.
pub fn mh_block_update<R, F>(values: &[f64], mut log_target: F, step: f64, rng: &mut R) -> Result<(Vec<f64>, bool)>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Domain(format!("proposal step must be positive, got {step}")));
    }
    if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("log-scale block requires positive values, got {values:?}")));
    }
    let current = log_target(values)?;
    if !current.is_finite() {
        return Err(Error::Numerical(format!(
            "log target at the current block {values:?} is {current}; the chain state is invalid"
        )));
    }
    let proposal: Vec<f64> = values
        .iter()
        .map(|v| (v.ln() + step * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let proposed = log_target(&proposal)?;
    if proposed.is_nan() {
        return Err(Error::Numerical(format!("log target at proposal {proposal:?} is NaN")));
    }
    let jacobian: f64 = proposal
        .iter()
        .zip(values)
        .map(|(y, x)| y.ln() - x.ln())
        .sum();
    let log_ratio = proposed - current + jacobian;
    let u: f64 = rng.gen();
    if u.ln() < log_ratio {
        Ok((proposal, true))
    } else {
        Ok((values.to_vec(), false))
    }
}

/// Acceptance bookkeeping for one proposal block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRate {
    pub name: String,
    pub proposed: u64,
    pub accepted: u64,
    /// Counts after burn-in, with the step frozen.
    pub proposed_post: u64,
    pub accepted_post: u64,
    pub final_step: f64,
}

impl BlockRate {
    /// Post-burn-in acceptance rate, the honest mixing diagnostic.
    pub fn rate(&self) -> f64 {
        if self.proposed_post > 0 {
            self.accepted_post as f64 / self.proposed_post as f64
        } else if self.proposed > 0 {
            self.accepted as f64 / self.proposed as f64
        } else {
            f64::NAN
        }
    }
}

/// Retained posterior draws plus run diagnostics.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub kind: ModelKind,
    pub nu: f64,
    pub states: Vec<ParameterState>,
    /// Marginal log likelihood of each retained state.
    pub log_liks: Vec<f64>,
    pub acceptance: Vec<BlockRate>,
    pub config: ChainConfig,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Deviance `-2 log L` per retained draw.
    pub fn deviance_draws(&self) -> Vec<f64> {
        self.log_liks.iter().map(|l| -2.0 * l).collect()
    }

    /// Plug-in state with every scalar averaged on its sampling scale.
    pub fn posterior_mean_state(&self) -> Result<ParameterState> {
        ParameterState::average(&self.states)
    }
}

/// Everything a chain needs. `conv_grid` is required for M4 and ignored
/// otherwise; M5 anchors its latent fields at the data sites.
#[derive(Debug, Clone)]
pub struct ChainSetup<'a> {
    pub data: &'a ObservationModel,
    pub kind: ModelKind,
    pub nu: f64,
    pub conv_grid: Option<&'a GridSpec>,
    pub priors: &'a PriorSpec,
    pub config: &'a ChainConfig,
    /// Starting state; defaults to [`default_init`].
    pub init: Option<ParameterState>,
}

/// Data-driven starting state: least-squares coefficients, the residual
/// variance split evenly between signal and nugget (eta = 1), and ranges
/// scaled to the maximum inter-site distance.
pub fn default_init(data: &ObservationModel, kind: ModelKind, _nu: f64) -> Result<ParameterState> {
    let n = data.n();
    let p = data.design.ncols();
    let xtx = data.design.transpose() * &data.design;
    let xtz = data.design.transpose() * &data.response;
    let beta = Cholesky::new(xtx)
        .ok_or_else(|| Error::Config("design matrix is rank deficient".into()))?
        .solve(&xtz);
    let resid = &data.response - &data.design * &beta;
    let dof = (n.saturating_sub(p)).max(1) as f64;
    let z_scale = data.response.iter().map(|z| z * z).sum::<f64>() / n as f64;
    let s2 = (resid.norm_squared() / dof).max(1e-8 * z_scale).max(1e-12);
    let dmax = if n > 1 { data.max_dist() } else { 1.0 };
    let delta = match kind {
        ModelKind::M1 => Delta::M1 { phi: dmax / 8.0 },
        ModelKind::M2 => Delta::M2 {
            phi: dmax / 8.0,
            theta: std::f64::consts::FRAC_PI_4,
            lambda1: 1.0,
            lambda2: 1.0,
        },
        ModelKind::M3 => Delta::M3 {
            lambda1_sq: (dmax / 4.0) * (dmax / 4.0),
            lambda2_sq: (dmax / 4.0) * (dmax / 4.0),
        },
        ModelKind::M4 => Delta::M4 { phi1: dmax / 8.0, phi2: dmax / 8.0 },
        ModelKind::M5 => {
            let log_l = ((dmax / 4.0) * (dmax / 4.0)).ln();
            let mut f = LatentFields::constant(n, log_l, log_l, 0.0);
            f.sigma2_lambda = 0.5;
            f.sigma2_gamma = 0.5;
            f.phi_lambda = crate::model::sq_exp_practical_range_to_phi(dmax / 2.0);
            f.phi_gamma = f.phi_lambda;
            Delta::M5(f)
        }
    };
    Ok(ParameterState { beta, tau2: 0.5 * s2, eta: 1.0, delta })
}

/// Runs one MCMC chain and returns the retained draws.
///
/// Proposal evaluation errors from out-of-domain candidates (overflowing
/// ranges and the like) reject the candidate; factorization or other
/// numerical failures abort with a state dump in the error message.
pub fn run_chain(setup: &ChainSetup) -> Result<PosteriorSamples> {
    setup.config.validate()?;
    let mut chain = Chain::new(setup)?;
    let retained = setup.config.retained();
    let mut states = Vec::with_capacity(retained);
    let mut log_liks = Vec::with_capacity(retained);
    for iter in 1..=setup.config.iterations {
        chain.sweep(iter)?;
        if iter > setup.config.burn_in && (iter - setup.config.burn_in) % setup.config.thinning == 0 {
            states.push(chain.state.clone());
            log_liks.push(chain.loglik);
        }
    }
    debug_assert_eq!(states.len(), retained);
    Ok(PosteriorSamples {
        kind: setup.kind,
        nu: setup.nu,
        states,
        log_liks,
        acceptance: chain.blocks.iter().map(|b| b.rate.clone()).collect(),
        config: setup.config.clone(),
    })
}

/// How a block proposal maps onto the chain caches.
#[derive(Debug, Clone, Copy, PartialEq)]
enum BlockTarget {
    Tau2,
    Eta,
    /// Index into the flattened scalar list of `Delta` (M1..M4 only).
    DeltaScalar(usize),
    /// M5 hyperparameter, by name index (see `M5_HYPERS`).
    M5Hyper(usize),
    /// M5 latent value: field 0/1/2 = log_lambda1/log_lambda2/gamma, site i.
    M5Latent { field: usize, site: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scale {
    Log,
    Logit { lo: f64, hi: f64 },
    Linear,
}

impl Scale {
    fn forward(&self, x: f64) -> f64 {
        match self {
            Scale::Log => x.ln(),
            Scale::Logit { lo, hi } => ((x - lo) / (hi - x)).ln(),
            Scale::Linear => x,
        }
    }

    fn backward(&self, z: f64) -> f64 {
        match self {
            Scale::Log => z.exp(),
            Scale::Logit { lo, hi } => {
                // Saturating sigmoid keeps the value strictly inside (lo, hi).
                let s = 1.0 / (1.0 + (-z).exp());
                lo + (hi - lo) * s
            }
            Scale::Linear => z,
        }
    }

    /// log |dx/dz| at x, the density correction for the transformed walk.
    fn ln_jacobian(&self, x: f64) -> f64 {
        match self {
            Scale::Log => x.ln(),
            Scale::Logit { lo, hi } => (x - lo).ln() + (hi - x).ln() - (hi - lo).ln(),
            Scale::Linear => 0.0,
        }
    }
}

const M5_HYPERS: [&str; 7] = [
    "mu_lambda1",
    "mu_lambda2",
    "mu_gamma",
    "sigma2_lambda",
    "sigma2_gamma",
    "phi_lambda",
    "phi_gamma",
];

struct Block {
    target: BlockTarget,
    scale: Scale,
    log_step: f64,
    batch_proposed: u64,
    batch_accepted: u64,
    batch_index: u64,
    rate: BlockRate,
}

impl Block {
    fn new(name: String, target: BlockTarget, scale: Scale, step: f64) -> Self {
        Block {
            target,
            scale,
            log_step: step.ln(),
            batch_proposed: 0,
            batch_accepted: 0,
            batch_index: 0,
            rate: BlockRate {
                name,
                proposed: 0,
                accepted: 0,
                proposed_post: 0,
                accepted_post: 0,
                final_step: step,
            },
        }
    }

    fn record(&mut self, accepted: bool, adapting: bool, window: u64) {
        self.rate.proposed += 1;
        self.rate.accepted += accepted as u64;
        if adapting {
            self.batch_proposed += 1;
            self.batch_accepted += accepted as u64;
            if self.batch_proposed >= window {
                self.batch_index += 1;
                let rate = self.batch_accepted as f64 / self.batch_proposed as f64;
                let delta = 0.25f64.min(1.0 / (self.batch_index as f64).sqrt());
                self.log_step += if rate > 0.35 { delta } else { -delta };
                self.log_step = self.log_step.clamp(-12.0, 6.0);
                self.batch_proposed = 0;
                self.batch_accepted = 0;
            }
        } else {
            self.rate.proposed_post += 1;
            self.rate.accepted_post += accepted as u64;
        }
        self.rate.final_step = self.log_step.exp();
    }

    fn step(&self) -> f64 {
        self.log_step.exp()
    }
}

/// Working state of one chain with cached factorizations.
struct Chain<'a> {
    setup: &'a ChainSetup<'a>,
    state: ParameterState,
    /// Current unit-diagonal correlation.
    omega: DMatrix<f64>,
    a_chol: Cholesky<f64, Dyn>,
    ln_det_a: f64,
    /// r' A^{-1} r with r the current mean residual.
    quad: f64,
    loglik: f64,
    blocks: Vec<Block>,
    rng: ChaCha20Rng,
    // M5 caches: per-site kernels and the two prior Grams with their quads.
    kernels: Vec<KernelMatrix>,
    gram_lambda: Option<FieldGram>,
    gram_gamma: Option<FieldGram>,
    quad_l1: f64,
    quad_l2: f64,
    quad_g: f64,
}

impl<'a> Chain<'a> {
    fn new(setup: &'a ChainSetup<'a>) -> Result<Self> {
        let data = setup.data;
        if setup.kind.needs_wind() {
            data.winds_for(setup.kind)?;
        }
        if setup.kind == ModelKind::M4 && setup.conv_grid.is_none() {
            return Err(Error::Config("M4 needs a convolution grid".into()));
        }
        let state = match &setup.init {
            Some(s) => {
                if s.kind() != setup.kind {
                    return Err(Error::Config(format!(
                        "initial state is for {} but the chain fits {}",
                        s.kind(),
                        setup.kind
                    )));
                }
                s.clone()
            }
            None => default_init(data, setup.kind, setup.nu)?,
        };
        let lp = log_prior(&state, setup.priors, &data.sites)?;
        if !lp.is_finite() {
            return Err(Error::Config(format!(
                "initial state has zero prior density (log prior {lp})"
            )));
        }

        let ctx = chain_context(setup);
        let omega = ctx.correlation(&state.delta, &data.sites, data.winds.as_deref())?.into_matrix();
        let (a_chol, _) = linalg::cholesky_with_jitter(&a_matrix(&omega, state.eta), "initial likelihood")?;
        let ln_det_a = linalg::ln_det(&a_chol);
        let r = &data.response - &data.design * &state.beta;
        let quad = r.dot(&a_chol.solve(&r));
        let loglik = gaussian_ln_lik(data.n(), state.tau2, ln_det_a, quad);
        if !loglik.is_finite() {
            return Err(Error::Numerical(format!(
                "initial log likelihood is {loglik} at state {state:?}"
            )));
        }

        let mut chain = Chain {
            setup,
            state,
            omega,
            a_chol,
            ln_det_a,
            quad,
            loglik,
            blocks: Vec::new(),
            rng: ChaCha20Rng::seed_from_u64(setup.config.seed),
            kernels: Vec::new(),
            gram_lambda: None,
            gram_gamma: None,
            quad_l1: 0.0,
            quad_l2: 0.0,
            quad_g: 0.0,
        };
        chain.init_blocks();
        chain.init_m5_caches()?;
        Ok(chain)
    }

    fn init_blocks(&mut self) {
        let config = self.setup.config;
        let step_for =
            |name: &str| config.step_overrides.get(name).copied().unwrap_or(config.initial_step);
        let mut blocks = vec![
            Block::new("tau2".into(), BlockTarget::Tau2, Scale::Log, step_for("tau2")),
            Block::new("eta".into(), BlockTarget::Eta, Scale::Log, step_for("eta")),
        ];
        match &self.state.delta {
            Delta::M5(fields) => {
                for (h, name) in M5_HYPERS.iter().enumerate() {
                    let scale = if h < 3 { Scale::Linear } else { Scale::Log };
                    blocks.push(Block::new(
                        (*name).into(),
                        BlockTarget::M5Hyper(h),
                        scale,
                        step_for(name),
                    ));
                }
                let n = fields.n_sites();
                for (field, prefix) in ["log_lambda1", "log_lambda2", "gamma"].iter().enumerate() {
                    for site in 0..n {
                        let name = format!("{prefix}_s{:03}", site + 1);
                        let step = step_for(&name);
                        blocks.push(Block::new(
                            name,
                            BlockTarget::M5Latent { field, site },
                            Scale::Linear,
                            step,
                        ));
                    }
                }
            }
            delta => {
                for (k, (name, _)) in delta.flatten().into_iter().enumerate() {
                    let scale = if name == "theta" {
                        Scale::Logit { lo: 0.0, hi: std::f64::consts::FRAC_PI_2 }
                    } else {
                        Scale::Log
                    };
                    let step = step_for(&name);
                    blocks.push(Block::new(name, BlockTarget::DeltaScalar(k), scale, step));
                }
            }
        }
        self.blocks = blocks;
    }

    fn init_m5_caches(&mut self) -> Result<()> {
        if let Delta::M5(fields) = &self.state.delta {
            self.kernels = m5_sigma_fields(fields)?;
            let sites = &self.setup.data.sites;
            let gl = FieldGram::new(sites, fields.phi_lambda)?;
            let gg = FieldGram::new(sites, fields.phi_gamma)?;
            self.quad_l1 = gl.quad(&fields.log_lambda1, fields.mu_lambda1);
            self.quad_l2 = gl.quad(&fields.log_lambda2, fields.mu_lambda2);
            self.quad_g = gg.quad(&fields.gamma, fields.mu_gamma);
            self.gram_lambda = Some(gl);
            self.gram_gamma = Some(gg);
        }
        Ok(())
    }

    fn sweep(&mut self, iter: usize) -> Result<()> {
        self.update_beta()?;
        let adapting = iter <= self.setup.config.burn_in;
        let window = self.setup.config.adapt_window as u64;
        for k in 0..self.blocks.len() {
            let accepted = match self.blocks[k].target {
                BlockTarget::Tau2 => self.update_tau2(k)?,
                BlockTarget::Eta => self.update_eta(k)?,
                BlockTarget::DeltaScalar(idx) => self.update_delta_scalar(k, idx)?,
                BlockTarget::M5Hyper(h) => self.update_m5_hyper(k, h)?,
                BlockTarget::M5Latent { field, site } => self.update_m5_latent(k, field, site)?,
            };
            self.blocks[k].record(accepted, adapting, window);
        }
        Ok(())
    }

    fn update_beta(&mut self) -> Result<()> {
        let data = self.setup.data;
        let beta = gibbs_beta_with(data, self.state.tau2, &self.a_chol, self.setup.priors, &mut self.rng)?;
        self.state.beta = beta;
        let r = &data.response - &data.design * &self.state.beta;
        self.quad = r.dot(&self.a_chol.solve(&r));
        self.loglik = gaussian_ln_lik(data.n(), self.state.tau2, self.ln_det_a, self.quad);
        Ok(())
    }

    /// Draws a transformed-scale random-walk candidate. Returns the
    /// candidate and the log Jacobian correction `ln J(y) - ln J(x)`.
    fn propose(&mut self, k: usize, x: f64) -> (f64, f64) {
        let scale = self.blocks[k].scale;
        let step = self.blocks[k].step();
        let z = scale.forward(x) + step * self.rng.sample::<f64, _>(StandardNormal);
        let y = scale.backward(z);
        let jac = scale.ln_jacobian(y) - scale.ln_jacobian(x);
        (y, jac)
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        if log_ratio >= 0.0 {
            return true;
        }
        let u: f64 = self.rng.gen();
        u.ln() < log_ratio
    }

    fn update_tau2(&mut self, k: usize) -> Result<bool> {
        let n = self.setup.data.n();
        let x = self.state.tau2;
        let (y, jac) = self.propose(k, x);
        if !(y > 0.0) || !y.is_finite() {
            return Ok(false);
        }
        let cur = self.loglik + self.setup.priors.tau2.ln_pdf(x);
        let new_ll = gaussian_ln_lik(n, y, self.ln_det_a, self.quad);
        let prop = new_ll + self.setup.priors.tau2.ln_pdf(y);
        if prop == f64::NEG_INFINITY {
            return Ok(false);
        }
        let accepted = self.accept(prop - cur + jac);
        if accepted {
            self.state.tau2 = y;
            self.loglik = new_ll;
        }
        Ok(accepted)
    }

    fn update_eta(&mut self, k: usize) -> Result<bool> {
        let data = self.setup.data;
        let x = self.state.eta;
        let (y, jac) = self.propose(k, x);
        if !(y > 0.0) || !y.is_finite() {
            return Ok(false);
        }
        let prior_prop = self.setup.priors.eta.ln_pdf(y);
        if prior_prop == f64::NEG_INFINITY {
            return Ok(false);
        }
        let (a_chol, _) = linalg::cholesky_with_jitter(&a_matrix(&self.omega, y), "eta update")?;
        let ln_det_a = linalg::ln_det(&a_chol);
        let r = &data.response - &data.design * &self.state.beta;
        let quad = r.dot(&a_chol.solve(&r));
        let new_ll = gaussian_ln_lik(data.n(), self.state.tau2, ln_det_a, quad);
        let cur = self.loglik + self.setup.priors.eta.ln_pdf(x);
        let accepted = self.accept(new_ll + prior_prop - cur + jac);
        if accepted {
            self.state.eta = y;
            self.a_chol = a_chol;
            self.ln_det_a = ln_det_a;
            self.quad = quad;
            self.loglik = new_ll;
        }
        Ok(accepted)
    }

    fn update_delta_scalar(&mut self, k: usize, idx: usize) -> Result<bool> {
        let data = self.setup.data;
        let flat = self.state.delta.flatten();
        let (name, x) = flat[idx].clone();
        let (y, jac) = self.propose(k, x);
        if !y.is_finite() {
            return Ok(false);
        }
        let mut candidate = self.state.clone();
        set_delta_scalar(&mut candidate.delta, idx, y);
        let prior_prop = log_prior(&candidate, self.setup.priors, &data.sites)?;
        if prior_prop == f64::NEG_INFINITY {
            return Ok(false);
        }
        let prior_cur = log_prior(&self.state, self.setup.priors, &data.sites)?;

        let ctx = chain_context(self.setup);
        let omega = match ctx.correlation(&candidate.delta, &data.sites, data.winds.as_deref()) {
            Ok(m) => m.into_matrix(),
            // Out-of-domain candidates (overflowed kernels and the like)
            // have essentially no posterior mass; reject them.
            Err(Error::Domain(_)) | Err(Error::NotPositiveDefinite(_)) => return Ok(false),
            Err(e) => return Err(self.numerical_abort(&name, e)),
        };
        let (a_chol, _) = linalg::cholesky_with_jitter(&a_matrix(&omega, self.state.eta), "delta update")?;
        let ln_det_a = linalg::ln_det(&a_chol);
        let r = &data.response - &data.design * &self.state.beta;
        let quad = r.dot(&a_chol.solve(&r));
        let new_ll = gaussian_ln_lik(data.n(), self.state.tau2, ln_det_a, quad);
        let accepted = self.accept(new_ll + prior_prop - self.loglik - prior_cur + jac);
        if accepted {
            self.state = candidate;
            self.omega = omega;
            self.a_chol = a_chol;
            self.ln_det_a = ln_det_a;
            self.quad = quad;
            self.loglik = new_ll;
        }
        Ok(accepted)
    }

    /// M5 hyperparameters touch only the latent-field priors, never the
    /// likelihood.
    fn update_m5_hyper(&mut self, k: usize, h: usize) -> Result<bool> {
        let sites = &self.setup.data.sites;
        let priors = self.setup.priors;
        let fields = match &self.state.delta {
            Delta::M5(f) => f.clone(),
            _ => unreachable!("M5 hyper block on a non-M5 chain"),
        };
        let n = sites.len() as f64;
        let x = match h {
            0 => fields.mu_lambda1,
            1 => fields.mu_lambda2,
            2 => fields.mu_gamma,
            3 => fields.sigma2_lambda,
            4 => fields.sigma2_gamma,
            5 => fields.phi_lambda,
            6 => fields.phi_gamma,
            _ => unreachable!(),
        };
        let (y, jac) = self.propose(k, x);
        if !y.is_finite() {
            return Ok(false);
        }
        let gl = self.gram_lambda.as_ref().expect("lambda gram cached");
        let gg = self.gram_gamma.as_ref().expect("gamma gram cached");

        // Current and proposed log density of the pieces the parameter touches.
        let (cur, prop, effects) = match h {
            0 => {
                let q = gl.quad(&fields.log_lambda1, y);
                (
                    normal_ln_pdf(x, 0.0, priors.mu_lambda_variance) - 0.5 * self.quad_l1 / fields.sigma2_lambda,
                    normal_ln_pdf(y, 0.0, priors.mu_lambda_variance) - 0.5 * q / fields.sigma2_lambda,
                    HyperEffect::QuadL1(q),
                )
            }
            1 => {
                let q = gl.quad(&fields.log_lambda2, y);
                (
                    normal_ln_pdf(x, 0.0, priors.mu_lambda_variance) - 0.5 * self.quad_l2 / fields.sigma2_lambda,
                    normal_ln_pdf(y, 0.0, priors.mu_lambda_variance) - 0.5 * q / fields.sigma2_lambda,
                    HyperEffect::QuadL2(q),
                )
            }
            2 => {
                let q = gg.quad(&fields.gamma, y);
                (
                    normal_ln_pdf(x, 0.0, 1.0) - 0.5 * self.quad_g / fields.sigma2_gamma,
                    normal_ln_pdf(y, 0.0, 1.0) - 0.5 * q / fields.sigma2_gamma,
                    HyperEffect::QuadG(q),
                )
            }
            3 => {
                if !(y > 0.0) {
                    return Ok(false);
                }
                let lp_x = priors.sigma2_field.ln_pdf(x) - n * x.ln() - 0.5 * (self.quad_l1 + self.quad_l2) / x;
                let lp_y = priors.sigma2_field.ln_pdf(y) - n * y.ln() - 0.5 * (self.quad_l1 + self.quad_l2) / y;
                (lp_x, lp_y, HyperEffect::None)
            }
            4 => {
                if !(y > 0.0) {
                    return Ok(false);
                }
                let lp_x = priors.sigma2_field.ln_pdf(x) - 0.5 * n * x.ln() - 0.5 * self.quad_g / x;
                let lp_y = priors.sigma2_field.ln_pdf(y) - 0.5 * n * y.ln() - 0.5 * self.quad_g / y;
                (lp_x, lp_y, HyperEffect::None)
            }
            5 => {
                if !(y > 0.0) {
                    return Ok(false);
                }
                let pri_y = priors.phi_field.ln_pdf(y);
                if pri_y == f64::NEG_INFINITY {
                    return Ok(false);
                }
                let gram_y = FieldGram::new(sites, y)?;
                let q1 = gram_y.quad(&fields.log_lambda1, fields.mu_lambda1);
                let q2 = gram_y.quad(&fields.log_lambda2, fields.mu_lambda2);
                let lp_x = priors.phi_field.ln_pdf(x)
                    - gl.ln_det
                    - 0.5 * (self.quad_l1 + self.quad_l2) / fields.sigma2_lambda;
                let lp_y = pri_y - gram_y.ln_det - 0.5 * (q1 + q2) / fields.sigma2_lambda;
                (lp_x, lp_y, HyperEffect::GramLambda(gram_y, q1, q2))
            }
            6 => {
                if !(y > 0.0) {
                    return Ok(false);
                }
                let pri_y = priors.phi_field.ln_pdf(y);
                if pri_y == f64::NEG_INFINITY {
                    return Ok(false);
                }
                let gram_y = FieldGram::new(sites, y)?;
                let q = gram_y.quad(&fields.gamma, fields.mu_gamma);
                let lp_x =
                    priors.phi_field.ln_pdf(x) - 0.5 * gg.ln_det - 0.5 * self.quad_g / fields.sigma2_gamma;
                let lp_y = pri_y - 0.5 * gram_y.ln_det - 0.5 * q / fields.sigma2_gamma;
                (lp_x, lp_y, HyperEffect::GramGamma(gram_y, q))
            }
            _ => unreachable!(),
        };
        if prop == f64::NEG_INFINITY {
            return Ok(false);
        }
        let accepted = self.accept(prop - cur + jac);
        if accepted {
            if let Delta::M5(f) = &mut self.state.delta {
                match h {
                    0 => f.mu_lambda1 = y,
                    1 => f.mu_lambda2 = y,
                    2 => f.mu_gamma = y,
                    3 => f.sigma2_lambda = y,
                    4 => f.sigma2_gamma = y,
                    5 => f.phi_lambda = y,
                    6 => f.phi_gamma = y,
                    _ => unreachable!(),
                }
            }
            match effects {
                HyperEffect::None => {}
                HyperEffect::QuadL1(q) => self.quad_l1 = q,
                HyperEffect::QuadL2(q) => self.quad_l2 = q,
                HyperEffect::QuadG(q) => self.quad_g = q,
                HyperEffect::GramLambda(g, q1, q2) => {
                    self.gram_lambda = Some(g);
                    self.quad_l1 = q1;
                    self.quad_l2 = q2;
                }
                HyperEffect::GramGamma(g, q) => {
                    self.gram_gamma = Some(g);
                    self.quad_g = q;
                }
            }
        }
        Ok(accepted)
    }

    /// Sitewise latent update: a new value at site i changes row/column i of
    /// the correlation and the field prior quadratic form only.
    fn update_m5_latent(&mut self, k: usize, field: usize, site: usize) -> Result<bool> {
        let data = self.setup.data;
        let n = data.n();
        let fields = match &self.state.delta {
            Delta::M5(f) => f.clone(),
            _ => unreachable!("M5 latent block on a non-M5 chain"),
        };
        let values = match field {
            0 => &fields.log_lambda1,
            1 => &fields.log_lambda2,
            _ => &fields.gamma,
        };
        let x = values[site];
        let (y, jac) = self.propose(k, x);
        debug_assert_eq!(jac, 0.0);
        if !y.is_finite() {
            return Ok(false);
        }

        // Prior change through the field quadratic form.
        let mut new_values = values.clone();
        new_values[site] = y;
        let (gram, mu, sigma2, old_quad) = match field {
            0 => (self.gram_lambda.as_ref().unwrap(), fields.mu_lambda1, fields.sigma2_lambda, self.quad_l1),
            1 => (self.gram_lambda.as_ref().unwrap(), fields.mu_lambda2, fields.sigma2_lambda, self.quad_l2),
            _ => (self.gram_gamma.as_ref().unwrap(), fields.mu_gamma, fields.sigma2_gamma, self.quad_g),
        };
        let new_quad = gram.quad(&new_values, mu);
        let prior_diff = -0.5 * (new_quad - old_quad) / sigma2;

        // Likelihood change through row/column `site` of the correlation.
        let kernel = match field {
            0 => KernelMatrix::from_axes(kernel_theta(fields.gamma[site]), y.exp(), fields.log_lambda2[site].exp()),
            1 => KernelMatrix::from_axes(kernel_theta(fields.gamma[site]), fields.log_lambda1[site].exp(), y.exp()),
            _ => KernelMatrix::from_axes(kernel_theta(y), fields.log_lambda1[site].exp(), fields.log_lambda2[site].exp()),
        };
        let kernel = match kernel {
            Ok(kr) => kr,
            Err(Error::Domain(_)) | Err(Error::NotPositiveDefinite(_)) => return Ok(false),
            Err(e) => return Err(self.numerical_abort("latent kernel", e)),
        };
        let mut row = DVector::zeros(n);
        for j in 0..n {
            if j == site {
                row[j] = 1.0;
                continue;
            }
            let q = ns_quad_q(data.sites[site], data.sites[j], &kernel, &self.kernels[j])?;
            let pref = ns_prefactor(&kernel, &self.kernels[j]);
            row[j] = pref * crate::covariance::matern_corr(2.0 * (self.setup.nu * q).sqrt(), self.setup.nu)?;
        }
        let mut omega = self.omega.clone();
        for j in 0..n {
            omega[(site, j)] = row[j];
            omega[(j, site)] = row[j];
        }
        let (a_chol, _) = linalg::cholesky_with_jitter(&a_matrix(&omega, self.state.eta), "latent update")?;
        let ln_det_a = linalg::ln_det(&a_chol);
        let r = &data.response - &data.design * &self.state.beta;
        let quad = r.dot(&a_chol.solve(&r));
        let new_ll = gaussian_ln_lik(n, self.state.tau2, ln_det_a, quad);

        let accepted = self.accept(new_ll - self.loglik + prior_diff + jac);
        if accepted {
            if let Delta::M5(f) = &mut self.state.delta {
                match field {
                    0 => f.log_lambda1[site] = y,
                    1 => f.log_lambda2[site] = y,
                    _ => f.gamma[site] = y,
                }
            }
            match field {
                0 => self.quad_l1 = new_quad,
                1 => self.quad_l2 = new_quad,
                _ => self.quad_g = new_quad,
            }
            self.kernels[site] = kernel;
            self.omega = omega;
            self.a_chol = a_chol;
            self.ln_det_a = ln_det_a;
            self.quad = quad;
            self.loglik = new_ll;
        }
        Ok(accepted)
    }

    fn numerical_abort(&self, block: &str, source: Error) -> Error {
        Error::Numerical(format!(
            "chain aborted in block '{block}': {source}; state dump: {:?}",
            self.state
        ))
    }
}

enum HyperEffect {
    None,
    QuadL1(f64),
    QuadL2(f64),
    QuadG(f64),
    GramLambda(FieldGram, f64, f64),
    GramGamma(FieldGram, f64),
}

fn kernel_theta(gamma: f64) -> f64 {
    std::f64::consts::FRAC_PI_2 * crate::covariance::std_normal_cdf(gamma)
}

fn chain_context<'b>(setup: &'b ChainSetup<'b>) -> CovContext<'b> {
    let mut ctx = CovContext::new(setup.kind, setup.nu);
    if let Some(g) = setup.conv_grid {
        ctx = ctx.with_conv_grid(g);
    }
    ctx.with_latent_anchors(&setup.data.sites)
}

fn set_delta_scalar(delta: &mut Delta, idx: usize, value: f64) {
    match delta {
        Delta::M1 { phi } => {
            debug_assert_eq!(idx, 0);
            *phi = value;
        }
        Delta::M2 { phi, theta, lambda1, lambda2 } => match idx {
            0 => *phi = value,
            1 => *theta = value,
            2 => *lambda1 = value,
            3 => *lambda2 = value,
            _ => unreachable!(),
        },
        Delta::M3 { lambda1_sq, lambda2_sq } => match idx {
            0 => *lambda1_sq = value,
            1 => *lambda2_sq = value,
            _ => unreachable!(),
        },
        Delta::M4 { phi1, phi2 } => match idx {
            0 => *phi1 = value,
            1 => *phi2 = value,
            _ => unreachable!(),
        },
        Delta::M5(_) => unreachable!("M5 has no scalar delta blocks"),
    }
}

/// Log likelihood at a state whose correlation is not prebuilt, rebuilding
/// it from the model context. Used for plug-in deviances.
pub fn log_likelihood_at(
    data: &ObservationModel,
    ctx: &CovContext,
    state: &ParameterState,
) -> Result<f64> {
    let omega = ctx.correlation(&state.delta, &data.sites, data.winds.as_deref())?;
    log_likelihood(data, state, &omega)
}

/// Joint covariance of the observations at `state`:
/// `sigma2 Omega + tau2 I`.
pub fn observation_covariance(
    data: &ObservationModel,
    ctx: &CovContext,
    state: &ParameterState,
) -> Result<CovarianceMatrix> {
    let cov = build_covariance(ctx, state, &data.sites, data.winds.as_deref())?;
    let mut m = cov.into_matrix();
    for i in 0..m.nrows() {
        m[(i, i)] += state.tau2;
    }
    CovarianceMatrix::new(m)
}
