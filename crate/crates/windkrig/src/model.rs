//! Model identifiers, parameter blocks, priors, and the observation model.
//!
//! All five covariance models share the observation structure
//! `Z(s) = mu(s) + Y(s) + eps(s)` with `mu(s) = q(s)' beta`, spatial process
//! variance `sigma2`, and nugget variance `tau2`. Sampling works on the
//! reparameterization `eta = tau2 / sigma2`, so a parameter state carries
//! `(beta, tau2, eta, delta)` where `delta` is the model-specific correlation
//! block.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geo::{Site, WindVector};

/// The five covariance models.
///
/// * `M1`: isotropic Matern.
/// * `M2`: geometrically anisotropic Matern with a fitted rotation.
/// * `M3`: nonstationary Matern with wind-oriented kernel matrices.
/// * `M4`: discretized process convolution with wind-projection ranges.
/// * `M5`: nonstationary Matern with latent Gaussian-process kernel fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    M1,
    M2,
    M3,
    M4,
    M5,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [ModelKind::M1, ModelKind::M2, ModelKind::M3, ModelKind::M4, ModelKind::M5];

    /// Whether the covariance needs a wind vector at every site.
    pub fn needs_wind(&self) -> bool {
        matches!(self, ModelKind::M3 | ModelKind::M4)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::M1 => "M1",
            ModelKind::M2 => "M2",
            ModelKind::M3 => "M3",
            ModelKind::M4 => "M4",
            ModelKind::M5 => "M5",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" => Ok(ModelKind::M1),
            "M2" => Ok(ModelKind::M2),
            "M3" => Ok(ModelKind::M3),
            "M4" => Ok(ModelKind::M4),
            "M5" => Ok(ModelKind::M5),
            other => Err(Error::Config(format!("unknown model '{other}', expected M1..M5"))),
        }
    }
}

/// Per-site latent kernel fields for M5 together with their hyperparameters.
///
/// Each site carries `log lambda1`, `log lambda2` (log eigenvalues of its
/// kernel matrix) and `gamma` (unconstrained rotation score mapped to an
/// angle through `theta = pi/2 * Phi(gamma)`). Each of the three fields has
/// a Gaussian-process prior with constant mean, squared-exponential
/// correlation, and shared hyperparameters: the two log-eigenvalue fields
/// share `(sigma2_lambda, phi_lambda)`, the rotation field has its own pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFields {
    pub log_lambda1: Vec<f64>,
    pub log_lambda2: Vec<f64>,
    pub gamma: Vec<f64>,
    pub mu_lambda1: f64,
    pub mu_lambda2: f64,
    pub mu_gamma: f64,
    pub sigma2_lambda: f64,
    pub sigma2_gamma: f64,
    pub phi_lambda: f64,
    pub phi_gamma: f64,
}

impl LatentFields {
    /// Constant fields: every site gets the same kernel. Useful as an
    /// initial state.
    pub fn constant(n: usize, log_lambda1: f64, log_lambda2: f64, gamma: f64) -> Self {
        LatentFields {
            log_lambda1: vec![log_lambda1; n],
            log_lambda2: vec![log_lambda2; n],
            gamma: vec![gamma; n],
            mu_lambda1: log_lambda1,
            mu_lambda2: log_lambda2,
            mu_gamma: gamma,
            sigma2_lambda: 1.0,
            sigma2_gamma: 1.0,
            phi_lambda: 1.0,
            phi_gamma: 1.0,
        }
    }

    pub fn n_sites(&self) -> usize {
        self.log_lambda1.len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.log_lambda1.len() != n || self.log_lambda2.len() != n || self.gamma.len() != n {
            return Err(Error::Config(format!(
                "latent fields must have one value per site ({n}), got {}/{}/{}",
                self.log_lambda1.len(),
                self.log_lambda2.len(),
                self.gamma.len()
            )));
        }
        let all_finite = self
            .log_lambda1
            .iter()
            .chain(&self.log_lambda2)
            .chain(&self.gamma)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Config("latent field values must be finite".into()));
        }
        for (name, v) in [
            ("sigma2_lambda", self.sigma2_lambda),
            ("sigma2_gamma", self.sigma2_gamma),
            ("phi_lambda", self.phi_lambda),
            ("phi_gamma", self.phi_gamma),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("latent hyperparameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Model-specific correlation parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Delta {
    /// Isotropic Matern range.
    M1 { phi: f64 },
    /// Anisotropic Matern: overall range `phi`, rotation `theta` in
    /// (0, pi/2), axis weights `lambda1`, `lambda2`.
    M2 { phi: f64, theta: f64, lambda1: f64, lambda2: f64 },
    /// Wind-oriented kernels: squared ranges along and across the wind.
    M3 { lambda1_sq: f64, lambda2_sq: f64 },
    /// Projection convolution: base range `phi1` and wind gain `phi2`.
    M4 { phi1: f64, phi2: f64 },
    /// Latent kernel fields.
    M5(LatentFields),
}

impl Delta {
    pub fn kind(&self) -> ModelKind {
        match self {
            Delta::M1 { .. } => ModelKind::M1,
            Delta::M2 { .. } => ModelKind::M2,
            Delta::M3 { .. } => ModelKind::M3,
            Delta::M4 { .. } => ModelKind::M4,
            Delta::M5(_) => ModelKind::M5,
        }
    }

    /// Flattens to named scalars in a stable order. Latent field values get
    /// 1-based site-indexed names such as `log_lambda1_s004`.
    pub fn flatten(&self) -> Vec<(String, f64)> {
        match self {
            Delta::M1 { phi } => vec![("phi".into(), *phi)],
            Delta::M2 { phi, theta, lambda1, lambda2 } => vec![
                ("phi".into(), *phi),
                ("theta".into(), *theta),
                ("lambda1".into(), *lambda1),
                ("lambda2".into(), *lambda2),
            ],
            Delta::M3 { lambda1_sq, lambda2_sq } => {
                vec![("lambda1_sq".into(), *lambda1_sq), ("lambda2_sq".into(), *lambda2_sq)]
            }
            Delta::M4 { phi1, phi2 } => vec![("phi1".into(), *phi1), ("phi2".into(), *phi2)],
            Delta::M5(f) => {
                let mut out = vec![
                    ("mu_lambda1".into(), f.mu_lambda1),
                    ("mu_lambda2".into(), f.mu_lambda2),
                    ("mu_gamma".into(), f.mu_gamma),
                    ("sigma2_lambda".into(), f.sigma2_lambda),
                    ("sigma2_gamma".into(), f.sigma2_gamma),
                    ("phi_lambda".into(), f.phi_lambda),
                    ("phi_gamma".into(), f.phi_gamma),
                ];
                for (field, values) in [
                    ("log_lambda1", &f.log_lambda1),
                    ("log_lambda2", &f.log_lambda2),
                    ("gamma", &f.gamma),
                ] {
                    for (i, v) in values.iter().enumerate() {
                        out.push((format!("{field}_s{:03}", i + 1), *v));
                    }
                }
                out
            }
        }
    }

    /// Rebuilds a delta block from named scalars, the inverse of
    /// [`Delta::flatten`]. `n_sites` is only consulted for M5.
    pub fn from_named(kind: ModelKind, values: &BTreeMap<String, f64>, n_sites: usize) -> Result<Self> {
        let get = |name: &str| -> Result<f64> {
            values
                .get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing parameter column '{name}' for {kind}")))
        };
        match kind {
            ModelKind::M1 => Ok(Delta::M1 { phi: get("phi")? }),
            ModelKind::M2 => Ok(Delta::M2 {
                phi: get("phi")?,
                theta: get("theta")?,
                lambda1: get("lambda1")?,
                lambda2: get("lambda2")?,
            }),
            ModelKind::M3 => Ok(Delta::M3 {
                lambda1_sq: get("lambda1_sq")?,
                lambda2_sq: get("lambda2_sq")?,
            }),
            ModelKind::M4 => Ok(Delta::M4 { phi1: get("phi1")?, phi2: get("phi2")? }),
            ModelKind::M5 => {
                let mut fields = LatentFields::constant(n_sites, 0.0, 0.0, 0.0);
                fields.mu_lambda1 = get("mu_lambda1")?;
                fields.mu_lambda2 = get("mu_lambda2")?;
                fields.mu_gamma = get("mu_gamma")?;
                fields.sigma2_lambda = get("sigma2_lambda")?;
                fields.sigma2_gamma = get("sigma2_gamma")?;
                fields.phi_lambda = get("phi_lambda")?;
                fields.phi_gamma = get("phi_gamma")?;
                for i in 0..n_sites {
                    fields.log_lambda1[i] = get(&format!("log_lambda1_s{:03}", i + 1))?;
                    fields.log_lambda2[i] = get(&format!("log_lambda2_s{:03}", i + 1))?;
                    fields.gamma[i] = get(&format!("gamma_s{:03}", i + 1))?;
                }
                Ok(Delta::M5(fields))
            }
        }
    }
}

/// One full parameter state: mean coefficients, nugget variance `tau2`,
/// noise-to-signal ratio `eta = tau2 / sigma2`, and the correlation block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub beta: DVector<f64>,
    pub tau2: f64,
    pub eta: f64,
    pub delta: Delta,
}

impl ParameterState {
    /// Spatial process variance implied by the reparameterization.
    pub fn sigma2(&self) -> f64 {
        self.tau2 / self.eta
    }

    pub fn kind(&self) -> ModelKind {
        self.delta.kind()
    }

    /// Componentwise average of states on the sampling scale: variances are
    /// averaged as variances, angles as angles, latent fields sitewise.
    /// Used as the plug-in state for information criteria.
    pub fn average(states: &[ParameterState]) -> Result<ParameterState> {
        let first = states
            .first()
            .ok_or_else(|| Error::Config("cannot average an empty set of states".into()))?;
        let kind = first.kind();
        let p = first.beta.len();
        let n_named = first.delta.flatten().len();
        let mut beta = DVector::zeros(p);
        let mut tau2 = 0.0;
        let mut eta = 0.0;
        let mut named: Vec<(String, f64)> = first.delta.flatten().iter().map(|(n, _)| (n.clone(), 0.0)).collect();
        for s in states {
            if s.kind() != kind || s.beta.len() != p || s.delta.flatten().len() != n_named {
                return Err(Error::Config("cannot average states from different models".into()));
            }
            beta += &s.beta;
            tau2 += s.tau2;
            eta += s.eta;
            for (acc, (_, v)) in named.iter_mut().zip(s.delta.flatten()) {
                acc.1 += v;
            }
        }
        let m = states.len() as f64;
        beta /= m;
        let map: BTreeMap<String, f64> = named.into_iter().map(|(n, v)| (n, v / m)).collect();
        let n_sites = match &first.delta {
            Delta::M5(f) => f.n_sites(),
            _ => 0,
        };
        Ok(ParameterState {
            beta,
            tau2: tau2 / m,
            eta: eta / m,
            delta: Delta::from_named(kind, &map, n_sites)?,
        })
    }
}

/// Inverse gamma distribution with shape `a` and scale `b`:
/// density proportional to `x^{-(a+1)} exp(-b / x)` on x > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InvGamma {
    pub fn new(shape: f64, scale: f64) -> Self {
        InvGamma { shape, scale }
    }

    /// Log density; negative infinity off the support.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 || !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        let a = self.shape;
        let b = self.scale;
        a * b.ln() - statrs::function::gamma::ln_gamma(a) - (a + 1.0) * x.ln() - b / x
    }

    /// Mean `b / (a - 1)` for a > 1.
    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.scale / (self.shape - 1.0))
    }

    /// Inverse gamma with the given mean and variance (requires both
    /// positive). Shape is `mean^2 / var + 2`, scale is `mean (shape - 1)`.
    pub fn from_mean_variance(mean: f64, var: f64) -> Self {
        let shape = mean * mean / var + 2.0;
        InvGamma { shape, scale: mean * (shape - 1.0) }
    }
}

/// Prior specification shared by all models.
///
/// Mean coefficients get independent zero-mean normals with a large
/// variance. The variance parameters `tau2` and `eta` and every positive
/// correlation parameter get diffuse inverse gammas. M2's rotation is
/// uniform on (0, pi/2). The M5 hyperpriors follow the scheme described on
/// [`LatentFields`]: normal means, inverse-gamma variances with mean and
/// variance 1, and inverse-gamma range parameters centered so the
/// squared-exponential practical range (correlation 0.05) is half the
/// maximum inter-site distance.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub beta_variance: f64,
    pub tau2: InvGamma,
    pub eta: InvGamma,
    /// Applied to each positive scalar in `delta` for M1..M4.
    pub delta: InvGamma,
    pub mu_lambda_variance: f64,
    /// For `sigma2_lambda` and `sigma2_gamma`.
    pub sigma2_field: InvGamma,
    /// For `phi_lambda` and `phi_gamma`.
    pub phi_field: InvGamma,
}

impl PriorSpec {
    /// Reference priors given the maximum inter-site distance of the data.
    pub fn reference(max_dist: f64) -> Self {
        PriorSpec {
            beta_variance: 1e6,
            tau2: InvGamma::new(0.1, 0.1),
            eta: InvGamma::new(0.1, 0.1),
            delta: InvGamma::new(0.1, 0.1),
            mu_lambda_variance: 1e6,
            sigma2_field: InvGamma::from_mean_variance(1.0, 1.0),
            phi_field: InvGamma::from_mean_variance(sq_exp_practical_range_to_phi(0.5 * max_dist), {
                let m = sq_exp_practical_range_to_phi(0.5 * max_dist);
                m * m
            }),
        }
    }
}

/// Range parameter of a squared-exponential correlation whose practical
/// range (correlation 0.05) equals `range`: solves exp(-(d/phi)^2) = 0.05.
pub fn sq_exp_practical_range_to_phi(range: f64) -> f64 {
    range / (20.0f64).ln().sqrt()
}

/// Range parameter of an exponential correlation whose practical range
/// (correlation 0.05) equals `range`: solves exp(-d/phi) = 0.05.
pub fn exp_practical_range_to_phi(range: f64) -> f64 {
    range / (20.0f64).ln()
}

/// Observed data for inference: response, mean design, sites, and optional
/// winds (one unit vector per site, required by M3 and M4).
#[derive(Debug, Clone)]
pub struct ObservationModel {
    pub response: DVector<f64>,
    pub design: DMatrix<f64>,
    pub sites: Vec<Site>,
    pub winds: Option<Vec<WindVector>>,
}

impl ObservationModel {
    /// Builds an observation model, validating dimensions, duplicate sites,
    /// and finiteness.
    pub fn new(
        response: DVector<f64>,
        design: DMatrix<f64>,
        sites: Vec<Site>,
        winds: Option<Vec<WindVector>>,
    ) -> Result<Self> {
        let n = sites.len();
        if n == 0 {
            return Err(Error::Config("observation model needs at least one site".into()));
        }
        if response.len() != n || design.nrows() != n {
            return Err(Error::Config(format!(
                "dimension mismatch: {} sites, {} responses, {} design rows",
                n,
                response.len(),
                design.nrows()
            )));
        }
        if design.ncols() == 0 || design.ncols() > n {
            return Err(Error::Config(format!(
                "design matrix must have between 1 and {n} columns, got {}",
                design.ncols()
            )));
        }
        if let Some(w) = &winds {
            if w.len() != n {
                return Err(Error::Config(format!("{} winds for {} sites", w.len(), n)));
            }
        }
        if response.iter().any(|z| !z.is_finite()) || design.iter().any(|q| !q.is_finite()) {
            return Err(Error::Config("response and design entries must be finite".into()));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if sites[i] == sites[j] {
                    return Err(Error::Config(format!(
                        "duplicate site coordinates at positions {i} and {j}: ({}, {})",
                        sites[i].x, sites[i].y
                    )));
                }
            }
        }
        Ok(ObservationModel { response, design, sites, winds })
    }

    /// Intercept-only design over `sites`.
    pub fn with_constant_mean(
        response: DVector<f64>,
        sites: Vec<Site>,
        winds: Option<Vec<WindVector>>,
    ) -> Result<Self> {
        let n = sites.len();
        ObservationModel::new(response, DMatrix::from_element(n, 1, 1.0), sites, winds)
    }

    pub fn n(&self) -> usize {
        self.sites.len()
    }

    /// Maximum inter-site distance.
    pub fn max_dist(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.sites.len() {
            for j in (i + 1)..self.sites.len() {
                best = best.max(self.sites[i].dist(&self.sites[j]));
            }
        }
        best
    }

    /// Winds, or an error naming the model that requires them.
    pub fn winds_for(&self, kind: ModelKind) -> Result<&[WindVector]> {
        self.winds
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{kind} requires a wind vector at every site")))
    }
}

/// MCMC run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub seed: u64,
    /// Proposals per adaptation batch during burn-in.
    pub adapt_window: usize,
    /// Initial random-walk standard deviation on the transformed scale.
    pub initial_step: f64,
    /// Per-block overrides of the initial step, keyed by block name.
    pub step_overrides: BTreeMap<String, f64>,
}

impl ChainConfig {
    /// Reference run lengths: 50k iterations, 10k burn-in, thinning 10 for
    /// M1..M4; 700k/100k/100 for M5, whose latent fields mix slowly.
    pub fn reference(kind: ModelKind) -> Self {
        let (iterations, burn_in, thinning) = match kind {
            ModelKind::M5 => (700_000, 100_000, 100),
            _ => (50_000, 10_000, 10),
        };
        ChainConfig {
            iterations,
            burn_in,
            thinning,
            seed: 0,
            adapt_window: 50,
            initial_step: 0.5,
            step_overrides: BTreeMap::new(),
        }
    }

    /// Number of retained posterior draws.
    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thinning
    }

    pub fn validate(&self) -> Result<()> {
        if self.thinning == 0 {
            return Err(Error::Config("thinning must be at least 1".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn-in ({}) must be smaller than the iteration count ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.retained() == 0 {
            return Err(Error::Config(
                "no retained draws: lengthen the chain or reduce thinning".into(),
            ));
        }
        if self.adapt_window == 0 {
            return Err(Error::Config("adapt_window must be at least 1".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::Config("initial_step must be positive".into()));
        }
        for (name, step) in &self.step_overrides {
            if !(*step > 0.0) {
                return Err(Error::Config(format!(
                    "step override for block '{name}' must be positive, got {step}"
                )));
            }
        }
        Ok(())
    }
}
