//! Correlation and covariance builders for the five spatial models.
//!
//! All builders return unit-diagonal correlation matrices; covariance is the
//! correlation scaled by `sigma2`. The nonstationary models (M3, M5) use the
//! kernel-matrix closed form
//!
//! ```text
//! r(si, sj) = |S_i|^{1/4} |S_j|^{1/4} |(S_i + S_j)/2|^{-1/2}
//!             * rho_nu(2 sqrt(nu Q_ij)),
//! Q_ij = (si - sj)' ((S_i + S_j)/2)^{-1} (si - sj),
//! ```
//!
//! where `S_i` is the SPD kernel matrix at site i and `rho_nu` the Matern
//! correlation. The prefactor is 1 on the diagonal and at most 1 everywhere,
//! and equals the normalized overlap of elliptical Gaussian kernels with
//! covariance `S_i / 4` in the squared-exponential limit (checked by
//! quadrature in the acceptance suite). M4 instead discretizes the
//! convolution: correlations are normalized inner products of per-site
//! kernel weights over a fixed grid.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2};
use statrs::function::gamma::ln_gamma;

use crate::bessel::bessel_k;
use crate::error::{Error, Result};
use crate::geo::{lga_kernel, rotation, KernelMatrix, Site, WindVector};
use crate::linalg;
use crate::model::{Delta, LatentFields, ModelKind, ParameterState};

/// Dense symmetric covariance (or correlation) matrix.
///
/// Positive semidefiniteness is guaranteed by the builders up to rounding;
/// factorization goes through [`CovarianceMatrix::cholesky`], which applies
/// an escalating diagonal jitter (relative steps 1e-10 through 1e-6) before
/// giving up.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    m: DMatrix<f64>,
}

impl CovarianceMatrix {
    /// Wraps a matrix, validating squareness and symmetry.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::NotPositiveDefinite(format!(
                "covariance must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let scale = m.diagonal().amax().max(1e-300);
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale {
                    return Err(Error::NotPositiveDefinite(format!(
                        "covariance asymmetric at ({i}, {j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        let mut m = m;
        linalg::symmetrize(&mut m);
        Ok(CovarianceMatrix { m })
    }

    pub fn n(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    /// Scales every entry, e.g. correlation to covariance.
    pub fn scaled(&self, factor: f64) -> CovarianceMatrix {
        CovarianceMatrix { m: &self.m * factor }
    }

    /// Cholesky factorization under the jitter policy. Returns the factor
    /// and the jitter added (usually 0).
    pub fn cholesky(&self, context: &str) -> Result<(Cholesky<f64, Dyn>, f64)> {
        linalg::cholesky_with_jitter(&self.m, context)
    }
}

/// Matern correlation `rho_nu(t) = t^nu K_nu(t) / (2^{nu-1} Gamma(nu))`.
///
/// Equals 1 at t = 0 and decreases strictly to 0. `nu = 0.5` gives
/// `exp(-t)`.
pub fn matern_corr(t: f64, nu: f64) -> Result<f64> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::Domain(format!("matern smoothness must be positive, got {nu}")));
    }
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("matern argument must be nonnegative, got {t}")));
    }
    // rho -> 1 as t -> 0; below this threshold the correction is under 1e-7
    // for any nu >= 0.3.
    if t < 1e-12 {
        return Ok(1.0);
    }
    if t > 705.0 {
        return Ok(0.0); // K_nu underflows; the correlation is numerically 0
    }
    let ln_pref = -(nu - 1.0) * std::f64::consts::LN_2 - ln_gamma(nu);
    let k = bessel_k(nu, t)?;
    if k == 0.0 {
        return Ok(0.0);
    }
    // Assemble in log space so moderate t with large nu cannot overflow.
    let value = (ln_pref + nu * t.ln() + k.ln()).exp();
    Ok(value.clamp(0.0, 1.0))
}

/// Squared-exponential correlation `exp(-(d/phi)^2)`.
pub fn sq_exp_corr(d: f64, phi: f64) -> f64 {
    (-(d / phi) * (d / phi)).exp()
}

/// Exponential correlation `exp(-d/phi)`.
pub fn exp_corr(d: f64, phi: f64) -> f64 {
    (-d / phi).exp()
}

/// Kernel-averaged quadratic form `(si - sj)' ((S_i + S_j)/2)^{-1} (si - sj)`.
pub fn ns_quad_q(si: Site, sj: Site, ki: &KernelMatrix, kj: &KernelMatrix) -> Result<f64> {
    let pooled = 0.5 * (ki.matrix() + kj.matrix());
    let det = pooled[(0, 0)] * pooled[(1, 1)] - pooled[(0, 1)] * pooled[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::NotPositiveDefinite(format!(
            "pooled kernel matrix has nonpositive determinant {det}"
        )));
    }
    let d = si.vector() - sj.vector();
    // Closed-form 2x2 inverse applied to d.
    let inv_d = nalgebra::Vector2::new(
        (pooled[(1, 1)] * d.x - pooled[(0, 1)] * d.y) / det,
        (-pooled[(1, 0)] * d.x + pooled[(0, 0)] * d.y) / det,
    );
    Ok(d.dot(&inv_d).max(0.0))
}

/// Determinant prefactor `|S_i|^{1/4} |S_j|^{1/4} |(S_i + S_j)/2|^{-1/2}`.
///
/// Always in (0, 1], with equality exactly when the two kernels coincide.
pub fn ns_prefactor(ki: &KernelMatrix, kj: &KernelMatrix) -> f64 {
    let pooled = 0.5 * (ki.matrix() + kj.matrix());
    let det_pooled = pooled[(0, 0)] * pooled[(1, 1)] - pooled[(0, 1)] * pooled[(1, 0)];
    (ki.det() * kj.det()).powf(0.25) / det_pooled.sqrt()
}

/// Nonstationary Matern correlation from per-site kernel matrices. The
/// diagonal is exactly 1.
pub fn corr_ns_matern(sites: &[Site], kernels: &[KernelMatrix], nu: f64) -> Result<CovarianceMatrix> {
    if sites.len() != kernels.len() {
        return Err(Error::Config(format!(
            "{} kernel matrices for {} sites",
            kernels.len(),
            sites.len()
        )));
    }
    let n = sites.len();
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let q = ns_quad_q(sites[i], sites[j], &kernels[i], &kernels[j])?;
            let pref = ns_prefactor(&kernels[i], &kernels[j]);
            let r = pref * matern_corr(2.0 * (nu * q).sqrt(), nu)?;
            m[(i, j)] = r;
            m[(j, i)] = r;
        }
    }
    Ok(CovarianceMatrix { m })
}

/// Squared-exponential variant of the nonstationary correlation:
/// `prefactor * exp(-Q)`, the smooth limit of [`corr_ns_matern`] as the
/// smoothness grows. Equals the normalized overlap of Gaussian kernels with
/// covariance `S_i / 4`.
pub fn corr_ns_sq_exp(sites: &[Site], kernels: &[KernelMatrix]) -> Result<CovarianceMatrix> {
    if sites.len() != kernels.len() {
        return Err(Error::Config(format!(
            "{} kernel matrices for {} sites",
            kernels.len(),
            sites.len()
        )));
    }
    let n = sites.len();
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let q = ns_quad_q(sites[i], sites[j], &kernels[i], &kernels[j])?;
            let r = ns_prefactor(&kernels[i], &kernels[j]) * (-q).exp();
            m[(i, j)] = r;
            m[(j, i)] = r;
        }
    }
    Ok(CovarianceMatrix { m })
}

/// Isotropic Matern correlation with range `phi`.
pub fn corr_m1(sites: &[Site], phi: f64, nu: f64) -> Result<CovarianceMatrix> {
    if !(phi > 0.0) {
        return Err(Error::Domain(format!("range must be positive, got {phi}")));
    }
    let n = sites.len();
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let r = matern_corr(sites[i].dist(&sites[j]) / phi, nu)?;
            m[(i, j)] = r;
            m[(j, i)] = r;
        }
    }
    Ok(CovarianceMatrix { m })
}

/// Geometric anisotropic Matern correlation: argument
/// `sqrt(u' L u) / phi` with `L = R(theta) diag(lambda1, lambda2) R(theta)'`
/// and `u` the separation vector. At `lambda1 = lambda2 = 1` this is exactly
/// the isotropic model for any rotation.
pub fn corr_m2(
    sites: &[Site],
    phi: f64,
    nu: f64,
    theta: f64,
    lambda1: f64,
    lambda2: f64,
) -> Result<CovarianceMatrix> {
    if !(phi > 0.0 && lambda1 > 0.0 && lambda2 > 0.0) {
        return Err(Error::Domain(format!(
            "anisotropy parameters must be positive, got phi={phi}, lambda1={lambda1}, lambda2={lambda2}"
        )));
    }
    let r = rotation(theta);
    let l = r * Matrix2::new(lambda1, 0.0, 0.0, lambda2) * r.transpose();
    let n = sites.len();
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let u = sites[i].vector() - sites[j].vector();
            let t = (l * u).dot(&u).max(0.0).sqrt() / phi;
            let c = matern_corr(t, nu)?;
            m[(i, j)] = c;
            m[(j, i)] = c;
        }
    }
    Ok(CovarianceMatrix { m })
}

/// Wind-oriented nonstationary Matern correlation: each site's kernel
/// matrix is [`lga_kernel`] of its wind with shared squared ranges along and
/// across the wind. Invariant under flipping any wind.
pub fn corr_m3(
    sites: &[Site],
    winds: &[WindVector],
    nu: f64,
    lambda1_sq: f64,
    lambda2_sq: f64,
) -> Result<CovarianceMatrix> {
    if winds.len() != sites.len() {
        return Err(Error::Config(format!("{} winds for {} sites", winds.len(), sites.len())));
    }
    let kernels: Vec<KernelMatrix> = winds
        .iter()
        .map(|w| lga_kernel(*w, lambda1_sq, lambda2_sq))
        .collect::<Result<_>>()?;
    corr_ns_matern(sites, &kernels, nu)
}

/// Convolution grid: smoothing-kernel support points and the wind at each.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    points: Vec<Site>,
    winds: Vec<WindVector>,
}

impl GridSpec {
    /// Validates a nonempty grid with one wind per point and no duplicate
    /// points.
    pub fn new(points: Vec<Site>, winds: Vec<WindVector>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("convolution grid must contain at least one point".into()));
        }
        if winds.len() != points.len() {
            return Err(Error::Config(format!(
                "{} winds for {} grid points",
                winds.len(),
                points.len()
            )));
        }
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                if points[i] == points[j] {
                    return Err(Error::Config(format!(
                        "duplicate grid point at positions {i} and {j}: ({}, {})",
                        points[i].x, points[i].y
                    )));
                }
            }
        }
        Ok(GridSpec { points, winds })
    }

    pub fn points(&self) -> &[Site] {
        &self.points
    }

    pub fn winds(&self) -> &[WindVector] {
        &self.winds
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Smoothing-kernel weight of grid point `h` for site `s`:
/// `exp(-||s - h|| / (phi1 + phi2 ||proj||))` where `proj` is the mean wind
/// at `s` and `h` projected on the separation direction, and exactly 1 when
/// `s == h`. Winds blowing along the line between the points widen the
/// kernel; cross winds and opposing winds leave the base range `phi1`.
pub fn alpha(s: Site, h: Site, ws: WindVector, wh: WindVector, phi1: f64, phi2: f64) -> Result<f64> {
    if !(phi1 > 0.0) || phi2 < 0.0 {
        return Err(Error::Domain(format!(
            "kernel ranges must satisfy phi1 > 0, phi2 >= 0, got ({phi1}, {phi2})"
        )));
    }
    if s == h {
        return Ok(1.0);
    }
    let (_, proj_norm) = crate::geo::wind_projection(s, h, ws, wh)?;
    let range = phi1 + phi2 * proj_norm;
    Ok((-s.dist(&h) / range).exp())
}

/// Discretized process-convolution correlation. Entry (i, j) is the inner
/// product of the grid-normalized kernel weight vectors of sites i and j, so
/// the matrix is a Gram matrix: positive semidefinite with unit diagonal by
/// construction.
pub fn corr_m4(
    sites: &[Site],
    winds: &[WindVector],
    grid: &GridSpec,
    phi1: f64,
    phi2: f64,
) -> Result<CovarianceMatrix> {
    if winds.len() != sites.len() {
        return Err(Error::Config(format!("{} winds for {} sites", winds.len(), sites.len())));
    }
    let n = sites.len();
    let m = grid.len();
    let mut weights = DMatrix::zeros(n, m);
    for i in 0..n {
        for l in 0..m {
            weights[(i, l)] = alpha(sites[i], grid.points[l], winds[i], grid.winds[l], phi1, phi2)?;
        }
        let norm = weights.row(i).norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "site {i} at ({}, {}) has zero kernel mass on the convolution grid; \
                 enlarge phi1 or refine the grid",
                sites[i].x, sites[i].y
            )));
        }
        let scale = 1.0 / norm;
        for l in 0..m {
            weights[(i, l)] *= scale;
        }
    }
    let mut corr = &weights * weights.transpose();
    // Rows are unit vectors; pin the diagonal to exactly 1.
    for i in 0..n {
        corr[(i, i)] = 1.0;
    }
    linalg::symmetrize(&mut corr);
    Ok(CovarianceMatrix { m: corr })
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Kernel matrices implied by latent fields: eigenvalues
/// `exp(log lambda1), exp(log lambda2)` rotated by
/// `theta = pi/2 * Phi(gamma)`.
pub fn m5_sigma_fields(fields: &LatentFields) -> Result<Vec<KernelMatrix>> {
    let n = fields.n_sites();
    fields.validate(n)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let theta = std::f64::consts::FRAC_PI_2 * std_normal_cdf(fields.gamma[i]);
        out.push(KernelMatrix::from_axes(
            theta,
            fields.log_lambda1[i].exp(),
            fields.log_lambda2[i].exp(),
        )?);
    }
    Ok(out)
}

/// Conditional means of the three latent fields at `targets`, kriged from
/// their values at `anchors` under the latent Gaussian-process priors. At an
/// anchor point this reproduces the anchor value.
pub fn kriged_latent(fields: &LatentFields, anchors: &[Site], targets: &[Site]) -> Result<LatentFields> {
    let n = anchors.len();
    fields.validate(n)?;
    let m = targets.len();
    let krige = |values: &[f64], mu: f64, phi: f64| -> Result<Vec<f64>> {
        let mut gram = DMatrix::identity(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let r = sq_exp_corr(anchors[i].dist(&anchors[j]), phi);
                gram[(i, j)] = r;
                gram[(j, i)] = r;
            }
        }
        let (chol, _) = linalg::cholesky_with_jitter(&gram, "latent field kriging")?;
        let centered = DVector::from_iterator(n, values.iter().map(|v| v - mu));
        let weights = chol.solve(&centered);
        let mut out = Vec::with_capacity(m);
        for t in targets {
            let cross = DVector::from_iterator(n, anchors.iter().map(|a| sq_exp_corr(t.dist(a), phi)));
            out.push(mu + cross.dot(&weights));
        }
        Ok(out)
    };
    Ok(LatentFields {
        log_lambda1: krige(&fields.log_lambda1, fields.mu_lambda1, fields.phi_lambda)?,
        log_lambda2: krige(&fields.log_lambda2, fields.mu_lambda2, fields.phi_lambda)?,
        gamma: krige(&fields.gamma, fields.mu_gamma, fields.phi_gamma)?,
        ..fields.clone()
    })
}

/// Everything beyond the parameter state needed to evaluate a model's
/// correlation at arbitrary points: the smoothness, the convolution grid
/// (M4), and the sites anchoring the latent fields (M5).
#[derive(Debug, Clone, Copy)]
pub struct CovContext<'a> {
    pub kind: ModelKind,
    pub nu: f64,
    pub conv_grid: Option<&'a GridSpec>,
    pub latent_anchors: Option<&'a [Site]>,
}

impl<'a> CovContext<'a> {
    pub fn new(kind: ModelKind, nu: f64) -> Self {
        CovContext { kind, nu, conv_grid: None, latent_anchors: None }
    }

    pub fn with_conv_grid(mut self, grid: &'a GridSpec) -> Self {
        self.conv_grid = Some(grid);
        self
    }

    pub fn with_latent_anchors(mut self, anchors: &'a [Site]) -> Self {
        self.latent_anchors = Some(anchors);
        self
    }

    /// Unit-diagonal correlation over `sites`. `winds` must cover every site
    /// for M3 and M4 and may be `None` otherwise. For M5, sites that are not
    /// latent anchors get kriged latent values.
    pub fn correlation(
        &self,
        delta: &Delta,
        sites: &[Site],
        winds: Option<&[WindVector]>,
    ) -> Result<CovarianceMatrix> {
        if delta.kind() != self.kind {
            return Err(Error::Config(format!(
                "parameter block is for {} but the context expects {}",
                delta.kind(),
                self.kind
            )));
        }
        let winds_for = |kind: ModelKind| -> Result<&[WindVector]> {
            let w = winds.ok_or_else(|| Error::Config(format!("{kind} requires winds at every site")))?;
            if w.len() != sites.len() {
                return Err(Error::Config(format!("{} winds for {} sites", w.len(), sites.len())));
            }
            Ok(w)
        };
        match delta {
            Delta::M1 { phi } => corr_m1(sites, *phi, self.nu),
            Delta::M2 { phi, theta, lambda1, lambda2 } => {
                corr_m2(sites, *phi, self.nu, *theta, *lambda1, *lambda2)
            }
            Delta::M3 { lambda1_sq, lambda2_sq } => {
                corr_m3(sites, winds_for(ModelKind::M3)?, self.nu, *lambda1_sq, *lambda2_sq)
            }
            Delta::M4 { phi1, phi2 } => {
                let grid = self
                    .conv_grid
                    .ok_or_else(|| Error::Config("M4 requires a convolution grid".into()))?;
                corr_m4(sites, winds_for(ModelKind::M4)?, grid, *phi1, *phi2)
            }
            Delta::M5(fields) => {
                let anchors = self
                    .latent_anchors
                    .ok_or_else(|| Error::Config("M5 requires the latent anchor sites".into()))?;
                let local = latent_values_at(fields, anchors, sites)?;
                let kernels = m5_sigma_fields(&local)?;
                corr_ns_matern(sites, &kernels, self.nu)
            }
        }
    }
}

/// Latent field values at `sites`: anchor values where a site coincides with
/// an anchor, kriged conditional means elsewhere.
pub fn latent_values_at(fields: &LatentFields, anchors: &[Site], sites: &[Site]) -> Result<LatentFields> {
    fields.validate(anchors.len())?;
    let index_of = |s: &Site| anchors.iter().position(|a| a == s);
    let mut extra = Vec::new();
    for s in sites {
        if index_of(s).is_none() {
            extra.push(*s);
        }
    }
    let kriged = if extra.is_empty() { None } else { Some(kriged_latent(fields, anchors, &extra)?) };
    let mut out = LatentFields {
        log_lambda1: Vec::with_capacity(sites.len()),
        log_lambda2: Vec::with_capacity(sites.len()),
        gamma: Vec::with_capacity(sites.len()),
        ..fields.clone()
    };
    let mut next_extra = 0;
    for s in sites {
        match index_of(s) {
            Some(k) => {
                out.log_lambda1.push(fields.log_lambda1[k]);
                out.log_lambda2.push(fields.log_lambda2[k]);
                out.gamma.push(fields.gamma[k]);
            }
            None => {
                let kr = kriged.as_ref().unwrap();
                out.log_lambda1.push(kr.log_lambda1[next_extra]);
                out.log_lambda2.push(kr.log_lambda2[next_extra]);
                out.gamma.push(kr.gamma[next_extra]);
                next_extra += 1;
            }
        }
    }
    Ok(out)
}

/// Covariance `sigma2 * correlation` for a full parameter state.
pub fn build_covariance(
    ctx: &CovContext,
    state: &ParameterState,
    sites: &[Site],
    winds: Option<&[WindVector]>,
) -> Result<CovarianceMatrix> {
    let sigma2 = state.sigma2();
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::Domain(format!(
            "process variance must be positive and finite, got sigma2 = {sigma2}"
        )));
    }
    Ok(ctx.correlation(&state.delta, sites, winds)?.scaled(sigma2))
}
