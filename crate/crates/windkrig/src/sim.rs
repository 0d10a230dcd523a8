//! Forward simulation and visualization surfaces.
//!
//! Realizations are exact draws from the joint Gaussian law at the requested
//! sites: the covariance is factorized once and each realization applies the
//! factor to fresh standard normals. Realization `r` always uses stream
//! `r + 1` of the seeded generator, so the first draws of a run do not
//! depend on how many were requested.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::covariance::{build_covariance, latent_values_at, m5_sigma_fields, CovContext};
use crate::error::{Error, Result};
use crate::geo::{lga_kernel, KernelMatrix, Site, WindVector};
use crate::linalg;
use crate::model::{Delta, LatentFields, ParameterState};

/// What to simulate.
#[derive(Debug, Clone)]
pub struct SimulationRequest<'a> {
    pub sites: &'a [Site],
    /// Winds at the sites; required by M3 and M4.
    pub winds: Option<&'a [WindVector]>,
    pub state: &'a ParameterState,
    /// Mean design at the sites; defaults to an intercept column and is
    /// required when the state has more than one coefficient.
    pub design: Option<&'a DMatrix<f64>>,
    pub realizations: usize,
    pub seed: u64,
    /// Add measurement noise on top of the smooth surface.
    pub include_nugget: bool,
    /// For M5: draw the latent fields at `sites` from their Gaussian-process
    /// priors (using the state's hyperparameters) instead of taking the
    /// state's field values, which must then match `sites`.
    pub draw_latent: bool,
}

impl<'a> SimulationRequest<'a> {
    pub fn new(sites: &'a [Site], state: &'a ParameterState) -> Self {
        SimulationRequest {
            sites,
            winds: None,
            state,
            design: None,
            realizations: 1,
            seed: 0,
            include_nugget: true,
            draw_latent: false,
        }
    }
}

/// Simulated field values, realization-major.
#[derive(Debug, Clone)]
pub struct FieldRealizations {
    pub sites: Vec<Site>,
    pub values: Vec<Vec<f64>>,
    /// The latent fields the realizations were built from (M5 only).
    pub latent: Option<LatentFields>,
}

/// Draws each latent field at `sites` from its Gaussian-process prior, using
/// the hyperparameters carried by `template`.
pub fn draw_latent_fields<R: Rng + ?Sized>(
    template: &LatentFields,
    sites: &[Site],
    rng: &mut R,
) -> Result<LatentFields> {
    let n = sites.len();
    if n == 0 {
        return Err(Error::Config("latent fields need at least one site".into()));
    }
    let mut draw = |mu: f64, sigma2: f64, phi: f64| -> Result<Vec<f64>> {
        if !(sigma2 > 0.0) || !(phi > 0.0) {
            return Err(Error::Domain(format!(
                "latent field hyperparameters must be positive, got sigma2 = {sigma2}, phi = {phi}"
            )));
        }
        let mut gram = DMatrix::identity(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let r = crate::covariance::sq_exp_corr(sites[i].dist(&sites[j]), phi);
                gram[(i, j)] = r;
                gram[(j, i)] = r;
            }
        }
        let (chol, _) = linalg::cholesky_with_jitter(&gram, "latent field draw")?;
        let xi = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = chol.l() * xi * sigma2.sqrt();
        Ok(x.iter().map(|v| mu + v).collect())
    };
    Ok(LatentFields {
        log_lambda1: draw(template.mu_lambda1, template.sigma2_lambda, template.phi_lambda)?,
        log_lambda2: draw(template.mu_lambda2, template.sigma2_lambda, template.phi_lambda)?,
        gamma: draw(template.mu_gamma, template.sigma2_gamma, template.phi_gamma)?,
        ..template.clone()
    })
}

/// Simulates realizations of the field at the requested sites.
pub fn simulate_field(ctx: &CovContext, req: &SimulationRequest) -> Result<FieldRealizations> {
    let n = req.sites.len();
    if n == 0 {
        return Err(Error::Config("simulation needs at least one site".into()));
    }
    if req.realizations == 0 {
        return Err(Error::Config("requested zero realizations".into()));
    }
    let p = req.state.beta.len();
    let mean = match req.design {
        Some(d) => {
            if d.nrows() != n || d.ncols() != p {
                return Err(Error::Config(format!(
                    "design is {}x{} but {n}x{p} is required",
                    d.nrows(),
                    d.ncols()
                )));
            }
            d * &req.state.beta
        }
        None if p == 1 => DVector::from_element(n, req.state.beta[0]),
        None => {
            return Err(Error::Config(
                "the state has covariates; supply a design matrix for the simulation sites".into(),
            ))
        }
    };

    // Resolve the latent fields first so the effective state matches the
    // simulation sites; their draw uses stream 0 of the seed.
    let mut state = req.state.clone();
    let mut ctx = *ctx;
    let mut latent = None;
    if let Delta::M5(f) = &req.state.delta {
        let fields = if req.draw_latent {
            let mut rng = ChaCha20Rng::seed_from_u64(req.seed);
            rng.set_stream(0);
            draw_latent_fields(f, req.sites, &mut rng)?
        } else {
            f.validate(n)?;
            f.clone()
        };
        latent = Some(fields.clone());
        state.delta = Delta::M5(fields);
        ctx = ctx.with_latent_anchors(req.sites);
    }

    let mut cov = build_covariance(&ctx, &state, req.sites, req.winds)?.into_matrix();
    if req.include_nugget {
        for i in 0..n {
            cov[(i, i)] += state.tau2;
        }
    }
    let (chol, _) = linalg::cholesky_with_jitter(&cov, "simulation covariance")?;
    let l = chol.l();

    let mut values = Vec::with_capacity(req.realizations);
    for r in 0..req.realizations {
        let mut rng = ChaCha20Rng::seed_from_u64(req.seed);
        rng.set_stream(1 + r as u64);
        let xi = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let z = &mean + &l * xi;
        values.push(z.iter().cloned().collect());
    }
    Ok(FieldRealizations { sites: req.sites.to_vec(), values, latent })
}

/// Correlation between one reference site and each target under `delta`.
///
/// `reference_wind` is required by M3 and M4, as are `target_winds` covering
/// every target.
pub fn correlation_map(
    ctx: &CovContext,
    delta: &Delta,
    reference: Site,
    reference_wind: Option<WindVector>,
    targets: &[Site],
    target_winds: Option<&[WindVector]>,
) -> Result<Vec<f64>> {
    if targets.is_empty() {
        return Err(Error::Config("correlation map needs target sites".into()));
    }
    let mut sites = Vec::with_capacity(targets.len() + 1);
    sites.push(reference);
    sites.extend_from_slice(targets);
    let winds: Option<Vec<WindVector>> = if ctx.kind.needs_wind() {
        let rw = reference_wind.ok_or_else(|| {
            Error::Config(format!("{} correlation maps need a wind at the reference site", ctx.kind))
        })?;
        let tw = target_winds.ok_or_else(|| {
            Error::Config(format!("{} correlation maps need winds at the target sites", ctx.kind))
        })?;
        if tw.len() != targets.len() {
            return Err(Error::Config(format!("{} winds for {} targets", tw.len(), targets.len())));
        }
        let mut w = Vec::with_capacity(targets.len() + 1);
        w.push(rw);
        w.extend_from_slice(tw);
        Some(w)
    } else {
        None
    };
    let corr = ctx.correlation(delta, &sites, winds.as_deref())?;
    Ok((0..targets.len()).map(|k| corr.get(0, k + 1)).collect())
}

/// The local correlation kernel at one site, summarized as an ellipse.
#[derive(Debug, Clone)]
pub struct EllipseRow {
    pub site: Site,
    /// Major semi-axis.
    pub a1: f64,
    /// Minor semi-axis.
    pub a2: f64,
    /// Major axis angle in `[0, pi)`.
    pub orientation: f64,
}

/// Per-site kernel ellipses for the models that carry a local kernel, with
/// semi-axes multiplied by `scale` for plotting. M3 yields wind-oriented
/// ellipses and M5 the latent kernels (kriged off the anchor sites where
/// needed). The stationary models and M4 have no per-site kernel and are an
/// error.
pub fn ellipse_field(
    ctx: &CovContext,
    delta: &Delta,
    sites: &[Site],
    winds: Option<&[WindVector]>,
    scale: f64,
) -> Result<Vec<EllipseRow>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Domain(format!("ellipse scale must be positive, got {scale}")));
    }
    let kernels: Vec<KernelMatrix> = match delta {
        Delta::M1 { .. } | Delta::M2 { .. } => {
            return Err(Error::Config(format!(
                "{} is stationary; only the wind-oriented and latent-kernel models \
                 have a per-site ellipse field",
                delta.kind()
            )))
        }
        Delta::M3 { lambda1_sq, lambda2_sq } => {
            let winds = winds.ok_or_else(|| {
                Error::Config("M3 ellipses need a wind at every site".into())
            })?;
            if winds.len() != sites.len() {
                return Err(Error::Config(format!(
                    "{} winds for {} sites",
                    winds.len(),
                    sites.len()
                )));
            }
            winds
                .iter()
                .map(|w| lga_kernel(*w, *lambda1_sq, *lambda2_sq))
                .collect::<Result<_>>()?
        }
        Delta::M4 { .. } => {
            return Err(Error::Config(
                "M4 builds correlation from convolution weights, not local kernels; \
                 it has no ellipse field"
                    .into(),
            ))
        }
        Delta::M5(fields) => {
            let anchors = ctx
                .latent_anchors
                .ok_or_else(|| Error::Config("M5 ellipses need the latent anchor sites".into()))?;
            let local = latent_values_at(fields, anchors, sites)?;
            m5_sigma_fields(&local)?
        }
    };
    Ok(sites
        .iter()
        .zip(&kernels)
        .map(|(site, k)| {
            let (a1, a2, orientation) = k.ellipse();
            EllipseRow { site: *site, a1: a1 * scale, a2: a2 * scale, orientation }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{matern_corr, GridSpec};
    use crate::model::ModelKind;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn m1_state(phi: f64) -> ParameterState {
        ParameterState {
            beta: DVector::from_element(1, 1.5),
            tau2: 0.5,
            eta: 0.25, // sigma2 = 2
            delta: Delta::M1 { phi },
        }
    }

    #[test]
    fn sample_moments_match_the_target_law() {
        let sites = vec![Site::new(0.0, 0.0), Site::new(1.0, 0.0), Site::new(0.0, 2.0)];
        let state = m1_state(1.5);
        let ctx = CovContext::new(ModelKind::M1, 1.0);
        let mut req = SimulationRequest::new(&sites, &state);
        req.realizations = 30_000;
        req.seed = 4;
        let out = simulate_field(&ctx, &req).unwrap();

        let m = out.values.len() as f64;
        let mut mean = [0.0f64; 3];
        for v in &out.values {
            for i in 0..3 {
                mean[i] += v[i] / m;
            }
        }
        let mut cov = [[0.0f64; 3]; 3];
        for v in &out.values {
            for i in 0..3 {
                for j in 0..3 {
                    cov[i][j] += (v[i] - mean[i]) * (v[j] - mean[j]) / m;
                }
            }
        }
        let want = |i: usize, j: usize| {
            let d = sites[i].dist(&sites[j]);
            let c = 2.0 * matern_corr(d / 1.5, 1.0).unwrap();
            if i == j {
                c + 0.5
            } else {
                c
            }
        };
        for i in 0..3 {
            assert_relative_eq!(mean[i], 1.5, epsilon = 0.05);
            for j in 0..3 {
                assert_relative_eq!(cov[i][j], want(i, j), epsilon = 0.08);
            }
        }
    }

    #[test]
    fn realizations_are_prefix_stable_across_request_sizes() {
        let sites = vec![Site::new(0.0, 0.0), Site::new(1.0, 1.0)];
        let state = m1_state(1.0);
        let ctx = CovContext::new(ModelKind::M1, 1.0);
        let mut small = SimulationRequest::new(&sites, &state);
        small.realizations = 3;
        small.seed = 9;
        let mut large = small.clone();
        large.realizations = 8;
        let a = simulate_field(&ctx, &small).unwrap();
        let b = simulate_field(&ctx, &large).unwrap();
        assert_eq!(a.values, b.values[..3].to_vec());
    }

    #[test]
    fn latent_fields_are_drawn_reproducibly_for_m5() {
        let sites: Vec<Site> = (0..6)
            .map(|k| Site::new((k as f64 * 1.1).sin() * 3.0, (k as f64 * 0.7).cos() * 3.0))
            .collect();
        let mut template = LatentFields::constant(1, 0.0, 0.0, 0.0);
        template.mu_lambda1 = 0.4;
        template.mu_lambda2 = -0.3;
        template.sigma2_lambda = 0.6;
        template.sigma2_gamma = 0.9;
        template.phi_lambda = 2.0;
        template.phi_gamma = 2.0;
        let state = ParameterState {
            beta: DVector::from_element(1, 0.0),
            tau2: 0.1,
            eta: 0.1,
            delta: Delta::M5(template),
        };
        let ctx = CovContext::new(ModelKind::M5, 1.0);
        let mut req = SimulationRequest::new(&sites, &state);
        req.realizations = 2;
        req.seed = 21;
        req.draw_latent = true;
        let a = simulate_field(&ctx, &req).unwrap();
        let b = simulate_field(&ctx, &req).unwrap();
        assert_eq!(a.values, b.values);
        let la = a.latent.unwrap();
        assert_eq!(la.n_sites(), 6);
        assert_eq!(la, b.latent.unwrap());
        // The draw actually varies over sites.
        let spread = la.gamma.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - la.gamma.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread > 1e-3, "latent draw is flat: {:?}", la.gamma);
    }

    #[test]
    fn correlation_map_reduces_to_the_pair_correlation() {
        let reference = Site::new(0.0, 0.0);
        let targets: Vec<Site> =
            (1..6).map(|k| Site::new(k as f64 * 0.8, -(k as f64) * 0.3)).collect();
        let ctx = CovContext::new(ModelKind::M1, 1.0);
        let delta = Delta::M1 { phi: 1.2 };
        let map = correlation_map(&ctx, &delta, reference, None, &targets, None).unwrap();
        for (t, got) in targets.iter().zip(&map) {
            let want = matern_corr(reference.dist(t) / 1.2, 1.0).unwrap();
            assert_relative_eq!(*got, want, epsilon = 1e-12);
        }

        // A target on the reference itself has correlation 1.
        let map = correlation_map(&ctx, &delta, reference, None, &[reference], None).unwrap();
        assert_eq!(map[0], 1.0);
    }

    #[test]
    fn a_vanishing_process_variance_leaves_white_noise() {
        // sigma2 = tau2 / eta ~ 0 with tau2 = 1: realizations are iid noise,
        // so off-diagonal sample correlations stay near zero.
        let sites = vec![Site::new(0.0, 0.0), Site::new(0.3, 0.0), Site::new(0.0, 0.3)];
        let state = ParameterState {
            beta: DVector::from_element(1, 0.0),
            tau2: 1.0,
            eta: 1e12,
            delta: Delta::M1 { phi: 5.0 },
        };
        let ctx = CovContext::new(ModelKind::M1, 1.0);
        let mut req = SimulationRequest::new(&sites, &state);
        req.realizations = 10_000;
        req.seed = 11;
        let out = simulate_field(&ctx, &req).unwrap();

        let m = out.values.len() as f64;
        let mut mean = [0.0f64; 3];
        for v in &out.values {
            for i in 0..3 {
                mean[i] += v[i] / m;
            }
        }
        let mut cov = [[0.0f64; 3]; 3];
        for v in &out.values {
            for i in 0..3 {
                for j in 0..3 {
                    cov[i][j] += (v[i] - mean[i]) * (v[j] - mean[j]) / m;
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let r = cov[i][j] / (cov[i][i] * cov[j][j]).sqrt();
                    assert!(r.abs() < 0.05, "sites {i},{j}: residual correlation {r}");
                }
            }
        }
    }

    #[test]
    fn convolution_correlation_stretches_along_the_wind() {
        // Uniform easterly wind: correlation reaches farther downwind than
        // crosswind at the same separation.
        let east = WindVector::new(1.0, 0.0).unwrap();
        let mut grid_pts = Vec::new();
        for i in -3..=3 {
            for j in -3..=3 {
                grid_pts.push(Site::new(i as f64, j as f64));
            }
        }
        let winds = vec![east; grid_pts.len()];
        let grid = GridSpec::new(grid_pts, winds).unwrap();
        let ctx = CovContext::new(ModelKind::M4, 1.0).with_conv_grid(&grid);
        let delta = Delta::M4 { phi1: 0.8, phi2: 4.0 };
        let reference = Site::new(0.0, 0.0);
        let targets = [Site::new(1.5, 0.0), Site::new(0.0, 1.5)];
        let target_winds = [east, east];
        let map = correlation_map(&ctx, &delta, reference, Some(east), &targets, Some(&target_winds))
            .unwrap();
        assert!(
            map[0] > map[1] + 1e-6,
            "downwind {} should exceed crosswind {}",
            map[0],
            map[1]
        );
    }

    #[test]
    fn correlation_maps_are_symmetric_in_reference_and_target() {
        let a = Site::new(0.0, 0.0);
        let b = Site::new(1.1, 0.7);
        let wa = WindVector::from_angle(0.3);
        let wb = WindVector::from_angle(1.2);
        let ctx = CovContext::new(ModelKind::M3, 1.0);
        let delta = Delta::M3 { lambda1_sq: 3.0, lambda2_sq: 0.8 };
        let fwd = correlation_map(&ctx, &delta, a, Some(wa), &[b], Some(&[wb])).unwrap();
        let rev = correlation_map(&ctx, &delta, b, Some(wb), &[a], Some(&[wa])).unwrap();
        assert_relative_eq!(fwd[0], rev[0], epsilon = 1e-12);
    }

    #[test]
    fn ellipses_exist_only_for_per_site_kernel_models() {
        let sites = vec![Site::new(0.0, 0.0), Site::new(1.0, 1.0)];

        // M3: major axis along the wind when lambda1 > lambda2.
        let winds = vec![WindVector::from_angle(0.4), WindVector::from_angle(2.0)];
        let ctx3 = CovContext::new(ModelKind::M3, 1.0);
        let rows = ellipse_field(
            &ctx3,
            &Delta::M3 { lambda1_sq: 4.0, lambda2_sq: 1.0 },
            &sites,
            Some(&winds),
            1.0,
        )
        .unwrap();
        assert_relative_eq!(rows[0].a1, 2.0, epsilon = 1e-12);
        assert_relative_eq!(rows[0].a2, 1.0, epsilon = 1e-12);
        assert_relative_eq!(rows[0].orientation, 0.4, epsilon = 1e-12);
        // The second wind points into the upper-left quadrant; the axis
        // representative keeps the same line.
        assert_relative_eq!(rows[1].orientation, 2.0, epsilon = 1e-12);

        // Scaling multiplies both semi-axes.
        let half = ellipse_field(
            &ctx3,
            &Delta::M3 { lambda1_sq: 4.0, lambda2_sq: 1.0 },
            &sites,
            Some(&winds),
            0.5,
        )
        .unwrap();
        assert_relative_eq!(half[0].a1, 1.0, epsilon = 1e-12);
        assert_relative_eq!(half[0].a2, 0.5, epsilon = 1e-12);

        // Stationary models and the convolution model have no kernel field.
        let ctx1 = CovContext::new(ModelKind::M1, 1.0);
        assert!(ellipse_field(&ctx1, &Delta::M1 { phi: 2.0 }, &sites, None, 1.0).is_err());
        let ctx2 = CovContext::new(ModelKind::M2, 1.0);
        let m2 = Delta::M2 { phi: 2.0, theta: 0.3, lambda1: 1.5, lambda2: 0.5 };
        assert!(ellipse_field(&ctx2, &m2, &sites, None, 1.0).is_err());
        let ctx4 = CovContext::new(ModelKind::M4, 1.0);
        assert!(ellipse_field(&ctx4, &Delta::M4 { phi1: 1.0, phi2: 1.0 }, &sites, Some(&winds), 1.0)
            .is_err());
    }

    #[test]
    fn m5_ellipses_use_the_latent_kernels() {
        let sites = vec![Site::new(0.0, 0.0), Site::new(2.0, 0.0)];
        let mut fields = LatentFields::constant(2, (4.0f64).ln(), 0.0, 0.0);
        fields.log_lambda1 = vec![(4.0f64).ln(), (9.0f64).ln()];
        fields.log_lambda2 = vec![0.0, 0.0];
        let delta = Delta::M5(fields);
        let ctx = CovContext::new(ModelKind::M5, 1.0).with_latent_anchors(&sites);
        let rows = ellipse_field(&ctx, &delta, &sites, None, 1.0).unwrap();
        assert_relative_eq!(rows[0].a1, 2.0, epsilon = 1e-12);
        assert_relative_eq!(rows[1].a1, 3.0, epsilon = 1e-12);
        // gamma = 0 puts the major axis at pi/4.
        assert_relative_eq!(rows[0].orientation, std::f64::consts::FRAC_PI_4, epsilon = 1e-12);
    }
}
