//! The `windkrig` command-line pipeline.
//!
//! Five subcommands cover the workflow end to end: `fit` samples a model
//! posterior, `predict` summarizes the predictive surface of a finished fit,
//! `compare` scores fitted models side by side, `simulate` draws fields from
//! a fixed parameter state, and `wind-interp` fills in wind directions at
//! unobserved locations. All outputs are deterministic given the seed, so
//! repeating a command reproduces its files byte for byte.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use crate::covariance::{CovContext, GridSpec};
use crate::error::{Error, Result};
use crate::geo::{Site, WindVector};
use crate::inference::{default_init, run_chain, ChainSetup, PosteriorSamples};
use crate::io::{
    correlation_map_csv, criteria_csv, ellipses_csv, latent_csv, make_grid, predictions_csv,
    read_samples, samples_csv, realizations_csv, winds_csv, Bbox, ConvGridConfig, CoordSystem,
    Dataset, Manifest, MeanTrend, Projection, RunConfig,
};
use crate::model::{
    sq_exp_practical_range_to_phi, Delta, LatentFields, ModelKind, ObservationModel,
    ParameterState,
};
use crate::predict::{interp_wind, predict, predictive_log_likelihood, PredictionSpec};
use crate::selection::evaluate_model;
use crate::sim::{correlation_map, ellipse_field, simulate_field, SimulationRequest};

#[derive(Parser, Debug)]
#[command(name = "windkrig", version, about = "Wind-informed spatial Gaussian process models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a model posterior and write the draws plus a run manifest.
    Fit(FitArgs),
    /// Summarize the posterior predictive surface of a finished fit.
    Predict(PredictArgs),
    /// Score fitted models side by side on the same data.
    Compare(CompareArgs),
    /// Draw field realizations and summary surfaces from a fixed state.
    Simulate(SimulateArgs),
    /// Interpolate station winds onto new locations.
    WindInterp(WindInterpArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Run configuration file; reference defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Station table (site_id,x,y,value,u,v).
    #[arg(long)]
    data: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured model.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    /// The station table the model was fitted on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Target table; defaults to a grid over the data's bounding box.
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Grid dimensions as NXxNY when no target table is given.
    #[arg(long)]
    grid: Option<String>,
    /// Grid bounding box as x0,y0,x1,y1 in dataset coordinates.
    #[arg(long)]
    bbox: Option<String>,
    /// Outward padding applied to the grid bounding box.
    #[arg(long, default_value_t = 0.0)]
    pad: f64,
    /// Predict the noise-free latent surface instead of the observable.
    #[arg(long)]
    latent: bool,
    /// Simulated values per retained draw feeding the interval estimates.
    #[arg(long, default_value_t = 1)]
    draws: usize,
    /// Overrides the prediction seed (defaults to the fit's seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Two or more directories written by `fit`.
    #[arg(long, required = true, num_args = 1..)]
    fits: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Predictive-loss weight; defaults to the first fit's configured value.
    #[arg(long)]
    k: Option<f64>,
    /// Seed for replicate draws; defaults to the first fit's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Run configuration carrying the model and `[init]` parameter values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Station table supplying sites and winds.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured realization count.
    #[arg(long)]
    realizations: Option<usize>,
    /// Simulate on an NXxNY grid instead of the data sites.
    #[arg(long)]
    grid: Option<String>,
    /// Grid bounding box as x0,y0,x1,y1 in dataset coordinates.
    #[arg(long)]
    bbox: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pad: f64,
    /// Correlation-map reference point as x,y; defaults to the domain center.
    #[arg(long)]
    reference: Option<String>,
    /// Scale factor for the plotted kernel ellipse semi-axes.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

#[derive(Args, Debug)]
struct WindInterpArgs {
    /// Station table supplying the observed wind field.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Target table; defaults to a grid over the data's bounding box.
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    bbox: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pad: f64,
    /// Interpretation of the x/y columns: planar or lonlat.
    #[arg(long, default_value = "planar")]
    coords: String,
}

/// Runs the CLI on explicit arguments; `main` passes `std::env::args_os()`.
/// Returns `Ok` for `--help` and `--version` as well as successful commands.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    use clap::error::ErrorKind;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::WindInterp(args) => cmd_wind_interp(args),
    }
}

fn load_config(path: Option<&Path>, model: Option<ModelKind>, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default_for(model.unwrap_or(ModelKind::M1)),
    };
    if let Some(kind) = model {
        config.model = kind;
    }
    if let Some(seed) = seed {
        config.chain.seed = seed;
    }
    Ok(config)
}

/// Everything a fitted (or to-be-fitted) model needs, derived from one
/// configuration and one dataset.
struct Prepared {
    projection: Projection,
    /// The full dataset in working (projected) coordinates.
    dataset: Dataset,
    /// Observed rows held out of the fit for out-of-sample scoring.
    holdout: Dataset,
    data: ObservationModel,
    /// Kernel grid for the convolution model.
    conv: Option<GridSpec>,
}

fn prepare(config: &RunConfig, raw: &Dataset) -> Result<Prepared> {
    let projection = Projection::fit(config.coords, &raw.sites())?;
    let dataset = raw.project(&projection);
    let observed = dataset.observed();
    if observed.n() == 0 {
        return Err(Error::Dataset("dataset has no rows with a value to fit".into()));
    }
    let (fit, holdout) = observed.split_holdout(&config.holdout)?;
    let sites = fit.sites();
    let winds = if config.model.needs_wind() {
        Some(winds_at(&[&dataset], &sites)?)
    } else {
        fit.winds()
    };
    let z = DVector::from_iterator(
        fit.n(),
        fit.rows.iter().map(|r| r.value.expect("observed rows carry values")),
    );
    let data =
        ObservationModel::new(z, config.mean_trend.design(&sites), sites.clone(), winds.clone())?;
    let conv = if config.model == ModelKind::M4 {
        let winds = winds.expect("M4 winds resolved above");
        Some(match config.conv_grid {
            ConvGridConfig::Sites => GridSpec::new(sites, winds)?,
            ConvGridConfig::Regular { nx, ny, pad } => {
                let bbox = Bbox::of(&sites)?.pad(pad);
                let points = make_grid(&bbox, nx, ny)?;
                let grid_winds = winds_at(&[&dataset], &points)?;
                GridSpec::new(points, grid_winds)?
            }
        })
    } else {
        None
    };
    Ok(Prepared { projection, dataset, holdout, data, conv })
}

fn base_ctx<'a>(config: &RunConfig, prepared: &'a Prepared) -> CovContext<'a> {
    let mut ctx = CovContext::new(config.model, config.nu);
    if let Some(grid) = &prepared.conv {
        ctx = ctx.with_conv_grid(grid);
    }
    if config.model == ModelKind::M5 {
        ctx = ctx.with_latent_anchors(&prepared.data.sites);
    }
    ctx
}

/// Winds at `targets` in working coordinates. Targets that coincide with a
/// source row keep its direction; the rest are interpolated from the union
/// of the sources' wind fields.
fn winds_at(sources: &[&Dataset], targets: &[Site]) -> Result<Vec<WindVector>> {
    let mut known: BTreeMap<(u64, u64), WindVector> = BTreeMap::new();
    let mut net_sites = Vec::new();
    let mut net_winds = Vec::new();
    for source in sources {
        for row in &source.rows {
            if let Some(w) = row.wind {
                let key = (row.site.x.to_bits(), row.site.y.to_bits());
                if known.insert(key, w).is_none() {
                    net_sites.push(row.site);
                    net_winds.push(w);
                }
            }
        }
    }
    let mut out: Vec<Option<WindVector>> = targets
        .iter()
        .map(|t| known.get(&(t.x.to_bits(), t.y.to_bits())).copied())
        .collect();
    let missing: Vec<Site> = targets
        .iter()
        .zip(&out)
        .filter(|(_, w)| w.is_none())
        .map(|(t, _)| *t)
        .collect();
    if !missing.is_empty() {
        let filled = interp_wind(&net_sites, &net_winds, &missing)?;
        let mut next = filled.into_iter();
        for slot in out.iter_mut().filter(|w| w.is_none()) {
            *slot = next.next();
        }
    }
    Ok(out.into_iter().map(|w| w.expect("all wind slots filled")).collect())
}

/// Starting state for the sampler: the data-driven default patched with the
/// configuration's `[init]` entries.
fn initial_state(config: &RunConfig, data: &ObservationModel) -> Result<Option<ParameterState>> {
    if config.init.is_empty() {
        return Ok(None);
    }
    let mut state = default_init(data, config.model, config.nu)?;
    let mut named: BTreeMap<String, f64> = state.delta.flatten().into_iter().collect();
    for (key, value) in &config.init {
        if let Some(idx) = key.strip_prefix("beta") {
            let j: usize = idx.parse().map_err(|_| {
                Error::Config(format!("bad coefficient name '{key}' in [init]"))
            })?;
            if j >= state.beta.len() {
                return Err(Error::Config(format!(
                    "[init] names {key} but the trend has {} coefficients",
                    state.beta.len()
                )));
            }
            state.beta[j] = *value;
        } else if key == "tau2" {
            state.tau2 = *value;
        } else if key == "eta" {
            state.eta = *value;
        } else if named.contains_key(key) {
            named.insert(key.clone(), *value);
        } else {
            return Err(Error::Config(format!(
                "unknown [init] parameter '{key}' for {}",
                config.model
            )));
        }
    }
    state.delta = Delta::from_named(config.model, &named, data.n())?;
    Ok(Some(state))
}

/// Run manifest: the identification line, the resolved configuration, and
/// the sampler's acceptance diagnostics.
fn manifest_toml(config: &RunConfig, samples: &PosteriorSamples) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", Manifest::new(samples.kind, config.chain.seed).line());
    out.push_str(&config.to_toml_string());
    let _ = writeln!(out, "\n[acceptance]");
    for block in &samples.acceptance {
        let _ = writeln!(out, "{} = {}", block.name, block.rate());
    }
    let _ = writeln!(out, "\n[final_steps]");
    for block in &samples.acceptance {
        let _ = writeln!(out, "{} = {}", block.name, block.final_step);
    }
    out
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, text)?;
    Ok(path)
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let config = load_config(args.config.as_deref(), args.model, args.seed)?;
    let raw = Dataset::load(&args.data)?;
    let prepared = prepare(&config, &raw)?;
    let priors = config.priors.resolve(prepared.data.max_dist());
    let init = initial_state(&config, &prepared.data)?;
    let setup = ChainSetup {
        data: &prepared.data,
        kind: config.model,
        nu: config.nu,
        conv_grid: prepared.conv.as_ref(),
        priors: &priors,
        config: &config.chain,
        init,
    };
    let samples = run_chain(&setup)?;
    write_file(&args.out, "samples.csv", &samples_csv(&samples)?)?;
    write_file(&args.out, "config.toml", &config.to_toml_string())?;
    write_file(&args.out, "manifest.toml", &manifest_toml(&config, &samples))?;
    println!(
        "fit {}: {} sites, {} retained draws -> {}",
        config.model,
        prepared.data.n(),
        samples.len(),
        args.out.display()
    );
    Ok(())
}

/// Loads a fit directory back: the resolved configuration and the samples.
fn load_fit(dir: &Path) -> Result<(RunConfig, PosteriorSamples)> {
    let config = RunConfig::load(&dir.join("config.toml"))?;
    let samples = read_samples(&dir.join("samples.csv"), config.nu)?;
    if samples.kind != config.model {
        return Err(Error::Config(format!(
            "{}: config names {} but the samples are for {}",
            dir.display(),
            config.model,
            samples.kind
        )));
    }
    Ok((config, samples))
}

/// Prediction targets in dataset coordinates with their output ids: an
/// explicit target table, or a grid over the data's bounding box.
fn resolve_targets(
    targets: &Option<PathBuf>,
    grid: &Option<String>,
    bbox: &Option<String>,
    pad: f64,
    raw: &Dataset,
) -> Result<(Vec<String>, Vec<Site>, Dataset)> {
    if let Some(path) = targets {
        if grid.is_some() || bbox.is_some() {
            return Err(Error::Config(
                "--targets and --grid/--bbox are mutually exclusive".into(),
            ));
        }
        let table = Dataset::load(path)?;
        if table.n() == 0 {
            return Err(Error::Dataset(format!("{} has no rows", path.display())));
        }
        Ok((table.site_ids(), table.sites(), table))
    } else {
        let (nx, ny) = parse_grid_dims(grid.as_deref().unwrap_or("20x20"))?;
        let b = match bbox {
            Some(text) => parse_bbox(text)?,
            None => Bbox::of(&raw.sites())?,
        }
        .pad(pad);
        let points = make_grid(&b, nx, ny)?;
        let ids = (1..=points.len()).map(|k| format!("g{k:04}")).collect();
        Ok((ids, points, Dataset::default()))
    }
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let (config, samples) = load_fit(&args.fit)?;
    let raw = Dataset::load(&args.data)?;
    let prepared = prepare(&config, &raw)?;
    let (ids, original, target_table) =
        resolve_targets(&args.targets, &args.grid, &args.bbox, args.pad, &raw)?;
    let targets = prepared.projection.apply_all(&original);
    let target_sources = target_table.project(&prepared.projection);

    let target_winds = if config.model.needs_wind() {
        Some(winds_at(&[&prepared.dataset, &target_sources], &targets)?)
    } else {
        None
    };
    let target_design = (config.mean_trend != MeanTrend::Constant)
        .then(|| config.mean_trend.design(&targets));

    let seed = args.seed.unwrap_or(config.chain.seed);
    let mut spec = if args.latent {
        PredictionSpec::latent(&targets)
    } else {
        PredictionSpec::observation(&targets)
    };
    spec = spec.with_seed(seed).with_draws_per_state(args.draws.max(1));
    if let Some(w) = &target_winds {
        spec = spec.with_winds(w);
    }
    if let Some(d) = &target_design {
        spec = spec.with_design(d);
    }

    let ctx = base_ctx(&config, &prepared);
    let mut summary = predict(&prepared.data, &ctx, &samples.states, &spec)?;
    // Report positions in the dataset's own coordinate system.
    summary.sites = original;
    let text = predictions_csv(&Manifest::new(samples.kind, seed), &ids, &summary)?;
    let path = write_file(&args.out, "predictions.csv", &text)?;
    println!("predict {}: {} targets -> {}", samples.kind, ids.len(), path.display());
    Ok(())
}

/// Held-out predictive log density for one fitted model.
fn holdout_log_density(
    config: &RunConfig,
    prepared: &Prepared,
    ctx: &CovContext,
    samples: &PosteriorSamples,
    seed: u64,
) -> Result<f64> {
    let targets = prepared.holdout.sites();
    let observed = DVector::from_iterator(
        targets.len(),
        prepared.holdout.rows.iter().map(|r| r.value.expect("holdout rows carry values")),
    );
    let target_winds = if config.model.needs_wind() {
        Some(winds_at(&[&prepared.dataset], &targets)?)
    } else {
        None
    };
    let target_design = (config.mean_trend != MeanTrend::Constant)
        .then(|| config.mean_trend.design(&targets));
    let mut spec = PredictionSpec::observation(&targets).with_seed(seed);
    if let Some(w) = &target_winds {
        spec = spec.with_winds(w);
    }
    if let Some(d) = &target_design {
        spec = spec.with_design(d);
    }
    predictive_log_likelihood(&prepared.data, ctx, &samples.states, &spec, &observed)
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    if args.fits.len() < 2 {
        return Err(Error::Config("compare needs at least two --fits directories".into()));
    }
    let raw = Dataset::load(&args.data)?;
    let mut k = args.k;
    let mut seed = args.seed;
    let mut kinds = Vec::new();
    let mut rows = Vec::new();
    for dir in &args.fits {
        let (config, samples) = load_fit(dir)?;
        let k = *k.get_or_insert(config.ppl_k);
        let seed = *seed.get_or_insert(config.chain.seed);
        let prepared = prepare(&config, &raw)?;
        let ctx = base_ctx(&config, &prepared);
        let mut crit = evaluate_model(&prepared.data, &ctx, &samples, k, seed)?;
        if prepared.holdout.n() > 0 {
            crit.pred_loglik =
                Some(holdout_log_density(&config, &prepared, &ctx, &samples, seed)?);
        }
        kinds.push(samples.kind);
        rows.push(crit);
    }
    let manifest = Manifest::joint(&kinds, seed.unwrap_or(0));
    let path = write_file(&args.out, "criteria.csv", &criteria_csv(&manifest, &rows))?;
    for c in &rows {
        let pred = c
            .pred_loglik
            .map(|v| format!(", held-out log density {v:.3}"))
            .unwrap_or_default();
        println!(
            "{}: DIC {:.2} (p_D {:.2}), D_{} {:.2} (G {:.2}, P {:.2}){pred}",
            c.kind, c.dic, c.p_d, c.k, c.d_k, c.g, c.p
        );
    }
    println!("criteria -> {}", path.display());
    Ok(())
}

/// Default simulation parameters for a model at the data's length scale.
fn sim_delta_defaults(kind: ModelKind, dmax: f64) -> Vec<(&'static str, f64)> {
    let d4 = dmax / 4.0;
    match kind {
        ModelKind::M1 => vec![("phi", d4)],
        ModelKind::M2 => vec![
            ("phi", d4),
            ("theta", std::f64::consts::FRAC_PI_4),
            ("lambda1", 1.0),
            ("lambda2", 1.0),
        ],
        ModelKind::M3 => vec![("lambda1_sq", d4 * d4), ("lambda2_sq", d4 * d4 / 4.0)],
        ModelKind::M4 => vec![("phi1", dmax / 8.0), ("phi2", d4)],
        ModelKind::M5 => {
            let log_l = (d4 * d4).ln();
            vec![
                ("mu_lambda1", log_l),
                ("mu_lambda2", log_l),
                ("mu_gamma", 0.0),
                ("sigma2_lambda", 0.5),
                ("sigma2_gamma", 0.5),
                ("phi_lambda", sq_exp_practical_range_to_phi(dmax / 2.0)),
                ("phi_gamma", sq_exp_practical_range_to_phi(dmax / 2.0)),
            ]
        }
    }
}

/// Parameter state for forward simulation: scale-aware defaults overridden
/// by the configuration's `[init]` entries.
fn sim_state(config: &RunConfig, sites: &[Site]) -> Result<ParameterState> {
    let mut dmax = 0.0f64;
    for i in 0..sites.len() {
        for j in (i + 1)..sites.len() {
            dmax = dmax.max(sites[i].dist(&sites[j]));
        }
    }
    let dmax = if dmax > 0.0 { dmax } else { 1.0 };
    let mut named: BTreeMap<String, f64> = sim_delta_defaults(config.model, dmax)
        .into_iter()
        .map(|(name, value)| (name.to_string(), value))
        .collect();
    let mut beta0 = 0.0;
    let mut tau2 = 0.25;
    let mut eta = 1.0;
    for (key, value) in &config.init {
        match key.as_str() {
            "beta0" => beta0 = *value,
            "tau2" => tau2 = *value,
            "eta" => eta = *value,
            _ if named.contains_key(key) => {
                named.insert(key.clone(), *value);
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown [init] parameter '{key}' for simulating {}",
                    config.model
                )))
            }
        }
    }
    let delta = if config.model == ModelKind::M5 {
        // Field values are drawn from the hyperparameters' priors at the
        // simulation sites, so only the hyperparameters matter here.
        let mut fields = LatentFields::constant(
            sites.len().max(1),
            named["mu_lambda1"],
            named["mu_lambda2"],
            named["mu_gamma"],
        );
        fields.sigma2_lambda = named["sigma2_lambda"];
        fields.sigma2_gamma = named["sigma2_gamma"];
        fields.phi_lambda = named["phi_lambda"];
        fields.phi_gamma = named["phi_gamma"];
        Delta::M5(fields)
    } else {
        Delta::from_named(config.model, &named, 0)?
    };
    Ok(ParameterState { beta: DVector::from_element(1, beta0), tau2, eta, delta })
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let config = load_config(args.config.as_deref(), args.model, args.seed)?;
    let raw = Dataset::load(&args.data)?;
    let projection = Projection::fit(config.coords, &raw.sites())?;
    let dataset = raw.project(&projection);

    let original: Vec<Site> = if args.grid.is_some() || args.bbox.is_some() {
        let (nx, ny) = parse_grid_dims(args.grid.as_deref().unwrap_or("20x20"))?;
        let b = match &args.bbox {
            Some(text) => parse_bbox(text)?,
            None => Bbox::of(&raw.sites())?,
        }
        .pad(args.pad);
        make_grid(&b, nx, ny)?
    } else {
        raw.sites()
    };
    let sites = projection.apply_all(&original);
    let winds = if config.model.needs_wind() {
        Some(winds_at(&[&dataset], &sites)?)
    } else {
        None
    };
    let state = sim_state(&config, &sites)?;
    let conv = if config.model == ModelKind::M4 {
        let winds = winds.as_ref().expect("M4 winds resolved above");
        Some(match config.conv_grid {
            ConvGridConfig::Sites => GridSpec::new(sites.clone(), winds.clone())?,
            ConvGridConfig::Regular { nx, ny, pad } => {
                let bbox = Bbox::of(&sites)?.pad(pad);
                let points = make_grid(&bbox, nx, ny)?;
                let grid_winds = winds_at(&[&dataset], &points)?;
                GridSpec::new(points, grid_winds)?
            }
        })
    } else {
        None
    };
    let mut ctx = CovContext::new(config.model, config.nu);
    if let Some(grid) = &conv {
        ctx = ctx.with_conv_grid(grid);
    }

    let seed = args.seed.unwrap_or(config.chain.seed);
    let mut request = SimulationRequest::new(&sites, &state);
    request.winds = winds.as_deref();
    request.realizations = args.realizations.unwrap_or(config.simulate.realizations);
    request.seed = seed;
    request.include_nugget = config.simulate.include_nugget;
    request.draw_latent = config.model == ModelKind::M5;
    let fields = simulate_field(&ctx, &request)?;

    let manifest = Manifest::new(config.model, seed);
    write_file(&args.out, "realizations.csv", &realizations_csv(&manifest, &original, &fields.values)?)?;

    // Correlation of every simulation site against a reference point.
    let reference_original = match &args.reference {
        Some(text) => parse_point(text)?,
        None => {
            let b = Bbox::of(&original)?;
            Site::new(0.5 * (b.x0 + b.x1), 0.5 * (b.y0 + b.y1))
        }
    };
    let reference = projection.apply(reference_original);
    let reference_wind = match &winds {
        Some(_) => Some(winds_at(&[&dataset], &[reference])?[0]),
        None => None,
    };
    let map_delta = match &fields.latent {
        Some(latent) => Delta::M5(latent.clone()),
        None => state.delta.clone(),
    };
    let map_ctx = if config.model == ModelKind::M5 {
        ctx.with_latent_anchors(&sites)
    } else {
        ctx
    };
    let corr = correlation_map(
        &map_ctx,
        &map_delta,
        reference,
        reference_wind,
        &sites,
        winds.as_deref(),
    )?;
    write_file(&args.out, "correlation_map.csv", &correlation_map_csv(&manifest, &original, &corr)?)?;

    // Kernel ellipses exist only for the models with per-site kernels.
    if matches!(config.model, ModelKind::M3 | ModelKind::M5) {
        let mut rows = ellipse_field(&map_ctx, &map_delta, &sites, winds.as_deref(), args.scale)?;
        for (row, o) in rows.iter_mut().zip(&original) {
            row.site = *o;
        }
        write_file(&args.out, "ellipses.csv", &ellipses_csv(&manifest, &rows))?;
    }
    if let Some(latent) = &fields.latent {
        write_file(&args.out, "latent.csv", &latent_csv(&manifest, &original, latent)?)?;
    }
    println!(
        "simulate {}: {} realizations at {} sites -> {}",
        config.model,
        request.realizations,
        sites.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_wind_interp(args: WindInterpArgs) -> Result<()> {
    let coords: CoordSystem = args.coords.parse()?;
    let raw = Dataset::load(&args.data)?;
    let projection = Projection::fit(coords, &raw.sites())?;
    let dataset = raw.project(&projection);
    let (ids, original, _) =
        resolve_targets(&args.targets, &args.grid, &args.bbox, args.pad, &raw)?;
    let targets = projection.apply_all(&original);
    let winds = winds_at(&[&dataset], &targets)?;
    let manifest = Manifest { model: "wind".into(), seed: 0, version: crate::io::VERSION.into() };
    let text = winds_csv(&manifest, &ids, &original, &winds)?;
    let path = write_file(&args.out, "winds.csv", &text)?;
    println!("wind-interp: {} targets -> {}", ids.len(), path.display());
    Ok(())
}

fn parse_grid_dims(text: &str) -> Result<(usize, usize)> {
    let (nx, ny) = text
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("grid '{text}' is not of the form NXxNY")))?;
    let parse = |token: &str| -> Result<usize> {
        token
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("grid dimension '{token}' is not an integer")))
    };
    Ok((parse(nx)?, parse(ny)?))
}

fn parse_numbers<const N: usize>(text: &str, what: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(Error::Config(format!(
            "{what} '{text}' needs {N} comma-separated numbers"
        )));
    }
    let mut out = [0.0; N];
    for (slot, token) in out.iter_mut().zip(parts) {
        *slot = token
            .parse()
            .map_err(|_| Error::Config(format!("{what}: '{token}' is not a number")))?;
    }
    Ok(out)
}

fn parse_bbox(text: &str) -> Result<Bbox> {
    let [x0, y0, x1, y1] = parse_numbers(text, "bounding box")?;
    Ok(Bbox { x0, y0, x1, y1 })
}

fn parse_point(text: &str) -> Result<Site> {
    let [x, y] = parse_numbers(text, "point")?;
    Ok(Site::new(x, y))
}
