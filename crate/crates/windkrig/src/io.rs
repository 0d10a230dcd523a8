//! File formats, run configuration, and grid construction.
//!
//! Everything on disk is comma-delimited text with a header row, preceded by
//! a manifest comment `# model=<id> seed=<n> version=<semver>` naming the run
//! that produced it. Floats are written with Rust's shortest round-trip
//! formatting, so writing and reloading is the identity and two runs with
//! the same seed produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geo::{Site, WindVector};
use crate::inference::PosteriorSamples;
use crate::model::{
    ChainConfig, Delta, InvGamma, LatentFields, ModelKind, ObservationModel, ParameterState,
    PriorSpec,
};
use crate::predict::PredictiveSummary;
use crate::selection::Criteria;
use crate::sim::EllipseRow;

/// Software version stamped into every output file.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Mean radius used to project geographic coordinates, in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// The required identification line at the top of every output file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    /// Model identifier, or several joined with `+` for comparison tables.
    pub model: String,
    pub seed: u64,
    pub version: String,
}

impl Manifest {
    pub fn new(kind: ModelKind, seed: u64) -> Self {
        Manifest { model: kind.to_string(), seed, version: VERSION.into() }
    }

    /// Manifest for a file that aggregates several models.
    pub fn joint(kinds: &[ModelKind], seed: u64) -> Self {
        let model =
            kinds.iter().map(ModelKind::to_string).collect::<Vec<_>>().join("+");
        Manifest { model, seed, version: VERSION.into() }
    }

    pub fn line(&self) -> String {
        format!("# model={} seed={} version={}", self.model, self.seed, self.version)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let body = line
            .strip_prefix('#')
            .ok_or_else(|| Error::Dataset("missing manifest comment line".into()))?;
        let mut fields = BTreeMap::new();
        for token in body.split_whitespace() {
            let (key, value) = token
                .split_once('=')
                .ok_or_else(|| Error::Dataset(format!("malformed manifest token '{token}'")))?;
            fields.insert(key.to_string(), value.to_string());
        }
        let get = |key: &str| -> Result<String> {
            fields
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Dataset(format!("manifest line is missing '{key}='")))
        };
        let seed = get("seed")?;
        let seed = seed
            .parse::<u64>()
            .map_err(|_| Error::Dataset(format!("manifest seed '{seed}' is not an integer")))?;
        Ok(Manifest { model: get("model")?, seed, version: get("version")? })
    }

    /// The single model this manifest names; an error for joint manifests.
    pub fn kind(&self) -> Result<ModelKind> {
        self.model.parse()
    }
}

/// One dataset row: a named site with an optional measured value and an
/// optional wind direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRow {
    pub site_id: String,
    pub site: Site,
    /// Absent for prediction-only sites.
    pub value: Option<f64>,
    /// Unit-normalized at load time; absent when both components are empty.
    pub wind: Option<WindVector>,
}

/// A loaded station table with unique ids and distinct coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub rows: Vec<DataRow>,
}

const DATASET_HEADER: &str = "site_id,x,y,value,u,v";

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses the station table, skipping blank and `#` comment lines.
    /// Errors carry 1-based line numbers of the original text.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (header_line, header) = lines
            .next()
            .ok_or_else(|| Error::Dataset("dataset has no header row".into()))?;
        let normalized: String =
            header.split(',').map(str::trim).collect::<Vec<_>>().join(",");
        if normalized != DATASET_HEADER {
            return Err(Error::Dataset(format!(
                "line {header_line}: expected header '{DATASET_HEADER}', got '{header}'"
            )));
        }

        let mut rows = Vec::new();
        let mut ids: BTreeMap<String, usize> = BTreeMap::new();
        let mut coords: Vec<(u64, u64, usize)> = Vec::new();
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 6 {
                return Err(Error::Dataset(format!(
                    "line {lineno}: expected 6 comma-separated fields, got {}",
                    fields.len()
                )));
            }
            let site_id = fields[0].to_string();
            if site_id.is_empty() {
                return Err(Error::Dataset(format!("line {lineno}: empty site_id")));
            }
            if let Some(prev) = ids.insert(site_id.clone(), lineno) {
                return Err(Error::Dataset(format!(
                    "duplicate site_id '{site_id}' on lines {prev} and {lineno}"
                )));
            }
            let num = |name: &str, raw: &str| -> Result<f64> {
                let v: f64 = raw.parse().map_err(|_| {
                    Error::Dataset(format!("line {lineno}: {name} '{raw}' is not a number"))
                })?;
                if !v.is_finite() {
                    return Err(Error::Dataset(format!(
                        "line {lineno}: {name} must be finite, got {raw}"
                    )));
                }
                Ok(v)
            };
            let x = num("x", fields[1])?;
            let y = num("y", fields[2])?;
            if let Some((_, _, prev)) =
                coords.iter().find(|(bx, by, _)| *bx == x.to_bits() && *by == y.to_bits())
            {
                return Err(Error::Dataset(format!(
                    "duplicate coordinates ({x}, {y}) on lines {prev} and {lineno}"
                )));
            }
            coords.push((x.to_bits(), y.to_bits(), lineno));
            let value = if fields[3].is_empty() { None } else { Some(num("value", fields[3])?) };
            let wind = match (fields[4].is_empty(), fields[5].is_empty()) {
                (true, true) => None,
                (false, false) => {
                    let u = num("u", fields[4])?;
                    let v = num("v", fields[5])?;
                    Some(WindVector::new(u, v).map_err(|_| {
                        Error::Dataset(format!(
                            "line {lineno}: undefined wind direction for site '{site_id}': \
                             ({u}, {v}) has zero magnitude"
                        ))
                    })?)
                }
                _ => {
                    return Err(Error::Dataset(format!(
                        "line {lineno}: wind components must both be present or both empty"
                    )))
                }
            };
            rows.push(DataRow { site_id, site: Site::new(x, y), value, wind });
        }
        Ok(Dataset { rows })
    }

    /// Serializes the table; a manifest line is prepended when given.
    pub fn to_csv_string(&self, manifest: Option<&Manifest>) -> String {
        let mut out = String::new();
        if let Some(m) = manifest {
            let _ = writeln!(out, "{}", m.line());
        }
        let _ = writeln!(out, "{DATASET_HEADER}");
        for row in &self.rows {
            let value = row.value.map(|v| v.to_string()).unwrap_or_default();
            let (u, v) = match row.wind {
                Some(w) => (w.u().to_string(), w.v().to_string()),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                row.site_id, row.site.x, row.site.y, value, u, v
            );
        }
        out
    }

    pub fn write(&self, path: &Path, manifest: Option<&Manifest>) -> Result<()> {
        fs::write(path, self.to_csv_string(manifest))?;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn sites(&self) -> Vec<Site> {
        self.rows.iter().map(|r| r.site).collect()
    }

    pub fn site_ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.site_id.clone()).collect()
    }

    /// Winds for every row, or `None` if any row lacks one.
    pub fn winds(&self) -> Option<Vec<WindVector>> {
        self.rows.iter().map(|r| r.wind).collect()
    }

    /// Rows carrying a measured value.
    pub fn observed(&self) -> Dataset {
        Dataset { rows: self.rows.iter().filter(|r| r.value.is_some()).cloned().collect() }
    }

    /// Prediction-only rows (no measured value).
    pub fn targets(&self) -> Dataset {
        Dataset { rows: self.rows.iter().filter(|r| r.value.is_none()).cloned().collect() }
    }

    /// Splits into (remaining, held-out) by site id; every id must exist.
    pub fn split_holdout(&self, ids: &[String]) -> Result<(Dataset, Dataset)> {
        for id in ids {
            if !self.rows.iter().any(|r| &r.site_id == id) {
                return Err(Error::Config(format!(
                    "held-out site '{id}' is not in the dataset"
                )));
            }
        }
        let (held, rest): (Vec<_>, Vec<_>) =
            self.rows.iter().cloned().partition(|r| ids.contains(&r.site_id));
        Ok((Dataset { rows: rest }, Dataset { rows: held }))
    }

    /// Replaces coordinates via the projection, leaving ids, values, and
    /// wind directions unchanged.
    pub fn project(&self, projection: &Projection) -> Dataset {
        Dataset {
            rows: self
                .rows
                .iter()
                .map(|r| DataRow { site: projection.apply(r.site), ..r.clone() })
                .collect(),
        }
    }

    /// Builds the inference inputs. Every row must carry a value; winds are
    /// attached only when present on all rows.
    pub fn observation_model(&self, trend: MeanTrend) -> Result<ObservationModel> {
        if self.rows.is_empty() {
            return Err(Error::Dataset("dataset has no observed rows".into()));
        }
        if let Some(row) = self.rows.iter().find(|r| r.value.is_none()) {
            return Err(Error::Dataset(format!(
                "site '{}' has no value; exclude prediction-only rows before fitting",
                row.site_id
            )));
        }
        let sites = self.sites();
        let z = DVector::from_iterator(self.n(), self.rows.iter().map(|r| r.value.unwrap()));
        ObservationModel::new(z, trend.design(&sites), sites, self.winds())
    }
}

/// Shape of the mean surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanTrend {
    /// Intercept only.
    Constant,
    /// Intercept plus linear coordinates: columns `1, x, y`.
    Linear,
}

impl MeanTrend {
    pub fn design(&self, sites: &[Site]) -> DMatrix<f64> {
        match self {
            MeanTrend::Constant => DMatrix::from_element(sites.len(), 1, 1.0),
            MeanTrend::Linear => DMatrix::from_fn(sites.len(), 3, |i, j| match j {
                0 => 1.0,
                1 => sites[i].x,
                _ => sites[i].y,
            }),
        }
    }
}

impl FromStr for MeanTrend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(MeanTrend::Constant),
            "linear" => Ok(MeanTrend::Linear),
            other => Err(Error::Config(format!(
                "unknown mean_trend '{other}' (expected constant or linear)"
            ))),
        }
    }
}

/// Interpretation of the dataset's x/y columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordSystem {
    /// Coordinates are already planar; distances are Euclidean as-is.
    Planar,
    /// x is longitude and y latitude in degrees; projected to kilometers.
    LonLat,
}

impl FromStr for CoordSystem {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planar" => Ok(CoordSystem::Planar),
            "lonlat" => Ok(CoordSystem::LonLat),
            other => Err(Error::Config(format!(
                "unknown coords '{other}' (expected planar or lonlat)"
            ))),
        }
    }
}

/// Maps dataset coordinates onto the plane the models work in.
///
/// Geographic coordinates use an equirectangular projection centered on the
/// data's mean latitude: `x_km = R cos(lat_bar) lon_rad`,
/// `y_km = R lat_rad`. Wind components are taken as physical east/north
/// directions and are not transformed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    kind: CoordSystem,
    cos_ref_lat: f64,
}

impl Projection {
    /// Fits the projection to the sites the run is anchored on; targets and
    /// grids must reuse the same projection.
    pub fn fit(kind: CoordSystem, sites: &[Site]) -> Result<Self> {
        if kind == CoordSystem::LonLat {
            if sites.is_empty() {
                return Err(Error::Config("projection needs at least one site".into()));
            }
            for s in sites {
                if s.y.abs() > 90.0 || s.x.abs() > 360.0 {
                    return Err(Error::Config(format!(
                        "({}, {}) is not a longitude/latitude pair",
                        s.x, s.y
                    )));
                }
            }
            let mean_lat = sites.iter().map(|s| s.y).sum::<f64>() / sites.len() as f64;
            Ok(Projection { kind, cos_ref_lat: mean_lat.to_radians().cos() })
        } else {
            Ok(Projection { kind, cos_ref_lat: 1.0 })
        }
    }

    pub fn apply(&self, s: Site) -> Site {
        match self.kind {
            CoordSystem::Planar => s,
            CoordSystem::LonLat => Site::new(
                EARTH_RADIUS_KM * self.cos_ref_lat * s.x.to_radians(),
                EARTH_RADIUS_KM * s.y.to_radians(),
            ),
        }
    }

    pub fn apply_all(&self, sites: &[Site]) -> Vec<Site> {
        sites.iter().map(|s| self.apply(*s)).collect()
    }
}

/// Axis-aligned bounding box, `x0 < x1` and `y0 < y1` when used for grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Bbox {
    /// Tight box around the sites.
    pub fn of(sites: &[Site]) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::Config("bounding box of an empty site list".into()));
        }
        let mut b = Bbox { x0: f64::INFINITY, y0: f64::INFINITY, x1: f64::NEG_INFINITY, y1: f64::NEG_INFINITY };
        for s in sites {
            b.x0 = b.x0.min(s.x);
            b.y0 = b.y0.min(s.y);
            b.x1 = b.x1.max(s.x);
            b.y1 = b.y1.max(s.y);
        }
        Ok(b)
    }

    /// Expands every edge outward by `pad`.
    pub fn pad(self, pad: f64) -> Bbox {
        Bbox { x0: self.x0 - pad, y0: self.y0 - pad, x1: self.x1 + pad, y1: self.y1 + pad }
    }
}

/// Cell centers of an `nx` by `ny` grid over the box, in row-major order
/// with x varying fastest, bottom row first.
pub fn make_grid(bbox: &Bbox, nx: usize, ny: usize) -> Result<Vec<Site>> {
    if nx == 0 || ny == 0 {
        return Err(Error::Config(format!("grid needs nx, ny >= 1, got {nx}x{ny}")));
    }
    if !(bbox.x1 > bbox.x0) || !(bbox.y1 > bbox.y0) {
        return Err(Error::Config(format!(
            "degenerate bounding box ({}, {}) to ({}, {})",
            bbox.x0, bbox.y0, bbox.x1, bbox.y1
        )));
    }
    let dx = (bbox.x1 - bbox.x0) / nx as f64;
    let dy = (bbox.y1 - bbox.y0) / ny as f64;
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push(Site::new(
                bbox.x0 + (i as f64 + 0.5) * dx,
                bbox.y0 + (j as f64 + 0.5) * dy,
            ));
        }
    }
    Ok(out)
}

/// How the convolution model's kernel grid is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvGridConfig {
    /// Anchor one kernel at every observation site (the default).
    Sites,
    /// Regular grid over the padded data bounding box.
    Regular { nx: usize, ny: usize, pad: f64 },
}

/// Forward-simulation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulateConfig {
    pub realizations: usize,
    pub include_nugget: bool,
}

/// Prior overrides from the configuration file; anything unset falls back
/// to the reference prior for the data's scale.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorOverrides {
    pub beta_variance: Option<f64>,
    pub tau2: Option<[f64; 2]>,
    pub eta: Option<[f64; 2]>,
    pub delta: Option<[f64; 2]>,
    pub mu_lambda_variance: Option<f64>,
    pub sigma2_field: Option<[f64; 2]>,
    pub phi_field: Option<[f64; 2]>,
}

impl PriorOverrides {
    /// Reference priors for the given data scale with the file's overrides
    /// applied. Inverse-gamma overrides are `[shape, scale]` pairs.
    pub fn resolve(&self, max_dist: f64) -> PriorSpec {
        let mut p = PriorSpec::reference(max_dist);
        if let Some(v) = self.beta_variance {
            p.beta_variance = v;
        }
        if let Some([a, b]) = self.tau2 {
            p.tau2 = InvGamma::new(a, b);
        }
        if let Some([a, b]) = self.eta {
            p.eta = InvGamma::new(a, b);
        }
        if let Some([a, b]) = self.delta {
            p.delta = InvGamma::new(a, b);
        }
        if let Some(v) = self.mu_lambda_variance {
            p.mu_lambda_variance = v;
        }
        if let Some([a, b]) = self.sigma2_field {
            p.sigma2_field = InvGamma::new(a, b);
        }
        if let Some([a, b]) = self.phi_field {
            p.phi_field = InvGamma::new(a, b);
        }
        p
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChain {
    iterations: Option<usize>,
    burn_in: Option<usize>,
    thinning: Option<usize>,
    adapt_window: Option<usize>,
    initial_step: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConvGrid {
    mode: Option<String>,
    nx: Option<usize>,
    ny: Option<usize>,
    pad: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulate {
    realizations: Option<usize>,
    include_nugget: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: Option<String>,
    seed: Option<u64>,
    nu: Option<f64>,
    ppl_k: Option<f64>,
    coords: Option<String>,
    mean_trend: Option<String>,
    holdout: Option<Vec<String>>,
    #[serde(default)]
    chain: RawChain,
    #[serde(default)]
    priors: PriorOverrides,
    #[serde(default)]
    conv_grid: RawConvGrid,
    #[serde(default)]
    init: BTreeMap<String, f64>,
    #[serde(default)]
    steps: BTreeMap<String, f64>,
    #[serde(default)]
    simulate: RawSimulate,
}

/// A fully resolved run configuration.
///
/// Every field the file leaves out takes the reference default, so an empty
/// file reproduces the reference setup: `nu = 1`, predictive loss weight
/// `k = 1`, convolution kernels anchored at the sites, and the reference
/// chain lengths for the chosen model.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub nu: f64,
    /// Weight of the goodness-of-fit term in the predictive loss.
    pub ppl_k: f64,
    pub coords: CoordSystem,
    pub mean_trend: MeanTrend,
    /// Site ids scored out of sample; must be a subset of the dataset ids.
    pub holdout: Vec<String>,
    pub chain: ChainConfig,
    pub priors: PriorOverrides,
    pub conv_grid: ConvGridConfig,
    /// Starting values by parameter name; unset parameters use data-driven
    /// defaults.
    pub init: BTreeMap<String, f64>,
    pub simulate: SimulateConfig,
}

impl RunConfig {
    pub fn default_for(model: ModelKind) -> Self {
        RunConfig {
            model,
            nu: 1.0,
            ppl_k: 1.0,
            coords: CoordSystem::Planar,
            mean_trend: MeanTrend::Constant,
            holdout: Vec::new(),
            chain: ChainConfig::reference(model),
            priors: PriorOverrides::default(),
            conv_grid: ConvGridConfig::Sites,
            init: BTreeMap::new(),
            simulate: SimulateConfig { realizations: 10, include_nugget: false },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let model = match raw.model {
            Some(name) => name.parse::<ModelKind>()?,
            None => ModelKind::M1,
        };
        let mut chain = ChainConfig::reference(model);
        if let Some(v) = raw.seed {
            chain.seed = v;
        }
        if let Some(v) = raw.chain.iterations {
            chain.iterations = v;
        }
        if let Some(v) = raw.chain.burn_in {
            chain.burn_in = v;
        }
        if let Some(v) = raw.chain.thinning {
            chain.thinning = v;
        }
        if let Some(v) = raw.chain.adapt_window {
            chain.adapt_window = v;
        }
        if let Some(v) = raw.chain.initial_step {
            chain.initial_step = v;
        }
        chain.step_overrides = raw.steps;
        chain.validate()?;

        let conv_grid = match raw.conv_grid.mode.as_deref() {
            None | Some("sites") => {
                if raw.conv_grid.nx.is_some() || raw.conv_grid.ny.is_some() {
                    return Err(Error::Config(
                        "conv_grid nx/ny require mode = \"regular\"".into(),
                    ));
                }
                ConvGridConfig::Sites
            }
            Some("regular") => {
                let nx = raw.conv_grid.nx.unwrap_or(8);
                let ny = raw.conv_grid.ny.unwrap_or(8);
                if nx == 0 || ny == 0 {
                    return Err(Error::Config(format!(
                        "conv_grid needs nx, ny >= 1, got {nx}x{ny}"
                    )));
                }
                ConvGridConfig::Regular { nx, ny, pad: raw.conv_grid.pad.unwrap_or(0.0) }
            }
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown conv_grid mode '{other}' (expected sites or regular)"
                )))
            }
        };

        let nu = raw.nu.unwrap_or(1.0);
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::Config(format!("nu must be positive, got {nu}")));
        }
        let ppl_k = raw.ppl_k.unwrap_or(1.0);
        if !(ppl_k > 0.0) {
            return Err(Error::Config(format!("ppl_k must be positive, got {ppl_k}")));
        }
        let realizations = raw.simulate.realizations.unwrap_or(10);
        if realizations == 0 {
            return Err(Error::Config("simulate.realizations must be at least 1".into()));
        }

        Ok(RunConfig {
            model,
            nu,
            ppl_k,
            coords: match raw.coords {
                Some(s) => s.parse()?,
                None => CoordSystem::Planar,
            },
            mean_trend: match raw.mean_trend {
                Some(s) => s.parse()?,
                None => MeanTrend::Constant,
            },
            holdout: raw.holdout.unwrap_or_default(),
            chain,
            priors: raw.priors,
            conv_grid,
            init: raw.init,
            simulate: SimulateConfig {
                realizations,
                include_nugget: raw.simulate.include_nugget.unwrap_or(false),
            },
        })
    }

    /// Canonical text form of the resolved configuration, echoed into run
    /// manifests. Deterministic: equal configs serialize to equal bytes.
    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model = \"{}\"", self.model);
        let _ = writeln!(out, "seed = {}", self.chain.seed);
        let _ = writeln!(out, "nu = {}", self.nu);
        let _ = writeln!(out, "ppl_k = {}", self.ppl_k);
        let _ = writeln!(
            out,
            "coords = \"{}\"",
            match self.coords {
                CoordSystem::Planar => "planar",
                CoordSystem::LonLat => "lonlat",
            }
        );
        let _ = writeln!(
            out,
            "mean_trend = \"{}\"",
            match self.mean_trend {
                MeanTrend::Constant => "constant",
                MeanTrend::Linear => "linear",
            }
        );
        let holdout =
            self.holdout.iter().map(|s| format!("\"{s}\"")).collect::<Vec<_>>().join(", ");
        let _ = writeln!(out, "holdout = [{holdout}]");
        let _ = writeln!(out, "\n[chain]");
        let _ = writeln!(out, "iterations = {}", self.chain.iterations);
        let _ = writeln!(out, "burn_in = {}", self.chain.burn_in);
        let _ = writeln!(out, "thinning = {}", self.chain.thinning);
        let _ = writeln!(out, "adapt_window = {}", self.chain.adapt_window);
        let _ = writeln!(out, "initial_step = {}", self.chain.initial_step);
        match self.conv_grid {
            ConvGridConfig::Sites => {
                let _ = writeln!(out, "\n[conv_grid]\nmode = \"sites\"");
            }
            ConvGridConfig::Regular { nx, ny, pad } => {
                let _ = writeln!(
                    out,
                    "\n[conv_grid]\nmode = \"regular\"\nnx = {nx}\nny = {ny}\npad = {pad}"
                );
            }
        }
        if !self.init.is_empty() {
            let _ = writeln!(out, "\n[init]");
            for (name, value) in &self.init {
                let _ = writeln!(out, "{name} = {value}");
            }
        }
        if !self.chain.step_overrides.is_empty() {
            let _ = writeln!(out, "\n[steps]");
            for (name, value) in &self.chain.step_overrides {
                let _ = writeln!(out, "{name} = {value}");
            }
        }
        let _ = writeln!(out, "\n[simulate]");
        let _ = writeln!(out, "realizations = {}", self.simulate.realizations);
        let _ = writeln!(out, "include_nugget = {}", self.simulate.include_nugget);
        out
    }
}

fn header_and_manifest(text: &str) -> Result<(Manifest, &str, Vec<&str>)> {
    let mut lines = text.lines();
    let manifest = Manifest::parse(
        lines.next().ok_or_else(|| Error::Dataset("empty file".into()))?,
    )?;
    let header = lines
        .next()
        .ok_or_else(|| Error::Dataset("file has a manifest but no header row".into()))?;
    let rows: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
    Ok((manifest, header, rows))
}

/// Serializes retained draws, one row per draw: the draw index, the data
/// log likelihood, the mean coefficients, `tau2`, `eta`, the derived
/// `sigma2`, and every named correlation parameter (M5 latent fields as
/// site-indexed columns).
pub fn samples_csv(samples: &PosteriorSamples) -> Result<String> {
    if samples.is_empty() {
        return Err(Error::Config("no retained draws to write".into()));
    }
    let manifest = Manifest::new(samples.kind, samples.config.seed);
    let p = samples.states[0].beta.len();
    let delta_names: Vec<String> =
        samples.states[0].delta.flatten().into_iter().map(|(name, _)| name).collect();
    let mut out = String::new();
    let _ = writeln!(out, "{}", manifest.line());
    let mut header = vec!["draw".to_string(), "loglik".to_string()];
    header.extend((0..p).map(|j| format!("beta{j}")));
    header.extend(["tau2".to_string(), "eta".to_string(), "sigma2".to_string()]);
    header.extend(delta_names.iter().cloned());
    let _ = writeln!(out, "{}", header.join(","));
    for (k, (state, loglik)) in samples.states.iter().zip(&samples.log_liks).enumerate() {
        let flat = state.delta.flatten();
        if flat.len() != delta_names.len() || state.beta.len() != p {
            return Err(Error::Config(format!(
                "draw {} has an inconsistent parameter layout",
                k + 1
            )));
        }
        let mut fields = vec![(k + 1).to_string(), loglik.to_string()];
        fields.extend(state.beta.iter().map(|b| b.to_string()));
        fields.push(state.tau2.to_string());
        fields.push(state.eta.to_string());
        fields.push(state.sigma2().to_string());
        fields.extend(flat.into_iter().map(|(_, v)| v.to_string()));
        let _ = writeln!(out, "{}", fields.join(","));
    }
    Ok(out)
}

pub fn write_samples(path: &Path, samples: &PosteriorSamples) -> Result<()> {
    fs::write(path, samples_csv(samples)?)?;
    Ok(())
}

/// Reloads a samples table. The smoothness `nu` is not stored in the file
/// and must match the producing run's configuration.
pub fn parse_samples(text: &str, nu: f64) -> Result<PosteriorSamples> {
    let (manifest, header, rows) = header_and_manifest(text)?;
    let kind = manifest.kind()?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let index = |name: &str| -> Result<usize> {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Dataset(format!("samples table is missing column '{name}'")))
    };
    let loglik_col = index("loglik")?;
    let tau2_col = index("tau2")?;
    let eta_col = index("eta")?;
    let p = columns.iter().filter(|c| c.starts_with("beta")).count();
    if p == 0 {
        return Err(Error::Dataset("samples table has no beta columns".into()));
    }
    let beta_cols: Vec<usize> =
        (0..p).map(|j| index(&format!("beta{j}"))).collect::<Result<_>>()?;
    let skip = ["draw", "loglik", "tau2", "eta", "sigma2"];
    let delta_cols: Vec<(usize, &str)> = columns
        .iter()
        .enumerate()
        .filter(|(_, c)| !skip.contains(c) && !c.starts_with("beta"))
        .map(|(i, c)| (i, *c))
        .collect();
    let n_sites = delta_cols.iter().filter(|(_, c)| c.starts_with("log_lambda1_s")).count();

    let mut states = Vec::with_capacity(rows.len());
    let mut log_liks = Vec::with_capacity(rows.len());
    for (k, row) in rows.iter().enumerate() {
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::Dataset(format!(
                "samples row {} has {} fields, expected {}",
                k + 1,
                fields.len(),
                columns.len()
            )));
        }
        let num = |col: usize| -> Result<f64> {
            fields[col].parse().map_err(|_| {
                Error::Dataset(format!(
                    "samples row {}: '{}' in column '{}' is not a number",
                    k + 1,
                    fields[col],
                    columns[col]
                ))
            })
        };
        log_liks.push(num(loglik_col)?);
        let beta =
            DVector::from_iterator(p, beta_cols.iter().map(|c| num(*c)).collect::<Result<Vec<_>>>()?);
        let mut named = BTreeMap::new();
        for (col, name) in &delta_cols {
            named.insert(name.to_string(), num(*col)?);
        }
        states.push(ParameterState {
            beta,
            tau2: num(tau2_col)?,
            eta: num(eta_col)?,
            delta: Delta::from_named(kind, &named, n_sites)?,
        });
    }
    if states.is_empty() {
        return Err(Error::Dataset("samples table has no draws".into()));
    }
    let mut config = ChainConfig::reference(kind);
    config.seed = manifest.seed;
    Ok(PosteriorSamples { kind, nu, states, log_liks, acceptance: Vec::new(), config })
}

pub fn read_samples(path: &Path, nu: f64) -> Result<PosteriorSamples> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    parse_samples(&text, nu).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Per-site prediction table: `site_id,x,y,mean,sd,lower95,upper95`.
pub fn predictions_csv(
    manifest: &Manifest,
    ids: &[String],
    summary: &PredictiveSummary,
) -> Result<String> {
    if ids.len() != summary.sites.len() {
        return Err(Error::Config(format!(
            "{} ids for {} predicted sites",
            ids.len(),
            summary.sites.len()
        )));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{}", manifest.line());
    let _ = writeln!(out, "site_id,x,y,mean,sd,lower95,upper95");
    for (k, id) in ids.iter().enumerate() {
        let s = summary.sites[k];
        let _ = writeln!(
            out,
            "{id},{},{},{},{},{},{}",
            s.x, s.y, summary.mean[k], summary.sd[k], summary.lower95[k], summary.upper95[k]
        );
    }
    Ok(out)
}

/// Criterion table, one row per model:
/// `model,g,p,d_k,k,d_bar,p_d,dic,mse,pred_loglik`.
pub fn criteria_csv(manifest: &Manifest, rows: &[Criteria]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", manifest.line());
    let _ = writeln!(out, "model,g,p,d_k,k,d_bar,p_d,dic,mse,pred_loglik");
    for c in rows {
        let pred = c.pred_loglik.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{pred}",
            c.kind, c.g, c.p, c.d_k, c.k, c.d_bar, c.p_d, c.dic, c.mse
        );
    }
    out
}

/// Long-format realization table: `realization,x,y,value`, realizations
/// numbered from 1.
pub fn realizations_csv(manifest: &Manifest, sites: &[Site], values: &[Vec<f64>]) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "{}", manifest.line());
    let _ = writeln!(out, "realization,x,y,value");
    for (r, draw) in values.iter().enumerate() {
        if draw.len() != sites.len() {
            return Err(Error::Config(format!(
                "realization {} has {} values for {} sites",
                r + 1,
                draw.len(),
                sites.len()
            )));
        }
        for (s, v) in sites.iter().zip(draw) {
            let _ = writeln!(out, "{},{},{},{v}", r + 1, s.x, s.y);
        }
    }
    Ok(out)
}

/// Latent field table for M5: `x,y,log_lambda1,log_lambda2,gamma`.
pub fn latent_csv(manifest: &Manifest, sites: &[Site], fields: &LatentFields) -> Result<String> {
    if fields.n_sites() != sites.len() {
        return Err(Error::Config(format!(
            "latent fields cover {} sites, expected {}",
            fields.n_sites(),
            sites.len()
        )));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{}", manifest.line());
    let _ = writeln!(out, "x,y,log_lambda1,log_lambda2,gamma");
    for (i, s) in sites.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.x, s.y, fields.log_lambda1[i], fields.log_lambda2[i], fields.gamma[i]
        );
    }
    Ok(out)
}

/// Correlation surface against a fixed reference: `x,y,correlation`.
pub fn correlation_map_csv(manifest: &Manifest, sites: &[Site], corr: &[f64]) -> Result<String> {
    if sites.len() != corr.len() {
        return Err(Error::Config(format!(
            "{} correlations for {} sites",
            corr.len(),
            sites.len()
        )));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{}", manifest.line());
    let _ = writeln!(out, "x,y,correlation");
    for (s, c) in sites.iter().zip(corr) {
        let _ = writeln!(out, "{},{},{c}", s.x, s.y);
    }
    Ok(out)
}

/// Kernel ellipse table: `x,y,a1,a2,orientation`.
pub fn ellipses_csv(manifest: &Manifest, rows: &[EllipseRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", manifest.line());
    let _ = writeln!(out, "x,y,a1,a2,orientation");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.site.x, r.site.y, r.a1, r.a2, r.orientation);
    }
    out
}

/// Interpolated wind table: `site_id,x,y,u,v` with unit components.
pub fn winds_csv(
    manifest: &Manifest,
    ids: &[String],
    sites: &[Site],
    winds: &[WindVector],
) -> Result<String> {
    if ids.len() != sites.len() || winds.len() != sites.len() {
        return Err(Error::Config(format!(
            "wind table needs equal lengths, got {} ids, {} sites, {} winds",
            ids.len(),
            sites.len(),
            winds.len()
        )));
    }
    let mut out = String::new();
    let _ = writeln!(out, "{}", manifest.line());
    let _ = writeln!(out, "site_id,x,y,u,v");
    for k in 0..sites.len() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            ids[k], sites[k].x, sites[k].y, winds[k].u(), winds[k].v()
        );
    }
    Ok(out)
}
