//! End-to-end runs of the command-line pipeline on a small station table:
//! fit, predict, compare, simulate, and wind-interp all write their files,
//! reruns with the same seed reproduce them byte for byte, and the common
//! misuse cases exit with errors instead of partial output.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use windkrig::cli::run;

const STATIONS: &str = "\
site_id,x,y,value,u,v
s001,0.0,0.0,1.3,1.0,0.1
s002,1.0,0.1,0.9,0.9,0.2
s003,2.1,0.0,1.7,1.0,0.3
s004,3.0,0.2,2.2,0.8,0.2
s005,0.2,1.1,1.0,1.0,0.4
s006,1.3,1.0,1.5,0.9,0.3
s007,2.2,1.2,2.0,1.1,0.2
s008,3.1,1.0,2.6,1.0,0.1
s009,0.1,2.0,1.2,0.9,0.2
s010,1.2,2.1,1.8,1.0,0.3
s011,2.0,2.2,2.3,1.0,0.2
s012,3.2,2.0,2.9,0.9,0.4
";

const CONFIG: &str = "\
model = \"M1\"
seed = 42
holdout = [\"s011\", \"s012\"]

[chain]
iterations = 400
burn_in = 100
thinning = 10
";

fn cmd(args: &[&dyn AsRef<Path>]) -> windkrig::error::Result<()> {
    let argv: Vec<OsString> = std::iter::once(OsString::from("windkrig"))
        .chain(args.iter().map(|a| a.as_ref().as_os_str().to_owned()))
        .collect();
    run(argv)
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn line_count(text: &str) -> usize {
    text.lines().count()
}

#[test]
fn the_full_pipeline_runs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    let config = dir.path().join("run.toml");
    fs::write(&data, STATIONS).unwrap();
    fs::write(&config, CONFIG).unwrap();

    let fit_m1 = dir.path().join("fit_m1");
    cmd(&[&"fit", &"--config", &config, &"--data", &data, &"--out", &fit_m1]).unwrap();
    let samples = read(&fit_m1.join("samples.csv"));
    assert!(samples.starts_with("# model=M1 seed=42 version="));
    // Manifest, header, then one row per retained draw.
    assert_eq!(line_count(&samples), 2 + (400 - 100) / 10);
    let manifest = read(&fit_m1.join("manifest.toml"));
    assert!(manifest.contains("[acceptance]"));
    assert!(manifest.contains("holdout = [\"s011\", \"s012\"]"));
    assert_eq!(read(&fit_m1.join("config.toml")).contains("model = \"M1\""), true);

    // The same seed reproduces the samples byte for byte.
    let fit_again = dir.path().join("fit_m1_again");
    cmd(&[&"fit", &"--config", &config, &"--data", &data, &"--out", &fit_again]).unwrap();
    assert_eq!(samples, read(&fit_again.join("samples.csv")));

    // A different model on the same data via the override flag.
    let fit_m4 = dir.path().join("fit_m4");
    cmd(&[
        &"fit", &"--config", &config, &"--data", &data, &"--out", &fit_m4, &"--model", &"M4",
    ])
    .unwrap();
    assert!(read(&fit_m4.join("samples.csv")).starts_with("# model=M4 seed=42"));

    // Grid prediction covers nx * ny cell centers.
    let pred = dir.path().join("pred");
    cmd(&[
        &"predict", &"--fit", &fit_m1, &"--data", &data, &"--out", &pred, &"--grid", &"4x3",
    ])
    .unwrap();
    let table = read(&pred.join("predictions.csv"));
    assert!(table.starts_with("# model=M1 seed=42"));
    assert_eq!(line_count(&table), 2 + 4 * 3);
    assert!(table.lines().nth(1).unwrap().starts_with("site_id,x,y,mean,sd,lower95,upper95"));
    let rerun = dir.path().join("pred_again");
    cmd(&[
        &"predict", &"--fit", &fit_m1, &"--data", &data, &"--out", &rerun, &"--grid", &"4x3",
    ])
    .unwrap();
    assert_eq!(table, read(&rerun.join("predictions.csv")));

    // Explicit target tables take precedence over the grid default.
    let targets = dir.path().join("targets.csv");
    fs::write(&targets, "site_id,x,y,value,u,v\nt1,0.5,0.5,,,\nt2,2.5,1.5,,,\n").unwrap();
    let pred_t = dir.path().join("pred_targets");
    cmd(&[
        &"predict", &"--fit", &fit_m1, &"--data", &data, &"--out", &pred_t, &"--targets",
        &targets,
    ])
    .unwrap();
    let table = read(&pred_t.join("predictions.csv"));
    assert_eq!(line_count(&table), 2 + 2);
    assert!(table.lines().nth(2).unwrap().starts_with("t1,0.5,0.5,"));

    // Side-by-side criteria for both fits, with the held-out score filled in.
    let cmp = dir.path().join("cmp");
    cmd(&[
        &"compare", &"--fits", &fit_m1, &fit_m4, &"--data", &data, &"--out", &cmp,
    ])
    .unwrap();
    let criteria = read(&cmp.join("criteria.csv"));
    assert!(criteria.starts_with("# model=M1+M4 seed=42"));
    assert_eq!(line_count(&criteria), 2 + 2);
    for row in criteria.lines().skip(2) {
        let last = row.rsplit(',').next().unwrap();
        assert!(!last.is_empty(), "held-out column empty in {row}");
        assert!(last.parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn simulate_writes_the_surfaces_each_model_supports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    fs::write(&data, STATIONS).unwrap();

    let m3 = dir.path().join("sim_m3");
    cmd(&[
        &"simulate", &"--data", &data, &"--out", &m3, &"--model", &"M3", &"--seed", &"7",
        &"--realizations", &"3",
    ])
    .unwrap();
    let realizations = read(&m3.join("realizations.csv"));
    assert!(realizations.starts_with("# model=M3 seed=7"));
    assert_eq!(line_count(&realizations), 2 + 3 * 12);
    let map = read(&m3.join("correlation_map.csv"));
    assert_eq!(line_count(&map), 2 + 12);
    assert!(m3.join("ellipses.csv").exists());
    assert!(!m3.join("latent.csv").exists());

    let m5 = dir.path().join("sim_m5");
    cmd(&[
        &"simulate", &"--data", &data, &"--out", &m5, &"--model", &"M5", &"--seed", &"7",
        &"--realizations", &"2", &"--grid", &"5x4",
    ])
    .unwrap();
    assert_eq!(line_count(&read(&m5.join("realizations.csv"))), 2 + 2 * 20);
    assert_eq!(line_count(&read(&m5.join("latent.csv"))), 2 + 20);
    assert!(m5.join("ellipses.csv").exists());

    // Stationary isotropic fields have no per-site ellipse table.
    let m1 = dir.path().join("sim_m1");
    cmd(&[
        &"simulate", &"--data", &data, &"--out", &m1, &"--model", &"M1", &"--seed", &"7",
        &"--realizations", &"2",
    ])
    .unwrap();
    assert!(m1.join("realizations.csv").exists());
    assert!(!m1.join("ellipses.csv").exists());
}

#[test]
fn wind_interp_echoes_stations_and_fills_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    fs::write(&data, STATIONS).unwrap();
    let targets = dir.path().join("targets.csv");
    fs::write(&targets, "site_id,x,y,value,u,v\nt1,0.0,0.0,,,\nt2,1.6,1.4,,,\n").unwrap();

    let out = dir.path().join("winds");
    cmd(&[
        &"wind-interp", &"--data", &data, &"--out", &out, &"--targets", &targets,
    ])
    .unwrap();
    let table = read(&out.join("winds.csv"));
    assert!(table.starts_with("# model=wind seed=0"));
    assert_eq!(line_count(&table), 2 + 2);
    // t1 sits exactly on station s001, so it echoes that direction.
    let t1: Vec<&str> = table.lines().nth(2).unwrap().split(',').collect();
    let (u, v): (f64, f64) = (t1[3].parse().unwrap(), t1[4].parse().unwrap());
    let norm = f64::hypot(1.0, 0.1);
    assert!((u - 1.0 / norm).abs() < 1e-12 && (v - 0.1 / norm).abs() < 1e-12);
}

#[test]
fn misuse_exits_with_an_error_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("stations.csv");
    let config = dir.path().join("run.toml");
    fs::write(&data, STATIONS).unwrap();
    fs::write(&config, CONFIG).unwrap();

    // Missing inputs.
    let out = dir.path().join("nope");
    assert!(cmd(&[&"fit", &"--data", &dir.path().join("absent.csv"), &"--out", &out]).is_err());
    assert!(!out.exists());

    // A comparison needs at least two fits.
    let fit_m1 = dir.path().join("fit_m1");
    cmd(&[&"fit", &"--config", &config, &"--data", &data, &"--out", &fit_m1]).unwrap();
    assert!(cmd(&[&"compare", &"--fits", &fit_m1, &"--data", &data, &"--out", &out]).is_err());

    // A fit directory whose config and samples disagree is rejected.
    let tampered = dir.path().join("tampered");
    fs::create_dir_all(&tampered).unwrap();
    fs::copy(fit_m1.join("samples.csv"), tampered.join("samples.csv")).unwrap();
    fs::write(tampered.join("config.toml"), "model = \"M2\"\n").unwrap();
    let err = cmd(&[&"predict", &"--fit", &tampered, &"--data", &data, &"--out", &out])
        .unwrap_err();
    assert!(err.to_string().contains("M2") && err.to_string().contains("M1"));

    // Wind interpolation needs a wind network in the data.
    let bare = dir.path().join("bare.csv");
    fs::write(&bare, "site_id,x,y,value,u,v\na,0,0,1,,\nb,1,0,1,,\nc,0,1,1,,\n").unwrap();
    assert!(cmd(&[&"wind-interp", &"--data", &bare, &"--out", &out, &"--grid", &"2x2"]).is_err());

    // Conflicting target selectors.
    assert!(cmd(&[
        &"predict", &"--fit", &fit_m1, &"--data", &data, &"--out", &out, &"--targets", &data,
        &"--grid", &"2x2",
    ])
    .is_err());
}
