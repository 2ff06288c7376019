use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use pathaug::features::{batch_features, FeatureConfig, FEATURE_NAMES};
use pathaug::gbm::{self, TrainConfig};
use pathaug::measurements::{
    convert_measurements, offsets_to_json, read_measurements, OffsetGrouping, RsrpMeasurement,
};
use pathaug::pipeline::{
    self, demo_config, derive_seed, load_terrain, repetition_config, ExperimentConfig,
    MeasurementSource, TerrainSource, TxConfig,
};
use pathaug::propagation::PropagationModel;
use pathaug::simulate::{
    coverage_raster, generate_grid, read_dataset, read_sim_points, simulate_site, write_dataset,
    write_sim_points, DatasetRow, GridSpec,
};
use pathaug::terrain::{
    generate_synthetic_terrain, Point, Raster, SyntheticTerrainParams, TerrainStack, TxSite,
};

use crate::output::Run;

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, what: &Path) -> Result<T> {
    serde_json::from_str(text).with_context(|| format!("{}", what.display()))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

fn load_stack(run: &mut Run, dsm: &Path, dhm: &Path) -> Result<TerrainStack> {
    let dsm_text = run.read_input_string(dsm)?;
    let dhm_text = run.read_input_string(dhm)?;
    let dsm = Raster::from_ascii_grid(&dsm_text).with_context(|| format!("{}", dsm.display()))?;
    let dhm = Raster::from_ascii_grid(&dhm_text).with_context(|| format!("{}", dhm.display()))?;
    let (stack, report) = TerrainStack::new(dsm, dhm)?;
    run.note("clamped_negative_dhm", report.clamped_negative_dhm)?;
    Ok(stack)
}

#[derive(Args)]
pub struct TerrainGenArgs {
    /// JSON file with generator parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid side in cells; must be 2^k + 1.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    cellsize: Option<f64>,
    /// Ground elevation span in meters.
    #[arg(long)]
    relief: Option<f64>,
    /// Fraction of cells covered by clutter blocks.
    #[arg(long)]
    clutter_density: Option<f64>,
}

pub fn terrain_gen(args: TerrainGenArgs, out: &Path) -> Result<()> {
    let mut run = Run::new("terrain-gen");
    let mut params = match &args.config {
        Some(p) => parse_json(&run.read_input_string(p)?, p)?,
        None => SyntheticTerrainParams::default(),
    };
    if let Some(v) = args.seed {
        params.seed = v;
    }
    if let Some(v) = args.size {
        params.size = v;
    }
    if let Some(v) = args.cellsize {
        params.cellsize = v;
    }
    if let Some(v) = args.relief {
        params.relief = v;
    }
    if let Some(v) = args.clutter_density {
        params.clutter_density = v;
    }
    let stack = generate_synthetic_terrain(&params)?;
    run.config(&params)?;
    run.seed("terrain", params.seed);
    run.add("dsm.asc", stack.dsm().to_ascii_grid());
    run.add("dhm.asc", stack.dhm().to_ascii_grid());
    run.commit(out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    #[serde(default = "default_site")]
    site_id: String,
    terrain: TerrainSource,
    tx: TxConfig,
    freqs: Vec<f64>,
    grid: GridSpec,
    model: PropagationModel,
    #[serde(default)]
    features: FeatureConfig,
    #[serde(default)]
    seed: u64,
    /// Also write one coverage raster per frequency (lattice grids only).
    #[serde(default)]
    coverage: bool,
}

fn default_site() -> String {
    "site".into()
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Simulation config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the propagation model, e.g. `fspl`, `cost231:suburban`, `sui:C`.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write coverage rasters.
    #[arg(long)]
    coverage: bool,
}

pub fn simulate(args: SimulateArgs, out: &Path) -> Result<()> {
    let mut run = Run::new("simulate");
    let mut cfg: SimulateConfig = parse_json(&run.read_input_string(&args.config)?, &args.config)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    if let TerrainSource::Files { dsm, dhm } = &mut cfg.terrain {
        *dsm = resolve(base, dsm);
        *dhm = resolve(base, dhm);
    }
    if let Some(m) = &args.model {
        cfg.model = m.parse()?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.coverage |= args.coverage;
    cfg.features.validate()?;

    let stack = match &cfg.terrain {
        TerrainSource::Files { dsm, dhm } => load_stack(&mut run, dsm, dhm)?,
        synthetic => {
            run.seed(
                "terrain",
                derive_seed(cfg.seed, &format!("terrain:{}", cfg.site_id), 0),
            );
            load_terrain(synthetic, cfg.seed, &cfg.site_id)?.0
        }
    };
    let tx = TxSite {
        site_id: cfg.site_id.clone(),
        x: cfg.tx.x,
        y: cfg.tx.y,
        tower_height: cfg.tx.tower_height,
        freqs: cfg.freqs.clone(),
    };
    tx.validate()?;
    ensure!(
        stack.contains(tx.position()),
        "transmitter at ({}, {}) lies outside the raster {:?}",
        tx.x,
        tx.y,
        stack.bounds()
    );
    let grid_seed = derive_seed(cfg.seed, &format!("grid:{}", cfg.site_id), cfg.grid.seed);
    run.seed("grid", grid_seed);
    let grid_spec = GridSpec {
        seed: grid_seed,
        ..cfg.grid.clone()
    };
    let grid = generate_grid(&grid_spec, &stack)?;
    let sim = simulate_site(
        &stack,
        &tx,
        &grid.points,
        &tx.freqs,
        &cfg.model,
        &cfg.features,
    )?;

    run.add(
        "dataset.csv",
        csv_bytes(|b| Ok(write_dataset(b, &sim.rows)?))?,
    );
    run.add(
        "sim_points.csv",
        csv_bytes(|b| Ok(write_sim_points(b, &tx.site_id, &sim.sim_points())?))?,
    );
    if cfg.coverage {
        for &f in &tx.freqs {
            let raster = coverage_raster(&grid_spec, &stack, &sim, f)?;
            run.add(format!("coverage_{f}MHz.asc"), raster.to_ascii_grid());
        }
    }
    run.note("grid_points", grid.points.len())?;
    run.note("grid_discarded", grid.discarded)?;
    run.note("rows", sim.rows.len())?;
    run.note("dropped_coincident", sim.dropped_coincident)?;
    run.note("dropped_below_reference", sim.dropped_below_reference)?;
    run.note("domain_warnings", &sim.warnings)?;
    run.config(&cfg)?;
    run.commit(out)?;
    Ok(())
}

#[derive(Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    dsm: PathBuf,
    #[arg(long)]
    dhm: PathBuf,
    /// Receiver points: CSV with header `x,y`.
    #[arg(long)]
    points: PathBuf,
    #[arg(long, default_value = "site")]
    site: String,
    #[arg(long)]
    tx_x: f64,
    #[arg(long)]
    tx_y: f64,
    #[arg(long)]
    tower_height: f64,
    /// Carrier frequencies in MHz.
    #[arg(long, value_delimiter = ',', required = true)]
    freqs: Vec<f64>,
    #[arg(long, default_value_t = pathaug::features::DEFAULT_RADIUS)]
    radius: f64,
    /// Include the Fresnel blockage distance.
    #[arg(long)]
    blockage: bool,
    #[arg(long, default_value_t = pathaug::features::DEFAULT_RX_HEIGHT)]
    rx_height: f64,
}

#[derive(Deserialize)]
struct XY {
    x: f64,
    y: f64,
}

pub fn features(args: FeaturesArgs, out: &Path) -> Result<()> {
    let mut run = Run::new("features");
    let stack = load_stack(&mut run, &args.dsm, &args.dhm)?;
    let points_bytes = run.read_input(&args.points)?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(points_bytes.as_slice());
    let points = rdr
        .deserialize::<XY>()
        .enumerate()
        .map(|(i, r)| {
            r.map(|p| Point::new(p.x, p.y))
                .with_context(|| format!("{}: row {}", args.points.display(), i + 2))
        })
        .collect::<Result<Vec<_>>>()?;
    ensure!(!points.is_empty(), "{}: no points", args.points.display());
    let tx = TxSite {
        site_id: args.site.clone(),
        x: args.tx_x,
        y: args.tx_y,
        tower_height: args.tower_height,
        freqs: args.freqs.clone(),
    };
    tx.validate()?;
    let cfg = FeatureConfig {
        radius: args.radius,
        include_blockage: args.blockage,
        rx_height: args.rx_height,
        ..Default::default()
    };
    let fvs = batch_features(&stack, &tx, &points, &args.freqs, &cfg)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["x", "y"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header)?;
    for (k, fv) in fvs.iter().enumerate() {
        let p = points[k / args.freqs.len()];
        let mut rec = vec![p.x.to_string(), p.y.to_string()];
        rec.extend(
            FEATURE_NAMES
                .iter()
                .map(|n| fv.get(n).map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&rec)?;
    }
    run.add("features.csv", w.into_inner()?);
    run.config(&serde_json::json!({ "tx": tx, "features": cfg }))?;
    run.commit(out)?;
    Ok(())
}

#[derive(Args)]
pub struct ConvertArgs {
    /// Measurement CSV.
    #[arg(long)]
    measurements: PathBuf,
    /// Simulated points CSV as written by `simulate`.
    #[arg(long)]
    sim: PathBuf,
    /// Matching radius in meters.
    #[arg(long)]
    max_dist: Option<f64>,
    /// DSM whose cellsize sets the default matching radius (2 cells).
    #[arg(long)]
    dsm: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "per-cell")]
    grouping: GroupingArg,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum GroupingArg {
    PerSite,
    PerCell,
}

pub fn convert(args: ConvertArgs, out: &Path) -> Result<()> {
    let mut run = Run::new("convert");
    let max_dist = match (args.max_dist, &args.dsm) {
        (Some(d), _) => d,
        (None, Some(p)) => {
            let r = Raster::from_ascii_grid(&run.read_input_string(p)?)
                .with_context(|| format!("{}", p.display()))?;
            2.0 * r.cellsize()
        }
        (None, None) => bail!("give --max-dist or --dsm to set the matching radius"),
    };
    let grouping = match args.grouping {
        GroupingArg::PerSite => OffsetGrouping::PerSite,
        GroupingArg::PerCell => OffsetGrouping::PerCell,
    };
    let ms_bytes = run.read_input(&args.measurements)?;
    let measurements = read_measurements(ms_bytes.as_slice())
        .with_context(|| format!("{}", args.measurements.display()))?;
    let sim_bytes = run.read_input(&args.sim)?;
    let sims =
        read_sim_points(sim_bytes.as_slice()).with_context(|| format!("{}", args.sim.display()))?;

    let mut by_site: BTreeMap<&str, Vec<RsrpMeasurement>> = BTreeMap::new();
    for m in &measurements {
        by_site.entry(&m.site_id).or_default().push(m.clone());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "x",
        "y",
        "site_id",
        "cell_id",
        "freq_mhz",
        "rsrp_dbm",
        "pathloss_db",
    ])?;
    let mut offsets = Vec::new();
    let mut unmatched = BTreeMap::new();
    for (site, ms) in &by_site {
        let pts: Vec<_> = sims
            .iter()
            .filter(|s| s.site == *site)
            .map(|s| s.point)
            .collect();
        ensure!(!pts.is_empty(), "no simulated points for site `{site}`");
        let conv = convert_measurements(ms, &pts, max_dist, grouping)
            .with_context(|| format!("site `{site}`"))?;
        for row in &conv.rows {
            let m = &ms[row.measurement];
            w.write_record([
                m.x.to_string(),
                m.y.to_string(),
                m.site_id.clone(),
                m.cell_id.clone().unwrap_or_default(),
                row.freq.to_string(),
                m.rsrp.to_string(),
                row.pathloss.to_string(),
            ])?;
        }
        unmatched.insert(site.to_string(), conv.unmatched);
        offsets.extend(conv.offsets);
    }
    run.add("pathloss.csv", w.into_inner()?);
    run.add("offsets.json", offsets_to_json(&offsets)? + "\n");
    run.note("unmatched", unmatched)?;
    run.config(&serde_json::json!({ "max_dist": max_dist, "grouping": grouping }))?;
    run.commit(out)?;
    Ok(())
}

fn read_datasets(run: &mut Run, paths: &[PathBuf]) -> Result<Vec<DatasetRow>> {
    let mut rows = Vec::new();
    for p in paths {
        let bytes = run.read_input(p)?;
        rows.extend(read_dataset(bytes.as_slice()).with_context(|| format!("{}", p.display()))?);
    }
    Ok(rows)
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset CSVs; rows are concatenated in the given order.
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Training config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_trees: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_samples_leaf: Option<usize>,
    #[arg(long)]
    subsample: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model inputs, comma separated.
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
}

pub fn train(args: TrainArgs, out: &Path) -> Result<()> {
    let mut run = Run::new("train");
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => parse_json(&run.read_input_string(p)?, p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.n_trees {
        cfg.n_trees = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.max_depth {
        cfg.max_depth = v;
    }
    if let Some(v) = args.min_samples_leaf {
        cfg.min_samples_leaf = v;
    }
    if let Some(v) = args.subsample {
        cfg.subsample = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.features {
        cfg.feature_names = v;
    }
    cfg.validate()?;
    let rows = read_datasets(&mut run, &args.data)?;
    let data = pipeline::training_data(&rows, &cfg.feature_names)?;
    let model = gbm::fit_data(&data, &cfg)?;
    run.seed("gbm", cfg.seed);
    run.note("n_rows", rows.len())?;
    run.config(&cfg)?;
    run.add("model.json", gbm::save_model(&model));
    run.commit(out)?;
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Score {
    mae_db: f64,
    n: usize,
}

pub fn eval(args: EvalArgs, out: &Path) -> Result<()> {
    let mut run = Run::new("eval");
    let model = gbm::load_model(&run.read_input_string(&args.model)?)
        .with_context(|| format!("{}", args.model.display()))?;
    let rows = read_datasets(&mut run, &args.data)?;
    ensure!(!rows.is_empty(), "no rows to evaluate");
    let pred = pipeline::predict_rows(&model, &rows)?;
    let truth: Vec<f64> = rows.iter().map(|r| r.pathloss).collect();
    let total = Score {
        mae_db: gbm::mae(&pred, &truth)?,
        n: rows.len(),
    };

    let mut per_site: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["site", "source", "freq_mhz", "pathloss_db", "predicted_db"])?;
    for ((r, p), t) in rows.iter().zip(&pred).zip(&truth) {
        let e = per_site.entry(r.site.clone()).or_default();
        e.0.push(*p);
        e.1.push(*t);
        w.write_record([
            r.site.clone(),
            r.source.to_string(),
            r.features.freq.to_string(),
            t.to_string(),
            p.to_string(),
        ])?;
    }
    let per_site = per_site
        .into_iter()
        .map(|(s, (p, t))| {
            Ok((
                s,
                Score {
                    mae_db: gbm::mae(&p, &t)?,
                    n: p.len(),
                },
            ))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    println!("mae_db={} n={}", total.mae_db, total.n);
    let report = serde_json::json!({ "total": total, "per_site": per_site });
    run.add("eval.json", serde_json::to_string_pretty(&report)? + "\n");
    run.add("predictions.csv", w.into_inner()?);
    run.commit(out)?;
    Ok(())
}

#[derive(Args)]
pub struct ExperimentArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn run_and_stage(run: &mut Run, config: ExperimentConfig) -> Result<()> {
    run.seed("top", config.seed);
    for id in config.sites.keys() {
        for purpose in ["terrain", "grid", "drive", "split"] {
            run.seed(
                &format!("{purpose}:{id}"),
                derive_seed(config.seed, &format!("{purpose}:{id}"), 0),
            );
        }
    }
    run.config(&config)?;
    let model_cfg = config.model.clone();
    let out = pipeline::run_experiment(config)?;

    let text = out.table.render(&model_cfg);
    print!("{text}");
    run.add("results.csv", out.table.to_csv());
    run.add("results.txt", text);
    for (i, s) in out.scenarios.iter().enumerate() {
        run.add(
            format!("models/{:02}_{}.json", i + 1, file_label(&s.label)),
            gbm::save_model(&s.model),
        );
    }
    if let Some((table, sweep)) = &out.sweep {
        run.add("sweep.csv", sweep.to_csv());
        run.add("sweep_results.csv", table.to_csv());
    }
    run.add(
        "sites.json",
        serde_json::to_string_pretty(&out.reports)? + "\n",
    );
    run.note("config_digest", &out.digest)?;
    Ok(())
}

pub fn experiment(args: ExperimentArgs, out: &Path) -> Result<()> {
    let mut run = Run::new("experiment");
    let text = run.read_input_string(&args.config)?;
    let mut config =
        ExperimentConfig::from_json(&text).with_context(|| format!("{}", args.config.display()))?;
    config.resolve_paths(args.config.parent().unwrap_or(Path::new(".")));
    if let Some(s) = args.seed {
        config.seed = s;
    }
    for site in config.sites.values() {
        if let TerrainSource::Files { dsm, dhm } = &site.terrain {
            run.read_input(dsm)?;
            run.read_input(dhm)?;
        }
        if let Some(MeasurementSource::Csv(p)) = &site.measurements {
            run.read_input(p)?;
        }
    }
    run_and_stage(&mut run, config)?;
    run.commit(out)?;
    Ok(())
}

#[derive(Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// `table`: three training sets scored on two sites. `repetition`: the
    /// real-data repetition sweep on one site (several minutes).
    #[arg(long, value_enum, default_value_t = DemoProfile::Table)]
    profile: DemoProfile,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DemoProfile {
    Table,
    Repetition,
}

pub fn demo(args: DemoArgs, out: &Path) -> Result<()> {
    let mut run = Run::new("demo");
    let config = match args.profile {
        DemoProfile::Table => demo_config(args.seed),
        DemoProfile::Repetition => repetition_config(args.seed),
    };
    run.add(
        "demo_config.json",
        serde_json::to_string_pretty(&config)? + "\n",
    );
    run_and_stage(&mut run, config)?;
    run.commit(out)?;
    Ok(())
}
