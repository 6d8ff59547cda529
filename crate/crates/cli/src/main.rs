use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use wavepin::assign::{k_best_assignments, KBestOptions, LikelihoodMatrix, LOG_FLOOR};
use wavepin::classifier::{self, MlpWeights};
use wavepin::config::Config;
use wavepin::estimate::{self, ShotPair};
use wavepin::io::{self, fmt_f64, Table};
use wavepin::manifest::{OutputDir, RunManifest, MANIFEST_FILE};
use wavepin::par::Execution;
use wavepin::pipeline;
use wavepin::Error;

/// Simulation and analysis of single-atom wave-packet expansion in a pinned
/// triangular lattice.
#[derive(Parser, Debug)]
#[command(name = "wavepin", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// TOML configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override a configuration key, e.g. `--set experiment.shots=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate shots and write their records (and optionally frames).
    Simulate {
        /// Render and save the frame pair of the first N shots of every series.
        #[arg(long, default_value_t = 0)]
        frames: usize,
    },
    /// Recover the lattice from a PGM frame.
    Reconstruct {
        #[arg(long)]
        image: PathBuf,
    },
    /// Classify the occupancy of every site of a PGM frame.
    Classify {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Rank the K best assignments of a square log-likelihood matrix (CSV).
    Assign {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
    },
    /// Fit the displacement model to detected positions
    /// (CSV: shot,image,x_m,y_m with image 1 or 2).
    Estimate {
        #[arg(long)]
        positions: PathBuf,
    },
    /// Full simulate → image → reconstruct → classify → assign → estimate → fit chain.
    Pipeline {
        /// Pre-trained classifier weights.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Sideband-cooling master-equation simulation.
    Rsc {
        /// Time step in seconds (config value when absent).
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Kinetic-energy ratio of the lattice release.
    Release,
    /// Train the occupancy classifier on a synthetic corpus.
    Train,
    /// Check determinism and manifest integrity on a reduced pipeline.
    Selftest,
}

fn apply_override(doc: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment.split_once('=').with_context(|| format!("override '{assignment}' is not KEY=VALUE"))?;
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().context("empty override key")?;
    let mut table = doc;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("'{p}' is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn load_config(g: &Global) -> anyhow::Result<Config> {
    let base = match &g.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => Config::default().to_toml(),
    };
    let mut doc: toml::Table = toml::from_str(&base).map_err(|e| Error::Config(e.to_string()))?;
    for o in &g.overrides {
        apply_override(&mut doc, o).map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut cfg = Config::from_toml(&toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execution(g: &Global) -> Execution {
    if g.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn open_out(g: &Global, cmd: &str, cfg: &Config) -> anyhow::Result<OutputDir> {
    Ok(OutputDir::create(&g.out, cmd, cfg.seed, cfg.to_toml())?)
}

fn finish(out: OutputDir) -> anyhow::Result<()> {
    let root = out.root().to_path_buf();
    let m = out.finish()?;
    println!("wrote {} files to {} (see {MANIFEST_FILE})", m.outputs.len(), root.display());
    Ok(())
}

fn cmd_simulate(g: &Global, frames: usize) -> anyhow::Result<()> {
    let cfg = load_config(g)?;
    let exec = execution(g);
    let mut out = open_out(g, "simulate", &cfg)?;
    let specs = pipeline::series_specs(&cfg)?;
    let t0 = Instant::now();
    let mut records = Vec::with_capacity(specs.len());
    for spec in &specs {
        let recs = pipeline::simulate_series(&cfg, spec, exec)?;
        for (k, r) in recs.iter().take(frames).enumerate() {
            let [a, b] = pipeline::render_shot(&cfg, spec, k, r)?;
            for (tag, img) in [("first", a), ("second", b)] {
                let mut buf = Vec::new();
                io::write_pgm(&img, &mut buf)?;
                out.write(&format!("frames/series{:03}_shot{:04}_{tag}.pgm", spec.index, k), &buf)?;
            }
        }
        records.push(recs);
    }
    out.timing("simulate", t0.elapsed().as_secs_f64());
    out.write_str("shots.csv", &pipeline::shots_table(&specs, &records).render())?;
    finish(out)
}

fn read_frame(cfg: &Config, path: &Path) -> anyhow::Result<wavepin::imager::SyntheticImage> {
    Ok(io::load_pgm(path, cfg.camera)?)
}

fn cmd_reconstruct(g: &Global, image: &Path) -> anyhow::Result<()> {
    let cfg = load_config(g)?;
    let img = read_frame(&cfg, image)?;
    let mut out = open_out(g, "reconstruct", &cfg)?;
    let (lat, threshold) = pipeline::reconstruct_frame(&cfg, &img)?;
    let mut t = Table::new(&["a1_x", "a1_y", "a2_x", "a2_y", "origin_x", "origin_y", "rms_residual_px", "threshold"]);
    t.push(
        [lat.a1.x, lat.a1.y, lat.a2.x, lat.a2.y, lat.phase_offset.x, lat.phase_offset.y, lat.rms_residual, threshold]
            .iter()
            .map(|v| fmt_f64(*v))
            .collect(),
    );
    out.write_str("lattice.csv", &t.render())?;
    let mut s = Table::new(&["x_px", "y_px"]);
    for p in &lat.site_positions {
        s.push(vec![fmt_f64(p.x), fmt_f64(p.y)]);
    }
    out.write_str("sites.csv", &s.render())?;
    out.summary("sites", lat.site_positions.len() as f64);
    finish(out)
}

fn load_weights(path: &Path) -> anyhow::Result<MlpWeights> {
    let f = std::fs::File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    Ok(MlpWeights::read_from(std::io::BufReader::new(f))?)
}

fn cmd_classify(g: &Global, image: &Path, weights: &Path) -> anyhow::Result<()> {
    let cfg = load_config(g)?;
    let img = read_frame(&cfg, image)?;
    let w = load_weights(weights)?;
    let mut out = open_out(g, "classify", &cfg)?;
    let (lat, _) = pipeline::reconstruct_frame(&cfg, &img)?;
    let mut t = Table::new(&["x_px", "y_px", "probability", "occupied"]);
    let mut occupied = 0usize;
    for p in &lat.site_positions {
        if let Some(roi) = classifier::extract_roi(&img, p) {
            let q = classifier::classify_raw(&w, &roi);
            occupied += usize::from(q > 0.5);
            t.push(vec![fmt_f64(p.x), fmt_f64(p.y), fmt_f64(q), u8::from(q > 0.5).to_string()]);
        }
    }
    out.write_str("occupancy.csv", &t.render())?;
    out.summary("occupied", occupied as f64);
    finish(out)
}

fn cmd_assign(g: &Global, matrix: &Path, k: usize) -> anyhow::Result<()> {
    let cfg = load_config(g)?;
    let text = std::fs::read_to_string(matrix).map_err(|e| Error::Config(format!("cannot read {}: {e}", matrix.display())))?;
    let (n, entries) = io::matrix_from_csv(&text)?;
    // -inf marks a forbidden pairing
    let entries = entries.into_iter().map(|v| if v == f64::NEG_INFINITY { LOG_FLOOR } else { v }).collect();
    let m = LikelihoodMatrix::from_square(n, entries)?;
    let mut out = open_out(g, "assign", &cfg)?;
    let t0 = Instant::now();
    let r = k_best_assignments(&m, KBestOptions::exact(k));
    out.timing("assign", t0.elapsed().as_secs_f64());
    let mut t = Table::new(&["rank", "log_likelihood", "relative_likelihood", "assignment"]);
    for (i, (e, rel)) in r.entries.iter().zip(&r.relative_likelihoods).enumerate() {
        let cols: Vec<String> = e.assignment.iter().map(|c| c.map(|c| c.to_string()).unwrap_or_else(|| "-".into())).collect();
        t.push(vec![(i + 1).to_string(), fmt_f64(e.log_likelihood), fmt_f64(*rel), cols.join(" ")]);
    }
    out.write_str("ranking.csv", &t.render())?;
    finish(out)
}

fn read_positions(path: &Path) -> anyhow::Result<Vec<ShotPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let t = Table::parse(&text)?;
    let (cs, ci, cx, cy) = (t.column("shot")?, t.column("image")?, t.column("x_m")?, t.column("y_m")?);
    let mut shots: std::collections::BTreeMap<u64, ShotPair> = Default::default();
    for r in 0..t.rows.len() {
        let shot: u64 = t.rows[r][cs].parse().map_err(|_| Error::format("CSV", format!("row {}: bad shot", r + 1)))?;
        let p = nalgebra::Vector2::new(t.f64_at(r, cx)?, t.f64_at(r, cy)?);
        let pair = shots.entry(shot).or_insert_with(|| ShotPair { first: Vec::new(), second: Vec::new() });
        match t.rows[r][ci].as_str() {
            "1" => pair.first.push(p),
            "2" => pair.second.push(p),
            other => return Err(Error::format("CSV", format!("row {}: image must be 1 or 2, got '{other}'", r + 1)).into()),
        }
    }
    Ok(shots.into_values().collect())
}

fn cmd_estimate(g: &Global, positions: &Path) -> anyhow::Result<()> {
    let cfg = load_config(g)?;
    let exec = execution(g);
    let shots = read_positions(positions)?;
    let mut out = open_out(g, "estimate", &cfg)?;
    let opts = pipeline::mle_options(&cfg)?;
    let init = cfg.estimate.init.to_model(cfg.lattice.spacing);
    let t0 = Instant::now();
    let fit = estimate::fit_model(&shots, &init, &opts, exec)?;
    out.timing("estimate", t0.elapsed().as_secs_f64());
    let (p, e) = (&fit.params, &fit.std_errors);
    let mut t = Table::new(&["parameter", "value", "std_error"]);
    for (name, v, s) in [
        ("p_ideal", p.p_ideal, e.p_ideal),
        ("sigma_x_m", p.sigma_x, e.sigma_x),
        ("sigma_y_m", p.sigma_y, e.sigma_y),
        ("p_hover", p.p_hover, e.p_hover),
        ("hover_length_m", p.hover_length, e.hover_length),
        ("p_loss", p.p_loss(), f64::NAN),
    ] {
        t.push(vec![name.into(), fmt_f64(v), fmt_f64(s)]);
    }
    out.write_str("fit.csv", &t.render())?;
    let mut tr = Table::new(&["iteration", "p_ideal", "sigma_x_m", "sigma_y_m", "p_hover", "hover_length_m", "log_likelihood"]);
    for (i, (m, l)) in fit.trajectory.iter().enumerate() {
        tr.push(vec![
            (i + 1).to_string(),
            fmt_f64(m.p_ideal),
            fmt_f64(m.sigma_x),
            fmt_f64(m.sigma_y),
            fmt_f64(m.p_hover),
            fmt_f64(m.hover_length),
            fmt_f64(*l),
        ]);
    }
    out.write_str("trajectory.csv", &tr.render())?;
    out.summary("log_likelihood", fit.total_log_likelihood);
    finish(out)
}

fn run_pipeline_into(cfg: &Config, weights: Option<&MlpWeights>, exec: Execution, out: &mut OutputDir) -> anyhow::Result<()> {
    let t0 = Instant::now();
    let report = pipeline::run_pipeline(cfg, weights, exec)?;
    out.timing("pipeline", t0.elapsed().as_secs_f64());
    pipeline::write_report(&report, out)?;
    for d in &report.depths {
        info!("depth {}: n_corrected {:.4} ± {:.4}", d.depth, d.n_corrected.0, d.n_corrected.1);
    }
    Ok(())
}

fn cmd_pipeline(g: &Global, weights: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(g)?;
    let w = weights.map(load_weights).transpose()?;
    let mut out = open_out(g, "pipeline", &cfg)?;
    run_pipeline_into(&cfg, w.as_ref(), execution(g), &mut out)?;
    finish(out)
}

fn cmd_rsc(g: &Global, dt: Option<f64>) -> anyhow::Result<()> {
    let cfg = load_config(g)?;
    let mut out = open_out(g, "rsc", &cfg)?;
    let t0 = Instant::now();
    let traj = pipeline::run_rsc(&cfg, dt.unwrap_or(cfg.rsc.dt))?;
    out.timing("rsc", t0.elapsed().as_secs_f64());
    out.write_str("rsc.csv", &pipeline::rsc_table(&traj).render())?;
    let last = traj.last();
    out.summary("nx_final", last.nx);
    out.summary("ny_final", last.ny);
    out.summary("max_trace_deviation", traj.max_trace_deviation);
    out.summary("min_eigenvalue", traj.min_eigenvalue);
    println!("final n_x = {:.4}, n_y = {:.4}", last.nx, last.ny);
    finish(out)
}

fn cmd_release(g: &Global) -> anyhow::Result<()> {
    let cfg = load_config(g)?;
    let mut out = open_out(g, "release", &cfg)?;
    let rows = pipeline::release_rows(&cfg)?;
    for r in &rows {
        println!("depth {:.3}: R = {:.2} %  δn = {:.3}", r.depth, 100.0 * r.ratio, r.delta_n);
    }
    out.write_str("release.csv", &pipeline::release_table(&rows).render())?;
    out.write_str("release_curve.csv", &pipeline::release_curve(&cfg)?.render())?;
    finish(out)
}

fn cmd_train(g: &Global) -> anyhow::Result<()> {
    let cfg = load_config(g)?;
    let exec = execution(g);
    let mut out = open_out(g, "train", &cfg)?;
    let t0 = Instant::now();
    let report = pipeline::train_classifier(&cfg, exec)?;
    out.timing("train", t0.elapsed().as_secs_f64());
    let fresh = pipeline::evaluate_classifier(&cfg, &report.weights, exec)?;
    let mut buf = Vec::new();
    report.weights.write_to(&mut buf)?;
    out.write("weights.bin", &buf)?;
    let mut t = Table::new(&["epoch", "loss"]);
    for (i, l) in report.learning_curve.iter().enumerate() {
        t.push(vec![(i + 1).to_string(), fmt_f64(*l)]);
    }
    out.write_str("learning_curve.csv", &t.render())?;
    out.summary("holdout_accuracy", report.holdout_accuracy);
    out.summary("fresh_frame_accuracy", fresh);
    println!("held-out accuracy {:.4}, fresh frames {:.4}", report.holdout_accuracy, fresh);
    finish(out)
}

/// Two reduced runs, one sequential and one parallel, must give identical
/// CSV bytes and clean manifests.
fn cmd_selftest(g: &Global) -> anyhow::Result<()> {
    let mut cfg = load_config(g)?;
    cfg.experiment.shots = cfg.experiment.shots.min(8);
    cfg.experiment.depths.truncate(2);
    cfg.experiment.render = false;
    cfg.estimate.k = cfg.estimate.k.min(50);
    let mut hashes = Vec::new();
    for (tag, exec) in [("a", Execution::Sequential), ("b", Execution::Parallel)] {
        let dir = g.out.join(format!("selftest_{tag}"));
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        let mut out = OutputDir::create(&dir, "selftest", cfg.seed, cfg.to_toml())?;
        run_pipeline_into(&cfg, None, exec, &mut out)?;
        let m = out.finish()?;
        let problems = RunManifest::load(&dir.join(MANIFEST_FILE))?.verify(&dir)?;
        if !problems.is_empty() {
            bail!("manifest check failed: {problems:?}");
        }
        let h: Vec<(String, String)> =
            m.outputs.iter().filter(|o| o.path.ends_with(".csv")).map(|o| (o.path.clone(), o.sha256.clone())).collect();
        hashes.push(h);
    }
    if hashes[0] != hashes[1] {
        bail!("sequential and parallel runs differ: {:?} vs {:?}", hashes[0], hashes[1]);
    }
    println!("selftest passed: {} CSV files identical across runs", hashes[0].len());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()).into());
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("thread pool")?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Simulate { frames } => cmd_simulate(g, *frames),
        Command::Reconstruct { image } => cmd_reconstruct(g, image),
        Command::Classify { image, weights } => cmd_classify(g, image, weights),
        Command::Assign { matrix, k } => cmd_assign(g, matrix, *k),
        Command::Estimate { positions } => cmd_estimate(g, positions),
        Command::Pipeline { weights } => cmd_pipeline(g, weights.as_deref()),
        Command::Rsc { dt } => cmd_rsc(g, *dt),
        Command::Release => cmd_release(g),
        Command::Train => cmd_train(g),
        Command::Selftest => cmd_selftest(g),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let input = e.downcast_ref::<Error>().is_some_and(Error::is_input_error);
            ExitCode::from(if input { 1 } else { 2 })
        }
    }
}
