//! Command-line driver: tabulate masses and cell boundaries, sample bridges
//! and soups, run the scale-grid coupling verification, and emit plot data.
//!
//! Exit codes: 0 success, 2 configuration error, 3 precision exhaustion,
//! 4 memory guard.

use clap::{Parser, Subcommand};
use loopsoup::coupling::{self, BridgeSpec};
use loopsoup::error::Error;
use loopsoup::experiment::{verify_scale_grid, ExperimentConfig};
use loopsoup::io::{self, RunManifest};
use loopsoup::rng::{purpose, RandomStream, RootSeed, StreamKey};
use loopsoup::sequences::build_a_sequence;
use loopsoup::soup::{
    build_coupled_soup, sample_poisson_field, sample_subthreshold_brownian, sample_subthreshold_rw,
    SoupWindow,
};
use loopsoup::{bridges, masses, Variant};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "loopsoup",
    version,
    about = "Coupled random-walk and Brownian loop soups"
)]
struct Cli {
    /// Random seed; derived from the resolved config when omitted.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON file with default values for the subcommand flags; explicit
    /// flags win and the override is recorded in the manifest.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate per-cell loop masses as CSV (n, mass, abs_err).
    Masses {
        #[arg(long)]
        dim: Option<u32>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long = "n-max")]
        n_max: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the cell-boundary sequence as CSV
    /// (n, a_n, a_n - 2n/d, identity_residual).
    Aseq {
        #[arg(long)]
        dim: Option<u32>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long = "n-max")]
        n_max: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample bridges of one flavor as JSON-lines loops.
    SampleBridge {
        /// One of: brownian, rw-discrete, rw-continuous.
        #[arg(long)]
        flavor: Option<String>,
        #[arg(long)]
        dim: Option<u32>,
        #[arg(long)]
        tlen: Option<f64>,
        /// Dyadic levels for Brownian paths (default: resolution policy).
        #[arg(long)]
        levels: Option<u32>,
        /// Number of loops to sample.
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replicate coupled bridge pairs and record sup distances as CSV
    /// (rep, sup_dist, t_walk).
    CoupleBridge {
        #[arg(long)]
        dim: Option<u32>,
        #[arg(long)]
        variant: Option<String>,
        /// Walk size: 2n steps (discrete) or duration 2n (continuous).
        #[arg(long)]
        n: Option<u64>,
        #[arg(long)]
        reps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample the coupled loop soups in a window, one file pair per
    /// intensity level, plus a manifest.
    SampleSoup {
        #[arg(long)]
        dim: Option<u32>,
        #[arg(long)]
        variant: Option<String>,
        /// Comma-separated increasing intensity levels.
        #[arg(long)]
        lambda: Option<String>,
        #[arg(long)]
        radius: Option<f64>,
        /// Spatial scale N.
        #[arg(long)]
        scale: Option<u64>,
        #[arg(long = "n-max")]
        n_max: Option<u64>,
        /// Also sample the sub-threshold (uncoupled) loops down to this
        /// time-length floor.
        #[arg(long = "t-floor")]
        t_floor: Option<f64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the coupled-soup verification across a grid of scales and write
    /// a JSON report plus CSV tables.
    Verify {
        #[arg(long)]
        dim: Option<u32>,
        #[arg(long)]
        variant: Option<String>,
        /// Comma-separated scales, e.g. 8,16,32,64.
        #[arg(long = "scale-grid")]
        scale_grid: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        a: Option<f64>,
        #[arg(long)]
        reps: Option<u32>,
        #[arg(long = "calibration-reps", default_value_t = 200)]
        calibration_reps: usize,
        /// Memory guard on the expected loop count per rep.
        #[arg(long = "max-expected-loops", default_value_t = 2.0e7)]
        max_expected_loops: f64,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit tidy plot CSVs from verify reports.
    PlotData {
        /// Report files or directories containing report.json.
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error: could not size the thread pool: {e}");
            std::process::exit(2);
        }
    }
    let started = Instant::now();
    match run(cli, started) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

/// Resolves flag values against the optional config file: flags win, file
/// fills gaps, overrides are recorded as warnings.
struct Resolver {
    file: serde_json::Value,
    warnings: Vec<String>,
}

impl Resolver {
    fn load(path: &Option<PathBuf>) -> Result<Self, Error> {
        let file = match path {
            None => serde_json::Value::Null,
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: p.display().to_string(),
                    line: e.line(),
                    msg: e.to_string(),
                })?
            }
        };
        Ok(Resolver {
            file,
            warnings: Vec::new(),
        })
    }

    fn get<T>(&mut self, flag: Option<T>, key: &str) -> Result<T, Error>
    where
        T: serde::de::DeserializeOwned + std::fmt::Debug + PartialEq + Clone,
    {
        let from_file: Option<T> = self
            .file
            .get(key)
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| Error::Config(format!("config key {key:?}: {e}")))?;
        match (flag, from_file) {
            (Some(f), Some(c)) => {
                if f != c {
                    self.warnings
                        .push(format!("flag --{key}={f:?} overrides config value {c:?}"));
                }
                Ok(f)
            }
            (Some(f), None) => Ok(f),
            (None, Some(c)) => Ok(c),
            (None, None) => Err(Error::Config(format!(
                "missing --{key} (and no {key:?} in the config file)"
            ))),
        }
    }

    fn get_or<T>(&mut self, flag: Option<T>, key: &str, default: T) -> Result<T, Error>
    where
        T: serde::de::DeserializeOwned + std::fmt::Debug + PartialEq + Clone,
    {
        match self.get(flag, key) {
            Ok(v) => Ok(v),
            Err(Error::Config(msg)) if msg.starts_with("missing") => Ok(default),
            Err(e) => Err(e),
        }
    }
}

fn resolve_seed(
    explicit: Option<u64>,
    resolver: &mut Resolver,
    config_echo: &serde_json::Value,
) -> (u64, bool) {
    match resolver.get_or(explicit, "seed", u64::MAX) {
        Ok(u64::MAX) | Err(_) => (io::seed_from_config(config_echo), true),
        Ok(s) => (s, false),
    }
}

fn parse_variant(s: &str) -> Result<Variant, Error> {
    s.parse()
}

fn ensure_parent(path: &Path) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn run(cli: Cli, started: Instant) -> Result<(), Error> {
    let mut resolver = Resolver::load(&cli.config)?;
    match cli.command {
        Command::Masses {
            dim,
            variant,
            n_max,
            out,
        } => {
            let dim = resolver.get(dim, "dim")?;
            let variant = parse_variant(&resolver.get(variant, "variant")?)?;
            let n_max = resolver.get(n_max, "n-max")?;
            let out = resolver.get(out, "out")?;
            let echo = serde_json::json!({
                "command": "masses", "dim": dim, "variant": variant.as_str(), "n_max": n_max,
            });
            let (seed, derived) = resolve_seed(cli.seed, &mut resolver, &echo);
            let table = masses::MassTable::build(dim, variant, n_max)?;
            ensure_parent(&out)?;
            io::write_mass_csv(&table, &out)?;
            let mut manifest = RunManifest::new("masses", echo, seed, derived);
            manifest.warnings = resolver.warnings.clone();
            manifest.add_file(&out)?;
            manifest.wall_seconds = started.elapsed().as_secs_f64();
            manifest.write(&manifest_path(&out))?;
            println!("wrote {} ({} cells)", out.display(), n_max);
        }
        Command::Aseq {
            dim,
            variant,
            n_max,
            out,
        } => {
            let dim = resolver.get(dim, "dim")?;
            let variant = parse_variant(&resolver.get(variant, "variant")?)?;
            let n_max = resolver.get(n_max, "n-max")?;
            let out = resolver.get(out, "out")?;
            let echo = serde_json::json!({
                "command": "aseq", "dim": dim, "variant": variant.as_str(), "n_max": n_max,
            });
            let (seed, derived) = resolve_seed(cli.seed, &mut resolver, &echo);
            let seq = build_a_sequence(dim, variant, n_max)?;
            ensure_parent(&out)?;
            io::write_aseq_csv(&seq, &out)?;
            let mut manifest = RunManifest::new("aseq", echo, seed, derived);
            manifest.warnings = resolver.warnings.clone();
            manifest.add_file(&out)?;
            manifest.wall_seconds = started.elapsed().as_secs_f64();
            manifest.write(&manifest_path(&out))?;
            println!(
                "wrote {} (tail constant {:.6}, max identity residual {:.3e})",
                out.display(),
                seq.tail_constant,
                seq.max_identity_residual
            );
        }
        Command::SampleBridge {
            flavor,
            dim,
            tlen,
            levels,
            count,
            out,
        } => {
            let flavor = resolver.get(flavor, "flavor")?;
            let dim = resolver.get(dim, "dim")?;
            let tlen: f64 = resolver.get(tlen, "tlen")?;
            let out: PathBuf = resolver.get(out, "out")?;
            let echo = serde_json::json!({
                "command": "sample-bridge", "flavor": flavor, "dim": dim,
                "tlen": tlen, "count": count, "levels": levels,
            });
            let (seed, derived) = resolve_seed(cli.seed, &mut resolver, &echo);
            let root = RootSeed::from_u64(seed);
            let mut loops = Vec::with_capacity(count as usize);
            for i in 0..count {
                let mut stream = RandomStream::derive(
                    &root,
                    &StreamKey::new(purpose::BRIDGE_SAMPLER, 0, [0; 3], i),
                );
                let l = match flavor.as_str() {
                    "brownian" => {
                        let lv = levels.unwrap_or_else(|| {
                            bridges::default_levels(tlen.ceil().max(1.0) as u64)
                        });
                        bridges::sample_brownian_bridge(dim, tlen, lv, &mut stream)?
                    }
                    "rw-discrete" => {
                        let steps = tlen.round() as u64;
                        if steps == 0 || steps % 2 == 1 || (tlen - steps as f64).abs() > 1e-9 {
                            return Err(Error::Config(
                                "discrete walks need --tlen equal to a positive even integer"
                                    .into(),
                            ));
                        }
                        bridges::sample_discrete_bridge(dim, steps / 2, &mut stream)?
                    }
                    "rw-continuous" => bridges::sample_continuous_bridge(dim, tlen, &mut stream)?,
                    other => return Err(Error::Config(format!(
                        "unknown flavor {other:?}; expected brownian, rw-discrete or rw-continuous"
                    ))),
                };
                loops.push(l);
            }
            ensure_parent(&out)?;
            io::write_loops(&loops, &out)?;
            let mut manifest = RunManifest::new("sample-bridge", echo, seed, derived);
            manifest.warnings = resolver.warnings.clone();
            manifest.add_file(&out)?;
            manifest.wall_seconds = started.elapsed().as_secs_f64();
            manifest.write(&manifest_path(&out))?;
            println!("wrote {} ({count} loops)", out.display());
        }
        Command::CoupleBridge {
            dim,
            variant,
            n,
            reps,
            out,
        } => {
            let dim = resolver.get(dim, "dim")?;
            let variant = parse_variant(&resolver.get(variant, "variant")?)?;
            let n = resolver.get(n, "n")?;
            let reps = resolver.get(reps, "reps")?;
            let out: PathBuf = resolver.get(out, "out")?;
            if n < 1 {
                return Err(Error::Config("--n must be >= 1".into()));
            }
            let echo = serde_json::json!({
                "command": "couple-bridge", "dim": dim, "variant": variant.as_str(),
                "n": n, "reps": reps,
            });
            let (seed, derived) = resolve_seed(cli.seed, &mut resolver, &echo);
            let root = RootSeed::from_u64(seed);
            use rayon::prelude::*;
            let rows: Vec<(u64, f64, f64)> = (0..reps)
                .into_par_iter()
                .map(|rep| {
                    let key = StreamKey::new(purpose::COUPLE_SHARED, n, [0; 3], rep);
                    let spec = match variant {
                        Variant::Discrete => BridgeSpec::Steps(n),
                        Variant::Continuous => BridgeSpec::Duration(2.0 * n as f64),
                    };
                    let pair = coupling::couple_bridges(dim, variant, spec, &root, &key, None)
                        .expect("valid coupling");
                    (rep, pair.sup_dist, pair.walk.t_len)
                })
                .collect();
            ensure_parent(&out)?;
            io::write_couple_csv(&rows, &out)?;
            let mut manifest = RunManifest::new("couple-bridge", echo, seed, derived);
            manifest.warnings = resolver.warnings.clone();
            manifest.add_file(&out)?;
            manifest.wall_seconds = started.elapsed().as_secs_f64();
            manifest.write(&manifest_path(&out))?;
            println!("wrote {} ({reps} pairs)", out.display());
        }
        Command::SampleSoup {
            dim,
            variant,
            lambda,
            radius,
            scale,
            n_max,
            t_floor,
            out,
        } => {
            let dim = resolver.get(dim, "dim")?;
            let variant = parse_variant(&resolver.get(variant, "variant")?)?;
            let lambda_raw: String = resolver.get(lambda, "lambda")?;
            let radius = resolver.get(radius, "radius")?;
            let scale = resolver.get(scale, "scale")?;
            let n_max = resolver.get(n_max, "n-max")?;
            let out: PathBuf = resolver.get(out, "out")?;
            let lambda_levels = parse_grid_f64(&lambda_raw)?;
            let echo = serde_json::json!({
                "command": "sample-soup", "dim": dim, "variant": variant.as_str(),
                "lambda": lambda_levels, "radius": radius, "scale": scale,
                "n_max": n_max, "t_floor": t_floor,
            });
            let (seed, derived) = resolve_seed(cli.seed, &mut resolver, &echo);
            let root = RootSeed::from_u64(seed);
            let window = SoupWindow {
                d: dim,
                variant,
                n_scale: scale,
                radius,
                n_min: 1,
                n_max,
                lambda_levels: lambda_levels.clone(),
            };
            window.validate()?;
            let seq = build_a_sequence(dim, variant, n_max.min(20_000))?;
            let field = sample_poisson_field(&window, &root, Some(2.0e7))?;
            std::fs::create_dir_all(&out)?;
            let mut manifest = RunManifest::new("sample-soup", echo, seed, derived);
            manifest.warnings = resolver.warnings.clone();
            for &level in &lambda_levels {
                let soup = build_coupled_soup(&field, &seq, level, &root)?;
                let rw_path = out.join(format!("rw-loops-lambda-{level}.jsonl"));
                let br_path = out.join(format!("br-loops-lambda-{level}.jsonl"));
                io::write_loops(&soup.rw_soup, &rw_path)?;
                io::write_loops(&soup.br_soup, &br_path)?;
                manifest.add_file(&rw_path)?;
                manifest.add_file(&br_path)?;
                println!("lambda {level}: {} coupled pairs", soup.pairing.len());
            }
            if let Some(floor) = t_floor {
                let top = *lambda_levels.last().unwrap();
                let rw = sample_subthreshold_rw(&window, floor, top, &root)?;
                let br = sample_subthreshold_brownian(&window, &seq, floor, top, &root)?;
                let rw_path = out.join("uncoupled-rw-subthreshold.jsonl");
                let br_path = out.join("uncoupled-br-subthreshold.jsonl");
                io::write_loops(&rw, &rw_path)?;
                io::write_loops(&br, &br_path)?;
                manifest.add_file(&rw_path)?;
                manifest.add_file(&br_path)?;
                println!(
                    "sub-threshold (uncoupled): {} walk loops, {} brownian loops",
                    rw.len(),
                    br.len()
                );
            }
            manifest.wall_seconds = started.elapsed().as_secs_f64();
            manifest.write(&out.join("manifest.json"))?;
        }
        Command::Verify {
            dim,
            variant,
            scale_grid,
            lambda,
            radius,
            theta,
            a,
            reps,
            calibration_reps,
            max_expected_loops,
            out,
        } => {
            let dim = resolver.get(dim, "dim")?;
            let variant = parse_variant(&resolver.get(variant, "variant")?)?;
            let grid_raw: String = resolver.get(scale_grid, "scale-grid")?;
            let lambda = resolver.get(lambda, "lambda")?;
            let radius = resolver.get(radius, "radius")?;
            let theta = resolver.get(theta, "theta")?;
            let a = resolver.get(a, "a")?;
            let reps = resolver.get(reps, "reps")?;
            let out: PathBuf = resolver.get(out, "out")?;
            let grid = parse_grid_u64(&grid_raw)?;
            let echo = serde_json::json!({
                "command": "verify", "dim": dim, "variant": variant.as_str(),
                "scale_grid": grid, "lambda": lambda, "radius": radius,
                "theta": theta, "a": a, "reps": reps,
                "calibration_reps": calibration_reps,
            });
            let (seed, derived) = resolve_seed(cli.seed, &mut resolver, &echo);
            let base = ExperimentConfig {
                d: dim,
                variant,
                n_scale: *grid
                    .first()
                    .ok_or_else(|| Error::Config("scale grid must not be empty".into()))?,
                radius,
                lambda,
                theta,
                a,
                reps,
                seed,
                max_expected_loops,
                calibration_reps,
                threshold_override: None,
            };
            base.validate()?;
            let report = verify_scale_grid(&base, &grid)?;
            std::fs::create_dir_all(&out)?;
            let report_path = out.join("report.json");
            io::write_report_json(&report, &report_path)?;
            let mut files = io::emit_plot_data(&[&report], &out)?;
            files.push(report_path);
            let mut manifest = RunManifest::new("verify", echo, seed, derived);
            manifest.warnings = resolver.warnings.clone();
            for f in &files {
                manifest.add_file(f)?;
            }
            manifest.wall_seconds = started.elapsed().as_secs_f64();
            manifest.write(&out.join("manifest.json"))?;
            for r in &report.per_scale {
                println!(
                    "N={:4}: pairs {}, gap {:.3e} <= {:.3e}, p99 {:.4e}, events A={} largeN={}",
                    r.config.n_scale,
                    r.correspondence_size,
                    r.time_gap_max,
                    r.time_gap_bound,
                    r.sup_dist_percentiles[2],
                    r.event_a_count,
                    r.large_n_count,
                );
            }
            println!(
                "normalized p99 spread across the grid: {:.3}",
                report.ratio_spread
            );
        }
        Command::PlotData { input, out } => {
            let out: PathBuf = resolver.get(out, "out")?;
            if input.is_empty() {
                return Err(Error::Config("--input needs at least one path".into()));
            }
            let mut reports = Vec::new();
            for path in &input {
                if path.is_dir() {
                    let candidate = path.join("report.json");
                    if candidate.exists() {
                        reports.push(io::read_report_json(&candidate)?);
                    }
                } else {
                    reports.push(io::read_report_json(path)?);
                }
            }
            if reports.is_empty() {
                return Err(Error::Config("no report.json found under --input".into()));
            }
            let refs: Vec<&loopsoup::experiment::VerifyReport> = reports.iter().collect();
            let files = io::emit_plot_data(&refs, &out)?;
            let echo = serde_json::json!({
                "command": "plot-data",
                "input": input.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            });
            let (seed, derived) = resolve_seed(cli.seed, &mut resolver, &echo);
            let mut manifest = RunManifest::new("plot-data", echo, seed, derived);
            manifest.warnings = resolver.warnings.clone();
            for f in &files {
                manifest.add_file(f)?;
            }
            manifest.wall_seconds = started.elapsed().as_secs_f64();
            manifest.write(&out.join("manifest.json"))?;
            println!("wrote {} plot files to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    name.push_str(".manifest.json");
    out.with_file_name(name)
}

fn parse_grid_u64(raw: &str) -> Result<Vec<u64>, Error> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| Error::Config(format!("bad scale {s:?}: {e}")))
        })
        .collect()
}

fn parse_grid_f64(raw: &str) -> Result<Vec<f64>, Error> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad level {s:?}: {e}")))
        })
        .collect()
}
