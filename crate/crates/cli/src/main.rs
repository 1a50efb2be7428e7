use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use evospec::coherence::estimate_coherence;
use evospec::config::{describe_keys, RunConfig};
use evospec::io::{self, Grid, GridHeader, Manifest};
use evospec::pipeline::{run_pipeline, Init, Stages};
use evospec::render::{self, Scaling};
use evospec::signal::simulate;
use evospec::sweep::{format_table, run_sweep};
use evospec::Error;

#[derive(Parser)]
#[command(name = "evospec", version, about = "Time-varying spectrum estimation with adaptive kernel smoothing")]
#[command(after_help = concat!(
    "Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.\n",
    "EVOSPEC_THREADS caps the number of worker threads.\n",
    "Run `evospec keys` for every config key with its default."
))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a preset process and write the series.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Overrides `process.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the evolutionary spectrum of a series.
    Estimate {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Overrides `pipeline.init`.
        #[arg(long)]
        init: Option<Init>,
        /// Overrides `pipeline.stages`.
        #[arg(long)]
        stages: Option<Stages>,
    },
    /// Coherence and phase between two series.
    Coherence {
        #[arg(long)]
        input_a: PathBuf,
        #[arg(long)]
        input_b: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// MSE against the analytic log-spectrum over a range of tau*lambda_F.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Render a real grid as a plain PGM heatmap.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "linear")]
        scale: Scaling,
    },
    /// List every config key with its default.
    Keys,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_prefix: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config { .. } | Error::InvalidArgument { .. } => 2,
        Error::SeriesTooShort { .. } | Error::DimensionMismatch(_) | Error::Parse { .. } | Error::Io(_) => 3,
        Error::Numerical(_) | Error::InfeasibleKernel { .. } => 4,
        Error::Stage { .. } => unreachable!("root strips stage labels"),
    }
}

/// Config text (empty when no file is given) and the parsed config.
fn load_config(path: Option<&Path>) -> Result<(String, RunConfig), Error> {
    let text = match path {
        Some(p) => io::read_text(p).map_err(|e| Error::Config {
            key: p.display().to_string(),
            reason: e.to_string(),
        })?,
        None => String::new(),
    };
    let cfg = RunConfig::parse(&text)?;
    Ok((text, cfg))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<(), Error> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => std::fs::create_dir_all(d).map_err(|e| Error::Io(format!("{}: {e}", d.display()))),
        _ => Ok(()),
    }
}

fn write_real(prefix: &Path, name: &str, header: &GridHeader, a: &Array2<f64>, m: &mut Manifest) -> Result<(), Error> {
    let path = with_suffix(prefix, &format!(".{name}.grid"));
    ensure_parent(&path)?;
    io::write_grid(&path, &Grid::real(header.clone().with_name(name), a.clone()))?;
    m.push(format!("output.{name}"), path.display());
    Ok(())
}

fn write_manifest(prefix: &Path, m: &Manifest) -> Result<(), Error> {
    let path = with_suffix(prefix, ".manifest");
    let text = m.format();
    io::write_text(&path, &text)?;
    if Manifest::parse(&io::read_text(&path)?)? != *m {
        return Err(Error::Io(format!("{}: manifest did not round-trip", path.display())));
    }
    Ok(())
}

fn cmd_simulate(config: Option<&Path>, output: &Path, seed: Option<u64>) -> Result<(), Error> {
    let (_, cfg) = load_config(config)?;
    let p = &cfg.process;
    let seed = seed.unwrap_or(p.seed);
    let x = simulate::<f64>(&p.spec()?, p.n_samples, p.n_freq_bins, seed)?;
    let text = io::format_series(&x, Some(seed), &[("preset".to_string(), p.preset.name().to_string())]);
    ensure_parent(output)?;
    io::write_text(output, &text)?;
    if io::read_series(output)?.series != x {
        return Err(Error::Io(format!("{}: series did not round-trip", output.display())));
    }
    Ok(())
}

fn cmd_estimate(input: &Path, common: &Common, init: Option<Init>, stages: Option<Stages>) -> Result<(), Error> {
    let (text, mut cfg) = load_config(common.config.as_deref())?;
    if let Some(i) = init {
        cfg.pipeline.init = i;
    }
    if let Some(s) = stages {
        cfg.pipeline.stages = s;
    }
    cfg.pipeline.validate()?;
    let file = io::read_series(input)?;
    let report = run_pipeline(&file.series, &cfg.pipeline)?;
    let hash = io::provenance_hash(&text);
    let g = &report.point.geometry;
    let header = GridHeader::from_geometry(g, file.series.len()).with_provenance(&hash);
    let d = &report.diagnostics;

    let mut m = Manifest::default();
    m.push("command", "estimate");
    m.push("config_hash", &hash);
    m.push("input", input.display());
    m.push("n_samples", file.series.len());
    if let Some(s) = file.seed {
        m.push("input_seed", s);
    }
    m.push("lattice.n_f", g.n_f);
    m.push("lattice.n_t", g.n_t());
    m.push("taper.length", d.taper.length);
    m.push("taper.bandwidth", io::fmt_f64(d.taper.bandwidth));
    m.push("final_order", d.final_order);
    m.push("degenerate_cells", report.point.degenerate.len());
    for s in &d.stages {
        m.push(format!("stage.{}.seconds", s.name), format!("{:.6}", s.seconds));
        for (axis, ht, hf) in &s.halfwidths {
            m.push(format!("stage.{}.{axis}.h_t", s.name), io::fmt_f64(*ht));
            m.push(format!("stage.{}.{axis}.h_f", s.name), io::fmt_f64(*hf));
        }
    }
    if let Some(r) = &d.rice {
        m.push("rice.evaluations", r.table.len());
        m.push("rice.h_t", io::fmt_f64(r.h_t));
        m.push("rice.h_f", io::fmt_f64(r.h_f));
    }
    m.push("global.h_t", io::fmt_f64(d.global_h.0));
    m.push("global.h_f", io::fmt_f64(d.global_h.1));
    m.push("rho", io::fmt_f64(d.rho));
    m.push("flags.regularized", report.halfwidths.regularized_count());
    m.push("flags.clamped", report.halfwidths.clamped_count());
    m.push("continuity.max_jump_t", io::fmt_f64(d.continuity.max_jump_t));
    m.push("continuity.max_jump_f", io::fmt_f64(d.continuity.max_jump_f));
    m.push("continuity.iqr_t", io::fmt_f64(d.continuity.iqr_t));
    m.push("continuity.iqr_f", io::fmt_f64(d.continuity.iqr_f));
    m.push("continuity.discontinuous", d.continuity.discontinuous);
    m.push("point_bias.mean", io::fmt_f64(d.mean_point_bias));
    m.push("expected_loss.mean", io::fmt_f64(report.mean_expected_loss()));
    for w in &d.warnings {
        m.push("warning", w);
    }
    let p = &common.out_prefix;
    write_real(p, "theta_hat", &header, &report.theta_hat.theta, &mut m)?;
    write_real(p, "s_hat", &header, &report.s_hat, &mut m)?;
    write_real(p, "h_t", &header, &report.halfwidths.h_t, &mut m)?;
    write_real(p, "h_f", &header, &report.halfwidths.h_f, &mut m)?;
    write_real(p, "expected_loss", &header, &report.expected_loss, &mut m)?;
    write_real(p, "confidence", &header, &report.confidence_halfwidth, &mut m)?;
    write_manifest(p, &m)
}

fn cmd_coherence(a: &Path, b: &Path, common: &Common) -> Result<(), Error> {
    let (text, cfg) = load_config(common.config.as_deref())?;
    let x1 = io::read_series(a)?.series;
    let x2 = io::read_series(b)?.series;
    let est = estimate_coherence(&x1, &x2, &cfg.pipeline)?;
    let hash = io::provenance_hash(&text);
    let header = GridHeader::from_geometry(&est.raw.geometry, x1.len()).with_provenance(&hash);
    let mut m = Manifest::default();
    m.push("command", "coherence");
    m.push("config_hash", &hash);
    m.push("input_a", a.display());
    m.push("input_b", b.display());
    m.push("k_tapers", est.raw.k_tapers);
    m.push("q_bias", io::fmt_f64(est.raw.q_bias()));
    m.push("phase_undefined", est.smoothed.phase_undefined.len());
    for w in &est.report.diagnostics.warnings {
        m.push("warning", w);
    }
    let p = &common.out_prefix;
    write_real(p, "coherence", &header, &est.smoothed.coherence, &mut m)?;
    write_real(p, "q", &header, &est.smoothed.q, &mut m)?;
    write_real(p, "phase", &header, &est.smoothed.phase(), &mut m)?;
    write_manifest(p, &m)
}

fn cmd_sweep(config: Option<&Path>, output: &Path) -> Result<(), Error> {
    let (_, cfg) = load_config(config)?;
    let table = run_sweep(&cfg.sweep, &cfg.pipeline)?;
    ensure_parent(output)?;
    io::write_text(output, &format_table(&table))
}

fn cmd_render(input: &Path, output: &Path, scale: Scaling) -> Result<(), Error> {
    let grid = io::read_grid(input)?;
    let a = grid.as_real()?;
    let img = render::render(a, scale)?;
    let text = render::format_pgm(&img);
    ensure_parent(output)?;
    io::write_text(output, &text)?;
    if render::parse_pgm(&io::read_text(output)?)? != img {
        return Err(Error::Io(format!("{}: image did not round-trip", output.display())));
    }
    io::write_text(&with_suffix(output, ".txt"), &render::sidecar(&grid.header, a, scale)?)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { config, output, seed } => cmd_simulate(config.as_deref(), &output, seed),
        Command::Estimate {
            input,
            common,
            init,
            stages,
        } => cmd_estimate(&input, &common, init, stages),
        Command::Coherence { input_a, input_b, common } => cmd_coherence(&input_a, &input_b, &common),
        Command::Sweep { config, output } => cmd_sweep(config.as_deref(), &output),
        Command::Render { input, output, scale } => cmd_render(&input, &output, scale),
        Command::Keys => {
            print!("{}", describe_keys());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("EVOSPEC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("evospec: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
