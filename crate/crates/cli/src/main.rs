//! `impsamp`: train, reproduce, time and verify importance-sampled SGD.

mod fetch;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use impsamp::experiment::{
    fig2_cells, parse_experiment, run_cells, timing_table, write_outputs, write_record, MetricSettings, RunConfig,
    RunRecord, SchemeKind,
};
use impsamp::metric::{aggregate, write_csv, DEFAULT_BINS};
use impsamp::model::{gradient_check, Architecture};
use impsamp::optim::{OptimizerKind, SecondMoment};
use impsamp::speed::check::{oracle_suite, sandwich_suite};

#[derive(Parser, Debug)]
#[command(name = "impsamp", version, about = "Importance-sampling SGD laboratory")]
struct Cli {
    /// Base seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML experiment file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run and write its record.
    Train(TrainArgs),
    /// Loss curves for every optimizer x scheme cell.
    #[command(name = "reproduce-fig2")]
    ReproduceFig2(GridArgs),
    /// Wall-clock per optimizer x scheme, run sequentially.
    Timing(GridArgs),
    /// Track the scheme-quality metric along one training run.
    #[command(name = "eval-scheme")]
    EvalScheme(EvalArgs),
    /// Closed-form convergence speeds against exact enumeration.
    #[command(name = "speed-check")]
    SpeedCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Backprop gradients against central finite differences.
    #[command(name = "grad-check")]
    GradCheck {
        #[arg(long, default_value_t = 20)]
        probes: usize,
        /// Random CNN coordinates checked per probe.
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Download the MNIST IDX files.
    #[command(name = "fetch-data")]
    FetchData {
        /// Destination directory [default: $IMPSAMP_DATA_DIR or data/mnist].
        #[arg(long)]
        dest: Option<PathBuf>,
        /// Gzipped tarball containing the four IDX files.
        #[arg(long, default_value = fetch::DEFAULT_URL)]
        url: String,
    },
    /// Randomized check of H(p_gn) <= H(p) <= H(u) inside the box.
    #[command(name = "verify-theorem")]
    VerifyTheorem {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
}

/// Overrides applied on top of the config file.
#[derive(Args, Debug, Clone, Default)]
struct RunOverrides {
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// `uniform`, `gradnorm` or `mix:<t>`.
    #[arg(long)]
    scheme: Option<SchemeKind>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Second moment of RMSProp/ADAM: `elementwise` or `paper-scalar`.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<SecondMoment>,
    /// `cnn` or `mlp:<in>-<hidden>...-<classes>`.
    #[arg(long)]
    model: Option<Architecture>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOverrides,
    #[arg(long, default_value_t = 0)]
    run_index: usize,
    /// Config cell to start from (default: the first).
    #[arg(long)]
    cell: Option<String>,
    /// Also record the scheme-quality metric.
    #[arg(long)]
    metric: bool,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    run: RunOverrides,
    #[arg(long)]
    repetitions: Option<usize>,
    /// 45 runs of 300 steps instead of 5 of 100.
    #[arg(long)]
    full: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Scheme to assess [default: the training scheme].
    #[arg(long)]
    candidate: Option<SchemeKind>,
    /// Subset size M.
    #[arg(long, default_value_t = impsamp::metric::DEFAULT_SUBSET)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    cadence: usize,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
}

fn parse_mode(s: &str) -> Result<SecondMoment, String> {
    match s {
        "elementwise" => Ok(SecondMoment::Elementwise),
        "paper-scalar" | "scalar" => Ok(SecondMoment::PaperScalar),
        _ => Err(format!("unknown mode `{s}` (elementwise | paper-scalar)")),
    }
}

impl RunOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(k) = self.optimizer {
            cfg.optimizer.kind = k;
        }
        if let Some(s) = self.scheme {
            cfg.scheme = s;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(v) = self.mode {
            cfg.optimizer.mode = v;
        }
        if let Some(v) = &self.model {
            cfg.model = v.clone();
        }
        if let Some(v) = &self.data_dir {
            cfg.data_dir = Some(v.clone());
        }
    }
}

fn load_cells(cli: &Cli) -> Result<Vec<(String, RunConfig)>> {
    let mut cells = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_experiment(&text)
                .with_context(|| format!("parsing {}", path.display()))?
                .cells
        }
        None => vec![("default".into(), RunConfig::default())],
    };
    for (_, cfg) in &mut cells {
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        cfg.out = Some(cli.out.clone());
    }
    Ok(cells)
}

fn cell_name(cfg: &RunConfig) -> String {
    format!("{}-{}", cfg.optimizer.kind, cfg.scheme.slug())
}

fn progress(cell: &str, r: &RunRecord) {
    match &r.aborted {
        None => eprintln!(
            "{cell} run {}: final loss {:.5} ({:.1} s)",
            r.run_index,
            r.final_loss().unwrap_or(f64::NAN),
            r.wall_clock_secs
        ),
        Some(why) => eprintln!("{cell} run {}: ABORTED {why}", r.run_index),
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<bool> {
    let cells = load_cells(cli)?;
    let (_, mut cfg) = match &args.cell {
        Some(name) => cells
            .into_iter()
            .find(|(n, _)| n == name)
            .with_context(|| format!("no cell `{name}` in the config"))?,
        None => cells.into_iter().next().expect("at least one cell"),
    };
    args.run.apply(&mut cfg);
    if args.metric {
        cfg.metric.enabled = true;
    }
    let record = impsamp::experiment::run_training(&cfg, args.run_index)?;
    let path = cli
        .out
        .join("runs")
        .join(cell_name(&cfg))
        .join(format!("{}.json", args.run_index));
    write_record(&record, &path)?;
    progress(&cell_name(&cfg), &record);
    println!("wrote {}", path.display());
    Ok(record.completed())
}

/// The experiment grid: the config's cells if it names any, otherwise the
/// optimizer x scheme grid built from its defaults. On the built-in grid
/// `--optimizer` and `--scheme` select cells instead of overriding them.
fn grid(cli: &Cli, args: &GridArgs) -> Result<Vec<(String, RunConfig)>> {
    let adjust = |cfg: &mut RunConfig| {
        if args.full {
            *cfg = cfg.clone().full_protocol();
        }
        if let Some(r) = args.repetitions {
            cfg.repetitions = r;
        }
    };
    let mut cells = load_cells(cli)?;
    if cells.len() == 1 && cells[0].0 == "default" {
        let mut base = cells.remove(0).1;
        adjust(&mut base);
        let filter = RunOverrides {
            optimizer: None,
            scheme: None,
            ..args.run.clone()
        };
        filter.apply(&mut base);
        let cells: Vec<_> = fig2_cells(&base)
            .into_iter()
            .filter(|(_, c)| args.run.optimizer.is_none_or(|k| k == c.optimizer.kind))
            .filter(|(_, c)| args.run.scheme.is_none_or(|s| s == c.scheme))
            .collect();
        if cells.is_empty() {
            bail!("no grid cell matches the requested optimizer and scheme");
        }
        return Ok(cells);
    }
    for (_, cfg) in &mut cells {
        adjust(cfg);
        args.run.apply(cfg);
    }
    Ok(cells)
}

fn reproduce(cli: &Cli, args: &GridArgs, jobs: usize) -> Result<bool> {
    let cells = grid(cli, args)?;
    let bundle = run_cells(&cells, jobs, progress)?;
    let summaries = write_outputs(&bundle, &cli.out)?;
    println!("{:<22} {:>5} {:>7} {:>12} {:>10}", "cell", "runs", "failed", "final loss", "std");
    for s in &summaries {
        println!(
            "{:<22} {:>5} {:>7} {:>12.5} {:>10.5}",
            s.name,
            s.runs,
            s.failed,
            s.final_mean().unwrap_or(f64::NAN),
            s.std.last().copied().unwrap_or(f64::NAN)
        );
    }
    println!("outputs in {}", cli.out.display());
    Ok(summaries.iter().all(|s| s.failed == 0))
}

fn timing(cli: &Cli, args: &GridArgs) -> Result<bool> {
    let cells = grid(cli, args)?;
    if cells.iter().any(|(_, c)| c.repetitions < 2) {
        bail!("timing needs at least 2 repetitions per cell");
    }
    let bundle = run_cells(&cells, 1, progress)?;
    write_outputs(&bundle, &cli.out)?;
    let table = timing_table(&bundle)?;
    println!("{:<10} {:<10} {:>10} {:>9} {:>8}", "optimizer", "scheme", "mean s", "std s", "x u");
    for r in &table.rows {
        println!(
            "{:<10} {:<10} {:>10.4} {:>9.4} {:>8}",
            r.optimizer.to_string(),
            r.scheme.to_string(),
            r.mean_secs,
            r.std_secs,
            r.ratio_to_uniform.map(|x| format!("{x:.2}")).unwrap_or_default()
        );
    }
    Ok(true)
}

fn eval_scheme(cli: &Cli, args: &EvalArgs) -> Result<bool> {
    let (_, mut cfg) = load_cells(cli)?.into_iter().next().expect("at least one cell");
    args.run.apply(&mut cfg);
    cfg.metric = MetricSettings {
        enabled: true,
        m: args.m,
        cadence: args.cadence,
        candidate: args.candidate,
    };
    let record = impsamp::experiment::run_training(&cfg, 0)?;
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let csv = cli.out.join("metric.csv");
    write_csv(
        std::fs::File::create(&csv).with_context(|| format!("creating {}", csv.display()))?,
        &record.quality,
    )?;
    let summary = aggregate(&record.quality, args.bins)?;
    let json = cli.out.join("quality.json");
    std::fs::write(&json, serde_json::to_string_pretty(&summary)?)?;
    let candidate = args.candidate.unwrap_or(cfg.scheme);
    println!("candidate {candidate} while training {} with {}", cfg.scheme, cfg.optimizer.kind);
    for d in &summary.divergences {
        println!(
            "{}: d_p {:.5} +/- {:.5}   d_u {:.5} +/- {:.5}   ({} records, {} flagged)",
            d.divergence, d.d_p.mean, d.d_p.std, d.d_u.mean, d.d_u.std, d.records, d.flagged
        );
    }
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(record.completed())
}

fn seed_rng(cli: &Cli) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(1))
}

fn speed_check(cli: &Cli, trials: usize) -> Result<bool> {
    let reports = oracle_suite(&mut seed_rng(cli), trials)?;
    for r in &reports {
        println!(
            "{} {:<9} max relative deviation {:.2e} over {} instances",
            verdict(r.passed),
            r.optimizer,
            r.max_rel_dev,
            r.trials
        );
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn grad_check(cli: &Cli, probes: usize, coords: usize, h: f64, tol: f64) -> Result<bool> {
    let mut rng = seed_rng(cli);
    let mut ok = true;
    for (arch, subset) in [(Architecture::Mlp(vec![12, 16, 8, 2]), None), (Architecture::Cnn, Some(coords))] {
        let err = gradient_check(&arch, probes, subset, h, &mut rng)?;
        let pass = err < tol;
        ok &= pass;
        println!("{} {:<16} max relative error {err:.2e} over {probes} probes", verdict(pass), arch.to_string());
    }
    Ok(ok)
}

fn verify_theorem(cli: &Cli, trials: usize) -> Result<bool> {
    let rep = sandwich_suite(&mut seed_rng(cli), trials)?;
    let ok = rep.failures == 0;
    println!(
        "{} {} of {} box-interior schemes violate H(p_gn) <= H(p) <= H(u); max H(p)/H(u) = {:.9}",
        verdict(ok),
        rep.failures,
        rep.trials,
        rep.worst_upper_ratio
    );
    Ok(ok)
}

fn default_data_dir() -> PathBuf {
    RunConfig::default().resolved_data_dir()
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::ReproduceFig2(a) => reproduce(cli, a, cli.jobs),
        Command::Timing(a) => timing(cli, a),
        Command::EvalScheme(a) => eval_scheme(cli, a),
        Command::SpeedCheck { trials } => speed_check(cli, *trials),
        Command::GradCheck { probes, coords, h, tol } => grad_check(cli, *probes, *coords, *h, *tol),
        Command::FetchData { dest, url } => {
            let dest = dest.clone().unwrap_or_else(default_data_dir);
            fetch::fetch(url, Path::new(&dest))?;
            println!("MNIST IDX files in {}", dest.display());
            Ok(true)
        }
        Command::VerifyTheorem { trials } => verify_theorem(cli, *trials),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
