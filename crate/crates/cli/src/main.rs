use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use chartlab::pipeline::{self, load_config, RunConfig, RunLayout, Variant};

/// Synthetic chart perception lab.
///
/// Every stage reads the same JSON config and works inside one run
/// directory named after the config digest (override with --out or
/// CHARTLAB_RUN_DIR).
#[derive(Parser)]
#[command(name = "chartlab", version)]
struct Cli {
    /// Worker threads for the scaling sweep. 1 keeps runs bit-reproducible
    /// regardless of scheduling.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; missing keys take their defaults.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config instead of a file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Smoke,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Init,
    Plain,
    HardNegative,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Init => Variant::Init,
            VariantArg::Plain => Variant::Plain,
            VariantArg::HardNegative => Variant::HardNegative,
        }
    }
}

#[derive(Args)]
struct WithVariants {
    #[command(flatten)]
    common: Common,
    /// Repeatable; all three variants when omitted.
    #[arg(long = "variant", value_enum)]
    variants: Vec<VariantArg>,
}

impl WithVariants {
    fn variants(&self) -> Vec<Variant> {
        if self.variants.is_empty() {
            return Variant::ALL.to_vec();
        }
        let mut v: Vec<Variant> = self.variants.iter().map(|&v| v.into()).collect();
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render train and eval charts with their QA pairs and captions.
    Gen(Common),
    /// Add hard-negative captions to the generated data.
    Neg(Common),
    /// Train variants from the shared init.
    Train(WithVariants),
    /// Retrieval accuracy per variant and the comparison table.
    Eval(WithVariants),
    /// Linear and MLP probes on frozen image embeddings.
    Probe(WithVariants),
    /// Probes, CRLA/IRLA over checkpoints and the scaling sweep.
    Analyze(Common),
    /// Redraw the SVG plots from the analysis CSVs.
    Plot(Common),
    /// Every stage in order.
    All(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen(c) | Command::Neg(c) | Command::Analyze(c) | Command::Plot(c) | Command::All(c) => c,
            Command::Train(w) | Command::Eval(w) | Command::Probe(w) => &w.common,
        }
    }
}

fn resolve(common: &Common) -> Result<(RunConfig, RunLayout)> {
    let cfg = match (&common.config, common.preset) {
        (Some(path), _) => load_config(path)?,
        (None, Some(Preset::Smoke)) => RunConfig::smoke(),
        (None, _) => RunConfig::default(),
    };
    cfg.validate()?;
    let root = match &common.out {
        Some(dir) => dir.clone(),
        None => cfg.run_dir(Path::new("runs")),
    };
    Ok((cfg, RunLayout::new(root)))
}

fn execute(cli: &Cli, cfg: &RunConfig, layout: &RunLayout) -> Result<()> {
    let start = Instant::now();
    let mut log = |m: &str| eprintln!("[{:>7.1}s] {m}", start.elapsed().as_secs_f64());
    let threads = cli.threads as usize;
    cfg.write_resolved(&layout.root).with_context(|| format!("preparing run directory {}", layout.root.display()))?;
    match &cli.command {
        Command::Gen(_) => {
            let (train_set, eval_set) = pipeline::generate_data(cfg, &layout.data()).context("generating charts")?;
            println!("train {} charts, manifest {}", train_set.len(), train_set.manifest().digest());
            println!("eval {} charts, manifest {}", eval_set.len(), eval_set.manifest().digest());
        }
        Command::Neg(_) => {
            let (dt, de) = pipeline::synthesize_data(cfg, &layout.data()).context("synthesizing hard negatives")?;
            println!("dropped {dt} train and {de} eval QAs without enough distinct negatives");
        }
        Command::Train(w) => {
            let (train_set, _) = pipeline::load_data(cfg, &layout.data())?;
            for v in w.variants() {
                log(&format!("training {}", v.as_str()));
                let out = pipeline::train_variant(cfg, v, &train_set, &layout.checkpoints(v), false)
                    .with_context(|| format!("training {}", v.as_str()))?;
                let last = out.log.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
                println!("{}: {} steps, final epoch loss {last:.4}", v.as_str(), out.log.steps.len());
            }
        }
        Command::Eval(w) => {
            let reports = pipeline::evaluate_variants(cfg, layout, &w.variants(), &mut log).context("evaluating")?;
            print!("{}", pipeline::comparison_table(&reports).to_csv()?);
        }
        Command::Probe(w) => {
            for r in pipeline::probe_variants(cfg, layout, &w.variants()).context("probing")? {
                println!("{} {}: test {:.3} (chance {:.3})", r.task, r.probe.as_str(), r.test_accuracy, r.chance);
            }
        }
        Command::Analyze(_) => {
            pipeline::analyze(cfg, layout, threads, &mut log).context("analysis")?;
            println!("analysis written to {}", layout.analysis().display());
        }
        Command::Plot(_) => {
            for p in pipeline::plot(layout).context("plotting")? {
                println!("{}", p.display());
            }
        }
        Command::All(_) => {
            let out = pipeline::run_all(cfg, layout, threads, &mut log)?;
            print!("{}", out.comparison.to_csv()?);
        }
    }
    eprintln!("run directory: {}", layout.root.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cfg, layout) = match resolve(cli.command.common()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match execute(&cli, &cfg, &layout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
