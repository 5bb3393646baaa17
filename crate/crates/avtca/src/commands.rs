//! Subcommands of the `avtca` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use avtca_core::data::Split;
use avtca_core::gradcheck;
use avtca_core::ModelState;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{generate_dataset, Dataset};
use crate::metrics_csv;
use crate::run;

#[derive(Debug, Parser)]
#[command(
    name = "avtca",
    version,
    about = "Audio-video cross-attention classifier: data, training, evaluation, ablation and gradient checks"
)]
#[command(after_help = "Exit codes: 0 ok, 1 config, 2 data, 3 digest mismatch, 4 gradient check, 5 divergence, 6 writing outputs.\n\
AVTCA_THREADS caps the number of evaluation threads.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset: sample files plus a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Write the manifest only, without sample files.
        #[arg(long)]
        manifest_only: bool,
    },
    /// Train one variant, writing metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Defaults to `<out>/final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train all five variants and tabulate them.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient check of every block and the whole model, in 64-bit.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupt the backward pass of one block (negative control).
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML); the built-in default when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; for gen-data, the dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed override: the data seed for gen-data, the training seed otherwise.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref())
    }
}

fn apply_variant(cfg: &mut RunConfig, variant: &Option<String>) -> CliResult<()> {
    if let Some(v) = variant {
        cfg.variant = v.clone();
        cfg.variant_id()?;
    }
    Ok(())
}

fn training_config(common: &Common, variant: &Option<String>) -> CliResult<RunConfig> {
    let mut cfg = common.load()?;
    apply_variant(&mut cfg, variant)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, manifest_only } => gen_data(&common, manifest_only),
        Command::Train { common, variant } => train(&training_config(&common, &variant)?),
        Command::Eval { common, variant, split, checkpoint } => {
            let split = Split::parse(&split).map_err(|_| CliError::Config(format!("--split must be train or val, got `{split}`")))?;
            eval(&training_config(&common, &variant)?, split, checkpoint.as_deref())
        }
        Command::Ablate { common } => ablate(&training_config(&common, &None)?),
        Command::Gradcheck { common, fault } => gradcheck(&common, fault.as_deref()),
    }
}

fn gen_data(common: &Common, manifest_only: bool) -> CliResult<()> {
    let mut cfg = common.load()?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    let dir = common.out.clone().unwrap_or(cfg.data.dir.clone());
    let m = generate_dataset(&dir, &cfg.synthetic(), manifest_only)?;
    let (train, val) = m.split_totals();
    println!("{} samples ({train} train / {val} val) in {}", m.records.len(), dir.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> CliResult<()> {
    let ds = Dataset::load(&cfg.data.dir, &cfg.model)?;
    let arch = cfg.variant_id()?.architecture(&cfg.model);
    let threads = run::thread_count()?;
    let run = run::train(cfg, arch, &ds, &cfg.out, threads, true)?;
    if let Some(v) = run.last(Split::Val) {
        println!("{}", metrics_csv::HEADER);
        println!("{}", metrics_csv::row(v));
    }
    Ok(())
}

fn eval(cfg: &RunConfig, split: Split, ckpt: Option<&Path>) -> CliResult<()> {
    let ckpt = ckpt.map_or_else(|| cfg.out.join("final.ckpt"), Path::to_path_buf);
    let arch = cfg.variant_id()?.architecture(&cfg.model);
    let mut state = ModelState::<f32>::new(cfg.model, arch, cfg.train.seed)?;
    checkpoint::load(&ckpt, &mut state)?;
    let ds = Dataset::load(&cfg.data.dir, &cfg.model)?;
    let idx = ds.indices(split);
    let (report, probs) = run::evaluate(&state, &ds, &idx, cfg.train.batch_size, split, run::thread_count()?)?;
    let table = metrics_csv::table(std::slice::from_ref(&report));
    print!("{table}");
    std::fs::create_dir_all(&cfg.out).map_err(|e| CliError::output_io(&cfg.out, e))?;
    let write = |name: String, text: String| {
        let p = cfg.out.join(name);
        std::fs::write(&p, text).map_err(|e| CliError::output_io(&p, e))
    };
    write(format!("eval_{}.csv", split.as_str()), table)?;
    let c = cfg.model.classes;
    let mut dump = String::from("label");
    for k in 0..c {
        write!(dump, ",p{k}").unwrap();
    }
    dump.push('\n');
    for (row, label) in probs.data().chunks(c).zip(ds.labels(&idx)) {
        write!(dump, "{label}").unwrap();
        for p in row {
            write!(dump, ",{p}").unwrap();
        }
        dump.push('\n');
    }
    write(format!("predictions_{}.csv", split.as_str()), dump)
}

fn ablate(cfg: &RunConfig) -> CliResult<()> {
    let ds = Dataset::load(&cfg.data.dir, &cfg.model)?;
    let rows = run::ablate(cfg, &ds, &cfg.out, run::thread_count()?, true)?;
    let path = cfg.out.join("ablation.csv");
    std::fs::write(&path, run::ablation_csv(&rows)).map_err(|e| CliError::output_io(&path, e))?;
    print!("{}", run::ablation_table(&rows));
    match rows.into_iter().find_map(|r| r.result.err()) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn gradcheck(common: &Common, fault: Option<&str>) -> CliResult<()> {
    let cfg = common.load()?;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let cases = gradcheck::suite(&cfg.model, seed, fault)?;
    let mut first_failure = None;
    for case in &cases {
        let report = case.run()?;
        let status = if report.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<28} {:>6} entries  worst rel err {:.3e}  (tol {:.0e})  {status}",
            report.block, report.checked, report.max_rel_err, report.tolerance
        );
        if let Err(e) = report.check() {
            first_failure.get_or_insert_with(|| CliError::GradCheck(format!("{}: {e}", report.block)));
        }
    }
    first_failure.map_or(Ok(()), Err)
}
