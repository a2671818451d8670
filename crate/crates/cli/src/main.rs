//! `crisp`: batch driver for retrofit, compression, adaptation and ablation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
//! Logs go to stderr as one `key=value` line per event; data goes to files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use crisp::pipeline::{self, CompressMode, Sweep};
use crisp::store::{self, RunConfig};
use crisp::toy::ToyMlp;
use crisp::{Error, Result, StoreError};

const OUT_DIR_ENV: &str = "CRISP_OUT_DIR";

#[derive(Parser)]
#[command(name = "crisp", version, about = "Shared-basis weight recombination: retrofit, compress, adapt")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// RunConfig JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $CRISP_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense toy model on the source task.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a factor bank to dense weights without data.
    Retrofit {
        #[command(flatten)]
        common: Common,
        /// Dense checkpoint container.
        #[arg(long)]
        weights: PathBuf,
    },
    /// Reduce the basis rank of a factor bank.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
    },
    /// Mixer-only adaptation to the shifted target task.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bank: PathBuf,
    },
    /// Pretrain, retrofit, compress and adapt in one run.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
    /// Run a comparison sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        sweep: SweepArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Distill,
    Cluster,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    GatePlacement,
    LossFn,
    Init,
    MixerDims,
    Budget,
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn quote(s: &str) -> String {
    format!("{s:?}")
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<Ctx> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let out = match &self.out {
            Some(p) => p.clone(),
            None => std::env::var_os(OUT_DIR_ENV)
                .map(PathBuf::from)
                .ok_or_else(|| Error::Config(format!("no output directory: pass --out or set {OUT_DIR_ENV}")))?,
        };
        Ok(Ctx { cfg, out })
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| {
        StoreError::Io {
            path: dir.to_path_buf(),
            source,
        }
        .into()
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { common } => {
            let ctx = common.resolve()?;
            let pre = pipeline::pretrain(&ctx.cfg)?;
            let ck = pre.model.to_checkpoint()?;
            ensure_dir(&ctx.out)?;
            store::save_checkpoint(&ctx.out.join("pretrained.crsp"), &ck)?;
            store::write_csv(&ctx.out.join("pretrain_metrics.csv"), &pre.history)?;
            log(&format!(
                "event=pretrain_done test_accuracy={:.4} params={} hash={}",
                pre.test.accuracy,
                ck.param_count(),
                ck.content_hash()
            ));
        }
        Command::Retrofit { common, weights } => {
            let ctx = common.resolve()?;
            let ck = store::load_checkpoint(&weights)?;
            let out = pipeline::retrofit_checkpoint(&ctx.cfg, &ck)?;
            ensure_dir(&ctx.out)?;
            store::save_bank(&ctx.out.join("bank.crsp"), &out.bank)?;
            store::write_csv(&ctx.out.join("retrofit_history.csv"), &out.history)?;
            for g in &out.groups {
                let worst = g.rel_errors.iter().copied().fold(0.0, f64::max);
                log(&format!(
                    "event=group_done group={} steps={} converged={} rel_error={worst:.6}",
                    g.group, g.steps, g.converged
                ));
            }
            if !out.converged() {
                log(&format!(
                    "level=warn event=not_converged max_rel_error={:.6} target={}",
                    out.max_rel_error(),
                    ctx.cfg.mimicry.target_rel_error
                ));
            }
            log(&format!("event=retrofit_done params={}", out.bank.total_params()));
        }
        Command::Compress { common, bank, mode } => {
            let ctx = common.resolve()?;
            let teacher = store::load_bank(&bank)?;
            let mode = match mode {
                ModeArg::Distill => CompressMode::Distill,
                ModeArg::Cluster => CompressMode::Cluster,
            };
            let out = pipeline::compress(&ctx.cfg, &teacher, mode)?;
            ensure_dir(&ctx.out)?;
            store::save_bank(&ctx.out.join("compressed.crsp"), &out.bank)?;
            store::write_csv(&ctx.out.join("compress_metrics.csv"), &out.stages)?;
            if !out.distill.is_empty() {
                store::write_csv(&ctx.out.join("distill_history.csv"), &out.distill)?;
            }
            if !out.calibration.is_empty() {
                store::write_csv(&ctx.out.join("calibration_history.csv"), &out.calibration)?;
            }
            log(&format!(
                "event=compress_done mode={} params_before={} params_after={}",
                pipeline::label(&mode),
                teacher.total_params(),
                out.bank.total_params()
            ));
        }
        Command::Adapt { common, bank } => {
            let ctx = common.resolve()?;
            let base = store::load_bank(&bank)?;
            let out = pipeline::adapt_bank(&ctx.cfg, &base)?;
            ensure_dir(&ctx.out)?;
            store::save_delta(&ctx.out.join("delta.crsp"), &out.delta)?;
            store::write_csv(&ctx.out.join("adapt_metrics.csv"), &out.metrics)?;
            log(&format!(
                "event=adapt_done frozen_accuracy={:.4} adapted_accuracy={:.4} trainable={}",
                out.frozen_test.accuracy,
                out.adapted_test.accuracy,
                crisp::adapter::trainable_budget(&ToyMlp::from_bank(&base)?, &ctx.cfg.adapt)
            ));
        }
        Command::Pipeline { common } => {
            let ctx = common.resolve()?;
            ensure_dir(&ctx.out)?;
            pipeline::run_pipeline(&ctx.cfg, &ctx.out, &mut log)?;
            log(&format!("event=pipeline_done out={}", quote(&ctx.out.display().to_string())));
        }
        Command::Ablate { common, sweep } => {
            let ctx = common.resolve()?;
            let sweep = match sweep {
                SweepArg::GatePlacement => Sweep::GatePlacement,
                SweepArg::LossFn => Sweep::LossFn,
                SweepArg::Init => Sweep::Init,
                SweepArg::MixerDims => Sweep::MixerDims,
                SweepArg::Budget => Sweep::Budget,
            };
            let rows = pipeline::ablate(&ctx.cfg, sweep, &mut log)?;
            ensure_dir(&ctx.out)?;
            let path = ctx.out.join(format!("ablate_{}.csv", pipeline::label(&sweep)));
            store::write_csv(&path, &rows)?;
            log(&format!("event=ablate_done rows={}", rows.len()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = if e.is_numerical() { (2, "numerical") } else { (1, "config") };
            log(&format!("level=error kind={kind} msg={}", quote(&e.to_string())));
            ExitCode::from(code)
        }
    }
}
