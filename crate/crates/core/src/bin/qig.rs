use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qig_quant::cli::{
    cmd_attribute, cmd_gen_model, cmd_quantize, cmd_verify, GenModelArgs, Method, RunConfig,
    VerifyArgs,
};
use qig_quant::synth::Outlier;
use qig_quant::BlockKind;

#[derive(Parser)]
#[command(
    name = "qig",
    version,
    about = "Token-weighted post-training quantization of small blocks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded model and calibration set
    GenModel {
        #[arg(long, default_value = "mlp")]
        kind: BlockKind,
        #[arg(long, default_value_t = 8)]
        d: usize,
        /// Output width of a linear block
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 16)]
        tokens: usize,
        #[arg(long, default_value_t = 1)]
        batches: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// token:INDEX:SCALE or channel:INDEX:SCALE, repeatable
        #[arg(long = "inject-outlier")]
        outliers: Vec<Outlier>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token sensitivities and importance weights
    Attribute(RunArgs),
    /// Quantize with cwe, gptq or rtn
    Quantize {
        #[arg(long, default_value = "cwe")]
        method: Method,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Seeded self-check suite; exits nonzero on any failure
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        tolerance_scale: f64,
        /// Directory holding gen-model/attribute/quantize outputs to cross-check
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value_t = 3)]
    wbits: u32,
    #[arg(long)]
    abits: Option<u32>,
    #[arg(long, default_value_t = 128)]
    group_size: usize,
    #[arg(long, default_value_t = 32)]
    ig_steps: usize,
    #[arg(long, default_value_t = 1.5)]
    iqr_k: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

impl RunArgs {
    fn into_config(self, method: Method) -> RunConfig {
        RunConfig {
            model: self.model,
            calib: self.calib,
            method,
            wbits: self.wbits,
            abits: self.abits,
            group_size: self.group_size,
            ig_steps: self.ig_steps,
            iqr_k: self.iqr_k,
            seed: self.seed,
            out: self.out,
        }
    }
}

fn run(cli: Cli) -> qig_quant::Result<bool> {
    match cli.command {
        Command::GenModel {
            kind,
            d,
            m,
            tokens,
            batches,
            seed,
            outliers,
            out,
        } => {
            let (model, calib) = cmd_gen_model(&GenModelArgs {
                kind,
                d,
                m,
                tokens,
                batches,
                seed,
                outliers,
                out,
            })?;
            println!("{}\n{}", model.display(), calib.display());
        }
        Command::Attribute(run) => {
            let summary = cmd_attribute(&run.into_config(Method::Cwe))?;
            println!(
                "tokens {}  steps {}  max residual {:e}  max relative residual {:e}",
                summary.tokens, summary.steps, summary.max_residual, summary.max_relative_residual
            );
        }
        Command::Quantize { method, run } => {
            let report = cmd_quantize(&run.into_config(method))?;
            println!(
                "{method}: block weighted error {:e}, unweighted {:e}",
                report.block.weighted_error, report.block.unweighted_error
            );
        }
        Command::Verify {
            seed,
            tolerance_scale,
            run_dir,
            out,
        } => {
            let (report, timing) = cmd_verify(&VerifyArgs {
                base_seed: seed,
                tolerance_scale,
                run_dir,
                out,
            })?;
            for c in &report.checks {
                let seed = c.seed.map_or_else(|| "-".to_string(), |s| s.to_string());
                let verdict = if c.passed { "PASS" } else { "FAIL" };
                println!(
                    "{verdict} {:<36} seed {seed:>3}  measured {:e}  tolerance {:e}",
                    c.name, c.measured, c.tolerance
                );
            }
            println!(
                "runtime {:.3}s (bound {}s)",
                timing.elapsed_seconds, timing.runtime_bound_seconds
            );
            return Ok(report.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QIG_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
