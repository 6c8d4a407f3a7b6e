use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use egocog_cli::config::parse_list;
use egocog_cli::{cmd_ablate, cmd_eval, cmd_synth, cmd_train, exit, resolve, CliResult, Overrides};

#[derive(Parser)]
#[command(name = "egocog", version, about = "Egocentric trajectory and uncertainty forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic episodes.
    Synth(Common),
    /// Train networks and fit uncertainty baselines.
    Train(Common),
    /// Evaluate methods on the test split.
    Eval(Common),
    /// Train and evaluate ablation variants.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory to resume (train) or evaluate (eval).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated ablation variants.
    #[arg(long)]
    variants: Option<String>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            config: self.config.clone(),
            seed: self.seed,
            out: self.out.clone(),
            dataset: self.dataset.clone(),
            methods: self.methods.as_deref().map(parse_list),
            variants: self.variants.as_deref().map(parse_list),
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(c) => {
            let m = cmd_synth(&resolve(&c.overrides())?)?;
            println!("wrote {} episodes, {} steps", m.episodes.len(), m.total_steps);
        }
        Command::Train(c) => {
            for (method, report) in cmd_train(&resolve(&c.overrides())?, c.checkpoint.as_deref())? {
                if let Some(last) = report.history.last() {
                    println!(
                        "{method}: epoch {} L_traj {:.5} L_head {:.5} L_U {:.5} L_aux {:.5} L_total {:.5} val_total {:.5} (best epoch {})",
                        last.epoch, last.l_traj, last.l_head, last.l_u, last.l_aux, last.l_total, last.val_total, report.best_epoch
                    );
                }
            }
        }
        Command::Eval(c) => {
            let r = cmd_eval(&resolve(&c.overrides())?, c.checkpoint.as_deref())?;
            for row in &r.table1 {
                println!("{}: ADE {:.4} FDE {:.4} L1 {:.4}", row.method, row.ade, row.fde, row.l1);
            }
            for row in &r.table2 {
                println!("{}: MAE {:?} rho {:?}", row.method, row.mae, row.rho);
            }
        }
        Command::Ablate(c) => {
            for row in cmd_ablate(&resolve(&c.overrides())?)? {
                println!("{}: ADE {:.4} L1 {:.4} probe {}", row.variant, row.ade, row.l1, row.mask_probe);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
