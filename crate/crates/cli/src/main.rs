use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ssat_cli::{
    cmd_attack, cmd_eval, cmd_gen_data, cmd_pretrain, cmd_render, cmd_sweep, load_json, run_recipe, CliError,
    CliResult, EvalNames, EvalOptions, GridConfig, RunConfig, GENERATOR_CKPT, TARGET_CKPT,
};
use ssat_core::attack::AttackSpec;
use ssat_core::eval::Palette;

#[derive(Parser)]
#[command(name = "ssat", version, about = "Stealthy segmentation attack laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural scene dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the target segmentation model.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a perturbation generator against a frozen target.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda0: Option<f32>,
        #[arg(long)]
        xi: Option<f32>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a generator and render sample panels.
    Eval {
        #[arg(long)]
        generator_ckpt: PathBuf,
        #[arg(long)]
        target_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// AttackSpec JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        xi: f32,
        /// Test-split positions to render.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        samples: Vec<usize>,
        #[arg(long, default_value_t = 10.0)]
        gain: f32,
        #[arg(long)]
        palette: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate (and optionally train) an experiment grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Colour a PGM label map.
    Render {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        palette: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run gen-data, pretrain, attack and eval from one config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg: RunConfig = load_json(path)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    Ok(cfg.resolved())
}

fn palette(path: Option<&Path>) -> CliResult<Palette> {
    path.map(load_json).transpose().map(Option::unwrap_or_default)
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("SSAT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("SSAT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn dispatch(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::GenData { config, out, seed } => {
            let cfg = run_config(&config, seed)?;
            let m = cmd_gen_data(&cfg, &out)?;
            println!("wrote {} samples to {}", m.samples.len(), out.display());
        }
        Cmd::Pretrain { config, data, out, epochs, seed } => {
            let mut cfg = run_config(&config, seed)?;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            let acc = cmd_pretrain(&cfg, &data, &out)?;
            println!("test_pixel_acc={acc:.4}");
            println!("checkpoint={}", out.join(TARGET_CKPT).display());
        }
        Cmd::Attack { config, data, target_ckpt, out, lambda0, xi, epochs, lr, seed } => {
            let mut cfg = run_config(&config, seed)?;
            let t = &mut cfg.train_config;
            t.lambda0 = lambda0.unwrap_or(t.lambda0);
            t.xi = xi.unwrap_or(t.xi);
            t.epochs = epochs.unwrap_or(t.epochs);
            t.lr = lr.unwrap_or(t.lr);
            let history = cmd_attack(&cfg, &data, &target_ckpt, &out)?;
            if let Some(last) = history.epochs.last() {
                println!(
                    "epoch={} total_loss={:.6} manipulated_rate={}",
                    last.epoch,
                    last.total_loss,
                    last.manipulated_rate.map(|v| format!("{v:.4}")).unwrap_or_default()
                );
            }
            println!("checkpoint={}", out.join(GENERATOR_CKPT).display());
        }
        Cmd::Eval { generator_ckpt, target_ckpt, data, spec, out, xi, samples, gain, palette: pal, seed } => {
            let spec: AttackSpec = load_json(&spec)?;
            let opts = EvalOptions {
                xi: Some(xi),
                sample_indices: samples,
                perturbation_gain: gain,
                palette: palette(pal.as_deref())?,
            };
            let names = EvalNames {
                experiment_id: "eval".into(),
                generator: generator_ckpt.to_string_lossy().into_owned(),
                target: target_ckpt.to_string_lossy().into_owned(),
                dataset: data.to_string_lossy().into_owned(),
                seed,
            };
            let r = cmd_eval(&generator_ckpt, &target_ckpt, &data, &spec, xi, &opts, &names, &out)?;
            println!(
                "manipulated_rate={} preserved_rate={:.4}",
                r.manipulated_rate.map(|v| format!("{v:.4}")).unwrap_or_default(),
                r.preserved_rate
            );
        }
        Cmd::Sweep { grid, out } => {
            let grid: GridConfig = load_json(&grid)?;
            let rows = cmd_sweep(&grid, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.join(ssat_cli::GRID_CSV).display());
        }
        Cmd::Render { labels, palette: pal, out } => {
            cmd_render(&labels, &palette(pal.as_deref())?, &out)?;
        }
        Cmd::Run { config, out } => {
            let mut cfg = run_config(&config, None)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let r = run_recipe(&cfg)?;
            println!("test_pixel_acc={:.4}", r.test_pixel_acc);
            println!(
                "manipulated_rate={} preserved_rate={:.4}",
                r.report.manipulated_rate.map(|v| format!("{v:.4}")).unwrap_or_default(),
                r.report.preserved_rate
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| dispatch(cli.cmd)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ssat: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
