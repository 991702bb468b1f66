use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use iwin::attention::{complexity, AttentionKind};
use iwin::harness::config::RunConfig;
use iwin::harness::data::{self, GenConfig};
use iwin::harness::eval::Setting;
use iwin::harness::train::{self, Split};
use iwin::harness::viz;
use numcore::checkpoint;

#[derive(Parser)]
#[command(name = "iwin", about = "Irregular-window transformer for HOI detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Default,
    Known,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    G,
    W,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.tsv, best.ckpt and final.ckpt to OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a generated dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "default")]
        setting: SettingArg,
    },
    /// Trace the 64 ancestor samples of every final token (JSON, plus a PPM
    /// next to it).
    VizWindows {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image container with an `image` record of shape [3, H, W].
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention cost by formula and by measured multiply-accumulates.
    Complexity {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        c: usize,
        #[arg(long, default_value_t = 7)]
        sw: usize,
    },
    /// Generate a synthetic scene dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        object_classes: usize,
    },
}

fn run(cli: Cli) -> iwin::Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let split = Split::from_config(&cfg)?;
            let outcome = train::train(&cfg, &split, Some(&out), |log| {
                let map = log.map_full.map_or("-".into(), |m| format!("{m:.4}"));
                eprintln!(
                    "epoch {:>4}  step {:>6}  loss {:.4}  lr {:.2e}  mAP {map}",
                    log.epoch, log.step, log.loss, log.lr
                );
            })?;
            println!(
                "best mAP_full {:.4} at epoch {}",
                outcome.best_map,
                outcome.best_epoch.map_or("-".into(), |e| e.to_string())
            );
        }
        Command::Eval {
            checkpoint,
            data,
            setting,
        } => {
            let (model, _) = train::load_checkpoint(&checkpoint)?;
            let (scenes, gen) = data::load_dataset(&data)?;
            if (gen.height, gen.width) != model.cfg.image_size {
                return Err(iwin::Error::Config("dataset and checkpoint image sizes differ".into()));
            }
            let setting = match setting {
                SettingArg::Default => Setting::Default,
                SettingArg::Known => Setting::KnownObject,
            };
            let report = train::evaluate_model(&model, &scenes, setting, None)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::VizWindows { checkpoint, image, out } => {
            let (model, _) = train::load_checkpoint(&checkpoint)?;
            let (_, img) = checkpoint::load(&image)?
                .into_iter()
                .find(|(n, _)| n == "image")
                .ok_or_else(|| iwin::Error::Config(format!("{} has no image record", image.display())))?;
            let trace = viz::viz_windows(&model, &img)?;
            std::fs::write(&out, serde_json::to_string_pretty(&trace)?)?;
            viz::write_ppm(out.with_extension("ppm"), &img, &trace, 8)?;
            println!("{} tokens traced to {}", trace.tokens.len(), out.display());
        }
        Command::Complexity { kind, h, w, c, sw } => {
            let kind = match kind {
                KindArg::G => AttentionKind::Global,
                KindArg::W => AttentionKind::Window,
            };
            let r = complexity(kind, h, w, c, sw)?;
            println!("kind\tH\tW\tC\tS_w\tformula_flops\tmeasured_macs\tattention_macs");
            let kind = match r.kind {
                AttentionKind::Global => "g",
                AttentionKind::Window => "w",
            };
            println!(
                "{kind}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.h, r.w, r.c, r.sw, r.formula_flops, r.measured_macs, r.attention_macs
            );
        }
        Command::GenData {
            seed,
            count,
            out,
            size,
            object_classes,
        } => {
            let cfg = GenConfig {
                height: size,
                width: size,
                num_object_classes: object_classes,
                num_interaction_classes: data::RELATIONS.len(),
            };
            let scenes = data::generate(seed, count, &cfg)?;
            data::save_dataset(&out, &scenes, &cfg)?;
            println!("{count} scenes written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
