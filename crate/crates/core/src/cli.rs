//! Command-line front end.

use crate::config::RunConfig;
use crate::data::{load_image, save_image, PairDataset};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::grid::{GridConfig, GridFormer};
use crate::profile::{ablation_csv, ablation_table, profile};
use crate::train::{evaluate, load_checkpoint, restore_image, train};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "gridformer", version, about = "Grid restoration transformer: data, training and analysis")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Preset name (gridformer, gridformer-s, tiny, micro) or key=value file.
    #[arg(long, global = true)]
    pub config: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/ and test/ pair directories.
    Synth,
    /// Train on a pair directory (or a freshly synthesized set).
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// PSNR/SSIM of degraded inputs and, with a checkpoint, of restorations.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Restore one image or every PNG in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
    },
    /// Parameter and MAC tree.
    Profile {
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
    },
    /// Analytic against finite-difference gradients for every parameter.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        size: usize,
        /// Only check parameters under this path.
        #[arg(long)]
        prefix: Option<String>,
    },
    /// Parameter/MAC comparison of the attention and block ablations.
    Ablate {
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
}

impl GlobalArgs {
    fn run_config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::resolve(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if self.deterministic {
            cfg.train.deterministic = true;
        }
        Ok(cfg)
    }

    fn out_dir(&self, default: &str) -> anyhow::Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let g = &cli.global;
    let cfg = g.run_config()?;
    match cli.command {
        Command::Synth => {
            let out = g.out_dir("data")?;
            let d = &cfg.data;
            let seed = cfg.train.seed;
            let train = PairDataset::synthesize(d.kind, d.train_pairs, d.size, seed, "train_")?;
            let test = PairDataset::synthesize(d.kind, d.test_pairs, d.size, seed, "test_")?;
            train.write(&out.join("train"))?;
            test.write(&out.join("test"))?;
            println!("wrote {} train and {} test {} pairs to {}", train.len(), test.len(), d.kind, out.display());
        }
        Command::Train { data, steps } => {
            let out = g.out_dir("runs/train")?;
            let mut cfg = cfg;
            if let Some(s) = steps {
                cfg.train.total_steps = s;
            }
            cfg.validate()?;
            let dataset = match &data {
                Some(dir) => PairDataset::load(dir)?,
                None => {
                    let d = &cfg.data;
                    PairDataset::synthesize(d.kind, d.train_pairs, d.size, cfg.train.seed, "train_")?
                }
            };
            write(&out.join("config.txt"), &cfg.to_text())?;
            let (model, mut store) = GridFormer::init::<f32>(cfg.grid.clone(), cfg.train.seed)?;
            let every = (cfg.train.total_steps / 20).max(1);
            let outcome = train(&model, &mut store, &dataset, &cfg.loss, &cfg.train, Some(&out), |r| {
                if r.step % every == 0 || r.step + 1 == cfg.train.total_steps {
                    eprintln!("step {:>6}  L {:.6}  L_char {:.6}  L_per {:.6}  lr {:.3e}", r.step, r.total, r.char, r.per, r.lr);
                }
            })?;
            println!(
                "trained {} steps in {:.1}s; trace {} checkpoint {}",
                outcome.trace.len(),
                outcome.elapsed.as_secs_f64(),
                out.join("trace.csv").display(),
                outcome.checkpoint.as_deref().unwrap_or(Path::new("-")).display()
            );
        }
        Command::Eval { data, checkpoint } => {
            let dataset = PairDataset::load(&data)?;
            let loaded = checkpoint.as_deref().map(load_checkpoint::<f32>).transpose()?;
            let report = evaluate(loaded.as_ref().map(|(m, s)| (m, s)), &dataset)?;
            let csv = report.to_csv();
            print!("{csv}");
            if g.out.is_some() {
                write(&g.out_dir("")?.join("eval.csv"), &csv)?;
            }
            eprintln!("input  PSNR {:.2} dB  SSIM {:.4}", report.mean_input_psnr(), report.mean_input_ssim());
            if let (Some(p), Some(s)) = (report.mean_output_psnr(), report.mean_output_ssim()) {
                eprintln!("output PSNR {p:.2} dB  SSIM {s:.4}");
            }
        }
        Command::Infer { checkpoint, input } => {
            let out = g.out_dir("restored")?;
            let (model, store) = load_checkpoint::<f32>(&checkpoint)?;
            let files: Vec<PathBuf> = if input.is_dir() {
                let mut v: Vec<PathBuf> = fs::read_dir(&input)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                    .collect();
                v.sort();
                v
            } else {
                vec![input.clone()]
            };
            if files.is_empty() {
                bail!("no PNG files in {}", input.display());
            }
            for f in files {
                let img = load_image(&f)?;
                let y = restore_image(&model, &store, &img)?;
                let dest = out.join(f.file_name().context("input has no file name")?);
                save_image(&y, &dest)?;
                println!("{} -> {}", f.display(), dest.display());
            }
        }
        Command::Profile { size, batch, depth } => {
            let p = profile(&cfg.grid, batch, size, size, depth)?;
            print!("{}", p.summary());
            let csv = p.to_csv();
            if g.out.is_some() {
                write(&g.out_dir("")?.join("profile.csv"), &csv)?;
            } else {
                print!("{csv}");
            }
        }
        Command::Gradcheck { size, prefix } => {
            let grid = match &g.config {
                Some(_) => cfg.grid.clone(),
                None => GridConfig::preset("micro")?,
            };
            let gc = GradcheckConfig {
                grid,
                loss: cfg.loss.clone(),
                size,
                seed: g.seed.unwrap_or(7),
                prefix,
                ..GradcheckConfig::default()
            };
            let report = run_gradcheck(&gc, |p| {
                let mark = if p.failures == 0 { "ok  " } else { "FAIL" };
                println!(
                    "{mark} {:<48} n={:<6} max_rel={:.2e} max_abs={:.2e}",
                    p.path, p.numel, p.max_rel_err, p.max_abs_diff
                );
            })?;
            println!(
                "{} parameters, {} scalars, {} failures, max abs diff {:.2e}, max relative error above the floor {:.2e}, {:.1}s",
                report.params.len(),
                report.elements(),
                report.failures(),
                report.max_abs_diff(),
                report.max_rel_err(),
                report.elapsed.as_secs_f64()
            );
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate { size } => {
            let rows = ablation_table(&cfg.grid, size, size)?;
            let csv = ablation_csv(&rows);
            print!("{csv}");
            if g.out.is_some() {
                write(&g.out_dir("")?.join("ablation.csv"), &csv)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn parser_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_go_anywhere() {
        let cli = Cli::try_parse_from(["gridformer", "profile", "--config", "gridformer-s", "--seed", "3"]).unwrap();
        assert_eq!(cli.global.config.as_deref(), Some("gridformer-s"));
        assert_eq!(cli.global.seed, Some(3));
        let cli = Cli::try_parse_from(["gridformer", "--deterministic", "--out", "x", "synth"]).unwrap();
        assert!(cli.global.deterministic);
        assert!(matches!(cli.command, Command::Synth));
    }

    #[test]
    fn unknown_input_is_a_usage_error() {
        assert!(Cli::try_parse_from(["gridformer", "frobnicate"]).is_err());
        assert!(Cli::try_parse_from(["gridformer", "profile", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["gridformer"]).is_err());
    }
}
