use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use skb_semcom::config::RunConfig;
use skb_semcom::cvae::{train_cvae, Cvae, CvaeConfig};
use skb_semcom::dataset::{export_glyphs, load_external, load_glyph_export, make_glyph_dataset, GlyphDataset};
use skb_semcom::diffcore::{load_snapshot, save_snapshot};
use skb_semcom::encoder::{train_semantic_encoder, Encoder};
use skb_semcom::pipeline::{
    ablate_skb, evaluate_classifier, mean_image_psnr, run_end_to_end, run_vanilla_baseline, sweep, vanilla_sweep,
    write_ablation_csv, write_sweep_csv, AblationConfig, LinkConfig, RateConfig, RunResult, SweepGrid,
};

#[derive(Parser)]
#[command(
    name = "skbcom",
    version,
    about = "SKB-guided generative semantic communication simulator"
)]
struct Cli {
    /// JSON run configuration; defaults are used for missing fields.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the full configuration (defaults merged with --config).
    ShowConfig,
    /// Render the glyph dataset into the data directory.
    GenData,
    TrainEncoder,
    TrainCvae {
        /// Train the null-condition model used by the vanilla baseline.
        #[arg(long)]
        unconditional: bool,
    },
    /// One evaluation run; writes per-image metrics and sample images.
    Run {
        #[arg(long, default_value_t = 10.0)]
        snr: f64,
        /// Test-time compression ratio; defaults to the model's trained ratio.
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Evaluate the vanilla baseline instead of the proposed method.
        #[arg(long)]
        baseline: bool,
    },
    /// SNR x budget x seed grid from the config.
    Sweep {
        /// Also sweep the vanilla baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Accuracy versus SKB size.
    AblateSkb,
}

fn load_data(cfg: &RunConfig) -> Result<GlyphDataset> {
    let dims = cfg.image_dims();
    if let Some(ext) = &cfg.external {
        let train = load_external(&ext.attributes_csv, &ext.train_dir, dims)?;
        let test = load_external(&ext.attributes_csv, &ext.test_dir, dims)?;
        if train.skipped + test.skipped > 0 {
            log::warn!("skipped {} undecodable images", train.skipped + test.skipped);
        }
        return Ok(GlyphDataset {
            skb: train.skb,
            train: train.samples,
            test: test.samples,
        });
    }
    load_glyph_export(&cfg.paths.data_dir, dims)
        .with_context(|| format!("loading {} (run gen-data first?)", cfg.paths.data_dir.display()))
}

fn load_encoder(cfg: &RunConfig) -> Result<Encoder> {
    let path = cfg.paths.encoder();
    let params = load_snapshot(&path).with_context(|| format!("missing encoder model {}", path.display()))?;
    Ok(Encoder::from_params(params)?)
}

fn load_cvae(cfg: &RunConfig, conditional: bool) -> Result<Cvae> {
    let path = cfg.paths.cvae(conditional);
    let params = load_snapshot(&path).with_context(|| format!("missing model {}", path.display()))?;
    let model = Cvae::from_params(params)?;
    if model.is_conditional() != conditional {
        bail!("{} holds the wrong model variant", path.display());
    }
    Ok(model)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn report(run: &RunResult, dir: &Path, dump: usize) -> Result<()> {
    ensure_dir(dir)?;
    run.record.write_csv(&dir.join("metrics.csv"))?;
    for (i, out) in run.outputs.iter().take(dump).enumerate() {
        out.image
            .write_skbi(&dir.join(format!("{i:04}_class{}.skbi", out.predicted)))?;
    }
    let a = run.record.aggregate()?;
    println!(
        "{} ({}): accuracy {:.4}, semantic accuracy {:.4}, PSNR {} dB, SSIM {:.4}, {} bytes sent",
        run.method,
        run.mode.as_str(),
        a.classification_accuracy,
        a.semantic_accuracy,
        a.psnr.map(|p| format!("{p:.2}")).unwrap_or_else(|| "inf".into()),
        a.ssim,
        run.wire_bytes()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::ShowConfig => println!("{}", cfg.to_json()),
        Command::GenData => {
            let ds = make_glyph_dataset(&cfg.glyph)?;
            export_glyphs(&ds, &cfg.paths.data_dir)?;
            println!(
                "wrote {} train and {} test images to {}",
                ds.train.len(),
                ds.test.len(),
                cfg.paths.data_dir.display()
            );
        }
        Command::TrainEncoder => {
            let ds = load_data(&cfg)?;
            let trained = train_semantic_encoder(&ds.train, &ds.skb, &cfg.encoder, cfg.train_seed)?;
            ensure_dir(&cfg.paths.model_dir)?;
            save_snapshot(trained.encoder.params(), &cfg.paths.encoder())?;
            write_trace(&cfg.paths.model_dir.join("encoder_loss.csv"), &trained.loss_trace)?;
            let (acc, sem) = evaluate_classifier(&trained.encoder, &ds.skb, &ds.test)?;
            println!("held-out accuracy {acc:.4}, semantic accuracy {sem:.4}");
        }
        Command::TrainCvae { unconditional } => {
            let ds = load_data(&cfg)?;
            let cvae_cfg = CvaeConfig {
                conditional: !unconditional,
                ..cfg.cvae.clone()
            };
            let trained = train_cvae(&ds.train, &ds.skb, &cvae_cfg, cfg.train_seed)?;
            ensure_dir(&cfg.paths.model_dir)?;
            let path = cfg.paths.cvae(!unconditional);
            save_snapshot(&trained.cvae.snapshot_params(), &path)?;
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            write_trace(
                &cfg.paths.model_dir.join(format!("{stem}_loss.csv")),
                &trained.loss_trace,
            )?;
            println!("saved {}", path.display());
        }
        Command::Run {
            snr,
            budget,
            seed,
            baseline,
        } => {
            let ds = load_data(&cfg)?;
            let encoder = load_encoder(&cfg)?;
            let link = LinkConfig {
                snr_db: snr,
                power: cfg.eval.channel_power,
            };
            let run = if baseline {
                run_vanilla_baseline(&load_cvae(&cfg, false)?, &encoder, &ds.skb, &link, &ds.test, seed)?
            } else {
                let cvae = load_cvae(&cfg, true)?;
                let theta = RateConfig::for_model(0.0, &cvae)?.theta;
                let rate = RateConfig::for_model(budget.unwrap_or(theta), &cvae)?;
                run_end_to_end(&encoder, &cvae, &ds.skb, &rate, &link, &ds.test, seed)?
            };
            let dir =
                cfg.paths
                    .output_dir
                    .join(format!("run_{}_{}_snr{snr}_seed{seed}", run.method, run.mode.as_str()));
            report(&run, &dir, cfg.eval.dump_images)?;
            println!(
                "mean-image baseline PSNR {:.2} dB",
                mean_image_psnr(&ds.train, &ds.test)?
            );
        }
        Command::Sweep { baseline } => {
            let ds = load_data(&cfg)?;
            let encoder = load_encoder(&cfg)?;
            let cvae = load_cvae(&cfg, true)?;
            let theta = RateConfig::for_model(0.0, &cvae)?.theta;
            let grid = SweepGrid {
                snr_db: cfg.eval.snr_db.clone(),
                budgets: cfg
                    .eval
                    .budgets
                    .iter()
                    .map(|b| b.resolve(theta))
                    .collect::<Result<_, _>>()?,
                seeds: cfg.eval.seeds.clone(),
                power: cfg.eval.channel_power,
            };
            ensure_dir(&cfg.paths.output_dir)?;
            let rows = sweep(&encoder, &cvae, &ds.skb, &grid, &ds.test)?;
            let path = cfg.paths.output_dir.join("sweep.csv");
            write_sweep_csv(&path, &rows)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
            if baseline {
                let rows = vanilla_sweep(&load_cvae(&cfg, false)?, &encoder, &ds.skb, &grid, &ds.test)?;
                let path = cfg.paths.output_dir.join("sweep_vanilla.csv");
                write_sweep_csv(&path, &rows)?;
                println!("wrote {} rows to {}", rows.len(), path.display());
            }
        }
        Command::AblateSkb => {
            let ablation = AblationConfig {
                dims: cfg.ablation.dims.clone(),
                seeds: cfg.ablation.seeds.clone(),
                glyph: cfg.glyph.clone(),
                encoder: cfg.encoder.clone(),
            };
            let rows = ablate_skb(&ablation)?;
            ensure_dir(&cfg.paths.output_dir)?;
            let path = cfg.paths.output_dir.join("ablation.csv");
            write_ablation_csv(&path, &rows)?;
            for &d in &ablation.dims {
                let accs: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.attributes == d)
                    .map(|r| r.classification_accuracy)
                    .collect();
                println!(
                    "d={d}: mean accuracy {:.4}",
                    accs.iter().sum::<f64>() / accs.len() as f64
                );
            }
        }
    }
    Ok(())
}
