use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use patchcert::defense::{certify_with, DetectionReport, MaskedView};
use patchcert::eval::{
    attack_eval, evaluate, rf_info_for_config, AttackSettings, Dataset, EvalConfig,
};
use patchcert::rf::{PatchSize, ThreatModel};
use patchcert::toy::{random_model, smooth_image};
use patchcert::{
    load_tensor, predict, CertificationResult, DefenseParams, Error, ModelWeights, Result, Tensor,
};

#[derive(Parser)]
#[command(
    name = "patchcert",
    version,
    about = "Certified patch-attack detection for receptive-field-limited CNNs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Threshold override; repeat for several values.
    #[arg(long = "tau")]
    taus: Vec<f32>,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Receptive field, feature extent and mask window for a config.
    RfInfo {
        #[command(flatten)]
        common: Common,
    },
    /// Run the detector on one image.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        /// Include every masked prediction in the output.
        #[arg(long)]
        trace: bool,
    },
    /// Check whether one image is certified for a label.
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        label: usize,
        /// List every failing window instead of stopping at the first.
        #[arg(long)]
        exhaustive: bool,
    },
    /// Clean and certified accuracy over a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
        /// Print JSON on stdout instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Pixel and feature attack sweeps over a dataset.
    AttackEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Write a small random model, dataset and config for trying things out.
    GenToy {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        images: usize,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common) -> Result<EvalConfig> {
    let mut cfg = EvalConfig::load(&common.config)?;
    if !common.taus.is_empty() {
        cfg.taus = common.taus.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn window_for(cfg: &EvalConfig, weights: &ModelWeights, image: &Tensor) -> Result<usize> {
    let (h, w, _) = image.dims3()?;
    let patch = ThreatModel::resolve(cfg.patch, h, w)?.patch;
    Ok(DefenseParams::for_patch(cfg.taus[0], patch, weights)?.window)
}

#[derive(Serialize)]
struct PerTau<T> {
    tau: f32,
    #[serde(flatten)]
    result: T,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::RfInfo { common } => {
            let cfg = load_config(&common)?;
            emit(&rf_info_for_config(&cfg)?, common.out.as_deref())
        }
        Command::Detect {
            common,
            image,
            trace,
        } => {
            let cfg = load_config(&common)?;
            let weights = cfg.load_weights()?;
            let x = load_tensor(&image)?;
            let view = MaskedView::from_image(&x, &weights, window_for(&cfg, &weights, &x)?)?;
            let results: Vec<PerTau<DetectionReport>> = cfg
                .taus
                .iter()
                .map(|&tau| PerTau {
                    tau,
                    result: view.detect_report(&weights, tau, trace),
                })
                .collect();
            emit(&results, common.out.as_deref())
        }
        Command::Certify {
            common,
            image,
            label,
            exhaustive,
        } => {
            let cfg = load_config(&common)?;
            let weights = cfg.load_weights()?;
            let x = load_tensor(&image)?;
            let window = window_for(&cfg, &weights, &x)?;
            let results = cfg
                .taus
                .iter()
                .map(|&tau| {
                    let params = DefenseParams::new(tau, window)?;
                    Ok(PerTau {
                        tau,
                        result: certify_with(&x, label, &weights, &params, exhaustive)?,
                    })
                })
                .collect::<Result<Vec<PerTau<CertificationResult>>>>()?;
            emit(&results, common.out.as_deref())
        }
        Command::Evaluate {
            common,
            workers,
            json,
        } => {
            let cfg = load_config(&common)?;
            let weights = cfg.load_weights()?;
            let dataset = cfg.load_dataset()?;
            let started = Instant::now();
            let report = evaluate(
                &weights,
                &dataset,
                cfg.patch,
                &cfg.taus,
                workers.unwrap_or(cfg.workers),
            )?;
            eprintln!(
                "evaluated {} images in {:.2?}",
                report.images,
                started.elapsed()
            );
            if let Some(path) = common.out.as_deref() {
                emit(&report, Some(path))?;
            }
            if json {
                emit(&report, None)
            } else {
                print!("{}", report.table());
                Ok(())
            }
        }
        Command::AttackEval {
            common,
            workers,
            seed,
            budget,
        } => {
            let cfg = load_config(&common)?;
            let weights = cfg.load_weights()?;
            let dataset = cfg.load_dataset()?;
            let mut settings = AttackSettings::from(&cfg);
            settings.workers = workers.unwrap_or(settings.workers);
            settings.seed = seed.unwrap_or(settings.seed);
            settings.budget = budget.unwrap_or(settings.budget);
            let started = Instant::now();
            let report = attack_eval(&weights, &dataset, &settings)?;
            eprintln!(
                "{} attempts, {} violations, {} unguarded successes in {:.2?}",
                report.summary.attempts,
                report.summary.violations,
                report.summary.unguarded_successes,
                started.elapsed()
            );
            emit(&report, common.out.as_deref())
        }
        Command::GenToy { out, seed, images } => gen_toy(&out, seed, images),
    }
}

const HEAD_GAIN: f32 = 8.0;

fn gen_toy(out: &Path, seed: u64, images: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 5;
    let base = random_model(&mut rng, 3, &[(3, 1, 8), (3, 2, 12), (3, 2, 16)], classes)?;
    // a sharper head than the default init so some masked predictions clear tau
    let head = base.head_matrix();
    let head = Tensor::new(
        head.shape().to_vec(),
        head.data().iter().map(|v| v * HEAD_GAIN).collect(),
    )?;
    let bias = (0..classes).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let layers = base
        .conv_layers()
        .into_iter()
        .map(|(s, w, b)| (s, w.clone(), b.clone()))
        .collect();
    let model = ModelWeights::new(layers, head, Tensor::new(vec![classes], bias)?)?;
    model.save_bundle(out.join("bundle"))?;

    let mut dataset = Dataset::default();
    for i in 0..images {
        let x = smooth_image(&mut rng, 48, 48, 3);
        let u = patchcert::extract_features(&x, &model)?;
        let label = predict(&u, &model)?.label;
        dataset.push(format!("img{i:03}.npy"), x, label);
    }
    dataset.save(out.join("data"))?;

    let cfg = EvalConfig {
        architecture: Some(model.conv_specs()),
        weights: Some("bundle".into()),
        dataset: Some("data".into()),
        image_size: Some([48, 48]),
        patch: PatchSize::Pixels(6),
        taus: vec![0.3, 0.4, 0.5, 0.6, 0.7],
        attack_budget: 20,
        location_stride: None,
        seed,
        workers: 1,
    };
    emit(&cfg, Some(&out.join("config.json")))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}
