use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;

use sta_motion::body_model::SkeletonTemplate;
use sta_motion::config::RunConfig;
use sta_motion::dataio::{generate_synthetic, load_dataset, save_dataset, DatasetFile, MotionSequence};
use sta_motion::error::ErrorCategory;
use sta_motion::eval::{
    acceleration_curve, evaluate_init, evaluate_model, init_params, predict_all, prepare_sequences, threads_from_env,
    write_curve_csv, write_predictions_csv, PreparedSequence,
};
use sta_motion::model::{mean_state, Model};
use sta_motion::providers::{FrameProvider, ProviderData, SyntheticProvider};
use sta_motion::train::{split_validation, train};
use sta_motion::{Error, Result};

#[derive(Parser)]
#[command(name = "sta-motion", version, about = "Temporally consistent 3D human motion recovery")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base preset when no config file is given: `paper` or `desk`.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Seed for data, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// Evaluation threads; overrides the environment.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct Ablations {
    #[arg(long)]
    no_body_aware_features: bool,
    #[arg(long)]
    no_pose_init: bool,
    #[arg(long)]
    no_cam_init: bool,
    #[arg(long)]
    no_lstm: bool,
    #[arg(long)]
    am_on_pose: bool,
    #[arg(long)]
    lstm_on_features: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sequences with provider outputs.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_seqs: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        pose_sigma: Option<f64>,
        /// Store ground truth only; providers are recomputed on use.
        #[arg(long)]
        no_providers: bool,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[command(flatten)]
        ablations: Ablations,
    },
    /// Write per-frame predictions, one CSV per sequence.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Restrict to one sequence.
        #[arg(long)]
        seq_id: Option<String>,
    },
    /// Per-sequence and mean metrics.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score the provider initialization instead of a checkpoint.
        #[arg(long)]
        init: bool,
    },
    /// Per-frame acceleration magnitudes of ground truth, initialization and refinement.
    AccelCurve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seq_id: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numerical => 4,
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(path), None) => RunConfig::load(path)?,
        (None, Some(p)) => RunConfig::preset(p)?,
        (None, None) => RunConfig::paper(),
        (Some(_), Some(_)) => return Err(Error::Config("use either --config or --preset".into())),
    };
    if let Some(s) = c.seed {
        cfg.data.seed = s;
        cfg.data.provider.seed = s;
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    if let Some(w) = c.window {
        cfg.model.window = w;
    }
    if let Some(s) = c.stride {
        cfg.eval.stride = s;
    }
    if c.threads.is_some() {
        cfg.eval.threads = c.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn threads(cfg: &RunConfig) -> Result<Option<usize>> {
    match cfg.eval.threads {
        Some(0) => Err(Error::Config("--threads must be positive".into())),
        Some(n) => Ok(Some(n)),
        None => threads_from_env(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn provider_for(data: &DatasetFile, cfg: &RunConfig, grid: usize) -> Result<Box<dyn FrameProvider>> {
    match &data.providers {
        Some(p) if p.grid != grid => Err(Error::Incompatible(format!(
            "dataset features use G={}, model expects G={grid}",
            p.grid
        ))),
        Some(p) => Ok(Box::new(p.clone())),
        None => {
            let mut pc = cfg.data.provider.clone();
            pc.grid = grid;
            Ok(Box::new(SyntheticProvider::new(pc)?))
        }
    }
}

fn prepare(data: &DatasetFile, cfg: &RunConfig, grid: usize, seqs: &[MotionSequence]) -> Result<Vec<PreparedSequence>> {
    let provider = provider_for(data, cfg, grid)?;
    prepare_sequences(seqs, provider.as_ref())
}

fn gen_data(cfg: &mut RunConfig, out: &Path, n: Option<usize>, len: Option<usize>, sigma: Option<f64>, bare: bool) -> Result<()> {
    if let Some(n) = n {
        cfg.data.n_seqs = n;
    }
    if let Some(l) = len {
        cfg.data.length = l;
    }
    if let Some(s) = sigma {
        cfg.data.provider.pose_sigma = s;
    }
    let tmpl = SkeletonTemplate::standard();
    let seqs = generate_synthetic(cfg.data.seed, cfg.data.n_seqs, cfg.data.length, &cfg.data.motion, &tmpl)?;
    let providers = if bare {
        None
    } else {
        let p = SyntheticProvider::new(cfg.data.provider.clone())?;
        Some(ProviderData::from_provider(&p, &seqs)?)
    };
    save_dataset(
        out,
        &DatasetFile {
            template: tmpl,
            sequences: seqs,
            providers,
        },
    )?;
    info!("wrote {} sequences of {} frames to {}", cfg.data.n_seqs, cfg.data.length, out.display());
    Ok(())
}

fn run_train(cfg: &RunConfig, data_path: &Path, out: &Path, log_path: Option<&Path>) -> Result<()> {
    let data = load_dataset(data_path)?;
    let (tr_idx, val_idx) = split_validation(data.sequences.len(), cfg.train.val_fraction, cfg.train.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| data.sequences[i].clone()).collect::<Vec<_>>();
    let (tr, val) = (pick(&tr_idx), pick(&val_idx));
    if let Some(s) = tr.iter().find(|s| s.len() < cfg.model.window) {
        return Err(Error::Incompatible(format!(
            "sequence `{}` has {} frames, window is {}",
            s.seq_id,
            s.len(),
            cfg.model.window
        )));
    }
    let tr_p = prepare(&data, cfg, cfg.model.grid, &tr)?;
    let val_p = prepare(&data, cfg, cfg.model.grid, &val)?;
    let mut model = Model::<f32>::new(cfg.model.clone(), &mean_state(&tr)?)?;
    let tmpl = Arc::new(data.template.clone());
    let report = train(&mut model, &tr_p, &val_p, &cfg.train, &tmpl, cfg.eval.stride)?;
    model.save(out)?;
    if let Some(p) = log_path {
        let mut w = create(p)?;
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    info!("trained {} steps, kept epoch {:?}", report.steps.len(), report.best_epoch);
    Ok(())
}

/// Loads a checkpoint whose architecture matches the configuration; ablation flags and seed come from the checkpoint.
fn load_model(path: &Path, cfg: &RunConfig) -> Result<Model<f32>> {
    let model = Model::<f32>::load(path)?;
    let mut expected = cfg.model.clone();
    expected.flags = model.config.flags;
    expected.seed = model.config.seed;
    if expected != model.config {
        return Err(Error::Incompatible(format!(
            "checkpoint architecture {:?} differs from configuration {:?}",
            model.config, expected
        )));
    }
    Ok(model)
}

fn select(data: &DatasetFile, seq_id: Option<&str>) -> Result<Vec<MotionSequence>> {
    match seq_id {
        Some(id) => Ok(vec![data.sequence(id)?.clone()]),
        None => Ok(data.sequences.clone()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData {
            out,
            n_seqs,
            length,
            pose_sigma,
            no_providers,
        } => gen_data(&mut cfg, &out, n_seqs, length, pose_sigma, no_providers),
        Command::Train {
            data,
            out,
            log,
            epochs,
            lr,
            batch_size,
            max_steps,
            ablations: a,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(l) = lr {
                cfg.train.learning_rate = l;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if max_steps.is_some() {
                cfg.train.max_steps = max_steps;
            }
            let f = &mut cfg.model.flags;
            f.no_body_aware_features |= a.no_body_aware_features;
            f.no_pose_init |= a.no_pose_init;
            f.no_cam_init |= a.no_cam_init;
            f.no_lstm |= a.no_lstm;
            f.am_on_pose |= a.am_on_pose;
            f.lstm_on_features |= a.lstm_on_features;
            cfg.validate()?;
            run_train(&cfg, &data, &out, log.as_deref())
        }
        Command::Infer {
            ckpt,
            data,
            out_dir,
            seq_id,
        } => {
            let model = load_model(&ckpt, &cfg)?;
            let data = load_dataset(&data)?;
            let seqs = prepare(&data, &cfg, model.config.grid, &select(&data, seq_id.as_deref())?)?;
            let preds = predict_all(&model, &seqs, cfg.eval.stride, threads(&cfg)?)?;
            std::fs::create_dir_all(&out_dir)?;
            for (s, p) in seqs.iter().zip(&preds) {
                let mut w = create(&out_dir.join(format!("{}.csv", s.seq.seq_id)))?;
                write_predictions_csv(&p.params, &p.cameras, &mut w)?;
                w.flush()?;
            }
            Ok(())
        }
        Command::Eval { ckpt, data, out, init } => {
            let data = load_dataset(&data)?;
            let report = match (ckpt, init) {
                (None, true) => {
                    let grid = data.providers.as_ref().map_or(cfg.model.grid, |p| p.grid);
                    let seqs = prepare(&data, &cfg, grid, &data.sequences)?;
                    evaluate_init(&seqs, &data.template)?
                }
                (Some(ckpt), false) => {
                    let model = load_model(&ckpt, &cfg)?;
                    let seqs = prepare(&data, &cfg, model.config.grid, &data.sequences)?;
                    let tmpl = Arc::new(data.template.clone());
                    evaluate_model(&model, &seqs, cfg.eval.stride, &tmpl, threads(&cfg)?)?
                }
                _ => return Err(Error::Config("eval needs exactly one of --ckpt and --init".into())),
            };
            let mut w = create(&out)?;
            report.write_csv(&mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::AccelCurve {
            ckpt,
            data,
            seq_id,
            out,
        } => {
            let model = load_model(&ckpt, &cfg)?;
            let data = load_dataset(&data)?;
            let seqs = prepare(&data, &cfg, model.config.grid, &select(&data, Some(&seq_id))?)?;
            let pred = predict_all(&model, &seqs, cfg.eval.stride, threads(&cfg)?)?;
            let rows = acceleration_curve(&seqs[0].seq, &init_params(&seqs[0].inputs)?, &pred[0].params, &data.template)?;
            let mut w = create(&out)?;
            write_curve_csv(&rows, &mut w)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
