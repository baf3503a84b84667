mod plot;
mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abn::data_model::{FeatureBundle, VideoRecord};
use abn::evaluation::{evaluate, write_report};
use abn::inference::{read_proposals, write_proposals};
use abn::io_synth::{bundle_file_name, generate, parse_annotations, read_bundles, subset, write_annotations, write_bundle};
use abn::training::{
    continue_training, grad_check, grad_check_config, load_checkpoint, pair_videos, predict, prepare_training_set,
    save_checkpoint, TrainState,
};
use abn::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

use settings::RunConfig;

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "abn", version, about = "Temporal action proposals with an agent-aware boundary network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of feature bundles and annotations.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write a checkpoint plus a per-epoch loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory holding annotations.json and features/.
        #[arg(long)]
        data: PathBuf,
        /// Shortcut for `--set train.epochs=N`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate proposals for a dataset with a trained checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Annotation subset to process, or `all`.
        #[arg(long, default_value = "validation")]
        subset: String,
    },
    /// Score proposals against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long, default_value = "validation")]
        subset: String,
    },
    /// Compare analytic and finite-difference gradients on a tiny network.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Entries checked per parameter tensor.
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Draw ground truth and top proposals as PNG timelines.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long, default_value = "validation")]
        subset: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Narrow network sized for the synthetic set.
    Desk,
    /// Full-width network at 100 snippets of 400-dimensional features.
    Full,
}

#[derive(Args)]
struct Common {
    /// JSON config file, flat dotted keys or nested sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "ABN_OUT_DIR")]
    out: PathBuf,
    /// Sets `train.seed` and `synth.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override one config key, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
}

impl Common {
    fn base(&self) -> RunConfig {
        match self.preset {
            Preset::Desk => RunConfig::default(),
            Preset::Full => RunConfig::full(),
        }
    }

    fn resolve_from(&self, base: RunConfig, extra: &[String]) -> Result<RunConfig, Error> {
        let mut sets = self.sets.clone();
        sets.extend_from_slice(extra);
        settings::resolve(base, self.config.as_deref(), &sets, self.seed)
    }

    fn prepare(&self, cfg: &RunConfig) -> Result<(), Error> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build_global()
            .map_err(|e| config_error("--jobs", e.to_string()))?;
        create_dir(&self.out)?;
        let echo = serde_json::to_string_pretty(&cfg.echo()).expect("plain data");
        write_text(&self.out.join("effective_config.json"), &echo)
    }
}

fn config_error(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source: e,
    }
}

fn create_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn load_records(data: &Path) -> Result<Vec<VideoRecord>, Error> {
    parse_annotations(&data.join("annotations.json"))
}

fn select(records: &[VideoRecord], name: &str) -> Vec<VideoRecord> {
    if name == "all" {
        records.to_vec()
    } else {
        subset(records, name)
    }
}

fn load_bundles(data: &Path, records: &[VideoRecord]) -> Result<Vec<FeatureBundle>, Error> {
    read_bundles(&data.join("features"), records.iter().map(|r| &r.video_id))
}

fn cmd_synth(common: &Common) -> Result<(), Error> {
    let cfg = common.resolve_from(common.base(), &[])?;
    common.prepare(&cfg)?;
    let (bundles, records) = generate(&cfg.synth)?;
    let features = common.out.join("features");
    create_dir(&features)?;
    for b in &bundles {
        write_bundle(b, &features.join(bundle_file_name(&b.video_id)))?;
    }
    write_annotations(&records, &common.out.join("annotations.json"))?;
    log::info!("wrote {} videos to {}", records.len(), common.out.display());
    Ok(())
}

fn cmd_train(common: &Common, data: &Path, epochs: Option<usize>) -> Result<(), Error> {
    let extra: Vec<String> = epochs.map(|e| format!("train.epochs={e}")).into_iter().collect();
    let cfg = common.resolve_from(common.base(), &extra)?;
    common.prepare(&cfg)?;
    let records = load_records(data)?;
    let has_subsets = records.iter().any(|r| r.subset.is_some());
    let train_records = if has_subsets { subset(&records, "training") } else { records.clone() };
    let val_records = subset(&records, "validation");
    let core = cfg.core();
    let train_bundles = load_bundles(data, &train_records)?;
    let examples = prepare_training_set(&train_records, &train_bundles, &core)?;
    let validation = pair_videos(&val_records, &load_bundles(data, &val_records)?);
    log::info!("{} training examples, {} validation videos", examples.len(), validation.len());

    let mut state = TrainState::new(&core)?;
    let mut log_text = String::from("epoch,train_loss,val_auc\n");
    continue_training(&mut state, &examples, &validation, core.train.epochs, |r| {
        let auc = r.val_auc.map(|a| a.to_string()).unwrap_or_default();
        log_text.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, auc));
    })?;
    write_text(&common.out.join("loss_log.csv"), &log_text)?;
    save_checkpoint(&state, &common.out.join("checkpoint.abnc"))?;
    if let Some(b) = &state.best {
        log::info!("best validation AUC {:.2} at epoch {}", b.auc, b.epoch);
    }
    Ok(())
}

fn cmd_infer(common: &Common, checkpoint: &Path, data: &Path, subset_name: &str) -> Result<(), Error> {
    let state = load_checkpoint(checkpoint)?;
    let cfg = common.resolve_from(RunConfig::from_core(state.config.clone()), &[])?;
    if cfg.model != state.config.model {
        return Err(config_error("model", "model settings are fixed by the checkpoint"));
    }
    common.prepare(&cfg)?;
    let records = select(&load_records(data)?, subset_name);
    let videos = pair_videos(&records, &load_bundles(data, &records)?);
    let props = predict(&state.selected_model(), &videos, &cfg.core())?;
    write_proposals(&props, &common.out.join("proposals.json"))
}

fn cmd_eval(common: &Common, data: &Path, proposals: &Path, subset_name: &str) -> Result<(), Error> {
    let cfg = common.resolve_from(common.base(), &[])?;
    common.prepare(&cfg)?;
    let records = select(&load_records(data)?, subset_name);
    let props = read_proposals(proposals)?;
    let report = evaluate(&records, &props, &cfg.eval)?;
    write_report(&report, &common.out.join("metrics.json"))?;
    println!("auc {:.4}", report.auc);
    for (an, ar) in &report.ar_at_an {
        println!("ar@{an} {ar:.4}");
    }
    Ok(())
}

fn cmd_gradcheck(common: &Common, samples: usize) -> Result<(), Error> {
    let mut base = common.base();
    base.model = grad_check_config();
    let cfg = common.resolve_from(base, &[])?;
    common.prepare(&cfg)?;
    let report = grad_check(&cfg.model, cfg.train.seed, 1e-4, samples)?;
    let text = serde_json::to_string_pretty(&report).expect("plain data");
    write_text(&common.out.join("gradcheck.json"), &text)?;
    println!("max relative error {:.3e}", report.max_rel_error);
    if !(report.max_rel_error <= GRAD_TOLERANCE) {
        let worst = report
            .groups
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .map(|g| g.name.clone())
            .unwrap_or_default();
        return Err(Error::Numerical(format!(
            "gradient check failed: relative error {:.3e} in {worst} exceeds {GRAD_TOLERANCE:e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn cmd_plot(common: &Common, data: &Path, proposals: &Path, subset_name: &str, top_k: usize) -> Result<(), Error> {
    let cfg = common.resolve_from(common.base(), &[])?;
    common.prepare(&cfg)?;
    let records = select(&load_records(data)?, subset_name);
    let props = read_proposals(proposals)?;
    let dir = common.out.join("plots");
    create_dir(&dir)?;
    for r in &records {
        let list = props.get(&r.video_id).map(Vec::as_slice).unwrap_or_default();
        let img = plot::render(r, list, top_k);
        plot::save(&img, &dir.join(format!("{}.png", r.video_id)))?;
    }
    log::info!("wrote {} plots to {}", records.len(), dir.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 4,
        e if e.is_io() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { common } => cmd_synth(common),
        Command::Train { common, data, epochs } => cmd_train(common, data, *epochs),
        Command::Infer {
            common,
            checkpoint,
            data,
            subset,
        } => cmd_infer(common, checkpoint, data, subset),
        Command::Eval {
            common,
            data,
            proposals,
            subset,
        } => cmd_eval(common, data, proposals, subset),
        Command::Gradcheck { common, samples } => cmd_gradcheck(common, *samples),
        Command::Plot {
            common,
            data,
            proposals,
            subset,
            top_k,
        } => cmd_plot(common, data, proposals, subset, *top_k),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
