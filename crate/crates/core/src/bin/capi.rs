use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array3;

use capi::archive::Archive;
use capi::network::ParamSet;
use capi::probes::pooling::patch_features;
use capi::probes::{
    attentive_probe_train, pca_feature_map, segmentation_probes, AttentiveConfig, FeatureBank,
    Provenance, SegmentationConfig, Split,
};
use capi::trainer::{checkpoint, pretrain, Dataset, DirectorySink, TrainState};
use capi::workbench::{
    emit_plots, parse_metrics, save_rgb_map, synthetic_patch_bank, DataSource, ImageFolder,
    LabelKind, Preprocess, RunConfig, SyntheticDataset,
};
use capi::{CapiError, Result};

#[derive(Parser)]
#[command(
    name = "capi",
    version,
    about = "Clustering-target masked image modeling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelArg {
    Patch,
    Image,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain from scratch or resume from a checkpoint.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Image folder or `synthetic:<key=value,...>`.
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Writes frozen patch features of a dataset as a feature-bank archive.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Synthetic data only; folders always use image labels.
        #[arg(long, value_enum, default_value = "patch")]
        labels: LabelArg,
        #[arg(long, value_enum, default_value = "teacher")]
        encoder: EncoderArg,
        /// Number of images (default: all, or 1000 for synthetic data).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Attentive classification probe over one or more banks.
    ProbeClassify {
        #[arg(long, required = true, num_args = 1..)]
        bank: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-NN and logistic-regression segmentation probes over patch banks.
    ProbeSegment {
        #[arg(long, required = true, num_args = 1..)]
        bank: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PCA maps of patch features as PNG images.
    VizPca {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// One PCA shared by all images instead of one per image.
        #[arg(long)]
        joint: bool,
        #[arg(long, default_value_t = 16)]
        scale: u32,
    },
    /// Loss, schedule and position-MI plots from a metrics log.
    EmitPlots {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

enum Data {
    Synthetic(SyntheticDataset),
    Folder(ImageFolder),
}

impl Data {
    fn open(source: &str, default_count: usize, default_seed: u64) -> Result<Self> {
        Ok(match source.parse::<DataSource>()? {
            DataSource::Synthetic { spec, count, seed } => Data::Synthetic(SyntheticDataset::new(
                spec,
                count.unwrap_or(default_count),
                seed.unwrap_or(default_seed),
            )?),
            DataSource::Folder(path) => Data::Folder(ImageFolder::open(&path)?),
        })
    }

    fn dataset(&self) -> &dyn Dataset {
        match self {
            Data::Synthetic(d) => d,
            Data::Folder(d) => d,
        }
    }

    /// Evaluation view of image `i` at `resolution`.
    fn eval_image(&self, i: usize, resolution: usize) -> Result<Array3<f64>> {
        match self {
            Data::Synthetic(d) => Ok(d.sample(i).image),
            Data::Folder(d) => d.load(i, resolution, Preprocess::Eval, 0),
        }
    }
}

fn write_records(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_banks(paths: &[PathBuf]) -> Result<FeatureBank> {
    let banks = paths
        .iter()
        .map(|p| FeatureBank::from_archive(&Archive::load(p)?))
        .collect::<Result<Vec<_>>>()?;
    FeatureBank::concat(&banks)
}

fn pretrain_cmd(
    config: Option<&Path>,
    data: &str,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let rc = run_config(config)?;
    let (net, cfg, schedule) = (rc.network(), rc.train(), rc.schedule());
    let data = Data::open(data, rc.synthetic_count, rc.seed)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), rc.to_toml()?)?;
    let state = match resume {
        Some(path) => {
            let (state, ck_net, ck_cfg) = checkpoint::load(path)?;
            if ck_net != net || ck_cfg != cfg || state.seed != rc.seed {
                return Err(CapiError::Config(format!(
                    "checkpoint {} was written under a different configuration",
                    path.display()
                )));
            }
            // drop records the resumed run will write again
            let metrics_path = out.join(DirectorySink::METRICS);
            if metrics_path.exists() {
                let kept: String = parse_metrics(&std::fs::read_to_string(&metrics_path)?)
                    .into_iter()
                    .filter(|m| m.step < state.step)
                    .map(|m| serde_json::to_string(&m).map(|s| s + "\n"))
                    .collect::<serde_json::Result<_>>()?;
                std::fs::write(&metrics_path, kept)?;
            }
            log::info!("resuming from step {}", state.step);
            state
        }
        None => TrainState::new(&net, &cfg, rc.seed)?,
    };
    let mut sink = DirectorySink::new(out)?;
    let end = pretrain(
        state,
        &net,
        &cfg,
        &schedule,
        data.dataset(),
        &mut sink,
        rc.checkpoint_every,
    )?;
    log::info!("finished at step {}", end.step);
    Ok(())
}

fn encoder_params(state: &TrainState, which: EncoderArg) -> ParamSet {
    match which {
        EncoderArg::Teacher => state.teacher.clone(),
        EncoderArg::Student => state.network.with_prefix("encoder."),
    }
}

#[allow(clippy::too_many_arguments)]
fn export_cmd(
    ckpt: &Path,
    data: &str,
    out: &Path,
    split: Split,
    labels: LabelArg,
    which: EncoderArg,
    count: Option<usize>,
) -> Result<()> {
    let (state, net, cfg) = checkpoint::load(ckpt)?;
    let encoder = encoder_params(&state, which);
    let data = Data::open(data, count.unwrap_or(1000), state.seed)?;
    let n = count
        .unwrap_or(data.dataset().len())
        .min(data.dataset().len());
    let bank = match &data {
        Data::Synthetic(d) => {
            let kind = match labels {
                LabelArg::Patch => LabelKind::Patch,
                LabelArg::Image => LabelKind::Image,
            };
            synthetic_patch_bank(d, 0..n, &encoder, &net, split, kind)?
        }
        Data::Folder(f) => {
            let mut parts = Vec::with_capacity(n);
            for i in 0..n {
                let feats = patch_features(&data.eval_image(i, cfg.image_size)?, &encoder, &net)?;
                let rows = feats.nrows();
                parts.push(FeatureBank::new(
                    feats,
                    vec![f.labels[i]; rows],
                    vec![split; rows],
                    (0..rows)
                        .map(|p| Provenance {
                            image: i,
                            position: Some(p),
                        })
                        .collect(),
                )?);
            }
            FeatureBank::concat(&parts)?
        }
    };
    bank.to_archive().save(out)?;
    log::info!(
        "wrote {} rows of dim {} to {}",
        bank.len(),
        bank.dim(),
        out.display()
    );
    Ok(())
}

fn pca_cmd(
    ckpt: &Path,
    data: &str,
    out: &Path,
    count: usize,
    joint: bool,
    scale: u32,
) -> Result<()> {
    let (state, net, cfg) = checkpoint::load(ckpt)?;
    let data = Data::open(data, count, state.seed)?;
    let n = count.min(data.dataset().len());
    let mut feats = Vec::with_capacity(n);
    let mut lattice = None;
    for i in 0..n {
        let image = data.eval_image(i, cfg.image_size)?;
        let (_, shape) = capi::network::extract_patches(&image, net.patch_size)?;
        if lattice.is_some_and(|l| l != shape) {
            return Err(CapiError::InvalidShape(
                "images have different patch lattices".into(),
            ));
        }
        lattice = Some(shape);
        feats.push(patch_features(&image, &state.teacher, &net)?);
    }
    let lattice =
        lattice.ok_or_else(|| CapiError::DegenerateInput("no images to visualize".into()))?;
    std::fs::create_dir_all(out)?;
    for (i, map) in pca_feature_map(&feats, lattice, joint)?.iter().enumerate() {
        save_rgb_map(map, &out.join(format!("pca_{i:04}.png")), scale)?;
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain {
            config,
            data,
            out,
            resume,
        } => pretrain_cmd(config.as_deref(), &data, &out, resume.as_deref()),
        Command::ExportFeatures {
            checkpoint,
            data,
            out,
            split,
            labels,
            encoder,
            count,
        } => export_cmd(
            &checkpoint,
            &data,
            &out,
            split.into(),
            labels,
            encoder,
            count,
        ),
        Command::ProbeClassify { bank, config, out } => (|| {
            let rc = run_config(config.as_deref())?;
            let bank = load_banks(&bank)?;
            let cfg = AttentiveConfig {
                head_width: rc.attentive_head_width,
                epochs: rc.attentive_epochs,
                holdout: rc.probe_holdout,
                seed: rc.seed,
                ..AttentiveConfig::default()
            };
            let (_, report) = attentive_probe_train(&bank, bank.n_classes(), &cfg)?;
            write_records(out.as_deref(), &report.to_records()?)
        })(),
        Command::ProbeSegment { bank, config, out } => (|| {
            let rc = run_config(config.as_deref())?;
            let bank = load_banks(&bank)?;
            let cfg = SegmentationConfig {
                ks: rc.knn_ks.clone(),
                holdout: rc.probe_holdout,
                seed: rc.seed,
                ..SegmentationConfig::default()
            };
            let r = segmentation_probes(&bank, &cfg)?;
            write_records(
                out.as_deref(),
                &(r.knn.to_records()? + &r.logreg.to_records()?),
            )
        })(),
        Command::VizPca {
            checkpoint,
            data,
            out,
            count,
            joint,
            scale,
        } => pca_cmd(&checkpoint, &data, &out, count, joint, scale),
        Command::EmitPlots { metrics, out } => std::fs::read_to_string(&metrics)
            .map_err(CapiError::from)
            .and_then(|log| emit_plots(&log, &out))
            .map(|d| d.files.iter().for_each(|f| println!("{}", f.display()))),
    };
    if let Err(e) = result {
        log::error!("{e}");
        std::process::exit(1);
    }
}
