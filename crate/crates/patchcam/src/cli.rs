//! Command-line pipeline: gen-data, pretrain, finetune, eval, crossval, cam.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use patchcam_core::cam::{compute_cam, localization_score, normalize_heatmap, upsample_bilinear};
use patchcam_core::network::{build_preset, DEFAULT_HEAD_LR_FACTOR, DEFAULT_PATCH_SIZE};
use patchcam_core::synth::{abnormality_classes, gen_full_images, gen_patch_dataset, gen_pretext_dataset};
use patchcam_core::train::{cross_validate, evaluate, split_dataset, train_loop, Metrics, TrainConfig, TrainHistory};
use patchcam_core::{Dataset, Network, Preset, Rng, Sample, Stream};

use crate::error::{Error, Result};
use crate::imageio::{load_dataset_dir, read_pgm, write_dataset_dir, write_overlay_ppm, write_pgm};
use crate::model_file;

#[derive(Debug, Parser)]
#[command(
    name = "patchcam",
    version,
    about = "Patch classifier training and class activation maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic pretext, patch and full-image datasets.
    GenData(GenDataArgs),
    /// Train a preset network from scratch.
    Pretrain(PretrainArgs),
    /// Replace the head of a trained network and train on new classes.
    Finetune(FinetuneArgs),
    /// Score a model on a dataset directory.
    Eval(EvalArgs),
    /// k-fold cross-validation starting from a model.
    Crossval(CrossvalArgs),
    /// Class activation map for one image.
    Cam(CamArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    patches_per_class: usize,
    #[arg(long, default_value_t = 200)]
    pretext_per_class: usize,
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
    patch_size: usize,
    #[arg(long, default_value_t = 50)]
    full_images: usize,
    #[arg(long, default_value_t = 256)]
    full_size: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Write per-batch history as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            base_lr: self.lr,
            max_epochs: self.epochs,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Arch {
    Minivgg,
    Miniresnet,
}

impl From<Arch> for Preset {
    fn from(a: Arch) -> Preset {
        match a {
            Arch::Minivgg => Preset::MiniVgg,
            Arch::Miniresnet => Preset::MiniResNet,
        }
    }
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Arch::Miniresnet)]
    arch: Arch,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_HEAD_LR_FACTOR)]
    head_lr_factor: f64,
    /// Keep every layer before global average pooling fixed.
    #[arg(long)]
    freeze_trunk: bool,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Run k-fold cross-validation with default training settings instead.
    #[arg(long, value_name = "K")]
    crossval: Option<usize>,
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CrossvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct CamArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Class to map; defaults to the predicted class.
    #[arg(long = "class", value_name = "NAME")]
    class_name: Option<String>,
    /// Normalized heatmap, upsampled to the image size.
    #[arg(long, value_name = "HEAT.pgm")]
    out: PathBuf,
    #[arg(long, value_name = "OUT.ppm")]
    overlay: Option<PathBuf>,
    /// Ground-truth mask; prints hit and IoU.
    #[arg(long, value_name = "GT.pgm")]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit status.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a, out),
        Command::Pretrain(a) => pretrain(a, out),
        Command::Finetune(a) => finetune(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Crossval(a) => crossval(a, out),
        Command::Cam(a) => cam(a, out),
    }
}

fn emit(out: &mut dyn Write, text: std::fmt::Arguments) -> Result<()> {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::io("<stdout>", e))
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => { emit($out, format_args!($($arg)*)) };
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> Result<()> {
    if a.patch_size < 32 {
        return Err(Error::Usage(format!(
            "--patch-size must be at least 32, got {}",
            a.patch_size
        )));
    }
    if a.full_size < 4 * a.patch_size {
        return Err(Error::Usage(format!(
            "--full-size must be at least 4x the patch size ({}), got {}",
            4 * a.patch_size,
            a.full_size
        )));
    }
    if a.patches_per_class == 0 || a.pretext_per_class == 0 {
        return Err(Error::Usage("per-class counts must be positive".into()));
    }
    let mut rng = Rng::stream(a.seed, Stream::Data);
    let pretext = gen_pretext_dataset(&mut rng, a.pretext_per_class, a.patch_size);
    let patches = gen_patch_dataset(&mut rng, a.patches_per_class, a.patch_size);
    let cases = gen_full_images(&mut rng, a.full_images, a.full_size, a.patch_size);

    for (name, data) in [("pretext", &pretext), ("patches", &patches)] {
        let (train, test) = split_dataset(data, a.seed)?;
        write_dataset_dir(&train, a.out.join(name).join("train"))?;
        write_dataset_dir(&test, a.out.join(name).join("test"))?;
        say!(out, "{name:<8} train {:>5}  test {:>5}", train.len(), test.len())?;
    }
    let mut full = Dataset::new(abnormality_classes());
    for case in cases {
        full.samples.push(Sample {
            image: case.image,
            label: case.label,
            mask: Some(case.mask),
        });
    }
    write_dataset_dir(&full, a.out.join("full"))?;
    say!(out, "{:<8} {:>5} images with masks", "full", full.len())?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let data = load_dataset_dir(dir)?;
    let shape = data.samples[0].image.shape().to_vec();
    if let Some(s) = data.samples.iter().find(|s| s.image.shape() != shape.as_slice()) {
        return Err(Error::Data(format!(
            "{}: mixed image sizes {:?} and {:?}",
            dir.display(),
            shape,
            s.image.shape()
        )));
    }
    Ok(data)
}

fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut text = String::from("epoch,batch,loss,accuracy\n");
    for r in &history.records {
        text.push_str(&format!("{},{},{},{}\n", r.epoch, r.batch, r.loss, r.accuracy));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn report_training(out: &mut dyn Write, history: &TrainHistory, cfg: &TrainConfig) -> Result<()> {
    let acc = history.batch_accuracies();
    let tail = &acc[acc.len().saturating_sub(cfg.stop_window)..];
    let window = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    say!(out, "{:<16} {}", "epochs", history.epochs_completed)?;
    say!(out, "{:<16} {}", "batches", history.records.len())?;
    say!(out, "{:<16} {:?}", "stop", history.stop_reason)?;
    say!(out, "{:<16} {:.4}", "window accuracy", window)
}

fn train_and_save(mut net: Network, data: &Dataset, t: &TrainArgs, path: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = t.config();
    let history = train_loop(&mut net, data, &cfg)?;
    report_training(out, &history, &cfg)?;
    if let Some(csv) = &t.csv {
        write_history(csv, &history)?;
    }
    model_file::save(&net, path)?;
    say!(out, "{:<16} {}", "model", path.display())
}

fn pretrain(a: PretrainArgs, out: &mut dyn Write) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let (c, h, w) = data.samples[0].image.dims3()?;
    let mut rng = Rng::stream(a.train.seed, Stream::Init);
    let mut net = build_preset(a.arch.into(), c, data.class_names.clone(), &mut rng)?;
    net.input_spec.height = h;
    net.input_spec.width = w;
    net.validate()?;
    train_and_save(net, &data, &a.train, &a.out, out)
}

fn finetune(a: FinetuneArgs, out: &mut dyn Write) -> Result<()> {
    let base = model_file::load(&a.base)?;
    let data = load_dataset(&a.data)?;
    let mut rng = Rng::stream(a.train.seed, Stream::Init);
    let mut net = base.replace_head(data.class_names.clone(), a.head_lr_factor, &mut rng)?;
    if a.freeze_trunk {
        net.freeze_trunk();
    }
    train_and_save(net, &data, &a.train, &a.out, out)
}

fn metrics_rows(m: &Metrics, classes: &[String]) -> Vec<(String, String)> {
    let mut rows = vec![
        ("samples".to_string(), m.total().to_string()),
        ("accuracy".to_string(), format!("{:.6}", m.overall_accuracy)),
    ];
    for (name, acc) in classes.iter().zip(&m.per_class_accuracy) {
        let v = acc.map_or_else(|| "n/a".to_string(), |a| format!("{a:.6}"));
        rows.push((format!("accuracy.{name}"), v));
    }
    for (t, row) in m.confusion.iter().enumerate() {
        for (p, n) in row.iter().enumerate() {
            rows.push((format!("confusion.{}.{}", classes[t], classes[p]), n.to_string()));
        }
    }
    rows
}

fn print_rows(out: &mut dyn Write, rows: &[(String, String)], csv: Option<&Path>) -> Result<()> {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    for (k, v) in rows {
        say!(out, "{k:<width$}  {v}")?;
    }
    if let Some(path) = csv {
        let mut text = String::from("metric,value\n");
        for (k, v) in rows {
            text.push_str(&format!("{k},{v}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn checked_classes(net: &Network, data: &Dataset) -> Result<()> {
    if net.class_names != data.class_names {
        return Err(Error::Data(format!(
            "model classes {:?} do not match dataset classes {:?}",
            net.class_names, data.class_names
        )));
    }
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(k) = a.crossval {
        let train = TrainArgs {
            seed: a.seed,
            epochs: 30,
            batch: 16,
            lr: 1e-4,
            csv: None,
        };
        return run_crossval(&a.model, &a.data, k, &train, a.csv.as_deref(), out);
    }
    let net = model_file::load(&a.model)?;
    let data = load_dataset(&a.data)?;
    checked_classes(&net, &data)?;
    let m = evaluate(&net, &data)?;
    print_rows(out, &metrics_rows(&m, &net.class_names), a.csv.as_deref())
}

fn crossval(a: CrossvalArgs, out: &mut dyn Write) -> Result<()> {
    run_crossval(&a.model, &a.data, a.k, &a.train, a.train.csv.as_deref(), out)
}

fn run_crossval(
    model: &Path,
    data: &Path,
    k: usize,
    t: &TrainArgs,
    csv: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    if k < 2 {
        return Err(Error::Usage(format!("cross-validation needs k >= 2, got {k}")));
    }
    let net = model_file::load(model)?;
    let data = load_dataset(data)?;
    checked_classes(&net, &data)?;
    let cv = cross_validate(&net, &data, k, &t.config())?;
    let mut rows = Vec::new();
    for (i, f) in cv.folds.iter().enumerate() {
        rows.push((format!("fold{i}.samples"), f.validation_indices.len().to_string()));
        rows.push((
            format!("fold{i}.accuracy"),
            format!("{:.6}", f.metrics.overall_accuracy),
        ));
    }
    rows.push(("mean_accuracy".to_string(), format!("{:.6}", cv.mean_accuracy)));
    print_rows(out, &rows, csv)
}

fn cam(a: CamArgs, out: &mut dyn Write) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Usage(format!(
            "--threshold must lie in [0, 1], got {}",
            a.threshold
        )));
    }
    let net = model_file::load(&a.model)?;
    let image = read_pgm(&a.image)?;
    let class = match &a.class_name {
        None => None,
        Some(name) => Some(net.class_names.iter().position(|c| c == name).ok_or_else(|| {
            Error::Usage(format!(
                "unknown class {name:?}; model classes are {:?}",
                net.class_names
            ))
        })?),
    };
    let (_, h, w) = image.dims3()?;
    let raw = compute_cam(&net, &image, class)?;
    let heat = normalize_heatmap(&upsample_bilinear(&raw, (h, w))?);
    write_pgm(&heat.values, &a.out)?;
    say!(out, "class={}", net.class_names[heat.class_index])?;
    if let Some(path) = &a.overlay {
        write_overlay_ppm(&image, &heat.values, path, 0.5)?;
    }
    if let Some(path) = &a.mask {
        let mask = read_pgm(path)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let score = localization_score(&heat.values, &mask, a.threshold)?;
        say!(out, "hit={} iou={:.6}", score.hit, score.iou)?;
    }
    Ok(())
}
