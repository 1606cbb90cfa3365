//! Command-line pipeline over the `boxcaseg` library: synthetic data,
//! joint training, proxy-mask generation, evaluation and gradient checks.
//!
//! [`run`] executes a parsed [`Cli`]; [`CliError::exit_code`] maps failures
//! to the process status (1 usage, 2 data, 3 numeric).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use boxcaseg::augment::AugmentConfig;
use boxcaseg::gradsuite::{run_suite, SuiteConfig};
use boxcaseg::heads::Model;
use boxcaseg::manifest::{base_dir, Manifest};
use boxcaseg::metrics::{InstanceRecord, MetricsReport};
use boxcaseg::proxymask::{generate_proxies, write_proxy_manifest, ProxyConfig};
use boxcaseg::rng::derive_seed;
use boxcaseg::sampler::SamplingMode;
use boxcaseg::synthdata::{generate, write_split, Split, SynthConfig};
use boxcaseg::trainer::{train, LrSchedule, TrainConfig, TrainData, TrainMode, ValData};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const VAL_TAG: u64 = 0x56414c;

/// Training patch side used when neither a config file nor `--patch-size` sets one.
pub const DESK_PATCH: usize = 64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] boxcaseg::Error),

    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(boxcaseg::Error::InvalidArgument(_)) => 1,
            CliError::Core(boxcaseg::Error::NonFinite(_)) | CliError::GradcheckFailed(_) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "boxcaseg",
    version,
    about = "Box-supervised class-agnostic segmentation at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic weak, salient and validation splits.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint.bxt, log.jsonl and run_config.json.
    Train(Box<TrainArgs>),
    /// Predict, merge and drop proxy masks for a box manifest.
    Proxy(ProxyArgs),
    /// Score a predicted manifest against a ground-truth manifest.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output root; receives weak/, salient/ and val/.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of weak (box-only) images.
    #[arg(long, default_value_t = 500)]
    pub weak: usize,
    /// Number of salient (single object, full mask) images.
    #[arg(long, default_value_t = 100)]
    pub salient: usize,
    /// Number of held-out validation images.
    #[arg(long, default_value_t = 150)]
    pub val: usize,
    /// Seed for every split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Joint,
    #[value(name = "mil_only", alias = "mil-only")]
    MilOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    FixedRatio,
    RandomUnion,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root from gen-data; fills in --weak, --salient and --val.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Box-only weak manifest.
    #[arg(long)]
    pub weak: Option<PathBuf>,
    /// Salient manifest with masks.
    #[arg(long)]
    pub salient: Option<PathBuf>,
    /// Validation manifest with masks, evaluated after every epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Skip per-epoch validation.
    #[arg(long)]
    pub no_val: bool,
    /// Run config JSON (as written to run_config.json); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Training mode [default: joint].
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Weak:salient samples per batch [default: 9:7].
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: Option<(usize, usize)>,
    /// Batch composition [default: fixed-ratio].
    #[arg(long, value_enum)]
    pub sampling: Option<SamplingArg>,
    /// Salient-head weight in the pixel-loss blend and in prediction [default: 0.7].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Learning rate [default: 4e-3].
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD momentum [default: 0.9].
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Weight decay on weights, not biases [default: 1e-4].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Per-tensor gradient L2 cap before the update [default: off].
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Learning-rate schedule: `constant` or `poly:POWER` [default: constant].
    #[arg(long, value_parser = parse_schedule)]
    pub schedule: Option<LrSchedule>,
    /// Epochs [default: 10].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training patch side; the proxy crop scales with it [default: 64].
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Backbone widths as four comma-separated integers [default: 16,32,32,16].
    #[arg(long, value_parser = parse_widths)]
    pub widths: Option<[usize; 4]>,
    /// Seed for initialization, sampling and augmentation [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProxyArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Box manifest to annotate.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for manifest.json, masks/ and summary.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Salient-head weight of the prediction blend.
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    /// Box agreement below which a proxy mask is ignored.
    #[arg(long, default_value_t = 0.95)]
    pub drop_thresh: f64,
    /// Side of the square inference crop; match the training proxy size.
    #[arg(long, default_value_t = AugmentConfig::scaled(DESK_PATCH).proxy)]
    pub proxy_size: usize,
    /// Store masks inline as RLE instead of PGM files.
    #[arg(long)]
    pub rle: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth manifest with masks.
    #[arg(long)]
    pub gt: PathBuf,
    /// Predicted manifest with masks, matched by image and instance id.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score only instances whose prediction is not marked ignore.
    #[arg(long)]
    pub kept_only: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seeds per check.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Central-difference step, within [1e-7, 1e-4].
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    /// Side of the random square patches.
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

/// Everything needed to repeat a training run; written as run_config.json
/// and accepted back through `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub weak: PathBuf,
    pub salient: PathBuf,
    #[serde(default)]
    pub val: Option<PathBuf>,
    pub train: TrainConfig,
}

/// Summary written next to a proxy manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxySummary {
    pub instances: usize,
    pub ignored: usize,
    pub drop_rate: f64,
    pub config: ProxyConfig,
}

pub fn parse_ratio(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected a:b, got {s:?}"))?;
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    let (a, b) = (parse(a)?, parse(b)?);
    if a + b == 0 {
        return Err("ratio needs at least one sample per batch".into());
    }
    Ok((a, b))
}

pub fn parse_schedule(s: &str) -> std::result::Result<LrSchedule, String> {
    match s.split_once(':') {
        None if s == "constant" => Ok(LrSchedule::Constant),
        Some(("poly", p)) => p
            .parse::<f64>()
            .map(|power| LrSchedule::Poly { power })
            .map_err(|e| format!("poly power {p:?}: {e}")),
        _ => Err(format!("expected constant or poly:POWER, got {s:?}")),
    }
}

pub fn parse_widths(s: &str) -> std::result::Result<[usize; 4], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let widths: [usize; 4] = parts
        .try_into()
        .map_err(|_| format!("expected four widths, got {s:?}"))?;
    if widths.contains(&0) {
        return Err("widths must be positive".into());
    }
    Ok(widths)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Proxy(a) => cmd_proxy(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        boxcaseg::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    std::fs::write(path, text + "\n").map_err(|e| {
        boxcaseg::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let cfg = SynthConfig::default();
    let splits = [
        ("weak", Split::Weak, a.weak, a.seed, false),
        ("salient", Split::Salient, a.salient, a.seed, true),
        ("val", Split::Weak, a.val, derive_seed(a.seed, &[VAL_TAG]), false),
    ];
    for (name, split, count, seed, masks) in splits {
        let scenes = generate(split, count, seed, &cfg)?;
        let files = write_split(&a.out.join(name), &scenes, masks)?;
        println!(
            "{name}: {} images, {} instances",
            count,
            files.manifest.instance_count()
        );
    }
    Ok(())
}

/// Starting point of `train` without a config file.
pub fn desk_defaults() -> TrainConfig {
    TrainConfig {
        augment: AugmentConfig::scaled(DESK_PATCH),
        ..TrainConfig::default()
    }
}

/// Resolves paths and settings: defaults, then `--config`, then flags.
pub fn resolve_run(a: &TrainArgs) -> CliResult<RunConfig> {
    let base = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            Some(
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?,
            )
        }
        None => None,
    };
    let from_data = |name: &str, tail: &[&str]| {
        a.data
            .as_ref()
            .map(|d| tail.iter().fold(d.join(name), |p, t| p.join(t)))
    };
    let weak = a
        .weak
        .clone()
        .or_else(|| from_data("weak", &["manifest.json"]))
        .or_else(|| base.as_ref().map(|b| b.weak.clone()))
        .ok_or_else(|| CliError::Usage("train needs --weak, --data or --config".into()))?;
    let salient = a
        .salient
        .clone()
        .or_else(|| from_data("salient", &["manifest.json"]))
        .or_else(|| base.as_ref().map(|b| b.salient.clone()))
        .ok_or_else(|| CliError::Usage("train needs --salient, --data or --config".into()))?;
    let val = if a.no_val {
        None
    } else {
        a.val
            .clone()
            .or_else(|| from_data("val", &["eval", "manifest.json"]))
            .or_else(|| base.as_ref().and_then(|b| b.val.clone()))
    };
    let mut t = base.map(|b| b.train).unwrap_or_else(desk_defaults);
    if let Some(m) = a.mode {
        t.mode = match m {
            ModeArg::Joint => TrainMode::Joint,
            ModeArg::MilOnly => TrainMode::MilOnly,
        };
    }
    if let Some((w, s)) = a.ratio {
        t.sampler.weak_per_batch = w;
        t.sampler.salient_per_batch = s;
    }
    if let Some(s) = a.sampling {
        t.sampler.mode = match s {
            SamplingArg::FixedRatio => SamplingMode::FixedRatio,
            SamplingArg::RandomUnion => SamplingMode::RandomUnion,
        };
    }
    if let Some(v) = a.alpha {
        t.loss.alpha = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.momentum {
        t.momentum = v;
    }
    if let Some(v) = a.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = a.clip_norm {
        t.clip_norm = Some(v);
    }
    if let Some(v) = a.schedule {
        t.schedule = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(p) = a.patch_size {
        t.augment = AugmentConfig::scaled(p);
    }
    if let Some(w) = a.widths {
        t.model.widths = w;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    t.validate()?;
    Ok(RunConfig {
        weak,
        salient,
        val,
        train: t,
    })
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let run = resolve_run(a)?;
    create_dir(&a.out)?;
    write_json(&a.out.join("run_config.json"), &run)?;
    let data = TrainData::load(&run.weak, &run.salient)?;
    let val = run.val.as_deref().map(ValData::load).transpose()?;
    let log_path = a.out.join("log.jsonl");
    let io = |e| boxcaseg::Error::Io {
        path: log_path.clone(),
        source: e,
    };
    let mut log = BufWriter::new(File::create(&log_path).map_err(io)?);
    let outcome = train(&data, val.as_ref(), &run.train, |line| {
        let text = serde_json::to_string(line).expect("log line serializes");
        writeln!(log, "{text}").and_then(|_| log.flush()).map_err(io)?;
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}"));
        println!(
            "epoch {:>3}  mil {:.4}  pix {}  val mIoU* {}  IoU@50 {}  IoU@75 {}",
            line.epoch,
            line.mean_mil,
            line.mean_pix.map_or("-".to_string(), |p| format!("{p:.4}")),
            pct(line.val_miou_star.map(|m| 100.0 * m)),
            pct(line.val_iou50),
            pct(line.val_iou75),
        );
        Ok(())
    })?;
    let ckpt = a.out.join("checkpoint.bxt");
    let file = File::create(&ckpt).map_err(|e| boxcaseg::Error::Io {
        path: ckpt.clone(),
        source: e,
    })?;
    outcome
        .model
        .save(BufWriter::new(file))
        .map_err(|e| boxcaseg::Error::Io {
            path: ckpt.clone(),
            source: e,
        })?;
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

pub fn cmd_proxy(a: &ProxyArgs) -> CliResult<ProxySummary> {
    let cfg = ProxyConfig {
        alpha: a.alpha,
        size: a.proxy_size,
        drop_threshold: a.drop_thresh,
    };
    if !(0.0..=1.0).contains(&cfg.alpha) || !(0.0..=1.0).contains(&cfg.drop_threshold) {
        return Err(CliError::Usage("--alpha and --drop-thresh must lie in [0, 1]".into()));
    }
    if cfg.size == 0 || !cfg.size.is_multiple_of(4) {
        return Err(CliError::Usage(format!(
            "--proxy-size must be a positive multiple of 4, got {}",
            cfg.size
        )));
    }
    let file = File::open(&a.checkpoint).map_err(|e| boxcaseg::Error::Io {
        path: a.checkpoint.clone(),
        source: e,
    })?;
    let model = Model::load(std::io::BufReader::new(file))?;
    let manifest = Manifest::load(&a.manifest)?;
    let set = generate_proxies(&model, &manifest, &base_dir(&a.manifest), &cfg)?;
    create_dir(&a.out)?;
    write_proxy_manifest(&a.out, &set, &base_dir(&a.manifest), a.rle)?;
    let summary = ProxySummary {
        instances: set.annotations().count(),
        ignored: set.annotations().filter(|p| p.ignore).count(),
        drop_rate: set.drop_rate,
        config: cfg,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    println!(
        "{} proxies, {} ignored, drop rate {:.4} at threshold {}",
        summary.instances, summary.ignored, summary.drop_rate, cfg.drop_threshold
    );
    Ok(summary)
}

fn format_err(detail: String) -> CliError {
    boxcaseg::Error::Format {
        what: "manifest",
        detail,
    }
    .into()
}

/// Pairs every ground-truth instance with its prediction.
pub fn match_records(gt_path: &Path, pred_path: &Path, kept_only: bool) -> CliResult<Vec<InstanceRecord>> {
    let gt = Manifest::load(gt_path)?;
    let pred = Manifest::load(pred_path)?;
    let (gt_base, pred_base) = (base_dir(gt_path), base_dir(pred_path));
    let pred_images: BTreeMap<u64, _> = pred.images.iter().map(|e| (e.id, e)).collect();
    let mut records = Vec::new();
    for g in &gt.images {
        let p = pred_images
            .get(&g.id)
            .ok_or_else(|| format_err(format!("{}: no image {}", pred_path.display(), g.id)))?;
        if (p.height, p.width) != (g.height, g.width) {
            return Err(format_err(format!("image {} differs in size between manifests", g.id)));
        }
        for gi in &g.instances {
            let pi = p.instances.iter().find(|i| i.id == gi.id).ok_or_else(|| {
                format_err(format!(
                    "{}: image {} lacks instance {}",
                    pred_path.display(),
                    g.id,
                    gi.id
                ))
            })?;
            if kept_only && pi.ignore == Some(true) {
                continue;
            }
            let missing = |path: &Path| {
                format_err(format!(
                    "{}: image {} instance {} has no mask",
                    path.display(),
                    g.id,
                    gi.id
                ))
            };
            records.push(InstanceRecord {
                image: g.id,
                class: gi.class.clone(),
                gt: gi
                    .load_mask(&gt_base, g.height, g.width)?
                    .ok_or_else(|| missing(gt_path))?,
                pred: pi
                    .load_mask(&pred_base, p.height, p.width)?
                    .ok_or_else(|| missing(pred_path))?,
                score: pi.score.unwrap_or(1.0),
            });
        }
    }
    Ok(records)
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<MetricsReport> {
    let records = match_records(&a.gt, &a.pred, a.kept_only)?;
    let report = MetricsReport::evaluate(&records)?;
    let table = report.to_table();
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("report.json"), &report)?;
        let path = out.join("report.txt");
        std::fs::write(&path, &table).map_err(|e| boxcaseg::Error::Io { path, source: e })?;
    }
    print!("{table}");
    Ok(report)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let cfg = SuiteConfig {
        seeds: a.seeds,
        eps: a.eps,
        patch: a.patch,
        tolerance: a.tolerance,
    };
    let outcomes = run_suite(&cfg)?;
    for o in &outcomes {
        println!(
            "{:<20} seeds {:>3}  max rel err {:.3e}  {}",
            o.name,
            o.seeds,
            o.max_rel_error,
            if o.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed.join(", ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_parses_and_rejects() {
        assert_eq!(parse_ratio("9:7"), Ok((9, 7)));
        assert_eq!(parse_ratio("16:0"), Ok((16, 0)));
        assert!(parse_ratio("9-7").is_err());
        assert!(parse_ratio("0:0").is_err());
        assert!(parse_ratio("a:7").is_err());
    }

    #[test]
    fn schedule_parses() {
        assert_eq!(parse_schedule("constant"), Ok(LrSchedule::Constant));
        assert_eq!(parse_schedule("poly:0.9"), Ok(LrSchedule::Poly { power: 0.9 }));
        assert!(parse_schedule("poly").is_err());
        assert!(parse_schedule("cosine:1").is_err());
    }

    #[test]
    fn widths_need_four_positive_values() {
        assert_eq!(parse_widths("4,8,8,4"), Ok([4, 8, 8, 4]));
        assert!(parse_widths("4,8,8").is_err());
        assert!(parse_widths("4,0,8,4").is_err());
    }

    #[test]
    fn exit_codes_follow_the_failure_class() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(boxcaseg::Error::NonFinite("loss".into())).exit_code(), 3);
        let io = boxcaseg::Error::Io {
            path: "p".into(),
            source: std::io::Error::other("gone"),
        };
        assert_eq!(CliError::Core(io).exit_code(), 2);
        assert_eq!(CliError::GradcheckFailed("a".into()).exit_code(), 3);
    }

    #[test]
    fn flags_override_config_and_unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.json");
        let base = RunConfig {
            weak: "w.json".into(),
            salient: "s.json".into(),
            val: None,
            train: TrainConfig {
                lr: 0.05,
                epochs: 3,
                ..desk_defaults()
            },
        };
        write_json(&cfg_path, &base).unwrap();
        let cli = Cli::try_parse_from([
            "boxcaseg",
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            "o",
            "--epochs",
            "7",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else {
            panic!("train subcommand")
        };
        let run = resolve_run(&args).unwrap();
        assert_eq!(run.train.lr, 0.05);
        assert_eq!(run.train.epochs, 7);
        assert_eq!(run.weak, PathBuf::from("w.json"));

        let text = std::fs::read_to_string(&cfg_path)
            .unwrap()
            .replacen("\"lr\"", "\"learning_rate\"", 1);
        std::fs::write(&cfg_path, text).unwrap();
        assert!(matches!(resolve_run(&args), Err(CliError::Usage(_))));
    }
}
