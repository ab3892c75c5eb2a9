//! `mlkg` command-line interface.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use image::{imageops, GrayImage, Rgb, RgbImage};
use ndarray::Array2;
use walkdir::WalkDir;

use crate::config::{ConfigError, MllmBackendKind, RunConfig};
use crate::dataset::{
    load_dataset, load_sample, make_synthetic_fixture, object_group, read_mask, CamouflagedSample,
    FixtureConfig, Split,
};
use crate::injector::KnowledgeSelection;
use crate::knowledge::{
    generate_class_knowledge, generate_scene_knowledge, CacheError, HttpBackend, KnowledgeCache, MllmBackend,
    StubBackend,
};
use crate::metrics::{evaluate_dataset, score_sample, Group};
use crate::pipeline::Pipeline;
use crate::train::{prepare_examples, train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mlkg", version, about = "Knowledge-guided referring camouflaged object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.total_steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with train and test splits.
    Fixture {
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long = "per-class", default_value_t = 2)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate and cache the seven knowledge texts for every sample.
    Knowledge {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Splits to cover; both by default.
        #[arg(long)]
        split: Option<Split>,
        #[arg(long, value_enum)]
        backend: Option<MllmBackendKind>,
        #[arg(long = "knowledge-cache")]
        knowledge_cache: Option<PathBuf>,
    },
    /// Train decoder, injector and adapters on the train split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "knowledge-cache")]
        knowledge_cache: Option<PathBuf>,
        #[arg(long)]
        selection: Option<KnowledgeSelection>,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV; defaults to `loss_trace.csv` next to the checkpoint.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Write one probability mask per photo of a split.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long = "knowledge-cache")]
        knowledge_cache: Option<PathBuf>,
        /// Defaults to the selection the checkpoint was trained with.
        #[arg(long)]
        selection: Option<KnowledgeSelection>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "pred-dir")]
        pred_dir: PathBuf,
        #[arg(long = "gt-dir")]
        gt_dir: PathBuf,
        /// JSON object mapping image ids to `single_obj` / `multi_obj`.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Side-by-side photo, ground truth and prediction overlays.
    Visualize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long = "pred-dir")]
        pred_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure carrying its exit code.
struct Failure {
    code: i32,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = if error.downcast_ref::<ConfigError>().is_some() {
            EXIT_CONFIG
        } else {
            EXIT_FAILURE
        };
        Self { code, error }
    }
}

fn config_failure(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error: anyhow!(msg.into()),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Errors are printed as a single line on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let msg = format!("{:#}", f.error).replace(['\n', '\r'], " ");
            eprintln!("error: {msg}");
            f.code
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    Ok(RunConfig::load(args.config.as_deref(), &args.overrides).map_err(anyhow::Error::from)?)
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Fixture {
            classes,
            per_class,
            size,
            seed,
            out,
        } => {
            if classes == 0 || per_class == 0 {
                return Err(config_failure("--classes and --per-class must be positive"));
            }
            if size < 32 {
                return Err(config_failure(format!("--size must be at least 32, got {size}")));
            }
            let cfg = FixtureConfig {
                n_classes: classes,
                n_per_class: per_class,
                size,
                seed,
            };
            make_synthetic_fixture(&out, &cfg).context("writing fixture")?;
            println!("wrote fixture to {}", out.display());
            Ok(())
        }
        Command::Knowledge {
            cfg,
            data,
            split,
            backend,
            knowledge_cache,
        } => {
            let run = load_config(&cfg)?;
            let cache_path = run.cache_path(knowledge_cache.as_deref());
            knowledge_cmd(&run, &data, split, backend.unwrap_or(run.mllm.backend), &cache_path)
        }
        Command::Train {
            cfg,
            data,
            knowledge_cache,
            selection,
            out,
            trace,
        } => {
            let mut run = load_config(&cfg)?;
            if let Some(s) = selection {
                run.train.selection = s;
            }
            let cache_path = run.cache_path(knowledge_cache.as_deref());
            train_cmd(&run, &data, &cache_path, &out, trace.as_deref())
        }
        Command::Predict {
            cfg,
            checkpoint,
            data,
            split,
            knowledge_cache,
            selection,
            out,
        } => {
            let checkpoint = checkpoint.ok_or_else(|| config_failure("predict requires --checkpoint"))?;
            predict_cmd(&cfg, &checkpoint, &data, split, knowledge_cache.as_deref(), selection, &out)
        }
        Command::Eval {
            cfg,
            pred_dir,
            gt_dir,
            groups,
            out,
        } => {
            let run = load_config(&cfg)?;
            eval_cmd(&run, &pred_dir, &gt_dir, groups.as_deref(), &out)
        }
        Command::Visualize {
            data,
            split,
            pred_dir,
            out,
        } => visualize_cmd(&data, split, &pred_dir, &out),
    }
}

fn load_split(data: &Path, split: Split) -> anyhow::Result<Vec<CamouflagedSample>> {
    let index = load_dataset(data, split).with_context(|| format!("indexing {} split", split))?;
    index
        .samples
        .iter()
        .map(|d| load_sample(d).map_err(anyhow::Error::from))
        .collect()
}

fn read_cache(path: &Path) -> anyhow::Result<KnowledgeCache> {
    KnowledgeCache::read(path).map_err(|e| match e {
        CacheError::Io { .. } => anyhow!("knowledge cache {} not readable; run `mlkg knowledge` first", path.display()),
        other => other.into(),
    })
}

fn knowledge_cmd(
    run: &RunConfig,
    data: &Path,
    split: Option<Split>,
    backend_kind: MllmBackendKind,
    cache_path: &Path,
) -> Result<(), Failure> {
    let backend: Box<dyn MllmBackend> = match backend_kind {
        MllmBackendKind::Stub => Box::new(StubBackend),
        MllmBackendKind::Http => Box::new(HttpBackend::new(run.mllm.http())),
    };
    let retry = run.mllm.retry();
    let mut cache = KnowledgeCache::read_or_default(cache_path).map_err(anyhow::Error::from)?;
    let splits = split.map_or(vec![Split::Train, Split::Test], |s| vec![s]);
    let mut generated = 0usize;
    let mut outcome = Ok(());
    'outer: for split in splits {
        let index = load_dataset(data, split).with_context(|| format!("indexing {split} split"))?;
        for desc in &index.samples {
            let class = &desc.class_name;
            if !cache.has_class(class) {
                match generate_class_knowledge(class, backend.as_ref(), retry) {
                    Ok(entry) => cache.insert_class(class, entry),
                    Err(e) => {
                        outcome = Err(anyhow::Error::from(e).context(format!("class `{class}`")));
                        break 'outer;
                    }
                }
            }
            if cache.has_image(&desc.image_id) {
                continue;
            }
            let sample = load_sample(desc).map_err(anyhow::Error::from)?;
            match generate_scene_knowledge(class, Some(&sample.photo), backend.as_ref(), retry) {
                Ok(entry) => {
                    cache.insert_image(&desc.image_id, entry);
                    generated += 1;
                }
                Err(e) => {
                    outcome = Err(anyhow::Error::from(e).context(format!("({class}, {})", desc.image_id)));
                    break 'outer;
                }
            }
        }
    }
    // Keep whatever was generated before a failure.
    cache.write(cache_path).map_err(anyhow::Error::from)?;
    outcome?;
    println!("knowledge for {generated} new images written to {}", cache_path.display());
    Ok(())
}

fn run_json(run: &RunConfig) -> serde_json::Value {
    serde_json::to_value(run).expect("config serializes")
}

fn train_cmd(
    run: &RunConfig,
    data: &Path,
    cache_path: &Path,
    out: &Path,
    trace: Option<&Path>,
) -> Result<(), Failure> {
    let samples = load_split(data, Split::Train)?;
    if samples.is_empty() {
        return Err(anyhow!("no training samples under {}", data.display()).into());
    }
    let cache = read_cache(cache_path)?;
    let text_encoder = run.text_encoder.build().map_err(|e| config_failure(e.to_string()))?;
    let device = Device::Cpu;
    let pipeline = Pipeline::new(run.pipeline(), run.train.seed, &device).map_err(|e| config_failure(e.to_string()))?;
    let examples = prepare_examples(&samples, &cache, &text_encoder, &pipeline).map_err(anyhow::Error::from)?;
    let report = train(&pipeline, &examples, &run.train).map_err(anyhow::Error::from)?;

    let out_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    run.echo_into(out_dir).context("writing config")?;
    pipeline
        .save(out, run.train.selection, Some(run_json(run)))
        .map_err(anyhow::Error::from)?;
    let trace_path = trace.map_or_else(|| out_dir.join("loss_trace.csv"), Path::to_path_buf);
    let mut buf = Vec::new();
    report.write_csv(&mut buf).context("formatting loss trace")?;
    fs::write(&trace_path, buf).with_context(|| format!("writing {}", trace_path.display()))?;
    println!(
        "trained {} steps, final loss {:.6}; checkpoint {}",
        report.trace.len(),
        report.final_loss().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn predict_cmd(
    cfg: &ConfigArgs,
    checkpoint: &Path,
    data: &Path,
    split: Split,
    cache_flag: Option<&Path>,
    selection: Option<KnowledgeSelection>,
    out: &Path,
) -> Result<(), Failure> {
    let device = Device::Cpu;
    let (pipeline, meta) = Pipeline::load(checkpoint, &device).map_err(|e| config_failure(e.to_string()))?;
    // Settings come from the checkpoint unless a config file or overrides are given.
    let run = if cfg.config.is_some() || !cfg.overrides.is_empty() {
        load_config(cfg)?
    } else {
        match &meta.run {
            Some(v) => serde_json::from_value::<RunConfig>(v.clone())
                .map_err(|e| config_failure(format!("checkpoint run settings: {e}")))?,
            None => RunConfig::default(),
        }
    };
    if run.text_encoder.dim != pipeline.config().injector.d_text {
        return Err(config_failure(format!(
            "text_encoder.dim ({}) does not match the checkpoint's d_text ({})",
            run.text_encoder.dim,
            pipeline.config().injector.d_text
        )));
    }
    let selection = selection.unwrap_or(meta.selection);
    let text_encoder = run.text_encoder.build().map_err(|e| config_failure(e.to_string()))?;
    let cache = read_cache(&run.cache_path(cache_flag))?;
    let samples = load_split(data, split)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    run.echo_into(out).context("writing config")?;
    for s in &samples {
        let bundle = cache
            .load(&s.t_ref, &s.image_id)
            .with_context(|| format!("knowledge for ({}, {})", s.t_ref, s.image_id))?;
        let encoded = text_encoder.encode_bundle(&bundle).map_err(anyhow::Error::from)?;
        let pred = pipeline.predict(&s.photo, &encoded, selection).map_err(anyhow::Error::from)?;
        let path = out.join(format!("{}.png", s.image_id));
        pred.probability_image()
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} masks to {}", samples.len(), out.display());
    Ok(())
}

/// PNG/JPEG/BMP files under `dir`, keyed by file stem.
fn images_by_stem(dir: &Path) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", dir.display()))?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| crate::dataset::IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if entry.file_type().is_file() && is_image {
            let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
            if let Some(prev) = out.insert(stem.clone(), path.to_path_buf()) {
                bail!("duplicate id `{stem}`: {} and {}", prev.display(), path.display());
            }
        }
    }
    Ok(out)
}

fn read_prediction(path: &Path) -> anyhow::Result<Array2<f64>> {
    let gray = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        gray.get_pixel(c as u32, r as u32).0[0] as f64 / 255.0
    }))
}

fn eval_cmd(run: &RunConfig, pred_dir: &Path, gt_dir: &Path, groups: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let gt_paths = images_by_stem(gt_dir)?;
    if gt_paths.is_empty() {
        return Err(anyhow!("no ground-truth masks under {}", gt_dir.display()).into());
    }
    let pred_paths = images_by_stem(pred_dir)?;
    let mut gts = BTreeMap::new();
    for (id, p) in &gt_paths {
        gts.insert(id.clone(), read_mask(p).map_err(anyhow::Error::from)?);
    }
    let mut preds = BTreeMap::new();
    for id in gt_paths.keys() {
        if let Some(p) = pred_paths.get(id) {
            preds.insert(id.clone(), read_prediction(p)?);
        }
    }
    let grouping: BTreeMap<String, Group> = match groups {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => gts.iter().map(|(id, m)| (id.clone(), object_group(m))).collect(),
    };
    let reports = evaluate_dataset(&preds, &gts, &grouping).map_err(anyhow::Error::from)?;

    let mut doc = serde_json::Map::new();
    for r in &reports {
        doc.insert(r.group.as_str().to_string(), serde_json::to_value(r).expect("report serializes"));
    }
    if run.eval.per_sample {
        let mut samples = serde_json::Map::new();
        for (id, gt) in &gts {
            let pred = crate::metrics::resize_bilinear(preds[id].view(), gt.nrows(), gt.ncols());
            let s = score_sample(pred.view(), gt.view()).map_err(anyhow::Error::from)?;
            samples.insert(id.clone(), serde_json::to_value(s).expect("scores serialize"));
        }
        doc.insert("samples".into(), serde_json::Value::Object(samples));
    }
    let out_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    run.echo_into(out_dir).context("writing config")?;
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(doc)).expect("report serializes") + "\n";
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    let overall = &reports[0];
    println!(
        "overall over {} samples: S {:.4} aE {:.4} wF {} MAE {:.4}",
        overall.n_samples,
        overall.s_measure,
        overall.e_measure_adaptive,
        overall.weighted_f_beta.map_or("n/a".to_string(), |v| format!("{v:.4}")),
        overall.mae
    );
    Ok(())
}

fn tint(photo: &RgbImage, alpha: impl Fn(u32, u32) -> f64, color: [u8; 3]) -> RgbImage {
    RgbImage::from_fn(photo.width(), photo.height(), |x, y| {
        let a = alpha(x, y).clamp(0.0, 1.0) * 0.6;
        let p = photo.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|c| ((1.0 - a) * p[c] as f64 + a * color[c] as f64).round() as u8))
    })
}

fn visualize_cmd(data: &Path, split: Split, pred_dir: &Path, out: &Path) -> Result<(), Failure> {
    let samples = load_split(data, split)?;
    let preds = images_by_stem(pred_dir)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = 0;
    for s in &samples {
        let Some(pred_path) = preds.get(&s.image_id) else {
            continue;
        };
        let (w, h) = s.photo.dimensions();
        let mut pred: GrayImage = image::open(pred_path)
            .with_context(|| format!("reading {}", pred_path.display()))?
            .to_luma8();
        if pred.dimensions() != (w, h) {
            pred = imageops::resize(&pred, w, h, imageops::FilterType::Triangle);
        }
        let gt = tint(&s.photo, |x, y| f64::from(u8::from(s.gt_mask[(y as usize, x as usize)])), [255, 40, 40]);
        let pr = tint(&s.photo, |x, y| pred.get_pixel(x, y).0[0] as f64 / 255.0, [40, 255, 80]);
        let mut canvas = RgbImage::new(3 * w, h);
        imageops::replace(&mut canvas, &s.photo, 0, 0);
        imageops::replace(&mut canvas, &gt, w as i64, 0);
        imageops::replace(&mut canvas, &pr, 2 * w as i64, 0);
        let path = out.join(format!("{}.png", s.image_id));
        canvas.save(&path).with_context(|| format!("writing {}", path.display()))?;
        written += 1;
    }
    if written == 0 {
        return Err(anyhow!("no predictions in {} match the {split} split", pred_dir.display()).into());
    }
    println!("wrote {written} overlays to {}", out.display());
    Ok(())
}
