//! `xedge`: explain, evaluate, rank, augment, score, serve.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;
use xedge_core::artifact::{image_png, mask_png, saliency_preview_png, write_bytes, write_saliency_artifact};
use xedge_core::augment::{
    add_void_annotation, augment_dataset, enlarge_annotations, replay_decisions, AugmentationPlan, DecisionAction,
    EnlargeSpec, SampleId, DEFAULT_THIN_THRESHOLD,
};
use xedge_core::dataset::{
    build_category_mask_resized, build_label_map, load_dataset, split_dataset, write_dataset, Dataset, ImageInfo,
    SplitSpec,
};
use xedge_core::explain::RiseMode;
use xedge_core::imaging::{Point, RangeTag};
use xedge_core::metrics::{segmentation_iou, FaithfulnessConfig, SegmentationIou};
use xedge_core::model::{class_for_category, predict_scores, serve_lines, ModelRegistry, ScoreRegion, SegmentationModel};
use xedge_core::report::{
    emit_report, evaluate_method_over_set, explain_sample, load_model_input, parse_report, rank_methods, sample_seed,
    EvalConfig, MetricReport, ReportFormat, RiseSettings, XaiMethod,
};
use xedge_service::{Evaluator, ServiceConfig, ServiceState, TextSettings};
use xedge_textual::{
    build_prompt, request_cached, ChatBackend, HttpBackend, MockBackend, ResponseCache, RetryPolicy, SampleImages,
    TextConfig,
};

#[derive(Parser)]
#[command(name = "xedge", version, about = "Saliency explanations and XAI metrics for segmentation models")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// COCO-style dataset JSON.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Model registry JSON. Built-in toy models need no registry.
    #[arg(long, global = true)]
    models: Option<PathBuf>,
    /// Output directory; every artifact is written below it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: Option<u16>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Saliency map for one (image, category) sample.
    Explain(ExplainArgs),
    /// Evaluate saliency methods over a validation set and write report.json/report.md.
    EvalXai(EvalArgs),
    /// Pick the advisable method from a report.
    Rank(RankArgs),
    /// Produce an augmented dataset from a plan, a decision log or a direct edit.
    Augment(AugmentArgs),
    /// Per-class IoU and mIoU between predicted and ground-truth label maps.
    SegEval(SegEvalArgs),
    /// Run the review service.
    Serve(ServeArgs),
    /// Ask a vision-language model to describe a sample's saliency map.
    TextExplain(TextArgs),
    /// Seeded train/validation split.
    Split(SplitArgs),
    /// Answer inference requests on stdin/stdout with a registry model.
    ModelServer(ModelServerArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RegionArg {
    Frozen,
    Whole,
}

impl From<RegionArg> for ScoreRegion {
    fn from(r: RegionArg) -> Self {
        match r {
            RegionArg::Frozen => ScoreRegion::FrozenArgmax,
            RegionArg::Whole => ScoreRegion::WholeImage,
        }
    }
}

#[derive(Args, Clone)]
struct EvalOptions {
    #[arg(long, default_value = "toy:region")]
    model: String,
    /// RISE mask count.
    #[arg(long, default_value_t = 4000)]
    masks: usize,
    /// RISE grid side.
    #[arg(long, default_value_t = 7)]
    grid: usize,
    #[arg(long, default_value_t = 0.5)]
    keep_prob: f64,
    /// Enumerate every grid instead of sampling (grid side at most 4).
    #[arg(long)]
    exhaustive: bool,
    /// Pixels whose class score is explained.
    #[arg(long, value_enum, default_value_t = RegionArg::Frozen)]
    region: RegionArg,
    /// Deletion/insertion steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    pixels_per_step: Option<usize>,
    #[arg(long, default_value_t = 5.0)]
    blur_sigma: f64,
}

impl EvalOptions {
    fn eval_config(&self, seed: u64) -> EvalConfig {
        let region = self.region.into();
        EvalConfig {
            rise: RiseSettings {
                n_masks: self.masks,
                grid: self.grid,
                keep_prob: self.keep_prob,
                mode: if self.exhaustive { RiseMode::Exhaustive } else { RiseMode::MonteCarlo },
                region,
            },
            faithfulness: FaithfulnessConfig {
                steps: self.steps,
                pixels_per_step: self.pixels_per_step,
                blur_sigma: self.blur_sigma,
                region,
            },
            seed,
        }
    }
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long, default_value = "rise")]
    method: String,
    /// `IMAGE-CATEGORY`; the category may be an id or a name.
    #[arg(long)]
    sample: String,
    #[command(flatten)]
    opts: EvalOptions,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_delimiter = ',', default_value = "rise")]
    methods: Vec<String>,
    #[command(flatten)]
    opts: EvalOptions,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    /// Augmentation plan JSON; writes transformed images too.
    #[arg(long, group = "source")]
    plan: Option<PathBuf>,
    /// JSONL decisions (`sample`, `decision` per line), e.g. the service log.
    #[arg(long, group = "source")]
    decisions: Option<PathBuf>,
    /// Category (id or name) whose thin annotations are dilated.
    #[arg(long, group = "source")]
    enlarge: Option<String>,
    /// Image that receives a void region given by --polygon.
    #[arg(long, group = "source")]
    void_image: Option<u64>,
    #[arg(long, default_value_t = 2)]
    radius: usize,
    #[arg(long, default_value_t = DEFAULT_THIN_THRESHOLD)]
    thin_threshold: usize,
    /// Polygon vertices as `x,y x,y ...`; repeatable.
    #[arg(long)]
    polygon: Vec<String>,
}

#[derive(Args)]
struct SegEvalArgs {
    /// Predicted label map PNG (compare with --gt).
    #[arg(long, requires = "gt", conflicts_with = "pred_dir")]
    pred: Option<PathBuf>,
    /// Ground-truth label map PNG.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Directory of `<image_id>.png` predictions, scored against --dataset.
    #[arg(long)]
    pred_dir: Option<PathBuf>,
    /// Label ignored in the ground truth (PNG mode).
    #[arg(long, default_value_t = 255)]
    void_label: u64,
    /// Classes to score; defaults to the dataset categories or the labels present.
    #[arg(long, value_delimiter = ',')]
    categories: Vec<u64>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value = "rise")]
    method: String,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Static bearer token (also read from XEDGE_SERVICE_TOKEN).
    #[arg(long, env = "XEDGE_SERVICE_TOKEN", hide_env_values = true)]
    token: Option<String>,
    #[arg(long)]
    cors_origin: Vec<String>,
    #[command(flatten)]
    text: TextBackendArgs,
    #[command(flatten)]
    opts: EvalOptions,
}

#[derive(Args, Clone)]
struct TextBackendArgs {
    /// Chat endpoint configuration JSON; the key comes from XEDGE_API_KEY.
    #[arg(long)]
    lvlm_config: Option<PathBuf>,
    /// Offline backend answering with this text.
    #[arg(long)]
    mock_text: Option<String>,
}

impl TextBackendArgs {
    fn settings(&self) -> Result<Option<TextSettings>> {
        let config = match &self.lvlm_config {
            Some(p) => TextConfig::load(p)?,
            None => TextConfig::default(),
        };
        let backend: Arc<dyn ChatBackend + Send + Sync> = match (&self.mock_text, &self.lvlm_config) {
            (Some(text), _) => Arc::new(MockBackend::echo(text.clone())),
            (None, Some(_)) => Arc::new(HttpBackend::from_env(&config)?),
            (None, None) => return Ok(None),
        };
        Ok(Some(TextSettings { backend, config, policy: RetryPolicy::default() }))
    }
}

#[derive(Args)]
struct TextArgs {
    #[arg(long)]
    sample: String,
    #[arg(long, default_value = "rise")]
    method: String,
    #[command(flatten)]
    text: TextBackendArgs,
    #[command(flatten)]
    opts: EvalOptions,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, default_value_t = 0.8)]
    fraction: f64,
}

#[derive(Args)]
struct ModelServerArgs {
    #[arg(long, default_value = "toy:region")]
    model: String,
    /// Range of the pixel values clients send.
    #[arg(long, value_enum, default_value_t = InputRange::Unit)]
    input_range: InputRange,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InputRange {
    Unit,
    Raw255,
}

struct Ctx {
    dataset: Option<PathBuf>,
    models: Option<PathBuf>,
    out: PathBuf,
    seed: u64,
    format: Format,
}

impl Ctx {
    fn dataset(&self) -> Result<Dataset> {
        let path = self.dataset.as_ref().context("--dataset is required for this command")?;
        load_dataset(path).with_context(|| format!("loading {}", path.display()))
    }

    fn model(&self, id: &str) -> Result<Arc<dyn SegmentationModel>> {
        let registry = match &self.models {
            Some(p) => ModelRegistry::load(p)?,
            None => ModelRegistry::default(),
        };
        Ok(Arc::from(registry.resolve(id)?))
    }

    fn write(&self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(rel);
        write_bytes(&path, bytes)?;
        Ok(path)
    }

    fn emit(&self, text: impl FnOnce() -> String, value: serde_json::Value) {
        match self.format {
            Format::Text => println!("{}", text().trim_end()),
            Format::Json => println!("{}", serde_json::to_string_pretty(&value).expect("summary serializes")),
        }
    }
}

fn resolve_sample(ds: &Dataset, text: &str) -> Result<SampleId> {
    let (image, category) = text.split_once('-').with_context(|| format!("sample {text:?} is not IMAGE-CATEGORY"))?;
    let image_id: u64 = image.parse().with_context(|| format!("bad image id in {text:?}"))?;
    ds.image(image_id)?;
    let category_id = match category.parse::<u64>() {
        Ok(id) => ds.category(id)?.id,
        Err(_) => ds.category_by_name(category).with_context(|| format!("unknown category {category:?}"))?.id,
    };
    Ok(SampleId { image_id, category_id })
}

fn resolve_category(ds: &Dataset, text: &str) -> Result<u64> {
    match text.parse::<u64>() {
        Ok(id) => Ok(ds.category(id)?.id),
        Err(_) => Ok(ds.category_by_name(text).with_context(|| format!("unknown category {text:?}"))?.id),
    }
}

/// Copy of `ds` whose image paths are absolute, rooted at `root`.
fn relocate(ds: &Dataset, root: &Path) -> Result<Dataset> {
    let images = ds
        .images()
        .iter()
        .map(|i| -> Result<ImageInfo> {
            let path = std::path::absolute(ds.image_path(i.id)?)?;
            Ok(ImageInfo { file_name: path.to_string_lossy().into_owned(), ..i.clone() })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset::new(images, ds.categories().to_vec(), ds.annotations().to_vec(), root)?)
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

fn cmd_explain(ctx: &Ctx, args: &ExplainArgs) -> Result<()> {
    let ds = ctx.dataset()?;
    let sample = resolve_sample(&ds, &args.sample)?;
    let method = XaiMethod::parse(&args.method)?;
    let model = ctx.model(&args.opts.model)?;
    let cfg = args.opts.eval_config(ctx.seed);
    let img = load_model_input(&ds, model.as_ref(), sample.image_id)?;
    let seed = sample_seed(cfg.seed, sample.image_id, sample.category_id);
    let result = explain_sample(method, model.as_ref(), &img, sample.category_id, &cfg.rise, seed)?;
    let stem = format!("{sample}_{}_{}", method.name().to_lowercase(), file_safe(&args.opts.model));
    let paths = write_saliency_artifact(&ctx.out.join("explain"), &stem, &result)?;
    ctx.emit(
        || format!("{}\n{}\n{}", paths.raw.display(), paths.sidecar.display(), paths.preview.display()),
        json!({"sample": sample, "method": method.name(), "raw": paths.raw, "sidecar": paths.sidecar, "preview": paths.preview}),
    );
    Ok(())
}

fn cmd_eval(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let ds = ctx.dataset()?;
    let model = ctx.model(&args.opts.model)?;
    let cfg = args.opts.eval_config(ctx.seed);
    let methods: BTreeSet<XaiMethod> = args.methods.iter().map(|m| XaiMethod::parse(m)).collect::<Result<_, _>>()?;
    let mut aggregates = Vec::new();
    for method in methods {
        let agg = evaluate_method_over_set(method, model.as_ref(), &ds, &cfg)
            .with_context(|| format!("evaluating {}", method.name()))?;
        if agg.skipped > 0 {
            eprintln!("{}: skipped {} samples with a zero-energy saliency map", method.name(), agg.skipped);
        }
        aggregates.push(agg);
    }
    let report = MetricReport::build(&aggregates, ds.digest())?;
    let json_text = emit_report(&report, ReportFormat::Json);
    let md_text = emit_report(&report, ReportFormat::Markdown);
    ctx.write("report.json", json_text.as_bytes())?;
    ctx.write("report.md", md_text.as_bytes())?;
    match ctx.format {
        Format::Text => print!("{md_text}"),
        Format::Json => print!("{json_text}"),
    }
    Ok(())
}

fn cmd_rank(ctx: &Ctx, args: &RankArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.report).with_context(|| format!("reading {}", args.report.display()))?;
    let report = parse_report(&text)?;
    let ranking = rank_methods(&report.methods)?;
    let mut out = serde_json::to_vec_pretty(&ranking)?;
    out.push(b'\n');
    ctx.write("ranking.json", &out)?;
    ctx.emit(
        || {
            let mut s = format!("advisable: {}\n", ranking.advisable);
            for e in &ranking.table {
                let best = if e.best_in.is_empty() { "-".to_string() } else { e.best_in.join(", ") };
                s.push_str(&format!("  {:<20} wins {}  best in {best}\n", e.name, e.wins));
            }
            s
        },
        serde_json::to_value(&ranking).expect("ranking serializes"),
    );
    Ok(())
}

#[derive(Deserialize)]
struct DecisionLine {
    sample: SampleId,
    decision: DecisionAction,
}

fn parse_polygon(text: &str) -> Result<Vec<Point>> {
    text.split_whitespace()
        .map(|pair| {
            let (x, y) = pair.split_once(',').with_context(|| format!("vertex {pair:?} is not x,y"))?;
            Ok([x.trim().parse()?, y.trim().parse()?])
        })
        .collect()
}

fn cmd_augment(ctx: &Ctx, args: &AugmentArgs) -> Result<()> {
    let ds = ctx.dataset()?;
    let dir = ctx.out.join("augmented");
    let out = if let Some(plan_path) = &args.plan {
        let plan = AugmentationPlan::from_json(&std::fs::read_to_string(plan_path)?)?;
        augment_dataset(&ds, &plan, &dir.join("images"))?
    } else if let Some(path) = &args.decisions {
        let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let mut lines = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let d: DecisionLine = serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), n + 1))?;
            lines.push(d);
        }
        relocate(&replay_decisions(&ds, lines.iter().map(|d| (d.sample, &d.decision)))?, &dir)?
    } else if let Some(cat) = &args.enlarge {
        let mut spec = EnlargeSpec::new([resolve_category(&ds, cat)?], args.radius);
        spec.thin_threshold = args.thin_threshold;
        relocate(&enlarge_annotations(&ds, &spec)?, &dir)?
    } else if let Some(image) = args.void_image {
        if args.polygon.is_empty() {
            bail!("--void-image needs at least one --polygon");
        }
        let polys = args.polygon.iter().map(|p| parse_polygon(p)).collect::<Result<Vec<_>>>()?;
        relocate(&add_void_annotation(&ds, image, &polys)?, &dir)?
    } else {
        bail!("one of --plan, --decisions, --enlarge or --void-image is required");
    };
    let doc = if args.plan.is_some() {
        // plan output images live in augmented/images; make paths relative to augmented/
        let images = out
            .images()
            .iter()
            .map(|i| ImageInfo { file_name: format!("images/{}", i.file_name), ..i.clone() })
            .collect();
        write_dataset(&Dataset::new(images, out.categories().to_vec(), out.annotations().to_vec(), &dir)?)
    } else {
        write_dataset(&out)
    };
    let path = ctx.write("augmented/dataset.json", &doc)?;
    ctx.emit(
        || format!("{}\nannotations: {}\ndigest: {}", path.display(), out.annotations().len(), out.digest()),
        json!({"dataset": path, "annotations": out.annotations().len(), "digest": out.digest()}),
    );
    Ok(())
}

fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u64>)> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u64::from).collect(),
        image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u64::from).collect(),
        _ => bail!("{} is not a single-channel label map", path.display()),
    };
    Ok((h, w, labels))
}

struct SegEvalOut {
    per_class: Vec<(u64, Option<f64>)>,
    miou: f64,
}

fn cmd_seg_eval(ctx: &Ctx, args: &SegEvalArgs) -> Result<()> {
    let (pred, gt, categories, void) = if let Some(pred_path) = &args.pred {
        let gt_path = args.gt.as_ref().context("--gt is required with --pred")?;
        let (ph, pw, pred) = read_label_png(pred_path)?;
        let (gh, gw, gt) = read_label_png(gt_path)?;
        if (ph, pw) != (gh, gw) {
            bail!("prediction is {pw}x{ph}, ground truth is {gw}x{gh}");
        }
        let cats: Vec<u64> = if args.categories.is_empty() {
            pred.iter().chain(&gt).copied().filter(|l| *l != 0 && *l != args.void_label).collect::<BTreeSet<_>>().into_iter().collect()
        } else {
            args.categories.clone()
        };
        (pred, gt, cats, Some(args.void_label))
    } else if let Some(dir) = &args.pred_dir {
        let ds = ctx.dataset()?;
        let void = ds.void_category_id();
        let mut images: Vec<&ImageInfo> = ds.images().iter().collect();
        images.sort_by_key(|i| i.id);
        let (mut pred, mut gt) = (Vec::new(), Vec::new());
        for info in images {
            let (h, w, p) = read_label_png(&dir.join(format!("{}.png", info.id)))?;
            if (h, w) != (info.height, info.width) {
                bail!("prediction for image {} is {w}x{h}, expected {}x{}", info.id, info.width, info.height);
            }
            pred.extend(p);
            gt.extend(build_label_map(&ds, info.id, void.unwrap_or(u64::MAX))?);
        }
        let cats = if args.categories.is_empty() {
            ds.labeled_categories().map(|c| c.id).collect()
        } else {
            args.categories.clone()
        };
        (pred, gt, cats, void)
    } else {
        bail!("either --pred/--gt or --pred-dir is required");
    };
    let SegmentationIou { per_class, miou } = segmentation_iou(&pred, &gt, &categories, void)?;
    let out = SegEvalOut { per_class: per_class.into_iter().collect(), miou };
    let value = json!({
        "per_class": out.per_class.iter().map(|(c, v)| json!({"category": c, "iou": v})).collect::<Vec<_>>(),
        "miou": out.miou,
    });
    let mut bytes = serde_json::to_vec_pretty(&value)?;
    bytes.push(b'\n');
    ctx.write("seg_eval.json", &bytes)?;
    ctx.emit(
        || {
            let mut s = String::from("| Class | IoU (%) |\n|---:|---:|\n");
            for (c, v) in &out.per_class {
                s.push_str(&format!("| {c} | {} |\n", v.map_or("-".into(), |v| format!("{v:.2}"))));
            }
            s.push_str(&format!("\nmIoU: {:.2}\n", out.miou));
            s
        },
        value,
    );
    Ok(())
}

fn cmd_serve(ctx: &Ctx, args: &ServeArgs) -> Result<()> {
    let ds = ctx.dataset()?;
    let (train, val) = split_dataset(&ds, SplitSpec::new(args.train_fraction, ctx.seed)?)?;
    let evaluator = Evaluator {
        model: ctx.model(&args.opts.model)?,
        method: XaiMethod::parse(&args.method)?,
        cfg: args.opts.eval_config(ctx.seed),
    };
    let cfg = ServiceConfig {
        store_dir: ctx.out.join("store"),
        token: args.token.clone(),
        cors_origins: args.cors_origin.clone(),
    };
    let state = ServiceState::open(cfg, train, val, evaluator, args.text.settings()?)?;
    state.spawn_preparation();
    eprintln!("listening on http://{}", args.addr);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(xedge_service::http::serve(state, args.addr))?;
    Ok(())
}

fn cmd_text(ctx: &Ctx, args: &TextArgs) -> Result<()> {
    let ds = ctx.dataset()?;
    let sample = resolve_sample(&ds, &args.sample)?;
    let settings = args.text.settings()?.context("either --lvlm-config or --mock-text is required")?;
    let model = ctx.model(&args.opts.model)?;
    let cfg = args.opts.eval_config(ctx.seed);
    let img = load_model_input(&ds, model.as_ref(), sample.image_id)?;
    let gt = build_category_mask_resized(&ds, sample.image_id, sample.category_id, img.height(), img.width())?;
    let scores = predict_scores(model.as_ref(), &img)?;
    let pred = scores.argmax_mask(class_for_category(model.as_ref(), &scores, sample.category_id)?);
    let seed = sample_seed(cfg.seed, sample.image_id, sample.category_id);
    let method = XaiMethod::parse(&args.method)?;
    let explanation = explain_sample(method, model.as_ref(), &img, sample.category_id, &cfg.rise, seed)?;
    let images = SampleImages::complete(
        image_png(&img)?,
        mask_png(&gt)?,
        mask_png(&pred)?,
        saliency_preview_png(&explanation.saliency)?,
    );
    let category = ds.category(sample.category_id)?.name.clone();
    let req = build_prompt(&images, &category, &settings.config)?;
    let cache = ResponseCache::new(ctx.out.join("text").join("cache"));
    let resp = request_cached(&req, settings.backend.as_ref(), &settings.config, settings.policy, Some(&cache))?;
    let record = json!({
        "sample": sample,
        "category": category,
        "method": method.name(),
        "model_id": args.opts.model,
        "request_digest": req.digest(),
        "text": resp.text,
    });
    let mut bytes = serde_json::to_vec_pretty(&record)?;
    bytes.push(b'\n');
    ctx.write(format!("text/{sample}.json"), &bytes)?;
    ctx.emit(|| resp.text.clone(), record);
    Ok(())
}

fn cmd_split(ctx: &Ctx, args: &SplitArgs) -> Result<()> {
    let ds = ctx.dataset()?;
    let (train, val) = split_dataset(&ds, SplitSpec::new(args.fraction, ctx.seed)?)?;
    let dir = ctx.out.join("split");
    let train_path = ctx.write("split/train.json", &write_dataset(&relocate(&train, &dir)?))?;
    let val_path = ctx.write("split/val.json", &write_dataset(&relocate(&val, &dir)?))?;
    let ids = |d: &Dataset| d.images().iter().map(|i| i.id).collect::<Vec<_>>();
    ctx.emit(
        || format!("train: {} images -> {}\nval: {} images -> {}", train.images().len(), train_path.display(), val.images().len(), val_path.display()),
        json!({"train": ids(&train), "val": ids(&val), "train_path": train_path, "val_path": val_path}),
    );
    Ok(())
}

fn cmd_model_server(ctx: &Ctx, args: &ModelServerArgs) -> Result<()> {
    let model = ctx.model(&args.model)?;
    let range = match args.input_range {
        InputRange::Unit => RangeTag::Unit,
        InputRange::Raw255 => RangeTag::Raw255,
    };
    serve_lines(model.as_ref(), range, std::io::stdin().lock(), std::io::stdout().lock())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs as usize).build_global()?;
    }
    let ctx = Ctx { dataset: cli.dataset, models: cli.models, out: cli.out, seed: cli.seed, format: cli.format };
    match &cli.command {
        Command::Explain(a) => cmd_explain(&ctx, a),
        Command::EvalXai(a) => cmd_eval(&ctx, a),
        Command::Rank(a) => cmd_rank(&ctx, a),
        Command::Augment(a) => cmd_augment(&ctx, a),
        Command::SegEval(a) => cmd_seg_eval(&ctx, a),
        Command::Serve(a) => cmd_serve(&ctx, a),
        Command::TextExplain(a) => cmd_text(&ctx, a),
        Command::Split(a) => cmd_split(&ctx, a),
        Command::ModelServer(a) => cmd_model_server(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
