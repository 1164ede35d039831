//! The `centerfpa` command line.
//!
//! Configuration is layered: built-in defaults, then the TOML file given by
//! `--config` (or the `CENTERFPA_CONFIG` environment variable), then
//! individual flags.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::blocks::{Architecture, ModelParams, INPUT_MULTIPLE, MODEL_STRIDE};
use crate::codec::encode_targets;
use crate::config::{read_class_list, ModelConfig, CONFIG_ENV};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::io::{
    draw_boxes, format_annotations, format_detections, read_annotations, read_detections, read_image,
    write_image, write_text,
};
use crate::pipeline::{
    clip_boxes_to_tile, extract_tile, multiscale_infer, nms, split_tiles, tile_to_global, DetectionSet,
    TileFrame, MIN_VISIBLE_FRACTION,
};
use crate::synth::{generate_scene, random_scene, OracleHeads, RandomSceneOptions};
use crate::weights::{model_from_container, model_to_container, targets_to_container};

#[derive(Debug, Parser)]
#[command(name = "centerfpa", version, about = "Center-point object detection for large aerial images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode an annotation file into target maps.
    Encode(EncodeArgs),
    /// Detect objects in a PPM image with a weight file.
    Infer(InferArgs),
    /// Split an image (and optionally its annotations) into tiles.
    Tile(TileArgs),
    /// Merge per-tile detection files into one image-frame file.
    Merge(MergeArgs),
    /// Score detections against annotations.
    Eval(EvalArgs),
    /// Synthetic scene, oracle predictions, tiling, merging and scoring.
    Demo(DemoArgs),
    /// Fold every asymmetric block of a train-form weight file into 3x3 kernels.
    FuseWeights(FuseArgs),
    /// Write randomly initialized train-form weights.
    InitWeights(InitArgs),
    /// Print the effective configuration as TOML.
    Config(ConfigCmdArgs),
}

/// Flags that override configuration fields.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Class-list file, one name per line; replaces the configured classes.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Output stride R.
    #[arg(long = "r")]
    pub output_stride: Option<usize>,
    /// Maximum decoded objects per tile (K).
    #[arg(long = "k")]
    pub max_objects: Option<usize>,
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub tile: Option<usize>,
    /// Distance between tile origins.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub match_iou: Option<f64>,
    #[arg(long)]
    pub score_floor: Option<f64>,
    /// Comma-separated inference scales, e.g. `0.5,1,1.5`.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => ModelConfig::load(path)?,
            None => ModelConfig::default(),
        };
        if let Some(path) = &self.classes {
            cfg.classes = read_class_list(path)?;
        }
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        apply!(
            output_stride, max_objects, phi, alpha, beta, lambda1, lambda2, tile, stride, nms_iou,
            match_iou, score_floor, scales
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Take the image extents from this PPM instead of --width/--height.
    #[arg(long, conflicts_with_all = ["width", "height"])]
    pub image: Option<PathBuf>,
    #[arg(long, required_unless_present = "image")]
    pub width: Option<usize>,
    #[arg(long, required_unless_present = "image")]
    pub height: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a copy of the image with the detections drawn on it.
    #[arg(long)]
    pub render: Option<PathBuf>,
    /// Tile worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Annotations to clip into per-tile files.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// `tiles.json` written by the tile command.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding `<tile>.det.txt` files; defaults to the manifest's.
    #[arg(long)]
    pub detections_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 12)]
    pub objects: usize,
    #[arg(long, default_value_t = 1848)]
    pub width: usize,
    #[arg(long, default_value_t = 1848)]
    pub height: usize,
    #[arg(long, default_value = "demo-out")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stage widths; ResNet-18 uses 64,128,256,512.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256, 512])]
    pub widths: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub se_reduction: usize,
    #[arg(long, default_value_t = 64)]
    pub fused_width: usize,
    #[arg(long, default_value_t = 64)]
    pub head_width: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ConfigCmdArgs {
    /// Write to this file instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

/// One entry of the tile manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub name: String,
    pub origin_x: usize,
    pub origin_y: usize,
    pub width: usize,
    pub height: usize,
    pub content_width: usize,
    pub content_height: usize,
}

impl TileRecord {
    fn new(index: usize, f: &TileFrame) -> Self {
        Self {
            name: format!("tile_{index:04}"),
            origin_x: f.origin_x,
            origin_y: f.origin_y,
            width: f.width,
            height: f.height,
            content_width: f.content_width,
            content_height: f.content_height,
        }
    }

    pub fn frame(&self) -> TileFrame {
        TileFrame {
            origin_x: self.origin_x,
            origin_y: self.origin_y,
            width: self.width,
            height: self.height,
            content_width: self.content_width,
            content_height: self.content_height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileManifest {
    pub image_width: usize,
    pub image_height: usize,
    pub tiles: Vec<TileRecord>,
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Encode(a) => cmd_encode(&a, out),
        Command::Infer(a) => cmd_infer(&a, out),
        Command::Tile(a) => cmd_tile(&a, out),
        Command::Merge(a) => cmd_merge(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Demo(a) => cmd_demo(&a, out),
        Command::FuseWeights(a) => cmd_fuse(&a, out),
        Command::InitWeights(a) => cmd_init(&a, out),
        Command::Config(a) => {
            let text = a.cfg.resolve()?.to_toml_string();
            match &a.out {
                Some(path) => write_text(path, &text),
                None => say(out, &text),
            }
        }
    }
}

pub fn cmd_encode(a: &EncodeArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let (width, height) = match &a.image {
        Some(path) => {
            let (_, h, w) = read_image(path)?.dims3()?;
            (w, h)
        }
        None => (a.width.unwrap_or_default(), a.height.unwrap_or_default()),
    };
    let boxes = read_annotations(&a.annotations, &cfg.classes)?;
    let targets = encode_targets(&boxes, width, height, cfg.num_classes(), cfg.output_stride)?;
    targets_to_container(&targets, cfg.output_stride).save(&a.out)?;
    say(
        out,
        &format!(
            "encoded {} objects ({} center collisions) into {:?} maps\n",
            targets.num_objects,
            targets.collisions,
            targets.heatmap.shape()
        ),
    )
}

fn check_model_against_config(params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    if params.arch.num_classes != cfg.num_classes() {
        return Err(Error::Config(format!(
            "weights have {} heatmap classes but the config lists {}",
            params.arch.num_classes,
            cfg.num_classes()
        )));
    }
    if cfg.output_stride != MODEL_STRIDE {
        return Err(Error::Config(format!(
            "the network's output stride is {MODEL_STRIDE} but the config sets R = {}",
            cfg.output_stride
        )));
    }
    if !cfg.tile.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::Config(format!(
            "tile {} must be a multiple of {INPUT_MULTIPLE} for the network",
            cfg.tile
        )));
    }
    Ok(())
}

pub fn cmd_infer(a: &InferArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let (params, _) = model_from_container(&Container::load(&a.weights)?)?;
    check_model_against_config(&params, &cfg)?;
    let image = read_image(&a.image)?;
    let dets = multiscale_infer(&image, &params, &cfg, &cfg.scales, a.workers)?;
    write_text(&a.out, &format_detections(&dets.boxes, &cfg.classes)?)?;
    if let Some(path) = &a.render {
        let mut canvas = image.clone();
        draw_boxes(&mut canvas, &dets.boxes, [1.0, 0.0, 0.0])?;
        write_image(path, &canvas)?;
    }
    say(out, &format!("{} detections written to {}\n", dets.boxes.len(), a.out.display()))
}

pub fn cmd_tile(a: &TileArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let image = read_image(&a.image)?;
    let (_, h, w) = image.dims3()?;
    let gts = a
        .annotations
        .as_ref()
        .map(|p| read_annotations(p, &cfg.classes))
        .transpose()?;
    create_dir(&a.out_dir)?;
    let frames = split_tiles(w, h, cfg.tile, cfg.stride)?;
    let mut manifest = TileManifest {
        image_width: w,
        image_height: h,
        tiles: Vec::with_capacity(frames.len()),
    };
    for (i, f) in frames.iter().enumerate() {
        let record = TileRecord::new(i, f);
        write_image(&a.out_dir.join(format!("{}.ppm", record.name)), &extract_tile(&image, f)?)?;
        if let Some(gts) = &gts {
            let local = clip_boxes_to_tile(gts, f, MIN_VISIBLE_FRACTION);
            write_text(
                &a.out_dir.join(format!("{}.txt", record.name)),
                &format_annotations(&local, &cfg.classes)?,
            )?;
        }
        manifest.tiles.push(record);
    }
    write_text(
        &a.out_dir.join("tiles.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    say(out, &format!("{} tiles written to {}\n", frames.len(), a.out_dir.display()))
}

pub fn cmd_merge(a: &MergeArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let text = std::fs::read_to_string(&a.manifest).map_err(|e| Error::io(&a.manifest, e))?;
    let manifest: TileManifest = serde_json::from_str(&text)
        .map_err(|e| Error::invalid("merge", format!("{}: {e}", a.manifest.display())))?;
    let dir = match &a.detections_dir {
        Some(d) => d.clone(),
        None => a.manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let mut merged = DetectionSet::global(Vec::new());
    for t in &manifest.tiles {
        let local = read_detections(&dir.join(format!("{}.det.txt", t.name)), &cfg.classes)?;
        merged
            .boxes
            .extend(tile_to_global(DetectionSet::tile_local(local), &t.frame())?.boxes);
    }
    let kept = nms(&merged, cfg.nms_iou);
    write_text(&a.out, &format_detections(&kept.boxes, &cfg.classes)?)?;
    say(
        out,
        &format!(
            "merged {} tile detections into {} after NMS\n",
            merged.boxes.len(),
            kept.boxes.len()
        ),
    )
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let dets = read_detections(&a.detections, &cfg.classes)?;
    let gts = read_annotations(&a.annotations, &cfg.classes)?;
    let report = evaluate(&dets, &gts, cfg.num_classes(), cfg.match_iou)?;
    if let Some(path) = &a.json {
        write_text(path, &report.to_json())?;
    }
    say(out, &report.to_table(&cfg.classes))
}

/// Files written by the demo, relative to its output directory.
pub const DEMO_FILES: [&str; 8] = [
    "scene.ppm",
    "scene.json",
    "ground_truth.txt",
    "tiles.json",
    "detections.txt",
    "detections.ppm",
    "report.txt",
    "report.json",
];

pub fn cmd_demo(a: &DemoArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let opts = RandomSceneOptions {
        width: a.width,
        height: a.height,
        num_classes: cfg.num_classes(),
        num_objects: a.objects,
        ..RandomSceneOptions::default()
    };
    let spec = random_scene(&opts, a.seed)?;
    let scene = generate_scene(&spec)?;
    let oracle = OracleHeads {
        ground_truth: scene.ground_truth.clone(),
        num_classes: cfg.num_classes(),
        stride: cfg.output_stride,
    };
    let dets = multiscale_infer(&scene.image, &oracle, &cfg, &cfg.scales, a.workers)?;
    let report = evaluate(&dets.boxes, &scene.ground_truth, cfg.num_classes(), cfg.match_iou)?;

    let dir = &a.out_dir;
    create_dir(dir)?;
    write_image(&dir.join("scene.ppm"), &scene.image)?;
    write_text(&dir.join("scene.json"), &spec.to_json())?;
    write_text(&dir.join("ground_truth.txt"), &format_annotations(&scene.ground_truth, &cfg.classes)?)?;
    let frames = split_tiles(a.width, a.height, cfg.tile, cfg.stride)?;
    let manifest = TileManifest {
        image_width: a.width,
        image_height: a.height,
        tiles: frames.iter().enumerate().map(|(i, f)| TileRecord::new(i, f)).collect(),
    };
    write_text(
        &dir.join("tiles.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    write_text(&dir.join("detections.txt"), &format_detections(&dets.boxes, &cfg.classes)?)?;
    let mut canvas = scene.image.clone();
    draw_boxes(&mut canvas, &dets.boxes, [1.0, 0.0, 0.0])?;
    write_image(&dir.join("detections.ppm"), &canvas)?;
    let table = report.to_table(&cfg.classes);
    write_text(&dir.join("report.txt"), &table)?;
    write_text(&dir.join("report.json"), &report.to_json())?;

    say(
        out,
        &format!(
            "scene {}x{} seed {}: {} objects, {} tiles, scales {:?}, {} detections\n{table}",
            a.width,
            a.height,
            a.seed,
            scene.ground_truth.len(),
            frames.len(),
            cfg.scales,
            dets.boxes.len()
        ),
    )
}

pub fn cmd_fuse(a: &FuseArgs, out: &mut dyn Write) -> Result<()> {
    let (params, cfg) = model_from_container(&Container::load(&a.input)?)?;
    if params.is_fused() {
        return Err(Error::invalid("fuse-weights", format!("{} is already fused", a.input.display())));
    }
    model_to_container(&params.fused(), &cfg).save(&a.out)?;
    say(out, &format!("fused weights written to {}\n", a.out.display()))
}

pub fn cmd_init(a: &InitArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    if a.widths.len() != 4 {
        return Err(Error::invalid("init-weights", format!("expected 4 stage widths, got {:?}", a.widths)));
    }
    let arch = Architecture {
        widths: [a.widths[0], a.widths[1], a.widths[2], a.widths[3]],
        se_reduction: a.se_reduction,
        fused_width: a.fused_width,
        head_width: a.head_width,
        ..Architecture::resnet18(cfg.num_classes())
    };
    let params = ModelParams::init(&arch, a.seed)?;
    model_to_container(&params, &cfg).save(&a.out)?;
    say(out, &format!("initialized weights (seed {}) written to {}\n", a.seed, a.out.display()))
}
