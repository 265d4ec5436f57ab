use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use rooftop::evaluation::{aggregate, instances_from_mask, match_detections, EvalReport, IouKind};
use rooftop::heads::{run_patch_pipeline, Head, RpnScorer};
use rooftop::io::{
    read_mask, read_records, read_rgb, write_atomic, write_image, write_mask, write_records, DetectConfig,
    DetectionRecord, GridManifest, ManifestTile, MANIFEST_FILE,
};
use rooftop::mask::{rle_decode, rle_encode, RleMask};
use rooftop::synth::{generate_scene, OracleHead, OracleRpn, SceneSpec};
use rooftop::tiling::{extract_tile, make_grid_with_overlap, split_dataset, stitch, Tile, DEFAULT_TILE_SIZE};
use rooftop::toy::{LuminanceHead, LuminanceRpn, ToyBackbone};
use rooftop::{BBox, Detection, ImagePatch};

#[derive(Parser)]
#[command(name = "rooftop", version, about = "Rooftop detection pipeline and evaluation tools")]
struct Cli {
    /// Worker threads (0 = one per core). Output does not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut a raster into fixed-size, zero-padded tiles plus a grid manifest.
    Tile {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TILE_SIZE)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        overlap: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Seeded train/test split of the tiles in a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the manifest's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the detector on one patch or on a tiled directory.
    Detect {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use the oracle RPN and head built from this ground-truth mask.
        #[arg(long)]
        oracle_gt: Option<PathBuf>,
    },
    /// Match detections against ground-truth masks and print precision/recall/F1.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// A mask file, or a directory of `<image>.pgm` masks.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value = "mask")]
        kind: String,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw masks in yellow and boxes in blue over a raster.
    Overlay {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which records to draw; defaults to the image file stem.
        #[arg(long)]
        image_id: Option<String>,
    },
    /// Convert masks between PGM and run-length JSON.
    Rle {
        #[command(subcommand)]
        action: RleAction,
    },
    /// Generate a synthetic rooftop scene and its ground-truth mask.
    Synth {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 512)]
        height: usize,
        #[arg(long, default_value_t = 8)]
        max_buildings: usize,
    },
}

#[derive(Subcommand)]
enum RleAction {
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .with_context(|| format!("{} has no file name", path.display()))
}

fn cmd_tile(input: &Path, size: usize, overlap: usize, out_dir: &Path) -> Result<()> {
    let image = read_rgb(input).with_context(|| format!("reading {}", input.display()))?;
    let grid = make_grid_with_overlap(image.width(), image.height(), size, overlap)?;
    let name = stem(input)?;
    fs::create_dir_all(out_dir)?;
    let tiles: Vec<Tile> = grid.tiles().collect();
    let entries = tiles
        .par_iter()
        .map(|t| {
            let patch = extract_tile(&image, &grid, t.row, t.col)?;
            let file = t.file_name(&name, "ppm");
            write_image(&out_dir.join(&file), &patch)?;
            Ok(ManifestTile { tile: *t, file })
        })
        .collect::<Result<Vec<_>>>()?;
    GridManifest {
        image: name,
        grid,
        tiles: entries,
    }
    .save(&out_dir.join(MANIFEST_FILE))?;
    Ok(())
}

fn cmd_split(manifest: &Path, fraction: f64, seed: u64, out_dir: Option<&Path>) -> Result<()> {
    let m = GridManifest::load(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let files: Vec<String> = m.tiles.iter().map(|t| t.file.clone()).collect();
    let (train, test) = split_dataset(&files, fraction, seed)?;
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&dir)?;
    let lines = |v: &[String]| v.iter().map(|s| format!("{s}\n")).collect::<String>();
    write_atomic(&dir.join("train.txt"), lines(&train).as_bytes())?;
    write_atomic(&dir.join("test.txt"), lines(&test).as_bytes())?;
    Ok(())
}

/// Ground-truth boxes of `mask` expressed in the frame of `tile`.
fn boxes_in_tile(gt: &[BBox], tile: &Tile) -> Vec<BBox> {
    let v = tile.valid_region();
    gt.iter()
        .filter_map(|b| {
            let c = BBox::new(
                b.x1().max(v.x1()),
                b.y1().max(v.y1()),
                b.x2().min(v.x2()).max(b.x1().max(v.x1())),
                b.y2().min(v.y2()).max(b.y1().max(v.y1())),
            )
            .ok()?;
            (c.area() > 0.0).then(|| c.translate(-(tile.x_offset as f64), -(tile.y_offset as f64)))
        })
        .collect()
}

fn detect_patch(patch: &ImagePatch, cfg: &DetectConfig, oracle: Option<Vec<BBox>>) -> Result<Vec<Detection>> {
    let (rpn, head): (Box<dyn RpnScorer>, Box<dyn Head>) = match oracle {
        Some(gt) => (
            Box::new(OracleRpn {
                ground_truth: gt.clone(),
            }),
            Box::new(OracleHead::new(gt)),
        ),
        None => (Box::new(LuminanceRpn), Box::new(LuminanceHead::default())),
    };
    Ok(run_patch_pipeline(
        patch,
        &ToyBackbone,
        rpn.as_ref(),
        head.as_ref(),
        &cfg.pipeline,
    )?)
}

fn cmd_detect(input: &Path, config: Option<&Path>, out: &Path, oracle_gt: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => DetectConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => DetectConfig::default(),
    };
    let gt_boxes = oracle_gt
        .map(|p| -> Result<Vec<BBox>> {
            let mask = read_mask(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(instances_from_mask(&mask).into_iter().map(|g| g.bbox).collect())
        })
        .transpose()?;

    let records = if input.is_dir() {
        let m = GridManifest::load(&input.join(MANIFEST_FILE))
            .with_context(|| format!("reading manifest in {}", input.display()))?;
        let per_tile = m
            .tiles
            .par_iter()
            .map(|entry| {
                let path = input.join(&entry.file);
                let patch = read_rgb(&path).with_context(|| format!("reading {}", path.display()))?;
                let oracle = gt_boxes.as_ref().map(|g| boxes_in_tile(g, &entry.tile));
                Ok((entry.tile, detect_patch(&patch, &cfg, oracle)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let merged = stitch(&per_tile, cfg.stitch_nms_iou)?;
        let (w, h) = (m.grid.image_width, m.grid.image_height);
        merged
            .iter()
            .map(|d| DetectionRecord::from_detection(&m.image, d, w, h))
            .collect::<Vec<_>>()
    } else {
        let patch = read_rgb(input).with_context(|| format!("reading {}", input.display()))?;
        let name = stem(input)?;
        detect_patch(&patch, &cfg, gt_boxes)?
            .iter()
            .map(|d| DetectionRecord::from_detection(&name, d, patch.width(), patch.height()))
            .collect()
    };
    write_records(out, &records)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    report: EvalReport,
    images: usize,
    /// Value used for ratios whose denominator is zero.
    zero_denominator: f64,
}

fn cmd_eval(pred: &Path, gt: &Path, iou: f64, kind: &str, out: Option<&Path>) -> Result<()> {
    let kind: IouKind = kind.parse()?;
    if !(0.0..=1.0).contains(&iou) {
        bail!("iou threshold {iou} outside [0, 1]");
    }
    let records = read_records(pred).with_context(|| format!("reading {}", pred.display()))?;

    let mut gt_files = BTreeMap::new();
    if gt.is_dir() {
        for entry in fs::read_dir(gt)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "pgm") {
                gt_files.insert(stem(&path)?, path);
            }
        }
    } else {
        gt_files.insert(stem(gt)?, gt.to_path_buf());
    }
    if gt_files.is_empty() {
        bail!("no ground-truth masks found at {}", gt.display());
    }

    let mut by_image: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for r in &records {
        if !gt_files.contains_key(&r.image) {
            bail!("predictions for image {:?} have no ground-truth mask", r.image);
        }
        by_image.entry(&r.image).or_default().push(r.to_detection()?);
    }

    let reports = gt_files
        .iter()
        .map(|(name, path)| {
            let mask = read_mask(path).with_context(|| format!("reading {}", path.display()))?;
            let gts = instances_from_mask(&mask);
            let preds = by_image.get(name.as_str()).map(Vec::as_slice).unwrap_or(&[]);
            let result = match_detections(preds, &gts, iou, kind).with_context(|| format!("matching image {name}"))?;
            Ok(EvalReport::new(result.counts, iou, kind))
        })
        .collect::<Result<Vec<_>>>()?;

    let output = EvalOutput {
        report: aggregate(&reports)?,
        images: reports.len(),
        zero_denominator: 0.0,
    };
    let mut text = serde_json::to_string_pretty(&output)?;
    text.push('\n');
    if let Some(path) = out {
        write_atomic(path, text.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_overlay(image: &Path, pred: &Path, out: &Path, image_id: Option<&str>) -> Result<()> {
    let img = read_rgb(image).with_context(|| format!("reading {}", image.display()))?;
    let id = match image_id {
        Some(id) => id.to_string(),
        None => stem(image)?,
    };
    let dets = read_records(pred)
        .with_context(|| format!("reading {}", pred.display()))?
        .iter()
        .filter(|r| r.image == id)
        .map(|r| r.to_detection())
        .collect::<rooftop::Result<Vec<_>>>()?;
    write_image(out, &rooftop::render_overlay(&img, &dets))?;
    Ok(())
}

fn cmd_rle(action: &RleAction) -> Result<()> {
    match action {
        RleAction::Encode { input, out } => {
            let mask = read_mask(input).with_context(|| format!("reading {}", input.display()))?;
            let mut text = serde_json::to_string(&rle_encode(&mask))?;
            text.push('\n');
            write_atomic(out, text.as_bytes())?;
        }
        RleAction::Decode { input, out } => {
            let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            let rle: RleMask = serde_json::from_str(&text)?;
            write_mask(out, &rle_decode(&rle)?)?;
        }
    }
    Ok(())
}

fn cmd_synth(image: &Path, gt: &Path, seed: u64, width: usize, height: usize, max_buildings: usize) -> Result<()> {
    let spec = SceneSpec {
        width,
        height,
        max_buildings,
        min_buildings: max_buildings.min(1),
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec, seed)?;
    write_image(image, &scene.image)?;
    write_mask(gt, &scene.ground_truth)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Tile {
            input,
            size,
            overlap,
            out_dir,
        } => cmd_tile(input, *size, *overlap, out_dir),
        Command::Split {
            manifest,
            train_fraction,
            seed,
            out_dir,
        } => cmd_split(manifest, *train_fraction, *seed, out_dir.as_deref()),
        Command::Detect {
            input,
            config,
            out,
            oracle_gt,
        } => cmd_detect(input, config.as_deref(), out, oracle_gt.as_deref()),
        Command::Eval {
            pred,
            gt,
            iou,
            kind,
            out,
        } => cmd_eval(pred, gt, *iou, kind, out.as_deref()),
        Command::Overlay {
            image,
            pred,
            out,
            image_id,
        } => cmd_overlay(image, pred, out, image_id.as_deref()),
        Command::Rle { action } => cmd_rle(action),
        Command::Synth {
            image,
            gt,
            seed,
            width,
            height,
            max_buildings,
        } => cmd_synth(image, gt, *seed, *width, *height, *max_buildings),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::FAILURE;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
