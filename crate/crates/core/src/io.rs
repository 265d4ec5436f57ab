//! On-disk formats: binary PGM/PPM rasters, line-delimited JSON detection
//! records, the flat key-value pipeline config, and the tile grid manifest.
//! Every writer goes through a temporary file and a rename so a failed run
//! never leaves a partial output behind.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, Label};
use crate::heads::PipelineConfig;
use crate::image::ImagePatch;
use crate::mask::{BinaryMask, InstanceMask, RleMask};
use crate::tiling::{Tile, TileGrid};

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

// ---------------------------------------------------------------------------
// Netpbm

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::CorruptData("missing netpbm magic number".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and comments before each number.
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::CorruptData("truncated netpbm header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::CorruptData("bad number in netpbm header".into()))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::CorruptData("netpbm header not terminated".into()));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        data_start: pos + 1,
    })
}

/// Decodes a binary 8-bit PPM (P6) or PGM (P5) image.
pub fn decode_netpbm(bytes: &[u8]) -> Result<ImagePatch> {
    let h = parse_header(bytes)?;
    let channels = match &h.magic {
        b"P6" => 3,
        b"P5" => 1,
        m => {
            return Err(Error::CorruptData(format!(
                "unsupported netpbm type {}",
                String::from_utf8_lossy(m)
            )))
        }
    };
    if h.maxval == 0 || h.maxval > 255 {
        return Err(Error::CorruptData(format!("maxval {} is not 8-bit", h.maxval)));
    }
    let n = h.width * h.height * channels;
    let data = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| Error::CorruptData(format!("raster needs {n} bytes")))?;
    ImagePatch::from_raw(h.width, h.height, channels, data.to_vec())
}

/// P6 for three-channel images, P5 for single-channel ones.
pub fn encode_netpbm(image: &ImagePatch) -> Result<Vec<u8>> {
    let magic = match image.channels() {
        3 => "P6",
        1 => "P5",
        c => return Err(Error::InvalidArgument(format!("cannot write {c}-channel netpbm"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.data());
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<ImagePatch> {
    decode_netpbm(&fs::read(path)?)
}

pub fn write_image(path: &Path, image: &ImagePatch) -> Result<()> {
    write_atomic(path, &encode_netpbm(image)?)
}

/// Reads an RGB raster; grayscale input is expanded to three channels.
pub fn read_rgb(path: &Path) -> Result<ImagePatch> {
    let img = read_image(path)?;
    if img.channels() == 3 {
        return Ok(img);
    }
    let data = img.data().iter().flat_map(|v| [*v, *v, *v]).collect();
    ImagePatch::from_raw(img.width(), img.height(), 3, data)
}

/// Nonzero samples are building pixels.
pub fn mask_from_gray(img: &ImagePatch) -> Result<BinaryMask> {
    if img.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "masks are single-channel, got {} channels",
            img.channels()
        )));
    }
    BinaryMask::from_bits(img.width(), img.height(), img.data().iter().map(|v| *v != 0).collect())
}

/// Building pixels become 255.
pub fn mask_to_gray(mask: &BinaryMask) -> ImagePatch {
    let data = mask.bits().iter().map(|b| if *b { 255 } else { 0 }).collect();
    ImagePatch::from_raw(mask.width(), mask.height(), 1, data).expect("one byte per pixel")
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    mask_from_gray(&read_image(path)?)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_image(path, &mask_to_gray(mask))
}

// ---------------------------------------------------------------------------
// Detection records

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub label: Label,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Full-frame run-length mask.
    pub mask_rle: Option<RleMask>,
}

impl DetectionRecord {
    pub fn from_detection(image: &str, d: &Detection, frame_w: usize, frame_h: usize) -> Self {
        Self {
            image: image.to_string(),
            label: d.label,
            score: d.score(),
            bbox: d.bbox,
            mask_rle: d.mask.as_ref().map(|m| m.to_rle(frame_w, frame_h)),
        }
    }

    pub fn to_detection(&self) -> Result<Detection> {
        let mask = self.mask_rle.as_ref().map(InstanceMask::from_rle).transpose()?;
        Detection::with_label(self.bbox, self.label, self.score, mask)
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: DetectionRecord = serde_json::from_str(line)?;
        if !(0.0..=1.0).contains(&rec.score) {
            return Err(Error::CorruptData(format!("score {} outside [0, 1]", rec.score)));
        }
        if let Some(r) = &rec.mask_rle {
            r.validate()?;
        }
        Ok(rec)
    }
}

pub fn parse_records(text: &str) -> Result<Vec<DetectionRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            DetectionRecord::from_json_line(l).map_err(|e| Error::CorruptData(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<DetectionRecord>> {
    let file = fs::File::open(path)?;
    let mut text = String::new();
    for line in std::io::BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_records(&text)
}

pub fn format_records(records: &[DetectionRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line()?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    write_atomic(path, format_records(records)?.as_bytes())
}

// ---------------------------------------------------------------------------
// Config

/// Everything `detect` needs: the per-patch pipeline plus cross-tile NMS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub pipeline: PipelineConfig,
    pub stitch_nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            stitch_nms_iou: 0.5,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_triple(key: &str, v: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = v.split(',').map(|p| parse_num(key, p.trim())).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected exactly 3 comma-separated values")))
}

impl DetectConfig {
    pub const KEYS: [&'static str; 14] = [
        "anchor.scales",
        "anchor.ratios",
        "anchor.stride",
        "proposal.score_threshold",
        "proposal.pre_nms_top_k",
        "proposal.nms_iou",
        "proposal.post_nms_top_n",
        "roi.box_output_size",
        "roi.mask_output_size",
        "roi.sampling_points",
        "detection.score_threshold",
        "detection.nms_iou",
        "mask.threshold",
        "stitch.nms_iou",
    ];

    /// Parses `key = value` lines; `#` starts a comment. Unknown or repeated
    /// keys are errors, missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = DetectConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            let p = &mut cfg.pipeline;
            match key {
                "anchor.scales" => p.anchors.scales = parse_triple(key, v)?,
                "anchor.ratios" => p.anchors.ratios = parse_triple(key, v)?,
                "anchor.stride" => p.anchors.stride = parse_num(key, v)?,
                "proposal.score_threshold" => p.proposal.score_threshold = parse_num(key, v)?,
                "proposal.pre_nms_top_k" => p.proposal.pre_nms_top_k = parse_num(key, v)?,
                "proposal.nms_iou" => p.proposal.nms_iou = parse_num(key, v)?,
                "proposal.post_nms_top_n" => p.proposal.post_nms_top_n = parse_num(key, v)?,
                "roi.box_output_size" => p.box_roi.output_size = parse_num(key, v)?,
                "roi.mask_output_size" => p.mask_roi.output_size = parse_num(key, v)?,
                "roi.sampling_points" => {
                    let s = parse_num(key, v)?;
                    p.box_roi.sampling_points = s;
                    p.mask_roi.sampling_points = s;
                }
                "detection.score_threshold" => p.detection_score_threshold = parse_num(key, v)?,
                "detection.nms_iou" => p.detection_nms_iou = parse_num(key, v)?,
                "mask.threshold" => p.mask_binarize_threshold = parse_num(key, v)?,
                "stitch.nms_iou" => cfg.stitch_nms_iou = parse_num(key, v)?,
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", n + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if !(0.0..=1.0).contains(&self.stitch_nms_iou) {
            return Err(Error::Config(format!(
                "stitch.nms_iou {} outside [0, 1]",
                self.stitch_nms_iou
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let p = &self.pipeline;
        let triple = |v: [f64; 3]| format!("{}, {}, {}", v[0], v[1], v[2]);
        let values = [
            triple(p.anchors.scales),
            triple(p.anchors.ratios),
            p.anchors.stride.to_string(),
            p.proposal.score_threshold.to_string(),
            p.proposal.pre_nms_top_k.to_string(),
            p.proposal.nms_iou.to_string(),
            p.proposal.post_nms_top_n.to_string(),
            p.box_roi.output_size.to_string(),
            p.mask_roi.output_size.to_string(),
            p.box_roi.sampling_points.to_string(),
            p.detection_score_threshold.to_string(),
            p.detection_nms_iou.to_string(),
            p.mask_binarize_threshold.to_string(),
            self.stitch_nms_iou.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Grid manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTile {
    #[serde(flatten)]
    pub tile: Tile,
    pub file: String,
}

/// Written by `tile`, read by `split` and `detect`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridManifest {
    pub image: String,
    pub grid: TileGrid,
    pub tiles: Vec<ManifestTile>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl GridManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: GridManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.tiles.len() != m.grid.len() {
            return Err(Error::CorruptData(format!(
                "manifest lists {} tiles for a {}-tile grid",
                m.tiles.len(),
                m.grid.len()
            )));
        }
        for t in &m.tiles {
            if m.grid.tile(t.tile.row, t.tile.col)? != t.tile {
                return Err(Error::CorruptData(format!(
                    "tile ({}, {}) disagrees with the grid",
                    t.tile.row, t.tile.col
                )));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}
