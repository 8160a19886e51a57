//! Sequence and ground-truth I/O plus one-pass evaluation metrics.
//!
//! Boxes are `(x, y, w, h)` with a 0-based pixel origin in memory. Text files
//! (ground truth and results) use the benchmark's 1-based origin.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const GROUND_TRUTH_FILE: &str = "groundtruth_rect.txt";
/// Largest center-error threshold of the precision curve, in pixels.
pub const PRECISION_MAX: usize = 50;
/// Overlap thresholds are `i / SUCCESS_STEPS` for `i` in `0..=SUCCESS_STEPS`.
pub const SUCCESS_STEPS: usize = 20;
pub const DP_THRESHOLD: usize = 20;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_array(b: [f64; 4]) -> Self {
        Self::new(b[0], b[1], b[2], b[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn overlap_score(a: &BBox, b: &BBox) -> f64 {
    // Widths are taken from edges throughout so that a box overlaps itself
    // with exactly 1 and the intersection never exceeds either area.
    let span = |lo: f64, len: f64| ((lo + len) - lo).max(0.0);
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let area_a = span(a.x, a.w) * span(a.y, a.h);
    let area_b = span(b.x, b.w) * span(b.y, b.h);
    let union = area_a + area_b - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricCurves {
    /// `precision[t]`: fraction of frames with center error ≤ `t` px.
    pub precision: Vec<f64>,
    /// `success[i]`: fraction of frames with overlap > `i / 20`.
    pub success: Vec<f64>,
    pub dp20: f64,
    pub auc: f64,
}

impl MetricCurves {
    pub fn precision_thresholds() -> impl Iterator<Item = f64> {
        (0..=PRECISION_MAX).map(|t| t as f64)
    }

    pub fn success_thresholds() -> impl Iterator<Item = f64> {
        (0..=SUCCESS_STEPS).map(|i| i as f64 / SUCCESS_STEPS as f64)
    }

    /// `dp20=…,auc=…` with four decimals.
    pub fn summary(&self) -> String {
        format!("dp20={:.4},auc={:.4}", self.dp20, self.auc)
    }
}

pub fn compute_curves(track: &[BBox], gt: &[BBox]) -> Result<MetricCurves> {
    if track.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} tracked boxes for {} ground-truth boxes",
            track.len(),
            gt.len()
        )));
    }
    if track.is_empty() {
        return Err(Error::Dimension("no frames to evaluate".into()));
    }
    let n = track.len() as f64;
    let errors: Vec<f64> = track.iter().zip(gt).map(|(a, b)| center_error(a, b)).collect();
    let overlaps: Vec<f64> = track.iter().zip(gt).map(|(a, b)| overlap_score(a, b)).collect();
    let precision: Vec<f64> = MetricCurves::precision_thresholds()
        .map(|t| errors.iter().filter(|&&e| e <= t).count() as f64 / n)
        .collect();
    let success: Vec<f64> = MetricCurves::success_thresholds()
        .map(|t| overlaps.iter().filter(|&&o| o > t).count() as f64 / n)
        .collect();
    let auc = success.iter().sum::<f64>() / success.len() as f64;
    Ok(MetricCurves {
        dp20: precision[DP_THRESHOLD],
        precision,
        success,
        auc,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<PathBuf>,
    pub ground_truth: Vec<BBox>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Frames come from `dir/img` when it exists, otherwise from `dir`, ordered by
/// numeric file stem. Ground truth is `dir/groundtruth_rect.txt`. A ground
/// truth shorter than the frame list keeps only that prefix of frames.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let text = fs::read_to_string(&gt_path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", gt_path.display())))
    })?;
    let ground_truth = parse_boxes(&text)?;
    let mut frames = list_frames(dir)?;
    if ground_truth.len() > frames.len() {
        return Err(Error::Dimension(format!(
            "{} ground-truth boxes for {} frames in {}",
            ground_truth.len(),
            frames.len(),
            dir.display()
        )));
    }
    frames.truncate(ground_truth.len());
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sequence {
        name,
        frames,
        ground_truth,
    })
}

/// Image files of a sequence directory in numeric order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let img = dir.join("img");
    let root = if img.is_dir() { img } else { dir.to_path_buf() };
    let mut frames = Vec::new();
    for entry in fs::read_dir(&root)? {
        let path = entry?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if !is_image {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let Ok(index) = stem.parse::<u64>() else {
            return Err(Error::Parse {
                line: 0,
                message: format!("frame file {} has a non-numeric name", path.display()),
            });
        };
        frames.push((index, path));
    }
    frames.sort();
    Ok(frames.into_iter().map(|(_, p)| p).collect())
}

pub fn load_frame(path: &Path) -> Result<GrayImage> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .into_luma8();
    GrayImage::from_luma8(img.width() as usize, img.height() as usize, img.as_raw())
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|f| !f.is_empty())
        .collect()
}

fn parse_field(field: &str, line: usize) -> Result<f64> {
    let v: f64 = field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("not a number: {field:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("not finite: {field:?}"),
        });
    }
    Ok(v)
}

fn parse_box(fields: &[&str], line: usize) -> Result<BBox> {
    let v = fields
        .iter()
        .map(|f| parse_field(f, line))
        .collect::<Result<Vec<_>>>()?;
    if v[2] < 0.0 || v[3] < 0.0 {
        return Err(Error::Parse {
            line,
            message: format!("negative box size {}x{}", v[2], v[3]),
        });
    }
    Ok(BBox::new(v[0] - 1.0, v[1] - 1.0, v[2], v[3]))
}

/// One 1-based `x,y,w,h` box per line, separated by commas, tabs or spaces.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_boxes(text: &str) -> Result<Vec<BBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields = split_fields(line);
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        boxes.push(parse_box(&fields, i + 1)?);
    }
    Ok(boxes)
}

/// Results lines are `frame,x,y,w,h`; plain `x,y,w,h` lines are accepted too.
pub fn parse_results(text: &str) -> Result<Vec<BBox>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields = split_fields(line);
        match fields.len() {
            0 => continue,
            4 => boxes.push(parse_box(&fields, i + 1)?),
            5 => {
                let expected = boxes.len() + 1;
                if fields[0].parse::<usize>().ok() != Some(expected) {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("expected frame index {expected}, found {:?}", fields[0]),
                    });
                }
                boxes.push(parse_box(&fields[1..], i + 1)?);
            }
            n => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected 4 or 5 fields, found {n}"),
                })
            }
        }
    }
    Ok(boxes)
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    parse_boxes(&fs::read_to_string(path)?)
}

pub fn read_results(path: &Path) -> Result<Vec<BBox>> {
    parse_results(&fs::read_to_string(path)?)
}

/// Results text: one `frame,x,y,w,h` line per box, 1-based frame and origin.
pub fn format_results(boxes: &[BBox]) -> String {
    let mut out = String::new();
    for (i, b) in boxes.iter().enumerate() {
        out.push_str(&format!(
            "{},{:.3},{:.3},{:.3},{:.3}\n",
            i + 1,
            b.x + 1.0,
            b.y + 1.0,
            b.w,
            b.h
        ));
    }
    out
}

/// `threshold,value` rows under a header line.
pub fn format_curve(thresholds: impl Iterator<Item = f64>, values: &[f64]) -> String {
    let mut out = String::from("threshold,value\n");
    for (t, v) in thresholds.zip(values) {
        out.push_str(&format!("{t},{v}\n"));
    }
    out
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".into(),
    });
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
