//! Command-line front end: `track`, `eval` and `overlay`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::bench::{
    compute_curves, format_curve, format_results, list_frames, load_frame, load_sequence, read_boxes,
    read_results, write_atomic, BBox, MetricCurves,
};
use crate::error::{Error, Result};
use crate::tracker::{Tracker, TrackerConfig};

pub const THREADS_ENV: &str = "PATCHTRACK_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

const RESULT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
const GT_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
const LINE_WIDTH: usize = 2;

#[derive(Debug, Parser)]
#[command(name = "patchtrack", version, about = "Patch-based joint sparse tracker")]
pub struct Cli {
    /// Worker threads for particle scoring; 0 picks automatically.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Track a target through an image sequence.
    Track(TrackArgs),
    /// Score a results file against ground truth.
    Eval(EvalArgs),
    /// Draw result (and ground-truth) boxes onto the frames.
    Overlay(OverlayArgs),
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Sequence directory (frames in DIR/img or DIR).
    #[arg(long)]
    pub seq: PathBuf,
    /// Initial box `x,y,w,h`, 1-based like ground-truth files.
    #[arg(long, value_parser = parse_init, conflicts_with = "gt_init", required_unless_present = "gt_init")]
    pub init: Option<BBox>,
    /// Take the initial box from the first ground-truth line.
    #[arg(long)]
    pub gt_init: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file overriding tracker parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub seq: PathBuf,
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_init(s: &str) -> std::result::Result<BBox, String> {
    let boxes = crate::bench::parse_boxes(s).map_err(|e| e.to_string())?;
    match boxes.as_slice() {
        [b] if b.w > 0.0 && b.h > 0.0 => Ok(*b),
        _ => Err(format!("expected one box x,y,w,h with positive size, got {s:?}")),
    }
}

/// Written at the end of a `track` run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub sequence: PathBuf,
    pub config: Option<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,
    pub frames: usize,
    /// Wall-clock milliseconds per tracked frame (the first frame only initializes).
    pub ms_per_frame: Vec<f64>,
    pub fps: f64,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::Io(_) | Error::Image(_) | Error::Parse { .. } | Error::Dimension(_) => EXIT_IO,
        Error::Numeric { .. } | Error::InvalidState(_) | Error::Contract(_) => EXIT_NUMERIC,
    }
}

/// Thread count from the flag, then the environment; `None` leaves rayon's default.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a thread count, got {v:?}")))?,
            Err(_) => 0,
        },
    };
    Ok((n > 0).then_some(n))
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = thread_count(cli.threads).and_then(|threads| {
        if let Some(n) = threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        }
        match &cli.command {
            Command::Track(a) => cmd_track(a).map(|_| ()),
            Command::Eval(a) => cmd_eval(a).map(|c| println!("{}", c.summary())),
            Command::Overlay(a) => cmd_overlay(a).map(|_| ()),
        }
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<TrackerConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrackerConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn frame_error(frame: usize, e: Error) -> Error {
    match e {
        Error::Numeric { stage, detail } => Error::Numeric {
            stage,
            detail: format!("frame {frame}: {detail}"),
        },
        Error::InvalidState(m) => Error::InvalidState(format!("frame {frame}: {m}")),
        Error::Contract(m) => Error::Contract(format!("frame {frame}: {m}")),
        other => other,
    }
}

pub fn cmd_track(args: &TrackArgs) -> Result<RunManifest> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let (frames, init) = if args.gt_init {
        let seq = load_sequence(&args.seq)?;
        let first = *seq
            .ground_truth
            .first()
            .ok_or_else(|| Error::Config("ground truth is empty".into()))?;
        (seq.frames, first)
    } else {
        let init = args.init.ok_or_else(|| Error::Config("--init or --gt-init is required".into()))?;
        (list_frames(&args.seq)?, init)
    };
    if frames.is_empty() {
        return Err(Error::Config(format!("no frames in {}", args.seq.display())));
    }
    fs::create_dir_all(&args.out)?;

    let first = load_frame(&frames[0])?;
    let mut tracker = Tracker::init(&first, init.to_array(), cfg.clone()).map_err(|e| frame_error(1, e))?;
    let mut boxes = vec![init];
    let mut diagnostics = String::from("frame,likelihood,gamma,clear_small,clear_large,dictionary_gate,ms\n");
    let mut ms_per_frame = Vec::with_capacity(frames.len());
    for (i, path) in frames.iter().enumerate().skip(1) {
        let frame = load_frame(path)?;
        let start = Instant::now();
        let record = tracker.step(&frame).map_err(|e| frame_error(i + 1, e))?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        log::info!("frame {} ms {ms:.0} likelihood {:.4}", i + 1, record.likelihood);
        ms_per_frame.push(ms);
        boxes.push(BBox::from_array(record.bbox));
        diagnostics.push_str(&format!(
            "{},{},{},{},{},{},{ms:.3}\n",
            i + 1,
            record.likelihood,
            record.gamma,
            record.clear_fractions.0,
            record.clear_fractions.1,
            record.dictionary_gate
        ));
    }
    write_atomic(&args.out.join("results.txt"), format_results(&boxes).as_bytes())?;
    write_atomic(&args.out.join("diagnostics.csv"), diagnostics.as_bytes())?;
    let total_s: f64 = ms_per_frame.iter().sum::<f64>() / 1e3;
    let manifest = RunManifest {
        sequence: args.seq.clone(),
        config: args.config.clone(),
        output: args.out.clone(),
        seed: cfg.seed,
        frames: frames.len(),
        fps: if total_s > 0.0 { ms_per_frame.len() as f64 / total_s } else { 0.0 },
        ms_per_frame,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Io(e.into()))?;
    write_atomic(&args.out.join("manifest.json"), &json)?;
    Ok(manifest)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricCurves> {
    let track = read_results(&args.results)?;
    let gt = read_boxes(&args.gt)?;
    let curves = compute_curves(&track, &gt)?;
    fs::create_dir_all(&args.out)?;
    write_atomic(
        &args.out.join("precision.csv"),
        format_curve(MetricCurves::precision_thresholds(), &curves.precision).as_bytes(),
    )?;
    write_atomic(
        &args.out.join("success.csv"),
        format_curve(MetricCurves::success_thresholds(), &curves.success).as_bytes(),
    )?;
    write_atomic(&args.out.join("summary.txt"), format!("{}\n", curves.summary()).as_bytes())?;
    Ok(curves)
}

/// Pixels of a `width`-thick outline of `b`, clipped to the image. The outline
/// lies inside the box rounded to whole pixels.
pub fn rectangle_pixels(b: &BBox, image_w: usize, image_h: usize, width: usize) -> Vec<(usize, usize)> {
    let x0 = b.x.round() as i64;
    let y0 = b.y.round() as i64;
    let x1 = (b.x + b.w).round() as i64 - 1;
    let y1 = (b.y + b.h).round() as i64 - 1;
    let t = width as i64;
    let mut out = Vec::new();
    let ys = y0.max(0)..=y1.min(image_h as i64 - 1);
    for y in ys {
        for x in x0.max(0)..=x1.min(image_w as i64 - 1) {
            if x < x0 + t || x > x1 - t || y < y0 + t || y > y1 - t {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

/// Writes one PNG per frame named after the frame; returns the paths written.
pub fn cmd_overlay(args: &OverlayArgs) -> Result<Vec<PathBuf>> {
    let frames = list_frames(&args.seq)?;
    let results = read_results(&args.results)?;
    let gt = args.gt.as_deref().map(read_boxes).transpose()?;
    if results.len() > frames.len() {
        return Err(Error::Dimension(format!(
            "{} result boxes for {} frames",
            results.len(),
            frames.len()
        )));
    }
    fs::create_dir_all(&args.out)?;
    let mut written = Vec::with_capacity(results.len());
    for (i, (path, b)) in frames.iter().zip(&results).enumerate() {
        let mut img: RgbImage = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if let Some(g) = gt.as_ref().and_then(|g| g.get(i)) {
            for (x, y) in rectangle_pixels(g, w, h, LINE_WIDTH) {
                img.put_pixel(x as u32, y as u32, GT_COLOR);
            }
        }
        for (x, y) in rectangle_pixels(b, w, h, LINE_WIDTH) {
            img.put_pixel(x as u32, y as u32, RESULT_COLOR);
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let out = args.out.join(format!("{stem}.png"));
        img.save(&out).map_err(|e| Error::Image(format!("{}: {e}", out.display())))?;
        written.push(out);
    }
    Ok(written)
}
