use std::fs;
use std::path::Path;

use patchtrack::bench::{load_sequence, read_results, BBox};
use patchtrack::cli::{cmd_eval, cmd_overlay, cmd_track, rectangle_pixels, EvalArgs, OverlayArgs, TrackArgs};
use patchtrack::synthetic::{generate, SyntheticConfig};

/// Writes a short synthetic clip as `dir/img/NNNN.png` plus a 1-based ground truth.
fn write_sequence(dir: &Path, frames: usize) {
    let seq = generate(&SyntheticConfig { frames, ..SyntheticConfig::default() });
    let img = dir.join("img");
    fs::create_dir_all(&img).unwrap();
    let mut gt = String::new();
    for (i, (frame, g)) in seq.frames.iter().zip(&seq.ground_truth).enumerate() {
        image::GrayImage::from_raw(frame.width() as u32, frame.height() as u32, frame.to_luma8())
            .unwrap()
            .save(img.join(format!("{:04}.png", i + 1)))
            .unwrap();
        gt.push_str(&format!("{}\t{}\t{}\t{}\n", g[0] + 1.0, g[1] + 1.0, g[2], g[3]));
    }
    fs::write(dir.join("groundtruth_rect.txt"), gt).unwrap();
}

#[test]
fn sequence_loads_in_numeric_order() {
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), 3);
    // a later frame number with a shorter name must still sort last
    fs::rename(dir.path().join("img/0003.png"), dir.path().join("img/10.png")).unwrap();
    let seq = load_sequence(dir.path()).unwrap();
    assert_eq!(seq.len(), 3);
    assert!(seq.frames[2].ends_with("img/10.png"));
    assert_eq!(seq.ground_truth[0], BBox::new(32.0, 88.0, 64.0, 64.0));
}

#[test]
fn track_eval_and_overlay_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    write_sequence(&seq, 4);
    let config = dir.path().join("fast.toml");
    fs::write(&config, "n_particles = 40\nseed = 3\n").unwrap();
    let out = dir.path().join("run");
    let manifest = cmd_track(&TrackArgs {
        seq: seq.clone(),
        init: None,
        gt_init: true,
        out: out.clone(),
        config: Some(config),
        seed: None,
    })
    .unwrap();
    assert_eq!((manifest.seed, manifest.frames, manifest.ms_per_frame.len()), (3, 4, 3));
    for name in ["results.txt", "diagnostics.csv", "manifest.json"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let results = read_results(&out.join("results.txt")).unwrap();
    assert_eq!(results.len(), 4);
    assert_eq!(results[0], BBox::new(32.0, 88.0, 64.0, 64.0));
    let diagnostics = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert_eq!(diagnostics.lines().count(), 4);

    let eval = dir.path().join("eval");
    let curves = cmd_eval(&EvalArgs {
        results: out.join("results.txt"),
        gt: seq.join("groundtruth_rect.txt"),
        out: eval.clone(),
    })
    .unwrap();
    assert_eq!(curves.dp20, 1.0);
    let precision = fs::read_to_string(eval.join("precision.csv")).unwrap();
    assert_eq!(precision.lines().count(), 52);
    assert_eq!(fs::read_to_string(eval.join("success.csv")).unwrap().lines().count(), 22);
    assert!(fs::read_to_string(eval.join("summary.txt")).unwrap().starts_with("dp20=1.0000"));

    let overlay = dir.path().join("overlay");
    let written = cmd_overlay(&OverlayArgs {
        seq: seq.clone(),
        results: out.join("results.txt"),
        gt: Some(seq.join("groundtruth_rect.txt")),
        out: overlay.clone(),
    })
    .unwrap();
    assert_eq!(written.len(), 4);
    let first = image::open(&written[0]).unwrap().into_rgb8();
    // frame 1 reports the ground-truth box, so the result outline covers it
    for (x, y) in rectangle_pixels(&results[0], 320, 240, 2) {
        assert_eq!(first.get_pixel(x as u32, y as u32).0, [255, 0, 0]);
    }
    assert_ne!(first.get_pixel(60, 120).0, [255, 0, 0]);
}

#[test]
fn overlay_outline_is_the_expected_pixel_set() {
    let px = rectangle_pixels(&BBox::new(2.0, 3.0, 5.0, 4.0), 20, 20, 1);
    let mut want = Vec::new();
    for y in 3..7 {
        for x in 2..7 {
            if x == 2 || x == 6 || y == 3 || y == 6 {
                want.push((x, y));
            }
        }
    }
    assert_eq!(px, want);
}

#[test]
fn track_without_an_init_box_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), 2);
    let err = cmd_track(&TrackArgs {
        seq: dir.path().to_path_buf(),
        init: None,
        gt_init: false,
        out: dir.path().join("out"),
        config: None,
        seed: None,
    })
    .unwrap_err();
    assert_eq!(patchtrack::cli::exit_code(&err), 2);
}
