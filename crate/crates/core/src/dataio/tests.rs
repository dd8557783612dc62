use std::path::PathBuf;

use ndarray::{Array2, Array3};

use super::synth::{
    desk_default, generate_synthetic, PlaneLayer, SyntheticScene, TextureSpec, TrajectorySpec,
};
use super::*;
use crate::geometry::{
    bilinear_sample, inverse_warp, matrix_to_pose, relative_transform, DepthMap,
};
use crate::Real;

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("create temp dir")
}

#[test]
fn depth_bin_round_trip() {
    let dir = tempdir();
    let path = dir.path().join("d.bin");
    let depth = Array2::from_shape_fn((5, 7), |(i, j)| 0.25 + i as Real * 1.5 + j as Real * 0.125);
    write_depth_bin(&path, &depth).unwrap();
    let back = read_depth_bin(&path).unwrap();
    assert_eq!(back.dim(), (5, 7));
    // Values survive the f32 narrowing exactly because they are dyadic.
    assert_eq!(back, depth);
}

#[test]
fn depth_bin_rejects_truncation() {
    let dir = tempdir();
    let path = dir.path().join("d.bin");
    let depth = Array2::from_elem((4, 4), 1.0);
    write_depth_bin(&path, &depth).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_depth_bin(&path).is_err());
}

#[test]
fn config_rejects_overlapping_splits() {
    let mut cfg = DatasetConfig::new(PathBuf::from("/tmp/x"));
    cfg.splits.train = vec!["a".into(), "b".into()];
    cfg.splits.test = vec!["b".into()];
    assert!(cfg.validate().is_err());
    cfg.splits.test = vec!["c".into()];
    assert!(cfg.validate().is_ok());
}

#[test]
fn config_defaults_and_round_trip() {
    let dir = tempdir();
    let mut cfg = DatasetConfig::new(dir.path().to_path_buf());
    assert_eq!(cfg.image_size, (256, 832));
    assert_eq!(cfg.imu_rows, 20);
    cfg.splits.train = vec!["s".into()];
    let path = dir.path().join("dataset.json");
    cfg.save(&path).unwrap();
    let back = DatasetConfig::load(&path).unwrap();
    assert_eq!(back.image_size, cfg.image_size);
    assert_eq!(back.imu_rows, cfg.imu_rows);
    assert_eq!(back.splits.train, cfg.splits.train);
}

#[test]
fn imu_window_selection_padding_and_flags() {
    // Rows every 0.01 s from t = 0.
    let rows: Vec<[Real; 7]> = (0..40)
        .map(|j| {
            let t = j as Real * 0.01;
            [t, 1.0 + t, 2.0, 3.0, 4.0, 5.0, 6.0]
        })
        .collect();

    // Aligned window: [0.1, 0.3) holds exactly rows 10..29.
    let w = imu_window(&rows, 0.1, 0.3, 20);
    assert_eq!(w.rows(), 20);
    assert_eq!(w.real_rows, 20);
    assert!(!w.padded);
    assert!((w.samples[[0, 0]] - 1.1).abs() < 1e-12);
    assert!((w.samples[[19, 0]] - 1.29).abs() < 1e-12);

    // Short window: 16 real rows, tail zeroed, flag set.
    let w = imu_window(&rows, 0.1, 0.26, 20);
    assert_eq!(w.real_rows, 16);
    assert!(w.padded);
    for i in 16..20 {
        for j in 0..6 {
            assert_eq!(w.samples[[i, j]], 0.0);
        }
    }

    // Overfull window truncates to n and flags it.
    let w = imu_window(&rows, 0.0, 0.4, 20);
    assert_eq!(w.rows(), 20);
    assert_eq!(w.real_rows, 20);
    assert!(w.padded);

    // The half-open span keeps the left endpoint, drops the right.
    let w = imu_window(&rows, 0.1, 0.3, 40);
    assert!((w.samples[[0, 0]] - 1.1).abs() < 1e-12);
    assert_eq!(w.real_rows, 20);
}

#[test]
fn generated_sequence_loads_aligned() {
    let dir = tempdir();
    let scene = desk_default(7);
    let cfg = generate_synthetic(&scene, dir.path()).unwrap();
    assert_eq!(cfg.imu_rows, 20);
    let ds = Dataset::open(cfg).unwrap();

    assert_eq!(ds.frames("synth0").unwrap(), 12);
    assert_eq!(ds.snippet_indices("synth0").unwrap(), (1..=10).collect::<Vec<_>>());

    let (snippet, window) = ds.load_snippet("synth0", 1).unwrap();
    assert_eq!(snippet.target.dim(), (3, 32, 48));
    assert_eq!(snippet.sources[0].dim(), (3, 32, 48));
    snippet.validate().unwrap();
    assert!((snippet.timestamps[0] - 0.0).abs() < 1e-9);
    assert!((snippet.timestamps[1] - 0.1).abs() < 1e-9);
    assert!((snippet.timestamps[2] - 0.2).abs() < 1e-9);

    // 100 Hz IMU over a 0.2 s span lands exactly 20 rows, no padding.
    assert_eq!(window.rows(), 20);
    assert_eq!(window.real_rows, 20);
    assert!(!window.padded);
    assert!(window.samples.iter().all(|v| v.is_finite()));

    // Every window timestamp lies inside the closed frame span.
    let meta = ds.meta("synth0").unwrap();
    for r in meta.imu.iter().filter(|r| r[0] >= 0.0 && r[0] < 0.2) {
        assert!(r[0] >= snippet.timestamps[0] && r[0] <= snippet.timestamps[2]);
    }

    // Native resolution: embedded calibration passes through unscaled.
    assert!((meta.intrinsics.fx - 26.0).abs() < 1e-12);
    assert!((meta.intrinsics.cx - 23.5).abs() < 1e-12);

    // Poses ship with synthetic data and parse per frame.
    assert_eq!(meta.poses.as_ref().unwrap().len(), 12);

    let depth = ds.load_depth("synth0", 1).unwrap();
    assert_eq!(depth.dim(), (32, 48));
    assert!(depth.iter().all(|d| *d > 0.0));
}

#[test]
fn three_frame_scene_is_unpadded() {
    let dir = tempdir();
    let mut scene = desk_default(3);
    scene.n_frames = 3;
    let cfg = generate_synthetic(&scene, dir.path()).unwrap();
    let ds = Dataset::open(cfg).unwrap();
    let (_, window) = ds.load_snippet("synth0", 1).unwrap();
    assert_eq!(window.real_rows, 20);
    assert!(!window.padded);
}

#[test]
fn loader_rescales_intrinsics_with_image_size() {
    let dir = tempdir();
    let scene = desk_default(11);
    let mut cfg = generate_synthetic(&scene, dir.path()).unwrap();
    cfg.image_size = (16, 24);
    let ds = Dataset::open(cfg).unwrap();
    let meta = ds.meta("synth0").unwrap();
    assert!((meta.intrinsics.fx - 13.0).abs() < 1e-12);
    assert!((meta.intrinsics.fy - 13.0).abs() < 1e-12);
    assert!((meta.intrinsics.cx - 11.75).abs() < 1e-12);
    let (snippet, _) = ds.load_snippet("synth0", 2).unwrap();
    assert_eq!(snippet.target.dim(), (3, 16, 24));
}

#[test]
fn calib_file_fallback_is_used_without_embedded_calibration() {
    let dir = tempdir();
    let scene = desk_default(13);
    let mut cfg = generate_synthetic(&scene, dir.path()).unwrap();
    cfg.calib = None;
    let ds = Dataset::open(cfg).unwrap();
    let meta = ds.meta("synth0").unwrap();
    assert!((meta.intrinsics.fx - 26.0).abs() < 1e-9);
}

#[test]
fn missing_sequence_reports_path() {
    let dir = tempdir();
    let mut cfg = DatasetConfig::new(dir.path().to_path_buf());
    cfg.image_size = (8, 8);
    cfg.splits.train = vec!["absent".into()];
    let err = Dataset::open(cfg).unwrap_err();
    assert!(err.to_string().contains("absent"), "error was: {err}");
}

#[test]
fn snippet_needs_both_neighbours() {
    let dir = tempdir();
    let scene = desk_default(5);
    let cfg = generate_synthetic(&scene, dir.path()).unwrap();
    let ds = Dataset::open(cfg).unwrap();
    assert!(ds.load_snippet("synth0", 0).is_err());
    assert!(ds.load_snippet("synth0", 11).is_err());
    assert!(ds.load_snippet("synth0", 10).is_ok());
}

fn textured_snippet(h: usize, w: usize) -> ImageSnippet {
    let tex = TextureSpec::smooth(42);
    let img = |shift: Real| {
        Array3::from_shape_fn((3, h, w), |(c, i, j)| {
            tex.value(c, j as Real * 0.11 + shift, i as Real * 0.13)
        })
    };
    ImageSnippet {
        target: img(0.0),
        sources: [img(-0.3), img(0.3)],
        timestamps: [0.0, 0.1, 0.2],
    }
}

#[test]
fn augment_is_deterministic_and_varied() {
    let snippet = textured_snippet(24, 32);
    let k = CameraIntrinsics::new(20.0, 21.0, 15.5, 11.5, 32, 24).unwrap();
    let (a1, k1, p1) = augment(&snippet, &k, 99);
    let (a2, k2, p2) = augment(&snippet, &k, 99);
    assert_eq!(p1, p2);
    assert_eq!(a1.target, a2.target);
    assert_eq!(a1.sources[0], a2.sources[0]);
    assert!((k1.fx - k2.fx).abs() == 0.0 && (k1.cx - k2.cx).abs() == 0.0);

    let params: Vec<AugmentParams> = (0..12).map(|s| augment(&snippet, &k, s).2).collect();
    assert!(params.iter().any(|p| p.flip) && params.iter().any(|p| !p.flip));
    assert!(params.iter().any(|p| p.dx != params[0].dx || p.scale_x != params[0].scale_x));
}

#[test]
fn augment_scales_focals_by_applied_factor() {
    let snippet = textured_snippet(24, 32);
    let k = CameraIntrinsics::new(20.0, 21.0, 15.5, 11.5, 32, 24).unwrap();
    for seed in 0..8 {
        let (_, kk, p) = augment(&snippet, &k, seed);
        assert_eq!(kk.fx, k.fx * p.scale_x);
        assert_eq!(kk.fy, k.fy * p.scale_y);
    }
}

/// Projecting a world point with the adjusted intrinsics lands where the
/// pixel transform moved the original projection.
#[test]
fn augment_reprojection_is_consistent() {
    let snippet = textured_snippet(24, 32);
    let (w, h) = (32usize, 24usize);
    let k = CameraIntrinsics::new(20.0, 21.0, 15.5, 11.5, w, h).unwrap();
    for seed in 0..10u64 {
        let (_, kk, p) = augment(&snippet, &k, seed);
        for &(x, y, z) in &[(0.1, 0.05, 2.0), (-0.4, 0.2, 3.0), (0.6, -0.3, 5.0)] {
            let u = k.fx * x / z + k.cx;
            let v = k.fy * y / z + k.cy;
            let (ue, ve) = p.map_pixel(u, v, w);
            // Mirroring flips the world x axis along with the image.
            let xs = if p.flip { -x } else { x };
            let ua = kk.fx * xs / z + kk.cx;
            let va = kk.fy * y / z + kk.cy;
            assert!(
                (ua - ue).abs() <= 0.5 && (va - ve).abs() <= 0.5,
                "seed {seed}: ({ua:.3},{va:.3}) vs ({ue:.3},{ve:.3})"
            );
        }
    }
}

/// Augmented pixels equal the original image sampled at the inverse-mapped
/// coordinates, so the transform reported is the transform applied.
#[test]
fn augment_content_matches_reported_transform() {
    let snippet = textured_snippet(24, 32);
    let (w, h) = (32usize, 24usize);
    let k = CameraIntrinsics::new(20.0, 21.0, 15.5, 11.5, w, h).unwrap();
    for seed in [1u64, 4, 9] {
        let (aug, _, p) = augment(&snippet, &k, seed);
        let u = Array2::from_shape_fn((h, w), |(_, j)| {
            let jj = if p.flip { w - 1 - j } else { j } as Real;
            (((jj + p.dx as Real) + 0.5) / p.scale_x - 0.5).clamp(0.0, (w - 1) as Real)
        });
        let v = Array2::from_shape_fn((h, w), |(i, _)| {
            (((i as Real + p.dy as Real) + 0.5) / p.scale_y - 0.5).clamp(0.0, (h - 1) as Real)
        });
        let (expect, mask) = bilinear_sample(&snippet.target, &u, &v);
        assert!(mask.iter().all(|m| *m));
        let max_err = aug
            .target
            .iter()
            .zip(expect.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max);
        assert!(max_err < 1e-9, "seed {seed}: max pixel error {max_err}");
    }
}

#[test]
fn flip_is_an_involution() {
    let snippet = textured_snippet(10, 14);
    let once = flip_horizontal(&snippet.target);
    let twice = flip_horizontal(&once);
    assert_eq!(twice, snippet.target);
    assert_ne!(once, snippet.target);
}

fn quiet_scene(motion: TrajectorySpec) -> SyntheticScene {
    let mut scene = desk_default(0);
    scene.motion = motion;
    scene.accel_noise = 0.0;
    scene.gyro_noise = 0.0;
    scene.accel_bias = [0.0; 3];
    scene.gyro_bias = [0.0; 3];
    scene
}

#[test]
fn static_scene_measures_gravity_only() {
    let scene = quiet_scene(TrajectorySpec::Static);
    for row in scene.imu_rows() {
        assert!((row[1] - 0.0).abs() < 1e-6);
        assert!((row[2] - (-9.81)).abs() < 1e-6);
        assert!((row[3] - 0.0).abs() < 1e-6);
        for wv in &row[4..7] {
            assert!(wv.abs() < 1e-9);
        }
    }
    // Identical poses render identical frames.
    let poses = scene.poses();
    let (img0, d0) = scene.render(&poses[0]);
    let (img5, d5) = scene.render(&poses[5]);
    assert_eq!(img0, img5);
    assert_eq!(d0, d5);
}

#[test]
fn constant_velocity_measures_gravity_only() {
    let scene = quiet_scene(TrajectorySpec::Line { velocity: [0.4, -0.1, 0.2] });
    for row in scene.imu_rows() {
        assert!((row[1]).abs() < 1e-5);
        assert!((row[2] - (-9.81)).abs() < 1e-5);
        assert!((row[3]).abs() < 1e-5);
        for wv in &row[4..7] {
            assert!(wv.abs() < 1e-7);
        }
    }
}

#[test]
fn circular_motion_matches_analytic_kinematics() {
    let (radius, period) = (0.5, 2.0);
    let motion = TrajectorySpec::Circle { radius, period };
    let omega = 2.0 * std::f64::consts::PI / period;
    for &t in &[0.05, 0.3, 0.77, 1.4] {
        let a = motion.accel_world(t);
        let mag = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        assert!(
            (mag - radius * omega * omega).abs() < 1e-3,
            "|a|={mag}, want {}",
            radius * omega * omega
        );
        let w = motion.gyro_body(t);
        assert!(w[0].abs() < 1e-6 && w[2].abs() < 1e-6);
        assert!((w[1] - omega).abs() < 1e-5, "gyro y {} vs {omega}", w[1]);
    }
}

/// End-to-end ground-truth self-consistency: warping a rendered source view
/// with the exact depth map and relative pose reproduces the target frame.
#[test]
fn warp_with_ground_truth_reconstructs_target() {
    let dir = tempdir();
    let mut scene = quiet_scene(TrajectorySpec::Line { velocity: [0.3, 0.05, 0.0] });
    // One unbounded plane: no depth discontinuities, so every valid pixel
    // must reconstruct up to 8-bit quantization and interpolation error.
    scene.layers = vec![PlaneLayer {
        depth: 4.0,
        extent: None,
        texture: TextureSpec::smooth(21),
    }];
    scene.n_frames = 4;
    let cfg = generate_synthetic(&scene, dir.path()).unwrap();
    let ds = Dataset::open(cfg).unwrap();
    let (snippet, _) = ds.load_snippet("synth0", 1).unwrap();
    let meta = ds.meta("synth0").unwrap();
    let poses = meta.poses.as_ref().unwrap();
    let depth = DepthMap::new(ds.load_depth("synth0", 1).unwrap()).unwrap();

    for (s_idx, source) in [(0usize, &snippet.sources[0]), (2, &snippet.sources[1])] {
        let rel = relative_transform(&poses[1], &poses[s_idx]);
        let pose = matrix_to_pose(&rel);
        let (warped, mask) = inverse_warp(source, &depth, &pose, &meta.intrinsics).unwrap();
        let mut err = 0.0;
        let mut n = 0usize;
        for c in 0..3 {
            for i in 0..32 {
                for j in 0..48 {
                    if mask[[i, j]] {
                        err += (warped[[c, i, j]] - snippet.target[[c, i, j]]).abs();
                        n += 1;
                    }
                }
            }
        }
        let mae = err / n as Real;
        let valid = mask.iter().filter(|m| **m).count();
        assert!(valid > 32 * 48 / 2, "source {s_idx}: only {valid} valid pixels");
        assert!(mae < 1e-2, "source {s_idx}: masked MAE {mae}");
    }
}
