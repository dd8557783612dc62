//! Synthetic scene generation with exact ground truth.
//!
//! Scenes are stacks of textured fronto-parallel planes at fixed world
//! depths, rendered by ray casting from an analytic camera trajectory.
//! Because the trajectory is a closed-form function of time, depth maps,
//! poses and inertial measurements are all exact (up to configured sensor
//! noise), which is what the end-to-end consistency tests lean on.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{save_image, write_depth_bin, CalibSpec, DatasetConfig, ImageTensor, SplitLists};
use crate::error::{Error, Result};
use crate::geometry::{so3_log, CameraIntrinsics, SE3Matrix};
use crate::Real;

/// Smooth per-channel texture: a small bank of 2D sinusoids over world x/y.
#[derive(Debug, Clone)]
pub struct TextureSpec {
    /// Per channel: (amplitude, freq_x, freq_y, phase), frequencies in
    /// cycles per world unit.
    pub waves: [Vec<(Real, Real, Real, Real)>; 3],
    /// Base brightness per channel, in `[-1, 1]`.
    pub base: [Real; 3],
}

impl TextureSpec {
    /// Random low-frequency texture. Amplitudes are budgeted so values stay
    /// inside `[-1, 1]` without clipping.
    pub fn smooth(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut waves: [Vec<(Real, Real, Real, Real)>; 3] = Default::default();
        let mut base = [0.0; 3];
        for c in 0..3 {
            base[c] = rng.random_range(-0.25..0.25);
            let n = 3;
            for _ in 0..n {
                let amp = rng.random_range(0.08..0.22);
                let f = rng.random_range(0.05..0.25);
                let ang: Real = rng.random_range(0.0..PI);
                let phase = rng.random_range(0.0..2.0 * PI);
                waves[c].push((amp, f * ang.cos(), f * ang.sin(), phase));
            }
        }
        TextureSpec { waves, base }
    }

    pub fn value(&self, channel: usize, x: Real, y: Real) -> Real {
        let mut v = self.base[channel];
        for (a, fx, fy, p) in &self.waves[channel] {
            v += a * (2.0 * PI * (fx * x + fy * y) + p).sin();
        }
        v.clamp(-1.0, 1.0)
    }
}

/// Textured plane `z_world = depth`, optionally bounded in world x/y.
#[derive(Debug, Clone)]
pub struct PlaneLayer {
    pub depth: Real,
    /// (x_min, x_max, y_min, y_max); `None` extends to infinity. The
    /// farthest layer must be unbounded so every ray hits something.
    pub extent: Option<(Real, Real, Real, Real)>,
    pub texture: TextureSpec,
}

/// Closed-form camera trajectories. All yield the camera-to-world pose at
/// time `t` seconds, equal to the identity at `t = 0`.
#[derive(Debug, Clone)]
pub enum TrajectorySpec {
    Static,
    /// Constant velocity, no rotation.
    Line { velocity: [Real; 3] },
    /// Sinusoidal translation along x: `A * sin(2*pi*t / period)`.
    Sway { amplitude: Real, period: Real },
    /// Circular arc in the x-z plane with tangential yaw; angular rate
    /// `2*pi / period`, centripetal acceleration `radius * rate^2`.
    Circle { radius: Real, period: Real },
}

impl TrajectorySpec {
    pub fn pose_at(&self, t: Real) -> SE3Matrix<Real> {
        match *self {
            TrajectorySpec::Static => SE3Matrix::identity(),
            TrajectorySpec::Line { velocity: v } => SE3Matrix::from_parts(
                identity3(),
                [v[0] * t, v[1] * t, v[2] * t],
            ),
            TrajectorySpec::Sway { amplitude, period } => SE3Matrix::from_parts(
                identity3(),
                [amplitude * (2.0 * PI * t / period).sin(), 0.0, 0.0],
            ),
            TrajectorySpec::Circle { radius, period } => {
                let th = 2.0 * PI * t / period;
                let (s, c) = th.sin_cos();
                // Yaw about y by th keeps the optical axis tangent.
                let r = [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]];
                SE3Matrix::from_parts(r, [radius * s, 0.0, radius * (1.0 - c)])
            }
        }
    }

    /// World-frame linear acceleration, by central second difference on the
    /// analytic position. Step 1e-4 s keeps the error far below sensor
    /// noise for the trajectory families above.
    pub fn accel_world(&self, t: Real) -> [Real; 3] {
        let h = 1e-4;
        let p = |tt: Real| self.pose_at(tt).translation();
        let (a, b, c) = (p(t - h), p(t), p(t + h));
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = (a[i] - 2.0 * b[i] + c[i]) / (h * h);
        }
        out
    }

    /// Body-frame angular velocity via the matrix logarithm of a small
    /// rotation increment.
    pub fn gyro_body(&self, t: Real) -> [Real; 3] {
        let h = 1e-4;
        let ra = self.pose_at(t - h).rotation();
        let rb = self.pose_at(t + h).rotation();
        let mut rel = [[0.0; 3]; 3];
        // rel = ra^T * rb
        for i in 0..3 {
            for j in 0..3 {
                for (k, rak) in ra.iter().enumerate() {
                    rel[i][j] += rak[i] * rb[k][j];
                }
            }
        }
        let w = so3_log(&rel);
        [w[0] / (2.0 * h), w[1] / (2.0 * h), w[2] / (2.0 * h)]
    }
}

fn identity3() -> [[Real; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// Complete recipe for a rendered sequence.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub name: String,
    pub layers: Vec<PlaneLayer>,
    pub camera: CameraIntrinsics<Real>,
    pub motion: TrajectorySpec,
    pub n_frames: usize,
    pub frame_hz: Real,
    pub imu_hz: Real,
    /// Standard deviation of additive white noise per accelerometer axis.
    pub accel_noise: Real,
    pub gyro_noise: Real,
    /// Constant measurement biases.
    pub accel_bias: [Real; 3],
    pub gyro_bias: [Real; 3],
    /// World gravity vector; default points along +y (y is down).
    pub gravity: [Real; 3],
    pub seed: u64,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 3 {
            return Err(Error::invalid("a scene needs at least 3 frames"));
        }
        if self.layers.is_empty() {
            return Err(Error::invalid("a scene needs at least one layer"));
        }
        let far = self
            .layers
            .iter()
            .max_by(|a, b| a.depth.partial_cmp(&b.depth).expect("finite depths"))
            .expect("non-empty");
        if far.extent.is_some() {
            return Err(Error::invalid("the farthest layer must be unbounded"));
        }
        if !(self.frame_hz > 0.0 && self.imu_hz > 0.0) {
            return Err(Error::invalid("rates must be positive"));
        }
        self.camera.validate()?;
        Ok(())
    }

    /// Frame timestamps, seconds.
    pub fn frame_times(&self) -> Vec<Real> {
        (0..self.n_frames).map(|i| i as Real / self.frame_hz).collect()
    }

    /// Camera-to-world pose per frame.
    pub fn poses(&self) -> Vec<SE3Matrix<Real>> {
        self.frame_times().iter().map(|t| self.motion.pose_at(*t)).collect()
    }

    /// Noiseless specific-force reading at time `t`:
    /// body-frame (linear acceleration minus gravity).
    pub fn accel_clean(&self, t: Real) -> [Real; 3] {
        let r = self.motion.pose_at(t).rotation();
        let aw = self.motion.accel_world(t);
        let mut out = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i] += r[j][i] * (aw[j] - self.gravity[j]);
            }
        }
        out
    }

    /// Simulated IMU rows (t, ax, ay, az, wx, wy, wz) over the whole
    /// sequence span, deterministic in the scene seed.
    pub fn imu_rows(&self) -> Vec<[Real; 7]> {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed ^ 0x1f2e_3d4c_5b6a_7988);
        let t_end = (self.n_frames - 1) as Real / self.frame_hz;
        let n = (t_end * self.imu_hz).round() as usize;
        let mut rows = Vec::with_capacity(n + 1);
        for j in 0..=n {
            let t = j as Real / self.imu_hz;
            let a = self.accel_clean(t);
            let w = self.motion.gyro_body(t);
            let mut row = [t, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
            for i in 0..3 {
                let na: Real = StandardNormal.sample(&mut rng);
                let nw: Real = StandardNormal.sample(&mut rng);
                row[1 + i] = a[i] + self.accel_bias[i] + self.accel_noise * na;
                row[4 + i] = w[i] + self.gyro_bias[i] + self.gyro_noise * nw;
            }
            rows.push(row);
        }
        rows
    }

    /// Renders one frame and its exact depth map by intersecting each pixel
    /// ray with the nearest layer.
    pub fn render(&self, pose: &SE3Matrix<Real>) -> (ImageTensor, Array2<Real>) {
        let k = &self.camera;
        let (h, w) = (k.height, k.width);
        let r = pose.rotation();
        let c = pose.translation();
        let mut img = Array3::zeros((3, h, w));
        let mut depth = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                // Camera-frame ray with unit z, so the ray parameter equals
                // camera depth.
                let dx = (j as Real - k.cx) / k.fx;
                let dy = (i as Real - k.cy) / k.fy;
                let dir = [
                    r[0][0] * dx + r[0][1] * dy + r[0][2],
                    r[1][0] * dx + r[1][1] * dy + r[1][2],
                    r[2][0] * dx + r[2][1] * dy + r[2][2],
                ];
                let mut best: Option<(Real, usize, Real, Real)> = None;
                for (li, layer) in self.layers.iter().enumerate() {
                    if dir[2].abs() < 1e-12 {
                        continue;
                    }
                    let lam = (layer.depth - c[2]) / dir[2];
                    if lam <= 1e-9 {
                        continue;
                    }
                    let x = c[0] + lam * dir[0];
                    let y = c[1] + lam * dir[1];
                    if let Some((x0, x1, y0, y1)) = layer.extent {
                        if x < x0 || x > x1 || y < y0 || y > y1 {
                            continue;
                        }
                    }
                    if best.map_or(true, |(bl, _, _, _)| lam < bl) {
                        best = Some((lam, li, x, y));
                    }
                }
                let (lam, li, x, y) = best.expect("unbounded far layer catches every ray");
                depth[[i, j]] = lam;
                for ch in 0..3 {
                    img[[ch, i, j]] = self.layers[li].texture.value(ch, x, y);
                }
            }
        }
        (img, depth)
    }
}

/// A small scene that exercises parallax on a laptop-scale budget:
/// three bounded near planes over an unbounded backdrop, constant-velocity
/// sideways motion.
pub fn desk_default(seed: u64) -> SyntheticScene {
    let camera = CameraIntrinsics::new(26.0, 26.0, 23.5, 15.5, 48, 32)
        .expect("static intrinsics are valid");
    SyntheticScene {
        name: "synth0".into(),
        layers: vec![
            PlaneLayer {
                depth: 2.0,
                extent: Some((-1.0, 0.2, -0.8, 0.4)),
                texture: TextureSpec::smooth(seed.wrapping_add(1)),
            },
            PlaneLayer {
                depth: 3.5,
                extent: Some((-0.4, 2.0, -0.5, 1.2)),
                texture: TextureSpec::smooth(seed.wrapping_add(2)),
            },
            PlaneLayer {
                depth: 6.0,
                extent: Some((-3.0, 1.0, -2.0, 0.5)),
                texture: TextureSpec::smooth(seed.wrapping_add(3)),
            },
            PlaneLayer {
                depth: 12.0,
                extent: None,
                texture: TextureSpec::smooth(seed.wrapping_add(4)),
            },
        ],
        camera,
        motion: TrajectorySpec::Line { velocity: [0.5, 0.0, 0.0] },
        n_frames: 12,
        frame_hz: 10.0,
        imu_hz: 100.0,
        accel_noise: 0.02,
        gyro_noise: 0.002,
        accel_bias: [0.01, -0.02, 0.015],
        gyro_bias: [0.001, 0.002, -0.001],
        gravity: [0.0, 9.81, 0.0],
        seed,
    }
}

/// Renders a scene to the on-disk sequence layout and writes `dataset.json`
/// at the root. Returns the saved configuration.
pub fn generate_synthetic(scene: &SyntheticScene, root: &Path) -> Result<DatasetConfig> {
    scene.validate()?;
    let dir = root.join(&scene.name);
    std::fs::create_dir_all(dir.join("image_2"))?;
    std::fs::create_dir_all(dir.join("depth"))?;

    let times = scene.frame_times();
    let poses = scene.poses();
    for (i, pose) in poses.iter().enumerate() {
        let (img, depth) = scene.render(pose);
        save_image(&dir.join("image_2").join(format!("{i:06}.png")), &img)?;
        write_depth_bin(&dir.join("depth").join(format!("{i:06}.bin")), &depth)?;
    }

    let mut text = String::new();
    for t in &times {
        text.push_str(&format!("{t:.9}\n"));
    }
    std::fs::write(dir.join("times.txt"), text)?;

    let mut text = String::new();
    for row in scene.imu_rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    std::fs::write(dir.join("imu.txt"), text)?;

    let k = &scene.camera;
    std::fs::write(dir.join("calib.txt"), format!("{} {} {} {}\n", k.fx, k.fy, k.cx, k.cy))?;

    let mut text = String::new();
    for p in &poses {
        let vals: Vec<String> = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| format!("{:.12}", p.m[r][c]))
            .collect();
        text.push_str(&vals.join(" "));
        text.push('\n');
    }
    std::fs::write(dir.join("poses.txt"), text)?;

    let rows_per_frame = (scene.imu_hz / scene.frame_hz).round() as usize;
    let config = DatasetConfig {
        root: root.to_path_buf(),
        image_size: (k.height, k.width),
        imu_rows: 2 * rows_per_frame,
        calib: Some(CalibSpec { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy }),
        splits: SplitLists { train: vec![scene.name.clone()], val: vec![], test: vec![] },
    };
    config.save(&root.join("dataset.json"))?;
    Ok(config)
}
