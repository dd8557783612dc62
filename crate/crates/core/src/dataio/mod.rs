//! Dataset ingestion: sequence layout parsing, 3-frame snippet assembly
//! with aligned IMU windows, training augmentation, and synthetic scene
//! generation with exact ground truth.
//!
//! Sequence layout under a dataset root:
//!
//! ```text
//! <root>/<seq>/image_2/%06d.png     RGB frames
//! <root>/<seq>/times.txt            one timestamp per frame, seconds
//! <root>/<seq>/imu.txt              t ax ay az wx wy wz, one sample per line
//! <root>/<seq>/calib.txt            fx fy cx cy
//! <root>/<seq>/poses.txt            optional, 12 floats per line (row-major
//!                                   3x4 camera-to-world, one per frame)
//! <root>/<seq>/depth/%06d.bin       optional ground-truth depth (see below)
//! ```
//!
//! Depth files are flat binary: `H` and `W` as little-endian `u32`, then
//! `H*W` little-endian `f32` in row-major order.

pub mod synth;

#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, SE3Matrix};
use crate::Real;

/// RGB image as `[3, H, W]` with values in `[-1, 1]`.
pub type ImageTensor = Array3<Real>;

/// Three consecutive frames: the middle one is reconstructed from the outer
/// two during training.
#[derive(Debug, Clone)]
pub struct ImageSnippet {
    pub target: ImageTensor,
    /// Ordered (earlier frame, later frame).
    pub sources: [ImageTensor; 2],
    /// Seconds, strictly increasing, ordered (t-1, t, t+1).
    pub timestamps: [Real; 3],
}

impl ImageSnippet {
    pub fn validate(&self) -> Result<()> {
        if !(self.timestamps[0] < self.timestamps[1] && self.timestamps[1] < self.timestamps[2]) {
            return Err(Error::invalid("snippet timestamps must be strictly increasing"));
        }
        let dim = self.target.dim();
        if self.sources.iter().any(|s| s.dim() != dim) {
            return Err(Error::Shape("snippet frames must share one shape".into()));
        }
        Ok(())
    }
}

/// Inertial samples covering a snippet: exactly `n` rows of
/// (ax, ay, az, wx, wy, wz), zero-padded at the tail when the sequence
/// provides fewer.
#[derive(Debug, Clone)]
pub struct ImuWindow {
    pub samples: Array2<Real>,
    /// Rows holding real measurements; the rest are zeros.
    pub real_rows: usize,
    /// True when padding (or truncation to `n`) occurred.
    pub padded: bool,
}

impl ImuWindow {
    pub fn rows(&self) -> usize {
        self.samples.nrows()
    }
}

/// Train/val/test sequence split; the lists must be disjoint.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct SplitLists {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Pinhole calibration as stored in configuration files, at the native
/// image resolution.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CalibSpec {
    pub fx: Real,
    pub fy: Real,
    pub cx: Real,
    pub cy: Real,
}

/// Dataset-level configuration persisted as `dataset.json` at the root.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetConfig {
    pub root: PathBuf,
    /// (height, width) every loaded frame is brought to.
    pub image_size: (usize, usize),
    /// Fixed row count of every [`ImuWindow`].
    pub imu_rows: usize,
    /// Embedded calibration shared by all sequences; when absent each
    /// sequence's `calib.txt` is read instead.
    #[serde(default)]
    pub calib: Option<CalibSpec>,
    pub splits: SplitLists,
}

impl DatasetConfig {
    /// Configuration with conventional full-scale defaults.
    pub fn new(root: PathBuf) -> Self {
        DatasetConfig {
            root,
            image_size: (256, 832),
            imu_rows: 20,
            calib: None,
            splits: SplitLists::default(),
        }
    }
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 2 || w < 2 {
            return Err(Error::invalid("image size must be at least 2x2"));
        }
        if self.imu_rows == 0 {
            return Err(Error::invalid("imu_rows must be positive"));
        }
        let mut seen = HashSet::new();
        for s in self
            .splits
            .train
            .iter()
            .chain(self.splits.val.iter())
            .chain(self.splits.test.iter())
        {
            if !seen.insert(s.as_str()) {
                return Err(Error::invalid(format!("sequence {s} appears in two splits")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("config serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_file(path)?;
        let cfg: DatasetConfig = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn all_sequences(&self) -> Vec<String> {
        let mut v = self.splits.train.clone();
        v.extend(self.splits.val.iter().cloned());
        v.extend(self.splits.test.iter().cloned());
        v
    }
}

/// Per-sequence data held in memory after opening: everything except pixels.
#[derive(Debug, Clone)]
pub struct SequenceMeta {
    pub times: Vec<Real>,
    /// Rows (t, ax, ay, az, wx, wy, wz) sorted by t.
    pub imu: Vec<[Real; 7]>,
    /// Intrinsics matching the configured image size.
    pub intrinsics: CameraIntrinsics<Real>,
    /// Camera-to-world pose per frame when the sequence ships ground truth.
    pub poses: Option<Vec<SE3Matrix<Real>>>,
}

/// Open dataset: parsed per-sequence metadata plus lazily loaded images.
#[derive(Debug)]
pub struct Dataset {
    config: DatasetConfig,
    sequences: BTreeMap<String, SequenceMeta>,
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

fn parse_floats(line: &str) -> Vec<Real> {
    line.split_whitespace().filter_map(|t| t.parse::<Real>().ok()).collect()
}

impl Dataset {
    pub fn open(config: DatasetConfig) -> Result<Self> {
        config.validate()?;
        let mut sequences = BTreeMap::new();
        for seq in config.all_sequences() {
            let meta = Self::open_sequence(&config, &seq)?;
            sequences.insert(seq, meta);
        }
        Ok(Dataset { config, sequences })
    }

    fn open_sequence(config: &DatasetConfig, seq: &str) -> Result<SequenceMeta> {
        let dir = config.root.join(seq);
        let times_path = dir.join("times.txt");
        let times: Vec<Real> = read_file(&times_path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim().parse::<Real>().map_err(|e| {
                    Error::parse(times_path.display().to_string(), e.to_string())
                })
            })
            .collect::<Result<_>>()?;
        if times.len() < 3 {
            return Err(Error::parse(
                times_path.display().to_string(),
                "sequence needs at least 3 frames",
            ));
        }

        let imu_path = dir.join("imu.txt");
        let mut imu: Vec<[Real; 7]> = Vec::new();
        for line in read_file(&imu_path)?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let f = parse_floats(line);
            if f.len() != 7 {
                return Err(Error::parse(
                    imu_path.display().to_string(),
                    format!("expected 7 values per line, got {}", f.len()),
                ));
            }
            imu.push([f[0], f[1], f[2], f[3], f[4], f[5], f[6]]);
        }
        imu.sort_by(|a, b| a[0].partial_cmp(&b[0]).expect("finite timestamps"));

        let calib = match config.calib {
            Some(c) => c,
            None => {
                let calib_path = dir.join("calib.txt");
                let f = parse_floats(&read_file(&calib_path)?);
                if f.len() < 4 {
                    return Err(Error::parse(
                        calib_path.display().to_string(),
                        "expected fx fy cx cy",
                    ));
                }
                CalibSpec { fx: f[0], fy: f[1], cx: f[2], cy: f[3] }
            }
        };
        // Calibration refers to the stored image resolution; rescale it to
        // the configured loading size.
        let first_image = image_path(&dir, 0);
        let (w0, h0) = png_dimensions(&first_image)?;
        let (h, w) = config.image_size;
        let (sx, sy) = (w as Real / w0 as Real, h as Real / h0 as Real);
        let intrinsics = CameraIntrinsics::new(
            calib.fx * sx,
            calib.fy * sy,
            calib.cx * sx,
            calib.cy * sy,
            w,
            h,
        )?;

        let poses_path = dir.join("poses.txt");
        let poses = if poses_path.exists() {
            let mut list = Vec::new();
            for line in read_file(&poses_path)?.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let f = parse_floats(line);
                if f.len() != 12 {
                    return Err(Error::parse(
                        poses_path.display().to_string(),
                        format!("expected 12 values per line, got {}", f.len()),
                    ));
                }
                let mut m = SE3Matrix::identity();
                for r in 0..3 {
                    for c in 0..4 {
                        m.m[r][c] = f[r * 4 + c];
                    }
                }
                list.push(m);
            }
            if list.len() != times.len() {
                return Err(Error::parse(
                    poses_path.display().to_string(),
                    format!("{} poses for {} frames", list.len(), times.len()),
                ));
            }
            Some(list)
        } else {
            None
        };

        Ok(SequenceMeta { times, imu, intrinsics, poses })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn meta(&self, seq: &str) -> Result<&SequenceMeta> {
        self.sequences
            .get(seq)
            .ok_or_else(|| Error::invalid(format!("unknown sequence {seq}")))
    }

    /// Number of frames in a sequence.
    pub fn frames(&self, seq: &str) -> Result<usize> {
        Ok(self.meta(seq)?.times.len())
    }

    /// Snippet indices valid for training: every frame with both neighbors.
    pub fn snippet_indices(&self, seq: &str) -> Result<Vec<usize>> {
        Ok((1..self.frames(seq)?.saturating_sub(1)).collect())
    }

    /// Loads frame `index` as the target with its two neighbours as sources,
    /// plus the IMU window spanning `[t(index-1), t(index+1))`.
    pub fn load_snippet(&self, seq: &str, index: usize) -> Result<(ImageSnippet, ImuWindow)> {
        let meta = self.meta(seq)?;
        if index == 0 || index + 1 >= meta.times.len() {
            return Err(Error::invalid(format!(
                "snippet index {index} needs both neighbours in 0..{}",
                meta.times.len()
            )));
        }
        let dir = self.config.root.join(seq);
        let (h, w) = self.config.image_size;
        let load = |i: usize| -> Result<ImageTensor> {
            load_image(&image_path(&dir, i), h, w)
        };
        let prev = load(index - 1)?;
        let target = load(index)?;
        let next = load(index + 1)?;
        let timestamps = [
            meta.times[index - 1],
            meta.times[index],
            meta.times[index + 1],
        ];
        let snippet = ImageSnippet { target, sources: [prev, next], timestamps };
        snippet.validate()?;

        let window = imu_window(&meta.imu, timestamps[0], timestamps[2], self.config.imu_rows);
        Ok((snippet, window))
    }

    /// Ground-truth depth for a frame, when the sequence ships it.
    pub fn load_depth(&self, seq: &str, index: usize) -> Result<Array2<Real>> {
        let dir = self.config.root.join(seq);
        read_depth_bin(&dir.join("depth").join(format!("{index:06}.bin")))
    }
}

fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("image_2").join(format!("{index:06}.png"))
}

/// Gathers IMU rows with `t` in the half-open span `[t0, t1)`, then pads
/// with zero rows (or truncates) to exactly `n`.
pub(crate) fn imu_window(imu: &[[Real; 7]], t0: Real, t1: Real, n: usize) -> ImuWindow {
    let mut rows: Vec<[Real; 6]> = imu
        .iter()
        .filter(|r| r[0] >= t0 && r[0] < t1)
        .map(|r| [r[1], r[2], r[3], r[4], r[5], r[6]])
        .collect();
    let real = rows.len();
    let padded = real != n;
    rows.truncate(n);
    while rows.len() < n {
        rows.push([0.0; 6]);
    }
    let mut samples = Array2::zeros((n, 6));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            samples[[i, j]] = *v;
        }
    }
    ImuWindow { samples, real_rows: real.min(n), padded }
}

// ---- image I/O ----

fn png_dimensions(path: &Path) -> Result<(u32, u32)> {
    let img = image::open(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    Ok((img.width(), img.height()))
}

/// Loads a PNG as `[3, h, w]` in `[-1, 1]`, bilinearly resampling when the
/// stored resolution differs.
pub fn load_image(path: &Path, h: usize, w: usize) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?
        .to_rgb8();
    let (w0, h0) = (img.width() as usize, img.height() as usize);
    let mut raw = Array3::<Real>::zeros((3, h0, w0));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            raw[[c, y as usize, x as usize]] = p.0[c] as Real / 127.5 - 1.0;
        }
    }
    if (h0, w0) == (h, w) {
        return Ok(raw);
    }
    Ok(resize_bilinear(&raw, h, w))
}

/// Saves `[3, H, W]` values in `[-1, 1]` as an 8-bit PNG.
pub fn save_image(path: &Path, img: &ImageTensor) -> Result<()> {
    let (_, h, w) = img.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = (img[[c, y as usize, x as usize]] + 1.0) * 127.5;
            p.0[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out.save(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// Center-aligned bilinear resampling of `[C, H, W]` data.
pub fn resize_bilinear(img: &ImageTensor, h: usize, w: usize) -> ImageTensor {
    let (_, h0, w0) = img.dim();
    let sy = h0 as Real / h as Real;
    let sx = w0 as Real / w as Real;
    let u = Array2::from_shape_fn((h, w), |(_, j)| {
        ((j as Real + 0.5) * sx - 0.5).clamp(0.0, (w0 - 1) as Real)
    });
    let v = Array2::from_shape_fn((h, w), |(i, _)| {
        ((i as Real + 0.5) * sy - 0.5).clamp(0.0, (h0 - 1) as Real)
    });
    let (out, _) = crate::geometry::bilinear_sample(img, &u, &v);
    out
}

// ---- depth binary format ----

/// Writes depth as the flat binary format described in the module docs.
pub fn write_depth_bin(path: &Path, depth: &Array2<Real>) -> Result<()> {
    let (h, w) = depth.dim();
    let mut buf = Vec::with_capacity(8 + h * w * 4);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for v in depth.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_depth_bin(path: &Path) -> Result<Array2<Real>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?
        .read_to_end(&mut buf)?;
    if buf.len() < 8 {
        return Err(Error::parse(path.display().to_string(), "truncated header"));
    }
    let h = u32::from_le_bytes(buf[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    if buf.len() != 8 + h * w * 4 {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected {} payload bytes, found {}", h * w * 4, buf.len() - 8),
        ));
    }
    let mut depth = Array2::zeros((h, w));
    for i in 0..h * w {
        let off = 8 + i * 4;
        let v = f32::from_le_bytes(buf[off..off + 4].try_into().expect("4 bytes"));
        depth[[i / w, i % w]] = v as Real;
    }
    Ok(depth)
}

// ---- augmentation ----

/// Transform an [`augment`] call actually applied, for reproducing the
/// pixel mapping outside the loader.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Per-axis upscale factors after rounding to whole pixels.
    pub scale_x: Real,
    pub scale_y: Real,
    /// Crop offset into the upscaled image, pixels.
    pub dx: usize,
    pub dy: usize,
    pub flip: bool,
}

impl AugmentParams {
    /// Maps a pixel location in the original image to its location in the
    /// augmented image.
    pub fn map_pixel(&self, u: Real, v: Real, width: usize) -> (Real, Real) {
        let mut uu = u * self.scale_x - self.dx as Real;
        let vv = v * self.scale_y - self.dy as Real;
        if self.flip {
            uu = (width - 1) as Real - uu;
        }
        (uu, vv)
    }
}

/// Geometric training augmentation: random up-scaling, random crop back to
/// the original extent, and a coin-flip horizontal mirror. All three frames
/// get the identical transform; the returned intrinsics describe the
/// augmented camera. Deterministic in `seed`.
pub fn augment(
    snippet: &ImageSnippet,
    k: &CameraIntrinsics<Real>,
    seed: u64,
) -> (ImageSnippet, CameraIntrinsics<Real>, AugmentParams) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (_, h, w) = snippet.target.dim();
    let scale: Real = rng.random_range(1.0..1.15);
    let (hs, ws) = (
        ((h as Real * scale).round() as usize).max(h),
        ((w as Real * scale).round() as usize).max(w),
    );
    let dy = rng.random_range(0..=(hs - h));
    let dx = rng.random_range(0..=(ws - w));
    let flip = rng.random_bool(0.5);
    let params = AugmentParams {
        scale_x: ws as Real / w as Real,
        scale_y: hs as Real / h as Real,
        dx,
        dy,
        flip,
    };

    let mut kk = *k;
    kk.fx *= params.scale_x;
    kk.fy *= params.scale_y;
    kk.cx = kk.cx * params.scale_x - dx as Real;
    kk.cy = kk.cy * params.scale_y - dy as Real;
    if flip {
        // Mirroring negates the world x axis, keeping fx positive.
        kk.cx = (w - 1) as Real - kk.cx;
    }

    let apply = |img: &ImageTensor| -> ImageTensor {
        let scaled = if (hs, ws) == (h, w) { img.clone() } else { resize_bilinear(img, hs, ws) };
        let mut cropped = Array3::zeros((3, h, w));
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    cropped[[c, i, j]] = scaled[[c, i + dy, j + dx]];
                }
            }
        }
        if flip {
            flip_horizontal(&cropped)
        } else {
            cropped
        }
    };

    let out = ImageSnippet {
        target: apply(&snippet.target),
        sources: [apply(&snippet.sources[0]), apply(&snippet.sources[1])],
        timestamps: snippet.timestamps,
    };
    (out, kk, params)
}

/// Mirrors an image about its vertical center line.
pub fn flip_horizontal(img: &ImageTensor) -> ImageTensor {
    let (c_n, h, w) = img.dim();
    Array3::from_shape_fn((c_n, h, w), |(c, i, j)| img[[c, i, w - 1 - j]])
}
