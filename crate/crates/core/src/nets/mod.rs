//! Learnable sub-networks: image encoder, depth generator, visual odometry
//! extractor, inertial branches and the patch discriminator, plus the
//! parameter store and checkpoint format they share.

pub mod disc;
pub mod encoder;
pub mod generator;
pub mod imu;
pub mod layers;
pub mod store;
pub mod vo;


use std::io::Read;
use std::path::Path;

use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::FusionNet;
use crate::{Real, Scalar};

pub use disc::Discriminator;
pub use encoder::{EncodedBatch, Encoder};
pub use generator::{depth_bounds, Generator};
pub use imu::{ImuKind, ImuNet};
pub use store::{Binding, ParamStore};
pub use vo::VoNet;

/// Train/eval switch: controls dropout and which normalization statistics
/// are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Hyperparameters fixing every architecture in the model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    /// (height, width) of input images.
    pub input_size: (usize, usize),
    /// First-stage channel count for the image networks; later stages
    /// double up to `channel_cap`.
    pub base_channels: usize,
    pub channel_cap: usize,
    /// Dropout rate between visual-odometry conv stages.
    pub dropout: f64,
    /// Discriminator patch side in input pixels (receptive field).
    pub patch_size: usize,
    /// Views per snippet (target plus sources).
    pub n_views: usize,
    /// Rows per inertial window.
    pub imu_rows: usize,
    pub imu_kind: ImuKind,
    /// Divides the inertial branch filter counts (1 = the full plan).
    pub imu_width_scale: usize,
    /// Hidden size of the recurrent inertial variant.
    pub imu_rnn_hidden: usize,
    /// First discriminator block width.
    pub disc_channels: usize,
    /// Include the inertial pathway (false = visual-only ablation).
    pub use_imu: bool,
    /// Hidden size of the fusion recurrence.
    pub fusion_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_size: (256, 832),
            base_channels: 32,
            channel_cap: 512,
            dropout: 0.25,
            patch_size: disc::receptive_field(),
            n_views: 3,
            imu_rows: 20,
            imu_kind: ImuKind::Conv,
            imu_width_scale: 1,
            imu_rnn_hidden: 64,
            disc_channels: 64,
            use_imu: true,
            fusion_hidden: 128,
        }
    }
}

impl NetConfig {
    /// Small configuration for fast CPU experiments and tests.
    pub fn desk() -> Self {
        NetConfig {
            input_size: (32, 48),
            base_channels: 8,
            channel_cap: 128,
            imu_width_scale: 4,
            imu_rnn_hidden: 16,
            disc_channels: 8,
            fusion_hidden: 32,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 {
            return Err(Error::invalid("need at least 2 views"));
        }
        if self.base_channels == 0 || self.channel_cap < self.base_channels {
            return Err(Error::invalid("channel widths must be positive and capped above base"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0,1)"));
        }
        if self.patch_size != disc::receptive_field() {
            return Err(Error::invalid(format!(
                "patch size {} does not match the discriminator receptive field {}",
                self.patch_size,
                disc::receptive_field()
            )));
        }
        Ok(())
    }
}

/// Channel width of image-network stage `s` (0-based).
pub fn stage_channels(config: &NetConfig, s: usize) -> usize {
    (config.base_channels << s).min(config.channel_cap)
}

/// Every sub-network plus the fusion head, sharing one parameter store.
#[derive(Debug, Clone)]
pub struct VioModel {
    pub config: NetConfig,
    pub encoder: Encoder,
    pub generator: Generator,
    pub vo: VoNet,
    pub imu: Option<ImuNet>,
    pub fusion: FusionNet,
    pub disc: Discriminator,
}

impl VioModel {
    pub fn new<T: Scalar>(
        config: NetConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(store, rng, &config);
        let generator = Generator::new(store, rng, &config);
        let vo = VoNet::new(store, rng, &config);
        let imu = if config.use_imu { Some(ImuNet::new(store, rng, &config)) } else { None };
        let visual_dim = vo.feature_dim();
        let inertial_dim = imu.as_ref().map_or(0, |m| m.feature_dim());
        let fusion = FusionNet::new(store, rng, &config, visual_dim, inertial_dim);
        let disc = Discriminator::new(store, rng, &config);
        Ok(VioModel { config, encoder, generator, vo, imu, fusion, disc })
    }

    /// Depth maps `[1,H,W]` for a batch of images `[3,H,W]`.
    pub fn forward_depth<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        store: &mut ParamStore<T>,
        images: &[Var],
        mode: Mode,
    ) -> Result<Vec<Var>> {
        for &x in images {
            let s = tape.shape(x);
            if s.len() != 3 || s[0] != 3 {
                return Err(Error::invalid(format!(
                    "depth input must be [3,H,W], got {s:?}"
                )));
            }
        }
        let encoded = self.encoder.forward_batch(tape, bind, store, images, mode);
        self.generator.forward_batch(tape, bind, store, &encoded, mode)
    }

    /// Pose vectors `[6*(n_views-1)]` for a batch of channel-stacked
    /// snippets and (optional) inertial windows.
    pub fn forward_poses<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        store: &mut ParamStore<T>,
        stacked: &[Var],
        windows: &[(Var, Var)],
        mode: Mode,
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<Var>> {
        let want = 3 * self.config.n_views;
        for &x in stacked {
            let s = tape.shape(x);
            if s.len() != 3 || s[0] != want {
                return Err(Error::invalid(format!(
                    "pose input must be [{want},H,W], got {s:?}"
                )));
            }
        }
        let a_v = self.vo.forward_batch(tape, bind, store, stacked, mode, rng);
        let a_i = match &self.imu {
            Some(imu) => {
                if windows.len() != stacked.len() {
                    return Err(Error::invalid(format!(
                        "{} windows for {} snippets",
                        windows.len(),
                        stacked.len()
                    )));
                }
                Some(imu.forward_batch(tape, bind, store, windows, mode))
            }
            None => None,
        };
        let mut out = Vec::with_capacity(a_v.len());
        for (i, &av) in a_v.iter().enumerate() {
            let fused = match &a_i {
                Some(ai) => self.fusion.soft_fusion(tape, bind, av, Some(ai[i])).fused,
                None => self.fusion.soft_fusion(tape, bind, av, None).fused,
            };
            out.push(self.fusion.temporal_regress(tape, bind, &[fused]));
        }
        Ok(out)
    }

    /// Patch logit maps for a batch of images.
    pub fn discriminate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        store: &mut ParamStore<T>,
        images: &[Var],
        mode: Mode,
    ) -> Vec<Var> {
        self.disc.forward_batch(tape, bind, store, images, mode)
    }
}

// ---- checkpoint format ----

const MAGIC: &[u8; 8] = b"VIONET01";

/// Writes the configuration and every parameter (trainable and state) as a
/// single self-describing archive with a trailing content hash.
pub fn save_params<T: Scalar>(
    path: &Path,
    config: &NetConfig,
    store: &ParamStore<T>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let cfg = serde_json::to_vec(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let names = store.names();
    buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for (name, trainable) in &names {
        let arr = store.get(name);
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(u8::from(*trainable));
        buf.push(arr.ndim() as u8);
        for d in arr.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in arr.iter() {
            buf.extend_from_slice(&Scalar::to_f64(*v).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated archive".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Reads an archive written by [`save_params`], verifying the format tag
/// and content hash.
pub fn load_params<T: Scalar>(path: &Path) -> Result<(NetConfig, ParamStore<T>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if raw.len() < MAGIC.len() + 32 {
        return Err(Error::Checkpoint("archive too short".into()));
    }
    let (body, digest) = raw.split_at(raw.len() - 32);
    let expect = Sha256::digest(body);
    if digest != expect.as_slice() {
        return Err(Error::Checkpoint("content hash mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("unrecognized format tag".into()));
    }
    let cfg_len = r.u32()? as usize;
    let config: NetConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let n = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let trainable = r.u8()? != 0;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            data.push(T::c(v));
        }
        let arr = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if trainable {
            store.register(&name, arr);
        } else {
            store.register_state(&name, arr);
        }
    }
    Ok((config, store))
}

/// Serializes a store to bytes in memory; used by the trainer to embed
/// model parameters inside its own checkpoint.
pub fn params_digest<T: Scalar>(store: &ParamStore<T>) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for (name, _) in store.names() {
        hasher.update(name.as_bytes());
        for v in store.get(&name).iter() {
            hasher.update(Scalar::to_f64(*v).to_le_bytes());
        }
    }
    hasher.finalize().into()
}

/// Convenience alias used across the training and evaluation code.
pub type RealStore = ParamStore<Real>;
