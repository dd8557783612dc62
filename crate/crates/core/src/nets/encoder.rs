//! Image encoder: seven stride-2 convolution stages producing a compact
//! latent code plus the per-stage activations used as skip inputs by the
//! depth generator.

use rand_chacha::ChaCha12Rng;

use crate::diff::{Tape, Var};
use crate::nets::layers::{BatchNorm2d, Conv2d, PadMode};
use crate::nets::store::{Binding, ParamStore};
use crate::nets::{stage_channels, Mode, NetConfig};
use crate::Scalar;

pub const STAGES: usize = 7;

#[derive(Debug, Clone)]
pub struct Encoder {
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm2d>,
}

/// Latent code plus skip activations; `feats[i]` is the output of stage
/// `i + 1`, so `feats.last()` is the bottleneck.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub feats: Vec<Vec<Var>>,
    /// Spatial size of the encoded images.
    pub input_hw: (usize, usize),
}

impl EncodedBatch {
    pub fn bottleneck(&self) -> &[Var] {
        self.feats.last().expect("encoder has stages")
    }
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        config: &NetConfig,
    ) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut ci = 3;
        for s in 0..STAGES {
            let co = stage_channels(config, s);
            let k = if s == 0 { (7, 7) } else { (3, 3) };
            convs.push(Conv2d::new(
                store,
                rng,
                &format!("enc.c{s}"),
                ci,
                co,
                k,
                (2, 2),
                PadMode::Ceil,
                PadMode::Ceil,
            ));
            norms.push(BatchNorm2d::new(store, &format!("enc.bn{s}"), co));
            ci = co;
        }
        Encoder { convs, norms }
    }

    /// Spatial size of every stage output for a given input size.
    pub fn stage_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut sizes = Vec::with_capacity(STAGES);
        let (mut h, mut w) = (h, w);
        for c in &self.convs {
            let (ho, wo) = c.out_size(h, w);
            sizes.push((ho, wo));
            h = ho;
            w = wo;
        }
        sizes
    }

    pub fn stage_channels_out(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.co).collect()
    }

    pub fn forward_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        store: &mut ParamStore<T>,
        images: &[Var],
        mode: Mode,
    ) -> EncodedBatch {
        assert!(!images.is_empty(), "encoder: empty batch");
        let s0 = tape.shape(images[0]).to_vec();
        let input_hw = (s0[1], s0[2]);
        let mut current = images.to_vec();
        let mut feats = Vec::with_capacity(STAGES);
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            let pre: Vec<Var> = current.iter().map(|&x| conv.forward(tape, bind, x)).collect();
            let normed = norm.forward_batch(tape, bind, store, &pre, mode);
            current = normed.into_iter().map(|x| tape.relu(x)).collect();
            feats.push(current.clone());
        }
        EncodedBatch { feats, input_hw }
    }
}
