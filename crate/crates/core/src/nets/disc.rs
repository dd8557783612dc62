//! Patch discriminator: four strided convolution blocks with LeakyReLU
//! followed by a 1-channel projection, scoring every overlapping receptive
//! patch; the scalar decision is the mean over patch logits.

use rand_chacha::ChaCha12Rng;

use crate::diff::{Tape, Var};
use crate::nets::layers::{BatchNorm2d, Conv2d, PadMode};
use crate::nets::store::{Binding, ParamStore};
use crate::nets::{Mode, NetConfig};
use crate::Scalar;

const LEAK: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct Discriminator {
    blocks: Vec<(Conv2d, BatchNorm2d)>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        config: &NetConfig,
    ) -> Self {
        // (filters, stride); kernel 4 throughout. Three halvings plus one
        // stride-1 block give a 70 px receptive field.
        let plan = [(1usize, 2usize), (2, 2), (4, 2), (8, 1)];
        let mut blocks = Vec::new();
        let mut ci = 3;
        for (i, (mult, s)) in plan.iter().enumerate() {
            let co = (config.disc_channels * mult).max(1);
            let conv = Conv2d::new(
                store,
                rng,
                &format!("disc.c{i}"),
                ci,
                co,
                (4, 4),
                (*s, *s),
                PadMode::Ceil,
                PadMode::Ceil,
            );
            let bn = BatchNorm2d::new(store, &format!("disc.bn{i}"), co);
            blocks.push((conv, bn));
            ci = co;
        }
        let head = Conv2d::new(
            store,
            rng,
            "disc.head",
            ci,
            1,
            (4, 4),
            (1, 1),
            PadMode::Ceil,
            PadMode::Ceil,
        );
        Discriminator { blocks, head }
    }

    /// Patch logit maps `[1, ho, wo]`, one per image.
    pub fn forward_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        store: &mut ParamStore<T>,
        images: &[Var],
        mode: Mode,
    ) -> Vec<Var> {
        let mut current = images.to_vec();
        for (conv, bn) in &self.blocks {
            let pre: Vec<Var> = current.iter().map(|&x| conv.forward(tape, bind, x)).collect();
            let normed = bn.forward_batch(tape, bind, store, &pre, mode);
            current = normed
                .into_iter()
                .map(|x| tape.leaky_relu(x, T::c(LEAK)))
                .collect();
        }
        current
            .into_iter()
            .map(|x| self.head.forward(tape, bind, x))
            .collect()
    }

    /// Mean patch logit: the image-level decision.
    pub fn mean_score<T: Scalar>(tape: &mut Tape<T>, patch_logits: Var) -> Var {
        tape.mean_all(patch_logits)
    }
}

/// Receptive field of one output logit in input pixels: walk the kernel and
/// stride schedule backward.
pub fn receptive_field() -> usize {
    // Layers as (k, s) from input to output.
    let layers = [(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)];
    let mut rf = 1usize;
    let mut jump = 1usize;
    for (k, s) in layers {
        rf += (k - 1) * jump;
        jump *= s;
    }
    rf
}
