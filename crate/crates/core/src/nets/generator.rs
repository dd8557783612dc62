//! Depth generator: mirrors the encoder with seven stride-2 transposed
//! convolutions, concatenating each upsampled activation with the encoder
//! stage of matching resolution, then maps the full-resolution features
//! through a bounded-disparity head to strictly positive depth.

use rand_chacha::ChaCha12Rng;

use crate::diff::{Tape, Var};
use crate::nets::encoder::{EncodedBatch, STAGES};
use crate::nets::layers::{BatchNorm2d, Conv2d, ConvT2d, PadMode};
use crate::nets::store::{Binding, ParamStore};
use crate::nets::{stage_channels, Mode, NetConfig};
use crate::{Error, Result, Scalar};

/// Disparity scale: depth = 1 / (DISP_A * sigmoid(x) + DISP_B), bounding
/// output to (1/(a+b), 1/b).
pub const DISP_A: f64 = 10.0;
pub const DISP_B: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Generator {
    ups: Vec<ConvT2d>,
    norms: Vec<BatchNorm2d>,
    head: Conv2d,
}

impl Generator {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        config: &NetConfig,
    ) -> Self {
        let mut ups = Vec::new();
        let mut norms = Vec::new();
        // Stage i upsamples toward the resolution of encoder stage
        // STAGES-2-i; its input carries the previous output concatenated
        // with that skip (none for the final full-resolution stage).
        let mut ci = stage_channels(config, STAGES - 1);
        for s in 0..STAGES {
            let mirrored = STAGES as isize - 2 - s as isize;
            let co = if mirrored >= 0 {
                stage_channels(config, mirrored as usize)
            } else {
                config.base_channels
            };
            ups.push(ConvT2d::new(store, rng, &format!("gen.u{s}"), ci, co));
            norms.push(BatchNorm2d::new(store, &format!("gen.bn{s}"), co));
            ci = if mirrored >= 0 { 2 * co } else { co };
        }
        let head = Conv2d::new(
            store,
            rng,
            "gen.head",
            config.base_channels,
            1,
            (3, 3),
            (1, 1),
            PadMode::Ceil,
            PadMode::Ceil,
        );
        Generator { ups, norms, head }
    }

    /// Decodes the encoded batch to depth maps `[1, H, W]` at the encoder's
    /// input resolution.
    pub fn forward_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        store: &mut ParamStore<T>,
        encoded: &EncodedBatch,
        mode: Mode,
    ) -> Result<Vec<Var>> {
        if encoded.feats.len() != STAGES {
            return Err(Error::invalid(format!(
                "generator expects {STAGES} encoder stages, got {}",
                encoded.feats.len()
            )));
        }
        let n = encoded.bottleneck().len();
        let (h, w) = encoded.input_hw;
        // Upsample targets: encoder stage sizes in reverse, then the input.
        let mut targets: Vec<(usize, usize)> = Vec::with_capacity(STAGES);
        for s in (0..STAGES - 1).rev() {
            let sh = tape.shape(encoded.feats[s][0]);
            targets.push((sh[1], sh[2]));
        }
        targets.push((h, w));

        let mut current: Vec<Var> = encoded.bottleneck().to_vec();
        for (s, (up, norm)) in self.ups.iter().zip(&self.norms).enumerate() {
            let out_hw = targets[s];
            let pre: Vec<Var> = current
                .iter()
                .map(|&x| up.forward(tape, bind, x, out_hw))
                .collect();
            let normed = norm.forward_batch(tape, bind, store, &pre, mode);
            let act: Vec<Var> = normed.into_iter().map(|x| tape.relu(x)).collect();
            let mirrored = STAGES as isize - 2 - s as isize;
            current = if mirrored >= 0 {
                let skips = &encoded.feats[mirrored as usize];
                act.iter()
                    .zip(skips.iter())
                    .map(|(&a, &sk)| {
                        let (sa, ss) = (tape.shape(a).to_vec(), tape.shape(sk).to_vec());
                        assert_eq!(
                            sa[1..],
                            ss[1..],
                            "skip resolution mismatch at stage {s}"
                        );
                        tape.concat(0, &[a, sk])
                    })
                    .collect()
            } else {
                act
            };
        }

        let mut out = Vec::with_capacity(n);
        for &x in &current {
            let logits = self.head.forward(tape, bind, x);
            let sig = tape.sigmoid(logits);
            let disp = tape.scale(sig, T::c(DISP_A));
            let disp_b = tape.shift(disp, T::c(DISP_B));
            let one = tape.scalar(T::one());
            out.push(tape.div(one, disp_b));
        }
        Ok(out)
    }
}

/// Closed-form depth bounds implied by the disparity head.
pub fn depth_bounds() -> (f64, f64) {
    (1.0 / (DISP_A + DISP_B), 1.0 / DISP_B)
}
