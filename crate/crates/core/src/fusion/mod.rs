//! Self-adaptive visual-inertial fusion: sigmoid attention masks reweight
//! the concatenated modality features channel by channel, a bi-directional
//! recurrent pass models the (length >= 1) temporal context, and a fully
//! connected head regresses the relative 6-DoF motions.


use rand_chacha::ChaCha12Rng;

use crate::diff::{Tape, Var};
use crate::nets::layers::{BiLstm, Linear};
use crate::nets::store::{Binding, ParamStore};
use crate::nets::NetConfig;
use crate::Scalar;

/// Attention masks and the reweighted feature vector for one snippet.
#[derive(Debug, Clone, Copy)]
pub struct FusionWeights {
    /// Visual mask, same length as the visual features; entries in (0,1).
    pub s_v: Var,
    /// Inertial mask, present when the inertial pathway is active.
    pub s_i: Option<Var>,
    /// `[a_v * s_v, a_i * s_i]`, length = visual dim + inertial dim.
    pub fused: Var,
}

/// Mean mask activations for one snippet, reported per modality.
#[derive(Debug, Clone, Copy)]
pub struct MaskStats {
    pub visual_mean: f64,
    pub inertial_mean: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionNet {
    w_v: Linear,
    w_i: Option<Linear>,
    rnn: BiLstm,
    fc: Linear,
    visual_dim: usize,
    inertial_dim: usize,
    pub n_views: usize,
}

impl FusionNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        config: &NetConfig,
        visual_dim: usize,
        inertial_dim: usize,
    ) -> Self {
        let total = visual_dim + inertial_dim;
        // The masks come from bias-free linear maps so that zero features
        // always yield the neutral 0.5 mask.
        let w_v = Linear::new(store, rng, "fus.wv", total, visual_dim, false, None);
        let w_i = (inertial_dim > 0)
            .then(|| Linear::new(store, rng, "fus.wi", total, inertial_dim, false, None));
        let rnn = BiLstm::new(store, rng, "fus.rnn", total, config.fusion_hidden, 2);
        let out_dim = 6 * (config.n_views - 1);
        // Small head init keeps initial pose estimates near the identity.
        let fc = Linear::new(store, rng, "fus.fc", rnn.d_out(), out_dim, true, Some(0.01));
        FusionNet { w_v, w_i, rnn, fc, visual_dim, inertial_dim, n_views: config.n_views }
    }

    pub fn fused_dim(&self) -> usize {
        self.visual_dim + self.inertial_dim
    }

    /// Computes the attention masks and the reweighted concatenation.
    /// `a_i = None` runs the visual-only ablation: the concatenation is
    /// just the visual features and no inertial mask exists.
    pub fn soft_fusion<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        a_v: Var,
        a_i: Option<Var>,
    ) -> FusionWeights {
        assert_eq!(
            tape.shape(a_v),
            [self.visual_dim],
            "visual feature length mismatch"
        );
        let joint = match a_i {
            Some(ai) => {
                assert_eq!(
                    tape.shape(ai),
                    [self.inertial_dim],
                    "inertial feature length mismatch"
                );
                tape.concat(0, &[a_v, ai])
            }
            None => {
                assert_eq!(self.inertial_dim, 0, "model was built with an inertial pathway");
                a_v
            }
        };
        let v_logits = self.w_v.forward(tape, bind, joint);
        let s_v = tape.sigmoid(v_logits);
        let v_part = tape.mul(a_v, s_v);
        match (a_i, &self.w_i) {
            (Some(ai), Some(w_i)) => {
                let i_logits = w_i.forward(tape, bind, joint);
                let s_i = tape.sigmoid(i_logits);
                let i_part = tape.mul(ai, s_i);
                let fused = tape.concat(0, &[v_part, i_part]);
                FusionWeights { s_v, s_i: Some(s_i), fused }
            }
            _ => FusionWeights { s_v, s_i: None, fused: v_part },
        }
    }

    /// Recurrent pass over a sequence of fused features (length 1 in the
    /// 3-frame snippet setting) followed by the pose regression head.
    /// State starts at zero, so snippets are independent of each other.
    pub fn temporal_regress<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        fused_seq: &[Var],
    ) -> Var {
        assert!(!fused_seq.is_empty(), "need at least one fused feature");
        let outs = self.rnn.forward_seq(tape, bind, fused_seq);
        self.fc.forward(tape, bind, *outs.last().expect("non-empty sequence"))
    }

    /// Splits a pose head output into per-source 6-vectors
    /// (translation xyz, then rotation xyz), ordered like the sources.
    pub fn split_poses<T: Scalar>(&self, tape: &mut Tape<T>, out: Var) -> Vec<Var> {
        (0..self.n_views - 1)
            .map(|i| tape.slice_axis(out, 0, 6 * i, 6))
            .collect()
    }

    /// Mean mask activation per modality, for attention reporting.
    pub fn mask_stats<T: Scalar>(&self, tape: &Tape<T>, w: &FusionWeights) -> MaskStats {
        let mean = |v: Var| {
            let a = tape.value(v);
            a.iter().map(|x| Scalar::to_f64(*x)).sum::<f64>() / a.len() as f64
        };
        MaskStats {
            visual_mean: mean(w.s_v),
            inertial_mean: w.s_i.map(mean),
        }
    }
}
