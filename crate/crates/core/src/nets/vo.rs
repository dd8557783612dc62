//! Visual odometry feature extractor: the three snippet frames stacked on
//! channels pass through seven stride-2 convolutions, the last two of which
//! are split into separate translation and rotation branches. Each branch
//! is globally average-pooled; their concatenation is the visual feature
//! vector handed to fusion.

use rand_chacha::ChaCha12Rng;

use crate::diff::{Tape, Var};
use crate::nets::layers::{dropout, BatchNorm2d, Conv2d, PadMode};
use crate::nets::store::{Binding, ParamStore};
use crate::nets::{stage_channels, Mode, NetConfig};
use crate::Scalar;

const SHARED_STAGES: usize = 5;
const BRANCH_STAGES: usize = 2;

#[derive(Debug, Clone)]
pub struct VoNet {
    shared: Vec<(Conv2d, BatchNorm2d)>,
    trans: Vec<(Conv2d, BatchNorm2d)>,
    rot: Vec<(Conv2d, BatchNorm2d)>,
    dropout_rate: f64,
    feature_dim: usize,
}

fn stack<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    config: &NetConfig,
    first_in: usize,
    from_stage: usize,
    count: usize,
) -> Vec<(Conv2d, BatchNorm2d)> {
    let mut out = Vec::new();
    let mut ci = first_in;
    for i in 0..count {
        let s = from_stage + i;
        let co = stage_channels(config, s);
        let k = if s == 0 { (7, 7) } else { (3, 3) };
        let conv = Conv2d::new(
            store,
            rng,
            &format!("{prefix}.c{s}"),
            ci,
            co,
            k,
            (2, 2),
            PadMode::Ceil,
            PadMode::Ceil,
        );
        let bn = BatchNorm2d::new(store, &format!("{prefix}.bn{s}"), co);
        out.push((conv, bn));
        ci = co;
    }
    out
}

impl VoNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        config: &NetConfig,
    ) -> Self {
        assert!(config.n_views >= 2, "need at least one source view");
        let in_ch = 3 * config.n_views;
        let shared = stack(store, rng, "vo.shared", config, in_ch, 0, SHARED_STAGES);
        let trunk_out = stage_channels(config, SHARED_STAGES - 1);
        let trans = stack(store, rng, "vo.trans", config, trunk_out, SHARED_STAGES, BRANCH_STAGES);
        let rot = stack(store, rng, "vo.rot", config, trunk_out, SHARED_STAGES, BRANCH_STAGES);
        let branch_out = stage_channels(config, SHARED_STAGES + BRANCH_STAGES - 1);
        VoNet {
            shared,
            trans,
            rot,
            dropout_rate: config.dropout,
            feature_dim: 2 * branch_out,
        }
    }

    /// Length of the visual feature vector.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn run_stack<T: Scalar>(
        stack: &[(Conv2d, BatchNorm2d)],
        tape: &mut Tape<T>,
        bind: &Binding,
        store: &mut ParamStore<T>,
        mut xs: Vec<Var>,
        mode: Mode,
        rng: &mut ChaCha12Rng,
        rate: f64,
        drop_last: bool,
    ) -> Vec<Var> {
        for (i, (conv, bn)) in stack.iter().enumerate() {
            let pre: Vec<Var> = xs.iter().map(|&x| conv.forward(tape, bind, x)).collect();
            let normed = bn.forward_batch(tape, bind, store, &pre, mode);
            xs = normed.into_iter().map(|x| tape.relu(x)).collect();
            // Regularization sits between conv stages, not after the last.
            if drop_last || i + 1 < stack.len() {
                xs = xs.into_iter().map(|x| dropout(tape, x, rate, mode, rng)).collect();
            }
        }
        xs
    }

    /// `stacked` entries are `[3*n_views, H, W]` snippet stacks; returns one
    /// feature vector per batch entry.
    pub fn forward_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        store: &mut ParamStore<T>,
        stacked: &[Var],
        mode: Mode,
        rng: &mut ChaCha12Rng,
    ) -> Vec<Var> {
        let trunk = Self::run_stack(
            &self.shared,
            tape,
            bind,
            store,
            stacked.to_vec(),
            mode,
            rng,
            self.dropout_rate,
            true,
        );
        let t_out = Self::run_stack(
            &self.trans,
            tape,
            bind,
            store,
            trunk.clone(),
            mode,
            rng,
            self.dropout_rate,
            false,
        );
        let r_out = Self::run_stack(
            &self.rot,
            tape,
            bind,
            store,
            trunk,
            mode,
            rng,
            self.dropout_rate,
            false,
        );
        t_out
            .into_iter()
            .zip(r_out)
            .map(|(tv, rv)| {
                let tp = global_avg(tape, tv);
                let rp = global_avg(tape, rv);
                tape.concat(0, &[tp, rp])
            })
            .collect()
    }
}

/// Mean over the spatial axes of `[C,H,W]`, flattened to `[C]`.
fn global_avg<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let c = tape.shape(x)[0];
    let m = tape.mean_axes(x, &[1, 2]);
    tape.reshape(m, &[c])
}
