//! Inertial feature extractor. The default form runs two parallel
//! convolutional branches, one over the n×3 acceleration block and one over
//! the n×3 angular-rate block, each ending in a 3-filter 1×1 convolution
//! whose 2×3 output is flattened; the branch outputs concatenate into the
//! inertial feature vector. An alternative recurrent encoder sits behind
//! the same interface for ablation runs.

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;

use crate::diff::{Tape, Var};
use crate::nets::layers::{BatchNorm2d, BiLstm, Conv2d, Linear, PadMode};
use crate::nets::store::{Binding, ParamStore};
use crate::nets::{Mode, NetConfig};
use crate::{Real, Scalar};

/// Which inertial encoder variant a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ImuKind {
    Conv,
    Recurrent,
}

/// Per-branch stride-2 stack: (filters, kernel, stride).
const BRANCH_PLAN: [(usize, (usize, usize), usize); 5] = [
    (64, (3, 5), 1),
    (64, (3, 5), 1),
    (128, (3, 5), 2),
    (256, (3, 5), 2),
    (512, (3, 2), 2),
];

#[derive(Debug, Clone)]
struct ConvBranch {
    convs: Vec<(Conv2d, BatchNorm2d)>,
    proj: Conv2d,
}

impl ConvBranch {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        width_scale: usize,
    ) -> Self {
        let mut convs = Vec::new();
        let mut ci = 1;
        for (i, (filters, k, s)) in BRANCH_PLAN.iter().enumerate() {
            let co = (filters / width_scale).max(1);
            let conv = Conv2d::new(
                store,
                rng,
                &format!("{prefix}.c{i}"),
                ci,
                co,
                *k,
                (*s, *s),
                // Row counts shrink by exact halving (20 -> 10 -> 5 -> 2);
                // the 3-wide column axis keeps ceil semantics so it never
                // collapses below 1.
                PadMode::Floor,
                PadMode::Ceil,
            );
            let bn = BatchNorm2d::new(store, &format!("{prefix}.bn{i}"), co);
            convs.push((conv, bn));
            ci = co;
        }
        let proj = Conv2d::new(
            store,
            rng,
            &format!("{prefix}.proj"),
            ci,
            3,
            (1, 1),
            (1, 1),
            PadMode::Ceil,
            PadMode::Ceil,
        );
        ConvBranch { convs, proj }
    }

    fn forward_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        store: &mut ParamStore<T>,
        xs: &[Var],
        mode: Mode,
    ) -> Vec<Var> {
        let mut current = xs.to_vec();
        for (conv, bn) in &self.convs {
            let pre: Vec<Var> = current.iter().map(|&x| conv.forward(tape, bind, x)).collect();
            let normed = bn.forward_batch(tape, bind, store, &pre, mode);
            current = normed.into_iter().map(|x| tape.relu(x)).collect();
        }
        // Projection is an output layer: no normalization, no activation.
        current
            .into_iter()
            .map(|x| {
                let y = self.proj.forward(tape, bind, x);
                let sh = tape.shape(y).to_vec();
                let len: usize = sh.iter().product();
                tape.reshape(y, &[len])
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Body {
    Conv { accel: ConvBranch, gyro: ConvBranch },
    Recurrent { rnn: BiLstm, fc: Linear },
}

#[derive(Debug, Clone)]
pub struct ImuNet {
    body: Body,
    rows: usize,
    feature_dim: usize,
}

impl ImuNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        config: &NetConfig,
    ) -> Self {
        let rows = config.imu_rows;
        match config.imu_kind {
            ImuKind::Conv => {
                assert!(rows >= 8, "conv branches need at least 8 rows to halve three times");
                let scale = config.imu_width_scale.max(1);
                let accel = ConvBranch::new(store, rng, "imu.acc", scale);
                let gyro = ConvBranch::new(store, rng, "imu.gyr", scale);
                // Each branch projects to 3 channels over a (rows/8 fixed
                // to 2 when rows = 20) x 1 grid; 2x3 flattens to 6.
                let h_out = branch_rows_out(rows);
                let feature_dim = 2 * 3 * h_out;
                ImuNet { body: Body::Conv { accel, gyro }, rows, feature_dim }
            }
            ImuKind::Recurrent => {
                let hidden = config.imu_rnn_hidden;
                let rnn = BiLstm::new(store, rng, "imu.rnn", 6, hidden, 2);
                let fc = Linear::new(store, rng, "imu.fc", 2 * hidden, 12, true, None);
                ImuNet { body: Body::Recurrent { rnn, fc }, rows, feature_dim: 12 }
            }
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Splits an n×6 window into the two modality blocks shaped `[1, n, 3]`.
    pub fn split_window<T: Scalar>(
        tape: &mut Tape<T>,
        window: &Array2<Real>,
    ) -> (Var, Var) {
        let (n, c) = window.dim();
        assert_eq!(c, 6, "window must have 6 columns");
        let mut accel = ndarray::ArrayD::<T>::zeros(ndarray::IxDyn(&[1, n, 3]));
        let mut gyro = accel.clone();
        for i in 0..n {
            for j in 0..3 {
                accel[[0, i, j]] = T::c(window[[i, j]]);
                gyro[[0, i, j]] = T::c(window[[i, j + 3]]);
            }
        }
        (tape.constant(accel), tape.constant(gyro))
    }

    /// One feature vector per (accel, gyro) pair.
    pub fn forward_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        store: &mut ParamStore<T>,
        windows: &[(Var, Var)],
        mode: Mode,
    ) -> Vec<Var> {
        for (a, g) in windows {
            let (sa, sg) = (tape.shape(*a).to_vec(), tape.shape(*g).to_vec());
            assert_eq!(sa, [1, self.rows, 3], "acceleration block shape");
            assert_eq!(sg, [1, self.rows, 3], "angular-rate block shape");
        }
        match &self.body {
            Body::Conv { accel, gyro } => {
                let acc_in: Vec<Var> = windows.iter().map(|(a, _)| *a).collect();
                let gyr_in: Vec<Var> = windows.iter().map(|(_, g)| *g).collect();
                let acc_out = accel.forward_batch(tape, bind, store, &acc_in, mode);
                let gyr_out = gyro.forward_batch(tape, bind, store, &gyr_in, mode);
                acc_out
                    .into_iter()
                    .zip(gyr_out)
                    .map(|(a, g)| tape.concat(0, &[a, g]))
                    .collect()
            }
            Body::Recurrent { rnn, fc } => windows
                .iter()
                .map(|(a, g)| {
                    let seq: Vec<Var> = (0..self.rows)
                        .map(|i| {
                            let ra = tape.slice_axis(*a, 1, i, 1);
                            let rg = tape.slice_axis(*g, 1, i, 1);
                            let fa = tape.reshape(ra, &[3]);
                            let fg = tape.reshape(rg, &[3]);
                            tape.concat(0, &[fa, fg])
                        })
                        .collect();
                    let outs = rnn.forward_seq(tape, bind, &seq);
                    fc.forward(tape, bind, *outs.last().expect("non-empty sequence"))
                })
                .collect(),
        }
    }
}

/// Row count after the three stride-2 halvings of the branch plan.
pub fn branch_rows_out(rows: usize) -> usize {
    let mut h = rows;
    for (_, _, s) in BRANCH_PLAN.iter() {
        if *s == 2 {
            h /= 2;
        }
    }
    h
}
