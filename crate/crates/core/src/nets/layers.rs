//! Reusable differentiable layers built on the tape.
//!
//! Layers are lightweight descriptors: construction registers parameters in
//! a [`ParamStore`] under a dotted name prefix, forward passes look them up
//! in a [`Binding`]. Nothing here owns tensors.

use rand_chacha::ChaCha12Rng;

use crate::diff::{same_pad_ceil, same_pad_floor, Tape, Var};
use crate::nets::store::{he_init, normal_init, uniform_init, Binding, ParamStore};
use crate::nets::Mode;
use crate::Scalar;

/// Same-padding flavor per axis. `Ceil` gives out = ceil(in/s); `Floor`
/// gives out = floor(in/s) and needs in >= s.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Ceil,
    Floor,
}

fn pad_for(mode: PadMode, inp: usize, k: usize, s: usize) -> (usize, usize, usize) {
    match mode {
        PadMode::Ceil => {
            let (a, b) = same_pad_ceil(inp, k, s);
            (inp.div_ceil(s), a, b)
        }
        PadMode::Floor => {
            let (a, b) = same_pad_floor(inp, k, s);
            (inp / s, a, b)
        }
    }
}

/// 2D convolution with per-axis same padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub ci: usize,
    pub co: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad_h: PadMode,
    pub pad_w: PadMode,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        ci: usize,
        co: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad_h: PadMode,
        pad_w: PadMode,
    ) -> Self {
        let fan_in = ci * kernel.0 * kernel.1;
        store.register(&format!("{name}.w"), he_init(rng, &[co, ci, kernel.0, kernel.1], fan_in));
        store.register(&format!("{name}.b"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[co])));
        Conv2d { name: name.to_string(), ci, co, kernel, stride, pad_h, pad_w }
    }

    /// Output spatial size for an input size.
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (ho, _, _) = pad_for(self.pad_h, h, self.kernel.0, self.stride.0);
        let (wo, _, _) = pad_for(self.pad_w, w, self.kernel.1, self.stride.1);
        (ho, wo)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Var {
        let xs = tape.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "{}: expected [C,H,W] input", self.name);
        assert_eq!(xs[0], self.ci, "{}: channel mismatch", self.name);
        let (_, pt, pb) = pad_for(self.pad_h, xs[1], self.kernel.0, self.stride.0);
        let (_, pl, pr) = pad_for(self.pad_w, xs[2], self.kernel.1, self.stride.1);
        let w = bind.var(&format!("{}.w", self.name));
        let b = bind.var(&format!("{}.b", self.name));
        tape.conv2d(x, w, Some(b), self.stride, (pt, pb, pl, pr))
    }
}

/// Transposed 2D convolution with a fixed kernel 3, stride 2, padding 1
/// schedule; the exact output size is supplied per call because stride-2
/// upsampling is one-to-many.
#[derive(Debug, Clone)]
pub struct ConvT2d {
    pub name: String,
    pub ci: usize,
    pub co: usize,
}

impl ConvT2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        ci: usize,
        co: usize,
    ) -> Self {
        // Weight layout [Cin, Cout, kh, kw] matches the adjoint-convolution
        // kernel; fan_in counts the contributing input elements.
        let fan_in = ci * 9 / 4;
        store.register(&format!("{name}.w"), he_init(rng, &[ci, co, 3, 3], fan_in.max(1)));
        store.register(&format!("{name}.b"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[co])));
        ConvT2d { name: name.to_string(), ci, co }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        x: Var,
        out_hw: (usize, usize),
    ) -> Var {
        let xs = tape.shape(x).to_vec();
        assert_eq!(xs[0], self.ci, "{}: channel mismatch", self.name);
        for (o, i) in [(out_hw.0, xs[1]), (out_hw.1, xs[2])] {
            assert!(
                o == 2 * i - 1 || o == 2 * i,
                "{}: cannot upsample {i} to {o} with stride 2",
                self.name
            );
        }
        let w = bind.var(&format!("{}.w", self.name));
        let b = bind.var(&format!("{}.b", self.name));
        tape.conv_transpose2d(x, w, Some(b), (2, 2), (1, 1), out_hw)
    }
}

/// Channel-wise batch normalization over `[C,H,W]` samples.
///
/// Training mode joins the whole batch so statistics cover batch and
/// spatial axes together; inference mode applies stored running statistics
/// sample by sample.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let c = ndarray::IxDyn(&[channels]);
        store.register(&format!("{name}.g"), ndarray::ArrayD::from_elem(c.clone(), T::one()));
        store.register(&format!("{name}.beta"), ndarray::ArrayD::zeros(c.clone()));
        store.register_state(&format!("{name}.rm"), ndarray::ArrayD::zeros(c.clone()));
        store.register_state(&format!("{name}.rv"), ndarray::ArrayD::from_elem(c, T::one()));
        BatchNorm2d { name: name.to_string(), channels, eps: 1e-5, momentum: 0.1 }
    }

    pub fn forward_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        store: &mut ParamStore<T>,
        xs: &[Var],
        mode: Mode,
    ) -> Vec<Var> {
        assert!(!xs.is_empty(), "{}: empty batch", self.name);
        let shape = tape.shape(xs[0]).to_vec();
        assert_eq!(shape[0], self.channels, "{}: channel mismatch", self.name);
        let g = bind.var(&format!("{}.g", self.name));
        let beta = bind.var(&format!("{}.beta", self.name));
        let g4 = tape.reshape(g, &[1, self.channels, 1, 1]);
        let b4 = tape.reshape(beta, &[1, self.channels, 1, 1]);

        match mode {
            Mode::Train => {
                // A single value per channel has zero variance and would
                // silently normalize the whole map to the shift parameter.
                assert!(
                    xs.len() * shape[1] * shape[2] > 1,
                    "{}: batch statistics need more than one value per channel",
                    self.name
                );
                let joined: Vec<Var> = xs
                    .iter()
                    .map(|&x| {
                        let s = tape.shape(x).to_vec();
                        tape.reshape(x, &[1, s[0], s[1], s[2]])
                    })
                    .collect();
                let x = tape.concat(0, &joined);
                let mu = tape.mean_axes(x, &[0, 2, 3]);
                let centered = tape.sub(x, mu);
                let sq = tape.mul(centered, centered);
                let var = tape.mean_axes(sq, &[0, 2, 3]);
                let var_eps = tape.shift(var, T::c(self.eps));
                let std = tape.sqrt(var_eps);
                let norm = tape.div(centered, std);
                let scaled = tape.mul(norm, g4);
                let out = tape.add(scaled, b4);

                self.update_running(tape, store, mu, var, xs.len() * shape[1] * shape[2]);

                (0..xs.len())
                    .map(|i| {
                        let s = tape.slice_axis(out, 0, i, 1);
                        tape.reshape(s, &shape)
                    })
                    .collect()
            }
            Mode::Eval => {
                let rm = store.get(&format!("{}.rm", self.name)).clone();
                let rv = store.get(&format!("{}.rv", self.name)).clone();
                let denom: ndarray::ArrayD<T> =
                    rv.mapv(|v| (v + T::c(self.eps)).sqrt());
                let rm_c = tape.constant(
                    rm.into_shape_with_order(ndarray::IxDyn(&[self.channels, 1, 1]))
                        .expect("running mean is [C]"),
                );
                let sd_c = tape.constant(
                    denom
                        .into_shape_with_order(ndarray::IxDyn(&[self.channels, 1, 1]))
                        .expect("running var is [C]"),
                );
                let g3 = tape.reshape(g, &[self.channels, 1, 1]);
                let b3 = tape.reshape(beta, &[self.channels, 1, 1]);
                xs.iter()
                    .map(|&x| {
                        let c = tape.sub(x, rm_c);
                        let n = tape.div(c, sd_c);
                        let s = tape.mul(n, g3);
                        tape.add(s, b3)
                    })
                    .collect()
            }
        }
    }

    fn update_running<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &mut ParamStore<T>,
        mu: Var,
        var: Var,
        count: usize,
    ) {
        let m = T::c(self.momentum);
        let one_m = T::one() - m;
        // Unbiased variance for the running estimate.
        let corr = if count > 1 { T::c(count as f64 / (count as f64 - 1.0)) } else { T::one() };
        let mu_v = tape.value(mu).clone();
        let var_v = tape.value(var).clone();
        let rm = store.get_mut(&format!("{}.rm", self.name));
        for (i, r) in rm.iter_mut().enumerate() {
            *r = one_m * *r + m * mu_v[[0, i, 0, 0]];
        }
        let rv = store.get_mut(&format!("{}.rv", self.name));
        for (i, r) in rv.iter_mut().enumerate() {
            *r = one_m * *r + m * corr * var_v[[0, i, 0, 0]];
        }
    }
}

/// Fully connected layer on 1-D feature vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init_std: Option<f64>,
    ) -> Self {
        let std = init_std.unwrap_or_else(|| (1.0 / d_in as f64).sqrt());
        store.register(&format!("{name}.w"), normal_init(rng, &[d_out, d_in], std));
        if bias {
            store.register(&format!("{name}.b"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[d_out])));
        }
        Linear { name: name.to_string(), d_in, d_out, bias }
    }

    /// `x` is a `[d_in]` vector; returns `[d_out]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Var {
        assert_eq!(tape.shape(x), [self.d_in], "{}: input size mismatch", self.name);
        let w = bind.var(&format!("{}.w", self.name));
        let col = tape.reshape(x, &[self.d_in, 1]);
        let y = tape.matmul(w, col);
        let flat = tape.reshape(y, &[self.d_out]);
        if self.bias {
            let b = bind.var(&format!("{}.b", self.name));
            tape.add(flat, b)
        } else {
            flat
        }
    }
}

/// Inverted dropout: scales kept activations by 1/keep during training,
/// identity in inference mode.
pub fn dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut ChaCha12Rng,
) -> Var {
    if mode == Mode::Eval || rate == 0.0 {
        return x;
    }
    assert!(rate < 1.0, "dropout rate must be below 1");
    let keep = 1.0 - rate;
    let shape = tape.shape(x).to_vec();
    let mut mask = ndarray::ArrayD::<T>::zeros(ndarray::IxDyn(&shape));
    for v in mask.iter_mut() {
        if rand::Rng::random_bool(rng, keep) {
            *v = T::c(1.0 / keep);
        }
    }
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// Single-direction LSTM layer; state is reset to zero for every sequence.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub name: String,
    pub d_in: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        store.register(&format!("{name}.wi"), uniform_init(rng, &[4 * hidden, d_in], bound));
        store.register(&format!("{name}.wh"), uniform_init(rng, &[4 * hidden, hidden], bound));
        store.register(&format!("{name}.b"), ndarray::ArrayD::zeros(ndarray::IxDyn(&[4 * hidden])));
        Lstm { name: name.to_string(), d_in, hidden }
    }

    /// Runs over `seq` (each `[d_in]`), returning the hidden state after
    /// every step.
    pub fn forward_seq<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        seq: &[Var],
    ) -> Vec<Var> {
        let wi = bind.var(&format!("{}.wi", self.name));
        let wh = bind.var(&format!("{}.wh", self.name));
        let b = bind.var(&format!("{}.b", self.name));
        let b_col = tape.reshape(b, &[4 * self.hidden, 1]);
        let zeros = ndarray::ArrayD::zeros(ndarray::IxDyn(&[self.hidden, 1]));
        let mut h = tape.constant(zeros.clone());
        let mut c = tape.constant(zeros);
        let mut outs = Vec::with_capacity(seq.len());
        for &x in seq {
            assert_eq!(tape.shape(x), [self.d_in], "{}: input size mismatch", self.name);
            let xc = tape.reshape(x, &[self.d_in, 1]);
            let xi = tape.matmul(wi, xc);
            let hh = tape.matmul(wh, h);
            let s = tape.add(xi, hh);
            let gates = tape.add(s, b_col);
            let i_g = tape.slice_axis(gates, 0, 0, self.hidden);
            let f_g = tape.slice_axis(gates, 0, self.hidden, self.hidden);
            let g_g = tape.slice_axis(gates, 0, 2 * self.hidden, self.hidden);
            let o_g = tape.slice_axis(gates, 0, 3 * self.hidden, self.hidden);
            let i_s = tape.sigmoid(i_g);
            let f_s = tape.sigmoid(f_g);
            let g_t = tape.tanh(g_g);
            let o_s = tape.sigmoid(o_g);
            let fc = tape.mul(f_s, c);
            let ig = tape.mul(i_s, g_t);
            c = tape.add(fc, ig);
            let ct = tape.tanh(c);
            h = tape.mul(o_s, ct);
            outs.push(tape.reshape(h, &[self.hidden]));
        }
        outs
    }
}

/// Stack of bi-directional LSTM layers; per step the forward and backward
/// hidden states are concatenated.
#[derive(Debug, Clone)]
pub struct BiLstm {
    layers: Vec<(Lstm, Lstm)>,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        n_layers: usize,
    ) -> Self {
        let mut layers = Vec::new();
        let mut d = d_in;
        for l in 0..n_layers {
            let f = Lstm::new(store, rng, &format!("{name}.l{l}.fwd"), d, hidden);
            let b = Lstm::new(store, rng, &format!("{name}.l{l}.bwd"), d, hidden);
            layers.push((f, b));
            d = 2 * hidden;
        }
        BiLstm { layers, hidden }
    }

    /// Output dimensionality per step.
    pub fn d_out(&self) -> usize {
        2 * self.hidden
    }

    pub fn forward_seq<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        seq: &[Var],
    ) -> Vec<Var> {
        let mut current: Vec<Var> = seq.to_vec();
        for (fwd, bwd) in &self.layers {
            let f_out = fwd.forward_seq(tape, bind, &current);
            let rev: Vec<Var> = current.iter().rev().copied().collect();
            let mut b_out = bwd.forward_seq(tape, bind, &rev);
            b_out.reverse();
            current = f_out
                .iter()
                .zip(b_out.iter())
                .map(|(&f, &b)| tape.concat(0, &[f, b]))
                .collect();
        }
        current
    }
}
