//! Central finite-difference verification of tape gradients.
//!
//! Used by the unit tests of every tape operation and by the end-to-end
//! gradient checks of the warping pipeline. Always runs in `f64`.

use ndarray::ArrayD;
use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::{Tape, Var};

/// Worst-case disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    /// Max over checked elements of `|a - fd| / max(|a|, |fd|, 1e-3)`.
    /// The floor keeps finite-difference roundoff on near-zero gradients
    /// from registering as huge relative errors; for any gradient of
    /// meaningful size this is the plain relative error.
    pub max_rel: f64,
    /// Max absolute disagreement.
    pub max_abs: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

impl CheckReport {
    pub fn within(&self, rel_tol: f64) -> bool {
        self.max_rel < rel_tol
    }
}

fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3)
}

/// Checks analytic gradients of `build` against central differences on every
/// element of every input.
///
/// `build` must deterministically construct a 0-dimensional loss from leaf
/// variables handed to it in input order. It runs once per perturbed entry,
/// so keep the graphs small.
pub fn check_gradients(
    inputs: &[ArrayD<f64>],
    step: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> CheckReport {
    check_gradients_sampled(inputs, step, None, 0, build)
}

/// Like [`check_gradients`] but comparing at most `max_per_input` randomly
/// chosen entries of each input (deterministic in `seed`).
pub fn check_gradients_sampled(
    inputs: &[ArrayD<f64>],
    step: f64,
    max_per_input: Option<usize>,
    seed: u64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> CheckReport {
    // Backward passes through transposes can leave gradients in permuted
    // layouts; flat indexing below needs contiguous row-major storage.
    let inputs: Vec<ArrayD<f64>> =
        inputs.iter().map(|x| x.as_standard_layout().into_owned()).collect();
    let inputs = &inputs[..];
    let analytic: Vec<Option<ArrayD<f64>>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(tape.shape(loss).len(), 0, "gradient check requires a scalar loss");
        let mut grads = tape.backward(loss);
        vars.iter()
            .map(|&v| grads.take(v).map(|g| g.as_standard_layout().into_owned()))
            .collect()
    };

    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss)[[]]
    };

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let mut report = CheckReport { max_rel: 0.0, max_abs: 0.0, checked: 0 };
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let picks: Vec<usize> = match max_per_input {
            Some(k) if k < n => index_sample(&mut rng, n, k).into_iter().collect(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let x0 = inputs[i].as_slice().expect("standard layout")[j];
            set_flat(&mut work[i], j, x0 + step);
            let lp = eval(&work);
            set_flat(&mut work[i], j, x0 - step);
            let lm = eval(&work);
            set_flat(&mut work[i], j, x0);
            let fd = (lp - lm) / (2.0 * step);
            let a = analytic[i]
                .as_ref()
                .map(|g| g.as_slice().expect("standard layout")[j])
                .unwrap_or(0.0);
            report.max_rel = report.max_rel.max(rel_err(a, fd));
            report.max_abs = report.max_abs.max((a - fd).abs());
            report.checked += 1;
        }
    }
    report
}

fn set_flat(a: &mut ArrayD<f64>, j: usize, value: f64) {
    a.as_slice_mut().expect("standard layout")[j] = value;
}
