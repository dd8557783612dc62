//! Reverse-mode automatic differentiation on dynamically shaped arrays.
//!
//! A [`Tape`] records every operation as it executes. Operands are addressed
//! by [`Var`] handles (indices into the tape), so graphs can be built
//! incrementally by ordinary Rust code: loops, conditionals, helper
//! functions. Calling [`Tape::backward`] on a scalar output walks the record
//! in reverse and accumulates gradients for every variable that needs them.
//!
//! Elementwise binary ops broadcast like NumPy (shapes aligned from the
//! right, size-1 axes stretched); the corresponding gradients are
//! sum-reduced back to each operand's shape. Gradients for variables created
//! with [`Tape::constant`] are never materialized.

mod conv;
mod sample;

pub mod check;


pub use conv::{conv_out_dim, same_pad_ceil, same_pad_floor};
pub use sample::EDGE_EPS;

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Slice, Zip};

use crate::Scalar;

/// Handle to a value stored on a [`Tape`]. Cheap to copy; only meaningful
/// for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Index of this variable on its tape.
    pub fn index(self) -> usize {
        self.0
    }
}

type BackFn<T> = Box<dyn Fn(&mut BackCtx<'_, T>)>;

struct Node<T: Scalar> {
    /// Present iff this variable needs a gradient.
    back: Option<BackFn<T>>,
}

/// View of the backward pass handed to each node's backward closure.
pub struct BackCtx<'a, T: Scalar> {
    /// Gradient of the loss with respect to the node's output.
    gout: &'a ArrayD<T>,
    /// Forward values of the whole tape (closures may read their own output).
    vals: &'a [ArrayD<T>],
    /// Gradient slots for all variables with smaller index than the node;
    /// the split guarantees closures only write to their parents.
    grads: &'a mut [Option<ArrayD<T>>],
    /// Whether each variable needs a gradient at all.
    needs: &'a [bool],
}

impl<'a, T: Scalar> BackCtx<'a, T> {
    /// Returned references carry the tape lifetime, not the `&self` borrow,
    /// so closures can hold them across mutable [`BackCtx::accum`] calls.
    fn out_grad(&self) -> &'a ArrayD<T> {
        self.gout
    }

    fn val(&self, v: Var) -> &'a ArrayD<T> {
        let vals: &'a [ArrayD<T>] = self.vals;
        &vals[v.0]
    }

    /// Adds `g` into the gradient slot for `v`. No-op for constants.
    fn accum(&mut self, v: Var, g: ArrayD<T>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn accum_view(&mut self, v: Var, g: ArrayViewD<'_, T>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g.to_owned()),
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T: Scalar> {
    g: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss with respect to `v`, if one was accumulated.
    /// Constants and variables the loss does not depend on return `None`.
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.g.get(v.0).and_then(|s| s.as_ref())
    }

    /// Moves the gradient for `v` out of the store.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.g.get_mut(v.0).and_then(|s| s.take())
    }
}

/// Records a computation so it can be differentiated in reverse.
pub struct Tape<T: Scalar> {
    vals: Vec<ArrayD<T>>,
    nodes: Vec<Node<T>>,
    needs: Vec<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), nodes: Vec::new(), needs: Vec::new() }
    }

    /// Number of variables recorded so far.
    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Forward value of `v`.
    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.vals[v.0]
    }

    /// Shape of the forward value of `v`.
    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.0].shape()
    }

    /// Whether `v` participates in gradient computation.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Registers a differentiable input. Its gradient is available after
    /// [`Tape::backward`].
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, true, None)
    }

    /// Registers a value that gradients never flow into.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, false, None)
    }

    /// 0-dimensional constant.
    pub fn scalar(&mut self, x: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    fn push(&mut self, value: ArrayD<T>, needs: bool, back: Option<BackFn<T>>) -> Var {
        self.vals.push(value);
        self.needs.push(needs);
        self.nodes.push(Node { back });
        Var(self.vals.len() - 1)
    }

    /// Index the next pushed variable will get. Lets backward closures refer
    /// to their own output value.
    fn next_id(&self) -> usize {
        self.vals.len()
    }

    /// Accumulates gradients of the 0-dimensional `loss` with respect to
    /// every variable that needs one.
    ///
    /// The tape is left intact; values remain readable afterwards.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(
            self.vals[loss.0].ndim(),
            0,
            "backward requires a scalar (0-dimensional) loss"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[]), T::one()));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            let Some(back) = self.nodes[id].back.as_ref() else {
                continue;
            };
            // Parents of node `id` always have smaller indices, so the slice
            // split below hands the closure exactly the slots it may touch.
            let (before, rest) = grads.split_at_mut(id);
            let gout = rest[0].as_ref().expect("checked above");
            let mut ctx = BackCtx {
                gout,
                vals: &self.vals,
                grads: before,
                needs: &self.needs,
            };
            back(&mut ctx);
        }
        Grads { g: grads }
    }

    // ---- elementwise binary ops (broadcasting) ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_bin(&self.vals[a.0], &self.vals[b.0], |x, y| x + y);
        let (sa, sb) = (self.shape_vec(a), self.shape_vec(b));
        self.push_op(v, &[a, b], move |ctx| {
            let g = ctx.out_grad().clone();
            ctx.accum(a, reduce_to_shape(&g, &sa));
            ctx.accum(b, reduce_to_shape(&g, &sb));
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_bin(&self.vals[a.0], &self.vals[b.0], |x, y| x - y);
        let (sa, sb) = (self.shape_vec(a), self.shape_vec(b));
        self.push_op(v, &[a, b], move |ctx| {
            let g = ctx.out_grad();
            ctx.accum(a, reduce_to_shape(g, &sa));
            ctx.accum(b, reduce_to_shape(&g.mapv(|x| -x), &sb));
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_bin(&self.vals[a.0], &self.vals[b.0], |x, y| x * y);
        let (sa, sb) = (self.shape_vec(a), self.shape_vec(b));
        self.push_op(v, &[a, b], move |ctx| {
            let ga = broadcast_bin(ctx.out_grad(), ctx.val(b), |g, y| g * y);
            let gb = broadcast_bin(ctx.out_grad(), ctx.val(a), |g, x| g * x);
            ctx.accum(a, reduce_to_shape(&ga, &sa));
            ctx.accum(b, reduce_to_shape(&gb, &sb));
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_bin(&self.vals[a.0], &self.vals[b.0], |x, y| x / y);
        let (sa, sb) = (self.shape_vec(a), self.shape_vec(b));
        let oid = self.next_id();
        self.push_op(v, &[a, b], move |ctx| {
            let ga = broadcast_bin(ctx.out_grad(), ctx.val(b), |g, y| g / y);
            // d(a/b)/db = -(a/b)/b, reusing the forward output.
            let t = broadcast_bin(ctx.out_grad(), &ctx.vals[oid], |g, o| g * o);
            let gb = broadcast_bin(&t, ctx.val(b), |t, y| -(t / y));
            ctx.accum(a, reduce_to_shape(&ga, &sa));
            ctx.accum(b, reduce_to_shape(&gb, &sb));
        })
    }

    // ---- elementwise unary ops ----

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, |_, _| -T::one())
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sin(), |x, _| x.cos())
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.cos(), |x, _| -x.sin())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, o| o)
    }

    /// Natural logarithm. Inputs must be positive.
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |x, _| T::one() / x)
    }

    /// Square root. Inputs must be non-negative.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let half = T::c(0.5);
        self.unary(a, |x| x.sqrt(), move |_, o| half / o)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                // Evaluate on the side that keeps exp() from overflowing.
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            |_, o| o * (T::one() - o),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |_, o| T::one() - o * o)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            move |x| if x > T::zero() { x } else { slope * x },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    /// `ln(1 + exp(x))`, evaluated without overflow for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let thr = T::c(30.0);
        self.unary(
            a,
            move |x| {
                if x > thr {
                    x
                } else if x < -thr {
                    x.exp()
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
        )
    }

    /// Clamps to `[lo, hi]`; the gradient passes through inside the interval
    /// (boundaries included) and is zero outside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(
            a,
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    /// Multiplies by a plain scalar constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, move |x| x * c, move |_, _| c)
    }

    /// Adds a plain scalar constant.
    pub fn shift(&mut self, a: Var, c: T) -> Var {
        self.unary(a, move |x| x + c, |_, _| T::one())
    }

    /// `fwd` maps input to output; `dfdx(x, out)` is the local derivative,
    /// given the input and the already computed output.
    fn unary(
        &mut self,
        a: Var,
        fwd: impl Fn(T) -> T,
        dfdx: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let v = self.vals[a.0].mapv(&fwd);
        let oid = self.next_id();
        self.push_op(v, &[a], move |ctx| {
            let mut g = ctx.out_grad().clone();
            Zip::from(&mut g)
                .and(ctx.val(a))
                .and(&ctx.vals[oid])
                .for_each(|g, &x, &o| *g = *g * dfdx(x, o));
            ctx.accum(a, g);
        })
    }

    // ---- reductions ----

    /// Sum of all elements, as a 0-dimensional array.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.vals[a.0].iter().copied().sum();
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        let sa = self.shape_vec(a);
        self.push_op(v, &[a], move |ctx| {
            let g = ctx.out_grad()[[]];
            ctx.accum(a, ArrayD::from_elem(IxDyn(&sa), g));
        })
    }

    /// Mean of all elements, as a 0-dimensional array.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.vals[a.0].len();
        assert!(n > 0, "mean of an empty array");
        let inv = T::one() / T::c(n as f64);
        let s = self.sum_all(a);
        self.scale(s, inv)
    }

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut v = self.vals[a.0].clone();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &ax in sorted.iter().rev() {
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let sa = self.shape_vec(a);
        self.push_op(v, &[a], move |ctx| {
            let g = ctx
                .out_grad()
                .broadcast(IxDyn(&sa))
                .expect("keep-dims reduction gradient broadcasts to input shape")
                .to_owned();
            ctx.accum(a, g);
        })
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let shape = self.shape_vec(a);
        let mut n = 1usize;
        let mut seen: Vec<usize> = axes.to_vec();
        seen.sort_unstable();
        seen.dedup();
        for &ax in &seen {
            n *= shape[ax];
        }
        assert!(n > 0, "mean over empty axes");
        let s = self.sum_axes(a, axes);
        self.scale(s, T::one() / T::c(n as f64))
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.vals[a.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape must preserve element count");
        let sa = self.shape_vec(a);
        self.push_op(v, &[a], move |ctx| {
            let g = ctx
                .out_grad()
                .clone()
                .into_shape_with_order(IxDyn(&sa))
                .expect("gradient reshapes back to input shape");
            ctx.accum(a, g);
        })
    }

    /// Concatenates along `axis`. All inputs must agree on the other axes.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero arrays");
        let views: Vec<ArrayViewD<'_, T>> = parts.iter().map(|p| self.vals[p.0].view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat inputs must be compatible");
        let owned: Vec<Var> = parts.to_vec();
        let lens: Vec<usize> = parts.iter().map(|p| self.vals[p.0].shape()[axis]).collect();
        self.push_op(v, parts, move |ctx| {
            let mut start = 0isize;
            for (i, &p) in owned.iter().enumerate() {
                let len = lens[i] as isize;
                let g = ctx
                    .out_grad()
                    .slice_axis(Axis(axis), Slice::new(start, Some(start + len), 1));
                ctx.accum_view(p, g);
                start += len;
            }
        })
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.vals[a.0]
            .slice_axis(Axis(axis), Slice::new(start as isize, Some((start + len) as isize), 1))
            .to_owned();
        let sa = self.shape_vec(a);
        self.push_op(v, &[a], move |ctx| {
            let mut g = ArrayD::zeros(IxDyn(&sa));
            g.slice_axis_mut(Axis(axis), Slice::new(start as isize, Some((start + len) as isize), 1))
                .assign(ctx.out_grad());
            ctx.accum(a, g);
        })
    }

    /// 2-D matrix product: `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let am = as_2d(&self.vals[a.0]);
        let bm = as_2d(&self.vals[b.0]);
        assert_eq!(am.shape()[1], bm.shape()[0], "matmul inner dimensions must agree");
        let v = am.dot(&bm).into_dyn();
        self.push_op(v, &[a, b], move |ctx| {
            let g = as_2d(ctx.out_grad());
            let av = as_2d(ctx.val(a));
            let bv = as_2d(ctx.val(b));
            let ga = g.dot(&bv.t()).into_dyn();
            let gb = av.t().dot(&g).into_dyn();
            ctx.accum(a, ga);
            ctx.accum(b, gb);
        })
    }

    // ---- internals shared with conv.rs / sample.rs ----

    fn shape_vec(&self, v: Var) -> Vec<usize> {
        self.vals[v.0].shape().to_vec()
    }

    fn push_op(
        &mut self,
        value: ArrayD<T>,
        parents: &[Var],
        back: impl Fn(&mut BackCtx<'_, T>) + 'static,
    ) -> Var {
        let needs = parents.iter().any(|p| self.needs[p.0]);
        let back: Option<BackFn<T>> = if needs { Some(Box::new(back)) } else { None };
        self.vals.push(value);
        self.needs.push(needs);
        self.nodes.push(Node { back });
        Var(self.vals.len() - 1)
    }
}

/// Applies `f` elementwise after NumPy-style broadcasting.
fn broadcast_bin<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>, f: impl Fn(T, T) -> T) -> ArrayD<T> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a
        .broadcast(IxDyn(&shape))
        .unwrap_or_else(|| panic!("shape {:?} does not broadcast to {:?}", a.shape(), shape));
    let bv = b
        .broadcast(IxDyn(&shape))
        .unwrap_or_else(|| panic!("shape {:?} does not broadcast to {:?}", b.shape(), shape));
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Broadcast shape of two operands, aligned from the trailing axis.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {a:?} and {b:?} do not broadcast"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sums `g` down to `shape`: collapses leading broadcast axes, then sums
/// axes that were stretched from size 1.
fn reduce_to_shape<T: Scalar>(g: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, (&have, &want)) in out.shape().to_vec().iter().zip(shape).enumerate() {
        if have != want {
            debug_assert_eq!(want, 1, "gradient reduction target must be a broadcast shape");
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn as_2d<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("operand must be 2-dimensional")
}
