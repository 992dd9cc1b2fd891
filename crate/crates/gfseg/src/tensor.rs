//! Reverse-mode autodiff over `f64` ndarrays.
//!
//! A [`Tape`] records a computation as it runs; [`Tape::backward`] replays it
//! in reverse and accumulates gradients for every node that needs them.
//! Values are plain [`ArrayD<f64>`] so any intermediate can be inspected, and
//! the whole crate stays in double precision, which keeps analytic gradients
//! comparable to central finite differences (see [`check`]).
//!
//! Tapes are cheap and short-lived: a training step builds one, pushes the
//! current parameters as leaves, computes a scalar loss and reads the
//! gradients back out. Nothing here is thread-aware; callers that want
//! parallelism run one tape per thread.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

pub type Data = ArrayD<f64>;

type BackFn = Box<dyn Fn(&Data) -> Vec<Data>>;

struct Node {
    value: Rc<Data>,
    parents: Vec<usize>,
    needs_grad: bool,
    backward: Option<BackFn>,
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    tape: u64,
    index: usize,
}

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// A recorded computation graph.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by one backward pass, queryable by [`Var`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Data>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Data> {
        assert_eq!(v.tape, self.tape, "gradient queried with foreign Var");
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Data, parents: Vec<usize>, backward: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad =
            backward.is_some() && parents.iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            needs_grad,
            backward,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "Var used on a foreign tape");
        v.index
    }

    /// Insert a trainable leaf; gradients will be accumulated for it.
    pub fn leaf(&self, value: Data) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: vec![],
            needs_grad: true,
            backward: None,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    /// Insert a constant; no gradient flows into or out of it.
    pub fn constant(&self, value: Data) -> Var {
        self.push(value, vec![], None)
    }

    pub fn value(&self, v: Var) -> Rc<Data> {
        let i = self.idx(v);
        self.nodes.borrow()[i].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Extract a scalar node's value.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar value");
        *val.iter().next().unwrap()
    }

    /// Cut the gradient path: same value, no parents.
    pub fn detach(&self, v: Var) -> Var {
        let val = self.value(v);
        self.push((*val).clone(), vec![], None)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        let ri = self.idx(root);
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[ri].value.len(), 1, "backward root must be scalar");
        let n = nodes.len();
        let mut pending: Vec<Option<Data>> = (0..n).map(|_| None).collect();
        let mut done: Vec<Option<Data>> = (0..n).map(|_| None).collect();
        pending[ri] = Some(Data::ones(nodes[ri].value.raw_dim()));
        for i in (0..=ri).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &nodes[i];
            if let Some(back) = &node.backward {
                let parent_grads = back(&g);
                assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    if !nodes[p].needs_grad {
                        continue;
                    }
                    match &mut pending[p] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            done[i] = Some(g);
        }
        Gradients {
            tape: self.id,
            grads: done,
        }
    }

    // ---- elementwise / broadcasting ----

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(&Data, &Data) -> Data,
        back: impl Fn(&Data, &Data, &Data) -> (Data, Data) + 'static,
    ) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (self.value(a), self.value(b));
        let out = f(&av, &bv);
        let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
        self.push(
            out,
            vec![ai, bi],
            Some(Box::new(move |g| {
                let (ga, gb) = back(g, &av, &bv);
                vec![reduce_to_shape(ga, &ash), reduce_to_shape(gb, &bsh)]
            })),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| broadcast_apply(x, y, |u, v| u + v),
            |g, _, _| (g.clone(), g.clone()),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| broadcast_apply(x, y, |u, v| u - v),
            |g, _, _| (g.clone(), -g),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| broadcast_apply(x, y, |u, v| u * v),
            |g, av, bv| {
                (
                    broadcast_apply(g, bv, |u, v| u * v),
                    broadcast_apply(g, av, |u, v| u * v),
                )
            },
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        let ai = self.idx(a);
        let av = self.value(a);
        self.push(
            av.mapv(|x| -x),
            vec![ai],
            Some(Box::new(|g| vec![-g])),
        )
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let ai = self.idx(a);
        let av = self.value(a);
        self.push(
            av.mapv(|x| x + s),
            vec![ai],
            Some(Box::new(|g| vec![g.clone()])),
        )
    }

    pub fn mul_scalar(&self, a: Var, s: f64) -> Var {
        let ai = self.idx(a);
        let av = self.value(a);
        self.push(
            av.mapv(|x| x * s),
            vec![ai],
            Some(Box::new(move |g| vec![g.mapv(|x| x * s)])),
        )
    }

    /// Elementwise product with a constant array (broadcastable).
    pub fn mul_const(&self, a: Var, c: Data) -> Var {
        let ai = self.idx(a);
        let av = self.value(a);
        let ash = av.shape().to_vec();
        let out = broadcast_apply(&av, &c, |u, v| u * v);
        self.push(
            out,
            vec![ai],
            Some(Box::new(move |g| {
                vec![reduce_to_shape(broadcast_apply(g, &c, |u, v| u * v), &ash)]
            })),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let ai = self.idx(a);
        let av = self.value(a);
        let out = av.mapv(|x| x.max(0.0));
        self.push(
            out,
            vec![ai],
            Some(Box::new(move |g| {
                let mut ga = g.clone();
                ga.zip_mut_with(&av, |gi, &x| {
                    if x <= 0.0 {
                        *gi = 0.0;
                    }
                });
                vec![ga]
            })),
        )
    }

    /// |x|, with subgradient 0 at exactly 0.
    pub fn abs(&self, a: Var) -> Var {
        let ai = self.idx(a);
        let av = self.value(a);
        let out = av.mapv(f64::abs);
        self.push(
            out,
            vec![ai],
            Some(Box::new(move |g| {
                let mut ga = g.clone();
                ga.zip_mut_with(&av, |gi, &x| {
                    *gi *= if x == 0.0 { 0.0 } else { x.signum() };
                });
                vec![ga]
            })),
        )
    }

    // ---- shape ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let ai = self.idx(a);
        let av = self.value(a);
        let old: Vec<usize> = av.shape().to_vec();
        let out = (*av)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible element count");
        self.push(
            out,
            vec![ai],
            Some(Box::new(move |g| {
                vec![g
                    .clone()
                    .into_shape_with_order(IxDyn(&old))
                    .expect("reshape backward")]
            })),
        )
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let ai = self.idx(a);
        let av = self.value(a);
        let out = av
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            out,
            vec![ai],
            Some(Box::new(move |g| {
                vec![g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    /// 2-D transpose.
    pub fn t(&self, a: Var) -> Var {
        self.permute(a, &[1, 0])
    }

    pub fn concat(&self, axis: usize, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let idxs: Vec<usize> = vars.iter().map(|&v| self.idx(v)).collect();
        let vals: Vec<Rc<Data>> = vars.iter().map(|&v| self.value(v)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(axis), &views).expect("concat: shapes differ off-axis");
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            out,
            idxs,
            Some(Box::new(move |g| {
                let mut parts = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &s in &sizes {
                    let part = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + s))
                        .to_owned();
                    parts.push(part);
                    start += s;
                }
                parts
            })),
        )
    }

    /// Select a subset of entries along an axis (gather).
    pub fn select(&self, a: Var, axis: usize, indices: &[usize]) -> Var {
        let ai = self.idx(a);
        let av = self.value(a);
        let out = av.select(Axis(axis), indices);
        let shape = av.shape().to_vec();
        let idx: Vec<usize> = indices.to_vec();
        self.push(
            out,
            vec![ai],
            Some(Box::new(move |g| {
                let mut ga = Data::zeros(IxDyn(&shape));
                for (k, &i) in idx.iter().enumerate() {
                    let mut dst = ga.index_axis_mut(Axis(axis), i);
                    dst += &g.index_axis(Axis(axis), k);
                }
                vec![ga]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Var {
        let ai = self.idx(a);
        let av = self.value(a);
        let shape = av.shape().to_vec();
        self.push(
            ndarray::arr0(av.sum()).into_dyn(),
            vec![ai],
            Some(Box::new(move |g| {
                let s = *g.iter().next().unwrap();
                vec![Data::from_elem(IxDyn(&shape), s)]
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        let ai = self.idx(a);
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out = av.sum_axis(Axis(axis));
        self.push(
            out,
            vec![ai],
            Some(Box::new(move |g| {
                let expanded = g.view().insert_axis(Axis(axis));
                vec![expanded
                    .broadcast(IxDyn(&shape))
                    .expect("sum_axis backward broadcast")
                    .to_owned()]
            })),
        )
    }

    // ---- linear algebra ----

    /// 2-D matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (self.value(a), self.value(b));
        let a2 = as2(&av);
        let b2 = as2(&bv);
        assert_eq!(a2.shape()[1], b2.shape()[0], "matmul inner dims");
        let out = a2.dot(&b2).into_dyn();
        self.push(
            out,
            vec![ai, bi],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let a2 = as2(&av);
                let b2 = as2(&bv);
                let ga = g2.dot(&b2.t()).into_dyn();
                let gb = a2.t().dot(&g2).into_dyn();
                vec![ga, gb]
            })),
        )
    }

    /// Rows scaled to unit L2 norm, guarded below by `eps`.
    pub fn normalize_rows(&self, a: Var, eps: f64) -> Var {
        let ai = self.idx(a);
        let av = self.value(a);
        let a2 = as2(&av);
        let mut out = a2.clone();
        let mut norms = Vec::with_capacity(a2.shape()[0]);
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            let d = n.max(eps);
            row.mapv_inplace(|x| x / d);
            norms.push(n);
        }
        self.push(
            out.into_dyn(),
            vec![ai],
            Some(Box::new(move |g| {
                let g2 = as2(g);
                let a2 = as2(&av);
                let mut ga = Array2::<f64>::zeros(g2.raw_dim());
                for (i, n) in norms.iter().enumerate() {
                    let gr = g2.row(i);
                    if *n >= eps {
                        let u = a2.row(i).mapv(|x| x / n);
                        let dot = gr.dot(&u);
                        let mut dst = ga.row_mut(i);
                        for j in 0..dst.len() {
                            dst[j] = (gr[j] - dot * u[j]) / n;
                        }
                    } else {
                        let mut dst = ga.row_mut(i);
                        for j in 0..dst.len() {
                            dst[j] = gr[j] / eps;
                        }
                    }
                }
                vec![ga.into_dyn()]
            })),
        )
    }

    // ---- softmax family ----

    pub fn softmax(&self, a: Var, axis: usize) -> Var {
        let ai = self.idx(a);
        let av = self.value(a);
        let out = softmax_data(&av, axis);
        let p = out.clone();
        self.push(
            out,
            vec![ai],
            Some(Box::new(move |g| {
                let gp = g * &p;
                let dot = gp.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let ga = &gp - &(&p * &dot.broadcast(p.raw_dim()).unwrap());
                vec![ga]
            })),
        )
    }

    pub fn log_softmax(&self, a: Var, axis: usize) -> Var {
        let ai = self.idx(a);
        let av = self.value(a);
        let out = log_softmax_data(&av, axis);
        let y = out.clone();
        self.push(
            out,
            vec![ai],
            Some(Box::new(move |g| {
                let gsum = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let p = y.mapv(f64::exp);
                let ga = g - &(&p * &gsum.broadcast(p.raw_dim()).unwrap());
                vec![ga]
            })),
        )
    }

    /// Mean negative log-likelihood over rows of `logp` (P×C), with target
    /// index `-1` marking ignored rows. Panics if no row is valid; callers
    /// validate that case and produce a domain error first.
    pub fn nll_mean(&self, logp: Var, targets: Rc<Vec<i32>>) -> Var {
        let ai = self.idx(logp);
        let av = self.value(logp);
        let a2 = as2(&av);
        let (rows, cols) = (a2.shape()[0], a2.shape()[1]);
        assert_eq!(rows, targets.len(), "nll_mean target count");
        let mut total = 0.0;
        let mut valid = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            let t = t as usize;
            assert!(t < cols, "nll_mean target out of range");
            total -= a2[[r, t]];
            valid += 1;
        }
        assert!(valid > 0, "nll_mean on fully-ignored batch");
        let nvalid = valid as f64;
        let shape = vec![rows, cols];
        self.push(
            ndarray::arr0(total / nvalid).into_dyn(),
            vec![ai],
            Some(Box::new(move |g| {
                let s = *g.iter().next().unwrap();
                let mut ga = Array2::<f64>::zeros((shape[0], shape[1]));
                for (r, &t) in targets.iter().enumerate() {
                    if t >= 0 {
                        ga[[r, t as usize]] = -s / nvalid;
                    }
                }
                vec![ga.into_dyn()]
            })),
        )
    }

    // ---- structured ops ----

    /// 2-D convolution over (B, C_in, H, W) with kernel (C_out, C_in, k, k),
    /// bias (C_out), fixed padding `pad` and stride `stride`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xi, wi, bi) = (self.idx(x), self.idx(w), self.idx(b));
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let out = nn::conv2d_forward(&as4(&xv), &as4(&wv), &as1(&bv), stride, pad);
        self.push(
            out.into_dyn(),
            vec![xi, wi, bi],
            Some(Box::new(move |g| {
                let (gx, gw, gb) =
                    nn::conv2d_backward(&as4(g), &as4(&xv), &as4(&wv), stride, pad);
                vec![gx.into_dyn(), gw.into_dyn(), gb.into_dyn()]
            })),
        )
    }

    /// Layer norm across the channel axis of (B, C, H, W), one (γ, β) pair
    /// per channel.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xi, gi, bi) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let out = nn::layer_norm_forward(&as4(&xv), &as1(&gv), &as1(&bv), eps);
        self.push(
            out.into_dyn(),
            vec![xi, gi, bi],
            Some(Box::new(move |g| {
                let (gx, gg, gb) =
                    nn::layer_norm_backward(&as4(g), &as4(&xv), &as1(&gv), eps);
                vec![gx.into_dyn(), gg.into_dyn(), gb.into_dyn()]
            })),
        )
    }

    /// Bilinear upsampling of (B, C, H, W) by an integer factor
    /// (half-pixel corner convention, borders clamped).
    pub fn upsample_bilinear(&self, x: Var, factor: usize) -> Var {
        let xi = self.idx(x);
        let xv = self.value(x);
        let out = nn::upsample_forward(&as4(&xv), factor);
        let in_shape: Vec<usize> = xv.shape().to_vec();
        self.push(
            out.into_dyn(),
            vec![xi],
            Some(Box::new(move |g| {
                vec![nn::upsample_backward(&as4(g), &in_shape, factor).into_dyn()]
            })),
        )
    }
}

// ---- pure-array helpers ----

fn as1(d: &Data) -> Array1<f64> {
    d.view().into_dimensionality::<Ix1>().unwrap().to_owned()
}

fn as2(d: &Data) -> Array2<f64> {
    d.view().into_dimensionality::<Ix2>().unwrap().to_owned()
}

fn as4(d: &Data) -> Array4<f64> {
    d.view().into_dimensionality::<Ix4>().unwrap().to_owned()
}

/// Apply an elementwise op over two arrays with numpy-style broadcasting.
fn broadcast_apply(a: &Data, b: &Data, f: impl Fn(f64, f64) -> f64) -> Data {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("lhs not broadcastable");
    let bv = b.broadcast(IxDyn(&shape)).expect("rhs not broadcastable");
    let mut out = av.to_owned();
    out.zip_mut_with(&bv, |x, &y| *x = f(*x, y));
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let ad = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let bd = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            ad == bd || ad == 1 || bd == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = ad.max(bd);
    }
    out
}

/// Sum a broadcasted gradient back down to the original operand shape.
fn reduce_to_shape(mut grad: Data, shape: &[usize]) -> Data {
    while grad.ndim() > shape.len() {
        grad = grad.sum_axis(Axis(0));
    }
    for (i, &s) in shape.iter().enumerate() {
        if grad.shape()[i] != s {
            debug_assert_eq!(s, 1);
            grad = grad.sum_axis(Axis(i)).insert_axis(Axis(i)).to_owned();
        }
    }
    grad
}

/// Numerically stable softmax along one axis (plain array version).
pub fn softmax_data(x: &Data, axis: usize) -> Data {
    let maxes = x.fold_axis(Axis(axis), f64::NEG_INFINITY, |m, &v| m.max(v));
    let maxes = maxes.insert_axis(Axis(axis));
    let mut e = x - &maxes.broadcast(x.raw_dim()).unwrap();
    e.mapv_inplace(f64::exp);
    let sums = e.sum_axis(Axis(axis)).insert_axis(Axis(axis));
    &e / &sums.broadcast(e.raw_dim()).unwrap()
}

/// Numerically stable log-softmax along one axis (plain array version).
pub fn log_softmax_data(x: &Data, axis: usize) -> Data {
    let maxes = x.fold_axis(Axis(axis), f64::NEG_INFINITY, |m, &v| m.max(v));
    let maxes = maxes.insert_axis(Axis(axis));
    let shifted = x - &maxes.broadcast(x.raw_dim()).unwrap();
    let lse = shifted
        .mapv(f64::exp)
        .sum_axis(Axis(axis))
        .mapv(f64::ln)
        .insert_axis(Axis(axis));
    &shifted - &lse.broadcast(x.raw_dim()).unwrap()
}

/// Dense layer primitives shared by the tape ops and no-grad callers.
pub mod nn {
    use ndarray::{Array1, Array2, Array4};

    /// im2col for one sample: (C·k·k, H_out·W_out).
    fn im2col(
        x: &ndarray::ArrayView3<f64>,
        k: usize,
        stride: usize,
        pad: usize,
        ho: usize,
        wo: usize,
    ) -> Array2<f64> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ci * k * k + ky * k + kx;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[[row, oy * wo + ox]] = x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(
        cols: &Array2<f64>,
        c: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
        ho: usize,
        wo: usize,
    ) -> ndarray::Array3<f64> {
        let mut x = ndarray::Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ci * k * k + ky * k + kx;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[[ci, iy as usize, ix as usize]] += cols[[row, oy * wo + ox]];
                        }
                    }
                }
            }
        }
        x
    }

    pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
        (h + 2 * pad - k) / stride + 1
    }

    pub fn conv2d_forward(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: &Array1<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (bs, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, cin_w, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(wd, k, stride, pad);
        let wmat = w.view().into_shape_with_order((cout, cin * k * k)).unwrap();
        let mut out = Array4::<f64>::zeros((bs, cout, ho, wo));
        for bi in 0..bs {
            let cols = im2col(&x.index_axis(ndarray::Axis(0), bi), k, stride, pad, ho, wo);
            let y = wmat.dot(&cols);
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        out[[bi, co, oy, ox]] = y[[co, oy * wo + ox]] + b[co];
                    }
                }
            }
        }
        out
    }

    pub fn conv2d_backward(
        g: &Array4<f64>,
        x: &Array4<f64>,
        w: &Array4<f64>,
        stride: usize,
        pad: usize,
    ) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
        let (bs, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let (ho, wo) = (g.shape()[2], g.shape()[3]);
        let wmat = w.view().into_shape_with_order((cout, cin * k * k)).unwrap();
        let mut gx = Array4::<f64>::zeros(x.raw_dim());
        let mut gw = Array2::<f64>::zeros((cout, cin * k * k));
        let mut gb = Array1::<f64>::zeros(cout);
        for bi in 0..bs {
            let gb_view = g.index_axis(ndarray::Axis(0), bi);
            let gmat = gb_view.into_shape_with_order((cout, ho * wo)).unwrap();
            let cols = im2col(&x.index_axis(ndarray::Axis(0), bi), k, stride, pad, ho, wo);
            gw = gw + gmat.dot(&cols.t());
            let gcols = wmat.t().dot(&gmat);
            let gxi = col2im(&gcols, cin, h, wd, k, stride, pad, ho, wo);
            gx.index_axis_mut(ndarray::Axis(0), bi).assign(&gxi);
            gb = gb + gmat.sum_axis(ndarray::Axis(1));
        }
        let gw = gw.into_shape_with_order((cout, cin, k, k)).unwrap();
        (gx, gw, gb)
    }

    pub fn layer_norm_forward(
        x: &Array4<f64>,
        gamma: &Array1<f64>,
        beta: &Array1<f64>,
        eps: f64,
    ) -> Array4<f64> {
        let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut out = Array4::<f64>::zeros(x.raw_dim());
        for bi in 0..bs {
            for y in 0..h {
                for xx in 0..w {
                    let mut mean = 0.0;
                    for ci in 0..c {
                        mean += x[[bi, ci, y, xx]];
                    }
                    mean /= c as f64;
                    let mut var = 0.0;
                    for ci in 0..c {
                        let d = x[[bi, ci, y, xx]] - mean;
                        var += d * d;
                    }
                    var /= c as f64;
                    let s = (var + eps).sqrt();
                    for ci in 0..c {
                        out[[bi, ci, y, xx]] =
                            (x[[bi, ci, y, xx]] - mean) / s * gamma[ci] + beta[ci];
                    }
                }
            }
        }
        out
    }

    pub fn layer_norm_backward(
        g: &Array4<f64>,
        x: &Array4<f64>,
        gamma: &Array1<f64>,
        eps: f64,
    ) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
        let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let cf = c as f64;
        let mut gx = Array4::<f64>::zeros(x.raw_dim());
        let mut gg = Array1::<f64>::zeros(c);
        let mut gb = Array1::<f64>::zeros(c);
        for bi in 0..bs {
            for y in 0..h {
                for xx in 0..w {
                    let mut mean = 0.0;
                    for ci in 0..c {
                        mean += x[[bi, ci, y, xx]];
                    }
                    mean /= cf;
                    let mut var = 0.0;
                    for ci in 0..c {
                        let d = x[[bi, ci, y, xx]] - mean;
                        var += d * d;
                    }
                    var /= cf;
                    let s = (var + eps).sqrt();
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    let mut xh = vec![0.0; c];
                    let mut dxh = vec![0.0; c];
                    for ci in 0..c {
                        xh[ci] = (x[[bi, ci, y, xx]] - mean) / s;
                        let gi = g[[bi, ci, y, xx]];
                        gg[ci] += gi * xh[ci];
                        gb[ci] += gi;
                        dxh[ci] = gi * gamma[ci];
                        sum_dxh += dxh[ci];
                        sum_dxh_xh += dxh[ci] * xh[ci];
                    }
                    for ci in 0..c {
                        gx[[bi, ci, y, xx]] =
                            (dxh[ci] - sum_dxh / cf - xh[ci] * sum_dxh_xh / cf) / s;
                    }
                }
            }
        }
        (gx, gg, gb)
    }

    /// Source coordinate and lerp weights for one output index
    /// (half-pixel convention, clamped to the border).
    fn lerp_coords(o: usize, factor: usize, size: usize) -> (usize, usize, f64) {
        let src = (o as f64 + 0.5) / factor as f64 - 0.5;
        let lo = src.floor();
        let t = src - lo;
        let i0 = lo.max(0.0) as usize;
        let i1 = (lo as isize + 1).clamp(0, size as isize - 1) as usize;
        let i0 = i0.min(size - 1);
        (i0, i1, t)
    }

    pub fn upsample_forward(x: &Array4<f64>, factor: usize) -> Array4<f64> {
        let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Array4::<f64>::zeros((bs, c, ho, wo));
        for oy in 0..ho {
            let (y0, y1, ty) = lerp_coords(oy, factor, h);
            for ox in 0..wo {
                let (x0, x1, tx) = lerp_coords(ox, factor, w);
                for bi in 0..bs {
                    for ci in 0..c {
                        let v00 = x[[bi, ci, y0, x0]];
                        let v01 = x[[bi, ci, y0, x1]];
                        let v10 = x[[bi, ci, y1, x0]];
                        let v11 = x[[bi, ci, y1, x1]];
                        out[[bi, ci, oy, ox]] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                            + ty * ((1.0 - tx) * v10 + tx * v11);
                    }
                }
            }
        }
        out
    }

    pub fn upsample_backward(g: &Array4<f64>, in_shape: &[usize], factor: usize) -> Array4<f64> {
        let (bs, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (ho, wo) = (g.shape()[2], g.shape()[3]);
        let mut gx = Array4::<f64>::zeros((bs, c, h, w));
        for oy in 0..ho {
            let (y0, y1, ty) = lerp_coords(oy, factor, h);
            for ox in 0..wo {
                let (x0, x1, tx) = lerp_coords(ox, factor, w);
                for bi in 0..bs {
                    for ci in 0..c {
                        let gi = g[[bi, ci, oy, ox]];
                        gx[[bi, ci, y0, x0]] += gi * (1.0 - ty) * (1.0 - tx);
                        gx[[bi, ci, y0, x1]] += gi * (1.0 - ty) * tx;
                        gx[[bi, ci, y1, x0]] += gi * ty * (1.0 - tx);
                        gx[[bi, ci, y1, x1]] += gi * ty * tx;
                    }
                }
            }
        }
        gx
    }
}

/// Central finite-difference checking of tape gradients.
///
/// The oracle here is the difference quotient itself: it never touches the
/// backward pass it is judging.
pub mod check {
    use super::Data;

    /// Max relative error between an analytic gradient and central finite
    /// differences of `f` around `inputs[which]`.
    ///
    /// `f` must rebuild the computation from plain values. Components where
    /// both sides are below `1e-6` in magnitude are treated as matching.
    pub fn finite_diff_rel_err(
        f: &dyn Fn(&[Data]) -> f64,
        inputs: &[Data],
        which: usize,
        analytic: &Data,
        step: f64,
    ) -> f64 {
        let mut worst = 0.0f64;
        let base = inputs[which].clone();
        let mut probe: Vec<Data> = inputs.to_vec();
        for idx in 0..base.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            {
                let p = plus.as_slice_mut().unwrap();
                p[idx] += step;
                let m = minus.as_slice_mut().unwrap();
                m[idx] -= step;
            }
            probe[which] = plus;
            let fp = f(&probe);
            probe[which] = minus;
            let fm = f(&probe);
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.as_slice().unwrap()[idx];
            let denom = a.abs().max(numeric.abs());
            if denom < 1e-6 {
                continue;
            }
            let err = (a - numeric).abs() / denom.max(1e-12);
            if err > worst {
                worst = err;
            }
        }
        probe[which] = base;
        worst
    }
}
