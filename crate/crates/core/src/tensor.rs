//! Minimal reverse-mode automatic differentiation over 2-D f64 tensors.
//!
//! A [`Tape`] records a computation as a flat list of nodes; [`Tape::backward`]
//! walks it in reverse and accumulates gradients into every node flagged as
//! requiring them. The op set is exactly what the distance network needs:
//! dense layers, pointwise nonlinearities, row gather/scatter plumbing for
//! k-NN neighborhoods, and the reductions used by pooling and the loss.

use std::rc::Rc;

use ndarray::{Array2, Axis};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// x·w + b with b broadcast across rows.
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Softplus { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// Multiply by a compile-time constant.
    Scale { x: Var, c: f64 },
    /// Row-wise concatenation of equal-height blocks, left to right.
    ConcatCols { parts: Vec<Var> },
    /// Stack blocks of equal width on top of each other.
    ConcatRows { parts: Vec<Var> },
    /// y[r] = x[idx[r]].
    GatherRows { x: Var, idx: Rc<Vec<usize>> },
    /// Sum consecutive groups of `group` rows.
    SegmentSum { x: Var, group: usize },
    /// Repeat each row `times` consecutive times.
    RepeatRows { x: Var, times: usize },
    /// y[r, c] = x[r, c] * s[r, 0].
    RowScale { x: Var, s: Var },
    /// Broadcast a 1×d row to n×d.
    BroadcastRow { x: Var, rows: usize },
    /// n×d -> n×1 sum across each row.
    SumCols { x: Var },
    /// n×d -> 1×d column-wise max; `argmax` is the winning row per column.
    ColMax { x: Var, argmax: Vec<usize> },
    Sqrt { x: Var },
    Recip { x: Var },
    Abs { x: Var },
    /// n×d -> 1×1 mean over all entries.
    MeanAll { x: Var },
    /// y = x * s[0,0] with a 1×1 tensor s.
    MulScalar { x: Var, s: Var },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Values are immutable once created; gradients live
/// in a parallel buffer filled by [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite tensor");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn inherits(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf (parameter or input under differentiation).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.dim();
        (s.0, s.1)
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let val = self.nodes[x.0].value.dot(&self.nodes[w.0].value) + &self.nodes[b.0].value;
        let ng = self.inherits(&[x, w, b]);
        self.push(val, Op::Linear { x, w, b }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let val = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        let ng = self.inherits(&[x]);
        self.push(val, Op::Relu { x }, ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let val = self.nodes[x.0]
            .value
            .mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        let ng = self.inherits(&[x]);
        self.push(val, Op::Softplus { x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let val = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.inherits(&[a, b]);
        self.push(val, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let val = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.inherits(&[a, b]);
        self.push(val, Op::Sub { a, b }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let val = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.inherits(&[a, b]);
        self.push(val, Op::Mul { a, b }, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let val = self.nodes[x.0].value.mapv(|v| v * c);
        let ng = self.inherits(&[x]);
        self.push(val, Op::Scale { x, c }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut val = Array2::zeros((rows, total));
        let mut at = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            let w = pv.ncols();
            val.slice_mut(ndarray::s![.., at..at + w]).assign(pv);
            at += w;
        }
        let ng = self.inherits(parts);
        self.push(
            val,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut val = Array2::zeros((total, cols));
        let mut at = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            let h = pv.nrows();
            val.slice_mut(ndarray::s![at..at + h, ..]).assign(pv);
            at += h;
        }
        let ng = self.inherits(parts);
        self.push(
            val,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut val = Array2::zeros((idx.len(), xv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            val.row_mut(r).assign(&xv.row(i));
        }
        let ng = self.inherits(&[x]);
        self.push(val, Op::GatherRows { x, idx }, ng)
    }

    pub fn segment_sum(&mut self, x: Var, group: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.nrows() % group, 0, "rows must divide into groups");
        let out_rows = xv.nrows() / group;
        let mut val = Array2::zeros((out_rows, xv.ncols()));
        for r in 0..out_rows {
            for g in 0..group {
                let src = xv.row(r * group + g);
                let mut dst = val.row_mut(r);
                dst += &src;
            }
        }
        let ng = self.inherits(&[x]);
        self.push(val, Op::SegmentSum { x, group }, ng)
    }

    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut val = Array2::zeros((xv.nrows() * times, xv.ncols()));
        for r in 0..xv.nrows() {
            for t in 0..times {
                val.row_mut(r * times + t).assign(&xv.row(r));
            }
        }
        let ng = self.inherits(&[x]);
        self.push(val, Op::RepeatRows { x, times }, ng)
    }

    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let sv = &self.nodes[s.0].value;
        assert_eq!(sv.ncols(), 1);
        assert_eq!(sv.nrows(), xv.nrows());
        let mut val = xv.clone();
        for (mut row, sc) in val.axis_iter_mut(Axis(0)).zip(sv.column(0).iter()) {
            row.mapv_inplace(|v| v * sc);
        }
        let ng = self.inherits(&[x, s]);
        self.push(val, Op::RowScale { x, s }, ng)
    }

    pub fn broadcast_row(&mut self, x: Var, rows: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.nrows(), 1);
        let mut val = Array2::zeros((rows, xv.ncols()));
        for mut r in val.axis_iter_mut(Axis(0)) {
            r.assign(&xv.row(0));
        }
        let ng = self.inherits(&[x]);
        self.push(val, Op::BroadcastRow { x, rows }, ng)
    }

    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let sums = xv.sum_axis(Axis(1));
        let val = sums.insert_axis(Axis(1));
        let ng = self.inherits(&[x]);
        self.push(val, Op::SumCols { x }, ng)
    }

    pub fn col_max(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, d) = xv.dim();
        let mut val = Array2::zeros((1, d));
        let mut argmax = vec![0usize; d];
        for c in 0..d {
            let mut best = xv[(0, c)];
            let mut bi = 0usize;
            for r in 1..n {
                if xv[(r, c)] > best {
                    best = xv[(r, c)];
                    bi = r;
                }
            }
            val[(0, c)] = best;
            argmax[c] = bi;
        }
        let ng = self.inherits(&[x]);
        self.push(val, Op::ColMax { x, argmax }, ng)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let val = self.nodes[x.0].value.mapv(f64::sqrt);
        let ng = self.inherits(&[x]);
        self.push(val, Op::Sqrt { x }, ng)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let val = self.nodes[x.0].value.mapv(|v| 1.0 / v);
        let ng = self.inherits(&[x]);
        self.push(val, Op::Recip { x }, ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let val = self.nodes[x.0].value.mapv(f64::abs);
        let ng = self.inherits(&[x]);
        self.push(val, Op::Abs { x }, ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let m = xv.mean().expect("nonempty tensor");
        let val = Array2::from_elem((1, 1), m);
        let ng = self.inherits(&[x]);
        self.push(val, Op::MeanAll { x }, ng)
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.nodes[s.0].value[(0, 0)];
        let val = self.nodes[x.0].value.mapv(|v| v * sv);
        let ng = self.inherits(&[x, s]);
        self.push(val, Op::MulScalar { x, s }, ng)
    }

    fn accum(&mut self, v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Runs reverse-mode accumulation from `root`, which must be 1×1, with
    /// seed gradient `seed`. Gradients from a previous call are cleared.
    pub fn backward(&mut self, root: Var, seed: f64) {
        for g in &mut self.grads {
            *g = None;
        }
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        self.grads[root.0] = Some(Array2::from_elem((1, 1), seed));
        self.backward_from(root);
    }

    /// Reverse accumulation from `root` with an explicit gradient seed of the
    /// same shape as `root`'s value. Used when per-row outputs are
    /// independent and a whole batch can be seeded at once.
    pub fn backward_seeded(&mut self, root: Var, seed: Array2<f64>) {
        for g in &mut self.grads {
            *g = None;
        }
        assert_eq!(seed.dim(), self.nodes[root.0].value.dim());
        self.grads[root.0] = Some(seed);
        self.backward_from(root);
    }

    fn backward_from(&mut self, root: Var) {
        for i in (0..=root.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].take().expect("checked");
            self.dispatch(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn dispatch(&mut self, i: usize, g: &Array2<f64>) {
        // borrow bookkeeping: clone whatever parent values the rule needs
        // before accumulating; arrays are modest at desk scale
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xv = self.nodes[x.0].value.clone();
                let wv = self.nodes[w.0].value.clone();
                self.accum(x, g.dot(&wv.t()));
                self.accum(w, xv.t().dot(g));
                let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accum(b, gb);
            }
            Op::Relu { x } => {
                let x = *x;
                let mask = self.nodes[x.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.accum(x, g * &mask);
            }
            Op::Softplus { x } => {
                let x = *x;
                let sig = self.nodes[x.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
                self.accum(x, g * &sig);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, g.mapv(|v| -v));
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                self.accum(a, g * &bv);
                self.accum(b, g * &av);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                self.accum(x, g.mapv(|v| v * c));
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let w = self.shape(p).1;
                    let slice = g.slice(ndarray::s![.., at..at + w]).to_owned();
                    self.accum(p, slice);
                    at += w;
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let h = self.shape(p).0;
                    let slice = g.slice(ndarray::s![at..at + h, ..]).to_owned();
                    self.accum(p, slice);
                    at += h;
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let (n, d) = self.shape(x);
                let mut gx = Array2::zeros((n, d));
                for (r, &src) in idx.iter().enumerate() {
                    let mut row = gx.row_mut(src);
                    row += &g.row(r);
                }
                self.accum(x, gx);
            }
            Op::SegmentSum { x, group } => {
                let (x, group) = (*x, *group);
                let (n, d) = self.shape(x);
                let mut gx = Array2::zeros((n, d));
                for r in 0..n {
                    gx.row_mut(r).assign(&g.row(r / group));
                }
                self.accum(x, gx);
            }
            Op::RepeatRows { x, times } => {
                let (x, times) = (*x, *times);
                let (n, d) = self.shape(x);
                let mut gx = Array2::zeros((n, d));
                for r in 0..n {
                    for t in 0..times {
                        let mut row = gx.row_mut(r);
                        row += &g.row(r * times + t);
                    }
                }
                self.accum(x, gx);
            }
            Op::RowScale { x, s } => {
                let (x, s) = (*x, *s);
                let xv = self.nodes[x.0].value.clone();
                let sv = self.nodes[s.0].value.clone();
                let mut gx = g.clone();
                for (mut row, sc) in gx.axis_iter_mut(Axis(0)).zip(sv.column(0).iter()) {
                    row.mapv_inplace(|v| v * sc);
                }
                self.accum(x, gx);
                let gs_vec: Vec<f64> = g
                    .axis_iter(Axis(0))
                    .zip(xv.axis_iter(Axis(0)))
                    .map(|(gr, xr)| gr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum())
                    .collect();
                let gs = Array2::from_shape_vec((gs_vec.len(), 1), gs_vec).expect("shape");
                self.accum(s, gs);
            }
            Op::BroadcastRow { x, .. } => {
                let x = *x;
                let gx = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accum(x, gx);
            }
            Op::SumCols { x } => {
                let x = *x;
                let (n, d) = self.shape(x);
                let mut gx = Array2::zeros((n, d));
                for r in 0..n {
                    gx.row_mut(r).fill(g[(r, 0)]);
                }
                self.accum(x, gx);
            }
            Op::ColMax { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let (n, d) = self.shape(x);
                let mut gx = Array2::zeros((n, d));
                for (c, &r) in argmax.iter().enumerate() {
                    gx[(r, c)] = g[(0, c)];
                }
                self.accum(x, gx);
            }
            Op::Sqrt { x } => {
                let x = *x;
                let y = self.nodes[i].value.clone();
                self.accum(x, g * &y.mapv(|v| 0.5 / v));
            }
            Op::Recip { x } => {
                let x = *x;
                let y = self.nodes[i].value.clone();
                self.accum(x, g * &y.mapv(|v| -v * v));
            }
            Op::Abs { x } => {
                let x = *x;
                // subgradient at 0 defined as 0
                let sign = self.nodes[x.0].value.mapv(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accum(x, g * &sign);
            }
            Op::MeanAll { x } => {
                let x = *x;
                let (n, d) = self.shape(x);
                let gv = g[(0, 0)] / (n * d) as f64;
                self.accum(x, Array2::from_elem((n, d), gv));
            }
            Op::MulScalar { x, s } => {
                let (x, s) = (*x, *s);
                let sv = self.nodes[s.0].value[(0, 0)];
                let xv = self.nodes[x.0].value.clone();
                self.accum(x, g.mapv(|v| v * sv));
                let gs = (g * &xv).sum();
                self.accum(s, Array2::from_elem((1, 1), gs));
            }
        }
    }
}
