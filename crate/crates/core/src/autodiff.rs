//! Tape-based reverse-mode differentiation over row-major 2-D tensors.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`] handle.
//! [`Tape::backward`] walks the tape in reverse and returns a [`Gradients`]
//! table, which can then be folded into a [`ParamStore`](crate::params::ParamStore).
//!
//! Besides the usual dense-network ops, the tape carries the per-row
//! geometric kernels used by the frame-based layers: rotation vectors to
//! rotation matrices, Gram-Schmidt frames, batched `R p` / `Rᵀ p` over
//! groups of 3-vectors, relative rotations and pairwise dot products.
//! Rotations are stored row-major as 9 columns per row.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::params::ParamId;

pub type Tensor = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Arc<Tensor>),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Gather(Var, Arc<[usize]>),
    ScatterAdd(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>, usize),
    SumAll(Var),
    RotvecToRot(Var),
    GramSchmidtRot(Var, Var),
    RotTMul(Var, Var),
    RotApply(Var, Var),
    RotApplyT(Var, Var),
    PairDots(Var, Var),
    AddPoints(Var, Var),
    SoftmaxXent(Var, Arc<[Option<usize>]>, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Constant or differentiable input (gradients are reported for all leaves).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Param(id))
    }

    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `x W + b` with `b` a `1 × out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut value = self.value(x).dot(self.value(w));
        value += self.value(b);
        self.push(value, Op::Linear(x, w, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Scales row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) * self.value(col);
        self.push(value, Op::MulCol(a, col))
    }

    /// Elementwise product with a broadcastable constant.
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Var {
        let value = self.value(a) * &*c;
        self.push(value, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(silu);
        self.push(value, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat: row counts differ");
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn gather(&mut self, a: Var, rows: Arc<[usize]>) -> Var {
        let value = self.value(a).select(Axis(0), &rows);
        self.push(value, Op::Gather(a, rows))
    }

    /// Sums rows of `a` into `n_out` buckets: `out[idx[i]] += a[i]`.
    pub fn scatter_add(&mut self, a: Var, idx: Arc<[usize]>, n_out: usize) -> Var {
        let src = self.value(a);
        let mut value = Tensor::zeros((n_out, src.ncols()));
        for (row, &dst) in src.rows().into_iter().zip(idx.iter()) {
            let mut out = value.row_mut(dst);
            out += &row;
        }
        self.push(value, Op::ScatterAdd(a, idx))
    }

    /// Softmax of a column vector within groups sharing the same `seg` id.
    pub fn segment_softmax(&mut self, a: Var, seg: Arc<[usize]>, n_seg: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.ncols(), 1, "segment_softmax expects a column");
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for (i, &g) in seg.iter().enumerate() {
            max[g] = max[g].max(x[(i, 0)]);
        }
        let mut value = Tensor::zeros(x.dim());
        let mut denom = vec![0.0; n_seg];
        for (i, &g) in seg.iter().enumerate() {
            let e = (x[(i, 0)] - max[g]).exp();
            value[(i, 0)] = e;
            denom[g] += e;
        }
        for (i, &g) in seg.iter().enumerate() {
            value[(i, 0)] /= denom[g];
        }
        self.push(value, Op::SegmentSoftmax(a, seg, n_seg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    /// `n × 3` rotation vectors to `n × 9` rotation matrices.
    pub fn rotvec_to_rot(&mut self, r: Var) -> Var {
        let x = self.value(r);
        let mut value = Tensor::zeros((x.nrows(), 9));
        for (i, row) in x.rows().into_iter().enumerate() {
            let q = quat_from_rotvec([row[0], row[1], row[2]]);
            value.row_mut(i).assign(&ndarray::aview1(&quat_to_rot(q)));
        }
        self.push(value, Op::RotvecToRot(r))
    }

    /// Rotation with columns `[e1, e2, e3]` from Gram-Schmidt on `(u, v)` rows.
    pub fn gram_schmidt_rot(&mut self, u: Var, v: Var) -> Var {
        let (uu, vv) = (self.value(u), self.value(v));
        let mut value = Tensor::zeros((uu.nrows(), 9));
        for i in 0..uu.nrows() {
            let gs = GramSchmidt::new(row3(uu, i), row3(vv, i));
            for c in 0..3 {
                for k in 0..3 {
                    value[(i, k * 3 + c)] = gs.e[c][k];
                }
            }
        }
        self.push(value, Op::GramSchmidtRot(u, v))
    }

    /// Per-row `Aᵀ B` on `n × 9` rotations.
    pub fn rot_t_mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Tensor::zeros((av.nrows(), 9));
        for i in 0..av.nrows() {
            let (ra, rb) = (row9(av, i), row9(bv, i));
            for p in 0..3 {
                for q in 0..3 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += ra[k * 3 + p] * rb[k * 3 + q];
                    }
                    value[(i, p * 3 + q)] = acc;
                }
            }
        }
        self.push(value, Op::RotTMul(a, b))
    }

    /// Rotates every 3-vector of `points` (`n × 3m`) by the row's rotation.
    pub fn rot_apply(&mut self, rot: Var, points: Var) -> Var {
        let value = rot_points(self.value(rot), self.value(points), false);
        self.push(value, Op::RotApply(rot, points))
    }

    /// Like [`Tape::rot_apply`] with the transposed rotation.
    pub fn rot_apply_t(&mut self, rot: Var, points: Var) -> Var {
        let value = rot_points(self.value(rot), self.value(points), true);
        self.push(value, Op::RotApplyT(rot, points))
    }

    /// `out[a·m + b] = x_a · y_b` for the `m` 3-vectors of each row.
    pub fn pair_dots(&mut self, x: Var, y: Var) -> Var {
        let (xv, yv) = (self.value(x), self.value(y));
        let m = xv.ncols() / 3;
        let mut value = Tensor::zeros((xv.nrows(), m * m));
        for i in 0..xv.nrows() {
            for a in 0..m {
                for b in 0..m {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += xv[(i, 3 * a + k)] * yv[(i, 3 * b + k)];
                    }
                    value[(i, a * m + b)] = acc;
                }
            }
        }
        self.push(value, Op::PairDots(x, y))
    }

    /// Adds the row's 3-vector `t` to each of the `m` points.
    pub fn add_points(&mut self, points: Var, t: Var) -> Var {
        let (pv, tv) = (self.value(points), self.value(t));
        let mut value = pv.clone();
        let m = pv.ncols() / 3;
        for i in 0..pv.nrows() {
            for a in 0..m {
                for k in 0..3 {
                    value[(i, 3 * a + k)] += tv[(i, k)];
                }
            }
        }
        self.push(value, Op::AddPoints(points, t))
    }

    /// Mean softmax cross-entropy over labelled rows. Rows with `None` are ignored.
    ///
    /// Panics if no row is labelled; callers check this first.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Arc<[Option<usize>]>) -> Var {
        let x = self.value(logits);
        let count = targets.iter().filter(|t| t.is_some()).count();
        assert!(count > 0, "softmax_cross_entropy with no labelled rows");
        let mut total = 0.0;
        for (row, t) in x.rows().into_iter().zip(targets.iter()) {
            if let Some(t) = *t {
                total += log_sum_exp(row.as_slice().unwrap()) - row[t];
            }
        }
        let w = 1.0 / count as f64;
        let value = Tensor::from_elem((1, 1), total * w);
        self.push(value, Op::SoftmaxXent(logits, targets, w))
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::ones((1, 1)));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Linear(x, w, b) => {
                let dx = g.dot(&self.value(*w).t());
                let dw = self.value(*x).t().dot(g);
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, reduce_to(g, self.shape(*a)));
                acc(grads, *b, reduce_to(g, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let da = g * self.value(*b);
                let db = g * self.value(*a);
                acc(grads, *a, reduce_to(&da, self.shape(*a)));
                acc(grads, *b, reduce_to(&db, self.shape(*b)));
            }
            Op::MulCol(a, col) => {
                let da = g * self.value(*col);
                let dcol = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(grads, *a, da);
                acc(grads, *col, dcol);
            }
            Op::MulConst(a, c) => {
                let da = g * &**c;
                acc(grads, *a, reduce_to(&da, self.shape(*a)));
            }
            Op::Scale(a, s) => acc(grads, *a, g * *s),
            Op::Silu(a) => {
                let mut da = self.value(*a).mapv(|x| {
                    let sg = sigmoid(x);
                    sg * (1.0 + x * (1.0 - sg))
                });
                da *= g;
                acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let da = g * &y.mapv(|s| s * (1.0 - s));
                acc(grads, *a, da);
            }
            Op::Concat(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    acc(grads, *p, g.slice(s![.., c0..c0 + w]).to_owned());
                    c0 += w;
                }
            }
            Op::Gather(a, rows) => {
                let (n, c) = self.shape(*a);
                let mut da = Tensor::zeros((n, c));
                for (src, &r) in g.rows().into_iter().zip(rows.iter()) {
                    let mut out = da.row_mut(r);
                    out += &src;
                }
                acc(grads, *a, da);
            }
            Op::ScatterAdd(a, idx) => {
                let da = g.select(Axis(0), idx);
                acc(grads, *a, da);
            }
            Op::SegmentSoftmax(a, seg, n_seg) => {
                let y = &node.value;
                let mut dot = vec![0.0; *n_seg];
                for (e, &s) in seg.iter().enumerate() {
                    dot[s] += y[(e, 0)] * g[(e, 0)];
                }
                let mut da = Tensor::zeros(y.dim());
                for (e, &s) in seg.iter().enumerate() {
                    da[(e, 0)] = y[(e, 0)] * (g[(e, 0)] - dot[s]);
                }
                acc(grads, *a, da);
            }
            Op::SumAll(a) => {
                acc(grads, *a, Tensor::from_elem(self.shape(*a), g[(0, 0)]));
            }
            Op::RotvecToRot(r) => {
                let x = self.value(*r);
                let mut dr = Tensor::zeros(x.dim());
                for i in 0..x.nrows() {
                    let d = rotvec_rot_vjp(row3(x, i), row9(g, i));
                    for k in 0..3 {
                        dr[(i, k)] = d[k];
                    }
                }
                acc(grads, *r, dr);
            }
            Op::GramSchmidtRot(u, v) => {
                let (uu, vv) = (self.value(*u), self.value(*v));
                let mut du = Tensor::zeros(uu.dim());
                let mut dv = Tensor::zeros(vv.dim());
                for i in 0..uu.nrows() {
                    let gs = GramSchmidt::new(row3(uu, i), row3(vv, i));
                    let mut ge = [[0.0; 3]; 3];
                    for c in 0..3 {
                        for k in 0..3 {
                            ge[c][k] = g[(i, k * 3 + c)];
                        }
                    }
                    let (gu, gv) = gs.vjp(ge);
                    for k in 0..3 {
                        du[(i, k)] = gu[k];
                        dv[(i, k)] = gv[k];
                    }
                }
                acc(grads, *u, du);
                acc(grads, *v, dv);
            }
            Op::RotTMul(a, b) => {
                // C = AᵀB: dA = B Gᵀ, dB = A G.
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Tensor::zeros(av.dim());
                let mut db = Tensor::zeros(bv.dim());
                for i in 0..av.nrows() {
                    let (ra, rb, gi) = (row9(av, i), row9(bv, i), row9(g, i));
                    for p in 0..3 {
                        for q in 0..3 {
                            let (mut x, mut y) = (0.0, 0.0);
                            for k in 0..3 {
                                x += rb[p * 3 + k] * gi[q * 3 + k];
                                y += ra[p * 3 + k] * gi[k * 3 + q];
                            }
                            da[(i, p * 3 + q)] = x;
                            db[(i, p * 3 + q)] = y;
                        }
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::RotApply(rot, pts) | Op::RotApplyT(rot, pts) => {
                let transposed = matches!(node.op, Op::RotApplyT(..));
                let (rv, pv) = (self.value(*rot), self.value(*pts));
                let m = pv.ncols() / 3;
                let mut dr = Tensor::zeros(rv.dim());
                let dp = rot_points(rv, g, !transposed);
                for i in 0..rv.nrows() {
                    for a in 0..m {
                        for p in 0..3 {
                            for q in 0..3 {
                                // y = R p: dR[p][q] += g[p] x[q]; y = Rᵀ x: dR[q][p] += g[p] x[q].
                                let v = g[(i, 3 * a + p)] * pv[(i, 3 * a + q)];
                                if transposed {
                                    dr[(i, q * 3 + p)] += v;
                                } else {
                                    dr[(i, p * 3 + q)] += v;
                                }
                            }
                        }
                    }
                }
                acc(grads, *rot, dr);
                acc(grads, *pts, dp);
            }
            Op::PairDots(x, y) => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                let m = xv.ncols() / 3;
                let mut dx = Tensor::zeros(xv.dim());
                let mut dy = Tensor::zeros(yv.dim());
                for i in 0..xv.nrows() {
                    for a in 0..m {
                        for b in 0..m {
                            let gab = g[(i, a * m + b)];
                            if gab == 0.0 {
                                continue;
                            }
                            for k in 0..3 {
                                dx[(i, 3 * a + k)] += gab * yv[(i, 3 * b + k)];
                                dy[(i, 3 * b + k)] += gab * xv[(i, 3 * a + k)];
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *y, dy);
            }
            Op::AddPoints(pts, t) => {
                let m = g.ncols() / 3;
                let mut dt = Tensor::zeros((g.nrows(), 3));
                for i in 0..g.nrows() {
                    for a in 0..m {
                        for k in 0..3 {
                            dt[(i, k)] += g[(i, 3 * a + k)];
                        }
                    }
                }
                acc(grads, *pts, g.clone());
                acc(grads, *t, dt);
            }
            Op::SoftmaxXent(logits, targets, w) => {
                let x = self.value(*logits);
                let scale = g[(0, 0)] * w;
                let mut dx = Tensor::zeros(x.dim());
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = x.row(i);
                    let lse = log_sum_exp(row.as_slice().unwrap());
                    for c in 0..x.ncols() {
                        dx[(i, c)] = scale * (row[c] - lse).exp();
                    }
                    dx[(i, t)] -= scale;
                }
                acc(grads, *logits, dx);
            }
        }
    }
}

/// Sum-reduces a broadcast gradient back to `shape`.
fn reduce_to(g: &Tensor, shape: (usize, usize)) -> Tensor {
    let mut out = g.clone();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn row3(t: &Tensor, i: usize) -> [f64; 3] {
    [t[(i, 0)], t[(i, 1)], t[(i, 2)]]
}

fn row9(t: &Tensor, i: usize) -> [f64; 9] {
    let mut out = [0.0; 9];
    for (k, o) in out.iter_mut().enumerate() {
        *o = t[(i, k)];
    }
    out
}

fn rot_points(rot: &Tensor, pts: &Tensor, transposed: bool) -> Tensor {
    let m = pts.ncols() / 3;
    let mut out = Tensor::zeros(pts.dim());
    for i in 0..pts.nrows() {
        let r = row9(rot, i);
        for a in 0..m {
            for p in 0..3 {
                let mut acc = 0.0;
                for q in 0..3 {
                    let rpq = if transposed { r[q * 3 + p] } else { r[p * 3 + q] };
                    acc += rpq * pts[(i, 3 * a + q)];
                }
                out[(i, 3 * a + p)] = acc;
            }
        }
    }
    out
}

/// `sin(θ/2)/θ` and `(d/dθ)(sin(θ/2)/θ) / θ`, with series near zero.
fn half_sinc_terms(theta: f64) -> (f64, f64) {
    if theta < 1e-3 {
        let t2 = theta * theta;
        (0.5 - t2 / 48.0 + t2 * t2 / 3840.0, -1.0 / 24.0 + t2 / 960.0)
    } else {
        let (sh, ch) = (0.5 * theta).sin_cos();
        let s = sh / theta;
        let c = (0.5 * theta * ch - sh) / (theta * theta * theta);
        (s, c)
    }
}

fn quat_from_rotvec(r: [f64; 3]) -> [f64; 4] {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if theta < crate::frame::ROTVEC_ZERO_ANGLE {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let (s, _) = half_sinc_terms(theta);
    [(0.5 * theta).cos(), r[0] * s, r[1] * s, r[2] * s]
}

fn quat_to_rot([w, x, y, z]: [f64; 4]) -> [f64; 9] {
    [
        1.0 - 2.0 * y * y - 2.0 * z * z,
        2.0 * x * y - 2.0 * z * w,
        2.0 * x * z + 2.0 * y * w,
        2.0 * x * y + 2.0 * z * w,
        1.0 - 2.0 * x * x - 2.0 * z * z,
        2.0 * y * z - 2.0 * x * w,
        2.0 * x * z - 2.0 * y * w,
        2.0 * y * z + 2.0 * x * w,
        1.0 - 2.0 * x * x - 2.0 * y * y,
    ]
}

fn rotvec_rot_vjp(r: [f64; 3], g: [f64; 9]) -> [f64; 3] {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    let (s, c) = half_sinc_terms(theta);
    let [w, x, y, z] = [(0.5 * theta).cos(), r[0] * s, r[1] * s, r[2] * s];
    let dot = |m: [f64; 9]| m.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>();
    let gw = dot([0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0]);
    let gx = dot([0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x]);
    let gy = dot([-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y]);
    let gz = dot([-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0]);
    // w = cos(θ/2): ∂w/∂r = -(s/2) r.  v = s r: ∂v/∂r = s I + c r rᵀ.
    let gv = [gx, gy, gz];
    let rgv = r[0] * gv[0] + r[1] * gv[1] + r[2] * gv[2];
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = -0.5 * s * r[k] * gw + s * gv[k] + c * r[k] * rgv;
    }
    out
}

const GS_EPS: f64 = 1e-8;

struct GramSchmidt {
    u_norm: f64,
    w_norm: f64,
    v: [f64; 3],
    e: [[f64; 3]; 3],
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl GramSchmidt {
    fn new(u: [f64; 3], v: [f64; 3]) -> Self {
        let u_norm = dot3(u, u).sqrt() + GS_EPS;
        let e1 = u.map(|x| x / u_norm);
        let ve1 = dot3(v, e1);
        let w = [v[0] - ve1 * e1[0], v[1] - ve1 * e1[1], v[2] - ve1 * e1[2]];
        let w_norm = dot3(w, w).sqrt() + GS_EPS;
        let e2 = w.map(|x| x / w_norm);
        let e3 = cross3(e1, e2);
        Self {
            u_norm,
            w_norm,
            v,
            e: [e1, e2, e3],
        }
    }

    fn vjp(&self, g: [[f64; 3]; 3]) -> ([f64; 3], [f64; 3]) {
        let [e1, e2, _] = self.e;
        let mut g1 = g[0];
        let mut g2 = g[1];
        // e3 = e1 × e2
        let a = cross3(e2, g[2]);
        let b = cross3(g[2], e1);
        for k in 0..3 {
            g1[k] += a[k];
            g2[k] += b[k];
        }
        // e2 = w / (|w| + ε)
        let w: [f64; 3] = e2.map(|x| x * self.w_norm);
        let wn = self.w_norm - GS_EPS;
        let gw: [f64; 3] = if wn > 0.0 {
            let wg = dot3(w, g2);
            let mut out = [0.0; 3];
            for k in 0..3 {
                out[k] = g2[k] / self.w_norm - w[k] * wg / (self.w_norm * self.w_norm * wn);
            }
            out
        } else {
            g2.map(|x| x / self.w_norm)
        };
        // w = v - (v·e1) e1
        let ve1 = dot3(self.v, e1);
        let e1gw = dot3(e1, gw);
        let mut gv = [0.0; 3];
        for k in 0..3 {
            gv[k] = gw[k] - e1[k] * e1gw;
            g1[k] += -ve1 * gw[k] - e1gw * self.v[k];
        }
        // e1 = u / (|u| + ε)
        let un = self.u_norm - GS_EPS;
        let u: [f64; 3] = e1.map(|x| x * self.u_norm);
        let ug = dot3(u, g1);
        let mut gu = [0.0; 3];
        for k in 0..3 {
            gu[k] = g1[k] / self.u_norm;
            if un > 0.0 {
                gu[k] -= u[k] * ug / (self.u_norm * self.u_norm * un);
            }
        }
        (gu, gv)
    }
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, tape: &Tape, params: &mut crate::params::ParamStore) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                params.add_grad(*id, g);
            }
        }
    }
}
