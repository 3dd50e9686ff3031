//! Reverse-mode gradient tape over batched `f64` arrays.
//!
//! The tape is deliberately small: it supports exactly the primitives the
//! learners compose (affine layers bound to a [`ParamVector`], rectifier,
//! tanh, log, exp, square, clamp, elementwise arithmetic, column slicing
//! and concatenation, row sums, and means). Values are `(batch, features)`
//! matrices; a scalar loss is a `(1, 1)` node. Shape violations inside a
//! graph are programmer errors and panic; a non-finite loss is reported as
//! an error naming the offending intermediate.

use ndarray::{Array2, ArrayView2};

use crate::nn::ParamVector;
use crate::{Error, Result};

/// Handle to a value node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Handle to a parameter vector registered with the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSet(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    /// `y = x W_l^T + b_l` for layer `l` of parameter set `set`.
    Affine { set: usize, layer: usize, x: usize },
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Elementwise minimum; ties route the gradient to the first argument.
    Min(usize, usize),
    /// `y = k * x + c` with scalar constants; only `k` matters going backward.
    AffineScalar { x: usize, k: f64 },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols(Vec<usize>),
    /// `(n, d) -> (n, 1)` sum over columns.
    RowSum(usize),
    /// `(n, d) -> (1, 1)` mean over all elements.
    Mean(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Clamp { .. } => "clamp",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Min(..) => "min",
            Op::AffineScalar { .. } => "affine_scalar",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::RowSum(_) => "row_sum",
            Op::Mean(_) => "mean",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A single-use computation tape. Build the graph, then call
/// [`Tape::backward`] once for the gradients.
pub struct Tape<'p> {
    params: Vec<&'p ParamVector>,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { params: Vec::new(), nodes: Vec::new() }
    }

    /// Registers a parameter vector; affine nodes refer to it by the
    /// returned handle.
    pub fn add_params(&mut self, pv: &'p ParamVector) -> ParamSet {
        self.params.push(pv);
        ParamSet(self.params.len() - 1)
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        self.nodes[id.0].value.view()
    }

    /// Scalar value of a `(1, 1)` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[[0, 0]]
    }

    pub fn affine(&mut self, set: ParamSet, layer: usize, x: NodeId) -> NodeId {
        let pv = self.params[set.0];
        let l = pv.shape().layers()[layer];
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.ncols(), l.cols, "affine input width");
        let w = pv.weight_view(layer);
        let b = pv.bias(layer);
        let mut y = xv.dot(&w.t());
        for mut row in y.rows_mut() {
            for (v, bi) in row.iter_mut().zip(b) {
                *v += bi;
            }
        }
        self.push(y, Op::Affine { set: set.0, layer, x: x.0 })
    }

    /// Full network pass: rectified-linear hidden layers, affine output.
    pub fn mlp(&mut self, set: ParamSet, x: NodeId) -> NodeId {
        let layers = self.params[set.0].shape().num_layers();
        let mut h = self.affine(set, 0, x);
        for layer in 1..layers {
            h = self.relu(h);
            h = self.affine(set, layer, h);
        }
        h
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.nodes[x.0].value.mapv(f);
        self.push(v, op)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x.0))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, Op::Exp(x.0))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::ln, Op::Log(x.0))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Square(x.0))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x: x.0, lo, hi })
    }

    /// `k * x + c`.
    pub fn scale_shift(&mut self, x: NodeId, k: f64, c: f64) -> NodeId {
        self.unary(x, |v| k * v + c, Op::AffineScalar { x: x.0, k })
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dim(), bv.dim(), "binary op shape mismatch");
        let mut out = av.clone();
        out.zip_mut_with(bv, |x, y| *x = f(*x, *y));
        self.push(out, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, f64::min, Op::Min(a.0, b.0))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert!(start + len <= xv.ncols(), "slice out of range");
        let v = xv.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x: x.0, start, len })
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let n = self.nodes[xs[0].0].value.nrows();
        let total: usize = xs.iter().map(|id| self.nodes[id.0].value.ncols()).sum();
        let mut out = Array2::zeros((n, total));
        let mut col = 0;
        for id in xs {
            let v = &self.nodes[id.0].value;
            assert_eq!(v.nrows(), n, "concat row mismatch");
            out.slice_mut(ndarray::s![.., col..col + v.ncols()]).assign(v);
            col += v.ncols();
        }
        self.push(out, Op::ConcatCols(xs.iter().map(|id| id.0).collect()))
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut out = Array2::zeros((xv.nrows(), 1));
        for (i, row) in xv.rows().into_iter().enumerate() {
            out[[i, 0]] = row.sum();
        }
        self.push(out, Op::RowSum(x.0))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let m = xv.sum() / (xv.len() as f64);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(x.0))
    }

    /// Reverse pass from a scalar loss node. Returns flat gradients for each
    /// requested parameter set, in request order. Gradient flows *through*
    /// affine nodes of non-requested sets without accumulating for them.
    pub fn backward(&self, loss: NodeId, targets: &[ParamSet]) -> Result<Vec<Vec<f64>>> {
        let lv = &self.nodes[loss.0].value;
        assert_eq!(lv.dim(), (1, 1), "loss must be scalar");
        if !lv[[0, 0]].is_finite() {
            return Err(self.non_finite_report());
        }

        let mut want: Vec<Option<usize>> = vec![None; self.params.len()];
        for (slot, t) in targets.iter().enumerate() {
            want[t.0] = Some(slot);
        }
        let mut grads: Vec<Vec<f64>> =
            targets.iter().map(|t| vec![0.0; self.params[t.0].len()]).collect();

        let mut adj: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..self.nodes.len()).rev() {
            let d = match adj[i].take() {
                Some(d) => d,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Affine { set, layer, x } => {
                    let pv = self.params[*set];
                    let w = pv.weight_view(*layer);
                    // dX = dY W
                    let dx = d.dot(&w);
                    accumulate(&mut adj[*x], dx);
                    if let Some(slot) = want[*set] {
                        let xv = &self.nodes[*x].value;
                        let dw = d.t().dot(xv); // (rows, cols)
                        let shape = pv.shape();
                        let woff = shape.weight_offset(*layer);
                        let boff = shape.bias_offset(*layer);
                        let g = &mut grads[slot];
                        for (gi, dwi) in g[woff..woff + dw.len()].iter_mut().zip(dw.iter()) {
                            *gi += dwi;
                        }
                        for (r, dcol) in d.t().rows().into_iter().enumerate() {
                            g[boff + r] += dcol.sum();
                        }
                    }
                }
                Op::Relu(x) => {
                    let mut dx = d;
                    dx.zip_mut_with(&self.nodes[*x].value, |g, &v| {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    accumulate(&mut adj[*x], dx);
                }
                Op::Tanh(x) => {
                    let mut dx = d;
                    dx.zip_mut_with(&self.nodes[i].value, |g, &y| *g *= 1.0 - y * y);
                    accumulate(&mut adj[*x], dx);
                }
                Op::Exp(x) => {
                    let mut dx = d;
                    dx.zip_mut_with(&self.nodes[i].value, |g, &y| *g *= y);
                    accumulate(&mut adj[*x], dx);
                }
                Op::Log(x) => {
                    let mut dx = d;
                    dx.zip_mut_with(&self.nodes[*x].value, |g, &v| *g /= v);
                    accumulate(&mut adj[*x], dx);
                }
                Op::Square(x) => {
                    let mut dx = d;
                    dx.zip_mut_with(&self.nodes[*x].value, |g, &v| *g *= 2.0 * v);
                    accumulate(&mut adj[*x], dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let mut dx = d;
                    dx.zip_mut_with(&self.nodes[*x].value, |g, &v| {
                        if v <= *lo || v >= *hi {
                            *g = 0.0;
                        }
                    });
                    accumulate(&mut adj[*x], dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[*a], d.clone());
                    accumulate(&mut adj[*b], d);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[*a], d.clone());
                    accumulate(&mut adj[*b], d.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let mut da = d.clone();
                    da.zip_mut_with(&self.nodes[*b].value, |g, &v| *g *= v);
                    accumulate(&mut adj[*a], da);
                    let mut db = d;
                    db.zip_mut_with(&self.nodes[*a].value, |g, &v| *g *= v);
                    accumulate(&mut adj[*b], db);
                }
                Op::Min(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let mut da = d.clone();
                    let mut db = d;
                    for ((ga, gb), (x, y)) in da
                        .iter_mut()
                        .zip(db.iter_mut())
                        .zip(av.iter().zip(bv.iter()))
                    {
                        if x <= y {
                            *gb = 0.0;
                        } else {
                            *ga = 0.0;
                        }
                    }
                    accumulate(&mut adj[*a], da);
                    accumulate(&mut adj[*b], db);
                }
                Op::AffineScalar { x, k } => {
                    accumulate(&mut adj[*x], d.mapv(|v| k * v));
                }
                Op::SliceCols { x, start, len } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Array2::zeros(xv.dim());
                    dx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&d);
                    accumulate(&mut adj[*x], dx);
                }
                Op::ConcatCols(xs) => {
                    let mut col = 0;
                    for x in xs {
                        let w = self.nodes[*x].value.ncols();
                        let dx = d.slice(ndarray::s![.., col..col + w]).to_owned();
                        accumulate(&mut adj[*x], dx);
                        col += w;
                    }
                }
                Op::RowSum(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Array2::zeros(xv.dim());
                    for (mut row, dv) in dx.rows_mut().into_iter().zip(d.column(0)) {
                        row.fill(*dv);
                    }
                    accumulate(&mut adj[*x], dx);
                }
                Op::Mean(x) => {
                    let xv = &self.nodes[*x].value;
                    let scale = d[[0, 0]] / (xv.len() as f64);
                    accumulate(&mut adj[*x], Array2::from_elem(xv.dim(), scale));
                }
            }
        }
        Ok(grads)
    }

    fn non_finite_report(&self) -> Error {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.value.iter().any(|v| !v.is_finite()) {
                return Error::NonFinite(format!(
                    "loss is non-finite; first bad intermediate is node {} ({})",
                    i,
                    node.op.name()
                ));
            }
        }
        Error::NonFinite("loss is non-finite".into())
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, d: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &d,
        None => *slot = Some(d),
    }
}

/// Gradient of a scalar loss with respect to one parameter vector. The
/// closure builds the loss from the registered parameter set.
pub fn grad<F>(params: &ParamVector, build: F) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Tape, ParamSet) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let set = tape.add_params(params);
    let loss = build(&mut tape, set)?;
    let mut grads = tape.backward(loss, &[set])?;
    Ok(grads.pop().expect("one target"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamVector, ShapeTable};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::nn::gradcheck::finite_difference;

    fn assert_grad_close(analytic: &[f64], numeric: &[f64], rel_tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-3);
            assert!(
                (a - n).abs() / denom < rel_tol,
                "coordinate {i}: analytic {a} numeric {n}"
            );
        }
    }

    #[test]
    fn grad_of_param_sum_is_ones() {
        // On an all-ones input, the column sum of a one-layer net's output is
        // the sum of all weights and biases, so the gradient is all ones.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pv = ParamVector::init_uniform(ShapeTable::mlp(4, &[], 3), &mut rng);
        let g = grad(&pv, |tape, set| {
            let x = tape.constant(ndarray::Array2::ones((1, 4)));
            let y = tape.affine(set, 0, x);
            let s = tape.row_sum(y);
            Ok(tape.mean(s))
        })
        .unwrap();
        assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn grad_linear_least_squares_analytic() {
        // loss = 0.5 || W x - y ||^2 at W = 0, b = 0 -> dW = -y x^T, db = -y.
        let shape = ShapeTable::mlp(3, &[], 2);
        let pv = ParamVector::zeros(shape);
        let x = vec![0.5, -1.0, 2.0];
        let y = vec![1.5, -0.25];
        let g = grad(&pv, |tape, set| {
            let xc = tape.constant(ndarray::Array2::from_shape_vec((1, 3), x.clone()).unwrap());
            let yc = tape.constant(ndarray::Array2::from_shape_vec((1, 2), y.clone()).unwrap());
            let out = tape.affine(set, 0, xc);
            let diff = tape.sub(out, yc);
            let sq = tape.square(diff);
            let s = tape.row_sum(sq);
            let m = tape.mean(s);
            Ok(tape.scale_shift(m, 0.5, 0.0))
        })
        .unwrap();
        let mut want = vec![0.0; pv.len()];
        for o in 0..2 {
            for i in 0..3 {
                want[o * 3 + i] = -y[o] * x[i];
            }
        }
        want[6] = -y[0];
        want[7] = -y[1];
        assert_grad_close(&g, &want, 1e-10);
    }

    #[test]
    fn grad_matches_finite_differences_on_random_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut trial = 0;
        while trial < 20 {
            let d_in = rng.random_range(1..5);
            let d_out = rng.random_range(1..4);
            let h = rng.random_range(2..7);
            let pv =
                ParamVector::init_uniform(ShapeTable::mlp(d_in, &[h, h], d_out), &mut rng);
            let n = 3usize;
            let x: Vec<f64> = (0..n * d_in).map(|_| rng.random_range(-1.5..1.5)).collect();
            let t: Vec<f64> = (0..n * d_out).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xa = ndarray::Array2::from_shape_vec((n, d_in), x).unwrap();
            let ta = ndarray::Array2::from_shape_vec((n, d_out), t).unwrap();
            // Finite differences are only valid away from rectifier kinks.
            if crate::nn::gradcheck::preactivation_margin(&pv, xa.view()) < 1e-3 {
                continue;
            }
            trial += 1;

            // Composite loss exercising tanh, exp, log, square, clamp.
            let build = |tape: &mut Tape, set: ParamSet, xa: &ndarray::Array2<f64>, ta: &ndarray::Array2<f64>| {
                let xc = tape.constant(xa.clone());
                let tc = tape.constant(ta.clone());
                let out = tape.mlp(set, xc);
                let sq = tape.tanh(out);
                let d = tape.sub(sq, tc);
                let d2 = tape.square(d);
                let softened = tape.scale_shift(d2, 0.5, 1e-3);
                let lg = tape.log(softened);
                let e = tape.scale_shift(lg, 0.1, 0.0);
                let ee = tape.exp(e);
                let rs = tape.row_sum(ee);
                Ok(tape.mean(rs))
            };
            let g = grad(&pv, |tape, set| build(tape, set, &xa, &ta)).unwrap();

            let worst = crate::nn::gradcheck::max_rel_error(
                &pv,
                &g,
                |p| {
                    let mut tape = Tape::new();
                    let set = tape.add_params(p);
                    let loss = build(&mut tape, set, &xa, &ta).unwrap();
                    tape.scalar(loss)
                },
                1e-5,
                1e-4,
            );
            assert!(worst < 1e-4, "trial {trial}: max rel error {worst}");
        }
    }

    #[test]
    fn gradient_flows_through_frozen_set_into_target_set() {
        // Target set feeds a frozen network; the chain rule must pass
        // through the frozen affine layers.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let actor = ParamVector::init_uniform(ShapeTable::mlp(2, &[4], 2), &mut rng);
        let frozen = ParamVector::init_uniform(ShapeTable::mlp(2, &[4], 1), &mut rng);
        let x = ndarray::Array2::from_shape_vec((2, 2), vec![0.3, -0.4, 0.8, 0.1]).unwrap();

        let build = |tape: &mut Tape, a_set: ParamSet, f_set: ParamSet| {
            let xc = tape.constant(x.clone());
            let mid = tape.mlp(a_set, xc);
            let mid_sq = tape.tanh(mid);
            let out = tape.mlp(f_set, mid_sq);
            let rs = tape.row_sum(out);
            tape.mean(rs)
        };

        let mut tape = Tape::new();
        let a_set = tape.add_params(&actor);
        let f_set = tape.add_params(&frozen);
        let loss = build(&mut tape, a_set, f_set);
        let grads = tape.backward(loss, &[a_set]).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads[0].iter().any(|v| v.abs() > 1e-8));

        let numeric = finite_difference(
            &actor,
            |p| {
                let mut tape = Tape::new();
                let a_set = tape.add_params(p);
                let f_set = tape.add_params(&frozen);
                let loss = build(&mut tape, a_set, f_set);
                tape.scalar(loss)
            },
            1e-5,
        );
        assert_grad_close(&grads[0], &numeric, 1e-4);
    }

    #[test]
    fn non_finite_loss_reports_offending_node() {
        let pv = ParamVector::zeros(ShapeTable::mlp(1, &[], 1));
        let err = grad(&pv, |tape, set| {
            let x = tape.constant(ndarray::Array2::zeros((1, 1)));
            let y = tape.affine(set, 0, x);
            let l = tape.log(y); // log(0) = -inf
            let s = tape.row_sum(l);
            Ok(tape.mean(s))
        })
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("log"), "{msg}");
    }

    #[test]
    fn min_routes_gradient_to_smaller_branch() {
        let shape = ShapeTable::mlp(1, &[], 1);
        let mut pv = ParamVector::zeros(shape);
        pv.values_mut()[0] = 1.0; // y = x
        let g = grad(&pv, |tape, set| {
            let x = tape.constant(ndarray::Array2::from_elem((1, 1), 2.0));
            let y = tape.affine(set, 0, x); // 2.0
            let c = tape.constant(ndarray::Array2::from_elem((1, 1), 5.0));
            let m = tape.min(y, c); // y wins
            Ok(tape.mean(m))
        })
        .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12); // d min / dW = x = 2
        let g2 = grad(&pv, |tape, set| {
            let x = tape.constant(ndarray::Array2::from_elem((1, 1), 2.0));
            let y = tape.affine(set, 0, x);
            let c = tape.constant(ndarray::Array2::from_elem((1, 1), -5.0));
            let m = tape.min(y, c); // constant wins
            Ok(tape.mean(m))
        })
        .unwrap();
        assert!(g2.iter().all(|v| v.abs() < 1e-12));
    }
}
