//! Reverse-mode differentiation over batched 2-D values.
//!
//! Each node holds a `rows × cols` matrix, rows being batch entries. The op
//! set is exactly what the objectives need: affine maps, elementwise
//! arithmetic (with row broadcasting of the right operand), tanh, exp, log,
//! square, clamping, reductions and row tiling. Values are computed eagerly
//! when an op is recorded; `backward` walks the nodes in reverse insertion
//! order, which is a valid topological order.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Handle to a node on a [`GradientTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `x · wᵀ + b`, with `w: out×in` and `b: 1×out`.
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    /// Row sums, `rows × 1`.
    SumCols(Var),
    SumAll(Var),
    SliceCols(Var, usize, usize),
    /// Each row repeated `n` times consecutively.
    RepeatRows(Var, usize),
    /// Means of consecutive groups of `n` rows.
    GroupMeanRows(Var, usize),
    /// Elementwise `log(eᵃ + eᵇ)`.
    LogAddExp(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Gradients of a scalar with respect to every node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, zeros if `v` did not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Records operations for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
}

fn broadcast_ok(a: &Matrix, b: &Matrix) -> bool {
    a.cols() == b.cols() && (a.rows() == b.rows() || b.rows() == 1)
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let cols = a.cols();
    let mut out = Matrix::zeros(a.rows(), cols);
    let bdata = b.as_slice();
    let bcast = b.rows() == 1 && a.rows() != 1;
    for (i, (o, &x)) in out.as_mut_slice().iter_mut().zip(a.as_slice()).enumerate() {
        let y = if bcast { bdata[i % cols] } else { bdata[i] };
        *o = f(x, y);
    }
    out
}

fn unary(a: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    a.map(f)
}

/// Reduces a full-shape gradient to the shape of a possibly broadcast operand.
fn reduce_to(grad: Matrix, shape: (usize, usize)) -> Matrix {
    if grad.shape() == shape {
        return grad;
    }
    let cols = grad.cols();
    let mut out = Matrix::zeros(1, cols);
    for r in 0..grad.rows() {
        for (o, g) in out.as_mut_slice().iter_mut().zip(grad.row(r)) {
            *o += g;
        }
    }
    out
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}

fn affine_forward(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let (rows, inp) = x.shape();
    let out_dim = w.rows();
    let mut out = Matrix::zeros(rows, out_dim);
    let wd = w.as_slice();
    let bd = b.as_slice();
    for r in 0..rows {
        let xr = x.row(r);
        let orow = out.row_mut(r);
        for (o, (wrow, bias)) in orow.iter_mut().zip(wd.chunks_exact(inp).zip(bd)) {
            *o = bias + xr.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    /// A leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.cols() || bv.shape() != (1, wv.rows()) {
            return Err(Error::Dimension(format!(
                "affine: x {:?}, w {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let out = affine_forward(xv, wv, bv);
        Ok(self.push(Op::Affine(x, w, b), out))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av, bv) {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = elementwise(av, bv, f);
        Ok(self.push(op, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(
                "log_add_exp operands differ in shape".into(),
            ));
        }
        self.binary(a, b, Op::LogAddExp(a, b), log_add_exp)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = unary(self.value(a), |x| x * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = unary(self.value(a), |x| x + c);
        self.push(Op::AddScalar(a, c), out)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = unary(self.value(a), f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = unary(self.value(a), f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = unary(self.value(a), f64::ln);
        self.push(Op::Log(a), out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = unary(self.value(a), |x| x * x);
        self.push(Op::Square(a), out)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = unary(self.value(a), |x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), out)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Matrix::from_fn(v.rows(), 1, |r, _| v.row(r).iter().sum());
        self.push(Op::SumCols(a), out)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).as_slice().iter().sum();
        self.push(Op::SumAll(a), Matrix::from_fn(1, 1, |_, _| s))
    }

    /// Mean over every entry, as a `1 × 1` node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).as_slice().len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if start + len > v.cols() {
            return Err(Error::Dimension(format!(
                "slice {start}..{} of {} columns",
                start + len,
                v.cols()
            )));
        }
        let out = Matrix::from_fn(v.rows(), len, |r, c| v[(r, start + c)]);
        Ok(self.push(Op::SliceCols(a, start, len), out))
    }

    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let v = self.value(a);
        let out = Matrix::from_fn(v.rows() * times, v.cols(), |r, c| v[(r / times, c)]);
        self.push(Op::RepeatRows(a, times), out)
    }

    /// Averages consecutive groups of `group` rows; the adjoint of
    /// [`GradientTape::repeat_rows`] up to the factor `1/group`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let v = self.value(a);
        if group == 0 || !v.rows().is_multiple_of(group) {
            return Err(Error::Dimension(format!(
                "{} rows do not split into groups of {group}",
                v.rows()
            )));
        }
        let out = group_mean(v, group);
        Ok(self.push(Op::GroupMeanRows(a, group), out))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got a {}x{} node",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::from_fn(1, 1, |_, _| 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::Affine(x, w, b) => {
                    let (xv, wv) = (self.value(x), self.value(w));
                    // dx = g·w, dw = gᵀ·x, db = column sums of g
                    accumulate(&mut grads[x.0], g.matmul(wv)?);
                    accumulate(&mut grads[w.0], g.t_matmul(xv)?);
                    accumulate(&mut grads[b.0], reduce_to(g, (1, wv.rows())));
                }
                Op::Add(a, b) => {
                    let bs = self.value(b).shape();
                    accumulate(&mut grads[b.0], reduce_to(g.clone(), bs));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Sub(a, b) => {
                    let bs = self.value(b).shape();
                    accumulate(&mut grads[b.0], reduce_to(g.scale(-1.0), bs));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let ga = elementwise(&g, bv, |gi, bi| gi * bi);
                    let gb_full = elementwise(&g, av, |gi, ai| gi * ai);
                    accumulate(&mut grads[b.0], reduce_to(gb_full, bv.shape()));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LogAddExp(a, b) => {
                    // d/da log(eᵃ+eᵇ) = sigmoid(a−b)
                    let (av, bv) = (self.value(a), self.value(b));
                    let wa = elementwise(av, bv, |x, y| 1.0 / (1.0 + (y - x).exp()));
                    let ga = elementwise(&g, &wa, |gi, w| gi * w);
                    let gb = elementwise(&g, &wa, |gi, w| gi * (1.0 - w));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], g.scale(c)),
                Op::AddScalar(a, _) => accumulate(&mut grads[a.0], g),
                Op::Tanh(a) => {
                    let ga = elementwise(&g, &node.value, |gi, t| gi * (1.0 - t * t));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Exp(a) => {
                    let ga = elementwise(&g, &node.value, |gi, e| gi * e);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Log(a) => {
                    let ga = elementwise(&g, self.value(a), |gi, x| gi / x);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Square(a) => {
                    let ga = elementwise(&g, self.value(a), |gi, x| 2.0 * gi * x);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga =
                        elementwise(
                            &g,
                            self.value(a),
                            |gi, x| {
                                if x < lo || x > hi {
                                    0.0
                                } else {
                                    gi
                                }
                            },
                        );
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SumCols(a) => {
                    let (rows, cols) = self.value(a).shape();
                    let ga = Matrix::from_fn(rows, cols, |r, _| g[(r, 0)]);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.value(a).shape();
                    let s = g[(0, 0)];
                    accumulate(&mut grads[a.0], Matrix::from_fn(rows, cols, |_, _| s));
                }
                Op::SliceCols(a, start, len) => {
                    let (rows, cols) = self.value(a).shape();
                    let ga = Matrix::from_fn(rows, cols, |r, c| {
                        if c >= start && c < start + len {
                            g[(r, c - start)]
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::RepeatRows(a, times) => {
                    let (rows, cols) = self.value(a).shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        let target = r / times;
                        for c in 0..cols {
                            ga[(target, c)] += g[(r, c)];
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::GroupMeanRows(a, group) => {
                    let cols = g.cols();
                    let inv = 1.0 / group as f64;
                    let ga =
                        Matrix::from_fn(g.rows() * group, cols, |r, c| g[(r / group, c)] * inv);
                    accumulate(&mut grads[a.0], ga);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Recomputes every node from the leaf values and returns the fresh
    /// values; used to audit that the recorded graph is self-consistent.
    pub fn replay(&self) -> Vec<Matrix> {
        let mut vals: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                Op::Affine(x, w, b) => affine_forward(&vals[x.0], &vals[w.0], &vals[b.0]),
                Op::Add(a, b) => elementwise(&vals[a.0], &vals[b.0], |x, y| x + y),
                Op::Sub(a, b) => elementwise(&vals[a.0], &vals[b.0], |x, y| x - y),
                Op::Mul(a, b) => elementwise(&vals[a.0], &vals[b.0], |x, y| x * y),
                Op::LogAddExp(a, b) => elementwise(&vals[a.0], &vals[b.0], log_add_exp),
                Op::Scale(a, c) => vals[a.0].map(|x| x * c),
                Op::AddScalar(a, c) => vals[a.0].map(|x| x + c),
                Op::Tanh(a) => vals[a.0].map(f64::tanh),
                Op::Exp(a) => vals[a.0].map(f64::exp),
                Op::Log(a) => vals[a.0].map(f64::ln),
                Op::Square(a) => vals[a.0].map(|x| x * x),
                Op::Clamp(a, lo, hi) => vals[a.0].map(|x| x.clamp(lo, hi)),
                Op::SumCols(a) => {
                    let v = &vals[a.0];
                    Matrix::from_fn(v.rows(), 1, |r, _| v.row(r).iter().sum())
                }
                Op::SumAll(a) => {
                    let s: f64 = vals[a.0].as_slice().iter().sum();
                    Matrix::from_fn(1, 1, |_, _| s)
                }
                Op::SliceCols(a, start, len) => {
                    let v = &vals[a.0];
                    Matrix::from_fn(v.rows(), len, |r, c| v[(r, start + c)])
                }
                Op::RepeatRows(a, times) => {
                    let v = &vals[a.0];
                    Matrix::from_fn(v.rows() * times, v.cols(), |r, c| v[(r / times, c)])
                }
                Op::GroupMeanRows(a, group) => group_mean(&vals[a.0], group),
            };
            vals.push(v);
        }
        vals
    }
}

fn group_mean(v: &Matrix, group: usize) -> Matrix {
    let inv = 1.0 / group as f64;
    Matrix::from_fn(v.rows() / group, v.cols(), |r, c| {
        (0..group).map(|k| v[(r * group + k, c)]).sum::<f64>() * inv
    })
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Matrix {
        Matrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = GradientTape::new();
        let p = t.leaf(m(1, 3, &[1.0, -2.0, 0.5]));
        let sq = t.square(p);
        let loss = t.sum_all(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap().as_slice(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut t = GradientTape::new();
        let p = t.leaf(m(1, 2, &[1.0, 2.0]));
        let z = t.scale(p, 0.0);
        let s = t.sum_all(z);
        let loss = t.add_scalar(s, 3.0);
        let g = t.backward(loss).unwrap();
        assert_eq!(t.scalar(loss), 3.0);
        assert_eq!(g.get(p).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut t = GradientTape::new();
        let p = t.leaf(m(1, 2, &[1.0, 2.0]));
        assert!(matches!(t.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn affine_gradients_by_hand() {
        // y = x·wᵀ + b with x 2×2, w 1×2
        let mut t = GradientTape::new();
        let x = t.leaf(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let w = t.leaf(m(1, 2, &[0.5, -1.0]));
        let b = t.leaf(m(1, 1, &[0.25]));
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).as_slice(), &[-1.25, -2.25]);
        let loss = t.sum_all(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().as_slice(), &[4.0, 6.0]);
        assert_eq!(g.get(b).unwrap().as_slice(), &[2.0]);
        assert_eq!(g.get(x).unwrap().as_slice(), &[0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn broadcast_and_repeat_gradients() {
        let mut t = GradientTape::new();
        let a = t.leaf(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let row = t.leaf(m(1, 2, &[10.0, 20.0]));
        let r = t.repeat_rows(a, 3);
        let prod = t.mul(r, row).unwrap();
        let back = t.group_mean_rows(prod, 3).unwrap();
        assert_eq!(t.value(back).as_slice(), &[10.0, 40.0, 30.0, 80.0]);
        let loss = t.sum_all(back);
        assert_eq!(t.scalar(loss), 10.0 * 4.0 + 20.0 * 6.0);
        let g = t.backward(loss).unwrap();
        let close =
            |got: &[f64], want: &[f64]| got.iter().zip(want).all(|(g, w)| (g - w).abs() < 1e-12);
        assert!(close(
            g.get(a).unwrap().as_slice(),
            &[10.0, 20.0, 10.0, 20.0]
        ));
        assert!(close(g.get(row).unwrap().as_slice(), &[4.0, 6.0]));
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let base = [0.3, -0.7, 1.1];
        let f = |vals: &[f64]| -> (f64, Vec<f64>) {
            let mut t = GradientTape::new();
            let p = t.leaf(m(1, 3, vals));
            let q = t.leaf(m(1, 3, &[0.2, 0.4, -0.1]));
            let th = t.tanh(p);
            let e = t.exp(th);
            let l = t.add_scalar(e, 1.0);
            let lg = t.log(l);
            let c = t.clamp(p, -0.5, 2.0);
            let s = t.slice_cols(c, 1, 2).unwrap();
            let ss = t.sum_cols(s);
            let lae = t.log_add_exp(p, q).unwrap();
            let a = t.sub(lg, lae).unwrap();
            let a = t.sum_all(a);
            let ss = t.sum_all(ss);
            let loss = t.add(a, ss).unwrap();
            let g = t.backward(loss).unwrap();
            (t.scalar(loss), g.get(p).unwrap().as_slice().to_vec())
        };
        let (_, grad) = f(&base);
        for i in 0..3 {
            let h = 1e-6;
            let mut up = base;
            up[i] += h;
            let mut dn = base;
            dn[i] -= h;
            let fd = (f(&up).0 - f(&dn).0) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-7,
                "coord {i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn replay_reproduces_values() {
        let mut t = GradientTape::new();
        let p = t.leaf(m(2, 2, &[0.1, 0.2, 0.3, 0.4]));
        let w = t.leaf(m(3, 2, &[1.0, 0.0, 0.5, -0.5, 0.2, 0.1]));
        let b = t.leaf(m(1, 3, &[0.0, 0.1, 0.2]));
        let h = t.affine(p, w, b).unwrap();
        let h = t.tanh(h);
        let e = t.exp(h);
        let loss = t.sum_all(e);
        let vals = t.replay();
        assert!((vals[loss.index()].as_slice()[0] - t.scalar(loss)).abs() <= 1e-12);
    }

    #[test]
    fn shape_errors() {
        let mut t = GradientTape::new();
        let a = t.leaf(m(2, 2, &[0.0; 4]));
        let b = t.leaf(m(2, 3, &[0.0; 6]));
        assert!(t.add(a, b).is_err());
        assert!(t.slice_cols(a, 1, 2).is_err());
    }
}
