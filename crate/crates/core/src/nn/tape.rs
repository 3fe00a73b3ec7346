use super::matrix::{gemm, Matrix};
use super::{NnError, Parameters};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a network's tensors enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    /// Trainable; gradients are reported under slots `offset..offset + n`.
    Train(usize),
    /// Held fixed; no gradient flows into them.
    Frozen,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    Linear { x: Var, w: Var, b: Var },
    StyleLinear { x: Var, w: Var, b: Var, styles: usize },
    LeakyRelu { x: Var, slope: f64 },
    Relu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    SqNormRows(Var),
    Mean(Var),
    Sum(Var),
    BceWithLogits { z: Var, targets: Vec<f64> },
    LogMeanExp(Var),
    ConcatCols(Var, Var),
    PermuteRows { x: Var, perm: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass, replayed in reverse by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Sign pattern of every piecewise-linear op input, used to detect kinks.
    kinks: Vec<bool>,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    slots: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient accumulated for a parameter slot, if that slot was used.
    pub fn slot(&self, slot: usize) -> Option<&Matrix> {
        self.slots.get(slot).and_then(|g| g.as_ref())
    }

    /// Gradients for `shapes.len()` consecutive slots starting at `offset`; unused slots are zero.
    pub fn collect(&self, offset: usize, shapes: &[(usize, usize)]) -> Vec<Matrix> {
        shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| self.slot(offset + i).cloned().unwrap_or_else(|| Matrix::zeros(r, c)))
            .collect()
    }

    /// Gradient with respect to any recorded node that required one.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn kink_signature(&self) -> &[bool] {
        &self.kinks
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input or constant: never receives a gradient slot, but [`Tape::input`] leaves can be queried.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, slot: usize, value: Matrix) -> Var {
        self.push(value, Op::Param(slot), true)
    }

    /// Places every tensor of `net` on the tape.
    pub fn bind<P: Parameters + ?Sized>(&mut self, net: &P, bind: Bind) -> Vec<Var> {
        net.tensors()
            .into_iter()
            .enumerate()
            .map(|(i, t)| match bind {
                Bind::Train(offset) => self.param(offset + i, t.clone()),
                Bind::Frozen => self.constant(t.clone()),
            })
            .collect()
    }

    /// `x · wᵀ + b` with `x: n×in`, `w: out×in`, `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.cols() || bv.shape() != (1, wv.rows()) {
            return Err(NnError::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = Matrix::zeros(xv.rows(), wv.rows());
        let cols = out.cols();
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(bv.data());
        }
        gemm(
            xv.rows(),
            xv.cols(),
            wv.rows(),
            (xv.data(), xv.cols(), 1),
            (wv.data(), 1, wv.cols()),
            (out.data_mut(), cols, 1),
            1.0,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Per-style affine map. `x: n×(k·in)`, `w: (k·out)×in`, `b: 1×(k·out)`.
    pub fn style_linear(&mut self, x: Var, w: Var, b: Var, styles: usize) -> Result<Var, NnError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if styles == 0 || wv.rows() % styles != 0 || xv.cols() != styles * wv.cols() || bv.shape() != (1, wv.rows()) {
            return Err(NnError::Shape(format!(
                "style_linear with {styles} styles: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (n, din, dout) = (xv.rows(), wv.cols(), wv.rows() / styles);
        let mut out = Matrix::zeros(n, styles * dout);
        let cols = out.cols();
        for r in 0..n {
            out.row_mut(r).copy_from_slice(bv.data());
        }
        for j in 0..styles {
            gemm(
                n,
                din,
                dout,
                (&xv.data()[j * din..], xv.cols(), 1),
                (&wv.data()[j * dout * din..], 1, din),
                (&mut out.data_mut()[j * dout..], cols, 1),
                1.0,
            );
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::StyleLinear { x, w, b, styles }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        self.kinks.extend(xv.data().iter().map(|&v| v >= 0.0));
        let out = xv.map(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        self.kinks.extend(xv.data().iter().map(|&v| v >= 0.0));
        let out = xv.map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        for &v in xv.data() {
            self.kinks.push(v >= lo);
            self.kinks.push(v >= hi);
        }
        let out = xv.map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// `n×d → n×1` squared row norms.
    pub fn sq_norm_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Matrix::from_vec(xv.rows(), 1, xv.row_sq_norms()).expect("row norms");
        let rg = self.rg(x);
        self.push(out, Op::SqNormRows(x), rg)
    }

    /// Mean over every entry, as a 1×1 node.
    pub fn mean(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(NnError::Contract("mean of an empty batch".into()));
        }
        let out = Matrix::filled(1, 1, xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Mean(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Mean binary cross-entropy of logits `z: n×1` against soft targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var, NnError> {
        let zv = self.value(z);
        if zv.cols() != 1 || zv.rows() != targets.len() || targets.is_empty() {
            return Err(NnError::Shape(format!(
                "bce: logits {:?} vs {} targets",
                zv.shape(),
                targets.len()
            )));
        }
        let terms: Vec<f64> = zv.data().iter().zip(targets).map(|(&z, &t)| softplus(z) - t * z).collect();
        let out = Matrix::filled(1, 1, super::pairwise_sum(&terms) / terms.len() as f64);
        let rg = self.rg(z);
        Ok(self.push(out, Op::BceWithLogits { z, targets: targets.to_vec() }, rg))
    }

    /// `ln(mean(exp(x)))` over every entry, stabilized by the maximum.
    pub fn log_mean_exp(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(NnError::Contract("log-mean-exp of an empty batch".into()));
        }
        let out = Matrix::filled(1, 1, log_mean_exp(xv.data()));
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogMeanExp(x), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let out = self.value(a).hstack(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Output row `i` is input row `perm[i]`.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var, NnError> {
        let xv = self.value(x);
        let mut seen = vec![false; xv.rows()];
        if perm.len() != xv.rows() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(NnError::Contract("permute_rows: not a permutation".into()));
        }
        let out = xv.select_rows(perm);
        let rg = self.rg(x);
        Ok(self.push(out, Op::PermuteRows { x, perm: perm.to_vec() }, rg))
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        if loss.0 >= self.nodes.len() {
            return Err(NnError::Contract("loss is not on this tape".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(NnError::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        let mut slots: Vec<Option<Matrix>> = Vec::new();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their gradient so callers can query inputs.
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(slot) => {
                    if slots.len() <= *slot {
                        slots.resize(slot + 1, None);
                    }
                    accumulate(&mut slots[*slot], g.clone());
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.rg(*x) {
                        accumulate(&mut grads[x.0], g.matmul(wv)?);
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads[w.0], g.t_matmul(xv)?);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], Matrix::row_vector(&g.column_means()).scale(g.rows() as f64));
                    }
                }
                Op::StyleLinear { x, w, b, styles } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, din, dout) = (xv.rows(), wv.cols(), wv.rows() / styles);
                    if self.rg(*x) {
                        let mut gx = Matrix::zeros(n, xv.cols());
                        let gxc = gx.cols();
                        for j in 0..*styles {
                            gemm(
                                n,
                                dout,
                                din,
                                (&g.data()[j * dout..], g.cols(), 1),
                                (&wv.data()[j * dout * din..], din, 1),
                                (&mut gx.data_mut()[j * din..], gxc, 1),
                                0.0,
                            );
                        }
                        accumulate(&mut grads[x.0], gx);
                    }
                    if self.rg(*w) {
                        let mut gw = Matrix::zeros(wv.rows(), din);
                        for j in 0..*styles {
                            gemm(
                                dout,
                                n,
                                din,
                                (&g.data()[j * dout..], 1, g.cols()),
                                (&xv.data()[j * din..], xv.cols(), 1),
                                (&mut gw.data_mut()[j * dout * din..], din, 1),
                                0.0,
                            );
                        }
                        accumulate(&mut grads[w.0], gw);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], Matrix::row_vector(&g.column_means()).scale(g.rows() as f64));
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let gx = self.value(*x).zip_map(&g, |v, g| if v >= 0.0 { g } else { slope * g })?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Relu(x) => {
                    let gx = self.value(*x).zip_map(&g, |v, g| if v >= 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let gx = self.value(*x).zip_map(&g, |v, g| if v >= *lo && v < *hi { g } else { 0.0 })?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Tanh(x) => {
                    let gx = node.value.zip_map(&g, |y, g| g * (1.0 - y * y))?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g.scale(-1.0));
                    }
                }
                Op::Scale(x, s) => accumulate(&mut grads[x.0], g.scale(*s)),
                Op::SqNormRows(x) => {
                    let xv = self.value(*x);
                    let mut gx = xv.scale(2.0);
                    for r in 0..gx.rows() {
                        let gr = g.get(r, 0);
                        gx.row_mut(r).iter_mut().for_each(|v| *v *= gr);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let s = g.data()[0] / xv.len() as f64;
                    accumulate(&mut grads[x.0], Matrix::filled(xv.rows(), xv.cols(), s));
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads[x.0], Matrix::filled(xv.rows(), xv.cols(), g.data()[0]));
                }
                Op::BceWithLogits { z, targets } => {
                    let zv = self.value(*z);
                    let s = g.data()[0] / targets.len() as f64;
                    let data = zv.data().iter().zip(targets).map(|(&z, &t)| s * (sigmoid(z) - t)).collect();
                    accumulate(&mut grads[z.0], Matrix::from_vec(zv.rows(), 1, data)?);
                }
                Op::LogMeanExp(x) => {
                    let xv = self.value(*x);
                    let m = xv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = xv.data().iter().map(|v| (v - m).exp()).collect();
                    let total: f64 = e.iter().sum();
                    let s = g.data()[0] / total;
                    let data = e.into_iter().map(|v| v * s).collect();
                    accumulate(&mut grads[x.0], Matrix::from_vec(xv.rows(), xv.cols(), data)?);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let n = g.rows();
                    if self.rg(*a) {
                        let d: Vec<f64> = (0..n).flat_map(|r| g.row(r)[..ca].to_vec()).collect();
                        accumulate(&mut grads[a.0], Matrix::from_vec(n, ca, d)?);
                    }
                    if self.rg(*b) {
                        let cb = g.cols() - ca;
                        let d: Vec<f64> = (0..n).flat_map(|r| g.row(r)[ca..].to_vec()).collect();
                        accumulate(&mut grads[b.0], Matrix::from_vec(n, cb, d)?);
                    }
                }
                Op::PermuteRows { x, perm } => {
                    let mut gx = Matrix::zeros(g.rows(), g.cols());
                    for (i, &p) in perm.iter().enumerate() {
                        gx.row_mut(p).copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
        Ok(Gradients { nodes: grads, slots })
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shape"),
        None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|v| (v - m).exp()).sum();
    m + (s / xs.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn constant_loss_has_no_parameter_gradient() {
        let mut t = Tape::new();
        let p = t.param(0, m(&[&[1.0, 2.0]]));
        let c = t.constant(m(&[&[3.0]]));
        let _ = t.sq_norm_rows(p);
        let loss = t.sum(c);
        let g = t.backward(loss).unwrap();
        assert!(g.slot(0).is_none());
        assert_eq!(g.collect(0, &[(1, 2)])[0], Matrix::zeros(1, 2));
    }

    #[test]
    fn squared_output_gradient_matches_closed_form() {
        // loss = ‖w·Mᵀ‖², dL/dM = 2 (w·Mᵀ)ᵀ w
        let w = m(&[&[1.0, -2.0, 0.5]]);
        let mm = m(&[&[0.3, 0.1, -0.4], &[1.0, 2.0, 0.0]]);
        let mut t = Tape::new();
        let x = t.constant(w.clone());
        let mv = t.param(0, mm.clone());
        let b = t.constant(Matrix::zeros(1, 2));
        let y = t.linear(x, mv, b).unwrap();
        let n = t.sq_norm_rows(y);
        let loss = t.sum(n);
        let g = t.backward(loss).unwrap();
        let y = w.matmul_t(&mm).unwrap();
        let expect = y.t_matmul(&w).unwrap().scale(2.0);
        assert!(g.slot(0).unwrap().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let p = t.param(0, Matrix::zeros(2, 2));
        assert!(matches!(t.backward(p), Err(NnError::Contract(_))));
    }

    #[test]
    fn bce_of_uninformative_logits_is_ln2() {
        let mut t = Tape::new();
        let z = t.input(Matrix::zeros(4, 1));
        let l = t.bce_with_logits(z, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_mean_exp_is_stable() {
        assert!((log_mean_exp(&[1000.0, 1000.0]) - 1000.0).abs() < 1e-12);
        assert!((log_mean_exp(&[0.0, 0.0, 0.0]) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn repeated_parameter_use_accumulates() {
        let mut t = Tape::new();
        let p = t.param(0, m(&[&[2.0]]));
        let s = t.add(p, p).unwrap();
        let loss = t.sum(s);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.slot(0).unwrap().data(), &[2.0]);
    }
}
