use super::tensor::{dot, Tensor2};
use crate::{Error, Result};

/// Floor applied to row norms in [`Tape::l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    AddBias(usize, usize),
    Relu(usize),
    L2NormalizeRows(usize),
    Scale(usize, f64),
    Exp(usize),
    Log(usize),
    SoftmaxRows(usize),
    LogSoftmaxMasked(usize, Vec<bool>),
    Add(usize, usize),
    MulConst(usize, Tensor2),
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in execution order. [`Tape::backward`]
/// walks them in exact reverse order, accumulating adjoints.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// `None` when no gradient reached `v` (constants, or values the loss
    /// does not depend on).
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor2 {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(shape.0, shape.1))
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

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a.0, b.0), rg))
    }

    /// `a · bᵀ`; with `a == b` this is the Gram matrix of the rows.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMulNt(a.0, b.0), rg))
    }

    /// Adds a `1 × cols` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(bv.values()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(v, Op::AddBias(x.0, bias.0), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x.0), rg)
    }

    /// Divides each row by `max(‖row‖, NORM_EPS)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut v = xv.clone();
        for r in 0..v.rows() {
            let n = dot(xv.row(r), xv.row(r)).sqrt().max(NORM_EPS);
            for o in v.row_mut(r) {
                *o /= n;
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::L2NormalizeRows(x.0), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x.0, c), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(v, Op::Exp(x.0), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = xv.values().iter().find(|&&a| a <= 0.0) {
            return Err(Error::NonFinite(format!("log of non-positive value {bad}")));
        }
        let v = xv.map(f64::ln);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Log(x.0), rg))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut v = xv.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for o in row.iter_mut() {
                *o = (*o - m).exp();
                z += *o;
            }
            for o in row.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::SoftmaxRows(x.0), rg)
    }

    /// Row-wise log-softmax restricted to entries where `mask` is true.
    /// Masked-out entries are 0 in the output and receive no gradient.
    pub fn log_softmax_masked(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.rows() * xv.cols() {
            return Err(Error::dim(
                "log_softmax_masked",
                format!("mask of {} for {:?}", mask.len(), xv.shape()),
            ));
        }
        let cols = xv.cols();
        let mut v = Tensor2::zeros(xv.rows(), cols);
        for r in 0..xv.rows() {
            let m_row = &mask[r * cols..(r + 1) * cols];
            let x_row = xv.row(r);
            let m = x_row
                .iter()
                .zip(m_row)
                .filter(|(_, &k)| k)
                .map(|(&a, _)| a)
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue;
            }
            let lse = m + x_row
                .iter()
                .zip(m_row)
                .filter(|(_, &k)| k)
                .map(|(&a, _)| (a - m).exp())
                .sum::<f64>()
                .ln();
            for ((o, &a), &k) in v.row_mut(r).iter_mut().zip(x_row).zip(m_row) {
                if k {
                    *o = a - lse;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(v, Op::LogSoftmaxMasked(x.0, mask), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a.0, b.0), rg))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor2) -> Result<Var> {
        let v = self.value(x).zip_map(&c, |p, q| p * q)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::MulConst(x.0, c), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor2::filled(1, 1, s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = (xv.rows() * xv.cols()).max(1) as f64;
        let s = xv.sum() / n;
        let rg = self.rg(x);
        self.push(Tensor2::filled(1, 1, s), Op::Mean(x.0), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::dim(
                "backward",
                format!("loss must be 1x1, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, dy.matmul_nt(bv)?)?;
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, av.matmul_tn(&dy)?)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, dy.matmul(bv)?)?;
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, dy.matmul_tn(av)?)?;
                    }
                }
                Op::AddBias(x, b) => {
                    if self.nodes[*b].requires_grad {
                        let mut db = Tensor2::zeros(1, dy.cols());
                        for r in 0..dy.rows() {
                            for (o, g) in db.values_mut().iter_mut().zip(dy.row(r)) {
                                *o += g;
                            }
                        }
                        accumulate(&mut grads, *b, db)?;
                    }
                    if self.nodes[*x].requires_grad {
                        accumulate(&mut grads, *x, dy)?;
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value;
                    let dx = dy.zip_map(xv, |g, a| if a > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::L2NormalizeRows(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let raw = dot(xv.row(r), xv.row(r)).sqrt();
                        let (yr, gr) = (y.row(r), dy.row(r));
                        if raw >= NORM_EPS {
                            // (I − ŷŷᵀ)/‖x‖ applied to dy
                            let proj = dot(yr, gr);
                            for ((o, &g), &yy) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                                *o = (g - yy * proj) / raw;
                            }
                        } else {
                            for (o, &g) in dx.row_mut(r).iter_mut().zip(gr) {
                                *o = g / NORM_EPS;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, dy.map(|g| g * c))?;
                }
                Op::Exp(x) => {
                    accumulate(&mut grads, *x, dy.zip_map(y, |g, e| g * e)?)?;
                }
                Op::Log(x) => {
                    let xv = &self.nodes[*x].value;
                    accumulate(&mut grads, *x, dy.zip_map(xv, |g, a| g / a)?)?;
                }
                Op::SoftmaxRows(x) => {
                    let mut dx = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (s, g) = (y.row(r), dy.row(r));
                        let inner = dot(s, g);
                        for ((o, &sv), &gv) in dx.row_mut(r).iter_mut().zip(s).zip(g) {
                            *o = sv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::LogSoftmaxMasked(x, mask) => {
                    let cols = y.cols();
                    let mut dx = Tensor2::zeros(y.rows(), cols);
                    for r in 0..y.rows() {
                        let m_row = &mask[r * cols..(r + 1) * cols];
                        let (yr, gr) = (y.row(r), dy.row(r));
                        let gsum: f64 = gr
                            .iter()
                            .zip(m_row)
                            .filter(|(_, &k)| k)
                            .map(|(g, _)| g)
                            .sum();
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            if m_row[c] {
                                *o = gr[c] - yr[c].exp() * gsum;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut grads, *a, dy.clone())?;
                    }
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut grads, *b, dy)?;
                    }
                }
                Op::MulConst(x, c) => {
                    accumulate(&mut grads, *x, dy.zip_map(c, |g, k| g * k)?)?;
                }
                Op::Sum(x) => {
                    let (r, c) = self.nodes[*x].value.shape();
                    accumulate(&mut grads, *x, Tensor2::filled(r, c, dy.values()[0]))?;
                }
                Op::Mean(x) => {
                    let (r, c) = self.nodes[*x].value.shape();
                    let g = dy.values()[0] / (r * c).max(1) as f64;
                    accumulate(&mut grads, *x, Tensor2::filled(r, c, g))?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], idx: usize, g: Tensor2) -> Result<()> {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let y = tape.l2_normalize_rows(x);
        assert_eq!(tape.value(y).values(), &[0.6, 0.8]);
    }

    #[test]
    fn zero_row_normalizes_to_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor2::zeros(1, 3));
        let y = tape.l2_normalize_rows(x);
        assert!(tape.value(y).values().iter().all(|&v| v == 0.0));
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().all_finite());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor2::filled(2, 2, 1.0));
        let c = tape.constant(Tensor2::filled(2, 2, 3.0));
        let p = tape.matmul(a, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(a).unwrap().values(), &[6.0; 4]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor2::zeros(2, 2));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor2::zeros(1, 1));
        assert!(matches!(tape.log(a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn masked_log_softmax_skips_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor2::from_rows(&[vec![5.0, 1.0, 1.0]]).unwrap());
        let y = tape.log_softmax_masked(x, vec![false, true, true]).unwrap();
        let v = tape.value(y);
        assert_eq!(v.get(0, 0), 0.0);
        assert!((v.get(0, 1) - 0.5f64.ln()).abs() < 1e-15);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 0.0);
    }
}
