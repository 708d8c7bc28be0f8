//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! Every tracked quantity is an `Array2` (feature maps C×N, vectors C×1,
//! scalars 1×1) of a generic float type: f32 for training speed, f64 for
//! finite-difference gradient checks. Nodes are appended in topological
//! order, so the backward pass is a single reverse sweep. Discrete choices
//! (neighbor indices, pooling argmaxes) are resolved at forward time and
//! treated as constants by the backward pass.

use ndarray::{concatenate, Array2, Axis, LinalgScalar, NdFloat};
use thiserror::Error;

/// Float type usable on the tape.
pub trait Scalar: NdFloat + LinalgScalar + std::fmt::Display {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Stable precision tag used by serialized formats ("f32" or "f64").
    fn precision() -> &'static str;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn precision() -> &'static str {
        "f32"
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn precision() -> &'static str {
        "f64"
    }
}

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },
    #[error("reshape {from:?} -> {to:?} changes the element count")]
    Reshape {
        from: (usize, usize),
        to: (usize, usize),
    },
    #[error("neighbor list for point {point} is empty")]
    EmptyNeighbors { point: usize },
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position in the tape's node list; indexes the gradient vector
    /// returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// k * a + c, elementwise constants.
    AffineConst(Var),
    /// Per-row (channel) affine with constant C×1 coefficients.
    RowAffineConst(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Concat(Var, Var, Axis),
    SliceRows(Var, usize),
    Reshape(Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    MulScalarVar(Var, Var),
    DivScalarVar(Var, Var),
    LeakyRelu(Var, f64),
    MaxPoolCols(Var, Vec<usize>),
    MeanCols(Var),
    NeighborMean(Var, Vec<Vec<usize>>),
    SumAll(Var),
    Abs(Var),
    Sqrt(Var),
    Cross3(Var, Var),
}

struct Node<F> {
    value: Array2<F>,
    op: Op,
    /// Constant coefficients for AffineConst / RowAffineConst.
    coeffs: Option<(Array2<F>, Array2<F>)>,
}

/// Append-only computation graph.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.dim();
        (s.0, s.1)
    }

    fn push(&mut self, value: Array2<F>, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            coeffs: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// New leaf holding `value`; inputs and parameters enter here.
    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(), TapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(TapeError::Shape {
                op,
                details: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("add", a, b)?;
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("sub", a, b)?;
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("mul", a, b)?;
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// k * a + c with scalar constants.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Var {
        let kf = F::from_f64(k);
        let cf = F::from_f64(c);
        let v = self.nodes[a.0].value.mapv(|x| kf * x + cf);
        let mut node_k = Array2::zeros((1, 1));
        node_k[[0, 0]] = kf;
        let id = self.push(v, Op::AffineConst(a));
        self.nodes[id.0].coeffs = Some((node_k, Array2::zeros((1, 1))));
        id
    }

    /// Per-channel constant affine: out[c, j] = k[c, 0] * a[c, j] + b[c, 0].
    /// The coefficients are constants (e.g. frozen normalization statistics),
    /// not differentiated.
    pub fn row_affine_const(
        &mut self,
        a: Var,
        k: &Array2<F>,
        b: &Array2<F>,
    ) -> Result<Var, TapeError> {
        let (c, _) = self.shape(a);
        if k.dim() != (c, 1) || b.dim() != (c, 1) {
            return Err(TapeError::Shape {
                op: "row_affine_const",
                details: format!("coeffs {:?}/{:?} for input {:?}", k.dim(), b.dim(), self.shape(a)),
            });
        }
        let v = &self.nodes[a.0].value * k + b;
        let id = self.push(v, Op::RowAffineConst(a));
        self.nodes[id.0].coeffs = Some((k.clone(), b.clone()));
        Ok(id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(TapeError::Shape {
                op: "matmul",
                details: format!("({ar}x{ac}) . ({br}x{bc})"),
            });
        }
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Concatenate along `axis` (0 = stack channels, 1 = stack points).
    pub fn concat(&mut self, a: Var, b: Var, axis: Axis) -> Result<Var, TapeError> {
        let v = concatenate(
            axis,
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .map_err(|e| TapeError::Shape {
            op: "concat",
            details: e.to_string(),
        })?;
        Ok(self.push(v, Op::Concat(a, b, axis)))
    }

    /// Rows lo..lo+height of `a`.
    pub fn slice_rows(&mut self, a: Var, lo: usize, height: usize) -> Result<Var, TapeError> {
        let (r, _) = self.shape(a);
        if lo + height > r {
            return Err(TapeError::Shape {
                op: "slice_rows",
                details: format!("rows {lo}..{} of {r}", lo + height),
            });
        }
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![lo..lo + height, ..])
            .to_owned();
        Ok(self.push(v, Op::SliceRows(a, lo)))
    }

    /// Row-major reshape preserving the element count.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, TapeError> {
        let from = self.shape(a);
        if from.0 * from.1 != rows * cols {
            return Err(TapeError::Reshape {
                from,
                to: (rows, cols),
            });
        }
        let v = self.nodes[a.0]
            .value
            .to_owned()
            .into_shape_with_order((rows, cols))
            .expect("element count checked");
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// a (C×N) + col (C×1) broadcast over points.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var, TapeError> {
        let (c, _) = self.shape(a);
        if self.shape(col) != (c, 1) {
            return Err(TapeError::Shape {
                op: "add_col",
                details: format!("{:?} + {:?}", self.shape(a), self.shape(col)),
            });
        }
        let v = &self.nodes[a.0].value + &self.nodes[col.0].value;
        Ok(self.push(v, Op::AddCol(a, col)))
    }

    /// a (C×N) * col (C×1) broadcast over points.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, TapeError> {
        let (c, _) = self.shape(a);
        if self.shape(col) != (c, 1) {
            return Err(TapeError::Shape {
                op: "mul_col",
                details: format!("{:?} * {:?}", self.shape(a), self.shape(col)),
            });
        }
        let v = &self.nodes[a.0].value * &self.nodes[col.0].value;
        Ok(self.push(v, Op::MulCol(a, col)))
    }

    /// a * s where s is a 1×1 node.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var, TapeError> {
        if self.shape(s) != (1, 1) {
            return Err(TapeError::Shape {
                op: "mul_scalar_var",
                details: format!("scalar operand has shape {:?}", self.shape(s)),
            });
        }
        let sv = self.nodes[s.0].value[[0, 0]];
        let v = self.nodes[a.0].value.mapv(|x| x * sv);
        Ok(self.push(v, Op::MulScalarVar(a, s)))
    }

    /// a / s where s is a 1×1 node.
    pub fn div_scalar_var(&mut self, a: Var, s: Var) -> Result<Var, TapeError> {
        if self.shape(s) != (1, 1) {
            return Err(TapeError::Shape {
                op: "div_scalar_var",
                details: format!("scalar operand has shape {:?}", self.shape(s)),
            });
        }
        let sv = self.nodes[s.0].value[[0, 0]];
        let v = self.nodes[a.0].value.mapv(|x| x / sv);
        Ok(self.push(v, Op::DivScalarVar(a, s)))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let sl = F::from_f64(slope);
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > F::zero() { x } else { sl * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    /// Column-wise max: C×N -> C×1. Ties resolve to the lowest index, so the
    /// subgradient choice is deterministic.
    pub fn max_pool_cols(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let (c, n) = x.dim();
        let mut v = Array2::zeros((c, 1));
        let mut arg = vec![0usize; c];
        for i in 0..c {
            let mut best = x[[i, 0]];
            let mut bj = 0;
            for j in 1..n {
                if x[[i, j]] > best {
                    best = x[[i, j]];
                    bj = j;
                }
            }
            v[[i, 0]] = best;
            arg[i] = bj;
        }
        self.push(v, Op::MaxPoolCols(a, arg))
    }

    /// Column-wise mean: C×N -> C×1.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let n = x.ncols();
        let v = x
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .mapv(|s| s / F::from_f64(n as f64));
        self.push(v, Op::MeanCols(a))
    }

    /// out[:, j] = mean of a[:, i] over i in neighbors[j]. The index sets are
    /// fixed at forward time; backward scatter-adds into the source columns.
    pub fn neighbor_mean(
        &mut self,
        a: Var,
        neighbors: Vec<Vec<usize>>,
    ) -> Result<Var, TapeError> {
        let x = &self.nodes[a.0].value;
        let c = x.nrows();
        let mut v = Array2::zeros((c, neighbors.len()));
        for (j, nb) in neighbors.iter().enumerate() {
            if nb.is_empty() {
                return Err(TapeError::EmptyNeighbors { point: j });
            }
            let inv = F::from_f64(1.0 / nb.len() as f64);
            for &i in nb {
                for ch in 0..c {
                    v[[ch, j]] = v[[ch, j]] + x[[ch, i]] * inv;
                }
            }
        }
        Ok(self.push(v, Op::NeighborMean(a, neighbors)))
    }

    /// Sum of all entries: 1×1.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let mut v = Array2::zeros((1, 1));
        v[[0, 0]] = s;
        self.push(v, Op::SumAll(a))
    }

    /// Mean of all entries: 1×1.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum_all(a);
        self.affine(s, 1.0 / (r * c) as f64, 0.0)
    }

    /// Elementwise |a|; subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.abs());
        self.push(v, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        self.push(v, Op::Sqrt(a))
    }

    /// Cross product of two 3×1 vectors.
    pub fn cross3(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        if self.shape(a) != (3, 1) || self.shape(b) != (3, 1) {
            return Err(TapeError::Shape {
                op: "cross3",
                details: format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            });
        }
        let x = &self.nodes[a.0].value;
        let y = &self.nodes[b.0].value;
        let v = cross_cols(x, y);
        Ok(self.push(v, Op::Cross3(a, b)))
    }

    /// Mean L1 distance between same-shaped arrays: 1×1.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d);
        Ok(self.mean_all(ad))
    }

    /// sum(a * b) for same-shaped arrays: 1×1.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let m = self.mul(a, b)?;
        Ok(self.sum_all(m))
    }

    /// Euclidean norm of all entries, stabilized by `eps`: 1×1.
    pub fn norm(&mut self, a: Var, eps: f64) -> Result<Var, TapeError> {
        let sq = self.mul(a, a)?;
        let s = self.sum_all(sq);
        let se = self.affine(s, 1.0, eps);
        Ok(self.sqrt(se))
    }

    /// Gradients of scalar node `loss` (1×1) w.r.t. every node; returns a
    /// per-node optional gradient indexed like the tape.
    pub fn backward(&self, loss: Var) -> Vec<Option<Array2<F>>> {
        assert_eq!(
            self.shape(loss),
            (1, 1),
            "backward from a non-scalar node"
        );
        let mut grads: Vec<Option<Array2<F>>> = vec![None; self.nodes.len()];
        let mut seed = Array2::zeros((1, 1));
        seed[[0, 0]] = F::one();
        grads[loss.0] = Some(seed);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, a.0, &g * &self.nodes[b.0].value);
                    accumulate(&mut grads, b.0, &g * &self.nodes[a.0].value);
                }
                Op::AffineConst(a) => {
                    let k = node.coeffs.as_ref().expect("affine coeffs").0[[0, 0]];
                    accumulate(&mut grads, a.0, g.mapv(|x| x * k));
                }
                Op::RowAffineConst(a) => {
                    let k = &node.coeffs.as_ref().expect("row affine coeffs").0;
                    accumulate(&mut grads, a.0, &g * k);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, a.0, g.t().to_owned());
                }
                Op::Concat(a, b, axis) => {
                    let split = match axis {
                        Axis(0) => self.nodes[a.0].value.nrows(),
                        _ => self.nodes[a.0].value.ncols(),
                    };
                    let (ga, gb) = match axis {
                        Axis(0) => (
                            g.slice(ndarray::s![..split, ..]).to_owned(),
                            g.slice(ndarray::s![split.., ..]).to_owned(),
                        ),
                        _ => (
                            g.slice(ndarray::s![.., ..split]).to_owned(),
                            g.slice(ndarray::s![.., split..]).to_owned(),
                        ),
                    };
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
                Op::SliceRows(a, lo) => {
                    let mut ga = Array2::zeros(self.nodes[a.0].value.dim());
                    ga.slice_mut(ndarray::s![*lo..*lo + g.nrows(), ..])
                        .assign(&g);
                    accumulate(&mut grads, a.0, ga);
                }
                Op::Reshape(a) => {
                    let ga = g
                        .clone()
                        .into_shape_with_order(self.nodes[a.0].value.dim())
                        .expect("reshape backward");
                    accumulate(&mut grads, a.0, ga);
                }
                Op::AddCol(a, col) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(
                        &mut grads,
                        col.0,
                        g.sum_axis(Axis(1)).insert_axis(Axis(1)),
                    );
                }
                Op::MulCol(a, col) => {
                    accumulate(&mut grads, a.0, &g * &self.nodes[col.0].value);
                    let gc = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    accumulate(&mut grads, col.0, gc);
                }
                Op::MulScalarVar(a, s) => {
                    let sv = self.nodes[s.0].value[[0, 0]];
                    accumulate(&mut grads, a.0, g.mapv(|x| x * sv));
                    let gs = (&g * &self.nodes[a.0].value).sum();
                    let mut arr = Array2::zeros((1, 1));
                    arr[[0, 0]] = gs;
                    accumulate(&mut grads, s.0, arr);
                }
                Op::DivScalarVar(a, s) => {
                    let sv = self.nodes[s.0].value[[0, 0]];
                    accumulate(&mut grads, a.0, g.mapv(|x| x / sv));
                    let gs = (&g * &self.nodes[a.0].value).sum() * (-F::one() / (sv * sv));
                    let mut arr = Array2::zeros((1, 1));
                    arr[[0, 0]] = gs;
                    accumulate(&mut grads, s.0, arr);
                }
                Op::LeakyRelu(a, slope) => {
                    let sl = F::from_f64(*slope);
                    let mask = self.nodes[a.0]
                        .value
                        .mapv(|x| if x > F::zero() { F::one() } else { sl });
                    accumulate(&mut grads, a.0, &g * &mask);
                }
                Op::MaxPoolCols(a, arg) => {
                    let mut ga = Array2::zeros(self.nodes[a.0].value.dim());
                    for (i, &j) in arg.iter().enumerate() {
                        ga[[i, j]] = ga[[i, j]] + g[[i, 0]];
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::MeanCols(a) => {
                    let n = self.nodes[a.0].value.ncols();
                    let inv = F::from_f64(1.0 / n as f64);
                    let mut ga = Array2::zeros(self.nodes[a.0].value.dim());
                    for i in 0..ga.nrows() {
                        for j in 0..n {
                            ga[[i, j]] = g[[i, 0]] * inv;
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::NeighborMean(a, neighbors) => {
                    let mut ga: Array2<F> = Array2::zeros(self.nodes[a.0].value.dim());
                    for (j, nb) in neighbors.iter().enumerate() {
                        let inv = F::from_f64(1.0 / nb.len() as f64);
                        for &i in nb {
                            for ch in 0..ga.nrows() {
                                ga[[ch, i]] = ga[[ch, i]] + g[[ch, j]] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, a.0, ga);
                }
                Op::SumAll(a) => {
                    let gv = g[[0, 0]];
                    accumulate(
                        &mut grads,
                        a.0,
                        Array2::from_elem(self.nodes[a.0].value.dim(), gv),
                    );
                }
                Op::Abs(a) => {
                    let sign = self.nodes[a.0].value.mapv(|x| {
                        if x > F::zero() {
                            F::one()
                        } else if x < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        }
                    });
                    accumulate(&mut grads, a.0, &g * &sign);
                }
                Op::Sqrt(a) => {
                    let half = F::from_f64(0.5);
                    let ga = &g * &node.value.mapv(|y| half / y);
                    accumulate(&mut grads, a.0, ga);
                }
                Op::Cross3(a, b) => {
                    // c = a x b: grad_a = b x g, grad_b = g x a
                    let ga = cross_cols(&self.nodes[b.0].value, &g);
                    let gb = cross_cols(&g, &self.nodes[a.0].value);
                    accumulate(&mut grads, a.0, ga);
                    accumulate(&mut grads, b.0, gb);
                }
            }
            grads[id] = Some(g);
        }
        grads
    }
}

fn cross_cols<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let mut v = Array2::zeros((3, 1));
    v[[0, 0]] = a[[1, 0]] * b[[2, 0]] - a[[2, 0]] * b[[1, 0]];
    v[[1, 0]] = a[[2, 0]] * b[[0, 0]] - a[[0, 0]] * b[[2, 0]];
    v[[2, 0]] = a[[0, 0]] * b[[1, 0]] - a[[1, 0]] * b[[0, 0]];
    v
}

fn accumulate<F: Scalar>(grads: &mut [Option<Array2<F>>], id: usize, g: Array2<F>) {
    match &mut grads[id] {
        Some(acc) => *acc = &*acc + &g,
        slot => *slot = Some(g),
    }
}
