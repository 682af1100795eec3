//! Matrix-valued reverse-mode differentiation.
//!
//! Every value on a [`Tape`] is a dense row-major matrix. Operations are
//! evaluated eagerly when recorded; [`Tape::backward`] walks the record in
//! reverse and accumulates adjoints. Parameter leaves are keyed by name so
//! the resulting [`Gradients`] can be merged into any [`ParamStore`] that
//! owns those names.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{s, Array2, Axis, Zip};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-ray sample layout for [`Tape::composite`].
#[derive(Clone, Debug)]
pub struct CompositeLayout {
    /// Sample rows belonging to each ray, in increasing depth order.
    pub rays: Vec<Range<usize>>,
    /// Interval length associated with each sample row.
    pub deltas: Vec<f64>,
    pub background: [f64; 3],
}

enum Op {
    Constant,
    Input,
    Param(String),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Mat),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SegmentSum {
        src: Var,
        segments: Vec<usize>,
        weights: Vec<f64>,
    },
    SoftmaxRows(Var),
    LayerNorm {
        src: Var,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Composite {
        color: Var,
        sigma: Var,
        layout: CompositeLayout,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    params: BTreeMap<String, Mat>,
    inputs: BTreeMap<usize, Mat>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    /// Gradient with respect to a value created by [`Tape::input`].
    pub fn wrt(&self, var: Var) -> Option<&Mat> {
        self.inputs.get(&var.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Adds every parameter gradient whose name `store` owns into its accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (name, g) in &self.params {
            store.accumulate_grad(name, g);
        }
    }

    /// Sums another gradient set into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (name, g) in other.params {
            match self.params.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    self.params.insert(name, g);
                }
            }
        }
        for (idx, g) in other.inputs {
            match self.inputs.get_mut(&idx) {
                Some(acc) => *acc += &g,
                None => {
                    self.inputs.insert(idx, g);
                }
            }
        }
    }
}

fn shape_str(m: &Mat) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Alpha-composites per-sample colors front to back.
///
/// Returns pixel colors plus, per sample, the compositing weight `T_s * alpha_s`.
pub(crate) fn composite_forward(color: &Mat, sigma: &Mat, layout: &CompositeLayout) -> (Mat, Vec<f64>) {
    let mut out = Mat::zeros((layout.rays.len(), 3));
    let mut weights = vec![0.0; color.nrows()];
    for (r, range) in layout.rays.iter().enumerate() {
        let mut trans = 1.0;
        for s in range.clone() {
            let alpha = -(-sigma[[s, 0]] * layout.deltas[s]).exp_m1();
            let w = trans * alpha;
            weights[s] = w;
            for c in 0..3 {
                out[[r, c]] += w * color[[s, c]];
            }
            trans *= 1.0 - alpha;
        }
        for c in 0..3 {
            out[[r, c]] += trans * layout.background[c];
        }
    }
    (out, weights)
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 result.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant)
    }

    /// A leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    /// Records the current value of a named parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .value(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter '{name}'")))?
            .clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    fn same_shape(&self, ctx: &str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::dim(ctx, shape_str(va), shape_str(vb)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::dim(
                "matmul",
                format!("{} rows on right operand", va.ncols()),
                shape_str(vb),
            ));
        }
        let v = va.dot(vb);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(Error::dim("matmul_t", shape_str(va), shape_str(vb)));
        }
        let v = va.dot(&vb.t());
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Result<Var> {
        let va = self.value(a);
        if va.dim() != c.dim() {
            return Err(Error::dim("mul_const", shape_str(va), shape_str(&c)));
        }
        let v = va * &c;
        Ok(self.push(v, Op::MulConst(a, c)))
    }

    /// Adds a 1xN row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::dim("add_row", format!("1x{}", va.ncols()), shape_str(vr)));
        }
        let v = va + vr;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a 1xN row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::dim("mul_row", format!("1x{}", va.ncols()), shape_str(vr)));
        }
        let v = va * vr;
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Elementwise absolute value; the derivative at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= va.nrows()) {
            return Err(Error::Argument(format!(
                "gather_rows: row {bad} out of range for {} rows",
                va.nrows()
            )));
        }
        let v = va.select(Axis(0), &rows);
        Ok(self.push(v, Op::GatherRows(a, rows)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).map_err(|_| {
            Error::dim(
                "concat_cols",
                "equal row counts",
                parts.iter().map(|&p| shape_str(self.value(p))).collect::<Vec<_>>().join(", "),
            )
        })?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).map_err(|_| {
            Error::dim(
                "concat_rows",
                "equal column counts",
                parts.iter().map(|&p| shape_str(self.value(p))).collect::<Vec<_>>().join(", "),
            )
        })?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Result<Var> {
        let va = self.value(a);
        if cols.end > va.ncols() || cols.start > cols.end {
            return Err(Error::dim("slice_cols", format!("columns {cols:?}"), shape_str(va)));
        }
        let v = va.slice(s![.., cols.clone()]).to_owned();
        Ok(self.push(v, Op::SliceCols(a, cols.start)))
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Result<Var> {
        let va = self.value(a);
        if rows.end > va.nrows() || rows.start > rows.end {
            return Err(Error::dim("slice_rows", format!("rows {rows:?}"), shape_str(va)));
        }
        let v = va.slice(s![rows.clone(), ..]).to_owned();
        Ok(self.push(v, Op::SliceRows(a, rows.start)))
    }

    /// `out[segments[p]] += weights[p] * a[p]` for every row `p` of `a`.
    pub fn segment_sum(
        &mut self,
        a: Var,
        segments: Vec<usize>,
        weights: Vec<f64>,
        n_segments: usize,
    ) -> Result<Var> {
        let va = self.value(a);
        if segments.len() != va.nrows() || weights.len() != va.nrows() {
            return Err(Error::dim(
                "segment_sum",
                format!("{} segment ids and weights", va.nrows()),
                format!("{} ids, {} weights", segments.len(), weights.len()),
            ));
        }
        if let Some(&bad) = segments.iter().find(|&&g| g >= n_segments) {
            return Err(Error::Argument(format!("segment_sum: segment {bad} >= {n_segments}")));
        }
        let mut v = Mat::zeros((n_segments, va.ncols()));
        for (p, (&g, &w)) in segments.iter().zip(&weights).enumerate() {
            v.row_mut(g).scaled_add(w, &va.row(p));
        }
        Ok(self.push(v, Op::SegmentSum { src: a, segments, weights }))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        let n = v.ncols() as f64;
        let mut inv_std = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * is);
            inv_std.push(is);
        }
        self.push(v, Op::LayerNorm { src: a, inv_std })
    }

    /// Sum of all entries as a 1x1 value.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference against a constant target, as a 1x1 value.
    pub fn mse(&mut self, a: Var, target: &Mat) -> Result<Var> {
        let t = self.constant(target.clone());
        let d = self.sub(a, t)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Front-to-back alpha compositing of per-sample colors (Sx3) and densities (Sx1).
    pub fn composite(&mut self, color: Var, sigma: Var, layout: CompositeLayout) -> Result<Var> {
        let (vc, vs) = (self.value(color), self.value(sigma));
        if vc.ncols() != 3 || vs.ncols() != 1 || vc.nrows() != vs.nrows() {
            return Err(Error::dim("composite", "Sx3 colors and Sx1 densities", format!("{} and {}", shape_str(vc), shape_str(vs))));
        }
        if layout.deltas.len() != vc.nrows() || layout.rays.iter().any(|r| r.end > vc.nrows()) {
            return Err(Error::dim("composite", format!("layout over {} samples", vc.nrows()), layout.deltas.len()));
        }
        if vs.iter().any(|&x| x < 0.0) {
            return Err(Error::State("composite: negative density".into()));
        }
        let (out, _) = composite_forward(vc, vs, &layout);
        Ok(self.push(out, Op::Composite { color, sigma, layout }))
    }

    /// Reverse pass from a 1x1 loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before a forward pass was recorded".into()));
        }
        let v = self.value(loss);
        if v.dim() != (1, 1) {
            return Err(Error::dim("backward", "1x1 loss", shape_str(v)));
        }
        self.backward_with(loss, Mat::ones((1, 1)))
    }

    /// Reverse pass seeded with an explicit output adjoint.
    pub fn backward_with(&self, output: Var, output_grad: Mat) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::State("backward called before a forward pass was recorded".into()));
        }
        if output_grad.dim() != self.value(output).dim() {
            return Err(Error::dim("backward", shape_str(self.value(output)), shape_str(&output_grad)));
        }
        let mut grads: Vec<Option<Mat>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(output_grad);
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    out.inputs.insert(idx, g);
                }
                Op::Param(name) => match out.params.get_mut(name) {
                    Some(e) => *e += &g,
                    None => {
                        out.params.insert(name.clone(), g);
                    }
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, &g * c),
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*row);
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::LeakyRelu(a, slope) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| {
                        if x <= 0.0 {
                            *gi *= slope;
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| *gi *= gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|gi, &y| *gi *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| *gi *= sigmoid_scalar(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Abs(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gi, &x| {
                        *gi *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => acc(&mut grads, *a, g * self.value(*a) * 2.0),
                Op::GatherRows(a, rows) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    for (p, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(p);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentSum { src, segments, weights } => {
                    let mut ga = Mat::zeros(self.value(*src).dim());
                    for (p, (&seg, &w)) in segments.iter().zip(weights).enumerate() {
                        ga.row_mut(p).scaled_add(w, &g.row(seg));
                    }
                    acc(&mut grads, *src, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.dim());
                    for ((mut gr, yr), gy) in ga.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let dot = yr.dot(&gy);
                        Zip::from(&mut gr).and(&yr).and(&gy).for_each(|o, &yi, &gi| *o = yi * (gi - dot));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { src, inv_std } => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut ga = Mat::zeros(y.dim());
                    for (r, ((mut gr, yr), gy)) in ga.rows_mut().into_iter().zip(y.rows()).zip(g.rows()).enumerate() {
                        let mean_g = gy.sum() / n;
                        let mean_gy = gy.dot(&yr) / n;
                        let is = inv_std[r];
                        Zip::from(&mut gr)
                            .and(&yr)
                            .and(&gy)
                            .for_each(|o, &yi, &gi| *o = is * (gi - mean_g - yi * mean_gy));
                    }
                    acc(&mut grads, *src, ga);
                }
                Op::Sum(a) => {
                    let g0 = g[[0, 0]];
                    acc(&mut grads, *a, Mat::from_elem(self.value(*a).dim(), g0));
                }
                Op::Composite { color, sigma, layout } => {
                    let (gc, gs) = composite_backward(self.value(*color), self.value(*sigma), layout, &g);
                    acc(&mut grads, *color, gc);
                    acc(&mut grads, *sigma, gs);
                }
            }
        }
        Ok(out)
    }
}

fn composite_backward(color: &Mat, sigma: &Mat, layout: &CompositeLayout, g: &Mat) -> (Mat, Mat) {
    let mut gc = Mat::zeros(color.dim());
    let mut gs = Mat::zeros(sigma.dim());
    for (r, range) in layout.rays.iter().enumerate() {
        let gr = [g[[r, 0]], g[[r, 1]], g[[r, 2]]];
        let n = range.len();
        if n == 0 {
            continue;
        }
        // Transmittance before each sample, and after the last one.
        let mut trans = Vec::with_capacity(n + 1);
        let mut alphas = Vec::with_capacity(n);
        let mut t = 1.0;
        for s in range.clone() {
            trans.push(t);
            let a = -(-sigma[[s, 0]] * layout.deltas[s]).exp_m1();
            alphas.push(a);
            t *= 1.0 - a;
        }
        trans.push(t);
        // tail = g . (sum_{u>s} w_u c_u + T_final * background)
        let mut tail: f64 = (0..3).map(|c| gr[c] * layout.background[c]).sum::<f64>() * trans[n];
        for k in (0..n).rev() {
            let s = range.start + k;
            let w = trans[k] * alphas[k];
            let gdotc: f64 = (0..3).map(|c| gr[c] * color[[s, c]]).sum();
            for c in 0..3 {
                gc[[s, c]] = gr[c] * w;
            }
            gs[[s, 0]] = layout.deltas[s] * (trans[k + 1] * gdotc - tail);
            tail += w * gdotc;
        }
    }
    (gc, gs)
}
