//! A small reverse-mode tape over dense matrices.
//!
//! Only the operations the ELBO needs are provided. Each op records its
//! inputs and any forward intermediates its adjoint needs. Nodes built only
//! from constants are marked as not requiring gradients and are skipped on
//! the backward pass.

use nalgebra::DMatrix;

use crate::dense;
use crate::error::{DgpError, Result};
use crate::kernel::{self, JitterPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var, Var),
    Mul(Var, Var),
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Exp(Var),
    Sqrt(Var),
    Sum(Var),
    SumSquares(Var),
    ColSumSquares(Var),
    Floor(Var, f64),
    ScaleRows(Var, Var),
    Rbf {
        a: Var,
        b: Var,
        log_ls: Var,
        log_var: Var,
        as_: DMatrix<f64>,
        bs: DMatrix<f64>,
    },
    Cholesky(Var),
    SolveLower(Var, Var),
    SolveLowerT(Var, Var),
    TriFactor(Var),
    DiagSum(Var),
    LogDiagSum(Var),
    AddIdentity(Var),
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn tril(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for j in 0..out.ncols() {
        for i in 0..j.min(out.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> DgpError {
    DgpError::config(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node recorded after the first `len`. Vars created after
    /// that point become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let v = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("sub", self.shape(a), self.shape(b)));
        }
        let v = self.value(a) - self.value(b);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// `s * a` for a 1x1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a) * self.scalar_value(s);
        let ng = self.ng(&[a, s]);
        self.push(v, Op::ScaleBy(a, s), ng)
    }

    /// `a + s` elementwise for a 1x1 node `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.value(a).map(|x| x + sv);
        let ng = self.ng(&[a, s]);
        self.push(v, Op::AddScalar(a, s), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let v = self.value(a).component_mul(self.value(b));
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `op(a) * op(b)`, transposing where `ta` / `tb` are set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let inner_a = if ta { ar } else { ac };
        let inner_b = if tb { bc } else { br };
        if inner_a != inner_b {
            return Err(shape_err("matmul", (ar, ac), (br, bc)));
        }
        let v = dense::matmul(self.value(a), ta, self.value(b), tb);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMul { a, ta, b, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(&[a]);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let ng = self.ng(&[a]);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).iter().map(|x| x * x).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::SumSquares(a), ng)
    }

    /// Column-wise sum of squares of an `m x n` node, as an `n x 1` node.
    pub fn col_sum_squares(&mut self, a: Var) -> Var {
        let v = DMatrix::from_vec(self.shape(a).1, 1, dense::col_sum_squares(self.value(a)));
        let ng = self.ng(&[a]);
        self.push(v, Op::ColSumSquares(a), ng)
    }

    /// Elementwise `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn floor(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor));
        let ng = self.ng(&[a]);
        self.push(v, Op::Floor(a, floor), ng)
    }

    /// Multiply row `i` of `a` (`n x d`) by `v[i]` (`v` is `n x 1`).
    pub fn scale_rows(&mut self, a: Var, v: Var) -> Result<Var> {
        if self.shape(v) != (self.shape(a).0, 1) {
            return Err(shape_err("scale_rows", self.shape(a), self.shape(v)));
        }
        let mut out = self.value(a).clone();
        let s = self.value(v);
        for mut col in out.column_iter_mut() {
            for (x, f) in col.iter_mut().zip(s.iter()) {
                *x *= f;
            }
        }
        let ng = self.ng(&[a, v]);
        Ok(self.push(out, Op::ScaleRows(a, v), ng))
    }

    /// RBF-ARD kernel matrix `k(a, b)` with log-lengthscales (`d x 1`) and a 1x1 log-variance.
    /// Passing the same node for `a` and `b` yields an exactly symmetric Gram matrix.
    pub fn rbf(&mut self, a: Var, b: Var, log_ls: Var, log_var: Var) -> Result<Var> {
        let d = self.shape(log_ls).0;
        if self.shape(a).1 != d || self.shape(b).1 != d || self.shape(log_ls).1 != 1 {
            return Err(shape_err("rbf", self.shape(a), self.shape(b)));
        }
        let ls: Vec<f64> = self.value(log_ls).iter().map(|l| l.exp()).collect();
        let s2 = self.scalar_value(log_var).exp();
        let as_ = kernel::scale_inputs(self.value(a), &ls);
        let (v, bs) = if a == b {
            (kernel::rbf_scaled_sym(&as_, s2), as_.clone())
        } else {
            let bs = kernel::scale_inputs(self.value(b), &ls);
            (kernel::rbf_scaled(&as_, &bs, s2), bs)
        };
        let ng = self.ng(&[a, b, log_ls, log_var]);
        Ok(self.push(v, Op::Rbf { a, b, log_ls, log_var, as_, bs }, ng))
    }

    /// Lower Cholesky factor with the jitter schedule applied. The jitter is
    /// treated as a constant when differentiating.
    pub fn cholesky(&mut self, a: Var, policy: &JitterPolicy) -> Result<Var> {
        let f = kernel::robust_cholesky(self.value(a), policy)?;
        let ng = self.ng(&[a]);
        Ok(self.push(f.l, Op::Cholesky(a), ng))
    }

    /// `L^{-1} B`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Result<Var> {
        let x = kernel::triangular_solve(self.value(l), self.value(b), kernel::Side::Lower)?;
        let ng = self.ng(&[l, b]);
        Ok(self.push(x, Op::SolveLower(l, b), ng))
    }

    /// `L^{-T} B`.
    pub fn solve_lower_t(&mut self, l: Var, b: Var) -> Result<Var> {
        let x = kernel::triangular_solve(self.value(l), self.value(b), kernel::Side::LowerTransposed)?;
        let ng = self.ng(&[l, b]);
        Ok(self.push(x, Op::SolveLowerT(l, b), ng))
    }

    /// Lower-triangular factor from its unconstrained form: strict lower
    /// triangle as stored, diagonal exponentiated.
    pub fn tri_factor(&mut self, raw: Var) -> Var {
        let v = tri_factor_value(self.value(raw));
        let ng = self.ng(&[raw]);
        self.push(v, Op::TriFactor(raw), ng)
    }

    pub fn diag_sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).diagonal().sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::DiagSum(a), ng)
    }

    pub fn log_diag_sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).diagonal().iter().map(|d| d.ln()).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::LogDiagSum(a), ng)
    }

    pub fn add_identity(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.nrows().min(v.ncols()) {
            v[(i, i)] += 1.0;
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::AddIdentity(a), ng)
    }

    /// Reverse sweep from a 1x1 output node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<DMatrix<f64>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(scalar(1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, d: DMatrix<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(x) => *x += d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g);
                    acc(*a, g);
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::ScaleBy(a, s) => {
                    let sv = self.scalar_value(*s);
                    acc(*s, scalar(g.dot(self.value(*a))));
                    acc(*a, g * sv);
                }
                Op::AddScalar(a, s) => {
                    acc(*s, scalar(g.sum()));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.component_mul(self.value(*b)));
                    acc(*b, g.component_mul(self.value(*a)));
                }
                Op::MatMul { a, ta, b, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        let ga = if *ta { dense::matmul(bv, *tb, &g, true) } else { dense::matmul(&g, false, bv, !*tb) };
                        acc(*a, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = if *tb { dense::matmul(&g, true, av, *ta) } else { dense::matmul(av, !*ta, &g, false) };
                        acc(*b, gb);
                    }
                }
                Op::Exp(a) => acc(*a, g.component_mul(&node.value)),
                Op::Sqrt(a) => acc(*a, g.zip_map(&node.value, |gi, s| 0.5 * gi / s)),
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(*a, DMatrix::from_element(r, c, g[(0, 0)]));
                }
                Op::SumSquares(a) => acc(*a, self.value(*a) * (2.0 * g[(0, 0)])),
                Op::ColSumSquares(a) => {
                    let mut d = self.value(*a) * 2.0;
                    for (j, mut col) in d.column_iter_mut().enumerate() {
                        col *= g[(j, 0)];
                    }
                    acc(*a, d);
                }
                Op::Floor(a, f) => acc(*a, g.zip_map(self.value(*a), |gi, x| if x > *f { gi } else { 0.0 })),
                Op::ScaleRows(a, v) => {
                    let av = self.value(*a);
                    let vv = self.value(*v);
                    let mut gv = DMatrix::zeros(vv.nrows(), 1);
                    for j in 0..av.ncols() {
                        for i in 0..av.nrows() {
                            gv[(i, 0)] += g[(i, j)] * av[(i, j)];
                        }
                    }
                    let mut ga = g;
                    for mut col in ga.column_iter_mut() {
                        for (x, f) in col.iter_mut().zip(vv.iter()) {
                            *x *= f;
                        }
                    }
                    acc(*v, gv);
                    acc(*a, ga);
                }
                Op::Rbf { a, b, log_ls, log_var, as_, bs } => {
                    rbf_backward(self, &g, &node.value, (*a, *b, *log_ls, *log_var), as_, bs, &mut acc);
                }
                Op::Cholesky(a) => acc(*a, cholesky_backward(&node.value, &g)),
                Op::SolveLower(l, b) => {
                    let lv = self.value(*l);
                    let gb = kernel::triangular_solve(lv, &g, kernel::Side::LowerTransposed)
                        .expect("factor was solvable on the forward pass");
                    if self.nodes[l.0].needs_grad {
                        acc(*l, -tril(&dense::matmul(&gb, false, &node.value, true)));
                    }
                    acc(*b, gb);
                }
                Op::SolveLowerT(l, b) => {
                    let lv = self.value(*l);
                    let gb = kernel::triangular_solve(lv, &g, kernel::Side::Lower)
                        .expect("factor was solvable on the forward pass");
                    if self.nodes[l.0].needs_grad {
                        acc(*l, -tril(&dense::matmul(&node.value, false, &gb, true)));
                    }
                    acc(*b, gb);
                }
                Op::TriFactor(raw) => {
                    let mut d = tril(&g);
                    for i in 0..d.nrows() {
                        d[(i, i)] *= node.value[(i, i)];
                    }
                    acc(*raw, d);
                }
                Op::DiagSum(a) => {
                    let (r, c) = self.shape(*a);
                    let mut d = DMatrix::zeros(r, c);
                    for i in 0..r.min(c) {
                        d[(i, i)] = g[(0, 0)];
                    }
                    acc(*a, d);
                }
                Op::LogDiagSum(a) => {
                    let av = self.value(*a);
                    let (r, c) = av.shape();
                    let mut d = DMatrix::zeros(r, c);
                    for i in 0..r.min(c) {
                        d[(i, i)] = g[(0, 0)] / av[(i, i)];
                    }
                    acc(*a, d);
                }
                Op::AddIdentity(a) => acc(*a, g),
            }
        }
        Gradients { grads }
    }
}

pub(crate) fn tri_factor_value(raw: &DMatrix<f64>) -> DMatrix<f64> {
    let mut v = tril(raw);
    for i in 0..v.nrows().min(v.ncols()) {
        v[(i, i)] = raw[(i, i)].exp();
    }
    v
}

type Acc<'a> = dyn FnMut(Var, DMatrix<f64>) + 'a;

fn rbf_backward(
    tape: &Tape,
    g: &DMatrix<f64>,
    k: &DMatrix<f64>,
    (a, b, log_ls, log_var): (Var, Var, Var, Var),
    as_: &DMatrix<f64>,
    bs: &DMatrix<f64>,
    acc: &mut Acc<'_>,
) {
    // G = dL/dK * K; with d2 the scaled squared distance, dK/d(d2) = -K/2.
    let gk = g.component_mul(k);
    let row_sums: Vec<f64> = gk.row_iter().map(|r| r.sum()).collect();
    let col_sums: Vec<f64> = gk.column_iter().map(|c| c.sum()).collect();
    let mut g_as = dense::matmul(&gk, false, bs, false);
    for (j, mut col) in g_as.column_iter_mut().enumerate() {
        for (i, v) in col.iter_mut().enumerate() {
            *v -= row_sums[i] * as_[(i, j)];
        }
    }
    let mut g_bs = dense::matmul(&gk, true, as_, false);
    for (j, mut col) in g_bs.column_iter_mut().enumerate() {
        for (i, v) in col.iter_mut().enumerate() {
            *v -= col_sums[i] * bs[(i, j)];
        }
    }
    let ls: Vec<f64> = tape.value(log_ls).iter().map(|l| l.exp()).collect();
    let d = ls.len();
    let mut g_ls = DMatrix::zeros(d, 1);
    for j in 0..d {
        let s: f64 = g_as.column(j).dot(&as_.column(j)) + g_bs.column(j).dot(&bs.column(j));
        g_ls[(j, 0)] = -s;
    }
    acc(log_var, scalar(gk.sum()));
    acc(log_ls, g_ls);
    let unscale = |m: &mut DMatrix<f64>| {
        for (j, mut col) in m.column_iter_mut().enumerate() {
            col /= ls[j];
        }
    };
    unscale(&mut g_as);
    unscale(&mut g_bs);
    acc(a, g_as);
    acc(b, g_bs);
}

/// Adjoint of `A = L L^T` with respect to a symmetric `A`:
/// `A_bar = sym(L^{-T} Phi(L^T L_bar) L^{-1}) / 2` where `Phi` keeps the lower
/// triangle and halves the diagonal.
fn cholesky_backward(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = tril(&dense::matmul(l, true, &tril(l_bar), false));
    for i in 0..p.nrows() {
        p[(i, i)] *= 0.5;
    }
    let x = kernel::triangular_solve(l, &p, kernel::Side::LowerTransposed).expect("cholesky factor has positive diagonal");
    let s = kernel::triangular_solve(l, &x.transpose(), kernel::Side::LowerTransposed)
        .expect("cholesky factor has positive diagonal")
        .transpose();
    (&s + s.transpose()) * 0.5
}

pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros of the given shape if nothing reached it.
    pub fn get(&self, v: Var) -> Option<&DMatrix<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> DMatrix<f64> {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.shape(v);
            DMatrix::zeros(r, c)
        })
    }
}
