//! Minimal scalar reverse-mode differentiation.
//!
//! A [`Tape`] is an arena of nodes. Each node stores its value and the
//! local partial derivative with respect to each parent; [`Tape::gradient`]
//! sweeps the arena backwards once. Vector primitives (`dot`, `sum`,
//! `log_sum_exp`) are single nodes with many parents so dense layers stay
//! cheap.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    values: Vec<f64>,
    offsets: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { offsets: vec![0], ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    fn push(&mut self, value: f64, edges: impl IntoIterator<Item = (Var, f64)>) -> Var {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        for (p, d) in edges {
            self.parents.push(p.0);
            self.partials.push(d);
        }
        self.offsets.push(self.parents.len() as u32);
        self.values.push(value);
        Var(self.values.len() as u32 - 1)
    }

    /// Leaf node: a parameter or a constant.
    pub fn var(&mut self, value: f64) -> Var {
        self.push(value, [])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(self.value(a) + self.value(b), [(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(self.value(a) - self.value(b), [(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va * vb, [(a, vb), (b, va)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va / vb, [(a, 1.0 / vb), (b, -va / (vb * vb))])
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.push(scale * self.value(a) + shift, [(a, scale)])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.value(a).exp();
        self.push(e, [(a, e)])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a);
        self.push(v.ln(), [(a, 1.0 / v)])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let s = self.value(a).sqrt();
        self.push(s, [(a, 0.5 / s)])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a);
        self.push(v.powf(p), [(a, p * v.powf(p - 1.0))])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = sigmoid(self.value(a));
        self.push(s, [(a, s * (1.0 - s))])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(gelu(x), [(a, gelu_derivative(x))])
    }

    /// Clamp with a zero derivative outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a);
        let inside = (lo..=hi).contains(&v);
        self.push(v.clamp(lo, hi), [(a, if inside { 1.0 } else { 0.0 })])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let total = xs.iter().map(|&x| self.value(x)).sum();
        self.push(total, xs.iter().map(|&x| (x, 1.0)).collect::<Vec<_>>())
    }

    /// `sum_i w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, xs: &[Var], weights: &[f64]) -> Var {
        debug_assert_eq!(xs.len(), weights.len());
        let total = xs.iter().zip(weights).map(|(&x, w)| w * self.value(x)).sum();
        self.push(total, xs.iter().zip(weights).map(|(&x, &w)| (x, w)).collect::<Vec<_>>())
    }

    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        debug_assert_eq!(a.len(), b.len());
        let total = a.iter().zip(b).map(|(&x, &y)| self.value(x) * self.value(y)).sum();
        let mut edges = Vec::with_capacity(2 * a.len());
        for (&x, &y) in a.iter().zip(b) {
            edges.push((x, self.value(y)));
            edges.push((y, self.value(x)));
        }
        self.push(total, edges)
    }

    /// `ln sum_i exp(x_i)`; the partials are the softmax weights.
    pub fn log_sum_exp(&mut self, xs: &[Var]) -> Var {
        debug_assert!(!xs.is_empty());
        let max = xs.iter().map(|&x| self.value(x)).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|&x| (self.value(x) - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let edges: Vec<(Var, f64)> = xs.iter().zip(&exps).map(|(&x, e)| (x, e / total)).collect();
        self.push(max + total.ln(), edges)
    }

    /// Adjoint of `output` with respect to every node on the tape.
    pub fn gradient(&self, output: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.values.len()];
        adj[output.index()] = 1.0;
        for node in (0..=output.index()).rev() {
            let a = adj[node];
            if a == 0.0 {
                continue;
            }
            let (lo, hi) = (self.offsets[node] as usize, self.offsets[node + 1] as usize);
            for e in lo..hi {
                adj[self.parents[e] as usize] += a * self.partials[e];
            }
        }
        adj
    }
}

/// Row-major matrix of tape variables.
#[derive(Debug, Clone)]
pub struct VarMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Var>,
}

impl VarMatrix {
    pub fn leaf(tape: &mut Tape, m: &Matrix) -> Self {
        let data = m.as_slice().iter().map(|&v| tape.var(v)).collect();
        Self { rows: m.rows(), cols: m.cols(), data }
    }

    pub fn from_vars(rows: usize, cols: usize, data: Vec<Var>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Var {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[Var] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<Var> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<Var>> {
        (0..self.cols).map(|c| self.column(c)).collect()
    }

    pub fn values(&self, tape: &Tape) -> Matrix {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|&v| tape.value(v)).collect())
            .expect("tape values are finite")
    }

    /// `self * rhs`, one `dot` node per output entry.
    pub fn matmul(&self, tape: &mut Tape, rhs: &VarMatrix) -> VarMatrix {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let cols = rhs.columns();
        let mut data = Vec::with_capacity(self.rows * rhs.cols);
        for r in 0..self.rows {
            for col in &cols {
                data.push(tape.dot(self.row(r), col));
            }
        }
        VarMatrix { rows: self.rows, cols: rhs.cols, data }
    }

    /// `self * x + bias` with `bias` a column broadcast over `x`'s columns.
    pub fn affine(&self, tape: &mut Tape, x: &VarMatrix, bias: &VarMatrix) -> VarMatrix {
        assert_eq!(bias.rows, self.rows);
        let prod = self.matmul(tape, x);
        let data = (0..prod.rows)
            .flat_map(|r| (0..prod.cols).map(move |c| (r, c)))
            .map(|(r, c)| tape.add(prod.get(r, c), bias.get(r, 0)))
            .collect();
        VarMatrix { rows: prod.rows, cols: prod.cols, data }
    }

    pub fn map(&self, tape: &mut Tape, mut f: impl FnMut(&mut Tape, Var) -> Var) -> VarMatrix {
        let data = self.data.iter().map(|&v| f(tape, v)).collect();
        VarMatrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn zip_with(
        &self,
        tape: &mut Tape,
        other: &VarMatrix,
        mut f: impl FnMut(&mut Tape, Var, Var) -> Var,
    ) -> VarMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(tape, a, b)).collect();
        VarMatrix { rows: self.rows, cols: self.cols, data }
    }

    /// Mean over columns, as a plain vector of length `rows`.
    pub fn column_mean(&self, tape: &mut Tape) -> Vec<Var> {
        let w = vec![1.0 / self.cols as f64; self.cols];
        (0..self.rows).map(|r| tape.weighted_sum(self.row(r), &w)).collect()
    }
}
