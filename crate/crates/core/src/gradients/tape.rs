//! A small reverse-mode tape over vector-valued nodes.
//!
//! Parameters are never copied onto the tape: affine nodes read weights straight
//! out of the flat parameter vector by offset, and the backward pass scatters
//! their adjoints back into a flat gradient of the same length. Nodes are
//! appended in evaluation order, so parents always precede children.

use nalgebra::{DMatrix, DVector};

use crate::nn::softplus;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Input,
    /// `W x (+ b)` with `W` stored column-major at `w` (rows x cols) and `b` at `b`.
    Affine {
        x: NodeId,
        w: usize,
        b: Option<usize>,
        rows: usize,
        cols: usize,
    },
    Add(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Raw head output `(v, L_raw)` to flat natural parameters
    /// `(v, -1/2 L L^T - eps I)`, `L` lower triangular with softplus diagonal.
    NaturalHead { raw: NodeId, d: usize },
    /// Scalar `<x, c>`.
    Dot { x: NodeId, c: DVector<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: DVector<f64>,
}

pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

/// Fills the lower triangle of a `d x d` matrix from `raw` (row-major lower
/// order), applying softplus on the diagonal.
pub fn lower_from_raw(d: usize, raw: &[f64]) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(d, d);
    let mut k = 0;
    for r in 0..d {
        for c in 0..=r {
            l[(r, c)] = if r == c { softplus(raw[k]) } else { raw[k] };
            k += 1;
        }
    }
    l
}

/// Flat natural parameters `[v; vec(-1/2 L L^T - eps I)]` from a raw head output.
pub fn natural_from_raw(d: usize, raw: &[f64], eps: f64) -> DVector<f64> {
    let l = lower_from_raw(d, &raw[d..]);
    let mut eta2 = &l * l.transpose() * -0.5;
    for k in 0..d {
        eta2[(k, k)] -= eps;
    }
    let mut out = DVector::zeros(d + d * d);
    out.rows_mut(0, d).copy_from_slice(&raw[..d]);
    out.rows_mut(d, d * d).copy_from_slice(eta2.as_slice());
    out
}

/// Raw head width for dimension `d`: `d + d (d + 1) / 2`.
pub const fn raw_natural_len(d: usize) -> usize {
    d + d * (d + 1) / 2
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(32),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn value(&self, id: NodeId) -> &DVector<f64> {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: DVector<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, v: DVector<f64>) -> NodeId {
        self.push(Op::Input, v)
    }

    pub fn affine(&mut self, x: NodeId, w: usize, b: Option<usize>, rows: usize, cols: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.len(), cols, "affine input width");
        let mut out = match b {
            Some(b) => DVector::from_column_slice(&self.params[b..b + rows]),
            None => DVector::zeros(rows),
        };
        let wv = &self.params[w..w + rows * cols];
        for c in 0..cols {
            let xc = xv[c];
            if xc != 0.0 {
                let col = &wv[c * rows..(c + 1) * rows];
                for r in 0..rows {
                    out[r] += col[r] * xc;
                }
            }
        }
        self.push(Op::Affine { x, w, b, rows, cols }, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(Op::Add(a, b), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn natural_head(&mut self, raw: NodeId, d: usize, eps: f64) -> NodeId {
        assert_eq!(self.nodes[raw].value.len(), raw_natural_len(d), "natural head width");
        let v = natural_from_raw(d, self.nodes[raw].value.as_slice(), eps);
        self.push(Op::NaturalHead { raw, d }, v)
    }

    pub fn dot(&mut self, x: NodeId, c: DVector<f64>) -> NodeId {
        let v = DVector::from_element(1, self.nodes[x].value.dot(&c));
        self.push(Op::Dot { x, c }, v)
    }

    /// Gradient of a scalar node with respect to the flat parameters.
    pub fn gradient(&self, out: NodeId) -> DVector<f64> {
        assert_eq!(self.nodes[out].value.len(), 1, "gradient needs a scalar output");
        self.vjp(out, &DVector::from_element(1, 1.0))
    }

    /// Vector-Jacobian product: seeds `out` with `seed` and returns the flat
    /// parameter adjoint.
    pub fn vjp(&self, out: NodeId, seed: &DVector<f64>) -> DVector<f64> {
        let mut grad = DVector::zeros(self.params.len());
        self.vjp_into(out, seed, grad.as_mut_slice());
        grad
    }

    /// Accumulates the parameter adjoint of `seed` at `out` into `grad`.
    pub fn vjp_into(&self, out: NodeId, seed: &DVector<f64>, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len());
        let mut adj: Vec<Option<DVector<f64>>> = vec![None; out + 1];
        adj[out] = Some(seed.clone());
        for id in (0..=out).rev() {
            let Some(g) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Affine { x, w, b, rows, cols } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.params[*w..*w + rows * cols];
                    let mut gx = DVector::zeros(*cols);
                    for c in 0..*cols {
                        let xc = xv[c];
                        let col = &wv[c * rows..(c + 1) * rows];
                        let gcol = &mut grad[*w + c * rows..*w + (c + 1) * rows];
                        let mut acc = 0.0;
                        for r in 0..*rows {
                            gcol[r] += g[r] * xc;
                            acc += col[r] * g[r];
                        }
                        gx[c] = acc;
                    }
                    if let Some(b) = b {
                        for r in 0..*rows {
                            grad[*b + r] += g[r];
                        }
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let ga = g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi));
                    accumulate(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    accumulate(&mut adj, *a, ga);
                }
                Op::NaturalHead { raw, d } => {
                    let ga = natural_head_vjp(*d, self.nodes[*raw].value.as_slice(), &g);
                    accumulate(&mut adj, *raw, ga);
                }
                Op::Dot { x, c } => {
                    accumulate(&mut adj, *x, c * g[0]);
                }
            }
        }
    }

    /// Jacobian of `out` as a `num_params x dim(out)` matrix, one backward pass per
    /// output coordinate.
    pub fn jacobian_transpose(&self, out: NodeId) -> DMatrix<f64> {
        let k = self.nodes[out].value.len();
        let mut jt = DMatrix::zeros(self.params.len(), k);
        let mut seed = DVector::zeros(k);
        for c in 0..k {
            seed[c] = 1.0;
            let mut col = jt.column_mut(c);
            self.vjp_into(out, &seed, col.as_mut_slice());
            seed[c] = 0.0;
        }
        jt
    }
}

fn accumulate(adj: &mut [Option<DVector<f64>>], id: NodeId, g: DVector<f64>) {
    match &mut adj[id] {
        Some(existing) => *existing += g,
        slot => *slot = Some(g),
    }
}

/// Pulls a flat natural-parameter cotangent back to the raw head output.
fn natural_head_vjp(d: usize, raw: &[f64], g: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(raw_natural_len(d));
    out.rows_mut(0, d).copy_from(&g.rows(0, d));
    let g2 = DMatrix::from_column_slice(d, d, &g.as_slice()[d..]);
    let l = lower_from_raw(d, &raw[d..]);
    // eta2 = -1/2 L L^T  =>  dL = -1/2 (G + G^T) L
    let dl = (&g2 + g2.transpose()) * &l * -0.5;
    let mut k = d;
    for r in 0..d {
        for c in 0..=r {
            out[k] = if r == c {
                dl[(r, c)] * crate::nn::sigmoid(raw[k])
            } else {
                dl[(r, c)]
            };
            k += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::fd_check;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn natural_head_at_zero() {
        let v = natural_from_raw(2, &[0.0; 5], 1e-6);
        let sp = softplus(0.0);
        let expected = -0.5 * sp * sp - 1e-6;
        assert_eq!(&v.as_slice()[..2], &[0.0, 0.0]);
        assert!((v[2] - expected).abs() < 1e-15);
        assert_eq!(v[3], 0.0);
        assert!((v[5] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_layer_graph_matches_finite_differences() {
        // params: W1 (4x3), b1 (4), W2 (5x4), b2 (5); head d = 2
        let n = 12 + 4 + 20 + 5;
        let mut s = 42u64;
        let params: Vec<f64> = (0..n).map(|_| lcg(&mut s) * 0.7).collect();
        let x0 = DVector::from_vec(vec![0.3, -0.8, 1.1]);
        let c = DVector::from_vec((0..6).map(|_| lcg(&mut s)).collect());
        let f = |p: &[f64]| {
            let mut t = Tape::new(p);
            let x = t.input(x0.clone());
            let h = t.affine(x, 0, Some(12), 4, 3);
            let h = t.tanh(h);
            let o = t.affine(h, 16, Some(36), 5, 4);
            let eta = t.natural_head(o, 2, 1e-6);
            let s = t.dot(eta, c.clone());
            (t.value(s)[0], t.gradient(s))
        };
        let (_, g) = f(&params);
        let report = fd_check(|p| f(p.as_slice()).0, &DVector::from_vec(params.clone()), &g, 1e-6, 1e-7).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn jacobian_columns_are_vjps() {
        let params = vec![0.5, -0.2, 0.1, 0.9, 0.3, -0.4];
        let mut t = Tape::new(&params);
        let x = t.input(DVector::from_vec(vec![1.0, 2.0]));
        let y = t.affine(x, 0, None, 2, 2);
        let y = t.relu(y);
        let jt = t.jacobian_transpose(y);
        let seed = DVector::from_vec(vec![0.3, -1.0]);
        let v = t.vjp(y, &seed);
        assert!((&jt * &seed - v).norm() < 1e-14);
    }
}
