//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A `Tape` records every operation in evaluation order; `backward` walks it
//! once in reverse. Values are `Array2<f64>`; scalars are 1×1.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use crate::graph::EdgeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Array2<f64>),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Column(Var, usize),
    GatherRows(Var, Vec<usize>),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    EdgeDot(Var, Var, Arc<Vec<(usize, usize)>>),
    EdgeMean(Var, Arc<EdgeSet>),
    Propagate {
        h: Var,
        weights: Option<Var>,
        edges: Arc<EdgeSet>,
        w: Vec<f64>,
        s: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        rows: Vec<usize>,
        labels: Vec<u8>,
        probs: Array2<f64>,
    },
    BceLogits(Var, Vec<f64>),
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
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

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

/// Per-node scale `(1 + Σ incident weights)^(-1/2)`.
fn degree_scale(edges: &EdgeSet, w: &[f64]) -> Vec<f64> {
    let mut d = vec![1.0; edges.n];
    for (&(i, j), &we) in edges.pairs.iter().zip(w) {
        d[i] += we;
        d[j] += we;
    }
    d.into_iter().map(|v| 1.0 / v.sqrt()).collect()
}

/// `D^-1/2 (W + I) D^-1/2 · h` without forming the dense matrix.
fn propagate_values(edges: &EdgeSet, w: &[f64], s: &[f64], h: &Array2<f64>) -> Array2<f64> {
    let mut out = h.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        row *= s[i] * s[i];
    }
    for (&(i, j), &we) in edges.pairs.iter().zip(w) {
        let a = s[i] * we * s[j];
        let hj = h.row(j).to_owned();
        let hi = h.row(i).to_owned();
        out.row_mut(i).scaled_add(a, &hj);
        out.row_mut(j).scaled_add(a, &hi);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.values[v.0][[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + b` with the 1×k row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    /// `a ∘ b` with the 1×k row `b` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "mul_row expects a single row");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    /// Elementwise product with a constant (dropout masks, feature masks).
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let v = self.value(a).column(j).to_owned().insert_axis(Axis(1));
        self.push(v, Op::Column(a, j))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        self.push(v, Op::GatherRows(a, rows.to_vec()))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean of all entries; 0 for an empty matrix.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = if m.is_empty() { 0.0 } else { m.sum() / m.len() as f64 };
        self.push(scalar(v), Op::Mean(a))
    }

    /// Column vector of `<a_i, b_j>` for each pair `(i, j)`.
    pub fn edge_dot(&mut self, a: Var, b: Var, pairs: Arc<Vec<(usize, usize)>>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let v = Array2::from_shape_fn((pairs.len(), 1), |(e, _)| {
            let (i, j) = pairs[e];
            av.row(i).dot(&bv.row(j))
        });
        self.push(v, Op::EdgeDot(a, b, pairs))
    }

    /// Per-node mean of an |E|×1 edge column over incident edges (0 for
    /// isolated nodes).
    pub fn edge_mean(&mut self, e: Var, edges: Arc<EdgeSet>) -> Var {
        let ev = self.value(e);
        assert_eq!(ev.nrows(), edges.pairs.len(), "edge_mean: edge count");
        let v = Array2::from_shape_fn((edges.n, 1), |(i, _)| {
            let inc = &edges.incident[i];
            if inc.is_empty() {
                0.0
            } else {
                inc.iter().map(|&k| ev[[k, 0]]).sum::<f64>() / inc.len() as f64
            }
        });
        self.push(v, Op::EdgeMean(e, edges))
    }

    /// Symmetrically normalized propagation with self-loops. Without
    /// `weights` every edge counts 1; otherwise `weights` is a 1×|E| row.
    pub fn propagate(&mut self, h: Var, edges: Arc<EdgeSet>, weights: Option<Var>) -> Var {
        assert_eq!(self.value(h).nrows(), edges.n, "propagate: row count");
        let w: Vec<f64> = match weights {
            Some(wv) => {
                let m = self.value(wv);
                assert_eq!(m.len(), edges.pairs.len(), "propagate: weight count");
                m.iter().copied().collect()
            }
            None => vec![1.0; edges.pairs.len()],
        };
        let s = degree_scale(&edges, &w);
        let v = propagate_values(&edges, &w, &s, self.value(h));
        self.push(
            v,
            Op::Propagate {
                h,
                weights,
                edges,
                w,
                s,
            },
        )
    }

    /// Mean softmax cross-entropy over `rows` of a logit matrix.
    pub fn softmax_ce(&mut self, logits: Var, rows: &[usize], labels: &[u8]) -> Var {
        assert_eq!(rows.len(), labels.len());
        let l = self.value(logits);
        let mut probs = Array2::zeros((rows.len(), l.ncols()));
        let mut loss = 0.0;
        for (k, (&r, &y)) in rows.iter().zip(labels).enumerate() {
            let row = l.row(r);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            for c in 0..l.ncols() {
                probs[[k, c]] = (row[c] - m).exp() / z;
            }
            loss += z.ln() + m - row[y as usize];
        }
        let v = if rows.is_empty() { 0.0 } else { loss / rows.len() as f64 };
        self.push(
            scalar(v),
            Op::SoftmaxCe {
                logits,
                rows: rows.to_vec(),
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean binary cross-entropy of a column of logits against targets.
    pub fn bce_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.len(), targets.len());
        let total: f64 = l.iter().zip(targets).map(|(&x, &t)| softplus(x) - t * x).sum();
        let v = if targets.is_empty() { 0.0 } else { total / targets.len() as f64 };
        self.push(scalar(v), Op::BceLogits(logits, targets.to_vec()))
    }

    /// Gradients of the scalar `loss` with respect to the leaves.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut g: Vec<Option<Array2<f64>>> = vec![None; self.values.len()];
        g[loss.0] = Some(scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = g[idx].take() else { continue };
            let out = &self.values[idx];
            match &self.ops[idx] {
                Op::Leaf => {
                    g[idx] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = gout.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gout);
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *a, gout.clone());
                    acc(&mut g, *b, gout);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *b, -&gout);
                    acc(&mut g, *a, gout);
                }
                Op::Mul(a, b) => {
                    let ga = &gout * self.value(*b);
                    let gb = &gout * self.value(*a);
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::AddRow(a, b) => {
                    acc(&mut g, *b, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut g, *a, gout);
                }
                Op::MulRow(a, b) => {
                    let gb = (&gout * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &gout * self.value(*b);
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::Scale(a, k) => acc(&mut g, *a, gout * *k),
                Op::MulConst(a, c) => acc(&mut g, *a, gout * c),
                Op::Relu(a) => {
                    let mut ga = gout;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| {
                            if x <= 0.0 {
                                *gv = 0.0
                            }
                        });
                    acc(&mut g, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = gout;
                    Zip::from(&mut ga).and(out).for_each(|gv, &s| *gv *= s * (1.0 - s));
                    acc(&mut g, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = gout;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| *gv *= sigmoid(x));
                    acc(&mut g, *a, ga);
                }
                Op::Column(a, j) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.column_mut(*j).assign(&gout.column(0));
                    acc(&mut g, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &gout.row(k);
                    }
                    acc(&mut g, *a, ga);
                }
                Op::RowSum(a) => {
                    let shape = self.value(*a).raw_dim();
                    let ga = Array2::from_shape_fn(shape, |(i, _)| gout[[i, 0]]);
                    acc(&mut g, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).raw_dim(), gout[[0, 0]]);
                    acc(&mut g, *a, ga);
                }
                Op::Mean(a) => {
                    let m = self.value(*a);
                    let k = if m.is_empty() { 0.0 } else { gout[[0, 0]] / m.len() as f64 };
                    acc(&mut g, *a, Array2::from_elem(m.raw_dim(), k));
                }
                Op::EdgeDot(a, b, pairs) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Array2::zeros(av.raw_dim());
                    let mut gb = Array2::zeros(bv.raw_dim());
                    for (e, &(i, j)) in pairs.iter().enumerate() {
                        let ge = gout[[e, 0]];
                        ga.row_mut(i).scaled_add(ge, &bv.row(j));
                        gb.row_mut(j).scaled_add(ge, &av.row(i));
                    }
                    acc(&mut g, *a, ga);
                    acc(&mut g, *b, gb);
                }
                Op::EdgeMean(e, edges) => {
                    let mut ge = Array2::zeros((edges.pairs.len(), 1));
                    for (i, inc) in edges.incident.iter().enumerate() {
                        let k = gout[[i, 0]] / inc.len().max(1) as f64;
                        for &e_idx in inc {
                            ge[[e_idx, 0]] += k;
                        }
                    }
                    acc(&mut g, *e, ge);
                }
                Op::Propagate {
                    h,
                    weights,
                    edges,
                    w,
                    s,
                } => {
                    // The normalized adjacency is symmetric, so dL/dH = Â·G.
                    let gh = propagate_values(edges, w, s, &gout);
                    if let Some(wv) = weights {
                        let hv = self.value(*h);
                        let n = edges.n;
                        // c_i = dL/ds_i
                        let c: Vec<f64> = (0..n)
                            .map(|i| {
                                (gout.row(i).dot(&out.row(i)) + gh.row(i).dot(&hv.row(i))) / s[i]
                            })
                            .collect();
                        let gw = Array2::from_shape_fn((1, edges.pairs.len()), |(_, e)| {
                            let (i, j) = edges.pairs[e];
                            let direct = s[i]
                                * s[j]
                                * (gout.row(i).dot(&hv.row(j)) + gout.row(j).dot(&hv.row(i)));
                            direct - 0.5 * s[i].powi(3) * c[i] - 0.5 * s[j].powi(3) * c[j]
                        });
                        acc(&mut g, *wv, gw);
                    }
                    acc(&mut g, *h, gh);
                }
                Op::SoftmaxCe {
                    logits,
                    rows,
                    labels,
                    probs,
                } => {
                    let mut gl = Array2::zeros(self.value(*logits).raw_dim());
                    let k = gout[[0, 0]] / rows.len().max(1) as f64;
                    for (r_idx, (&r, &y)) in rows.iter().zip(labels).enumerate() {
                        for c in 0..gl.ncols() {
                            let onehot = if c == y as usize { 1.0 } else { 0.0 };
                            gl[[r, c]] += k * (probs[[r_idx, c]] - onehot);
                        }
                    }
                    acc(&mut g, *logits, gl);
                }
                Op::BceLogits(a, targets) => {
                    let l = self.value(*a);
                    let k = gout[[0, 0]] / targets.len().max(1) as f64;
                    let mut ga = Array2::zeros(l.raw_dim());
                    for (idx, (gv, &x)) in ga.iter_mut().zip(l.iter()).enumerate() {
                        *gv = k * (sigmoid(x) - targets[idx]);
                    }
                    acc(&mut g, *a, ga);
                }
            }
        }
        Grads(g)
    }
}

fn acc(g: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
    match &mut g[v.0] {
        Some(existing) => *existing += &delta,
        slot => *slot = Some(delta),
    }
}

/// Gradients indexed by `Var`; values that do not influence the loss have
/// zero gradient.
pub struct Grads(Vec<Option<Array2<f64>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }

    /// Gradient for `v`, shaped like `like` when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Array2<f64>) -> Array2<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(like.raw_dim()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EdgeSet;
    use abin_core::seed::rng_from_seed;
    use rand::Rng;

    fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d loss / d leaf for every entry of `leaf`.
    fn check(build: impl Fn(&mut Tape, &[Var]) -> Var, inputs: Vec<Array2<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], m);
            for idx in 0..m.len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    let slot = perturbed[k].iter_mut().nth(idx).unwrap();
                    *slot += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.into_iter().map(|m| t.leaf(m)).collect();
                    let l = build(&mut t, &vs);
                    t.scalar_value(l)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = *analytic.iter().nth(idx).unwrap();
                assert!(
                    (a - numeric).abs() <= 1e-4 * a.abs().max(numeric.abs()) + 1e-8,
                    "input {k} entry {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_matrix_ops() {
        let mut rng = rng_from_seed(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        let c = rand_mat(&mut rng, 3, 2);
        let bias = rand_mat(&mut rng, 1, 2);
        check(
            |t, v| {
                let ab = t.matmul(v[0], v[1]);
                let s = t.add_row(ab, v[3]);
                let s = t.mul_row(s, v[3]);
                let m = t.mul(s, v[2]);
                let d = t.sub(m, v[2]);
                let sg = t.sigmoid(d);
                let sp = t.softplus(s);
                let e = t.add(sg, sp);
                let sc = t.scale(e, 0.7);
                let rs = t.row_sum(sc);
                let col = t.column(sc, 1);
                let x = t.add(rs, col);
                let g = t.gather_rows(x, &[2, 0, 2]);
                let mean = t.mean(g);
                let total = t.sum(sc);
                t.add(mean, total)
            },
            vec![a, b, c, bias],
        );
    }

    #[test]
    fn relu_and_dropout_mask() {
        let mut rng = rng_from_seed(2);
        // keep entries away from the kink
        let a = rand_mat(&mut rng, 4, 3).mapv(|x| if x.abs() < 0.05 { 0.3 } else { x });
        let mask = Array2::from_shape_fn((4, 3), |(i, j)| if (i + j) % 3 == 0 { 0.0 } else { 1.5 });
        check(
            move |t, v| {
                let r = t.relu(v[0]);
                let d = t.mul_const(r, mask.clone());
                let sq = t.mul(d, d);
                t.sum(sq)
            },
            vec![a],
        );
    }

    #[test]
    fn losses() {
        let mut rng = rng_from_seed(3);
        let logits = rand_mat(&mut rng, 5, 2) * 3.0;
        check(|t, v| t.softmax_ce(v[0], &[0, 2, 4], &[1, 0, 1]), vec![logits.clone()]);
        check(
            |t, v| {
                let c = t.column(v[0], 0);
                t.bce_logits(c, &[1.0, 0.0, 1.0, 0.0, 0.5])
            },
            vec![logits],
        );
    }

    #[test]
    fn edge_dot_and_propagation() {
        let mut rng = rng_from_seed(4);
        let edges = Arc::new(EdgeSet::new(6, vec![(0, 1), (1, 2), (0, 3), (3, 4), (2, 4)]));
        let pairs = Arc::new(edges.pairs.clone());
        let h = rand_mat(&mut rng, 6, 3);
        let z = rand_mat(&mut rng, 6, 3);
        let w = Array2::from_shape_fn((1, 5), |_| rng.random_range(0.1..1.0));
        let probe = rand_mat(&mut rng, 6, 3);
        check(
            move |t, v| {
                let p = t.propagate(v[0], edges.clone(), Some(v[2]));
                let q = t.propagate(p, edges.clone(), None);
                let pr = t.leaf(probe.clone());
                let m = t.mul(q, pr);
                let ed = t.edge_dot(m, v[1], pairs.clone());
                let sp = t.softplus(ed);
                let per_node = t.edge_mean(sp, edges.clone());
                let sq = t.mul(per_node, per_node);
                t.sum(sq)
            },
            vec![h, z, w],
        );
    }

    #[test]
    fn propagation_matches_dense_normalization() {
        let edges = Arc::new(EdgeSet::new(3, vec![(0, 1), (1, 2)]));
        let mut t = Tape::new();
        let h = t.leaf(Array2::eye(3));
        let p = t.propagate(h, edges, None);
        let r2 = 1.0 / 2f64.sqrt();
        let s = [r2, 1.0 / 3f64.sqrt(), r2];
        let expected = Array2::from_shape_fn((3, 3), |(i, j)| {
            let a = if i == j || i.abs_diff(j) == 1 { 1.0 } else { 0.0 };
            s[i] * a * s[j]
        });
        for (x, y) in t.value(p).iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
