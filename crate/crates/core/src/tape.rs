//! Define-by-run gradient tape.
//!
//! A `Tape` records one forward pass; `backward` replays it in reverse and
//! accumulates vector-Jacobian products into every gradient leaf. Tapes are
//! single-threaded and rebuilt per forward pass; parallelism happens across
//! episodes, each with its own tape.
//!
//! Every recorded op validates that its output is finite — a NaN or Inf is
//! surfaced as `TensorError::NonFinite` instead of propagating silently.

use crate::scalar::Scalar;
use crate::tensor::{self, Result, Tensor, TensorError};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type Vjp<S> = Box<dyn Fn(&Tensor<S>) -> Result<Tensor<S>>>;

struct Edge<S: Scalar> {
    parent: usize,
    vjp: Vjp<S>,
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    edges: Vec<Edge<S>>,
    needs_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Gradients keyed by tape position after a backward pass.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros when the loss never touched it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false)
    }

    /// Copy of a node's value with the gradient path severed.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            edges: Vec::new(),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: &'static str, value: Tensor<S>, edges: Vec<(Var, Vjp<S>)>) -> Result<Var> {
        value.validate_finite(op)?;
        let edges: Vec<Edge<S>> = edges
            .into_iter()
            .filter(|(p, _)| self.nodes[p.0].needs_grad)
            .map(|(p, vjp)| Edge { parent: p.0, vjp })
            .collect();
        let needs_grad = !edges.is_empty();
        self.nodes.push(Node {
            value,
            edges,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagate d(loss)/d(node) to every reachable node, visiting each
    /// recorded operation exactly once in reverse execution order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = &self.nodes[loss.0].value;
        assert_eq!(lv.numel(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else {
                continue;
            };
            for edge in &self.nodes[id].edges {
                let contrib = (edge.vjp)(&g)?;
                grads[edge.parent] = Some(match grads[edge.parent].take() {
                    Some(acc) => tensor::add(&acc, &contrib)?,
                    None => contrib,
                });
            }
            if !self.nodes[id].edges.is_empty() && id != loss.0 {
                grads[id] = None; // interior grads are not needed again
            }
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.validate_finite("backward").is_err() {
                    return Err(TensorError::NonFinite {
                        op: if self.nodes[id].edges.is_empty() {
                            "backward(leaf gradient)"
                        } else {
                            "backward"
                        },
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    // -- elementwise and structural ops ------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        self.push(
            "add",
            out,
            vec![
                (a, Box::new(|g| Ok(g.clone()))),
                (b, Box::new(|g| Ok(g.clone()))),
            ],
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::sub(self.value(a), self.value(b))?;
        self.push(
            "sub",
            out,
            vec![
                (a, Box::new(|g| Ok(g.clone()))),
                (b, Box::new(|g: &Tensor<S>| Ok(g.map(|v| -v)))),
            ],
        )
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = tensor::hadamard(&av, &bv)?;
        self.push(
            "hadamard",
            out,
            vec![
                (a, Box::new(move |g| tensor::hadamard(g, &bv))),
                (b, Box::new(move |g| tensor::hadamard(g, &av))),
            ],
        )
    }

    pub fn scalar_mul(&mut self, x: Var, k: S) -> Result<Var> {
        let out = tensor::scale(self.value(x), k);
        self.push(
            "scalar_mul",
            out,
            vec![(x, Box::new(move |g| Ok(tensor::scale(g, k))))],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let out = xv.map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(
            "relu",
            out,
            vec![(
                x,
                // subgradient 0 at exactly 0
                Box::new(move |g| {
                    g.zip_map(&xv, "relu_grad", |gv, v| {
                        if v > S::zero() {
                            gv
                        } else {
                            S::zero()
                        }
                    })
                }),
            )],
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.exp());
        let saved = out.clone();
        self.push(
            "exp",
            out,
            vec![(x, Box::new(move |g| tensor::hadamard(g, &saved)))],
        )
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let out = xv.map(|v| v.ln());
        self.push(
            "log",
            out,
            vec![(x, Box::new(move |g| g.zip_map(&xv, "log_grad", |gv, v| gv / v)))],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let orig = self.value(x).shape().to_vec();
        let out = self.value(x).reshaped(shape.to_vec())?;
        self.push(
            "reshape",
            out,
            vec![(x, Box::new(move |g| g.reshaped(orig.clone())))],
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Tensor<S>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let refs: Vec<&Tensor<S>> = values.iter().collect();
        let out = tensor::concat(&refs, axis)?;
        let mut edges: Vec<(Var, Vjp<S>)> = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (i, &p) in parts.iter().enumerate() {
            let ext = values[i].shape()[axis];
            let start = offset;
            offset += ext;
            edges.push((
                p,
                Box::new(move |g| tensor::slice_axis(g, axis, start, ext)),
            ));
        }
        self.push("concat", out, edges)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = tensor::transpose2(self.value(x))?;
        self.push("transpose", out, vec![(x, Box::new(tensor::transpose2))])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let total: S = self.value(x).data().iter().copied().sum();
        self.push(
            "sum_all",
            Tensor::scalar(total),
            vec![(
                x,
                Box::new(move |g| Ok(Tensor::filled(shape.clone(), g.item()))),
            )],
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scalar_mul(s, S::from_f64(1.0 / n as f64))
    }

    // -- linear algebra -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = tensor::matmul(&av, &bv)?;
        self.push(
            "matmul",
            out,
            vec![
                (
                    a,
                    Box::new(move |g| tensor::matmul(g, &tensor::transpose2(&bv)?)),
                ),
                (
                    b,
                    Box::new(move |g| tensor::matmul(&tensor::transpose2(&av)?, g)),
                ),
            ],
        )
    }

    /// Row-broadcast bias: `x[n×c] + b[c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if xv.rank() != 2 || bv.rank() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = xv.to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bvv) in row.iter_mut().zip(bv.data()) {
                *o += bvv;
            }
        }
        self.push(
            "add_bias",
            Tensor::from_vec(vec![n, c], out)?,
            vec![
                (x, Box::new(|g| Ok(g.clone()))),
                (
                    b,
                    Box::new(move |g| {
                        let mut acc = vec![S::zero(); c];
                        for row in g.data().chunks(c) {
                            for (a, &gv) in acc.iter_mut().zip(row) {
                                *a += gv;
                            }
                        }
                        Tensor::from_vec(vec![c], acc)
                    }),
                ),
            ],
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax_axis(self.value(x), axis)?;
        let saved = out.clone();
        self.push(
            "softmax",
            out,
            vec![(
                x,
                Box::new(move |g| {
                    let (slices, stride, count) = tensor::softmax_layout(&saved, axis)?;
                    let yd = saved.data();
                    let gd = g.data();
                    let mut dx = vec![S::zero(); yd.len()];
                    for s in 0..slices {
                        let base = tensor::slice_base(&saved, axis, s);
                        let mut dot = S::zero();
                        for i in 0..count {
                            dot += gd[base + i * stride] * yd[base + i * stride];
                        }
                        for i in 0..count {
                            let idx = base + i * stride;
                            dx[idx] = yd[idx] * (gd[idx] - dot);
                        }
                    }
                    Tensor::from_vec(saved.shape().to_vec(), dx)
                }),
            )],
        )
    }

    /// Euclidean norm of each row of `x[n×c]`; a zero row is a hard error.
    pub fn l2_norm_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        if xv.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "l2_norm_rows",
                shape: xv.shape().to_vec(),
                details: "expected [n, c]".into(),
            });
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let mut norms = Vec::with_capacity(n);
        for (row, chunk) in xv.data().chunks(c).enumerate() {
            let sq: S = chunk.iter().map(|&v| v * v).sum();
            if sq == S::zero() {
                return Err(TensorError::ZeroNormRow {
                    op: "l2_norm_rows",
                    row,
                });
            }
            norms.push(sq.sqrt());
        }
        let out = Tensor::from_vec(vec![n], norms)?;
        let saved = out.clone();
        self.push(
            "l2_norm_rows",
            out,
            vec![(
                x,
                Box::new(move |g| {
                    let mut dx = vec![S::zero(); n * c];
                    for i in 0..n {
                        let gi = g.data()[i] / saved.data()[i];
                        for j in 0..c {
                            dx[i * c + j] = gi * xv.data()[i * c + j];
                        }
                    }
                    Tensor::from_vec(vec![n, c], dx)
                }),
            )],
        )
    }

    /// Per-row layer normalization of `x[n×c]` with scale and shift.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        if xv.rank() != 2 || gv.shape() != [xv.shape()[1]] || bv.shape() != [xv.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_rows",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let cf = S::from_f64(c as f64);
        let mut normed = vec![S::zero(); n * c];
        let mut inv_std = vec![S::zero(); n];
        let mut out = vec![S::zero(); n * c];
        for i in 0..n {
            let row = &xv.data()[i * c..(i + 1) * c];
            let mean: S = row.iter().copied().sum::<S>() / cf;
            let var: S = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cf;
            let istd = S::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let nv = (row[j] - mean) * istd;
                normed[i * c + j] = nv;
                out[i * c + j] = nv * gv.data()[j] + bv.data()[j];
            }
        }
        let normed = Tensor::from_vec(vec![n, c], normed)?;
        let normed_g = normed.clone();
        let normed_x = normed.clone();
        let gv_x = gv.clone();
        self.push(
            "layer_norm_rows",
            Tensor::from_vec(vec![n, c], out)?,
            vec![
                (
                    x,
                    Box::new(move |g| {
                        let mut dx = vec![S::zero(); n * c];
                        for i in 0..n {
                            let base = i * c;
                            // dxhat = g * gamma
                            let mut m1 = S::zero(); // mean(dxhat)
                            let mut m2 = S::zero(); // mean(dxhat * xhat)
                            for j in 0..c {
                                let dxh = g.data()[base + j] * gv_x.data()[j];
                                m1 += dxh;
                                m2 += dxh * normed_x.data()[base + j];
                            }
                            m1 = m1 / cf;
                            m2 = m2 / cf;
                            for j in 0..c {
                                let dxh = g.data()[base + j] * gv_x.data()[j];
                                dx[base + j] =
                                    inv_std[i] * (dxh - m1 - normed_x.data()[base + j] * m2);
                            }
                        }
                        Tensor::from_vec(vec![n, c], dx)
                    }),
                ),
                (
                    gamma,
                    Box::new(move |g| {
                        let mut dg = vec![S::zero(); c];
                        for i in 0..n {
                            for j in 0..c {
                                dg[j] += g.data()[i * c + j] * normed_g.data()[i * c + j];
                            }
                        }
                        Tensor::from_vec(vec![c], dg)
                    }),
                ),
                (
                    beta,
                    Box::new(move |g| {
                        let mut db = vec![S::zero(); c];
                        for row in g.data().chunks(c) {
                            for (d, &gv2) in db.iter_mut().zip(row) {
                                *d += gv2;
                            }
                        }
                        Tensor::from_vec(vec![c], db)
                    }),
                ),
            ],
        )
    }

    // -- spatial ops ---------------------------------------------------------

    pub fn bilinear_resize(&mut self, x: Var, h2: usize, w2: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let out = tensor::bilinear_resize3(xv, h2, w2)?;
        self.push(
            "bilinear_resize",
            out,
            vec![(
                x,
                Box::new(move |g| {
                    let rows = tensor::resize_taps(h, h2);
                    let cols = tensor::resize_taps(w, w2);
                    let mut dx = vec![S::zero(); c * h * w];
                    for ch in 0..c {
                        let src = &mut dx[ch * h * w..(ch + 1) * h * w];
                        let gch = &g.data()[ch * h2 * w2..(ch + 1) * h2 * w2];
                        for (i, &(i0, i1, di)) in rows.iter().enumerate() {
                            let wi0 = S::from_f64(1.0 - di);
                            let wi1 = S::from_f64(di);
                            for (j, &(j0, j1, dj)) in cols.iter().enumerate() {
                                let gv = gch[i * w2 + j];
                                let wj0 = S::from_f64(1.0 - dj);
                                let wj1 = S::from_f64(dj);
                                src[i0 * w + j0] += wi0 * wj0 * gv;
                                src[i0 * w + j1] += wi0 * wj1 * gv;
                                src[i1 * w + j0] += wi1 * wj0 * gv;
                                src[i1 * w + j1] += wi1 * wj1 * gv;
                            }
                        }
                    }
                    Tensor::from_vec(vec![c, h, w], dx)
                }),
            )],
        )
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let out = tensor::avgpool2(xv)?;
        self.push(
            "avgpool2",
            out,
            vec![(
                x,
                Box::new(move |g| {
                    let quarter = S::from_f64(0.25);
                    let (h2, w2) = (h / 2, w / 2);
                    let mut dx = vec![S::zero(); c * h * w];
                    for ch in 0..c {
                        for i in 0..h2 {
                            for j in 0..w2 {
                                let gv = g.data()[(ch * h2 + i) * w2 + j] * quarter;
                                let base = (ch * h + 2 * i) * w + 2 * j;
                                dx[base] += gv;
                                dx[base + 1] += gv;
                                dx[base + w] += gv;
                                dx[base + w + 1] += gv;
                            }
                        }
                    }
                    Tensor::from_vec(vec![c, h, w], dx)
                }),
            )],
        )
    }

    // -- fused task ops --------------------------------------------------------

    /// Pairwise cosine similarity of rows of `a[m×c]` and `b[n×c]`, scaled by
    /// `1/t`. An exactly-zero row of `b` (a masked-out support position)
    /// yields 0 against every row of `a` and carries no gradient; a zero row
    /// of `a` is an error.
    pub fn cosine_rows(&mut self, a: Var, b: Var, t: S) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_rows",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, c) = (av.shape()[0], av.shape()[1]);
        let n = bv.shape()[0];
        let row_norm = |d: &[S], i: usize| -> S {
            d[i * c..(i + 1) * c]
                .iter()
                .map(|&v| v * v)
                .sum::<S>()
                .sqrt()
        };
        let mut na = Vec::with_capacity(m);
        for i in 0..m {
            let nv = row_norm(av.data(), i);
            if nv == S::zero() {
                return Err(TensorError::ZeroNormRow {
                    op: "cosine_rows",
                    row: i,
                });
            }
            na.push(nv);
        }
        let nb: Vec<S> = (0..n).map(|j| row_norm(bv.data(), j)).collect();
        let inv_t = S::one() / t;
        let mut cosv = vec![S::zero(); m * n];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let arow = &av.data()[i * c..(i + 1) * c];
            for j in 0..n {
                if nb[j] == S::zero() {
                    continue; // masked-out support row: neutral 0
                }
                let brow = &bv.data()[j * c..(j + 1) * c];
                let dot: S = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                let cos = (dot / (na[i] * nb[j])).max(-S::one()).min(S::one());
                cosv[i * n + j] = cos;
                out[i * n + j] = cos * inv_t;
            }
        }
        let cosv = Tensor::from_vec(vec![m, n], cosv)?;
        let (av2, bv2, na2, nb2, cos2) = (av.clone(), bv.clone(), na.clone(), nb.clone(), cosv.clone());
        self.push(
            "cosine_rows",
            Tensor::from_vec(vec![m, n], out)?,
            vec![
                (
                    a,
                    Box::new(move |g| {
                        let mut da = vec![S::zero(); m * c];
                        for i in 0..m {
                            for j in 0..n {
                                if nb[j] == S::zero() {
                                    continue;
                                }
                                let gv = g.data()[i * n + j] * inv_t / na[i];
                                if gv == S::zero() {
                                    continue;
                                }
                                let cos = cosv.data()[i * n + j];
                                for k in 0..c {
                                    let ahat = av.data()[i * c + k] / na[i];
                                    let bhat = bv.data()[j * c + k] / nb[j];
                                    da[i * c + k] += gv * (bhat - cos * ahat);
                                }
                            }
                        }
                        Tensor::from_vec(vec![m, c], da)
                    }),
                ),
                (
                    b,
                    Box::new(move |g| {
                        let mut db = vec![S::zero(); n * c];
                        for j in 0..n {
                            if nb2[j] == S::zero() {
                                continue;
                            }
                            for i in 0..m {
                                let gv = g.data()[i * n + j] * inv_t / nb2[j];
                                if gv == S::zero() {
                                    continue;
                                }
                                let cos = cos2.data()[i * n + j];
                                for k in 0..c {
                                    let ahat = av2.data()[i * c + k] / na2[i];
                                    let bhat = bv2.data()[j * c + k] / nb2[j];
                                    db[j * c + k] += gv * (ahat - cos * bhat);
                                }
                            }
                        }
                        Tensor::from_vec(vec![n, c], db)
                    }),
                ),
            ],
        )
    }

    /// KL divergence `sum t * (ln t - ln max(s, floor))` of a constant
    /// teacher distribution from a recorded student. Teacher entries of 0
    /// contribute nothing; the floor only guards the log.
    pub fn kl_div(&mut self, teacher: &Tensor<S>, student: Var) -> Result<Var> {
        let sv = self.value(student).clone();
        if teacher.shape() != sv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "kl_div",
                lhs: teacher.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let floor = S::from_f64(1e-12);
        let mut total = S::zero();
        for (&t, &s) in teacher.data().iter().zip(sv.data()) {
            if t > S::zero() {
                total += t * (t.ln() - s.max(floor).ln());
            }
        }
        let tv = teacher.clone();
        self.push(
            "kl_div",
            Tensor::scalar(total),
            vec![(
                student,
                Box::new(move |g| {
                    let gs = g.item();
                    let mut ds = vec![S::zero(); sv.numel()];
                    for (i, (&t, &s)) in tv.data().iter().zip(sv.data()).enumerate() {
                        if t > S::zero() && s > floor {
                            ds[i] = -gs * t / s;
                        }
                    }
                    Tensor::from_vec(sv.shape().to_vec(), ds)
                }),
            )],
        )
    }

    /// Pixel-mean softmax cross-entropy of `logits[k×h×w]` against an
    /// integer class map given as a constant `[h×w]` tensor of values in
    /// `0..k` (a {0,1} mask for the binary head).
    pub fn softmax_cross_entropy_pixels(&mut self, logits: Var, target: &Tensor<S>) -> Result<Var> {
        let zv = self.value(logits).clone();
        if zv.rank() != 3 || target.shape() != &zv.shape()[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy_pixels",
                lhs: zv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let (k, h, w) = (zv.shape()[0], zv.shape()[1], zv.shape()[2]);
        let n = h * w;
        let nf = S::from_f64(n as f64);
        let classes: Vec<usize> = target
            .data()
            .iter()
            .map(|&v| v.into_f64().round() as usize)
            .collect();
        if classes.iter().any(|&cl| cl >= k) {
            return Err(TensorError::NonBinaryMask {
                op: "softmax_cross_entropy_pixels",
                value: classes.iter().find(|&&cl| cl >= k).copied().unwrap() as f64,
            });
        }
        let mut total = S::zero();
        for p in 0..n {
            let mut mx = S::neg_infinity();
            for ch in 0..k {
                mx = mx.max(zv.data()[ch * n + p]);
            }
            let mut denom = S::zero();
            for ch in 0..k {
                denom += (zv.data()[ch * n + p] - mx).exp();
            }
            total += denom.ln() + mx - zv.data()[classes[p] * n + p];
        }
        total = total / nf;
        self.push(
            "softmax_cross_entropy_pixels",
            Tensor::scalar(total),
            vec![(
                logits,
                Box::new(move |g| {
                    let gs = g.item() / nf;
                    let mut dz = vec![S::zero(); k * n];
                    for p in 0..n {
                        let mut mx = S::neg_infinity();
                        for ch in 0..k {
                            mx = mx.max(zv.data()[ch * n + p]);
                        }
                        let mut denom = S::zero();
                        for ch in 0..k {
                            denom += (zv.data()[ch * n + p] - mx).exp();
                        }
                        for ch in 0..k {
                            let prob = (zv.data()[ch * n + p] - mx).exp() / denom;
                            let y = if classes[p] == ch { S::one() } else { S::zero() };
                            dz[ch * n + p] = gs * (prob - y);
                        }
                    }
                    Tensor::from_vec(vec![k, h, w], dz)
                }),
            )],
        )
    }

    // -- composite helpers ----------------------------------------------------

    /// `x[n×ci] · w[ci×co] + b[co]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// `[c×h×w]` node to `[hw×c]` tokens.
    pub fn chw_to_tokens(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let flat = self.reshape(x, &[c, h * w])?;
        self.transpose(flat)
    }

    /// `[hw×c]` tokens back to `[c×h×w]`.
    pub fn tokens_to_chw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = self.value(x).shape()[1];
        let t = self.transpose(x)?;
        self.reshape(t, &[c, h, w])
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a small floor so that near-zero pairs do not divide
/// away the comparison entirely.
pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare the reverse-mode gradient of `build` against central finite
/// differences `(f(x+h) - f(x-h)) / 2h`, entry by entry, for every listed
/// parameter. `build` must be deterministic; run this in `f64`.
pub fn grad_check<S, F>(
    build: F,
    params: &[(&str, Tensor<S>)],
    h: f64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<S>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss);
        assert_eq!(value.numel(), 1, "grad_check requires a scalar loss");
        value.validate_finite("grad_check loss")?;
        Ok(value.item().into_f64())
    };

    let base: Vec<Tensor<S>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = base.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut entries = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for (pi, (name, t)) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], t.shape());
        let mut worst: f64 = 0.0;
        for e in 0..t.numel() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            let mut dp = t.to_vec();
            let mut dm = t.to_vec();
            dp[e] = dp[e] + S::from_f64(h);
            dm[e] = dm[e] - S::from_f64(h);
            plus[pi] = Tensor::from_vec(t.shape().to_vec(), dp)?;
            minus[pi] = Tensor::from_vec(t.shape().to_vec(), dm)?;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let err = rel_err(analytic.data()[e].into_f64(), numeric);
            worst = worst.max(err);
        }
        overall = overall.max(worst);
        entries.push(GradCheckEntry {
            name: (*name).to_string(),
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport {
        entries,
        max_rel_err: overall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randt(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn softmax_trivial_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).to_vec(), vec![0.5, 0.5]);

        let x2 = tape.constant(Tensor::from_vec(vec![2], vec![2f64.ln(), 0.0]).unwrap());
        let y2 = tape.softmax(x2, 0).unwrap();
        let v = tape.value(y2).to_vec();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn relu_and_identity_hadamard() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).to_vec(), vec![0.0, 2.0]);

        let a = tape.constant(Tensor::from_vec(vec![2], vec![3.0, -4.0]).unwrap());
        let one = tape.constant(Tensor::ones(vec![2]));
        let h = tape.hadamard(a, one).unwrap();
        assert_eq!(tape.value(h).to_vec(), vec![3.0, -4.0]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_exact() {
        let x = Tensor::from_vec(vec![3], vec![0.5, -1.25, 2.0]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let sq = tape.hadamard(vars[0], vars[0])?;
                tape.sum_all(sq)
            },
            &[("x", x)],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let x = Tensor::from_vec(vec![2], vec![0.3, 0.7]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let z = tape.scalar_mul(vars[0], 0.0)?;
                tape.sum_all(z)
            },
            &[("x", x)],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err == 0.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(vec![2]));
        let y = tape.relu(x).unwrap();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let _ = tape.backward(y);
        }));
        assert!(result.is_err());
    }

    #[test]
    fn l2_norm_zero_row_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 0.0, 0.0]).unwrap());
        match tape.l2_norm_rows(x) {
            Err(TensorError::ZeroNormRow { row: 1, .. }) => {}
            other => panic!("expected zero-norm error, got {other:?}"),
        }
    }

    #[test]
    fn nonfinite_output_is_surfaced() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(vec![1], vec![-1.0]).unwrap());
        match tape.log(x) {
            Err(TensorError::NonFinite { .. }) => {}
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(7);
        let a = randt(&mut rng, &[3, 4]);
        let b = randt(&mut rng, &[3, 4]);
        let report = grad_check(
            |tape, vars| {
                let s = tape.add(vars[0], vars[1])?;
                let p = tape.hadamard(s, vars[0])?;
                let r = tape.relu(p)?;
                let e = tape.exp(r)?;
                tape.mean_all(e)
            },
            &[("a", a), ("b", b)],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn matmul_and_softmax_grads_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let a = randt(&mut rng, &[3, 4]);
        let b = randt(&mut rng, &[4, 2]);
        let report = grad_check(
            |tape, vars| {
                let y = tape.matmul(vars[0], vars[1])?;
                let sm = tape.softmax(y, 1)?;
                let sq = tape.hadamard(sm, sm)?;
                tape.sum_all(sq)
            },
            &[("a", a), ("b", b)],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = Tensor::from_vec(vec![2], vec![0.4, -0.9]).unwrap();
        let mut tape = Tape::<f64>::new();
        let v = tape.param(x.clone());
        let d = tape.detach(v);
        let y = tape.hadamard(d, d).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(v).is_none());
    }

    #[test]
    fn identity_matmul_associativity_within_tolerance() {
        let mut rng = StdRng::seed_from_u64(13);
        let a = randt(&mut rng, &[4, 4]);
        let b = randt(&mut rng, &[4, 3]);
        let id = {
            let mut d = vec![0.0; 16];
            for i in 0..4 {
                d[i * 4 + i] = 1.0;
            }
            Tensor::from_vec(vec![4, 4], d).unwrap()
        };
        let ia = tensor::matmul(&id, &a).unwrap();
        let lhs = tensor::matmul(&ia, &b).unwrap();
        let rhs = tensor::matmul(&a, &b).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-12);
        }
    }
}
