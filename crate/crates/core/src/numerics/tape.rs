use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    Relu { x: Var },
    Add { a: Var, b: Var },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    Softmax { x: Var },
    SumSquares { x: Var },
    CrossEntropy { logits: Var, targets: Vec<f64>, log_probs: Vec<f64> },
    Focal { logits: Var, labels: Vec<usize>, gamma: f64, log_probs: Vec<f64> },
    LinComb { a: Var, wa: f64, b: Var, wb: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of a forward computation. A fresh tape is built for
/// every forward pass; node ids are assigned in creation order, so inputs
/// always precede their consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `x·W + b` for `x: B×D`, `W: D×H`, `b: H`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::dim(format!("affine expects 2-D x and W, got x{xs:?} W{ws:?}")));
        }
        if xs[1] != ws[0] {
            return Err(Error::dim(format!(
                "affine: x axis 1 ({}) != W axis 0 ({})",
                xs[1], ws[0]
            )));
        }
        if bs != [ws[1]] {
            return Err(Error::dim(format!("affine: b shape {bs:?} != [W axis 1 = {}]", ws[1])));
        }
        let (rows, d, h) = (xs[0], xs[1], ws[1]);
        let out = kernels::affine_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            rows,
            d,
            h,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![rows, h], out), Op::Affine { x, w, b }, rg))
    }

    /// Cross-correlation of `x: B×C×H×W` with `k: F×C×s×s`, plus an optional
    /// per-filter bias.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = conv_geom(self.value(x).shape(), self.value(k).shape(), stride, pad)?;
        if let Some(bv) = b {
            if self.value(bv).shape() != [geom.filters] {
                return Err(Error::dim(format!(
                    "conv2d: bias shape {:?} != [filters = {}]",
                    self.value(bv).shape(),
                    geom.filters
                )));
            }
        }
        let (out, cols) = kernels::conv_forward(
            self.value(x).data(),
            self.value(k).data(),
            b.map(|bv| self.value(bv).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|bv| self.rg(bv));
        let shape = vec![geom.batch, geom.filters, geom.out_h, geom.out_w];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, k, b, geom, cols }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&a| a.max(0.0)).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Relu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let out = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, rg))
    }

    /// Mean over the spatial axes: B×C×H×W → B×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("global_avg_pool expects 4-D input, got {s:?}")));
        }
        let (bsz, c, p) = (s[0], s[1], s[2] * s[3]);
        let out = v.data().chunks_exact(p).map(|plane| plane.iter().sum::<f64>() / p as f64).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![bsz, c], out), Op::GlobalAvgPool { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let shape = vec![v.rows(), v.row_len()];
        let t = Tensor::from_parts(shape, v.data().to_vec());
        let rg = self.rg(x);
        self.push(t, Op::Reshape { x }, rg)
    }

    /// Row-wise softmax of a B×K matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = super::softmax(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x }, rg))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares { x }, rg)
    }

    /// Mean over the batch of `−Σ_k t_k · log p_k`, with `p = softmax(logits)`
    /// computed in log space and clamped at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        check_logits(z)?;
        if targets.shape() != z.shape() {
            return Err(Error::dim(format!(
                "cross_entropy: targets {:?} vs logits {:?}",
                targets.shape(),
                z.shape()
            )));
        }
        let log_probs = clamped_log_softmax(z);
        let b = z.rows();
        let loss = -targets.data().iter().zip(&log_probs).map(|(t, lp)| t * lp).sum::<f64>() / b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                log_probs,
            },
            rg,
        ))
    }

    /// Mean over the batch of `−(1−p)^γ · log p` with `p` the softmax
    /// probability of the labelled class.
    pub fn focal(&mut self, logits: Var, labels: &[usize], gamma: f64) -> Result<Var> {
        let z = self.value(logits);
        check_logits(z)?;
        let (b, k) = (z.rows(), z.row_len());
        if labels.len() != b {
            return Err(Error::dim(format!("focal: {} labels for batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let log_probs = clamped_log_softmax(z);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let lp = log_probs[i * k + c];
                -(1.0 - lp.exp()).max(0.0).powf(gamma) * lp
            })
            .sum::<f64>()
            / b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Focal {
                logits,
                labels: labels.to_vec(),
                gamma,
                log_probs,
            },
            rg,
        ))
    }

    /// `wa·a + wb·b` for scalars.
    pub fn lincomb(&mut self, a: Var, wa: f64, b: Var, wb: f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_scalar() || !vb.is_scalar() {
            return Err(Error::dim("lincomb expects scalar operands"));
        }
        let v = wa * va.data()[0] + wb * vb.data()[0];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::LinComb { a, wa, b, wb }, rg))
    }

    /// Reverse pass from a scalar node. Each node is visited once, in reverse
    /// creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                lv.shape()
            )));
        }
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        // only trainable leaves and intermediates keep meaningful entries
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads, lens })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xs = self.value(*x).shape();
                let (rows, d, h) = (xs[0], xs[1], node.value.shape()[1]);
                if self.rg(*x) {
                    let dx = accumulate(grads, *x, rows * d);
                    kernels::gemm(rows, h, d, g, false, self.value(*w).data(), true, dx, true);
                }
                if self.rg(*w) {
                    let dw = accumulate(grads, *w, d * h);
                    kernels::gemm(d, rows, h, self.value(*x).data(), true, g, false, dw, true);
                }
                if self.rg(*b) {
                    let db = accumulate(grads, *b, h);
                    for row in g.chunks_exact(h) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b, geom, cols } => {
                let fbp = kernels::to_filter_major(g, geom);
                let ncols = geom.batch * geom.positions();
                let plen = geom.patch_len();
                if self.rg(*k) {
                    let dk = accumulate(grads, *k, geom.filters * plen);
                    kernels::gemm(geom.filters, ncols, plen, &fbp, false, cols, true, dk, true);
                }
                if let Some(bv) = b {
                    if self.rg(*bv) {
                        let db = accumulate(grads, *bv, geom.filters);
                        for (f, acc) in db.iter_mut().enumerate() {
                            *acc += fbp[f * ncols..(f + 1) * ncols].iter().sum::<f64>();
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; plen * ncols];
                    kernels::gemm(plen, geom.filters, ncols, self.value(*k).data(), true, &fbp, false, &mut dcols, false);
                    let dx = accumulate(grads, *x, self.value(*x).len());
                    kernels::col2im(&dcols, geom, dx);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = accumulate(grads, *x, xv.len());
                for ((acc, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *acc += gi;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.rg(*v) {
                        let d = accumulate(grads, *v, g.len());
                        for (acc, gi) in d.iter_mut().zip(g) {
                            *acc += gi;
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.value(*x).shape();
                let p = s[2] * s[3];
                let dx = accumulate(grads, *x, s.iter().product());
                for (plane, &gi) in dx.chunks_exact_mut(p).zip(g) {
                    let share = gi / p as f64;
                    for v in plane {
                        *v += share;
                    }
                }
            }
            Op::Reshape { x } => {
                let dx = accumulate(grads, *x, g.len());
                for (acc, gi) in dx.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let k = y.row_len();
                let dx = accumulate(grads, *x, y.len());
                for ((dxr, yr), gr) in dx.chunks_exact_mut(k).zip(y.data().chunks_exact(k)).zip(g.chunks_exact(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dxr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::SumSquares { x } => {
                let xv = self.value(*x).data();
                let dx = accumulate(grads, *x, xv.len());
                for (acc, xi) in dx.iter_mut().zip(xv) {
                    *acc += 2.0 * xi * g[0];
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                log_probs,
            } => {
                let z = self.value(*logits);
                let (b, k) = (z.rows(), z.row_len());
                let scale = g[0] / b as f64;
                let floor = PROB_FLOOR.ln();
                let dz = accumulate(grads, *logits, b * k);
                for i in 0..b {
                    let t = &targets[i * k..(i + 1) * k];
                    let lp = &log_probs[i * k..(i + 1) * k];
                    // clamped entries are constant and contribute no gradient
                    let active_mass: f64 = t.iter().zip(lp).filter(|(_, &l)| l > floor).map(|(t, _)| t).sum();
                    let lse = log_sum_exp(z.row(i));
                    for j in 0..k {
                        let p = (z.row(i)[j] - lse).exp();
                        let own = if lp[j] > floor { t[j] } else { 0.0 };
                        dz[i * k + j] += scale * (p * active_mass - own);
                    }
                }
            }
            Op::Focal {
                logits,
                labels,
                gamma,
                log_probs,
            } => {
                let z = self.value(*logits);
                let (b, k) = (z.rows(), z.row_len());
                let scale = g[0] / b as f64;
                let floor = PROB_FLOOR.ln();
                let dz = accumulate(grads, *logits, b * k);
                for (i, &c) in labels.iter().enumerate() {
                    let lp = log_probs[i * k + c];
                    let lse = log_sum_exp(z.row(i));
                    let p = (z.row(i)[c] - lse).exp();
                    let q = 1.0 - p;
                    // dL/dp · p, split into the modulating-factor and log terms
                    let modulating = if *gamma == 0.0 || q <= 0.0 {
                        0.0
                    } else {
                        gamma * q.powf(gamma - 1.0) * p * lp
                    };
                    let log_term = if lp > floor { q.max(0.0).powf(*gamma) } else { 0.0 };
                    let coeff = modulating - log_term;
                    for j in 0..k {
                        let pj = (z.row(i)[j] - lse).exp();
                        let delta = if j == c { 1.0 } else { 0.0 };
                        dz[i * k + j] += scale * coeff * (delta - pj);
                    }
                }
            }
            Op::LinComb { a, wa, b, wb } => {
                if self.rg(*a) {
                    accumulate(grads, *a, 1)[0] += wa * g[0];
                }
                if self.rg(*b) {
                    accumulate(grads, *b, 1)[0] += wb * g[0];
                }
            }
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_logits(z: &Tensor) -> Result<()> {
    if z.ndim() != 2 || z.shape()[1] < 2 {
        return Err(Error::dim(format!("expected B×K logits with K ≥ 2, got {:?}", z.shape())));
    }
    Ok(())
}

fn clamped_log_softmax(z: &Tensor) -> Vec<f64> {
    let k = z.row_len();
    let floor = PROB_FLOOR.ln();
    let mut out = vec![0.0; z.len()];
    for (o, row) in out.chunks_exact_mut(k).zip(z.data().chunks_exact(k)) {
        kernels::log_softmax_row(row, o);
        for v in o.iter_mut() {
            *v = v.max(floor);
        }
    }
    out
}

pub(crate) fn conv_geom(xs: &[usize], ks: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::dim(format!("conv2d expects 4-D x and kernels, got x{xs:?} k{ks:?}")));
    }
    if stride == 0 {
        return Err(Error::dim("conv2d: stride must be ≥ 1"));
    }
    if xs[1] != ks[1] {
        return Err(Error::dim(format!(
            "conv2d: input channels (x axis 1 = {}) != kernel channels (k axis 1 = {})",
            xs[1], ks[1]
        )));
    }
    if ks[2] != ks[3] {
        return Err(Error::dim(format!("conv2d: kernel must be square, got {}×{}", ks[2], ks[3])));
    }
    let k = ks[2];
    if k > xs[2] + 2 * pad || k > xs[3] + 2 * pad {
        return Err(Error::dim(format!(
            "conv2d: kernel {k} larger than padded input {}×{} (pad {pad})",
            xs[2] + 2 * pad,
            xs[3] + 2 * pad
        )));
    }
    Ok(ConvGeom {
        batch: xs[0],
        in_ch: xs[1],
        height: xs[2],
        width: xs[3],
        filters: ks[0],
        kernel: k,
        stride,
        pad,
        out_h: (xs[2] + 2 * pad - k) / stride + 1,
        out_w: (xs[3] + 2 * pad - k) / stride + 1,
    })
}
