//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order; [`Graph::backward`] walks the
//! tape in reverse. Each forward pass builds a fresh graph.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{gemm, Float, Tensor};

enum Op<T> {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        out_ch: usize,
        cols: Vec<T>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    SpatialMean {
        x: usize,
    },
    SpatialStd {
        x: usize,
        means: Vec<T>,
    },
    AdaIn {
        x: usize,
        mean: usize,
        std: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Sigmoid {
        x: usize,
    },
    Scale {
        x: usize,
        k: T,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    ConcatCols {
        a: usize,
        b: usize,
        da: usize,
        db: usize,
    },
    ConcatRows {
        a: usize,
        b: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    MixRows {
        x: usize,
        perm: Vec<usize>,
        lambdas: Vec<T>,
    },
    Grl {
        x: usize,
        c: T,
    },
    MeanAbsError {
        x: usize,
        target: Vec<T>,
    },
    RelaxedBce {
        src: usize,
        tgt: usize,
        h: T,
        clamp: T,
    },
    SumAll {
        x: usize,
    },
    Reshape {
        x: usize,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Variables borrow the graph, so a graph outlives every
/// variable built on it.
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<usize, usize>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.graph.nodes.borrow()[self.id].value.shape())
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Input that takes no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is recorded.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to the parameter slot `key`. Binding the same key twice
    /// returns the same variable, so shared weights accumulate one gradient.
    pub fn param(&self, key: usize, value: &Tensor<T>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var { graph: self, id };
        }
        let v = self.leaf(value.clone());
        self.params.borrow_mut().insert(key, v.id);
        v
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Side of every kink on the tape: one flag per ReLU input element
    /// (`x > 0`) and per absolute-error residual (`x >= target`), in tape
    /// order. Two evaluations with equal patterns lie on one smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for node in nodes.iter() {
            match &node.op {
                Op::Relu { x } => out.extend(nodes[*x].value.data().iter().map(|&v| v > T::zero())),
                Op::MeanAbsError { x, target } => {
                    out.extend(nodes[*x].value.data().iter().zip(target).map(|(&v, &t)| v >= t))
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            backward_node(&nodes, id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(&key, &id)| (key, id))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of a reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, usize>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for the parameter slot `key`, if it took part in the loss.
    pub fn param(&self, key: usize) -> Option<&Tensor<T>> {
        self.params.get(&key).and_then(|&id| self.grads[id].as_ref())
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], id: usize, shape: &[usize], g: Vec<T>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape, g).expect("gradient shape"));
        }
    }
}

fn backward_node<T: Float>(
    nodes: &[Node<T>],
    id: usize,
    grad: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let g = grad.data();
    let out = &nodes[id].value;
    let rg = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv2d {
            x,
            w,
            geom,
            out_ch,
            cols,
        } => {
            let plane = geom.out_h * geom.out_w;
            let ncols = geom.columns();
            let k = geom.patch_len();
            // [out_ch, batch * plane] layout of the upstream gradient
            let mut g2 = vec![T::zero(); out_ch * ncols];
            for b in 0..geom.batch {
                for co in 0..*out_ch {
                    let src = &g[(b * out_ch + co) * plane..][..plane];
                    g2[co * ncols + b * plane..][..plane].copy_from_slice(src);
                }
            }
            if rg(*w) {
                let mut dw = vec![T::zero(); out_ch * k];
                gemm(*out_ch, ncols, k, &g2, false, cols, true, T::zero(), &mut dw);
                accumulate(grads, *w, val(*w).shape(), dw);
            }
            if rg(*x) {
                let mut dcols = vec![T::zero(); k * ncols];
                gemm(k, *out_ch, ncols, val(*w).data(), true, &g2, false, T::zero(), &mut dcols);
                let dx = kernels::col2im(&dcols, geom);
                accumulate(grads, *x, val(*x).shape(), dx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (b, c, h, w) = val(*x).dims4().expect("bn input");
            let hw = h * w;
            let gam = val(*gamma);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * hw;
                    for i in off..off + hw {
                        dgamma[ci] += g[i] * xhat[i];
                        dbeta[ci] += g[i];
                    }
                }
            }
            if rg(*x) {
                let n = b * hw;
                let mut dx = vec![T::zero(); g.len()];
                for ci in 0..c {
                    let gm = gam.data()[ci];
                    // sums over dxhat = g * gamma
                    let s1 = dbeta[ci] * gm;
                    let s2 = dgamma[ci] * gm;
                    for bi in 0..b {
                        let off = (bi * c + ci) * hw;
                        for i in off..off + hw {
                            dx[i] = kernels::normalize_backward(
                                s1,
                                s2,
                                inv_std[ci],
                                n,
                                g[i] * gm,
                                xhat[i],
                            );
                        }
                    }
                }
                accumulate(grads, *x, val(*x).shape(), dx);
            }
            if rg(*gamma) {
                accumulate(grads, *gamma, &[c], dgamma);
            }
            if rg(*beta) {
                accumulate(grads, *beta, &[c], dbeta);
            }
        }
        Op::ChannelAffine {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let xv = val(*x);
            let (b, c, h, w) = xv.dims4().expect("affine input");
            let hw = h * w;
            let gam = val(*gamma);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = vec![T::zero(); g.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * hw;
                    for i in off..off + hw {
                        dgamma[ci] += g[i] * (xv.data()[i] - mean[ci]) * inv_std[ci];
                        dbeta[ci] += g[i];
                        dx[i] = g[i] * gam.data()[ci] * inv_std[ci];
                    }
                }
            }
            if rg(*x) {
                accumulate(grads, *x, xv.shape(), dx);
            }
            if rg(*gamma) {
                accumulate(grads, *gamma, &[c], dgamma);
            }
            if rg(*beta) {
                accumulate(grads, *beta, &[c], dbeta);
            }
        }
        Op::Relu { x } => {
            let dx = g
                .iter()
                .zip(out.data())
                .map(|(&gi, &o)| if o > T::zero() { gi } else { T::zero() })
                .collect();
            accumulate(grads, *x, out.shape(), dx);
        }
        Op::MaxPool { x, argmax } => {
            let mut dx = vec![T::zero(); val(*x).len()];
            for (&src, &gi) in argmax.iter().zip(g) {
                dx[src] += gi;
            }
            accumulate(grads, *x, val(*x).shape(), dx);
        }
        Op::SpatialMean { x } => {
            let xv = val(*x);
            let (_, _, h, w) = xv.dims4().expect("spatial input");
            let inv = T::one() / T::cst((h * w) as f64);
            let mut dx = Vec::with_capacity(xv.len());
            for &gi in g {
                dx.extend(std::iter::repeat_n(gi * inv, h * w));
            }
            accumulate(grads, *x, xv.shape(), dx);
        }
        Op::SpatialStd { x, means } => {
            let xv = val(*x);
            let (_, _, h, w) = xv.dims4().expect("spatial input");
            let hw = h * w;
            let nf = T::cst(hw as f64);
            let mut dx = vec![T::zero(); xv.len()];
            for (p, ((&gi, &s), &m)) in g.iter().zip(out.data()).zip(means).enumerate() {
                let scale = gi / (nf * s);
                for i in p * hw..(p + 1) * hw {
                    dx[i] = scale * (xv.data()[i] - m);
                }
            }
            accumulate(grads, *x, xv.shape(), dx);
        }
        Op::AdaIn {
            x,
            mean,
            std,
            xhat,
            inv_std,
        } => {
            let xv = val(*x);
            let (_, _, h, w) = xv.dims4().expect("adain input");
            let hw = h * w;
            let tstd = val(*std);
            let planes = inv_std.len();
            let mut dmean = vec![T::zero(); planes];
            let mut dstd = vec![T::zero(); planes];
            for p in 0..planes {
                for i in p * hw..(p + 1) * hw {
                    dmean[p] += g[i];
                    dstd[p] += g[i] * xhat[i];
                }
            }
            if rg(*x) {
                let mut dx = vec![T::zero(); xv.len()];
                for p in 0..planes {
                    let s = tstd.data()[p];
                    let (s1, s2) = (dmean[p] * s, dstd[p] * s);
                    for i in p * hw..(p + 1) * hw {
                        dx[i] =
                            kernels::normalize_backward(s1, s2, inv_std[p], hw, g[i] * s, xhat[i]);
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            if rg(*mean) {
                accumulate(grads, *mean, val(*mean).shape(), dmean);
            }
            if rg(*std) {
                accumulate(grads, *std, val(*std).shape(), dstd);
            }
        }
        Op::Linear { x, w, b } => {
            let xv = val(*x);
            let wv = val(*w);
            let (rows, inp) = xv.dims2().expect("linear input");
            let outp = wv.shape()[0];
            if rg(*x) {
                let mut dx = vec![T::zero(); rows * inp];
                gemm(rows, outp, inp, g, false, wv.data(), false, T::zero(), &mut dx);
                accumulate(grads, *x, xv.shape(), dx);
            }
            if rg(*w) {
                let mut dw = vec![T::zero(); outp * inp];
                gemm(outp, rows, inp, g, true, xv.data(), false, T::zero(), &mut dw);
                accumulate(grads, *w, wv.shape(), dw);
            }
            if rg(*b) {
                let mut db = vec![T::zero(); outp];
                for r in 0..rows {
                    for (d, &gi) in db.iter_mut().zip(&g[r * outp..(r + 1) * outp]) {
                        *d += gi;
                    }
                }
                accumulate(grads, *b, &[outp], db);
            }
        }
        Op::Sigmoid { x } => {
            let dx = g
                .iter()
                .zip(out.data())
                .map(|(&gi, &y)| gi * y * (T::one() - y))
                .collect();
            accumulate(grads, *x, out.shape(), dx);
        }
        Op::Scale { x, k } => {
            let dx = g.iter().map(|&gi| gi * *k).collect();
            accumulate(grads, *x, out.shape(), dx);
        }
        Op::Add { a, b } => {
            if rg(*a) {
                accumulate(grads, *a, out.shape(), g.to_vec());
            }
            if rg(*b) {
                accumulate(grads, *b, out.shape(), g.to_vec());
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let da = g.iter().zip(bv.data()).map(|(&gi, &y)| gi * y).collect();
                accumulate(grads, *a, out.shape(), da);
            }
            if rg(*b) {
                let db = g.iter().zip(av.data()).map(|(&gi, &y)| gi * y).collect();
                accumulate(grads, *b, out.shape(), db);
            }
        }
        Op::ConcatCols { a, b, da, db } => {
            let rows = out.shape()[0];
            let width = da + db;
            if rg(*a) {
                let mut ga = Vec::with_capacity(rows * da);
                for r in 0..rows {
                    ga.extend_from_slice(&g[r * width..r * width + da]);
                }
                accumulate(grads, *a, val(*a).shape(), ga);
            }
            if rg(*b) {
                let mut gb = Vec::with_capacity(rows * db);
                for r in 0..rows {
                    gb.extend_from_slice(&g[r * width + da..(r + 1) * width]);
                }
                accumulate(grads, *b, val(*b).shape(), gb);
            }
        }
        Op::ConcatRows { a, b } => {
            let na = val(*a).len();
            if rg(*a) {
                accumulate(grads, *a, val(*a).shape(), g[..na].to_vec());
            }
            if rg(*b) {
                accumulate(grads, *b, val(*b).shape(), g[na..].to_vec());
            }
        }
        Op::SliceRows { x, start } => {
            let xv = val(*x);
            let stride = xv.len() / xv.shape()[0];
            let mut dx = vec![T::zero(); xv.len()];
            dx[start * stride..start * stride + g.len()].copy_from_slice(g);
            accumulate(grads, *x, xv.shape(), dx);
        }
        Op::MixRows { x, perm, lambdas } => {
            let stride = out.len() / out.shape()[0];
            let mut dx = vec![T::zero(); out.len()];
            for (i, (&j, &lam)) in perm.iter().zip(lambdas).enumerate() {
                for e in 0..stride {
                    let gi = g[i * stride + e];
                    dx[i * stride + e] += lam * gi;
                    dx[j * stride + e] += (T::one() - lam) * gi;
                }
            }
            accumulate(grads, *x, out.shape(), dx);
        }
        Op::Grl { x, c } => {
            let dx = g.iter().map(|&gi| -(*c) * gi).collect();
            accumulate(grads, *x, out.shape(), dx);
        }
        Op::MeanAbsError { x, target } => {
            let xv = val(*x);
            let n = T::cst(target.len() as f64);
            let dx = xv
                .data()
                .iter()
                .zip(target)
                .map(|(&p, &y)| {
                    let d = p - y;
                    let s = if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    g[0] * s / n
                })
                .collect();
            accumulate(grads, *x, xv.shape(), dx);
        }
        Op::RelaxedBce { src, tgt, h, clamp } => {
            let (lo, hi) = (*clamp, T::one() - *clamp);
            let inside = |p: T| p >= lo && p <= hi;
            if rg(*src) {
                let sv = val(*src);
                let n = T::cst(sv.len() as f64);
                let ds = sv
                    .data()
                    .iter()
                    .map(|&p| {
                        if !inside(p) {
                            return T::zero();
                        }
                        // d/dp of -log(1 - |p - h|)
                        let d = p - *h;
                        let a = d.abs();
                        let sign = if d > T::zero() {
                            T::one()
                        } else if d < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        g[0] * sign / ((T::one() - a) * n)
                    })
                    .collect();
                accumulate(grads, *src, sv.shape(), ds);
            }
            if rg(*tgt) {
                let tv = val(*tgt);
                let n = T::cst(tv.len() as f64);
                let dt = tv
                    .data()
                    .iter()
                    .map(|&p| if inside(p) { -g[0] / (p * n) } else { T::zero() })
                    .collect();
                accumulate(grads, *tgt, tv.shape(), dt);
            }
        }
        Op::SumAll { x } => {
            let xv = val(*x);
            accumulate(grads, *x, xv.shape(), vec![g[0]; xv.len()]);
        }
        Op::Reshape { x } => {
            accumulate(grads, *x, val(*x).shape(), g.to_vec());
        }
    }
}

/// Source and target loss terms of the relaxed discriminator loss with
/// probabilities clamped to `[clamp, 1 - clamp]`.
pub(crate) fn relaxed_bce_value<T: Float>(src: &[T], tgt: &[T], h: T, clamp: T) -> T {
    let clip = |p: T| p.max(clamp).min(T::one() - clamp);
    let ns = T::cst(src.len() as f64);
    let nt = T::cst(tgt.len() as f64);
    let s: T = src
        .iter()
        .map(|&p| -(T::one() - (clip(p) - h).abs()).ln())
        .sum::<T>()
        / ns;
    let t: T = tgt.iter().map(|&p| -clip(p).ln()).sum::<T>() / nt;
    s + t
}

impl<'g, T: Float> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn check_same(&self, other: &Var<'g, T>) -> Result<()> {
        if !std::ptr::eq(self.graph, other.graph) {
            return Err(shape_err!("variables belong to different graphs"));
        }
        Ok(())
    }

    /// 2-D convolution without bias; `weight` is `(out, in, kh, kw)`.
    pub fn conv2d(&self, weight: Var<'g, T>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        self.check_same(&weight)?;
        let x = self.value();
        let w = weight.value();
        let dims = x.dims4()?;
        let (out_ch, in_ch, kh, kw) = w.dims4()?;
        if in_ch != dims.1 {
            return Err(shape_err!(
                "conv expects {} input channels, got {}",
                in_ch,
                dims.1
            ));
        }
        let geom = ConvGeom::new(dims, (kh, kw), stride, pad)
            .ok_or_else(|| shape_err!("input {:?} too small for kernel {}x{}", x.shape(), kh, kw))?;
        let cols = kernels::im2col(x.data(), &geom);
        let ncols = geom.columns();
        let mut y2 = vec![T::zero(); out_ch * ncols];
        gemm(out_ch, geom.patch_len(), ncols, w.data(), false, &cols, false, T::zero(), &mut y2);
        let plane = geom.out_h * geom.out_w;
        let mut y = vec![T::zero(); y2.len()];
        for b in 0..geom.batch {
            for co in 0..out_ch {
                y[(b * out_ch + co) * plane..][..plane]
                    .copy_from_slice(&y2[co * ncols + b * plane..][..plane]);
            }
        }
        let value = Tensor::new(&[geom.batch, out_ch, geom.out_h, geom.out_w], y)?;
        let rg = self.requires_grad() || weight.requires_grad();
        // only the weight gradient needs the unfolded input
        let cols = if weight.requires_grad() { cols } else { Vec::new() };
        Ok(self.graph.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
                out_ch,
                cols,
            },
            rg,
        ))
    }

    /// Batch normalization with statistics of the current batch. Returns the
    /// output plus the batch mean and (biased) variance per channel.
    pub fn batch_norm(
        &self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        eps: T,
    ) -> Result<(Var<'g, T>, Vec<T>, Vec<T>)> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.len() != c || bv.len() != c {
            return Err(shape_err!("batch norm affine size {} vs {} channels", gv.len(), c));
        }
        let hw = h * w;
        let n = T::cst((b * hw) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                mean[ci] += x.data()[(bi * c + ci) * hw..][..hw].iter().copied().sum::<T>();
            }
        }
        for m in &mut mean {
            *m = *m / n;
        }
        for bi in 0..b {
            for ci in 0..c {
                let m = mean[ci];
                var[ci] += x.data()[(bi * c + ci) * hw..][..hw]
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum::<T>();
            }
        }
        for v in &mut var {
            *v = *v / n;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for i in off..off + hw {
                    xhat[i] = (x.data()[i] - mean[ci]) * inv_std[ci];
                    y[i] = xhat[i] * gv.data()[ci] + bv.data()[ci];
                }
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let out = self.graph.push(
            Tensor::new(x.shape(), y)?,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed statistics (evaluation mode).
    pub fn channel_affine(
        &self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!("running statistics size vs {} channels", c));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let hw = h * w;
        let mut y = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                for i in off..off + hw {
                    y[i] = (x.data()[i] - mean[ci]) * inv_std[ci] * gv.data()[ci] + bv.data()[ci];
                }
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.graph.push(
            Tensor::new(x.shape(), y)?,
            Op::ChannelAffine {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&self) -> Var<'g, T> {
        let v = self.value().map(|x| x.max(T::zero()));
        self.unary(v, Op::Relu { x: self.id })
    }

    /// Max pooling with a square window and symmetric zero-free padding.
    pub fn max_pool(&self, kernel: usize, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let dims = x.dims4()?;
        let geom = ConvGeom::new(dims, (kernel, kernel), stride, pad)
            .ok_or_else(|| shape_err!("input {:?} too small for pooling", x.shape()))?;
        let (b, c, h, w) = dims;
        let mut y = Vec::with_capacity(b * c * geom.out_h * geom.out_w);
        let mut argmax = Vec::with_capacity(y.capacity());
        for p in 0..b * c {
            let base = p * h * w;
            for oh in 0..geom.out_h {
                for ow in 0..geom.out_w {
                    let mut best = T::neg_infinity();
                    let mut best_i = base;
                    for ki in 0..kernel {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let i = base + ih as usize * w + iw as usize;
                            if x.data()[i] > best {
                                best = x.data()[i];
                                best_i = i;
                            }
                        }
                    }
                    y.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let value = Tensor::new(&[b, c, geom.out_h, geom.out_w], y)?;
        Ok(self.unary(value, Op::MaxPool { x: self.id, argmax }))
    }

    /// `(B, C, H, W) -> (B, C)` mean over the spatial axes.
    pub fn spatial_mean(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        if h * w == 0 {
            return Err(shape_err!("empty spatial extent in {:?}", x.shape()));
        }
        let means = kernels::plane_means(x.data(), h * w);
        Ok(self.unary(Tensor::new(&[b, c], means)?, Op::SpatialMean { x: self.id }))
    }

    /// `(B, C, H, W) -> (B, C)` population standard deviation over the spatial
    /// axes, `sqrt(var + eps)`.
    pub fn spatial_std(&self, eps: T) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        if h * w == 0 {
            return Err(shape_err!("empty spatial extent in {:?}", x.shape()));
        }
        let means = kernels::plane_means(x.data(), h * w);
        let stds = kernels::plane_stds(x.data(), &means, h * w, eps);
        Ok(self.unary(Tensor::new(&[b, c], stds)?, Op::SpatialStd { x: self.id, means }))
    }

    /// Re-normalizes every `(b, c)` plane to carry `mean[b, c]` and
    /// `std[b, c]`, removing its own statistics first.
    pub fn adain(&self, mean: Var<'g, T>, std: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        self.check_same(&mean)?;
        self.check_same(&std)?;
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        let (mv, sv) = (mean.value(), std.value());
        if mv.shape() != [b, c] || sv.shape() != [b, c] {
            return Err(shape_err!(
                "target style {:?}/{:?} does not match feature map {:?}",
                mv.shape(),
                sv.shape(),
                x.shape()
            ));
        }
        if h * w == 0 {
            return Err(shape_err!("empty spatial extent in {:?}", x.shape()));
        }
        let hw = h * w;
        let means = kernels::plane_means(x.data(), hw);
        let stds = kernels::plane_stds(x.data(), &means, hw, eps);
        let inv_std: Vec<T> = stds.iter().map(|&s| T::one() / s).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for p in 0..b * c {
            for i in p * hw..(p + 1) * hw {
                xhat[i] = (x.data()[i] - means[p]) * inv_std[p];
                y[i] = sv.data()[p] * xhat[i] + mv.data()[p];
            }
        }
        let rg = self.requires_grad() || mean.requires_grad() || std.requires_grad();
        Ok(self.graph.push(
            Tensor::new(x.shape(), y)?,
            Op::AdaIn {
                x: self.id,
                mean: mean.id,
                std: std.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Affine layer `x W^T + b` with `W` of shape `(out, in)`.
    pub fn linear(&self, weight: Var<'g, T>, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_same(&weight)?;
        let x = self.value();
        let w = weight.value();
        let (rows, inp) = x.dims2()?;
        let (outp, w_in) = w.dims2()?;
        if w_in != inp || bias.value().len() != outp {
            return Err(shape_err!(
                "affine layer {}x{} cannot take input width {}",
                outp,
                w_in,
                inp
            ));
        }
        let mut y = vec![T::zero(); rows * outp];
        for r in 0..rows {
            y[r * outp..(r + 1) * outp].copy_from_slice(bias.value().data());
        }
        gemm(rows, inp, outp, x.data(), false, w.data(), true, T::one(), &mut y);
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        Ok(self.graph.push(
            Tensor::new(&[rows, outp], y)?,
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.id,
            },
            rg,
        ))
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        let v = self.value().map(kernels::sigmoid);
        self.unary(v, Op::Sigmoid { x: self.id })
    }

    pub fn scale(&self, k: T) -> Var<'g, T> {
        let v = self.value().map(|x| x * k);
        self.unary(v, Op::Scale { x: self.id, k })
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &self,
        other: Var<'g, T>,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Var<'g, T>> {
        self.check_same(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err!("elementwise shapes {:?} and {:?}", a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .graph
            .push(Tensor::new(a.shape(), data)?, op(self.id, other.id), rg))
    }

    /// `(B, Da) ++ (B, Db) -> (B, Da + Db)`.
    pub fn concat_cols(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_same(&other)?;
        let (a, b) = (self.value(), other.value());
        let (ra, da) = a.dims2()?;
        let (rb, db) = b.dims2()?;
        if ra != rb {
            return Err(shape_err!("cannot concatenate {} rows with {} rows", ra, rb));
        }
        let mut data = Vec::with_capacity(ra * (da + db));
        for r in 0..ra {
            data.extend_from_slice(&a.data()[r * da..(r + 1) * da]);
            data.extend_from_slice(&b.data()[r * db..(r + 1) * db]);
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(
            Tensor::new(&[ra, da + db], data)?,
            Op::ConcatCols {
                a: self.id,
                b: other.id,
                da,
                db,
            },
            rg,
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_same(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape()[1..] != b.shape()[1..] {
            return Err(shape_err!("cannot stack {:?} on {:?}", b.shape(), a.shape()));
        }
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(
            Tensor::new(&shape, data)?,
            Op::ConcatRows {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let rows = x.shape()[0];
        if start + len > rows {
            return Err(shape_err!("rows {}..{} out of {}", start, start + len, rows));
        }
        let stride = x.len() / rows.max(1);
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let data = x.data()[start * stride..(start + len) * stride].to_vec();
        Ok(self.unary(Tensor::new(&shape, data)?, Op::SliceRows { x: self.id, start }))
    }

    /// Row-wise convex combination `y_i = l_i x_i + (1 - l_i) x_{perm[i]}`.
    pub fn mix_rows(&self, perm: &[usize], lambdas: &[T]) -> Result<Var<'g, T>> {
        let x = self.value();
        let rows = x.shape()[0];
        if perm.len() != rows || lambdas.len() != rows || perm.iter().any(|&j| j >= rows) {
            return Err(shape_err!(
                "mixing needs {} partners and coefficients, got {} and {}",
                rows,
                perm.len(),
                lambdas.len()
            ));
        }
        let stride = x.len() / rows.max(1);
        let mut data = Vec::with_capacity(x.len());
        for (i, (&j, &lam)) in perm.iter().zip(lambdas).enumerate() {
            let (a, b) = (x.row(i), x.row(j));
            data.extend(a.iter().zip(b).map(|(&u, &v)| lam * u + (T::one() - lam) * v));
        }
        debug_assert_eq!(data.len(), rows * stride);
        Ok(self.unary(
            Tensor::new(x.shape(), data)?,
            Op::MixRows {
                x: self.id,
                perm: perm.to_vec(),
                lambdas: lambdas.to_vec(),
            },
        ))
    }

    /// Gradient reversal: identity forward, gradient scaled by `-c` backward.
    pub fn grl(&self, c: T) -> Var<'g, T> {
        let v = (*self.value()).clone();
        self.unary(v, Op::Grl { x: self.id, c })
    }

    /// `mean_i |x_i - target_i|` as a single-element tensor.
    pub fn mean_abs_error(&self, target: &[T]) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.len() != target.len() || target.is_empty() {
            return Err(crate::error::input_err!(
                "{} predictions vs {} labels",
                x.len(),
                target.len()
            ));
        }
        let n = T::cst(target.len() as f64);
        let loss = x
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &y)| (p - y).abs())
            .sum::<T>()
            / n;
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::MeanAbsError {
                x: self.id,
                target: target.to_vec(),
            },
        ))
    }

    /// Relaxed binary cross entropy over source (`self`) and target
    /// probabilities with relaxation flag `h`.
    pub fn relaxed_bce(&self, target: Var<'g, T>, h: T, clamp: T) -> Result<Var<'g, T>> {
        self.check_same(&target)?;
        let (s, t) = (self.value(), target.value());
        if s.is_empty() || t.is_empty() {
            return Err(crate::error::input_err!("discriminator loss needs non-empty batches"));
        }
        let loss = relaxed_bce_value(s.data(), t.data(), h, clamp);
        let rg = self.requires_grad() || target.requires_grad();
        Ok(self.graph.push(
            Tensor::scalar(loss),
            Op::RelaxedBce {
                src: self.id,
                tgt: target.id,
                h,
                clamp,
            },
            rg,
        ))
    }

    pub fn sum_all(&self) -> Var<'g, T> {
        let s = self.value().data().iter().copied().sum::<T>();
        self.unary(Tensor::scalar(s), Op::SumAll { x: self.id })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape { x: self.id }))
    }

    /// Weighted sum `sum_i w_i x_i` with constant weights: a convenient
    /// scalar probe for gradient checks.
    pub fn dot_const(&self, weights: &Tensor<T>) -> Result<Var<'g, T>> {
        let w = self.graph.constant(weights.clone().reshape(&self.shape())?);
        Ok(self.mul(w)?.sum_all())
    }
}
