use crate::conv::{self, Geom};
use crate::pool::{self, RoiCells};
use crate::scalar::gemm;
use crate::{Conv2dSpec, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        cols: Vec<T>,
        geom: Geom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geom,
    },
    Relu(Var),
    Add(Var, Var),
    ConcatChannels(Vec<Var>),
    RoiPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// A scalar whose local gradients were computed together with its value.
    Custom(Vec<(Var, Tensor<T>)>),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of a single forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    /// Copies the current value of `x` into a fresh constant, cutting the tape.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        assert_eq!(xv.shape().len(), 4, "conv2d input must be NCHW");
        let f = conv::conv2d_forward(
            xv.data(),
            xv.shape(),
            wv.data(),
            wv.shape(),
            b.map(|b| self.nodes[b.0].value.data()),
            spec,
        );
        let shape = vec![f.geom.b, f.cout, f.geom.ho, f.geom.wo];
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let cols = if needs { f.cols } else { Vec::new() };
        self.push(
            Tensor::new(shape, f.out),
            Op::Conv2d {
                x,
                w,
                b,
                cols,
                geom: f.geom,
            },
            needs,
        )
    }

    /// Transposed convolution with weight `[cin, cout, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        assert_eq!(xv.shape().len(), 4, "conv_transpose2d input must be NCHW");
        let (out, geom) = conv::conv_transpose2d_forward(
            xv.data(),
            xv.shape(),
            wv.data(),
            wv.shape(),
            b.map(|b| self.nodes[b.0].value.data()),
            spec,
        );
        let shape = vec![geom.b, geom.c, geom.h, geom.w];
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::new(shape, out),
            Op::ConvTranspose2d { x, w, b, geom },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|a| a.max(T::zero()));
        let needs = self.needs(x);
        self.push(v, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        v.add_assign(&self.nodes[b.0].value);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let first = self.shape(xs[0]).to_vec();
        let (b, h, w) = (first[0], first[2], first[3]);
        let mut ctot = 0;
        for &x in xs {
            let s = self.shape(x);
            assert!(
                s.len() == 4 && s[0] == b && s[2] == h && s[3] == w,
                "concat_channels: {s:?} incompatible with {first:?}"
            );
            ctot += s[1];
        }
        let n = h * w;
        let mut data = Vec::with_capacity(b * ctot * n);
        for bi in 0..b {
            for &x in xs {
                let t = &self.nodes[x.0].value;
                let c = t.dim(1);
                data.extend_from_slice(&t.data()[bi * c * n..(bi + 1) * c * n]);
            }
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(
            Tensor::new(vec![b, ctot, h, w], data),
            Op::ConcatChannels(xs.to_vec()),
            needs,
        )
    }

    /// Max-pools every ROI of `x[b,d,h,w]` into a `p x p` grid: output `[r,d,p,p]`.
    pub fn roi_pool(&mut self, x: Var, rois: &[RoiCells], p: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.shape().len(), 4, "roi_pool input must be NCHW");
        let d = xv.dim(1);
        let (out, argmax) = pool::roi_pool_forward(xv.data(), xv.shape(), rois, p);
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![rois.len(), d, p, p], out),
            Op::RoiPool { x, argmax },
            needs,
        )
    }

    /// `[b,c,h,w] -> [b,c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (b, c) = (xv.dim(0), xv.dim(1));
        let n: usize = xv.shape()[2..].iter().product();
        let inv = T::one() / T::of(n as f64);
        let data = xv
            .data()
            .chunks(n)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let needs = self.needs(x);
        self.push(Tensor::new(vec![b, c], data), Op::GlobalAvgPool(x), needs)
    }

    /// `x[r,din] * w[dout,din]^T + b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (r, din) = (xv.dim(0), xv.dim(1));
        let dout = wv.dim(0);
        assert_eq!(wv.dim(1), din, "linear: weight in-dim mismatch");
        let mut y = vec![T::zero(); r * dout];
        gemm(false, true, r, dout, din, xv.data(), wv.data(), T::zero(), &mut y);
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.data();
            for row in y.chunks_mut(dout) {
                for (a, &bb) in row.iter_mut().zip(bv) {
                    *a += bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(vec![r, dout], y), Op::Linear { x, w, b }, needs)
    }

    /// Scalar node with externally computed local gradients `d value / d input`.
    pub fn custom_scalar(&mut self, value: T, grads: Vec<(Var, Tensor<T>)>) -> Var {
        for (v, g) in &grads {
            assert_eq!(self.shape(*v), g.shape(), "custom_scalar gradient shape");
        }
        let needs = grads.iter().any(|(v, _)| self.needs(*v));
        self.push(Tensor::scalar(value), Op::Custom(grads), needs)
    }

    /// `sum_i coeff_i * term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for &(v, c) in terms {
            total += self.nodes[v.0].value.item() * c;
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), needs)
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                cols,
                geom,
            } => {
                let wv = &self.nodes[w.0].value;
                let cout = wv.dim(0);
                let (dx, dw) = conv::conv2d_backward(
                    g.data(),
                    cols,
                    geom,
                    wv.data(),
                    cout,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let db = conv::channel_bias_grad(g.data(), geom.b, cout, geom.ho * geom.wo);
                    self.accumulate(grads, b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (dx, dw) = conv::conv_transpose2d_backward(
                    g.data(),
                    xv.data(),
                    xv.dim(1),
                    wv.data(),
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let db = conv::channel_bias_grad(g.data(), geom.b, geom.c, geom.h * geom.w);
                    self.accumulate(grads, b, db);
                }
            }
            Op::Relu(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        self.accumulate(grads, v, g.data().to_vec());
                    }
                }
            }
            Op::ConcatChannels(xs) => {
                let s = node.value.shape();
                let (b, ctot, n) = (s[0], s[1], s[2] * s[3]);
                let mut off = 0;
                for &x in xs {
                    let c = self.nodes[x.0].value.dim(1);
                    if self.needs(x) {
                        let mut d = Vec::with_capacity(b * c * n);
                        for bi in 0..b {
                            let start = (bi * ctot + off) * n;
                            d.extend_from_slice(&g.data()[start..start + c * n]);
                        }
                        self.accumulate(grads, x, d);
                    }
                    off += c;
                }
            }
            Op::RoiPool { x, argmax } => {
                let mut d = vec![T::zero(); self.nodes[x.0].value.len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::GlobalAvgPool(x) => {
                let xv = &self.nodes[x.0].value;
                let n: usize = xv.shape()[2..].iter().product();
                let inv = T::one() / T::of(n as f64);
                let mut d = Vec::with_capacity(xv.len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv * inv, n));
                }
                self.accumulate(grads, *x, d);
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (r, din) = (xv.dim(0), xv.dim(1));
                let dout = wv.dim(0);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); r * din];
                    gemm(false, false, r, din, dout, g.data(), wv.data(), T::zero(), &mut dx);
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    gemm(true, false, dout, din, r, g.data(), xv.data(), T::zero(), &mut dw);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::Custom(locals) => {
                let up = g.item();
                for (v, local) in locals {
                    if self.needs(*v) {
                        let d = local.data().iter().map(|&l| l * up).collect();
                        self.accumulate(grads, *v, d);
                    }
                }
            }
            Op::WeightedSum(terms) => {
                let up = g.item();
                for &(v, c) in terms {
                    if self.needs(v) {
                        self.accumulate(grads, v, vec![up * c]);
                    }
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, d: Vec<T>) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(d) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), d));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. `v`, or `None` if `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
