use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NodeRef, Tensor};
use crate::error::{Error, Result};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Geometry of one im2col/col2im pair: square kernel, symmetric zero padding,
/// channel-major `[C, H, W]` images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize, f64),
    MulScalar(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Slice { input: usize, start: usize },
    RepeatCols { input: usize, n: usize },
    SumCols(usize),
    Im2Col { input: usize, geom: ConvGeom },
    Col2Im { input: usize, geom: ConvGeom },
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Logistic(usize),
    Square(usize),
    Sqrt(usize),
    Ln(usize),
    Clamp { input: usize, lo: Arc<Vec<f64>>, hi: Arc<Vec<f64>> },
    Sum(usize),
    Broadcast(usize),
    NormP { input: usize, p: u32 },
    HuberSum { input: usize, delta: f64 },
}

struct Node {
    op: Op,
    out: Tensor,
    requires_grad: bool,
}

/// Append-only record of operations. Rebuilt per training step; node inputs
/// always reference earlier nodes, so reverse iteration is a valid reverse
/// topological order.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { id: TAPE_IDS.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), recording: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Disable/enable recording. With recording off, ops compute plain values
    /// and return detached tensors; nothing can be differentiated.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    /// Register `t` as a differentiable leaf of this tape. Model parameters
    /// are stored off-tape and bound once per step with `watch`, so all uses
    /// of the parameter share one node and gradients accumulate across them.
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detached();
        }
        self.push(Op::Leaf, t.shape().to_vec(), t.arc(), true)
    }

    /// Register `t` as a non-differentiable input node.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detached();
        }
        self.push(Op::Leaf, t.shape().to_vec(), t.arc(), false)
    }

    /// Reparameterized noise: `scale * eps` with `eps ~ N(0, I)` drawn from
    /// the supplied rng. The draw enters the graph as a constant leaf, so
    /// gradients flow around sampling, never through it. Scale 0 gives the
    /// exact zero tensor.
    pub fn gaussian_sample(&mut self, shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| scale * standard_normal(rng)).collect();
        let t = Tensor::from_vec(shape, data);
        if self.recording {
            self.constant(&t)
        } else {
            t
        }
    }

    // ---- elementwise binary -------------------------------------------------

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        same_shape("add", a, b);
        let data = zip_map(a, b, |x, y| x + y);
        self.record2(Op::Add, a, b, a.shape().to_vec(), data)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        same_shape("sub", a, b);
        let data = zip_map(a, b, |x, y| x - y);
        self.record2(Op::Sub, a, b, a.shape().to_vec(), data)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        same_shape("mul", a, b);
        let data = zip_map(a, b, |x, y| x * y);
        self.record2(Op::Mul, a, b, a.shape().to_vec(), data)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        same_shape("div", a, b);
        let data = zip_map(a, b, |x, y| x / y);
        self.record2(Op::Div, a, b, a.shape().to_vec(), data)
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data().iter().map(|x| x + c).collect();
        self.record1(|i| Op::AddScalar(i, c), a, a.shape().to_vec(), data)
    }

    pub fn mul_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data().iter().map(|x| x * c).collect();
        self.record1(|i| Op::MulScalar(i, c), a, a.shape().to_vec(), data)
    }

    pub fn neg(&mut self, a: &Tensor) -> Tensor {
        self.mul_scalar(a, -1.0)
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = dims2("matmul", a);
        let (k2, n) = dims2("matmul", b);
        assert!(k == k2, "matmul: inner dims disagree, {:?} @ {:?}", a.shape(), b.shape());
        let data = matmul_data(a.data(), b.data(), m, k, n);
        self.record2(Op::Matmul, a, b, vec![m, n], data)
    }

    pub fn transpose(&mut self, a: &Tensor) -> Tensor {
        let (m, n) = dims2("transpose", a);
        let src = a.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.record1(Op::Transpose, a, vec![n, m], data)
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert!(
            numel == a.numel(),
            "reshape: {:?} ({} elements) cannot become {:?}",
            a.shape(),
            a.numel(),
            shape
        );
        self.record1(Op::Reshape, a, shape.to_vec(), a.data().to_vec())
    }

    /// Concatenate 1-D tensors.
    pub fn concat(&mut self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat: no inputs");
        for p in parts {
            assert!(p.shape().len() == 1, "concat: wants 1-D inputs, got {:?}", p.shape());
        }
        let total: usize = parts.iter().map(|p| p.numel()).sum();
        let mut data = Vec::with_capacity(total);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        if !self.recording {
            return Tensor::from_vec(&[total], data);
        }
        let ids: Vec<usize> = parts.iter().map(|p| self.intern(p)).collect();
        let rg = parts.iter().any(|p| self.grad_flows(p));
        self.push(Op::Concat(ids), vec![total], Arc::new(data), rg)
    }

    /// Contiguous slice of a 1-D tensor.
    pub fn slice(&mut self, a: &Tensor, start: usize, len: usize) -> Tensor {
        assert!(a.shape().len() == 1, "slice: wants a 1-D input, got {:?}", a.shape());
        assert!(
            start + len <= a.numel(),
            "slice: [{start}, {}) out of range for length {}",
            start + len,
            a.numel()
        );
        let data = a.data()[start..start + len].to_vec();
        self.record1(|input| Op::Slice { input, start }, a, vec![len], data)
    }

    /// `[m]` -> `[m, n]`, every column a copy.
    pub fn repeat_cols(&mut self, a: &Tensor, n: usize) -> Tensor {
        assert!(a.shape().len() == 1, "repeat_cols: wants a 1-D input, got {:?}", a.shape());
        let m = a.numel();
        let mut data = vec![0.0; m * n];
        for (i, &v) in a.data().iter().enumerate() {
            data[i * n..(i + 1) * n].fill(v);
        }
        self.record1(|input| Op::RepeatCols { input, n }, a, vec![m, n], data)
    }

    /// `[m, n]` -> `[m]`, summing each row's columns.
    pub fn sum_cols(&mut self, a: &Tensor) -> Tensor {
        let (m, n) = dims2("sum_cols", a);
        let src = a.data();
        let data: Vec<f64> = (0..m).map(|i| src[i * n..(i + 1) * n].iter().sum()).collect();
        self.record1(Op::SumCols, a, vec![m], data)
    }

    /// Unfold `[C, H, W]` into convolution patches `[C*k*k, out_h*out_w]`.
    /// A pure gather, so convolution becomes one matmul against a
    /// `[out_c, C*k*k]` weight matrix.
    pub fn im2col(&mut self, a: &Tensor, geom: ConvGeom) -> Tensor {
        assert!(
            a.shape() == [geom.in_c, geom.in_h, geom.in_w],
            "im2col: image shape {:?} does not match geometry {:?}",
            a.shape(),
            geom
        );
        let data = im2col_data(a.data(), geom);
        self.record1(
            |input| Op::Im2Col { input, geom },
            a,
            vec![geom.patch_len(), geom.positions()],
            data,
        )
    }

    /// Adjoint of [`Tape::im2col`]: scatter-add patches back into an image.
    pub fn col2im(&mut self, a: &Tensor, geom: ConvGeom) -> Tensor {
        assert!(
            a.shape() == [geom.patch_len(), geom.positions()],
            "col2im: column shape {:?} does not match geometry {:?}",
            a.shape(),
            geom
        );
        let data = col2im_data(a.data(), geom);
        self.record1(
            |input| Op::Col2Im { input, geom },
            a,
            vec![geom.in_c, geom.in_h, geom.in_w],
            data,
        )
    }

    // ---- nonlinearities -----------------------------------------------------

    pub fn tanh(&mut self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|x| x.tanh()).collect();
        self.record1(Op::Tanh, a, a.shape().to_vec(), data)
    }

    /// Subgradient 0 at the kink.
    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|x| x.max(0.0)).collect();
        self.record1(Op::Relu, a, a.shape().to_vec(), data)
    }

    pub fn softplus(&mut self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|&x| softplus_val(x)).collect();
        self.record1(Op::Softplus, a, a.shape().to_vec(), data)
    }

    pub fn logistic(&mut self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|&x| logistic_val(x)).collect();
        self.record1(Op::Logistic, a, a.shape().to_vec(), data)
    }

    pub fn square(&mut self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|x| x * x).collect();
        self.record1(Op::Square, a, a.shape().to_vec(), data)
    }

    pub fn sqrt(&mut self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|x| x.sqrt()).collect();
        self.record1(Op::Sqrt, a, a.shape().to_vec(), data)
    }

    pub fn ln(&mut self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|x| x.ln()).collect();
        self.record1(Op::Ln, a, a.shape().to_vec(), data)
    }

    /// Elementwise clamp against per-element bounds. Gradient passes only
    /// strictly inside the interval (projection semantics).
    pub fn clamp_elems(&mut self, a: &Tensor, lo: &[f64], hi: &[f64]) -> Tensor {
        assert!(
            lo.len() == a.numel() && hi.len() == a.numel(),
            "clamp: bounds ({}, {}) do not match {} elements",
            lo.len(),
            hi.len(),
            a.numel()
        );
        let data = a
            .data()
            .iter()
            .zip(lo.iter().zip(hi.iter()))
            .map(|(&x, (&l, &h))| x.clamp(l, h))
            .collect();
        let (lo, hi) = (Arc::new(lo.to_vec()), Arc::new(hi.to_vec()));
        self.record1(move |input| Op::Clamp { input, lo, hi }, a, a.shape().to_vec(), data)
    }

    pub fn clamp(&mut self, a: &Tensor, lo: f64, hi: f64) -> Tensor {
        let n = a.numel();
        self.clamp_elems(a, &vec![lo; n], &vec![hi; n])
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let total: f64 = a.data().iter().sum();
        self.record1(Op::Sum, a, vec![], vec![total])
    }

    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        let n = a.numel().max(1);
        let s = self.sum(a);
        self.mul_scalar(&s, 1.0 / n as f64)
    }

    /// Scalar -> given shape.
    pub fn broadcast(&mut self, a: &Tensor, shape: &[usize]) -> Tensor {
        assert!(a.numel() == 1, "broadcast: wants a scalar, got {:?}", a.shape());
        let numel: usize = shape.iter().product();
        self.record1(Op::Broadcast, a, shape.to_vec(), vec![a.data()[0]; numel])
    }

    /// L_p norm of all elements, p in {1, 2}. The p=2 gradient is guarded by
    /// a 1e-12 shift of the denominator so the exact-zero input gets the
    /// subgradient 0 instead of NaN.
    pub fn norm_p(&mut self, a: &Tensor, p: u32) -> Tensor {
        let v = match p {
            1 => a.data().iter().map(|x| x.abs()).sum(),
            2 => a.data().iter().map(|x| x * x).sum::<f64>().sqrt(),
            _ => panic!("norm_p: only p in {{1, 2}} is supported, got {p}"),
        };
        self.record1(|input| Op::NormP { input, p }, a, vec![], vec![v])
    }

    /// Sum of elementwise Huber values: `z²/2` inside `|z| <= delta`, else
    /// `delta * (|z| - delta/2)`.
    pub fn huber_sum(&mut self, a: &Tensor, delta: f64) -> Tensor {
        assert!(delta > 0.0, "huber_sum: delta must be positive, got {delta}");
        let v = a
            .data()
            .iter()
            .map(|&z| {
                if z.abs() <= delta {
                    0.5 * z * z
                } else {
                    delta * (z.abs() - 0.5 * delta)
                }
            })
            .sum();
        self.record1(|input| Op::HuberSum { input, delta }, a, vec![], vec![v])
    }

    // ---- composites ---------------------------------------------------------

    /// `sum((a - b)^2)`.
    pub fn squared_distance(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let d = self.sub(a, b);
        let s = self.square(&d);
        self.sum(&s)
    }

    /// Dense layer `W @ x + b` on a 1-D input.
    pub fn linear(&mut self, w: &Tensor, b: &Tensor, x: &Tensor) -> Tensor {
        let (m, n) = dims2("linear", w);
        assert!(
            x.shape() == [n] && b.shape() == [m],
            "linear: W {:?} expects x [{n}] and b [{m}], got x {:?}, b {:?}",
            w.shape(),
            x.shape(),
            b.shape()
        );
        let col = self.reshape(x, &[n, 1]);
        let y = self.matmul(w, &col);
        let y = self.reshape(&y, &[m]);
        self.add(&y, b)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse-mode gradients of a scalar `loss` w.r.t. each tensor in `wrt`.
    ///
    /// With `create_graph`, every value computed during the backward pass is
    /// itself recorded, so a later `backward` can differentiate through this
    /// one. Tensors unreachable from the loss get zero gradients.
    pub fn backward(
        &mut self,
        loss: &Tensor,
        wrt: &[&Tensor],
        create_graph: bool,
    ) -> Result<Vec<Tensor>> {
        if loss.numel() != 1 {
            return Err(Error::LossNotScalar(loss.shape().to_vec()));
        }
        if wrt.iter().any(|w| !w.requires_grad()) {
            return Err(Error::WrtNotDifferentiable);
        }
        let zeros = |w: &Tensor| Tensor::zeros(w.shape());
        let lid = match loss.node {
            Some(r) if r.tape == self.id && self.nodes[r.id].requires_grad => r.id,
            _ => return Ok(wrt.iter().map(|w| zeros(w)).collect()),
        };

        let was_recording = self.recording;
        self.recording = was_recording && create_graph;

        let wrt_ids: Vec<Option<usize>> = wrt
            .iter()
            .map(|w| w.node.filter(|r| r.tape == self.id).map(|r| r.id))
            .collect();

        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(lid + 1, || None);
        grads[lid] = Some(Tensor::scalar(1.0));
        let mut results: Vec<Option<Tensor>> = vec![None; wrt.len()];

        for id in (0..=lid).rev() {
            let Some(g) = grads[id].take() else { continue };
            for (slot, wid) in results.iter_mut().zip(&wrt_ids) {
                if *wid == Some(id) {
                    *slot = Some(g.clone());
                }
            }
            let op = self.nodes[id].op.clone();
            let out = self.nodes[id].out.clone();
            self.vjp(&op, &out, &g, &mut grads);
        }

        self.recording = was_recording;
        Ok(results
            .into_iter()
            .zip(wrt)
            .map(|(r, w)| r.unwrap_or_else(|| zeros(w)))
            .collect())
    }

    fn accumulate(&mut self, grads: &mut [Option<Tensor>], id: usize, contrib: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        grads[id] = Some(match grads[id].take() {
            Some(g) => self.add(&g, &contrib),
            None => contrib,
        });
    }

    fn vjp(&mut self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let gn = self.neg(g);
                self.accumulate(grads, *b, gn);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.out_of(*a), self.out_of(*b));
                let ga = self.mul(g, &bv);
                self.accumulate(grads, *a, ga);
                let gb = self.mul(g, &av);
                self.accumulate(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let bv = self.out_of(*b);
                let ga = self.div(g, &bv);
                self.accumulate(grads, *a, ga);
                // d(a/b)/db = -out / b
                let go = self.mul(g, out);
                let gb0 = self.div(&go, &bv);
                let gb = self.neg(&gb0);
                self.accumulate(grads, *b, gb);
            }
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, c) => {
                let ga = self.mul_scalar(g, *c);
                self.accumulate(grads, *a, ga);
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.out_of(*a), self.out_of(*b));
                let bt = self.transpose(&bv);
                let ga = self.matmul(g, &bt);
                self.accumulate(grads, *a, ga);
                let at = self.transpose(&av);
                let gb = self.matmul(&at, g);
                self.accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => {
                let ga = self.transpose(g);
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let shape = self.out_of(*a).shape().to_vec();
                let ga = self.reshape(g, &shape);
                self.accumulate(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.out_of(p).numel();
                    let gp = self.slice(g, offset, len);
                    self.accumulate(grads, p, gp);
                    offset += len;
                }
            }
            Op::Slice { input, start } => {
                let n = self.out_of(*input).numel();
                let len = g.numel();
                let before = Tensor::zeros(&[*start]);
                let after = Tensor::zeros(&[n - start - len]);
                let ga = self.concat(&[&before, g, &after]);
                self.accumulate(grads, *input, ga);
            }
            Op::RepeatCols { input, .. } => {
                let ga = self.sum_cols(g);
                self.accumulate(grads, *input, ga);
            }
            Op::SumCols(a) => {
                let n = self.out_of(*a).shape()[1];
                let ga = self.repeat_cols(g, n);
                self.accumulate(grads, *a, ga);
            }
            Op::Im2Col { input, geom } => {
                let ga = self.col2im(g, *geom);
                self.accumulate(grads, *input, ga);
            }
            Op::Col2Im { input, geom } => {
                let ga = self.im2col(g, *geom);
                self.accumulate(grads, *input, ga);
            }
            Op::Tanh(a) => {
                // g * (1 - out^2)
                let o2 = self.square(out);
                let no2 = self.neg(&o2);
                let one_minus = self.add_scalar(&no2, 1.0);
                let ga = self.mul(g, &one_minus);
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.out_of(*a);
                let mask =
                    Tensor::from_vec(x.shape(), x.data().iter().map(|&v| f64::from(v > 0.0)).collect());
                let ga = self.mul(g, &mask);
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let x = self.out_of(*a);
                let s = self.logistic(&x);
                let ga = self.mul(g, &s);
                self.accumulate(grads, *a, ga);
            }
            Op::Logistic(a) => {
                // g * out * (1 - out)
                let no = self.neg(out);
                let om = self.add_scalar(&no, 1.0);
                let t = self.mul(out, &om);
                let ga = self.mul(g, &t);
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let x = self.out_of(*a);
                let x2 = self.mul_scalar(&x, 2.0);
                let ga = self.mul(g, &x2);
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let denom = self.mul_scalar(out, 2.0);
                let ga = self.div(g, &denom);
                self.accumulate(grads, *a, ga);
            }
            Op::Ln(a) => {
                let x = self.out_of(*a);
                let ga = self.div(g, &x);
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.out_of(*input);
                let mask: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(lo.iter().zip(hi.iter()))
                    .map(|(&v, (&l, &h))| f64::from(v > l && v < h))
                    .collect();
                let mask = Tensor::from_vec(x.shape(), mask);
                let ga = self.mul(g, &mask);
                self.accumulate(grads, *input, ga);
            }
            Op::Sum(a) => {
                let shape = self.out_of(*a).shape().to_vec();
                let ga = self.broadcast(g, &shape);
                self.accumulate(grads, *a, ga);
            }
            Op::Broadcast(a) => {
                let ga = self.sum(g);
                self.accumulate(grads, *a, ga);
            }
            Op::NormP { input, p } => {
                let x = self.out_of(*input);
                let shape = x.shape().to_vec();
                let gb = self.broadcast(g, &shape);
                match p {
                    2 => {
                        // g * x / (norm + tiny); exact zero input gets subgradient 0
                        let shifted = self.add_scalar(out, 1e-12);
                        let denom = self.broadcast(&shifted, &shape);
                        let gx = self.mul(&gb, &x);
                        let ga = self.div(&gx, &denom);
                        self.accumulate(grads, *input, ga);
                    }
                    1 => {
                        let sign = Tensor::from_vec(
                            &shape,
                            x.data().iter().map(|&v| if v == 0.0 { 0.0 } else { v.signum() }).collect(),
                        );
                        let ga = self.mul(&gb, &sign);
                        self.accumulate(grads, *input, ga);
                    }
                    _ => unreachable!(),
                }
            }
            Op::HuberSum { input, delta } => {
                // d/dz huber(z) = clamp(z, -delta, delta), itself differentiable
                let x = self.out_of(*input);
                let d = self.clamp(&x, -delta, *delta);
                let shape = x.shape().to_vec();
                let gb = self.broadcast(g, &shape);
                let ga = self.mul(&gb, &d);
                self.accumulate(grads, *input, ga);
            }
        }
    }

    // ---- plumbing -----------------------------------------------------------

    fn out_of(&self, id: usize) -> Tensor {
        self.nodes[id].out.clone()
    }

    fn grad_flows(&self, t: &Tensor) -> bool {
        match t.node {
            Some(r) if r.tape == self.id => self.nodes[r.id].requires_grad,
            _ => false,
        }
    }

    /// Node id for an input tensor; foreign or off-tape tensors are interned
    /// as constant leaves. A differentiable tensor from another tape is a
    /// bug: bind parameters to this tape with `watch` first.
    fn intern(&mut self, t: &Tensor) -> usize {
        match t.node {
            Some(r) if r.tape == self.id => r.id,
            _ => {
                assert!(
                    !t.requires_grad(),
                    "tensor requiring grad used on a foreign tape; bind it with Tape::watch"
                );
                let id = self.nodes.len();
                let out = t.with_node(NodeRef { tape: self.id, id }, false);
                self.nodes.push(Node { op: Op::Leaf, out, requires_grad: false });
                id
            }
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool) -> Tensor {
        let id = self.nodes.len();
        let out = Tensor {
            shape,
            data,
            node: Some(NodeRef { tape: self.id, id }),
            requires_grad,
        };
        self.nodes.push(Node { op, out: out.clone(), requires_grad });
        out
    }

    fn record1(
        &mut self,
        op: impl FnOnce(usize) -> Op,
        a: &Tensor,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Tensor {
        if !self.recording {
            return Tensor::from_vec(&shape, data);
        }
        let ia = self.intern(a);
        let rg = self.nodes[ia].requires_grad;
        self.push(op(ia), shape, Arc::new(data), rg)
    }

    fn record2(
        &mut self,
        op: impl FnOnce(usize, usize) -> Op,
        a: &Tensor,
        b: &Tensor,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Tensor {
        if !self.recording {
            return Tensor::from_vec(&shape, data);
        }
        let ia = self.intern(a);
        let ib = self.intern(b);
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        self.push(op(ia, ib), shape, Arc::new(data), rg)
    }
}

// ---- kernels ---------------------------------------------------------------

fn same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert!(
        a.shape() == b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn dims2(op: &str, t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [m, n] => (*m, *n),
        s => panic!("{op}: wants a 2-D tensor, got {s:?}"),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn im2col_data(img: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let positions = oh * ow;
    let mut out = vec![0.0; g.patch_len() * positions];
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let dst = &mut out[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue; // stays zero
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = plane[iy as usize * g.in_w + ix as usize];
                    }
                }
                row += 1;
            }
        }
    }
    out
}

fn col2im_data(cols: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let positions = oh * ow;
    let mut out = vec![0.0; g.in_c * g.in_h * g.in_w];
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        plane[iy as usize * g.in_w + ix as usize] += src[oy * ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
    out
}

fn softplus_val(x: f64) -> f64 {
    // ln(1 + e^x), stable on both tails
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic_val(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout obvious
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
