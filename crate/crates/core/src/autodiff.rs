//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value,
//! its parents and a closure mapping the output gradient to parent
//! gradients. Graphs are built fresh for every forward pass and dropped
//! afterwards.

use std::fmt;

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to a backward closure.
pub struct BackwardArgs<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Whether each input needs a gradient.
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad: true,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad: false,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends an operation with a caller-supplied backward rule. When no
    /// input requires a gradient the node is recorded as a constant.
    pub fn custom<F>(&mut self, inputs: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        if !requires_grad {
            return self.constant(value);
        }
        self.push(Node {
            value,
            parents: inputs.to_vec(),
            backward: Some(Box::new(backward)),
            requires_grad,
        })
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape.clone(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                inputs: node.parents.iter().map(|p| self.value(*p)).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|p| self.requires_grad(*p)).collect(),
            };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.requires_grad(*p) {
                    continue;
                }
                debug_assert_eq!(g.shape, self.value(*p).shape, "gradient shape mismatch");
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(&[a, b], v, |g| vec![Some(g.grad.clone()), Some(g.grad.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(&[a, b], v, |g| vec![Some(g.grad.clone()), Some(g.grad.map(|x| -x))])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(&[a, b], v, |g| {
            vec![
                g.needs[0].then(|| g.grad.zip_map(g.inputs[1], |d, y| d * y)),
                g.needs[1].then(|| g.grad.zip_map(g.inputs[0], |d, x| d * x)),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.custom(&[a], v, move |g| vec![Some(g.grad.map(|d| d * c))])
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.custom(&[a], v, move |g| vec![Some(g.grad.zip_map(&c, |d, y| d * y))])
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let v = self.value(a).zip_map(c, |x, y| x + y);
        self.custom(&[a], v, |g| vec![Some(g.grad.clone())])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let v = self.value(a).map(f);
        self.custom(&[a], v, move |g| {
            let data = g
                .grad
                .data
                .iter()
                .zip(&g.inputs[0].data)
                .zip(&g.output.data)
                .map(|((&d, &x), &y)| d * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.grad.shape.clone(), data))]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    /// `-ln(max(x, eps))`, the clamped negative log used by every
    /// likelihood term.
    pub fn neg_log_clamped(&mut self, a: Var, eps: f64) -> Var {
        self.unary(
            a,
            move |x| -x.max(eps).ln(),
            move |x, _| if x > eps { -1.0 / x } else { 0.0 },
        )
    }

    // ----- reductions and shape ---------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        let shape = self.value(a).shape.clone();
        self.custom(&[a], v, move |g| vec![Some(Tensor::full(shape.clone(), g.grad.item()))])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let src = self.value(a);
        let v = Tensor::new(shape, src.data.clone());
        let orig = src.shape.clone();
        self.custom(&[a], v, move |g| {
            vec![Some(Tensor::new(orig.clone(), g.grad.data.clone()))]
        })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        let (n, m) = src.dims2();
        assert!(start + len <= n);
        let v = Tensor::new(vec![len, m], src.data[start * m..(start + len) * m].to_vec());
        self.custom(&[a], v, move |g| {
            let mut out = Tensor::zeros(vec![n, m]);
            out.data[start * m..(start + len) * m].copy_from_slice(&g.grad.data);
            vec![Some(out)]
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).dims2().1;
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2();
            assert_eq!(c, m, "concat_rows width mismatch");
            rows.push(r);
            data.extend_from_slice(&t.data);
        }
        let total = rows.iter().sum();
        let v = Tensor::new(vec![total, m], data);
        self.custom(parts, v, move |g| {
            let mut off = 0;
            rows.iter()
                .zip(&g.needs)
                .map(|(&r, &need)| {
                    let s = off;
                    off += r * m;
                    need.then(|| Tensor::new(vec![r, m], g.grad.data[s..s + r * m].to_vec()))
                })
                .collect()
        })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        let (n, m) = src.dims2();
        assert!(start + len <= m);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src.data[r * m + start..r * m + start + len]);
        }
        let v = Tensor::new(vec![n, len], data);
        self.custom(&[a], v, move |g| {
            let mut out = Tensor::zeros(vec![n, m]);
            for r in 0..n {
                out.data[r * m + start..r * m + start + len].copy_from_slice(&g.grad.data[r * len..(r + 1) * len]);
            }
            vec![Some(out)]
        })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).dims2();
                assert_eq!(r, n, "concat_cols height mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let v = Tensor::new(vec![n, total], data);
        self.custom(parts, v, move |g| {
            let mut off = 0;
            widths
                .iter()
                .zip(&g.needs)
                .map(|(&w, &need)| {
                    let s = off;
                    off += w;
                    need.then(|| {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.grad.data[r * total + s..r * total + s + w]);
                        }
                        Tensor::new(vec![n, w], d)
                    })
                })
                .collect()
        })
    }

    // ----- linear algebra ----------------------------------------------

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let k = self.value(a).dims2().1;
        assert_eq!(k, self.value(b).dims2().0, "matmul inner dimension mismatch");
        let v = gemm(self.value(a), false, self.value(b), false);
        self.custom(&[a, b], v, |g| {
            vec![
                g.needs[0].then(|| gemm(g.grad, false, g.inputs[1], true)),
                g.needs[1].then(|| gemm(g.inputs[0], true, g.grad, false)),
            ]
        })
    }

    /// `[n,k] x [m,k]^T -> [n,m]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let k = self.value(a).dims2().1;
        assert_eq!(k, self.value(b).dims2().1, "matmul_nt inner dimension mismatch");
        let v = gemm(self.value(a), false, self.value(b), true);
        self.custom(&[a, b], v, |g| {
            vec![
                g.needs[0].then(|| gemm(g.grad, false, g.inputs[1], false)),
                g.needs[1].then(|| gemm(g.grad, true, g.inputs[0], false)),
            ]
        })
    }

    /// Adds a bias row vector `[m]` to every row of `[n,m]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (n, m) = self.value(a).dims2();
        assert_eq!(self.value(bias).len(), m);
        let mut v = self.value(a).clone();
        let b = &self.value(bias).data;
        for r in 0..n {
            for (x, bb) in v.data[r * m..(r + 1) * m].iter_mut().zip(b) {
                *x += bb;
            }
        }
        let bias_shape = self.value(bias).shape.clone();
        self.custom(&[a, bias], v, move |g| {
            let db = g.needs[1].then(|| {
                let mut d = vec![0.0; m];
                for r in 0..n {
                    for (acc, x) in d.iter_mut().zip(&g.grad.data[r * m..(r + 1) * m]) {
                        *acc += x;
                    }
                }
                Tensor::new(bias_shape.clone(), d)
            });
            vec![g.needs[0].then(|| g.grad.clone()), db]
        })
    }

    /// Row-wise softmax of `[n,m]`.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.value(a).dims2();
        let mut v = self.value(a).clone();
        for row in v.data.chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.custom(&[a], v, move |g| {
            let mut d = vec![0.0; n * m];
            for r in 0..n {
                let y = &g.output.data[r * m..(r + 1) * m];
                let dy = &g.grad.data[r * m..(r + 1) * m];
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                for j in 0..m {
                    d[r * m + j] = y[j] * (dy[j] - dot);
                }
            }
            vec![Some(Tensor::new(vec![n, m], d))]
        })
    }

    // ----- convolution -------------------------------------------------

    /// 2-D convolution of `x: [B,C,H,W]` with `w: [O,C,k,k]` and bias
    /// `b: [O]`, square stride and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let geom = ConvGeom::new(self.value(x), self.value(w), stride, pad);
        let v = geom.forward(self.value(x), self.value(w), self.value(b));
        self.custom(&[x, w, b], v, move |g| geom.backward(g))
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (bn, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let data = self
            .value(x)
            .data
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let v = Tensor::new(vec![bn, c], data);
        self.custom(&[x], v, move |g| {
            let mut d = Vec::with_capacity(bn * c * hw);
            for &gv in &g.grad.data {
                d.extend(std::iter::repeat_n(gv / hw as f64, hw));
            }
            vec![Some(Tensor::new(vec![bn, c, h, w], d))]
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `op(a) x op(b)` for matrices, `op` optionally transposing.
pub fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let (n, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, m) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    let mut out = vec![0.0; n * m];
    gemm_into(n, k, m, &a.data, ta, &b.data, tb, &mut out, 0.0);
    Tensor::new(vec![n, m], out)
}

/// `c = op(a) op(b) + beta c` on raw row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm_into(n: usize, k: usize, m: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if n == 0 || m == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut() {
            *x *= beta;
        }
        return;
    }
    // Row-major op(a) is [n,k]; strides flip when transposed.
    let (rsa, csa) = if ta { (1, n as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (m as isize, 1) };
    assert!(a.len() >= n * k && b.len() >= k * m && c.len() >= n * m);
    // SAFETY: buffer lengths are checked above and the strides address
    // exactly the n*k, k*m and n*m row-major elements.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Self {
        let (batch, cin, h, wd) = x.dims4();
        let (cout, cin2, k, k2) = w.dims4();
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d expects square kernels");
        assert!(stride >= 1);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than input");
        Self {
            batch,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        }
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one sample into `[C*k*k, Ho*Wo]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let ol = self.out_len();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * ol;
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p;
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let ol = self.out_len();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * ol;
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(b.len(), self.cout, "conv2d bias length mismatch");
        let (pl, ol) = (self.patch_len(), self.out_len());
        let in_len = self.cin * self.h * self.w;
        let mut out = vec![0.0; self.batch * self.cout * ol];
        let mut cols = vec![0.0; pl * ol];
        for bi in 0..self.batch {
            self.im2col(&x.data[bi * in_len..(bi + 1) * in_len], &mut cols);
            let o = &mut out[bi * self.cout * ol..(bi + 1) * self.cout * ol];
            for (co, chunk) in o.chunks_mut(ol).enumerate() {
                chunk.fill(b.data[co]);
            }
            gemm_into(self.cout, pl, ol, &w.data, false, &cols, false, o, 1.0);
        }
        Tensor::new(vec![self.batch, self.cout, self.ho, self.wo], out)
    }

    fn backward(&self, g: &BackwardArgs<'_>) -> Vec<Option<Tensor>> {
        let (pl, ol) = (self.patch_len(), self.out_len());
        let in_len = self.cin * self.h * self.w;
        let (x, w) = (g.inputs[0], g.inputs[1]);
        let mut dx = g.needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = g.needs[1].then(|| vec![0.0; w.len()]);
        let mut db = g.needs[2].then(|| vec![0.0; self.cout]);
        let mut cols = vec![0.0; pl * ol];
        let mut dcols = vec![0.0; pl * ol];
        for bi in 0..self.batch {
            let dy = &g.grad.data[bi * self.cout * ol..(bi + 1) * self.cout * ol];
            if let Some(db) = db.as_mut() {
                for (co, chunk) in dy.chunks(ol).enumerate() {
                    db[co] += chunk.iter().sum::<f64>();
                }
            }
            if let Some(dw) = dw.as_mut() {
                self.im2col(&x.data[bi * in_len..(bi + 1) * in_len], &mut cols);
                gemm_into(self.cout, ol, pl, dy, false, &cols, true, dw, 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                gemm_into(pl, self.cout, ol, &w.data, true, dy, false, &mut dcols, 0.0);
                self.col2im(&dcols, &mut dx[bi * in_len..(bi + 1) * in_len]);
            }
        }
        vec![
            dx.map(|d| Tensor::new(x.shape.clone(), d)),
            dw.map(|d| Tensor::new(w.shape.clone(), d)),
            db.map(|d| Tensor::new(vec![self.cout], d)),
        ]
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + step;
            let hi = f(&p);
            p[i] = x[i] - step;
            let lo = f(&p);
            p[i] = x[i];
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, zero when both
/// vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks the tape gradient of `build` (reduced to a weighted sum so
    /// every output element matters) against central differences.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let weights_for = |t: &Tensor| random(t.shape().to_vec(), 99);
        let eval = |vals: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            let wts = weights_for(g.value(out));
            let wv = g.constant(wts);
            let prod = g.mul(out, wv);
            let loss = g.sum(prod);
            let grads = g.backward(loss);
            let gs = vars
                .iter()
                .map(|&v| {
                    grads
                        .get(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec()))
                })
                .collect();
            (g.value(loss).item(), gs)
        };
        let (_, analytic) = eval(&inputs);
        for (i, t) in inputs.iter().enumerate() {
            let numeric = finite_difference(
                |x| {
                    let mut vals = inputs.clone();
                    vals[i] = Tensor::new(t.shape().to_vec(), x.to_vec());
                    eval(&vals).0
                },
                t.data(),
                1e-5,
            );
            let err = relative_error(analytic[i].data(), &numeric);
            assert!(err < 1e-6, "input {i}: relative error {err}");
        }
    }

    #[test]
    fn elementwise_gradients() {
        let a = random(vec![3, 4], 1);
        let b = random(vec![3, 4], 2);
        check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
        check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
        check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
        check(vec![a.clone()], |g, v| g.mul(v[0], v[0]));
        check(vec![a.clone()], |g, v| g.scale(v[0], -2.5));
        check(vec![a.clone()], |g, v| g.sigmoid(v[0]));
        check(vec![a.clone()], |g, v| g.softplus(v[0]));
        check(vec![a.clone()], |g, v| g.tanh(v[0]));
        check(vec![a.clone()], |g, v| g.exp(v[0]));
        check(vec![a.clone()], |g, v| g.leaky_relu(v[0], 0.2));
        check(vec![a.clone()], |g, v| g.relu(v[0]));
        check(vec![a.map(|x| x.abs() + 0.1)], |g, v| g.neg_log_clamped(v[0], 1e-7));
        let c = random(vec![3, 4], 3);
        check(vec![a.clone()], move |g, v| g.mul_const(v[0], c.clone()));
    }

    #[test]
    fn matrix_gradients() {
        let a = random(vec![3, 5], 4);
        let b = random(vec![5, 2], 5);
        let bt = random(vec![4, 5], 6);
        let bias = random(vec![2], 7);
        check(vec![a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]));
        check(vec![a.clone(), bt], |g, v| g.matmul_nt(v[0], v[1]));
        check(vec![random(vec![3, 2], 8), bias], |g, v| g.add_row(v[0], v[1]));
        check(vec![a.clone()], |g, v| g.softmax_rows(v[0]));
        check(vec![a.clone()], |g, v| g.slice_rows(v[0], 1, 2));
        check(vec![a.clone()], |g, v| g.slice_cols(v[0], 2, 3));
        check(vec![a.clone(), random(vec![2, 5], 9)], |g, v| {
            g.concat_rows(&[v[0], v[1]])
        });
        check(vec![a.clone(), random(vec![3, 1], 10)], |g, v| {
            g.concat_cols(&[v[1], v[0]])
        });
        check(vec![a.clone()], |g, v| {
            let r = g.reshape(v[0], vec![5, 3]);
            g.mean(r)
        });
    }

    #[test]
    fn conv_gradients() {
        let x = random(vec![2, 3, 6, 5], 11);
        let w = random(vec![4, 3, 4, 4], 12);
        let b = random(vec![4], 13);
        check(vec![x.clone(), w.clone(), b.clone()], |g, v| {
            g.conv2d(v[0], v[1], v[2], 2, 1)
        });
        check(
            vec![x.clone(), random(vec![2, 3, 3, 3], 14), random(vec![2], 15)],
            |g, v| g.conv2d(v[0], v[1], v[2], 1, 0),
        );
        check(vec![x], |g, v| g.global_avg_pool(v[0]));
    }

    /// Direct-summation oracle for the im2col path.
    #[test]
    fn conv_matches_direct_sum() {
        let x = random(vec![1, 2, 5, 5], 21);
        let w = random(vec![3, 2, 4, 4], 22);
        let b = random(vec![3], 23);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, 2, 1);
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 3, 2, 2]);
        for o in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut s = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += x.data()[(c * 5 + iy as usize) * 5 + ix as usize]
                                        * w.data()[((o * 2 + c) * 4 + ky) * 4 + kx];
                                }
                            }
                        }
                    }
                    let got = out.data()[(o * 2 + oy) * 2 + ox];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let c = g.mul(a, b);
        let grads = g.backward(c);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().item(), 2.0);
        // Pure-constant expressions collapse to constants.
        let d = g.add(a, a);
        assert!(!g.requires_grad(d));
    }
}
