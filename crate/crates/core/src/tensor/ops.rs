use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Conv2d,
    Add,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    MeanPool2d,
    Flatten,
    Concat,
    Slice,
    LogSoftmax,
    Softmax,
    Sum,
    Mean,
    ScalarMul,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::MeanPool2d,
        OpKind::Flatten,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::LogSoftmax,
        OpKind::Softmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::ScalarMul,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::MeanPool2d => "mean_pool2d",
            OpKind::Flatten => "flatten",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::ScalarMul => "scalar_mul",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpAttrs {
    None,
    Conv { stride: usize, padding: Padding },
    Pool { kernel: usize },
    Axis(usize),
    Slice { axis: usize, start: usize, end: usize },
    Scalar(f32),
}

/// Uniform entry point over every op kind.
pub fn forward_op(kind: OpKind, inputs: &[&Tensor], attrs: OpAttrs) -> Result<Tensor> {
    let arity = |n: usize| -> Result<()> {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(Error::arg(format!(
                "{} expects {n} inputs, got {}",
                kind.name(),
                inputs.len()
            )))
        }
    };
    let bad_attrs = || Error::arg(format!("{}: unexpected attributes {attrs:?}", kind.name()));
    match kind {
        OpKind::MatMul => match inputs {
            [a, b] => a.matmul(b),
            [a, b, bias] => a.linear(b, Some(bias)),
            _ => Err(Error::arg(format!("matmul expects 2 or 3 inputs, got {}", inputs.len()))),
        },
        OpKind::Conv2d => {
            let OpAttrs::Conv { stride, padding } = attrs else {
                return Err(bad_attrs());
            };
            match inputs {
                [x, w] => x.conv2d(w, None, stride, padding),
                [x, w, b] => x.conv2d(w, Some(b), stride, padding),
                _ => Err(Error::arg(format!("conv2d expects 2 or 3 inputs, got {}", inputs.len()))),
            }
        }
        OpKind::Add => {
            arity(2)?;
            inputs[0].add(inputs[1])
        }
        OpKind::Mul => {
            arity(2)?;
            inputs[0].mul(inputs[1])
        }
        OpKind::Relu => {
            arity(1)?;
            inputs[0].relu()
        }
        OpKind::Sigmoid => {
            arity(1)?;
            inputs[0].sigmoid()
        }
        OpKind::Tanh => {
            arity(1)?;
            inputs[0].tanh()
        }
        OpKind::MeanPool2d => {
            arity(1)?;
            let OpAttrs::Pool { kernel } = attrs else {
                return Err(bad_attrs());
            };
            inputs[0].mean_pool2d(kernel)
        }
        OpKind::Flatten => {
            arity(1)?;
            inputs[0].flatten()
        }
        OpKind::Concat => {
            let OpAttrs::Axis(axis) = attrs else {
                return Err(bad_attrs());
            };
            Tensor::concat(inputs, axis)
        }
        OpKind::Slice => {
            arity(1)?;
            let OpAttrs::Slice { axis, start, end } = attrs else {
                return Err(bad_attrs());
            };
            inputs[0].slice(axis, start, end)
        }
        OpKind::LogSoftmax | OpKind::Softmax => {
            arity(1)?;
            let OpAttrs::Axis(axis) = attrs else {
                return Err(bad_attrs());
            };
            if kind == OpKind::Softmax {
                inputs[0].softmax(axis)
            } else {
                inputs[0].log_softmax(axis)
            }
        }
        OpKind::Sum => {
            arity(1)?;
            inputs[0].sum()
        }
        OpKind::Mean => {
            arity(1)?;
            inputs[0].mean()
        }
        OpKind::ScalarMul => {
            arity(1)?;
            let OpAttrs::Scalar(c) = attrs else {
                return Err(bad_attrs());
            };
            inputs[0].scalar_mul(c)
        }
    }
}

fn check_finite(op: OpKind, t: &Tensor) -> Result<()> {
    // Op outputs are checked when created; only leaves can be mutated later.
    if t.is_leaf() && t.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: op.name(),
            what: format!("input of shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn round_all(acc: &[f64]) -> Vec<f32> {
    acc.iter().map(|&v| v as f32).collect()
}

/// out[m×n] = a[m×k] · b[k×n], accumulated in f64.
fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
    }
}

/// out[m×k] += g[m×n] · b[k×n]ᵀ
fn gemm_nt(g: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0f64;
            for (&x, &y) in grow.iter().zip(brow) {
                s += x as f64 * y as f64;
            }
            out[i * k + p] += s;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · g[m×n]
fn gemm_tn(a: &[f32], g: &[f32], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv as f64;
            }
        }
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, x: &[f32], img: usize, cols: &mut [f32]) {
        let (k, l) = (self.k, self.cols());
        let base = img * self.c * self.h * self.w;
        for ch in 0..self.c {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (ch * k + ki) * k + kj;
                    let dst = &mut cols[r * l..(r + 1) * l];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.ow + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                x[base + (ch * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, dcols: &[f64], img: usize, dx: &mut [f64]) {
        let (k, l) = (self.k, self.cols());
        let base = img * self.c * self.h * self.w;
        for ch in 0..self.c {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (ch * k + ki) * k + kj;
                    let src = &dcols[r * l..(r + 1) * l];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            dx[base + (ch * self.h + iy as usize) * self.w + ix as usize] +=
                                src[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// (outer, axis extent, inner) decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn scalar_pair<'a>(a: &'a Tensor, b: &'a Tensor, op: &'static str) -> Result<Option<bool>> {
    // Some(true): a is the broadcast scalar; Some(false): b is.
    if a.shape() == b.shape() {
        Ok(None)
    } else if a.numel() == 1 {
        Ok(Some(true))
    } else if b.numel() == 1 {
        Ok(Some(false))
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.linear(rhs, None)
    }

    /// `self · weight (+ bias)` where bias has one entry per output column.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let op = OpKind::MatMul;
        let (sa, sb) = (self.shape(), weight.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if let Some(b) = bias {
            if b.numel() != n {
                return Err(Error::shape("matmul bias", b.shape(), &[n]));
            }
            check_finite(op, b)?;
        }
        check_finite(op, self)?;
        check_finite(op, weight)?;

        let mut acc = vec![0.0f64; m * n];
        gemm(&self.values(), &weight.values(), m, k, n, &mut acc);
        if let Some(b) = bias {
            let bv = b.values();
            for row in acc.chunks_mut(n) {
                row.iter_mut().zip(bv.iter()).for_each(|(o, &b)| *o += b as f64);
            }
        }

        let (a_t, w_t) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let bias_rg = bias.map(|b| b.requires_grad()).unwrap_or(false);
        Tensor::from_op(op, vec![m, n], round_all(&acc), &inputs, move |g| {
            let mut out = Vec::with_capacity(3);
            out.push(a_t.requires_grad().then(|| {
                let mut da = vec![0.0f64; m * k];
                gemm_nt(g, &w_t.values(), m, k, n, &mut da);
                round_all(&da)
            }));
            out.push(w_t.requires_grad().then(|| {
                let mut dw = vec![0.0f64; k * n];
                gemm_tn(&a_t.values(), g, m, k, n, &mut dw);
                round_all(&dw)
            }));
            if has_bias {
                out.push(bias_rg.then(|| {
                    let mut db = vec![0.0f64; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v as f64);
                    }
                    round_all(&db)
                }));
            }
            out
        })
    }

    /// 2-D convolution over NCHW input with OIHW square kernels.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: Padding,
    ) -> Result<Tensor> {
        let op = OpKind::Conv2d;
        let (sx, sw) = (self.shape(), weight.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let k = sw[2];
        if k != 3 && k != 5 {
            return Err(Error::invalid_shape("conv2d", sw, "kernel must be 3 or 5"));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::arg(format!("conv2d: stride must be 1 or 2, got {stride}")));
        }
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        let (h, w) = (sx[2], sx[3]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h,
            w,
            o: sw[0],
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        };
        if let Some(b) = bias {
            if b.numel() != geom.o {
                return Err(Error::shape("conv2d bias", b.shape(), &[geom.o]));
            }
            check_finite(op, b)?;
        }
        check_finite(op, self)?;
        check_finite(op, weight)?;

        let (r, l, o) = (geom.rows(), geom.cols(), geom.o);
        let mut out = vec![0.0f32; geom.n * o * l];
        {
            let xv = self.values();
            let wv = weight.values();
            let bv = bias.map(|b| b.to_vec());
            let mut cols = vec![0.0f32; r * l];
            let mut acc = vec![0.0f64; o * l];
            for img in 0..geom.n {
                geom.im2col(&xv, img, &mut cols);
                acc.iter_mut().for_each(|v| *v = 0.0);
                gemm(&wv, &cols, o, r, l, &mut acc);
                let dst = &mut out[img * o * l..(img + 1) * o * l];
                for oc in 0..o {
                    let b = bv.as_ref().map(|b| b[oc] as f64).unwrap_or(0.0);
                    for j in 0..l {
                        dst[oc * l + j] = (acc[oc * l + j] + b) as f32;
                    }
                }
            }
        }

        let shape = vec![geom.n, o, geom.oh, geom.ow];
        let (x_t, w_t) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        let bias_rg = bias.map(|b| b.requires_grad()).unwrap_or(false);
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Tensor::from_op(op, shape, out, &inputs, move |g| {
            let xv = x_t.values();
            let wv = w_t.values();
            let need_dx = x_t.requires_grad();
            let need_dw = w_t.requires_grad();
            let mut dw = vec![0.0f64; if need_dw { o * r } else { 0 }];
            let mut db = vec![0.0f64; if bias_rg { o } else { 0 }];
            let mut dx = vec![0.0f64; if need_dx { xv.len() } else { 0 }];
            let mut cols = vec![0.0f32; r * l];
            let mut dcols = vec![0.0f64; r * l];
            for img in 0..geom.n {
                let gi = &g[img * o * l..(img + 1) * o * l];
                if need_dw {
                    geom.im2col(&xv, img, &mut cols);
                    gemm_nt(gi, &cols, o, r, l, &mut dw);
                }
                if bias_rg {
                    for oc in 0..o {
                        db[oc] += gi[oc * l..(oc + 1) * l].iter().map(|&v| v as f64).sum::<f64>();
                    }
                }
                if need_dx {
                    dcols.iter_mut().for_each(|v| *v = 0.0);
                    gemm_tn(&wv, gi, o, r, l, &mut dcols);
                    geom.col2im(&dcols, img, &mut dx);
                }
            }
            let mut res = vec![need_dx.then(|| round_all(&dx)), need_dw.then(|| round_all(&dw))];
            if has_bias {
                res.push(bias_rg.then(|| round_all(&db)));
            }
            res
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let op = OpKind::Add;
        let scalar = scalar_pair(self, rhs, "add")?;
        check_finite(op, self)?;
        check_finite(op, rhs)?;
        let (av, bv) = (self.values(), rhs.values());
        let (shape, data): (Vec<usize>, Vec<f32>) = match scalar {
            None => (self.shape().to_vec(), av.iter().zip(bv.iter()).map(|(a, b)| a + b).collect()),
            Some(true) => (rhs.shape().to_vec(), bv.iter().map(|b| av[0] + b).collect()),
            Some(false) => (self.shape().to_vec(), av.iter().map(|a| a + bv[0]).collect()),
        };
        drop((av, bv));
        let (ra, rb) = (self.requires_grad(), rhs.requires_grad());
        Tensor::from_op(op, shape, data, &[self, rhs], move |g| {
            let reduce = || vec![g.iter().map(|&v| v as f64).sum::<f64>() as f32];
            match scalar {
                None => vec![ra.then(|| g.to_vec()), rb.then(|| g.to_vec())],
                Some(true) => vec![ra.then(reduce), rb.then(|| g.to_vec())],
                Some(false) => vec![ra.then(|| g.to_vec()), rb.then(reduce)],
            }
        })
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let op = OpKind::Mul;
        let scalar = scalar_pair(self, rhs, "mul")?;
        check_finite(op, self)?;
        check_finite(op, rhs)?;
        let (av, bv) = (self.values(), rhs.values());
        let (shape, data): (Vec<usize>, Vec<f32>) = match scalar {
            None => (self.shape().to_vec(), av.iter().zip(bv.iter()).map(|(a, b)| a * b).collect()),
            Some(true) => (rhs.shape().to_vec(), bv.iter().map(|b| av[0] * b).collect()),
            Some(false) => (self.shape().to_vec(), av.iter().map(|a| a * bv[0]).collect()),
        };
        drop((av, bv));
        let (a_t, b_t) = (self.clone(), rhs.clone());
        Tensor::from_op(op, shape, data, &[self, rhs], move |g| {
            let (av, bv) = (a_t.values(), b_t.values());
            // gradient wrt `x` in x*y
            let grad_of = |y: &[f32], y_is_scalar: bool, x_is_scalar: bool| -> Vec<f32> {
                if x_is_scalar {
                    let s: f64 = if y_is_scalar {
                        g.iter().map(|&v| v as f64 * y[0] as f64).sum()
                    } else {
                        g.iter().zip(y).map(|(&v, &w)| v as f64 * w as f64).sum()
                    };
                    vec![s as f32]
                } else if y_is_scalar {
                    g.iter().map(|&v| v * y[0]).collect()
                } else {
                    g.iter().zip(y).map(|(&v, &w)| v * w).collect()
                }
            };
            let (sa, sb) = match scalar {
                None => (false, false),
                Some(true) => (true, false),
                Some(false) => (false, true),
            };
            vec![
                a_t.requires_grad().then(|| grad_of(&bv, sb, sa)),
                b_t.requires_grad().then(|| grad_of(&av, sa, sb)),
            ]
        })
    }

    fn unary(
        &self,
        op: OpKind,
        f: impl Fn(f64) -> f64,
        // derivative from (input, output)
        df: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Result<Tensor> {
        check_finite(op, self)?;
        let data: Vec<f32> = self.values().iter().map(|&v| f(v as f64) as f32).collect();
        let x_t = self.clone();
        let y = data.clone();
        Tensor::from_op(op, self.shape().to_vec(), data, &[self], move |g| {
            let xv = x_t.values();
            vec![Some(
                g.iter()
                    .zip(xv.iter().zip(&y))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect(),
            )]
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(OpKind::Relu, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(OpKind::Sigmoid, |v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(OpKind::Tanh, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn scalar_mul(&self, c: f32) -> Result<Tensor> {
        let op = OpKind::ScalarMul;
        check_finite(op, self)?;
        if !c.is_finite() {
            return Err(Error::NonFinite { op: op.name(), what: "scalar".into() });
        }
        let data = self.values().iter().map(|&v| v * c).collect();
        Tensor::from_op(op, self.shape().to_vec(), data, &[self], move |g| {
            vec![Some(g.iter().map(|&v| v * c).collect())]
        })
    }

    /// Non-overlapping k×k average pooling over NCHW input.
    pub fn mean_pool2d(&self, kernel: usize) -> Result<Tensor> {
        let op = OpKind::MeanPool2d;
        let s = self.shape();
        if s.len() != 4 || kernel == 0 || !s[2].is_multiple_of(kernel) || !s[3].is_multiple_of(kernel) {
            return Err(Error::invalid_shape(
                "mean_pool2d",
                s,
                format!("kernel {kernel} must divide the spatial extents"),
            ));
        }
        check_finite(op, self)?;
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / kernel, w / kernel);
        let inv = 1.0 / (kernel * kernel) as f64;
        let xv = self.values();
        let mut out = vec![0.0f32; nc * oh * ow];
        for p in 0..nc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for dy in 0..kernel {
                        let row = (p * h + oy * kernel + dy) * w + ox * kernel;
                        acc += xv[row..row + kernel].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    out[(p * oh + oy) * ow + ox] = (acc * inv) as f32;
                }
            }
        }
        drop(xv);
        let shape = vec![s[0], s[1], oh, ow];
        Tensor::from_op(op, shape, out, &[self], move |g| {
            let mut dx = vec![0.0f32; nc * h * w];
            for p in 0..nc {
                for y in 0..h {
                    for x in 0..w {
                        dx[(p * h + y) * w + x] =
                            (g[(p * oh + y / kernel) * ow + x / kernel] as f64 * inv) as f32;
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Collapse all axes after the first.
    pub fn flatten(&self) -> Result<Tensor> {
        let s = self.shape();
        let shape = vec![s[0], s[1..].iter().product::<usize>().max(1)];
        check_finite(OpKind::Flatten, self)?;
        Tensor::from_op(OpKind::Flatten, shape, self.to_vec(), &[self], |g| vec![Some(g.to_vec())])
    }

    pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
        let op = OpKind::Concat;
        let first = inputs.first().ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::invalid_shape("concat", first.shape(), format!("axis {axis} out of range")));
        }
        for t in inputs {
            let s = t.shape();
            let compatible = s.len() == rank
                && s.iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", first.shape(), s));
            }
            check_finite(op, t)?;
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let extents: Vec<usize> = inputs.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &e) in inputs.iter().zip(&extents) {
                let v = t.values();
                data.extend_from_slice(&v[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let flags: Vec<bool> = inputs.iter().map(|t| t.requires_grad()).collect();
        Tensor::from_op(op, shape, data, inputs, move |g| {
            let mut grads: Vec<Option<Vec<f32>>> = flags
                .iter()
                .zip(&extents)
                .map(|(&rg, &e)| rg.then(|| Vec::with_capacity(outer * e * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gr, &e) in grads.iter_mut().zip(&extents) {
                    let len = e * inner;
                    if let Some(buf) = gr {
                        buf.extend_from_slice(&g[off..off + len]);
                    }
                    off += len;
                }
            }
            grads
        })
    }

    /// `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        let op = OpKind::Slice;
        let s = self.shape();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::invalid_shape(
                "slice",
                s,
                format!("range {start}..{end} on axis {axis} is invalid"),
            ));
        }
        check_finite(op, self)?;
        let (outer, ext, inner) = split_axis(s, axis);
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        {
            let v = self.values();
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                data.extend_from_slice(&v[base..base + len * inner]);
            }
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        Tensor::from_op(op, shape, data, &[self], move |g| {
            let mut dx = vec![0.0f32; outer * ext * inner];
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        })
    }

    fn softmax_impl(&self, axis: usize, log: bool) -> Result<Tensor> {
        let op = if log { OpKind::LogSoftmax } else { OpKind::Softmax };
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::invalid_shape(op.name(), s, format!("axis {axis} out of range")));
        }
        check_finite(op, self)?;
        let (outer, ext, inner) = split_axis(s, axis);
        let xv = self.values();
        let mut soft = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * ext + a) * inner + i;
                let max = (0..ext).map(|a| xv[idx(a)] as f64).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..ext).map(|a| (xv[idx(a)] as f64 - max).exp()).sum();
                let log_z = z.ln();
                for a in 0..ext {
                    let shifted = xv[idx(a)] as f64 - max;
                    soft[idx(a)] = (shifted - log_z).exp() as f32;
                    out[idx(a)] = if log {
                        (shifted - log_z) as f32
                    } else {
                        (shifted - log_z).exp() as f32
                    };
                }
            }
        }
        drop(xv);
        Tensor::from_op(op, s.to_vec(), out, &[self], move |g| {
            let mut dx = vec![0.0f32; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * ext + a) * inner + i;
                    if log {
                        let gsum: f64 = (0..ext).map(|a| g[idx(a)] as f64).sum();
                        for a in 0..ext {
                            dx[idx(a)] = (g[idx(a)] as f64 - soft[idx(a)] as f64 * gsum) as f32;
                        }
                    } else {
                        let dot: f64 = (0..ext).map(|a| g[idx(a)] as f64 * soft[idx(a)] as f64).sum();
                        for a in 0..ext {
                            dx[idx(a)] = (soft[idx(a)] as f64 * (g[idx(a)] as f64 - dot)) as f32;
                        }
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.softmax_impl(axis, false)
    }

    /// Max-shifted log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        self.softmax_impl(axis, true)
    }

    pub fn sum(&self) -> Result<Tensor> {
        check_finite(OpKind::Sum, self)?;
        let n = self.numel();
        let total: f64 = self.values().iter().map(|&v| v as f64).sum();
        Tensor::from_op(OpKind::Sum, vec![1], vec![total as f32], &[self], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Result<Tensor> {
        check_finite(OpKind::Mean, self)?;
        let n = self.numel();
        let total: f64 = self.values().iter().map(|&v| v as f64).sum();
        Tensor::from_op(OpKind::Mean, vec![1], vec![(total / n as f64) as f32], &[self], move |g| {
            vec![Some(vec![(g[0] as f64 / n as f64) as f32; n])]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    fn p(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::param(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.matmul(&i).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric() {
        let x = t(&[2], &[0.0, 0.0]);
        assert_eq!(x.softmax(0).unwrap().to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn relu_definition() {
        let x = t(&[3], &[-1.0, 2.0, 0.0]);
        assert_eq!(x.relu().unwrap().to_vec(), vec![0.0, 2.0, 0.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let x = p(&[3], &[1.0, 2.0, 3.0]);
        x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn mean_gradient() {
        let x = p(&[4], &[1.0, -2.0, 3.0, 0.5]);
        x.mean().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let x = p(&[2], &[1.0, -3.0]);
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward_retained().unwrap();
        let once = x.grad().unwrap();
        loss.backward().unwrap();
        let twice = x.grad().unwrap();
        assert_eq!(twice, once.iter().map(|g| 2.0 * g).collect::<Vec<_>>());
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let x = p(&[2], &[1.0, 2.0]);
        x.update_values(|v| v[0] = f32::INFINITY);
        assert!(matches!(x.relu(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn conv_rejects_unsupported_geometry() {
        let x = t(&[1, 1, 4, 4], &[0.0; 16]);
        let w4 = t(&[1, 1, 4, 4], &[0.0; 16]);
        assert!(x.conv2d(&w4, None, 1, Padding::Same).is_err());
        let w3 = t(&[1, 1, 3, 3], &[0.0; 9]);
        assert!(x.conv2d(&w3, None, 3, Padding::Same).is_err());
        let wc = t(&[1, 2, 3, 3], &[0.0; 18]);
        assert!(x.conv2d(&wc, None, 1, Padding::Same).is_err());
    }

    #[test]
    fn conv_same_and_valid_extents() {
        let x = t(&[2, 1, 16, 16], &[0.5; 512]);
        let w = t(&[4, 1, 3, 3], &[0.1; 36]);
        assert_eq!(x.conv2d(&w, None, 1, Padding::Same).unwrap().shape(), &[2, 4, 16, 16]);
        assert_eq!(x.conv2d(&w, None, 2, Padding::Same).unwrap().shape(), &[2, 4, 8, 8]);
        assert_eq!(x.conv2d(&w, None, 1, Padding::Valid).unwrap().shape(), &[2, 4, 14, 14]);
        let w5 = t(&[1, 1, 5, 5], &[0.0; 25]);
        assert_eq!(x.conv2d(&w5, None, 2, Padding::Same).unwrap().shape(), &[2, 1, 8, 8]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // single 3x3 valid window reduces to a dot product
        let xs: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let ws: Vec<f32> = (0..9).map(|v| 1.0 - v as f32 * 0.1).collect();
        let x = t(&[1, 1, 3, 3], &xs);
        let w = t(&[1, 1, 3, 3], &ws);
        let b = t(&[1], &[0.5]);
        let y = x.conv2d(&w, Some(&b), 1, Padding::Valid).unwrap();
        let expect: f64 = xs.iter().zip(&ws).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() + 0.5;
        assert!((y.item() as f64 - expect).abs() < 1e-5);
    }

    #[test]
    fn pool_concat_slice_shapes() {
        let x = t(&[1, 2, 4, 4], &(0..32).map(|v| v as f32).collect::<Vec<_>>());
        let pooled = x.mean_pool2d(2).unwrap();
        assert_eq!(pooled.shape(), &[1, 2, 2, 2]);
        assert_eq!(pooled.to_vec()[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert!(x.mean_pool2d(3).is_err());
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.slice(1, 1, 3).unwrap().to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
        assert!(c.slice(1, 2, 2).is_err());
    }

    #[test]
    fn scalar_broadcast_only() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let s = Tensor::scalar(2.0);
        assert_eq!(a.add(&s).unwrap().to_vec(), vec![3.0, 4.0, 5.0]);
        assert_eq!(s.mul(&a).unwrap().to_vec(), vec![2.0, 4.0, 6.0]);
        let b = t(&[2], &[1.0, 1.0]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn forward_op_dispatch() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = forward_op(OpKind::ScalarMul, &[&a], OpAttrs::Scalar(-1.0)).unwrap();
        assert_eq!(y.to_vec(), vec![-1.0, -2.0, -3.0, -4.0]);
        assert!(forward_op(OpKind::ScalarMul, &[&a], OpAttrs::None).is_err());
        assert!(forward_op(OpKind::Add, &[&a], OpAttrs::None).is_err());
        let s = forward_op(OpKind::Softmax, &[&a], OpAttrs::Axis(1)).unwrap();
        let v = s.to_vec();
        assert!((v[0] + v[1] - 1.0).abs() < 1e-6);
    }
}
