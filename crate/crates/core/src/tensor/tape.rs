//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. `backward` walks the tape from the loss towards the
//! leaves in reverse insertion order, so gradient accumulation order is fixed.

use super::kernels::{Conv, Depthwise, Pool};
use super::{Mode, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Running statistics of a batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormConfig {
    pub mode: Mode,
    pub momentum: f32,
    pub eps: f32,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Eval,
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        n: usize,
        din: usize,
        dout: usize,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    AvgPool {
        x: Var,
        pool: Pool,
    },
    GlobalAvg {
        x: Var,
        hw: usize,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
        c: usize,
        hw: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        n: usize,
        hw: usize,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f32>,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn spatial(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(dim_err(format!("{what} expects a 4-d NCHW tensor, got {s:?}"))),
    }
}

fn out_extent(extent: usize, k: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    if stride == 0 {
        return Err(dim_err("stride must be positive"));
    }
    if extent + 2 * pad < k {
        return Err(dim_err(format!(
            "{axis}: kernel {k} exceeds padded input extent {}",
            extent + 2 * pad
        )));
    }
    Ok((extent + 2 * pad - k) / stride + 1)
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += *b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Option<Var>]) -> Var {
        let needs_grad = inputs
            .iter()
            .flatten()
            .any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after one or more `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = spatial(self.value(x), "conv2d input")?;
        let (cout, wcin, kh, kw) = spatial(self.value(w), "conv2d weight")?;
        if wcin != cin {
            return Err(dim_err(format!(
                "conv2d: input channel axis (dim 1) is {cin} but weight in-channel axis (dim 1) is {wcin}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err(format!(
                    "conv2d: bias shape {:?} does not match out-channel axis {cout}",
                    self.shape(b)
                )));
            }
        }
        let ho = out_extent(h, kh, stride, pad, "conv2d height (dim 2)")?;
        let wo = out_extent(wd, kw, stride, pad, "conv2d width (dim 3)")?;
        let geom = Conv { n, cin, h, w: wd, cout, kh, kw, stride, pad, ho, wo };
        let out = geom.forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[n, cout, ho, wo], out)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom }, &[Some(x), Some(w), b]))
    }

    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = spatial(self.value(x), "depthwise_conv2d input")?;
        let (wc, one, kh, kw) = spatial(self.value(w), "depthwise_conv2d weight")?;
        if wc != c || one != 1 {
            return Err(dim_err(format!(
                "depthwise_conv2d: weight must be [{c}, 1, kh, kw] for {c} input channels (dim 1), got {:?}",
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(dim_err(format!(
                    "depthwise_conv2d: bias shape {:?} does not match channel axis {c}",
                    self.shape(b)
                )));
            }
        }
        let ho = out_extent(h, kh, stride, pad, "depthwise_conv2d height (dim 2)")?;
        let wo = out_extent(wd, kw, stride, pad, "depthwise_conv2d width (dim 3)")?;
        let geom = Conv { n, cin: c, h, w: wd, cout: c, kh, kw, stride, pad, ho, wo };
        let out = Depthwise(geom).forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(t, Op::Depthwise { x, w, b, geom }, &[Some(x), Some(w), b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = match *self.shape(x) {
            [n, d] => (n, d),
            ref s => return Err(dim_err(format!("linear expects [N, Din] input, got {s:?}"))),
        };
        let (dout, wdin) = match *self.shape(w) {
            [o, i] => (o, i),
            ref s => return Err(dim_err(format!("linear weight must be 2-d, got {s:?}"))),
        };
        if wdin != din {
            return Err(dim_err(format!(
                "linear: input feature axis (dim 1) is {din} but weight axis (dim 1) is {wdin}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(dim_err(format!(
                    "linear: bias shape {:?} does not match output axis {dout}",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![0.0; n * dout];
        super::kernels::gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += *bv;
                }
            }
        }
        let t = Tensor::new(&[n, dout], out)?;
        Ok(self.push(t, Op::Linear { x, w, b, n, din, dout }, &[Some(x), Some(w), b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let t = Tensor::new(v.shape(), data).unwrap();
        self.push(t, Op::Relu { x }, &[Some(x)])
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = spatial(self.value(x), "max_pool2d input")?;
        if pad * 2 >= kernel && pad > 0 {
            return Err(dim_err(format!(
                "max_pool2d: padding {pad} must be less than half the kernel {kernel}"
            )));
        }
        let ho = out_extent(h, kernel, stride, pad, "max_pool2d height (dim 2)")?;
        let wo = out_extent(w, kernel, stride, pad, "max_pool2d width (dim 3)")?;
        let pool = Pool { n, c, h, w, k: kernel, stride, pad, ho, wo };
        let (out, arg) = pool.max_forward(self.value(x).data());
        let t = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool { x, arg }, &[Some(x)]))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = spatial(self.value(x), "avg_pool2d input")?;
        let ho = out_extent(h, kernel, stride, 0, "avg_pool2d height (dim 2)")?;
        let wo = out_extent(w, kernel, stride, 0, "avg_pool2d width (dim 3)")?;
        let pool = Pool { n, c, h, w, k: kernel, stride, pad: 0, ho, wo };
        let out = pool.avg_forward(self.value(x).data());
        let t = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(t, Op::AvgPool { x, pool }, &[Some(x)]))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = spatial(self.value(x), "global_avg_pool input")?;
        let hw = h * w;
        let inv = 1.0 / hw as f32;
        let out = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f32>() * inv)
            .collect();
        let t = Tensor::new(&[n, c], out)?;
        Ok(self.push(t, Op::GlobalAvg { x, hw }, &[Some(x)]))
    }

    /// Batch normalization over `[N, C, H, W]`.
    ///
    /// In train mode the output is normalized with the biased batch variance
    /// and the updated running statistics (unbiased variance, exponential
    /// average with `momentum`) are returned. Eval mode uses `running`.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &NormStats,
        cfg: NormConfig,
    ) -> Result<(Var, Option<NormStats>)> {
        let (n, c, h, w) = spatial(self.value(x), "batch_norm2d input")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(dim_err(format!(
                    "batch_norm2d: {name} shape {:?} does not match channel axis (dim 1) {c}",
                    self.shape(v)
                )));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(dim_err(format!(
                "batch_norm2d: running statistics sized {} for {c} channels",
                running.mean.len()
            )));
        }
        let hw = h * w;
        let m = n * hw;
        let train = cfg.mode == Mode::Train;
        if train && m < 2 {
            return Err(Error::Contract(format!(
                "batch_norm2d in train mode needs N*H*W >= 2, got {m}"
            )));
        }
        let xd = self.value(x).data();
        let (mean, var_b): (Vec<f32>, Vec<f32>) = if train {
            (0..c)
                .map(|ch| {
                    let mut s = 0.0f64;
                    let mut s2 = 0.0f64;
                    for s_i in 0..n {
                        for &v in &xd[(s_i * c + ch) * hw..][..hw] {
                            s += v as f64;
                        }
                    }
                    let mu = s / m as f64;
                    for s_i in 0..n {
                        for &v in &xd[(s_i * c + ch) * hw..][..hw] {
                            let d = v as f64 - mu;
                            s2 += d * d;
                        }
                    }
                    (mu as f32, (s2 / m as f64) as f32)
                })
                .unzip()
        } else {
            (running.mean.clone(), running.var.clone())
        };
        let inv_std: Vec<f32> = var_b.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s_i in 0..n {
            for ch in 0..c {
                let off = (s_i * c + ch) * hw;
                for k in off..off + hw {
                    let xh = (xd[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    out[k] = g[ch] * xh + bt[ch];
                }
            }
        }
        let updated = train.then(|| {
            let unbias = m as f32 / (m - 1) as f32;
            let mo = cfg.momentum;
            NormStats {
                mean: running
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(r, b)| (1.0 - mo) * r + mo * b)
                    .collect(),
                var: running
                    .var
                    .iter()
                    .zip(&var_b)
                    .map(|(r, b)| (1.0 - mo) * r + mo * b * unbias)
                    .collect(),
            }
        });
        let t = Tensor::new(&[n, c, h, w], out)?;
        let v = self.push(
            t,
            Op::Norm { x, gamma, beta, xhat, inv_std, train, c, hw },
            &[Some(x), Some(gamma), Some(beta)],
        );
        Ok((v, updated))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "add: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Add { a, b }, &[Some(a), Some(b)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Mul { a, b }, &[Some(a), Some(b)]))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (n, _, h, w) = spatial(self.value(first), "concat input")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = spatial(self.value(p), "concat input")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(dim_err(format!(
                    "concat: batch/spatial axes {:?} differ from {:?}",
                    (pn, ph, pw),
                    (n, h, w)
                )));
            }
            widths.push((p, pc));
        }
        let hw = h * w;
        let total: usize = widths.iter().map(|(_, c)| c).sum();
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for &(p, pc) in &widths {
                out.extend_from_slice(&self.value(p).data()[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        let t = Tensor::new(&[n, total, h, w], out)?;
        let inputs: Vec<Option<Var>> = parts.iter().copied().map(Some).collect();
        Ok(self.push(t, Op::Concat { parts: widths, n, hw }, &inputs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let mut t = t;
        t.set_requires_grad(false);
        Ok(self.push(t, Op::Reshape { x }, &[Some(x)]))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[Some(x)])
    }

    /// Mean softmax cross-entropy over the batch; max-subtracted for stability.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = match *self.shape(logits) {
            [n, c] => (n, c),
            ref s => return Err(dim_err(format!("cross-entropy expects [N, C] logits, got {s:?}"))),
        };
        if labels.len() != n {
            return Err(dim_err(format!(
                "cross-entropy: {} labels for batch axis (dim 0) {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Range(format!("label {bad} outside 0..{c}")));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0f64;
        for (row, &label) in self.value(logits).data().chunks_exact(c).zip(labels) {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = row.iter().map(|&v| (v - mx).exp()).sum();
            let lz = z.ln();
            loss += (lz - (row[label] - mx)) as f64;
            probs.extend(row.iter().map(|&v| (v - mx).exp() / z));
        }
        let t = Tensor::scalar((loss / n as f64) as f32);
        Ok(self.push(
            t,
            Op::SoftmaxCe { logits, probs, labels: labels.to_vec() },
            &[Some(logits)],
        ))
    }

    /// Back-propagates from a scalar and adds the resulting gradients into
    /// every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (v, d) in self.local_grads(i, &g) {
                if self.nodes[v.0].needs_grad {
                    add_into(&mut grads[v.0], &d);
                }
            }
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                self.nodes[i].value.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (gx, gw, gb) = geom.backward(
                    val(*x),
                    val(*w),
                    g,
                    wants(*x),
                    wants(*w),
                    b.is_some_and(wants),
                );
                out.extend(gx.map(|d| (*x, d)));
                out.extend(gw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (b, gb) {
                    out.push((*b, d));
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let (gx, gw, gb) = Depthwise(*geom).backward(val(*x), val(*w), g);
                out.push((*x, gx));
                out.push((*w, gw));
                if let Some(b) = b {
                    out.push((*b, gb));
                }
            }
            Op::Linear { x, w, b, n, din, dout } => {
                if wants(*x) {
                    let mut gx = vec![0.0; n * din];
                    super::kernels::gemm(*n, *dout, *din, g, false, val(*w), false, 0.0, &mut gx);
                    out.push((*x, gx));
                }
                if wants(*w) {
                    let mut gw = vec![0.0; dout * din];
                    super::kernels::gemm(*dout, *n, *din, g, true, val(*x), false, 0.0, &mut gw);
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; *dout];
                    for row in g.chunks_exact(*dout) {
                        for (a, r) in gb.iter_mut().zip(row) {
                            *a += *r;
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Relu { x } => {
                let d = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::MaxPool { x, arg } => {
                let mut d = vec![0.0; val(*x).len()];
                for (&a, &gv) in arg.iter().zip(g) {
                    d[a as usize] += gv;
                }
                out.push((*x, d));
            }
            Op::AvgPool { x, pool } => out.push((*x, pool.avg_backward(g))),
            Op::GlobalAvg { x, hw } => {
                let inv = 1.0 / *hw as f32;
                let d = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * inv, *hw))
                    .collect();
                out.push((*x, d));
            }
            Op::Norm { x, gamma, beta, xhat, inv_std, train, c, hw } => {
                let (c, hw) = (*c, *hw);
                let n = g.len() / (c * hw);
                let m = (n * hw) as f64;
                let gam = val(*gamma);
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for k in off..off + hw {
                            dbeta[ch] += g[k] as f64;
                            dgamma[ch] += (g[k] * xhat[k]) as f64;
                        }
                    }
                }
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let scale = gam[ch] * inv_std[ch];
                            if *train {
                                let sb = (dbeta[ch] / m) as f32;
                                let sg = (dgamma[ch] / m) as f32;
                                for k in off..off + hw {
                                    dx[k] = scale * (g[k] - sb - xhat[k] * sg);
                                }
                            } else {
                                for k in off..off + hw {
                                    dx[k] = scale * g[k];
                                }
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma.iter().map(|&v| v as f32).collect()));
                out.push((*beta, dbeta.iter().map(|&v| v as f32).collect()));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                let da = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Concat { parts, n, hw } => {
                let total: usize = parts.iter().map(|(_, c)| c).sum();
                let mut offset = 0;
                for &(p, pc) in parts {
                    let mut d = Vec::with_capacity(n * pc * hw);
                    for s in 0..*n {
                        let start = (s * total + offset) * hw;
                        d.extend_from_slice(&g[start..start + pc * hw]);
                    }
                    offset += pc;
                    out.push((p, d));
                }
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::Sum { x } => out.push((*x, vec![g[0]; val(*x).len()])),
            Op::SoftmaxCe { logits, probs, labels } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f32;
                let mut d: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (s, &l) in labels.iter().enumerate() {
                    d[s * c + l] -= scale;
                }
                out.push((*logits, d));
            }
        }
        out
    }
}
