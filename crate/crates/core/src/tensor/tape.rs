use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, Dims5, BN_EPS, BN_MOMENTUM};
use super::{Parameter, Tensor};
use crate::error::{contract_err, shape_err, Error, Result};

/// Gradients keyed by parameter identifier.
pub type Gradients = HashMap<String, Tensor>;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: usize, kernel: usize, pad: [usize; 2] },
    Conv1d { input: usize, kernel: usize, pad: usize },
    Add(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Scale(usize, f64),
    AddConst(usize),
    ScaleByVar { x: usize, s: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Tensor, inv_std: Vec<f64>, train: bool },
    AvgPool2(usize),
    PoolClassify { x: usize, head: usize, pooled: Vec<f64> },
    SoftmaxCe { logits: usize, log_probs: Vec<f64>, labels: Vec<usize> },
    Sum(usize),
    SumSquares(usize),
    Sigmoid(usize),
    PLogP(usize),
    Index { x: usize, index: usize },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is single-use: build it, call [`Tape::backward`] once on the
/// scalar loss, then drop it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.idx, self.value().shape())
    }
}

/// Running per-channel statistics of a batch-norm site.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNormStats {
    pub running_mean: Option<Vec<f64>>,
    pub running_var: Option<Vec<f64>>,
}

impl BatchNormStats {
    pub fn is_initialized(&self) -> bool {
        self.running_mean.is_some() && self.running_var.is_some()
    }

    /// Folds one batch's `(mean, unbiased var)` into the running estimate.
    /// The first batch initializes the estimate directly.
    pub fn absorb(&mut self, mean: &[f64], var: &[f64]) {
        match (&mut self.running_mean, &mut self.running_var) {
            (Some(rm), Some(rv)) => {
                for (r, m) in rm.iter_mut().zip(mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                }
                for (r, v) in rv.iter_mut().zip(var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
                }
            }
            _ => {
                self.running_mean = Some(mean.to_vec());
                self.running_var = Some(var.to_vec());
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Train,
    Eval(&'a BatchNormStats),
}

/// Batch statistics observed by a train-mode batch norm, `(mean, unbiased var)`.
pub type ChannelStats = (Vec<f64>, Vec<f64>);

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad, param: None });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Places a parameter on the tape; its gradient is reported under its identifier.
    pub fn param(&self, p: &Parameter) -> Var<'_> {
        let v = self.push(p.value().clone(), Op::Leaf, true);
        self.nodes.borrow_mut()[v.idx].param = Some(p.id().to_string());
        v
    }

    fn value(&self, idx: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    fn requires_grad(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }

    /// Reverse pass from a one-element loss. Returns `d loss / d param` for
    /// every parameter placed on this tape; unreachable ones get zeros.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.idx];
        if root.value.len() != 1 {
            return Err(contract_err(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut out = Gradients::new();

        for i in (0..=loss.idx).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if let Some(id) = &node.param {
                    out.entry(id.clone()).or_insert_with(|| Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            let needs = |j: usize| nodes[j].requires_grad;
            let mut acc = |j: usize, t: Tensor| match &mut grads[j] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(id) = &node.param {
                        match out.get_mut(id) {
                            Some(existing) => existing.add_assign(&g),
                            None => {
                                out.insert(id.clone(), g);
                            }
                        }
                    }
                }
                Op::Conv2d { input, kernel, pad } => {
                    let (xv, kv) = (&nodes[*input].value, &nodes[*kernel].value);
                    if needs(*kernel) {
                        acc(*kernel, kernels::conv2d_backward_kernel(&g, xv, kv.shape(), *pad));
                    }
                    if needs(*input) {
                        acc(*input, kernels::conv2d_backward_input(&g, kv, xv.shape()[1], *pad));
                    }
                }
                Op::Conv1d { input, kernel, pad } => {
                    let (xv, kv) = (&nodes[*input].value, &nodes[*kernel].value);
                    if needs(*kernel) {
                        acc(*kernel, kernels::conv1d_backward_kernel(&g, xv, kv.shape(), *pad));
                    }
                    if needs(*input) {
                        acc(*input, kernels::conv1d_backward_input(&g, kv, xv.shape()[1], *pad));
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        acc(*a, g.clone());
                    }
                    if needs(*b) {
                        acc(*b, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if needs(*a) {
                        acc(*a, g.zip_map(bv, |x, y| x * y));
                    }
                    if needs(*b) {
                        acc(*b, g.zip_map(av, |x, y| x * y));
                    }
                }
                Op::Relu(a) => {
                    let av = &nodes[*a].value;
                    acc(*a, g.zip_map(av, |gv, x| if x > 0.0 { gv } else { 0.0 }));
                }
                Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
                Op::AddConst(a) => acc(*a, g),
                Op::ScaleByVar { x, s } => {
                    let (xv, sv) = (&nodes[*x].value, nodes[*s].value.item());
                    if needs(*s) {
                        let d: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                        acc(*s, Tensor::scalar(d));
                    }
                    if needs(*x) {
                        acc(*x, g.map(|v| v * sv));
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let gam = nodes[*gamma].value.data();
                    let (sum_g, sum_gx) = kernels::channel_sums(&g, xhat);
                    if needs(*gamma) {
                        acc(*gamma, Tensor { shape: vec![gam.len()], data: sum_gx.clone() });
                    }
                    if needs(*beta) {
                        acc(*beta, Tensor { shape: vec![gam.len()], data: sum_g.clone() });
                    }
                    if needs(*x) {
                        let d = Dims5::of(&g);
                        let m = (d.b * d.t * d.plane()) as f64;
                        let p = d.plane();
                        let mut gx = g.clone();
                        let gd = gx.data_mut();
                        let xh = xhat.data();
                        for b in 0..d.b {
                            for c in 0..d.c {
                                let k = gam[c] * inv_std[c];
                                for t in 0..d.t {
                                    let o = d.plane_at(b, c, t);
                                    for j in o..o + p {
                                        gd[j] = if *train {
                                            k * (gd[j] - sum_g[c] / m - xh[j] * sum_gx[c] / m)
                                        } else {
                                            k * gd[j]
                                        };
                                    }
                                }
                            }
                        }
                        acc(*x, gx);
                    }
                }
                Op::AvgPool2(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    acc(*a, kernels::avg_pool2_backward(&g, &shape));
                }
                Op::PoolClassify { x, head, pooled } => {
                    let (xv, hv) = (&nodes[*x].value, &nodes[*head].value);
                    let d = Dims5::of(xv);
                    let (k_n, c_n) = (hv.shape()[0], hv.shape()[1]);
                    let gd = g.data();
                    if needs(*head) {
                        let mut gh = vec![0.0; k_n * c_n];
                        for k in 0..k_n {
                            for c in 0..c_n {
                                gh[k * c_n + c] = (0..d.b).map(|b| gd[b * k_n + k] * pooled[b * c_n + c]).sum();
                            }
                        }
                        acc(*head, Tensor { shape: hv.shape().to_vec(), data: gh });
                    }
                    if needs(*x) {
                        let n = d.t * d.plane();
                        let w = hv.data();
                        let mut gx = vec![0.0; xv.len()];
                        for b in 0..d.b {
                            for c in 0..c_n {
                                let dp: f64 = (0..k_n).map(|k| gd[b * k_n + k] * w[k * c_n + c]).sum();
                                let v = dp / n as f64;
                                let o = (b * c_n + c) * n;
                                gx[o..o + n].iter_mut().for_each(|e| *e = v);
                            }
                        }
                        acc(*x, Tensor { shape: xv.shape().to_vec(), data: gx });
                    }
                }
                Op::SoftmaxCe { logits, log_probs, labels } => {
                    let shape = nodes[*logits].value.shape().to_vec();
                    let (b_n, k_n) = (shape[0], shape[1]);
                    let scale = g.item() / b_n as f64;
                    let mut gl: Vec<f64> = log_probs.iter().map(|lp| lp.exp() * scale).collect();
                    for (b, &y) in labels.iter().enumerate() {
                        gl[b * k_n + y] -= scale;
                    }
                    acc(*logits, Tensor { shape, data: gl });
                }
                Op::Sum(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    acc(*a, Tensor::full(&shape, g.item()));
                }
                Op::SumSquares(a) => {
                    let gv = g.item();
                    acc(*a, nodes[*a].value.map(|v| 2.0 * v * gv));
                }
                Op::Sigmoid(a) => {
                    acc(*a, g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s)));
                }
                Op::PLogP(a) => {
                    // d/dθ [σ(θ) log σ(θ)] = σ(θ) σ(-θ) (log σ(θ) + 1)
                    let grad = nodes[*a].value.map(|th| {
                        let p = kernels::sigmoid(th);
                        let q = kernels::sigmoid(-th);
                        let logp = -kernels::softplus(-th);
                        if p * q == 0.0 {
                            0.0
                        } else {
                            p * q * (logp + 1.0)
                        }
                    });
                    acc(*a, g.zip_map(&grad, |x, y| x * y));
                }
                Op::Index { x, index } => {
                    let shape = nodes[*x].value.shape().to_vec();
                    let mut t = Tensor::zeros(&shape);
                    t.data_mut()[*index] = g.item();
                    acc(*x, t);
                }
            }
        }
        // Parameters placed on the tape after the loss was computed.
        for node in &nodes[loss.idx + 1..] {
            if let Some(id) = &node.param {
                out.entry(id.clone()).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{what}: operand shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.idx)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    /// Same-padded 2D cross-correlation applied to every frame.
    ///
    /// `self` is `[B, Cin, T, H, W]`, `kernel` is `[Cout, Cin, kh, kw]`.
    pub fn conv2d_spatial(&self, kernel: &Var<'t>, padding: [usize; 2]) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        x.expect_rank(5, "conv2d input")?;
        k.expect_rank(4, "conv2d kernel")?;
        let ks = k.shape();
        if ks[1] != x.shape()[1] {
            return Err(shape_err(format!("conv2d channel mismatch: input {:?} vs kernel {:?}", x.shape(), ks)));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(shape_err(format!("conv2d kernel extents must be odd, got {ks:?}")));
        }
        if padding != [(ks[2] - 1) / 2, (ks[3] - 1) / 2] {
            return Err(shape_err(format!("conv2d padding {padding:?} is not same-padding for kernel {ks:?}")));
        }
        let out = kernels::conv2d_forward(&x, &k, padding);
        Ok(self.binary(kernel, out, Op::Conv2d { input: self.idx, kernel: kernel.idx, pad: padding }))
    }

    /// Same-padded 1D cross-correlation along time at every spatial location.
    ///
    /// `self` is `[B, Cin, T, H, W]`, `kernel` is `[Cout, Cin, kt]`.
    pub fn conv1d_temporal(&self, kernel: &Var<'t>, padding: usize) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        x.expect_rank(5, "conv1d input")?;
        k.expect_rank(3, "conv1d kernel")?;
        let ks = k.shape();
        if ks[1] != x.shape()[1] {
            return Err(shape_err(format!("conv1d channel mismatch: input {:?} vs kernel {:?}", x.shape(), ks)));
        }
        if ks[2] % 2 == 0 || padding != (ks[2] - 1) / 2 {
            return Err(shape_err(format!(
                "conv1d needs an odd kernel with same-padding, got kernel {ks:?} padding {padding}"
            )));
        }
        let out = kernels::conv1d_forward(&x, &k, padding);
        Ok(self.binary(kernel, out, Op::Conv1d { input: self.idx, kernel: kernel.idx, pad: padding }))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        let out = a.zip_map(&b, |x, y| x + y);
        Ok(self.binary(other, out, Op::Add(self.idx, other.idx)))
    }

    /// Pointwise product of equal-shaped tensors.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul")?;
        let out = a.zip_map(&b, |x, y| x * y);
        Ok(self.binary(other, out, Op::Mul(self.idx, other.idx)))
    }

    pub fn relu(&self) -> Var<'t> {
        let out = self.value().map(|x| x.max(0.0));
        self.unary(out, Op::Relu(self.idx))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| c * x);
        self.unary(out, Op::Scale(self.idx, c))
    }

    pub fn add_const(&self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.unary(out, Op::AddConst(self.idx))
    }

    /// Multiplies every element by a one-element variable.
    pub fn scale_by(&self, s: &Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if sv.len() != 1 {
            return Err(shape_err(format!("scale_by needs a scalar, got {:?}", sv.shape())));
        }
        let c = sv.item();
        let out = self.value().map(|x| c * x);
        Ok(self.binary(s, out, Op::ScaleByVar { x: self.idx, s: s.idx }))
    }

    /// Per-channel batch normalization over batch, time and space.
    ///
    /// In train mode the batch's `(mean, unbiased var)` is returned so the
    /// caller can fold it into the running statistics.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        mode: BnMode<'_>,
    ) -> Result<(Var<'t>, Option<ChannelStats>)> {
        let x = self.value();
        x.expect_rank(5, "batch_norm input")?;
        let c = x.shape()[1];
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(shape_err(format!(
                "batch_norm affine shapes {:?}/{:?} do not match {c} channels",
                gv.shape(),
                bv.shape()
            )));
        }
        let (mean, var, stats, train) = match mode {
            BnMode::Train => {
                let d = Dims5::of(&x);
                let m = d.b * d.t * d.plane();
                if m < 2 {
                    return Err(contract_err(format!(
                        "train-mode batch_norm needs at least 2 values per channel, got {m}"
                    )));
                }
                let (mean, var) = kernels::channel_moments(&x);
                let unbiased: Vec<f64> = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
                (mean.clone(), var, Some((mean, unbiased)), true)
            }
            BnMode::Eval(state) => match (&state.running_mean, &state.running_var) {
                (Some(m), Some(v)) if m.len() == c && v.len() == c => (m.clone(), v.clone(), None, false),
                (Some(_), Some(_)) => return Err(shape_err(format!("running statistics do not match {c} channels"))),
                _ => return Err(Error::Uninitialized("batch_norm eval mode before any train-mode call".into())),
            },
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xhat = kernels::normalize(&x, &mean, &inv_std);
        let out = kernels::affine(&xhat, gv.data(), bv.data());
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let v = self.tape.push(
            out,
            Op::BatchNorm { x: self.idx, gamma: gamma.idx, beta: beta.idx, xhat, inv_std, train },
            rg,
        );
        Ok((v, stats))
    }

    /// 2x2 spatial average pooling with stride 2.
    pub fn avg_pool2(&self) -> Result<Var<'t>> {
        let x = self.value();
        x.expect_rank(5, "avg_pool2 input")?;
        let s = x.shape();
        if !s[3].is_multiple_of(2) || !s[4].is_multiple_of(2) {
            return Err(shape_err(format!("avg_pool2 needs even spatial extents, got {s:?}")));
        }
        let out = kernels::avg_pool2_forward(&x);
        Ok(self.unary(out, Op::AvgPool2(self.idx)))
    }

    /// Global average pool over time and space followed by a bias-free
    /// linear head `[num_classes, channels]`.
    pub fn pool_and_classify(&self, head: &Var<'t>) -> Result<Var<'t>> {
        let (x, h) = (self.value(), head.value());
        x.expect_rank(5, "pool_and_classify features")?;
        h.expect_rank(2, "pool_and_classify head")?;
        if h.shape()[1] != x.shape()[1] {
            return Err(shape_err(format!(
                "head width {} does not match feature channels {} (features {:?}, head {:?})",
                h.shape()[1],
                x.shape()[1],
                x.shape(),
                h.shape()
            )));
        }
        let pooled = kernels::global_mean(&x);
        let out = kernels::linear(&pooled, &h, x.shape()[0]);
        Ok(self.binary(head, out, Op::PoolClassify { x: self.idx, head: head.idx, pooled }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(self)`.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let z = self.value();
        z.expect_rank(2, "logits")?;
        let (b_n, k_n) = (z.shape()[0], z.shape()[1]);
        if labels.len() != b_n {
            return Err(shape_err(format!("{} labels for {b_n} logit rows", labels.len())));
        }
        if let Some((row, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k_n) {
            return Err(Error::Index(format!("label {y} at row {row} is outside [0, {k_n})")));
        }
        let log_probs = kernels::log_softmax_rows(&z);
        let loss = -labels.iter().enumerate().map(|(b, &y)| log_probs[b * k_n + y]).sum::<f64>() / b_n as f64;
        let labels = labels.to_vec();
        Ok(self.unary(Tensor::scalar(loss), Op::SoftmaxCe { logits: self.idx, log_probs, labels }))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.idx))
    }

    pub fn sum_squares(&self) -> Var<'t> {
        let s = self.value().sum_squares();
        self.unary(Tensor::scalar(s), Op::SumSquares(self.idx))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let out = self.value().map(kernels::sigmoid);
        self.unary(out, Op::Sigmoid(self.idx))
    }

    /// Treats `self` as logits θ and returns `σ(θ) · ln σ(θ)` elementwise,
    /// computed without forming `ln 0`.
    pub fn plogp_from_logit(&self) -> Var<'t> {
        let out = self.value().map(|th| {
            let p = kernels::sigmoid(th);
            if p == 0.0 {
                0.0
            } else {
                -p * kernels::softplus(-th)
            }
        });
        self.unary(out, Op::PLogP(self.idx))
    }

    /// Selects one element by flat index as a scalar.
    pub fn index(&self, index: usize) -> Result<Var<'t>> {
        let x = self.value();
        let v = *x
            .data()
            .get(index)
            .ok_or_else(|| Error::Index(format!("flat index {index} out of range for shape {:?}", x.shape())))?;
        Ok(self.unary(Tensor::scalar(v), Op::Index { x: self.idx, index }))
    }
}
