use super::kernels as k;
use super::{ConvSpec, ParamId, ParamStore};
use crate::{Error, Result};

/// Index of a tensor node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf { param: Option<ParamId> },
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f32),
    Abs(TensorId),
    Relu(TensorId),
    SignSte(TensorId),
    Matmul { a: TensorId, b: TensorId },
    Linear { x: TensorId, w: TensorId, b: Option<TensorId> },
    Conv2d { x: TensorId, w: TensorId, spec: ConvSpec },
    MaxPool3 { x: TensorId, stride: usize, arg: Vec<u32> },
    AvgPool3 { x: TensorId, stride: usize },
    BnTrain { x: TensorId, gamma: Option<TensorId>, beta: Option<TensorId>, mean: Vec<f32>, invstd: Vec<f32> },
    BnEval { x: TensorId, gamma: Option<TensorId>, beta: Option<TensorId>, mean: Vec<f32>, invstd: Vec<f32> },
    ConcatCh { xs: Vec<TensorId> },
    CropOffset { x: TensorId, oy: usize, ox: usize },
    Gap { x: TensorId },
    MeanGroups { x: TensorId, groups: usize },
    RowMean { x: TensorId },
    Reshape { x: TensorId },
    ScaleChannels { x: TensorId, s: TensorId },
    MulGroups { x: TensorId, m: TensorId },
    Pick { x: TensorId, index: usize },
    MulScalarT { x: TensorId, s: TensorId },
    SoftmaxRows { x: TensorId },
    LogSoftmaxRows { x: TensorId },
    CrossEntropy { logits: TensorId, labels: Vec<u32>, probs: Vec<f32> },
    Sum { x: TensorId },
    Mean { x: TensorId },
}

/// Gradients produced by one backward pass, addressed by tensor id.
/// Leaves that require grad but never reach the loss hold exact zeros;
/// detached tensors hold nothing.
pub struct Grads {
    vals: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn of(&self, id: TensorId) -> Option<&[f32]> {
        self.vals.get(id.0).and_then(|v| v.as_deref())
    }
}

/// Append-only reverse-mode tape. Node indices are topological by
/// construction (ops only reference earlier nodes), so backward is a single
/// reverse sweep over the arena.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: Option<super::ParamGroup>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Parameters of the frozen group enter subsequent `param` calls as
    /// constants: their gradient work is skipped entirely. Used by the
    /// bi-level alternation to hold one variable set fixed per phase.
    pub fn freeze(&mut self, group: Option<super::ParamGroup>) {
        self.frozen = group;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> Result<TensorId> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        k::ensure_finite(op_name, &data)?;
        self.nodes.push(Node { shape, data, op, needs_grad });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn ng(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Constant leaf: participates in forward math, receives no gradient.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("leaf", format!("shape {shape:?} vs {} values", data.len())));
        }
        self.push("leaf", shape, data, Op::Leaf { param: None }, false)
    }

    /// Leaf that requires grad but is not owned by a store (test probes).
    pub fn leaf_grad(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("leaf", format!("shape {shape:?} vs {} values", data.len())));
        }
        self.push("leaf", shape, data, Op::Leaf { param: None }, true)
    }

    /// Leaf bound to a stored parameter; backward accumulates into the
    /// store. Buffers enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<TensorId> {
        let p = store.get(id);
        let needs = !matches!(p.group, super::ParamGroup::Buffer) && self.frozen != Some(p.group);
        self.push("param", p.shape.clone(), p.data.clone(), Op::Leaf { param: needs.then_some(id) }, needs)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Result<TensorId> {
        let n = shape.iter().product();
        self.push("zeros", shape, vec![0.0; n], Op::Leaf { param: None }, false)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data: Vec<f32> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(&x, &y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.ng(a) || self.ng(b);
        self.push("add", shape, data, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f32> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(&x, &y)| x - y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.ng(a) || self.ng(b);
        self.push("sub", shape, data, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f32> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(&x, &y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.ng(a) || self.ng(b);
        self.push("mul", shape, data, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> Result<TensorId> {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.ng(a);
        self.push("scale", shape, data, Op::Scale(a, c), needs)
    }

    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|&x| x.abs()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.ng(a);
        self.push("abs", shape, data, Op::Abs(a), needs)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.ng(a);
        self.push("relu", shape, data, Op::Relu(a), needs)
    }

    /// Forward sign with sign(0)=+1; backward passes gradient where |x| ≤ 1
    /// (clipped straight-through estimator).
    pub fn sign_ste(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f32> =
            self.nodes[a.0].data.iter().map(|&x| if x >= 0.0 { 1.0 } else { -1.0 }).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.ng(a);
        self.push("sign_ste", shape, data, Op::SignSte(a), needs)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (asn, bsn) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if asn.len() != 2 || bsn.len() != 2 || asn[1] != bsn[0] {
            return Err(Error::shape("matmul", format!("{asn:?} × {bsn:?}")));
        }
        let (m, kk, n) = (asn[0], asn[1], bsn[1]);
        let mut data = vec![0.0f32; m * n];
        k::matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, kk, n, &mut data);
        let needs = self.ng(a) || self.ng(b);
        self.push("matmul", vec![m, n], data, Op::Matmul { a, b }, needs)
    }

    /// x: [m,k], w: [n,k] (one row per output unit), b: [n] → [m,n].
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let (xs, wsh) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if xs.len() != 2 || wsh.len() != 2 || xs[1] != wsh[1] {
            return Err(Error::shape("linear", format!("{xs:?} × {wsh:?}ᵀ")));
        }
        let (m, kk, n) = (xs[0], xs[1], wsh[0]);
        if let Some(bi) = b {
            if self.nodes[bi.0].shape != [n] {
                return Err(Error::shape("linear", format!("bias {:?}, want [{n}]", self.nodes[bi.0].shape)));
            }
        }
        let mut data = vec![0.0f32; m * n];
        k::matmul_nt_acc(&self.nodes[x.0].data, &self.nodes[w.0].data, m, kk, n, &mut data);
        if let Some(bi) = b {
            let bd = &self.nodes[bi.0].data;
            for r in 0..m {
                for c in 0..n {
                    data[r * n + c] += bd[c];
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.map_or(false, |bi| self.ng(bi));
        self.push("linear", vec![m, n], data, Op::Linear { x, w, b }, needs)
    }

    pub fn conv2d(&mut self, x: TensorId, w: TensorId, spec: ConvSpec) -> Result<TensorId> {
        let (data, shape) = k::conv2d(
            &self.nodes[x.0].data,
            &self.nodes[x.0].shape,
            &self.nodes[w.0].data,
            &self.nodes[w.0].shape,
            &spec,
        )?;
        let needs = self.ng(x) || self.ng(w);
        self.push("conv2d", shape, data, Op::Conv2d { x, w, spec }, needs)
    }

    // ── pooling / normalization ─────────────────────────────────────────

    pub fn maxpool3(&mut self, x: TensorId, stride: usize) -> Result<TensorId> {
        let (data, shape, arg) = k::maxpool3(&self.nodes[x.0].data, &self.nodes[x.0].shape, stride)?;
        let needs = self.ng(x);
        self.push("maxpool3", shape, data, Op::MaxPool3 { x, stride, arg }, needs)
    }

    pub fn avgpool3(&mut self, x: TensorId, stride: usize) -> Result<TensorId> {
        let (data, shape) = k::avgpool3(&self.nodes[x.0].data, &self.nodes[x.0].shape, stride)?;
        let needs = self.ng(x);
        self.push("avgpool3", shape, data, Op::AvgPool3 { x, stride }, needs)
    }

    /// Train-mode batchnorm over [N,C,H,W]. Returns the output id plus the
    /// batch mean and biased variance so the owning layer can update its
    /// running stats. Requires N ≥ 2.
    pub fn batchnorm_train(
        &mut self,
        x: TensorId,
        gamma: Option<TensorId>,
        beta: Option<TensorId>,
        eps: f32,
    ) -> Result<(TensorId, Vec<f32>, Vec<f32>)> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(Error::shape("batchnorm", format!("want 4-d input, got {xs:?}")));
        }
        if xs[0] < 2 {
            return Err(Error::arg("batchnorm", "train mode requires at least 2 samples"));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let (mean, var) = k::bn_stats(&self.nodes[x.0].data, n, c, hw);
        let invstd: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gd = gamma.map(|g| self.nodes[g.0].data.as_slice());
        let bd = beta.map(|b| self.nodes[b.0].data.as_slice());
        let data = k::bn_apply(&self.nodes[x.0].data, n, c, hw, &mean, &invstd, gd, bd);
        let needs = self.ng(x)
            || gamma.map_or(false, |g| self.ng(g))
            || beta.map_or(false, |b| self.ng(b));
        let id = self.push(
            "batchnorm",
            xs,
            data,
            Op::BnTrain { x, gamma, beta, mean: mean.clone(), invstd },
            needs,
        )?;
        Ok((id, mean, var))
    }

    /// Eval-mode batchnorm with frozen running stats: an affine map per
    /// channel.
    pub fn batchnorm_eval(
        &mut self,
        x: TensorId,
        gamma: Option<TensorId>,
        beta: Option<TensorId>,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 || xs[1] != running_mean.len() || xs[1] != running_var.len() {
            return Err(Error::shape("batchnorm_eval", format!("input {xs:?} vs stats {}", running_mean.len())));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let invstd: Vec<f32> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gd = gamma.map(|g| self.nodes[g.0].data.as_slice());
        let bd = beta.map(|b| self.nodes[b.0].data.as_slice());
        let data = k::bn_apply(&self.nodes[x.0].data, n, c, hw, running_mean, &invstd, gd, bd);
        let needs = self.ng(x)
            || gamma.map_or(false, |g| self.ng(g))
            || beta.map_or(false, |b| self.ng(b));
        self.push(
            "batchnorm_eval",
            xs,
            data,
            Op::BnEval { x, gamma, beta, mean: running_mean.to_vec(), invstd },
            needs,
        )
    }

    // ── shape / reduction ops ───────────────────────────────────────────

    pub fn concat_channels(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::arg("concat", "empty input list"));
        }
        let first = self.nodes[xs[0].0].shape.clone();
        if first.len() != 4 {
            return Err(Error::shape("concat", format!("want 4-d inputs, got {first:?}")));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut ctot = 0;
        for &x in xs {
            let s = &self.nodes[x.0].shape;
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::shape("concat", format!("{s:?} vs [{n}, _, {h}, {w}]")));
            }
            ctot += s[1];
        }
        let mut data = vec![0.0f32; n * ctot * h * w];
        let hw = h * w;
        for s in 0..n {
            let mut coff = 0;
            for &x in xs {
                let ci = self.nodes[x.0].shape[1];
                let src = &self.nodes[x.0].data[s * ci * hw..(s + 1) * ci * hw];
                data[(s * ctot + coff) * hw..(s * ctot + coff + ci) * hw].copy_from_slice(src);
                coff += ci;
            }
        }
        let needs = xs.iter().any(|&x| self.ng(x));
        self.push("concat", vec![n, ctot, h, w], data, Op::ConcatCh { xs: xs.to_vec() }, needs)
    }

    /// x[:, :, oy:, ox:] — used by the factorized-reduce shifted branch.
    pub fn crop_offset(&mut self, x: TensorId, oy: usize, ox: usize) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 || oy >= xs[2] || ox >= xs[3] {
            return Err(Error::shape("crop_offset", format!("{xs:?} offset ({oy},{ox})")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (nh, nw) = (h - oy, w - ox);
        let mut data = vec![0.0f32; n * c * nh * nw];
        for p in 0..n * c {
            for y in 0..nh {
                let src = &self.nodes[x.0].data[p * h * w + (y + oy) * w + ox..p * h * w + (y + oy) * w + ox + nw];
                data[p * nh * nw + y * nw..p * nh * nw + (y + 1) * nw].copy_from_slice(src);
            }
        }
        let needs = self.ng(x);
        self.push("crop_offset", vec![n, c, nh, nw], data, Op::CropOffset { x, oy, ox }, needs)
    }

    /// Global average pooling: [N,C,H,W] → [N,C].
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(Error::shape("gap", format!("want 4-d input, got {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut data = vec![0.0f32; n * c];
        for p in 0..n * c {
            let mut s = 0.0f32;
            for &v in &self.nodes[x.0].data[p * hw..(p + 1) * hw] {
                s += v;
            }
            data[p] = s / hw as f32;
        }
        let needs = self.ng(x);
        self.push("gap", vec![n, c], data, Op::Gap { x }, needs)
    }

    /// Mean over each group of channels: [N,C,H,W] → [N,G,H,W]. With G=1
    /// this is the channel-mean map D of Eq. 3.
    pub fn mean_groups(&mut self, x: TensorId, groups: usize) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 || groups == 0 || xs[1] % groups != 0 {
            return Err(Error::shape("mean_groups", format!("{xs:?} groups {groups}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let cpg = c / groups;
        let mut data = vec![0.0f32; n * groups * hw];
        for s in 0..n {
            for g in 0..groups {
                let dst = &mut data[(s * groups + g) * hw..(s * groups + g + 1) * hw];
                for ci in 0..cpg {
                    let src = &self.nodes[x.0].data
                        [(s * c + g * cpg + ci) * hw..(s * c + g * cpg + ci + 1) * hw];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
                for d in dst.iter_mut() {
                    *d /= cpg as f32;
                }
            }
        }
        let needs = self.ng(x);
        self.push("mean_groups", vec![n, groups, xs[2], xs[3]], data, Op::MeanGroups { x, groups }, needs)
    }

    /// Row means of an [r,c] matrix → [r]. Computes β from |W| rows.
    pub fn row_mean(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 2 || xs[1] == 0 {
            return Err(Error::shape("row_mean", format!("want [r,c>0], got {xs:?}")));
        }
        let (r, c) = (xs[0], xs[1]);
        let mut data = vec![0.0f32; r];
        for i in 0..r {
            let mut s = 0.0f32;
            for &v in &self.nodes[x.0].data[i * c..(i + 1) * c] {
                s += v;
            }
            data[i] = s / c as f32;
        }
        let needs = self.ng(x);
        self.push("row_mean", vec![r], data, Op::RowMean { x }, needs)
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.nodes[x.0].data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} → {shape:?}", self.nodes[x.0].shape),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.ng(x);
        self.push("reshape", shape, data, Op::Reshape { x }, needs)
    }

    /// Multiply each output channel by a per-channel scalar: x[N,C,H,W] ⊙ s[C].
    pub fn scale_channels(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        let ss = self.nodes[s.0].shape.clone();
        if xs.len() != 4 || ss != [xs[1]] {
            return Err(Error::shape("scale_channels", format!("{xs:?} ⊙ {ss:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut data = vec![0.0f32; n * c * hw];
        for si in 0..n {
            for ci in 0..c {
                let f = self.nodes[s.0].data[ci];
                let src = &self.nodes[x.0].data[(si * c + ci) * hw..(si * c + ci + 1) * hw];
                let dst = &mut data[(si * c + ci) * hw..(si * c + ci + 1) * hw];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v * f;
                }
            }
        }
        let needs = self.ng(x) || self.ng(s);
        self.push("scale_channels", xs, data, Op::ScaleChannels { x, s }, needs)
    }

    /// Broadcast multiply by a per-group spatial map: x[N,C,H,W] ⊙ m[N,G,H,W]
    /// where channel c uses map c / (C/G). With G=1 this is the K map of
    /// Eq. 3 applied to every output channel.
    pub fn mul_groups(&mut self, x: TensorId, m: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        let ms = self.nodes[m.0].shape.clone();
        if xs.len() != 4
            || ms.len() != 4
            || ms[0] != xs[0]
            || ms[2] != xs[2]
            || ms[3] != xs[3]
            || ms[1] == 0
            || xs[1] % ms[1] != 0
        {
            return Err(Error::shape("mul_groups", format!("{xs:?} ⊙ {ms:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let g = ms[1];
        let cpg = c / g;
        let mut data = vec![0.0f32; n * c * hw];
        for s in 0..n {
            for ci in 0..c {
                let gi = ci / cpg;
                let map = &self.nodes[m.0].data[(s * g + gi) * hw..(s * g + gi + 1) * hw];
                let src = &self.nodes[x.0].data[(s * c + ci) * hw..(s * c + ci + 1) * hw];
                let dst = &mut data[(s * c + ci) * hw..(s * c + ci + 1) * hw];
                for ((d, &v), &f) in dst.iter_mut().zip(src).zip(map) {
                    *d = v * f;
                }
            }
        }
        let needs = self.ng(x) || self.ng(m);
        self.push("mul_groups", xs, data, Op::MulGroups { x, m }, needs)
    }

    /// Select one element of a tensor as a scalar [1] node (arch-weight
    /// lookup); backward scatters into that coordinate.
    pub fn pick(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        if index >= self.nodes[x.0].data.len() {
            return Err(Error::arg("pick", format!("index {index} out of {}", self.nodes[x.0].data.len())));
        }
        let v = self.nodes[x.0].data[index];
        let needs = self.ng(x);
        self.push("pick", vec![1], vec![v], Op::Pick { x, index }, needs)
    }

    /// Broadcast multiply by a scalar [1] node.
    pub fn mul_scalar_t(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::shape("mul_scalar_t", format!("scalar operand has shape {:?}", self.nodes[s.0].shape)));
        }
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f32> = self.nodes[x.0].data.iter().map(|&v| v * sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.ng(x) || self.ng(s);
        self.push("mul_scalar_t", shape, data, Op::MulScalarT { x, s }, needs)
    }

    // ── softmax / loss ──────────────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 2 {
            return Err(Error::shape("softmax", format!("want [r,c], got {xs:?}")));
        }
        let data = k::softmax_rows(&self.nodes[x.0].data, xs[0], xs[1]);
        let needs = self.ng(x);
        self.push("softmax", xs, data, Op::SoftmaxRows { x }, needs)
    }

    pub fn log_softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 2 {
            return Err(Error::shape("log_softmax", format!("want [r,c], got {xs:?}")));
        }
        let data = k::log_softmax_rows(&self.nodes[x.0].data, xs[0], xs[1]);
        let needs = self.ng(x);
        self.push("log_softmax", xs, data, Op::LogSoftmaxRows { x }, needs)
    }

    /// Mean cross-entropy of logits [N,K] against integer labels.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[u32]) -> Result<TensorId> {
        let xs = self.nodes[logits.0].shape.clone();
        if xs.len() != 2 || xs[0] != labels.len() || xs[0] == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {xs:?} vs {} labels", labels.len()),
            ));
        }
        let (n, kk) = (xs[0], xs[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= kk) {
            return Err(Error::arg("cross_entropy", format!("label {bad} out of range (< {kk})")));
        }
        let lsm = k::log_softmax_rows(&self.nodes[logits.0].data, n, kk);
        let mut acc = 0.0f64;
        for (i, &l) in labels.iter().enumerate() {
            acc -= lsm[i * kk + l as usize] as f64;
        }
        let loss = (acc / n as f64) as f32;
        let probs: Vec<f32> = lsm.iter().map(|&v| v.exp()).collect();
        let needs = self.ng(logits);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            needs,
        )
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.nodes[x.0].data.iter().map(|&v| v as f64).sum::<f64>() as f32;
        let needs = self.ng(x);
        self.push("sum", vec![1], vec![s], Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let len = self.nodes[x.0].data.len().max(1);
        let s = (self.nodes[x.0].data.iter().map(|&v| v as f64).sum::<f64>() / len as f64) as f32;
        let needs = self.ng(x);
        self.push("mean", vec![1], vec![s], Op::Mean { x }, needs)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate
    /// into `store`; returned [`Grads`] carries gradients of every
    /// grad-requiring leaf (zeros when unused by the loss).
    pub fn backward(&mut self, loss: TensorId, store: &mut ParamStore) -> Result<Grads> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::arg("backward", format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape)));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads, store);
            if matches!(self.nodes[idx].op, Op::Leaf { .. }) {
                grads[idx] = Some(g);
            }
        }
        // Unused grad-requiring leaves report exact zeros.
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf { .. }) && node.needs_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(Grads { vals: grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f32>>], id: TensorId, contrib: &[f32]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].data.len()]);
        for (a, &b) in slot.iter_mut().zip(contrib) {
            *a += b;
        }
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
        store: &mut ParamStore,
    ) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { param } => {
                if let Some(pid) = param {
                    store.accumulate_grad(*pid, g);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                if self.nodes[b.0].needs_grad {
                    let neg: Vec<f32> = g.iter().map(|&v| -v).collect();
                    self.acc(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let da: Vec<f32> =
                        g.iter().zip(&self.nodes[b.0].data).map(|(&gv, &bv)| gv * bv).collect();
                    self.acc(grads, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let db: Vec<f32> =
                        g.iter().zip(&self.nodes[a.0].data).map(|(&gv, &av)| gv * av).collect();
                    self.acc(grads, *b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f32> = g.iter().map(|&v| v * c).collect();
                self.acc(grads, *a, &da);
            }
            Op::Abs(a) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &x)| if x > 0.0 { gv } else if x < 0.0 { -gv } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::SignSte(a) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &x)| if x.abs() <= 1.0 { gv } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Matmul { a, b } => {
                let (m, kk) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0f32; m * kk];
                    k::matmul_nt_acc(g, &self.nodes[b.0].data, m, n, kk, &mut da);
                    self.acc(grads, *a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0f32; kk * n];
                    k::matmul_tn_acc(&self.nodes[a.0].data, g, m, kk, n, &mut db);
                    self.acc(grads, *b, &db);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, kk) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let n = self.nodes[w.0].shape[0];
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0f32; m * kk];
                    k::matmul_acc(g, &self.nodes[w.0].data, m, n, kk, &mut dx);
                    self.acc(grads, *x, &dx);
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0f32; n * kk];
                    k::matmul_tn_acc(g, &self.nodes[x.0].data, m, n, kk, &mut dw);
                    self.acc(grads, *w, &dw);
                }
                if let Some(bi) = b {
                    if self.nodes[bi.0].needs_grad {
                        let mut db = vec![0.0f32; n];
                        for r in 0..m {
                            for c in 0..n {
                                db[c] += g[r * n + c];
                            }
                        }
                        self.acc(grads, *bi, &db);
                    }
                }
            }
            Op::Conv2d { x, w, spec } => {
                let (dx, dw) = k::conv2d_backward(
                    &self.nodes[x.0].data,
                    &self.nodes[x.0].shape,
                    &self.nodes[w.0].data,
                    &self.nodes[w.0].shape,
                    spec,
                    g,
                )
                .expect("conv2d backward shapes were validated on forward");
                self.acc(grads, *x, &dx);
                self.acc(grads, *w, &dw);
            }
            Op::MaxPool3 { x, stride, arg } => {
                let dx = k::maxpool3_backward(arg, g, &self.nodes[x.0].shape, *stride);
                self.acc(grads, *x, &dx);
            }
            Op::AvgPool3 { x, stride } => {
                let dx = k::avgpool3_backward(g, &self.nodes[x.0].shape, *stride);
                self.acc(grads, *x, &dx);
            }
            Op::BnTrain { x, gamma, beta, mean, invstd } => {
                self.bn_backward(idx, *x, *gamma, *beta, mean, invstd, true, g, grads);
            }
            Op::BnEval { x, gamma, beta, mean, invstd } => {
                self.bn_backward(idx, *x, *gamma, *beta, mean, invstd, false, g, grads);
            }
            Op::ConcatCh { xs } => {
                let shape = &node.shape;
                let (n, ctot, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut coff = 0;
                for &xid in xs {
                    let ci = self.nodes[xid.0].shape[1];
                    if self.nodes[xid.0].needs_grad {
                        let mut dx = vec![0.0f32; n * ci * hw];
                        for s in 0..n {
                            let src = &g[(s * ctot + coff) * hw..(s * ctot + coff + ci) * hw];
                            dx[s * ci * hw..(s + 1) * ci * hw].copy_from_slice(src);
                        }
                        self.acc(grads, xid, &dx);
                    }
                    coff += ci;
                }
            }
            Op::CropOffset { x, oy, ox } => {
                let xs = &self.nodes[x.0].shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (nh, nw) = (h - oy, w - ox);
                let mut dx = vec![0.0f32; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..nh {
                        let src = &g[p * nh * nw + y * nw..p * nh * nw + (y + 1) * nw];
                        let dst = &mut dx[p * h * w + (y + oy) * w + ox..p * h * w + (y + oy) * w + ox + nw];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::Gap { x } => {
                let xs = &self.nodes[x.0].shape;
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut dx = vec![0.0f32; n * c * hw];
                for p in 0..n * c {
                    let gv = g[p] / hw as f32;
                    for d in &mut dx[p * hw..(p + 1) * hw] {
                        *d = gv;
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::MeanGroups { x, groups } => {
                let xs = &self.nodes[x.0].shape;
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let cpg = c / groups;
                let mut dx = vec![0.0f32; n * c * hw];
                for s in 0..n {
                    for ci in 0..c {
                        let gi = ci / cpg;
                        let src = &g[(s * groups + gi) * hw..(s * groups + gi + 1) * hw];
                        let dst = &mut dx[(s * c + ci) * hw..(s * c + ci + 1) * hw];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = v / cpg as f32;
                        }
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::RowMean { x } => {
                let xs = &self.nodes[x.0].shape;
                let (r, c) = (xs[0], xs[1]);
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    let gv = g[i] / c as f32;
                    for d in &mut dx[i * c..(i + 1) * c] {
                        *d = gv;
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::Reshape { x } => {
                self.acc(grads, *x, g);
            }
            Op::ScaleChannels { x, s } => {
                let xs = &self.nodes[x.0].shape;
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0f32; n * c * hw];
                    for si in 0..n {
                        for ci in 0..c {
                            let f = self.nodes[s.0].data[ci];
                            let src = &g[(si * c + ci) * hw..(si * c + ci + 1) * hw];
                            let dst = &mut dx[(si * c + ci) * hw..(si * c + ci + 1) * hw];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = v * f;
                            }
                        }
                    }
                    self.acc(grads, *x, &dx);
                }
                if self.nodes[s.0].needs_grad {
                    let mut ds = vec![0.0f32; c];
                    for si in 0..n {
                        for ci in 0..c {
                            let gv = &g[(si * c + ci) * hw..(si * c + ci + 1) * hw];
                            let xv = &self.nodes[x.0].data[(si * c + ci) * hw..(si * c + ci + 1) * hw];
                            let mut acc = 0.0f32;
                            for (&a, &b) in gv.iter().zip(xv) {
                                acc += a * b;
                            }
                            ds[ci] += acc;
                        }
                    }
                    self.acc(grads, *s, &ds);
                }
            }
            Op::MulGroups { x, m } => {
                let xs = &self.nodes[x.0].shape;
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let gr = self.nodes[m.0].shape[1];
                let cpg = c / gr;
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0f32; n * c * hw];
                    for s in 0..n {
                        for ci in 0..c {
                            let gi = ci / cpg;
                            let map = &self.nodes[m.0].data[(s * gr + gi) * hw..(s * gr + gi + 1) * hw];
                            let src = &g[(s * c + ci) * hw..(s * c + ci + 1) * hw];
                            let dst = &mut dx[(s * c + ci) * hw..(s * c + ci + 1) * hw];
                            for ((d, &v), &f) in dst.iter_mut().zip(src).zip(map) {
                                *d = v * f;
                            }
                        }
                    }
                    self.acc(grads, *x, &dx);
                }
                if self.nodes[m.0].needs_grad {
                    let mut dm = vec![0.0f32; n * gr * hw];
                    for s in 0..n {
                        for ci in 0..c {
                            let gi = ci / cpg;
                            let src = &g[(s * c + ci) * hw..(s * c + ci + 1) * hw];
                            let xv = &self.nodes[x.0].data[(s * c + ci) * hw..(s * c + ci + 1) * hw];
                            let dst = &mut dm[(s * gr + gi) * hw..(s * gr + gi + 1) * hw];
                            for ((d, &a), &b) in dst.iter_mut().zip(src).zip(xv) {
                                *d += a * b;
                            }
                        }
                    }
                    self.acc(grads, *m, &dm);
                }
            }
            Op::Pick { x, index } => {
                let mut dx = vec![0.0f32; self.nodes[x.0].data.len()];
                dx[*index] = g[0];
                self.acc(grads, *x, &dx);
            }
            Op::MulScalarT { x, s } => {
                let sv = self.nodes[s.0].data[0];
                if self.nodes[x.0].needs_grad {
                    let dx: Vec<f32> = g.iter().map(|&v| v * sv).collect();
                    self.acc(grads, *x, &dx);
                }
                if self.nodes[s.0].needs_grad {
                    let ds: f32 = g.iter().zip(&self.nodes[x.0].data).map(|(&a, &b)| a * b).sum();
                    self.acc(grads, *s, &[ds]);
                }
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let p = &node.data;
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    let mut dot = 0.0f32;
                    for j in 0..c {
                        dot += g[i * c + j] * p[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = p[i * c + j] * (g[i * c + j] - dot);
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::LogSoftmaxRows { x } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    let mut s = 0.0f32;
                    for j in 0..c {
                        s += g[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = g[i * c + j] - node.data[i * c + j].exp() * s;
                    }
                }
                self.acc(grads, *x, &dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let kk = self.nodes[logits.0].shape[1];
                let n = labels.len();
                let scale = g[0] / n as f32;
                let mut dl = vec![0.0f32; n * kk];
                for (i, &l) in labels.iter().enumerate() {
                    for j in 0..kk {
                        let onehot = if j == l as usize { 1.0 } else { 0.0 };
                        dl[i * kk + j] = (probs[i * kk + j] - onehot) * scale;
                    }
                }
                self.acc(grads, *logits, &dl);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.nodes[x.0].data.len()];
                self.acc(grads, *x, &dx);
            }
            Op::Mean { x } => {
                let len = self.nodes[x.0].data.len().max(1);
                let dx = vec![g[0] / len as f32; self.nodes[x.0].data.len()];
                self.acc(grads, *x, &dx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        idx: usize,
        x: TensorId,
        gamma: Option<TensorId>,
        beta: Option<TensorId>,
        mean: &[f32],
        invstd: &[f32],
        train: bool,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let xs = &self.nodes[x.0].shape;
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let m = (n * hw) as f32;
        let xd = &self.nodes[x.0].data;
        let _ = idx;
        // Per-channel sums of dy and dy·xhat feed all three gradients.
        let mut sum_dy = vec![0.0f32; c];
        let mut sum_dyxh = vec![0.0f32; c];
        for s in 0..n {
            for ci in 0..c {
                let base = (s * c + ci) * hw;
                let mut a = 0.0f32;
                let mut b = 0.0f32;
                for i in 0..hw {
                    let xh = (xd[base + i] - mean[ci]) * invstd[ci];
                    a += g[base + i];
                    b += g[base + i] * xh;
                }
                sum_dy[ci] += a;
                sum_dyxh[ci] += b;
            }
        }
        if let Some(gi) = gamma {
            if self.nodes[gi.0].needs_grad {
                self.acc(grads, gi, &sum_dyxh);
            }
        }
        if let Some(bi) = beta {
            if self.nodes[bi.0].needs_grad {
                self.acc(grads, bi, &sum_dy);
            }
        }
        if self.nodes[x.0].needs_grad {
            let gd = gamma.map(|g2| self.nodes[g2.0].data.as_slice());
            let mut dx = vec![0.0f32; xd.len()];
            for s in 0..n {
                for ci in 0..c {
                    let base = (s * c + ci) * hw;
                    let gam = gd.map_or(1.0, |v| v[ci]);
                    if train {
                        let k1 = sum_dy[ci] / m;
                        let k2 = sum_dyxh[ci] / m;
                        for i in 0..hw {
                            let xh = (xd[base + i] - mean[ci]) * invstd[ci];
                            dx[base + i] = gam * invstd[ci] * (g[base + i] - k1 - xh * k2);
                        }
                    } else {
                        for i in 0..hw {
                            dx[base + i] = gam * invstd[ci] * g[base + i];
                        }
                    }
                }
            }
            self.acc(grads, x, &dx);
        }
    }
}
