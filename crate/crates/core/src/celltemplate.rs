//! The binary cell template T_B: DARTS-style DAG cells (2 inputs, 4
//! intermediate nodes, channel-concat output) extended with inter-cell skip
//! connections, in both continuous (supercell) and discrete forms, plus the
//! genotype record that discretization produces.
//!
//! Node/source indexing convention used everywhere: source 0 is c_(k-2),
//! source 1 is c_(k-1), source 2+j is intermediate node j. Edges are listed
//! node-major with ascending source, giving the canonical edge order
//! shared by arch logits, genotypes and cost accounting.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binarize::{binconv_apply, BinConvParams, BinConvRunner};
use crate::ndtensor::{
    kernels, BatchNorm2d, Conv2dLayer, ConvSpec, ParamGroup, ParamId, ParamStore, Tape, Tensor, TensorId,
};
use crate::searchspace::{out_extent, LayerType, OpBlock};
use crate::{Error, Result};

pub const NUM_NODES: usize = 4;
pub const NUM_EDGES: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Normal,
    Reduction,
}

/// Fixed skeleton facts for one cell kind.
#[derive(Debug, Clone, Copy)]
pub struct CellSpec {
    pub kind: CellKind,
    pub num_nodes: usize,
}

impl CellSpec {
    pub fn new(kind: CellKind) -> Self {
        CellSpec { kind, num_nodes: NUM_NODES }
    }

    /// Stride applied by ops on an edge from `src`: reduction cells stride
    /// only the edges sourced at the two cell inputs.
    pub fn edge_stride(&self, src: usize) -> usize {
        if self.kind == CellKind::Reduction && src < 2 {
            2
        } else {
            1
        }
    }
}

/// All `(source, node)` pairs in canonical order; `len() == NUM_EDGES`.
pub fn edge_list() -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(NUM_EDGES);
    for node in 0..NUM_NODES {
        for src in 0..node + 2 {
            edges.push((src, node));
        }
    }
    edges
}

/// Continuous architecture parameters: one logits row per edge, one column
/// per candidate op, shared across all cells of the same kind.
pub struct ArchParams {
    pub normal: ParamId,
    pub reduce: ParamId,
    pub num_ops: usize,
}

impl ArchParams {
    /// Logits start at zero: softmax is exactly uniform at t = 0.
    pub fn new(store: &mut ParamStore, num_ops: usize) -> Result<Self> {
        if num_ops == 0 {
            return Err(Error::arg("arch_params", "empty op space"));
        }
        let z = vec![0.0f32; NUM_EDGES * num_ops];
        let normal = store.add("arch.normal", vec![NUM_EDGES, num_ops], z.clone(), ParamGroup::Arch)?;
        let reduce = store.add("arch.reduce", vec![NUM_EDGES, num_ops], z, ParamGroup::Arch)?;
        Ok(ArchParams { normal, reduce, num_ops })
    }

    pub fn logits(&self, kind: CellKind) -> ParamId {
        match kind {
            CellKind::Normal => self.normal,
            CellKind::Reduction => self.reduce,
        }
    }

    /// Host-side softmax over the op axis, row per edge.
    pub fn probs(&self, store: &ParamStore, kind: CellKind) -> Vec<f32> {
        let logits = &store.get(self.logits(kind)).data;
        kernels::softmax_rows(logits, NUM_EDGES, self.num_ops)
    }
}

pub const GENOTYPE_VERSION: u32 = 1;

/// Discrete search outcome: per cell kind, the two retained (source, op)
/// pairs of every intermediate node, node-major, sources ascending.
///
/// Serialized as UTF-8 JSON with a stable field order so identical searches
/// export byte-identical files. `gamma` may be infinite (the No-Zeroise
/// ablation) and is encoded as the string "inf" in that case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub version: u32,
    pub normal: Vec<(usize, LayerType)>,
    pub reduce: Vec<(usize, LayerType)>,
    #[serde(with = "gamma_codec")]
    pub gamma: f64,
    pub seed: u64,
}

mod gamma_codec {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    struct GammaVisitor;

    impl Visitor<'_> for GammaVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a number or the string \"inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<f64, E> {
            Ok(v)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<f64, E> {
            match v {
                "inf" | "infinity" => Ok(f64::INFINITY),
                other => other.parse().map_err(|_| E::custom(format!("bad gamma {other:?}"))),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        d.deserialize_any(GammaVisitor)
    }
}

impl Genotype {
    /// Every node fed by sources 0 and 1 with the same op; test and
    /// baseline fixture.
    pub fn single_op(op: LayerType, gamma: f64, seed: u64) -> Self {
        let pairs: Vec<(usize, LayerType)> = (0..NUM_NODES).flat_map(|_| [(0, op), (1, op)]).collect();
        Genotype { version: GENOTYPE_VERSION, normal: pairs.clone(), reduce: pairs, gamma, seed }
    }

    /// The retained `[(src, op); 2]` pairs of one node.
    pub fn node(&self, kind: CellKind, node: usize) -> [(usize, LayerType); 2] {
        let list = match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduce,
        };
        [list[2 * node], list[2 * node + 1]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != GENOTYPE_VERSION {
            return Err(Error::arg("genotype", format!("unsupported version {}", self.version)));
        }
        if !(self.gamma >= 1.0) {
            return Err(Error::arg("genotype", format!("gamma {} out of range [1, inf]", self.gamma)));
        }
        for (kind, list) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            if list.len() != 2 * NUM_NODES {
                return Err(Error::arg("genotype", format!("{kind} cell has {} pairs, want {}", list.len(), 2 * NUM_NODES)));
            }
            for node in 0..NUM_NODES {
                let (s0, _) = list[2 * node];
                let (s1, _) = list[2 * node + 1];
                if s0 >= node + 2 || s1 >= node + 2 {
                    return Err(Error::arg(
                        "genotype",
                        format!("{kind} node {node} references out-of-range source {}", s0.max(s1)),
                    ));
                }
                if s0 == s1 {
                    return Err(Error::arg("genotype", format!("{kind} node {node} repeats source {s0}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format { path: "<genotype>".into(), detail: e.to_string() })?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let geno: Genotype = serde_json::from_str(&text)
            .map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?;
        geno.validate()?;
        Ok(geno)
    }
}

/// Input preprocessing: map a cell input to node width. The 1x1 blocks are
/// binary convs; the factorized reduce (spatial mismatch after a reduction
/// cell) stays float, DARTS-style.
enum Preprocess {
    Bin(PreBlock),
    Fact(FactorizedReduce),
}

impl Preprocess {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        reduce_spatial: bool,
        affine: bool,
    ) -> Result<Self> {
        if reduce_spatial {
            Ok(Preprocess::Fact(FactorizedReduce::new(store, rng, prefix, in_ch, out_ch, affine)?))
        } else {
            Ok(Preprocess::Bin(PreBlock::new(store, rng, prefix, in_ch, out_ch, affine)?))
        }
    }

    fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: TensorId, training: bool) -> Result<TensorId> {
        match self {
            Preprocess::Bin(p) => p.forward(tape, store, x, training),
            Preprocess::Fact(f) => f.forward(tape, store, x, training),
        }
    }

    fn infer(&self, store: &ParamStore, x: &Tensor, runner: &dyn BinConvRunner) -> Result<Tensor> {
        match self {
            Preprocess::Bin(p) => p.infer(store, x, runner),
            Preprocess::Fact(f) => f.infer(store, x),
        }
    }

    fn bin_convs(&self) -> Vec<&BinConvParams> {
        match self {
            Preprocess::Bin(p) => vec![&p.conv],
            Preprocess::Fact(_) => Vec::new(),
        }
    }
}

/// `[batchnorm -> 1x1 binconv]`, the binary channel projection.
pub struct PreBlock {
    bn: BatchNorm2d,
    conv: BinConvParams,
}

impl PreBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        affine: bool,
    ) -> Result<Self> {
        Ok(PreBlock {
            bn: BatchNorm2d::new(store, &format!("{prefix}.bn"), in_ch, affine)?,
            conv: BinConvParams::new(store, &format!("{prefix}.wbin"), out_ch, in_ch, 1, 1, ConvSpec::plain(1, 0), rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: TensorId, training: bool) -> Result<TensorId> {
        let normed = self.bn.forward(tape, store, x, training)?;
        binconv_apply(tape, store, normed, &self.conv)
    }

    pub fn infer(&self, store: &ParamStore, x: &Tensor, runner: &dyn BinConvRunner) -> Result<Tensor> {
        let normed = self.bn.infer(store, x)?;
        runner.run(store, &self.conv, &normed)
    }
}

/// DARTS factorized reduce: relu, then two stride-2 1x1 float convs (the
/// second on the input shifted by one pixel), channel-concatenated and
/// normalized. Requires even spatial extents.
pub struct FactorizedReduce {
    conv_a: Conv2dLayer,
    conv_b: Conv2dLayer,
    bn: BatchNorm2d,
    out_a: usize,
}

impl FactorizedReduce {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        affine: bool,
    ) -> Result<Self> {
        if out_ch < 2 {
            return Err(Error::arg("factorized_reduce", "needs at least 2 output channels"));
        }
        let out_a = (out_ch + 1) / 2;
        let spec = ConvSpec { stride: 2, dilation: 1, padding: 0, groups: 1 };
        Ok(FactorizedReduce {
            conv_a: Conv2dLayer::new(store, rng, &format!("{prefix}.fr_a"), in_ch, out_a, 1, spec)?,
            conv_b: Conv2dLayer::new(store, rng, &format!("{prefix}.fr_b"), in_ch, out_ch - out_a, 1, spec)?,
            bn: BatchNorm2d::new(store, &format!("{prefix}.bn"), out_ch, affine)?,
            out_a,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: TensorId, training: bool) -> Result<TensorId> {
        let xs = tape.shape(x).to_vec();
        if xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(Error::shape("factorized_reduce", format!("odd spatial extent {xs:?}")));
        }
        let r = tape.relu(x)?;
        let a = self.conv_a.forward(tape, store, r)?;
        let shifted = tape.crop_offset(r, 1, 1)?;
        let b = self.conv_b.forward(tape, store, shifted)?;
        let cat = tape.concat_channels(&[a, b])?;
        self.bn.forward(tape, store, cat, training)
    }

    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.shape[2] % 2 != 0 || x.shape[3] % 2 != 0 {
            return Err(Error::shape("factorized_reduce", format!("odd spatial extent {:?}", x.shape)));
        }
        let r = Tensor::new(x.shape.clone(), x.data.iter().map(|&v| v.max(0.0)).collect())?;
        let a = self.conv_a.infer(store, &r)?;
        let b = self.conv_b.infer(store, &crop11(&r))?;
        self.bn.infer(store, &cat_channels(&[&a, &b]))
    }

    pub fn split(&self) -> usize {
        self.out_a
    }
}

/// Inter-cell skip connection from c_(k-1) to the cell output. Identity
/// when widths match; reductions avgpool (stride 2) then project with a
/// float 1x1 conv. These shortcuts are what carries gradient across cells
/// once the binary edges saturate.
pub enum SkipPath {
    Disabled,
    Identity,
    Project(Conv2dLayer),
    Reduce(Conv2dLayer),
}

impl SkipPath {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        reduction: bool,
        enabled: bool,
    ) -> Result<Self> {
        if !enabled {
            return Ok(SkipPath::Disabled);
        }
        let proj_name = format!("{prefix}.proj");
        if reduction {
            Ok(SkipPath::Reduce(Conv2dLayer::new(store, rng, &proj_name, in_ch, out_ch, 1, ConvSpec::plain(1, 0))?))
        } else if in_ch == out_ch {
            Ok(SkipPath::Identity)
        } else {
            Ok(SkipPath::Project(Conv2dLayer::new(store, rng, &proj_name, in_ch, out_ch, 1, ConvSpec::plain(1, 0))?))
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: TensorId) -> Result<Option<TensorId>> {
        match self {
            SkipPath::Disabled => Ok(None),
            SkipPath::Identity => Ok(Some(x)),
            SkipPath::Project(conv) => Ok(Some(conv.forward(tape, store, x)?)),
            SkipPath::Reduce(conv) => {
                let pooled = tape.avgpool3(x, 2)?;
                Ok(Some(conv.forward(tape, store, pooled)?))
            }
        }
    }

    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Option<Tensor>> {
        match self {
            SkipPath::Disabled => Ok(None),
            SkipPath::Identity => Ok(Some(x.clone())),
            SkipPath::Project(conv) => Ok(Some(conv.infer(store, x)?)),
            SkipPath::Reduce(conv) => {
                let (data, shape) = kernels::avgpool3(&x.data, &x.shape, 2)?;
                Ok(Some(conv.infer(store, &Tensor::new(shape, data)?)?))
            }
        }
    }
}

/// Continuous-relaxation cell: every edge carries every candidate op,
/// mixed by the softmaxed arch logits row of that edge.
pub struct SuperCell {
    pub spec: CellSpec,
    pub node_ch: usize,
    pub out_ch: usize,
    pre0: Preprocess,
    pre1: Preprocess,
    edges: Vec<Vec<OpBlock>>,
    skip: SkipPath,
    num_ops: usize,
}

impl SuperCell {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        space: &[LayerType],
        kind: CellKind,
        c_pp: usize,
        c_p: usize,
        node_ch: usize,
        pp_reduced: bool,
        skip_enabled: bool,
    ) -> Result<Self> {
        let spec = CellSpec::new(kind);
        let out_ch = NUM_NODES * node_ch;
        let pre0 = Preprocess::new(store, rng, &format!("{prefix}.pre0"), c_pp, node_ch, pp_reduced, false)?;
        let pre1 = Preprocess::new(store, rng, &format!("{prefix}.pre1"), c_p, node_ch, false, false)?;
        let mut edges = Vec::with_capacity(NUM_EDGES);
        for (ei, (src, _node)) in edge_list().into_iter().enumerate() {
            let stride = spec.edge_stride(src);
            let mut ops = Vec::with_capacity(space.len());
            for &op in space {
                ops.push(OpBlock::new(
                    store,
                    rng,
                    &format!("{prefix}.e{ei}.{}", op.name()),
                    op,
                    node_ch,
                    node_ch,
                    stride,
                    false,
                )?);
            }
            edges.push(ops);
        }
        let skip = SkipPath::new(
            store,
            rng,
            &format!("{prefix}.skip"),
            c_p,
            out_ch,
            kind == CellKind::Reduction,
            skip_enabled,
        )?;
        Ok(SuperCell { spec, node_ch, out_ch, pre0, pre1, edges, skip, num_ops: space.len() })
    }

    /// `probs` is the softmaxed `[NUM_EDGES, num_ops]` tape tensor for this
    /// cell's kind. Zeroise columns are skipped outright: their output and
    /// their gradient contribution are both exactly zero.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        s0: TensorId,
        s1: TensorId,
        probs: TensorId,
        training: bool,
    ) -> Result<TensorId> {
        if tape.shape(probs) != [NUM_EDGES, self.num_ops] {
            return Err(Error::shape(
                "supercell",
                format!("probs {:?}, want [{NUM_EDGES}, {}]", tape.shape(probs), self.num_ops),
            ));
        }
        let x0 = self.pre0.forward(tape, store, s0, training)?;
        let x1 = self.pre1.forward(tape, store, s1, training)?;
        let mut states = vec![x0, x1];
        let mut ei = 0usize;
        for node in 0..NUM_NODES {
            let mut acc: Option<TensorId> = None;
            for src in 0..node + 2 {
                let row = &self.edges[ei];
                for (oi, block) in row.iter().enumerate() {
                    if block.layer == LayerType::Zeroise {
                        continue;
                    }
                    let out = block.apply(tape, store, states[src], training)?;
                    let w = tape.pick(probs, ei * self.num_ops + oi)?;
                    let scaled = tape.mul_scalar_t(out, w)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, scaled)?,
                        None => scaled,
                    });
                }
                ei += 1;
            }
            let value = match acc {
                Some(a) => a,
                // only reachable when the space is pure Zeroise
                None => {
                    let st = tape.shape(states[0]).to_vec();
                    let stride = self.spec.edge_stride(0);
                    let (oh, ow) = (out_extent(st[2], stride), out_extent(st[3], stride));
                    tape.zeros(vec![st[0], self.node_ch, oh, ow])?
                }
            };
            states.push(value);
        }
        let body = tape.concat_channels(&states[2..])?;
        match self.skip.forward(tape, store, s1)? {
            Some(sk) => tape.add(body, sk),
            None => Ok(body),
        }
    }
}

/// Discrete cell realized from a genotype: exactly two retained ops per
/// node, everything else absent.
pub struct DiscreteCell {
    pub spec: CellSpec,
    pub node_ch: usize,
    pub out_ch: usize,
    pre0: Preprocess,
    pre1: Preprocess,
    ops: Vec<(usize, OpBlock)>,
    skip: SkipPath,
}

impl DiscreteCell {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        geno: &Genotype,
        kind: CellKind,
        c_pp: usize,
        c_p: usize,
        node_ch: usize,
        pp_reduced: bool,
        skip_enabled: bool,
    ) -> Result<Self> {
        geno.validate()?;
        let spec = CellSpec::new(kind);
        let out_ch = NUM_NODES * node_ch;
        let pre0 = Preprocess::new(store, rng, &format!("{prefix}.pre0"), c_pp, node_ch, pp_reduced, true)?;
        let pre1 = Preprocess::new(store, rng, &format!("{prefix}.pre1"), c_p, node_ch, false, true)?;
        let mut ops = Vec::with_capacity(2 * NUM_NODES);
        for node in 0..NUM_NODES {
            for (slot, (src, op)) in geno.node(kind, node).into_iter().enumerate() {
                let stride = spec.edge_stride(src);
                let block = OpBlock::new(
                    store,
                    rng,
                    &format!("{prefix}.n{node}.s{slot}.{}", op.name()),
                    op,
                    node_ch,
                    node_ch,
                    stride,
                    true,
                )?;
                ops.push((src, block));
            }
        }
        let skip = SkipPath::new(
            store,
            rng,
            &format!("{prefix}.skip"),
            c_p,
            out_ch,
            kind == CellKind::Reduction,
            skip_enabled,
        )?;
        Ok(DiscreteCell { spec, node_ch, out_ch, pre0, pre1, ops, skip })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        s0: TensorId,
        s1: TensorId,
        training: bool,
    ) -> Result<TensorId> {
        let x0 = self.pre0.forward(tape, store, s0, training)?;
        let x1 = self.pre1.forward(tape, store, s1, training)?;
        let mut states = vec![x0, x1];
        for node in 0..NUM_NODES {
            let (src_a, block_a) = &self.ops[2 * node];
            let (src_b, block_b) = &self.ops[2 * node + 1];
            let a = block_a.apply(tape, store, states[*src_a], training)?;
            let b = block_b.apply(tape, store, states[*src_b], training)?;
            states.push(tape.add(a, b)?);
        }
        let body = tape.concat_channels(&states[2..])?;
        match self.skip.forward(tape, store, s1)? {
            Some(sk) => tape.add(body, sk),
            None => Ok(body),
        }
    }

    /// Tape-free eval forward; binconvs are dispatched through `runner`.
    pub fn infer(&self, store: &ParamStore, s0: &Tensor, s1: &Tensor, runner: &dyn BinConvRunner) -> Result<Tensor> {
        let x0 = self.pre0.infer(store, s0, runner)?;
        let x1 = self.pre1.infer(store, s1, runner)?;
        let mut states = vec![x0, x1];
        for node in 0..NUM_NODES {
            let (src_a, block_a) = &self.ops[2 * node];
            let (src_b, block_b) = &self.ops[2 * node + 1];
            let a = block_a.infer(store, &states[*src_a], runner)?;
            let b = block_b.infer(store, &states[*src_b], runner)?;
            let sum = Tensor::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect())?;
            states.push(sum);
        }
        let body = cat_channels(&states[2..].iter().collect::<Vec<_>>());
        match self.skip.infer(store, s1)? {
            Some(sk) => {
                Tensor::new(body.shape.clone(), body.data.iter().zip(&sk.data).map(|(&x, &y)| x + y).collect())
            }
            None => Ok(body),
        }
    }

    /// Every binary convolution of the cell, for packing at deploy time.
    pub fn bin_convs(&self) -> Vec<&BinConvParams> {
        let mut v = self.pre0.bin_convs();
        v.extend(self.pre1.bin_convs());
        for (_, block) in &self.ops {
            v.extend(block.bin_convs());
        }
        v
    }
}

/// Channel bookkeeping for a stack of `num_cells` cells with reductions at
/// floor(N/3) and floor(2N/3). The stem feeds the first cell as both
/// c_(k-2) and c_(k-1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellLayout {
    pub kind: CellKind,
    pub c_pp: usize,
    pub c_p: usize,
    pub node_ch: usize,
    /// Whether c_(k-1) came out of a reduction cell, i.e. c_(k-2) needs a
    /// spatial downsample in preprocessing.
    pub pp_reduced: bool,
}

pub fn reduction_positions(num_cells: usize) -> (usize, usize) {
    (num_cells / 3, 2 * num_cells / 3)
}

pub fn stack_layout(num_cells: usize, init_channels: usize) -> Result<Vec<CellLayout>> {
    stack_layout_from_stem(num_cells, init_channels, init_channels)
}

/// Like [`stack_layout`] but with a stem whose output width differs from
/// `init_channels` (the grouped stem doubles it); only the first two cell
/// inputs see the stem width.
pub fn stack_layout_from_stem(
    num_cells: usize,
    init_channels: usize,
    stem_channels: usize,
) -> Result<Vec<CellLayout>> {
    if num_cells < 3 {
        return Err(Error::arg("stack_layout", format!("{num_cells} cells, need >= 3 for two reductions")));
    }
    if init_channels % 4 != 0 || init_channels == 0 {
        return Err(Error::arg("stack_layout", format!("init_channels {init_channels} must be a positive multiple of 4")));
    }
    if stem_channels == 0 {
        return Err(Error::arg("stack_layout", "stem_channels must be positive".to_string()));
    }
    let (r1, r2) = reduction_positions(num_cells);
    let mut layouts = Vec::with_capacity(num_cells);
    let (mut c_pp, mut c_p) = (stem_channels, stem_channels);
    let mut node_ch = init_channels / 4;
    let mut pp_reduced = false;
    for i in 0..num_cells {
        let kind = if i == r1 || i == r2 { CellKind::Reduction } else { CellKind::Normal };
        if kind == CellKind::Reduction {
            node_ch *= 2;
        }
        layouts.push(CellLayout { kind, c_pp, c_p, node_ch, pp_reduced });
        c_pp = c_p;
        c_p = NUM_NODES * node_ch;
        pp_reduced = kind == CellKind::Reduction;
    }
    Ok(layouts)
}

/// Channel concat of same-spatial tensors, tape-free.
pub(crate) fn cat_channels(xs: &[&Tensor]) -> Tensor {
    let (n, h, w) = (xs[0].shape[0], xs[0].shape[2], xs[0].shape[3]);
    let hw = h * w;
    let ctot: usize = xs.iter().map(|x| x.shape[1]).sum();
    let mut data = vec![0.0f32; n * ctot * hw];
    for s in 0..n {
        let mut coff = 0usize;
        for x in xs {
            let c = x.shape[1];
            let src = &x.data[s * c * hw..(s + 1) * c * hw];
            data[(s * ctot + coff) * hw..(s * ctot + coff + c) * hw].copy_from_slice(src);
            coff += c;
        }
    }
    Tensor { shape: vec![n, ctot, h, w], data }
}

/// Drop the first row and column: x[:, :, 1:, 1:].
pub(crate) fn crop11(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (nh, nw) = (h - 1, w - 1);
    let mut data = vec![0.0f32; n * c * nh * nw];
    for p in 0..n * c {
        for y in 0..nh {
            let src = &x.data[p * h * w + (y + 1) * w + 1..p * h * w + (y + 1) * w + 1 + nw];
            data[p * nh * nw + y * nw..p * nh * nw + (y + 1) * nw].copy_from_slice(src);
        }
    }
    Tensor { shape: vec![n, c, nh, nw], data }
}
