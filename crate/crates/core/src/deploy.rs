//! Bit-packed deployment: sign tensors as 64-bit words, binary convolution
//! as XNOR + popcount, the cost/memory/speedup report, and the `BNASBIN1`
//! model file.
//!
//! The packed path computes the exact same integer correlation as the
//! float sign path (padding contributes 0 on both: the float path
//! zero-pads after signing, the packed path masks those bits out of the
//! popcount), then applies the identical βK scaling code from `binarize`,
//! so the two paths agree bitwise.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binarize::{apply_beta_k, infer_k, BinConvParams, BinConvRunner};
use crate::celltemplate::{stack_layout_from_stem, CellKind, CellSpec, Genotype, NUM_NODES};
use crate::ndtensor::{ConvSpec, ParamGroup, ParamStore, Tensor};
use crate::searchspace::{op_cost, out_extent, LayerType, OpCost};
use crate::trainer::{build_network, Network, NetworkConfig, STEM_GROUPS};
use crate::{Error, Result};

// ── bit packing ─────────────────────────────────────────────────────────

/// Sign bits of a tensor, packed along the last axis: each leading-axes
/// "row" starts on a word boundary, bit i of a row is set iff the value is
/// >= 0 (sign(0) = +1), and tail bits past `n` are zero so they never
/// contribute to a popcount.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedTensor {
    pub shape: Vec<usize>,
    pub rows: usize,
    /// Logical bit length of one row (the last-axis extent).
    pub n: usize,
    pub words_per_row: usize,
    pub words: Vec<u64>,
}

pub fn pack(x: &Tensor) -> PackedTensor {
    let n = x.shape.last().copied().unwrap_or(0);
    let rows = if n == 0 { 0 } else { x.data.len() / n };
    let words_per_row = n.div_ceil(64);
    let mut words = vec![0u64; rows * words_per_row];
    for r in 0..rows {
        let src = &x.data[r * n..(r + 1) * n];
        let dst = &mut words[r * words_per_row..(r + 1) * words_per_row];
        for (i, &v) in src.iter().enumerate() {
            if v >= 0.0 {
                dst[i / 64] |= 1u64 << (i % 64);
            }
        }
    }
    PackedTensor { shape: x.shape.clone(), rows, n, words_per_row, words }
}

pub fn unpack(p: &PackedTensor) -> Tensor {
    let mut data = vec![0.0f32; p.rows * p.n];
    for r in 0..p.rows {
        let src = &p.words[r * p.words_per_row..(r + 1) * p.words_per_row];
        for i in 0..p.n {
            data[r * p.n + i] = if src[i / 64] >> (i % 64) & 1 == 1 { 1.0 } else { -1.0 };
        }
    }
    Tensor { shape: p.shape.clone(), data }
}

impl PackedTensor {
    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }
}

/// ±1 inner product of two packed tensors of identical layout:
/// `n − 2·popcount(a XOR b)` per row, summed over rows.
pub fn xnor_dot(a: &PackedTensor, b: &PackedTensor) -> Result<i64> {
    if a.n != b.n || a.rows != b.rows {
        return Err(Error::shape(
            "xnor_dot",
            format!("{} rows x {} bits vs {} rows x {} bits", a.rows, a.n, b.rows, b.n),
        ));
    }
    let mut total = 0i64;
    for (x, y) in a.words.iter().zip(&b.words) {
        total -= 2 * (x ^ y).count_ones() as i64;
    }
    Ok(total + (a.rows * a.n) as i64)
}

/// Byte-table popcount; exists to cross-check the native `count_ones` the
/// hot path uses.
pub fn popcount_table(x: u64) -> u32 {
    const TABLE: [u8; 256] = {
        let mut t = [0u8; 256];
        let mut i = 0;
        while i < 256 {
            t[i] = (i as u8).count_ones() as u8;
            i += 1;
        }
        t
    };
    x.to_le_bytes().iter().map(|&b| TABLE[b as usize] as u32).sum()
}

// ── packed convolution ──────────────────────────────────────────────────

/// One binary convolution's deployable payload. `name` is the latent
/// weight's parameter name — the key the runner dispatches on.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedConv {
    pub name: String,
    pub wshape: Vec<usize>,
    pub spec: ConvSpec,
    pub beta: Vec<f32>,
    pub bits: PackedTensor,
}

impl PackedConv {
    pub fn from_params(store: &ParamStore, conv: &BinConvParams) -> Self {
        let p = store.get(conv.weight);
        let rowlen = p.shape[1] * p.shape[2] * p.shape[3];
        let signs = Tensor { shape: vec![p.shape[0], rowlen], data: conv.sign_weights(store) };
        PackedConv {
            name: p.name.clone(),
            wshape: p.shape.clone(),
            spec: conv.spec,
            beta: conv.beta(store),
            bits: pack(&signs),
        }
    }
}

/// Eq. 3 with the correlation done in packed arithmetic. The activation
/// stays float (K needs |A|); its sign bits are gathered im2row-style with
/// a validity mask so zero padding contributes nothing.
pub fn packed_binconv(a: &Tensor, conv: &PackedConv) -> Result<Tensor> {
    let (wo, cpg, kh, kw) = (conv.wshape[0], conv.wshape[1], conv.wshape[2], conv.wshape[3]);
    if a.shape.len() != 4 {
        return Err(Error::shape("packed_binconv", format!("activation {:?}", a.shape)));
    }
    let (nb, c, h, w) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
    let s = &conv.spec;
    if c != cpg * s.groups || wo % s.groups != 0 {
        return Err(Error::shape(
            "packed_binconv",
            format!("{c} input channels vs weight {:?} with {} groups", conv.wshape, s.groups),
        ));
    }
    let n_bits = cpg * kh * kw;
    if conv.bits.n != n_bits || conv.bits.rows != wo {
        return Err(Error::shape(
            "packed_binconv",
            format!("packed rows {}x{} bits vs weight {:?}", conv.bits.rows, conv.bits.n, conv.wshape),
        ));
    }
    let (oh, ow) = (s.out_size(h, kh), s.out_size(w, kw));
    let (opix, wpr) = (oh * ow, n_bits.div_ceil(64));
    let opg = wo / s.groups;

    let mut ints = vec![0.0f32; nb * wo * opix];
    // reused per (sample, group): sign bits + validity of each output row
    let mut bits = vec![0u64; opix * wpr];
    let mut valid = vec![0u64; opix * wpr];
    let mut nvalid = vec![0i64; opix];
    for sm in 0..nb {
        for gi in 0..s.groups {
            bits.iter_mut().for_each(|v| *v = 0);
            valid.iter_mut().for_each(|v| *v = 0);
            for (p, nv) in nvalid.iter_mut().enumerate() {
                let (oy, ox) = (p / ow, p % ow);
                let row_b = &mut bits[p * wpr..(p + 1) * wpr];
                let row_v = &mut valid[p * wpr..(p + 1) * wpr];
                let mut count = 0i64;
                let mut bit = 0usize;
                for ci in 0..cpg {
                    let plane = &a.data[((sm * c + gi * cpg + ci) * h) * w..((sm * c + gi * cpg + ci) * h + h) * w];
                    for ky in 0..kh {
                        let iy = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                        for kx in 0..kw {
                            let ix = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                row_v[bit / 64] |= 1 << (bit % 64);
                                count += 1;
                                if plane[iy as usize * w + ix as usize] >= 0.0 {
                                    row_b[bit / 64] |= 1 << (bit % 64);
                                }
                            }
                            bit += 1;
                        }
                    }
                }
                *nv = count;
            }
            for co in 0..opg {
                let wrow = conv.bits.row(gi * opg + co);
                let dst = &mut ints[(sm * wo + gi * opg + co) * opix..(sm * wo + gi * opg + co + 1) * opix];
                for (p, d) in dst.iter_mut().enumerate() {
                    let row_b = &bits[p * wpr..(p + 1) * wpr];
                    let row_v = &valid[p * wpr..(p + 1) * wpr];
                    let mut disagree = 0i64;
                    for i in 0..wpr {
                        disagree += ((row_b[i] ^ wrow[i]) & row_v[i]).count_ones() as i64;
                    }
                    *d = (nvalid[p] - 2 * disagree) as f32;
                }
            }
        }
    }
    let k = infer_k(a, kh, kw, s)?;
    Ok(apply_beta_k(&ints, &[nb, wo, oh, ow], &k, s.groups, &conv.beta))
}

/// Runner that dispatches every binary conv of a network walk to its
/// packed payload, keyed by weight parameter name.
pub struct PackedWeights {
    convs: HashMap<String, PackedConv>,
}

impl PackedWeights {
    pub fn pack_all(store: &ParamStore, convs: &[&BinConvParams]) -> Self {
        let map = convs
            .iter()
            .map(|conv| {
                let pc = PackedConv::from_params(store, conv);
                (pc.name.clone(), pc)
            })
            .collect();
        PackedWeights { convs: map }
    }

    pub fn from_convs(convs: Vec<PackedConv>) -> Self {
        PackedWeights { convs: convs.into_iter().map(|c| (c.name.clone(), c)).collect() }
    }

    pub fn get(&self, name: &str) -> Option<&PackedConv> {
        self.convs.get(name)
    }

    pub fn len(&self) -> usize {
        self.convs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.convs.is_empty()
    }

    /// Deterministic name order, for serialization.
    pub fn sorted(&self) -> Vec<&PackedConv> {
        let mut v: Vec<&PackedConv> = self.convs.values().collect();
        v.sort_by(|a, b| a.name.cmp(&b.name));
        v
    }
}

impl BinConvRunner for PackedWeights {
    fn run(&self, store: &ParamStore, conv: &BinConvParams, a: &Tensor) -> Result<Tensor> {
        let name = &store.get(conv.weight).name;
        let pc = self
            .convs
            .get(name)
            .ok_or_else(|| Error::arg("packed_run", format!("no packed payload for {name:?}")))?;
        packed_binconv(a, pc)
    }
}

// ── cost accounting ─────────────────────────────────────────────────────

/// Whole-network cost summary. The fp reference model is the same
/// genotype realized densely in f32 with every Zeroise edge replaced by a
/// 3x3 convolution — Zeroise does not exist in the float domain.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostReport {
    pub binary_ops: u64,
    pub float_ops: u64,
    /// float_ops + binary_ops / 64 (64-wide bit-parallel convention).
    pub flops: f64,
    pub param_bits_binary: u64,
    pub param_bits_float: u64,
    pub fp_float_ops: u64,
    pub fp_param_count: u64,
    /// 32 · fp_param_count / total stored bits.
    pub memory_savings: f64,
    /// fp_float_ops / flops.
    pub speedup: f64,
}

impl CostReport {
    pub fn format_text(&self) -> String {
        format!(
            "binary ops        {:>16}\n\
             float ops         {:>16}\n\
             FLOPs             {:>16.1}\n\
             binary param bits {:>16}\n\
             float param bits  {:>16}\n\
             fp float ops      {:>16}\n\
             fp params         {:>16}\n\
             memory savings    {:>15.2}x\n\
             speedup           {:>15.2}x\n",
            self.binary_ops,
            self.float_ops,
            self.flops,
            self.param_bits_binary,
            self.param_bits_float,
            self.fp_float_ops,
            self.fp_param_count,
            self.memory_savings,
            self.speedup
        )
    }
}

/// Running tally: deployed-form cost plus the fp reference accounting.
#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    dep: OpCost,
    fp_ops: u64,
    fp_params: u64,
}

impl Tally {
    fn add(&mut self, o: Tally) {
        self.dep = self.dep + o.dep;
        self.fp_ops += o.fp_ops;
        self.fp_params += o.fp_params;
    }

    /// A float-only component costs the same on both sides.
    fn float_both(ops: u64, params: u64) -> Tally {
        Tally {
            dep: OpCost { float_ops: ops, param_bits_float: 32 * params, ..OpCost::default() },
            fp_ops: ops,
            fp_params: params,
        }
    }
}

/// Batchnorm storage (4 values per channel: affine pair + running stats),
/// charged at report level per the op_cost convention.
fn bn_tally(channels: u64) -> Tally {
    Tally {
        dep: OpCost { param_bits_float: 32 * 4 * channels, ..OpCost::default() },
        fp_ops: 0,
        fp_params: 4 * channels,
    }
}

/// One edge op in deployed and fp form. fp realizes Zeroise as a dense 3x3
/// conv of matching stride and drops the Eq. 3 plumbing from conv kinds;
/// `bn_tally` carries the BN storage on both sides.
fn edge_tally(op: LayerType, ch: usize, sp: usize, stride: usize) -> Tally {
    let dep = op_cost(op, ch, ch, (sp, sp), stride);
    let (c, ipix) = (ch as u64, (sp * sp) as u64);
    let opix = (out_extent(sp, stride) * out_extent(sp, stride)) as u64;
    let mut t = Tally { dep, ..Tally::default() };
    match op {
        LayerType::Zeroise => {
            // absent in the deployed model, a conv3 + BN in the fp reference
            let k2 = 9u64;
            t.fp_ops = c * c * k2 * opix + 2 * c * ipix;
            t.fp_params = c * c * k2 + 4 * c;
        }
        LayerType::MaxPool3 | LayerType::AvgPool3 => {
            t.fp_ops = dep.float_ops;
            t.add(bn_tally(c));
        }
        LayerType::BinConv3 | LayerType::BinConv5 | LayerType::BinDilConv3 | LayerType::BinDilConv5 => {
            let k2 = (op.kernel_size() * op.kernel_size()) as u64;
            t.fp_ops = dep.binary_ops + 2 * c * ipix;
            t.fp_params = c * c * k2;
            t.add(bn_tally(c));
        }
        LayerType::SepConv3 | LayerType::SepConv5 => {
            let k2 = (op.kernel_size() * op.kernel_size()) as u64;
            t.fp_ops = dep.binary_ops + 2 * c * ipix;
            t.fp_params = c * k2 + c * c;
            t.add(bn_tally(c));
        }
    }
    t
}

/// PreBlock: BN(cin) then a binarized 1x1 conv.
fn preblock_tally(cin: usize, cout: usize, sp: usize) -> Tally {
    let (ci, co, pix) = (cin as u64, cout as u64, (sp * sp) as u64);
    let dep = OpCost {
        binary_ops: co * ci * pix,
        float_ops: 2 * ci * pix + (ci * pix + pix) + 2 * co * pix,
        param_bits_binary: co * ci,
        param_bits_float: 32 * co,
    };
    let mut t = Tally { dep, fp_ops: co * ci * pix + 2 * ci * pix, fp_params: co * ci };
    t.add(bn_tally(ci));
    t
}

/// FactorizedReduce: float on both sides (relu, two strided 1x1 convs, BN).
fn fact_reduce_tally(cin: usize, cout: usize, in_sp: usize) -> Tally {
    let (ci, co) = (cin as u64, cout as u64);
    let ipix = (in_sp * in_sp) as u64;
    let opix = ipix / 4;
    let ops = ci * ipix + co * ci * opix + 2 * co * opix;
    Tally::float_both(ops, co * ci + 4 * co)
}

/// cost_report input spatial extent (CIFAR images).
pub const INPUT_SPATIAL: usize = 32;

/// Sum op_cost over the realized network, stem and classifier included.
pub fn cost_report(geno: &Genotype, cfg: &NetworkConfig) -> Result<CostReport> {
    cfg.validate()?;
    geno.validate()?;
    let mut t = Tally::default();
    let c0 = cfg.init_channels as u64;
    let pix0 = (INPUT_SPATIAL * INPUT_SPATIAL) as u64;

    // stem (float on both sides)
    let stem_ch = if cfg.stem_group_conv {
        let wide = 2 * c0;
        t.add(Tally::float_both(wide * 3 * 9 * pix0 + 2 * wide * pix0, wide * 27 + 4 * wide));
        t.add(Tally::float_both(
            wide * pix0 + wide * (wide / STEM_GROUPS as u64) * 9 * pix0 + 2 * wide * pix0,
            wide * (wide / STEM_GROUPS as u64) * 9 + 4 * wide,
        ));
        2 * cfg.init_channels
    } else {
        t.add(Tally::float_both(c0 * 3 * 9 * pix0 + 2 * c0 * pix0, c0 * 27 + 4 * c0));
        cfg.init_channels
    };

    let layouts = stack_layout_from_stem(cfg.num_cells, cfg.init_channels, stem_ch)?;
    let (mut sp_pp, mut sp_p) = (INPUT_SPATIAL, INPUT_SPATIAL);
    for l in &layouts {
        let spec = CellSpec::new(l.kind);
        let out_sp = if l.kind == CellKind::Reduction { out_extent(sp_p, 2) } else { sp_p };
        let out_ch = NUM_NODES * l.node_ch;
        let opix = (out_sp * out_sp) as u64;

        if l.pp_reduced {
            t.add(fact_reduce_tally(l.c_pp, l.node_ch, sp_pp));
        } else {
            t.add(preblock_tally(l.c_pp, l.node_ch, sp_pp));
        }
        t.add(preblock_tally(l.c_p, l.node_ch, sp_p));

        for node in 0..NUM_NODES {
            for (src, op) in geno.node(l.kind, node) {
                let stride = spec.edge_stride(src);
                let in_sp = if src < 2 { sp_p } else { out_sp };
                t.add(edge_tally(op, l.node_ch, in_sp, stride));
            }
            // the two retained edges are summed
            t.add(Tally::float_both(l.node_ch as u64 * opix, 0));
        }

        // inter-cell skip
        if cfg.skip_enabled {
            let (cp, co) = (l.c_p as u64, out_ch as u64);
            match (l.kind, l.c_p == out_ch) {
                (CellKind::Normal, true) => t.add(Tally::float_both(co * opix, 0)),
                (CellKind::Normal, false) => {
                    t.add(Tally::float_both(co * cp * opix + co * opix, co * cp))
                }
                (CellKind::Reduction, _) => {
                    t.add(Tally::float_both(9 * cp * opix + co * cp * opix + co * opix, co * cp))
                }
            }
        }

        sp_pp = sp_p;
        sp_p = out_sp;
    }

    // global average pool + classifier
    let last_ch = layouts.last().map(|l| NUM_NODES * l.node_ch).unwrap_or(stem_ch) as u64;
    let classes = cfg.num_classes as u64;
    t.add(Tally::float_both(last_ch * (sp_p * sp_p) as u64, 0));
    t.add(Tally::float_both(last_ch * classes + classes, last_ch * classes + classes));

    let stored_bits = t.dep.param_bits_binary + t.dep.param_bits_float;
    let flops = t.dep.flops();
    Ok(CostReport {
        binary_ops: t.dep.binary_ops,
        float_ops: t.dep.float_ops,
        flops,
        param_bits_binary: t.dep.param_bits_binary,
        param_bits_float: t.dep.param_bits_float,
        fp_float_ops: t.fp_ops,
        fp_param_count: t.fp_params,
        memory_savings: 32.0 * t.fp_params as f64 / stored_bits.max(1) as f64,
        speedup: t.fp_ops as f64 / flops.max(f64::MIN_POSITIVE),
    })
}

// ── BNASBIN1 model file ─────────────────────────────────────────────────

const MAGIC: &[u8; 8] = b"BNASBIN1";
const VERSION: u32 = 1;

/// A loaded deployment: enough to rebuild the network skeleton, restore
/// float parameters, and run packed inference.
pub struct DeployedModel {
    pub cfg: NetworkConfig,
    pub genotype: Genotype,
    pub packed: PackedWeights,
    pub floats: Vec<(String, Vec<usize>, Vec<f32>)>,
}

/// Write the deployed form of a trained network: packed binary weights +
/// β, and every parameter that is not a binarized latent weight, in f32.
pub fn export_model(path: &Path, net: &Network, store: &ParamStore) -> Result<()> {
    let packed = PackedWeights::pack_all(store, &net.bin_convs());
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let cfg_json = serde_json::to_string(&net.cfg)
        .map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?;
    write_blob(&mut w, cfg_json.as_bytes())?;
    write_blob(&mut w, net.genotype.to_json()?.as_bytes())?;

    let convs = packed.sorted();
    w.write_all(&(convs.len() as u32).to_le_bytes())?;
    for pc in convs {
        write_blob(&mut w, pc.name.as_bytes())?;
        w.write_all(&(pc.wshape.len() as u32).to_le_bytes())?;
        for &e in &pc.wshape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in [pc.spec.stride, pc.spec.dilation, pc.spec.padding, pc.spec.groups] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(pc.beta.len() as u32).to_le_bytes())?;
        for &b in &pc.beta {
            w.write_all(&b.to_le_bytes())?;
        }
        for v in [pc.bits.rows, pc.bits.n, pc.bits.words_per_row] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for &word in &pc.bits.words {
            w.write_all(&word.to_le_bytes())?;
        }
    }

    let floats: Vec<_> = store
        .iter()
        .filter(|(_, p)| packed.get(&p.name).is_none())
        .collect();
    w.write_all(&(floats.len() as u32).to_le_bytes())?;
    for (_, p) in floats {
        write_blob(&mut w, p.name.as_bytes())?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &e in &p.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DeployedModel> {
    let fmt = |detail: String| Error::Format { path: path.display().to_string(), detail };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fmt("file shorter than the magic".into()))?;
    if &magic != MAGIC {
        return Err(fmt("bad magic, not a BNASBIN1 file".into()));
    }
    if read_u32(&mut r)? != VERSION {
        return Err(fmt("unsupported version".into()));
    }
    let cfg: NetworkConfig = serde_json::from_slice(&read_blob(&mut r)?)
        .map_err(|e| fmt(format!("config blob: {e}")))?;
    let genotype: Genotype = serde_json::from_slice(&read_blob(&mut r)?)
        .map_err(|e| fmt(format!("genotype blob: {e}")))?;
    genotype.validate()?;

    let n_convs = read_u32(&mut r)? as usize;
    let mut convs = Vec::with_capacity(n_convs);
    for _ in 0..n_convs {
        let name = String::from_utf8(read_blob(&mut r)?).map_err(|_| fmt("non-utf8 name".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut wshape = Vec::with_capacity(rank);
        for _ in 0..rank {
            wshape.push(read_u32(&mut r)? as usize);
        }
        let spec = ConvSpec {
            stride: read_u32(&mut r)? as usize,
            dilation: read_u32(&mut r)? as usize,
            padding: read_u32(&mut r)? as usize,
            groups: read_u32(&mut r)? as usize,
        };
        let beta_len = read_u32(&mut r)? as usize;
        let mut beta = Vec::with_capacity(beta_len);
        for _ in 0..beta_len {
            beta.push(read_f32(&mut r)?);
        }
        let rows = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let words_per_row = read_u32(&mut r)? as usize;
        let mut words = vec![0u64; rows * words_per_row];
        let mut buf = [0u8; 8];
        for word in words.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| fmt(format!("truncated words for {name:?}")))?;
            *word = u64::from_le_bytes(buf);
        }
        if wshape.len() != 4 || rows != wshape[0] || n != wshape[1] * wshape[2] * wshape[3] {
            return Err(fmt(format!("{name:?}: packed layout disagrees with weight shape {wshape:?}")));
        }
        let rowlen = n;
        convs.push(PackedConv {
            name,
            wshape: wshape.clone(),
            spec,
            beta,
            bits: PackedTensor { shape: vec![wshape[0], rowlen], rows, n, words_per_row, words },
        });
    }

    let n_floats = read_u32(&mut r)? as usize;
    let mut floats = Vec::with_capacity(n_floats);
    for _ in 0..n_floats {
        let name = String::from_utf8(read_blob(&mut r)?).map_err(|_| fmt("non-utf8 name".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(read_f32(&mut r)?);
        }
        floats.push((name, shape, data));
    }
    Ok(DeployedModel { cfg, genotype, packed: PackedWeights::from_convs(convs), floats })
}

impl DeployedModel {
    /// Rebuild a runnable network from the file contents. Float parameters
    /// restore by name; binarized latent weights restore as β·sign so the
    /// float-sign path of the instantiated model reproduces the original β
    /// and signs exactly.
    pub fn instantiate(&self) -> Result<(Network, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.genotype.seed);
        let net = build_network(&mut store, &mut rng, &self.genotype, &self.cfg)?;
        let err = |detail: String| Error::Format { path: "<BNASBIN1>".to_string(), detail };
        let mut restored = 0usize;
        for (name, shape, data) in &self.floats {
            let id = store.lookup(name).ok_or_else(|| err(format!("unknown float parameter {name:?}")))?;
            let p = store.get_mut(id);
            if &p.shape != shape {
                return Err(err(format!("{name:?}: shape {shape:?} != expected {:?}", p.shape)));
            }
            p.data = data.clone();
            restored += 1;
        }
        for pc in self.packed.sorted() {
            let id = store.lookup(&pc.name).ok_or_else(|| err(format!("unknown binary weight {:?}", pc.name)))?;
            let p = store.get_mut(id);
            if p.shape != pc.wshape {
                return Err(err(format!("{:?}: shape {:?} != expected {:?}", pc.name, pc.wshape, p.shape)));
            }
            let signs = unpack(&pc.bits);
            let rowlen = pc.wshape[1] * pc.wshape[2] * pc.wshape[3];
            for (o, &b) in pc.beta.iter().enumerate() {
                for i in 0..rowlen {
                    p.data[o * rowlen + i] = b * signs.data[o * rowlen + i];
                }
            }
            restored += 1;
        }
        if restored != store.len() {
            return Err(err(format!("file restores {restored} of {} parameters", store.len())));
        }
        Ok((net, store))
    }

    /// Packed-path logits for a batch.
    pub fn infer(&self, net: &Network, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        net.forward_with(store, images, &self.packed)
    }
}

fn write_blob(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_blob(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}

// ── microbenchmark ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub label: String,
    pub float_ms: f64,
    pub packed_ms: f64,
    pub speedup: f64,
}

/// Wall-clock comparison of the packed conv against the float sign conv on
/// one shape: (batch, in_ch, out_ch, spatial, kernel).
pub fn bench_conv(shape: (usize, usize, usize, usize, usize), iters: usize, seed: u64) -> Result<BenchRow> {
    let (nb, cin, cout, sp, k) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::new(
        vec![nb, cin, sp, sp],
        (0..nb * cin * sp * sp).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )?;
    let w = Tensor::new(
        vec![cout, cin, k, k],
        (0..cout * cin * k * k).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )?;
    let spec = ConvSpec::plain(1, k / 2);
    let mut store = ParamStore::new();
    let id = store.add("bench.wbin", w.shape.clone(), w.data.clone(), ParamGroup::Weight)?;
    let conv = BinConvParams { weight: id, out_ch: cout, in_ch: cin, kh: k, kw: k, spec };
    let pc = PackedConv::from_params(&store, &conv);
    let (wsign, beta) = (conv.sign_weights(&store), conv.beta(&store));

    let t0 = Instant::now();
    for _ in 0..iters {
        crate::binarize::binconv_infer(&a, &wsign, &beta, &w.shape, &spec)?;
    }
    let float_ms = t0.elapsed().as_secs_f64() * 1e3 / iters as f64;

    let t1 = Instant::now();
    for _ in 0..iters {
        packed_binconv(&a, &pc)?;
    }
    let packed_ms = t1.elapsed().as_secs_f64() * 1e3 / iters as f64;

    Ok(BenchRow {
        label: format!("{nb}x{cin}->{cout} {sp}x{sp} k{k}"),
        float_ms,
        packed_ms,
        speedup: float_ms / packed_ms.max(f64::MIN_POSITIVE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binarize::binconv_infer;
    use crate::searchspace::SEARCH_SPACE;

    #[test]
    fn pack_follows_the_sign_convention() {
        let x = Tensor::new(vec![4], vec![0.5, -0.3, 0.0, -2.0]).unwrap();
        let p = pack(&x);
        assert_eq!(p.rows, 1);
        assert_eq!(p.n, 4);
        assert_eq!(p.words, vec![0b0101]);
        assert_eq!(unpack(&p).data, vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn pack_unpack_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![3, 70], (0..210).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let p = pack(&x);
        assert_eq!(p.words_per_row, 2); // 70 bits span two words
        for r in 0..3 {
            assert_eq!(p.row(r)[1] >> 6, 0, "tail bits past n must stay zero");
        }
        assert_eq!(pack(&unpack(&p)), p);
    }

    #[test]
    fn xnor_dot_examples() {
        let a = pack(&Tensor::new(vec![5], vec![1.0, -1.0, 1.0, 1.0, -1.0]).unwrap());
        let b = pack(&Tensor::new(vec![5], vec![1.0, 1.0, -1.0, 1.0, -1.0]).unwrap());
        assert_eq!(xnor_dot(&a, &b).unwrap(), 1); // 2 disagreements: 5 - 4
        assert_eq!(xnor_dot(&a, &a).unwrap(), 5);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv: Vec<f32> = (0..1000).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let yv: Vec<f32> = (0..1000).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let float_dot: f32 = xv.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let px = pack(&Tensor::new(vec![1000], xv).unwrap());
        let py = pack(&Tensor::new(vec![1000], yv).unwrap());
        assert_eq!(xnor_dot(&px, &py).unwrap(), float_dot as i64);

        let short = pack(&Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        assert!(xnor_dot(&a, &short).is_err());
    }

    #[test]
    fn table_popcount_matches_native() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x: u64 = rng.gen();
            assert_eq!(popcount_table(x), x.count_ones());
        }
        assert_eq!(popcount_table(0), 0);
        assert_eq!(popcount_table(u64::MAX), 64);
    }

    #[test]
    fn all_plus_one_conv_yields_nine_everywhere() {
        let a = Tensor::new(vec![1, 1, 5, 5], vec![1.0; 25]).unwrap();
        let mut store = ParamStore::new();
        let id = store.add("w.wbin", vec![1, 1, 3, 3], vec![1.0; 9], ParamGroup::Weight).unwrap();
        let conv = BinConvParams {
            weight: id,
            out_ch: 1,
            in_ch: 1,
            kh: 3,
            kw: 3,
            spec: ConvSpec::plain(1, 0),
        };
        let pc = PackedConv::from_params(&store, &conv);
        let out = packed_binconv(&a, &pc).unwrap();
        // beta = 1 and K = 1 for the all-ones input, so the scaled output
        // exposes the raw integer correlation
        assert_eq!(out.shape, vec![1, 1, 3, 3]);
        for &v in &out.data {
            assert_eq!(v, 9.0);
        }
    }

    /// The module's central test: packed == float sign path, every layer
    /// kind, both strides, random shapes.
    #[test]
    fn packed_matches_float_path_on_all_conv_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cases = 0;
        for op in SEARCH_SPACE.iter().chain([LayerType::SepConv3, LayerType::SepConv5].iter()) {
            let (k, dil) = match op {
                LayerType::Zeroise | LayerType::MaxPool3 | LayerType::AvgPool3 => continue,
                _ => (op.kernel_size(), op.dilation()),
            };
            for stride in [1usize, 2] {
                for _ in 0..4 {
                    let (cin, cout, sp) = (4usize, 4usize, 9usize);
                    let groups = if matches!(op, LayerType::SepConv3 | LayerType::SepConv5) { cin } else { 1 };
                    let spec = ConvSpec { stride, dilation: dil, padding: op.padding(), groups };
                    let wo = if groups == 1 { cout } else { cin };
                    let wshape = vec![wo, cin / groups, k, k];
                    let a = Tensor::new(
                        vec![2, cin, sp, sp],
                        (0..2 * cin * sp * sp).map(|_| rng.gen_range(-1.5f32..1.5)).collect(),
                    )
                    .unwrap();
                    let mut store = ParamStore::new();
                    let n: usize = wshape.iter().product();
                    let wdata: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                    let id = store.add("t.wbin", wshape.clone(), wdata, ParamGroup::Weight).unwrap();
                    let conv = BinConvParams { weight: id, out_ch: wo, in_ch: cin, kh: k, kw: k, spec };
                    let pc = PackedConv::from_params(&store, &conv);

                    let float_out =
                        binconv_infer(&a, &conv.sign_weights(&store), &conv.beta(&store), &wshape, &spec).unwrap();
                    let packed_out = packed_binconv(&a, &pc).unwrap();
                    assert_eq!(float_out.shape, packed_out.shape);
                    for (x, y) in float_out.data.iter().zip(&packed_out.data) {
                        assert!((x - y).abs() < 1e-5, "{op:?} s{stride}: {x} vs {y}");
                    }
                    cases += 1;
                }
            }
        }
        assert!(cases >= 48);
    }

    fn toy_cfg(cells: usize, channels: usize) -> NetworkConfig {
        NetworkConfig {
            name: "toy".into(),
            num_cells: cells,
            init_channels: channels,
            gamma: 1.0,
            stem_group_conv: false,
            num_classes: 10,
            skip_enabled: true,
        }
    }

    #[test]
    fn zeroise_strictly_cheapens_the_report() {
        let with_zero = {
            let mut g = Genotype::single_op(LayerType::BinConv3, 1.0, 0);
            g.normal[3] = (g.normal[3].0, LayerType::Zeroise);
            g.reduce[5] = (g.reduce[5].0, LayerType::Zeroise);
            g
        };
        let without = Genotype::single_op(LayerType::BinConv3, 1.0, 0);
        let cfg = toy_cfg(5, 16);
        let a = cost_report(&with_zero, &cfg).unwrap();
        let b = cost_report(&without, &cfg).unwrap();
        assert!(a.flops < b.flops);
        assert!(a.param_bits_binary + a.param_bits_float < b.param_bits_binary + b.param_bits_float);
        assert!(a.memory_savings > b.memory_savings);
        assert!(a.speedup > b.speedup);
        // identical fp reference on both sides (Zeroise realized densely)
        assert_eq!(a.fp_float_ops, b.fp_float_ops);
        assert_eq!(a.fp_param_count, b.fp_param_count);
    }

    #[test]
    fn wide_binary_net_approaches_the_32x_limit() {
        let geno = Genotype::single_op(LayerType::BinConv5, 1.0, 0);
        let report = cost_report(&geno, &toy_cfg(8, 256)).unwrap();
        assert!(report.memory_savings >= 20.0, "memory savings {:.2}", report.memory_savings);
        assert!(report.memory_savings < 32.0);
        assert!(report.speedup > 1.0);
        let text = report.format_text();
        assert!(text.contains("memory savings"));
    }

    #[test]
    fn export_load_instantiate_round_trip() {
        let dir = std::env::temp_dir().join("bnas_deploy_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");

        let cfg = toy_cfg(3, 8);
        let geno = {
            let mut g = Genotype::single_op(LayerType::BinConv3, 1.0, 42);
            g.normal[1] = (g.normal[1].0, LayerType::MaxPool3);
            g.reduce[2] = (g.reduce[2].0, LayerType::Zeroise);
            g
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = build_network(&mut store, &mut rng, &geno, &cfg).unwrap();
        // make running stats non-trivial so the float restore is visible
        for idx in 0..store.len() {
            let p = store.get_mut(crate::ndtensor::ParamId(idx));
            if p.name.ends_with("running_mean") {
                for (i, v) in p.data.iter_mut().enumerate() {
                    *v = 0.01 * i as f32;
                }
            }
        }
        export_model(&path, &net, &store).unwrap();

        let model = load_model(&path).unwrap();
        assert_eq!(model.cfg, cfg);
        assert_eq!(model.genotype, geno);
        let (net2, store2) = model.instantiate().unwrap();

        let ds = crate::data::synthetic_blobs(10, 8, 1);
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let batch =
            crate::data::make_batch(&ds, &[0, 1, 2, 3, 4, 5, 6, 7], crate::data::AugmentSet::None, &mut drng)
                .unwrap();

        let float_logits = net.forward_infer(&store, &batch.images).unwrap();
        let packed_logits = model.infer(&net2, &store2, &batch.images).unwrap();
        assert_eq!(float_logits.shape, packed_logits.shape);
        for (x, y) in float_logits.data.iter().zip(&packed_logits.data) {
            assert!((x - y).abs() < 1e-4, "float {x} vs packed {y}");
        }
        // restored float-sign path agrees too (beta·sign restore is exact)
        let restored_float = net2.forward_infer(&store2, &batch.images).unwrap();
        for (x, y) in float_logits.data.iter().zip(&restored_float.data) {
            assert!((x - y).abs() < 1e-4);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn truncated_file_reports_format_error() {
        let dir = std::env::temp_dir().join("bnas_deploy_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("truncated.bin");
        std::fs::write(&path, b"BNASBIN1\x01\x00\x00\x00\x10").unwrap();
        assert!(load_model(&path).is_err());
        std::fs::write(&path, b"NOTMODEL").unwrap();
        match load_model(&path) {
            Err(Error::Format { .. }) | Err(Error::Io(_)) => {}
            Err(other) => panic!("expected format error, got {other:?}"),
            Ok(_) => panic!("bad magic must not load"),
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn bench_runs_and_reports() {
        let row = bench_conv((2, 8, 8, 8, 3), 2, 0).unwrap();
        assert!(row.float_ms > 0.0 && row.packed_ms > 0.0);
    }
}
