//! Final-network assembly from a genotype and the three training schemes:
//! `standard` (SGD, weight decay, one-cycle), `minimal_reg` (Adam, no
//! weight decay, no color jitter, plain cosine) and `minimal_reg_longer`
//! (the same with doubled epochs). Training logs per-epoch accuracy, the
//! per-step total gradient norm, and an underfitting flag for the
//! train-below-test phenomenon the minimal scheme exists to fix.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binarize::{BinConvParams, BinConvRunner, FloatSignRunner};
use crate::celltemplate::{stack_layout_from_stem, CellLayout, DiscreteCell, Genotype};
use crate::data::{make_batch, AugmentSet, Dataset};
use crate::ndtensor::{
    save_checkpoint, Adam, BatchNorm2d, Conv2dLayer, ConvSpec, LinearLayer, LrSchedule, ParamGroup, ParamStore,
    SgdMomentum, Tape, Tensor, TensorId,
};
use crate::search::{count_correct, shuffle};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkConfig {
    pub name: String,
    pub num_cells: usize,
    pub init_channels: usize,
    /// Provenance only: the discretization gamma the genotype was derived
    /// with. Not used at build time.
    pub gamma: f64,
    pub stem_group_conv: bool,
    pub num_classes: usize,
    pub skip_enabled: bool,
}

impl NetworkConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (cells, channels) = match name {
            "bnas-mini" => (10, 24),
            "bnas-a" => (20, 36),
            "bnas-b" => (12, 64),
            "bnas-c" => (16, 108),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (expected bnas-mini, bnas-a, bnas-b or bnas-c)"
                )))
            }
        };
        Ok(NetworkConfig {
            name: name.to_string(),
            num_cells: cells,
            init_channels: channels,
            gamma: 1.0,
            stem_group_conv: false,
            num_classes: 10,
            skip_enabled: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_cells < 3 {
            return Err(Error::Config(format!(
                "{}: num_cells {} < 3, two reduction positions need at least 3 cells",
                self.name, self.num_cells
            )));
        }
        if self.init_channels == 0 || self.init_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "{}: init_channels {} must be a positive multiple of 4",
                self.name, self.init_channels
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("{}: num_classes {} < 2", self.name, self.num_classes)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    Standard,
    MinimalReg,
    MinimalRegLonger,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerSpec {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainScheme {
    pub kind: SchemeKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub schedule: LrSchedule,
    pub weight_decay: f32,
    pub augment: AugmentSet,
}

impl TrainScheme {
    pub fn standard() -> Self {
        TrainScheme {
            kind: SchemeKind::Standard,
            epochs: 600,
            batch_size: 256,
            optimizer: OptimizerSpec::Sgd { momentum: 0.9 },
            schedule: LrSchedule::one_cycle(5e-2, 4e-4, 600),
            weight_decay: 3e-6,
            augment: AugmentSet::FlipCropJitter,
        }
    }

    /// No weight decay, no color jitter, plain cosine, Adam.
    pub fn minimal_reg() -> Self {
        TrainScheme {
            kind: SchemeKind::MinimalReg,
            epochs: 250,
            batch_size: 256,
            optimizer: OptimizerSpec::Adam { beta1: 0.9, beta2: 0.999 },
            schedule: LrSchedule::cosine(1e-3, 0.0, 250),
            weight_decay: 0.0,
            augment: AugmentSet::FlipCrop,
        }
    }

    pub fn minimal_reg_longer() -> Self {
        let mut s = Self::minimal_reg();
        s.kind = SchemeKind::MinimalRegLonger;
        s.scale_epochs(2 * s.epochs);
        s
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "minimal" | "minimal_reg" => Ok(Self::minimal_reg()),
            "minimal-longer" | "minimal_reg_longer" => Ok(Self::minimal_reg_longer()),
            other => Err(Error::Config(format!(
                "unknown scheme {other:?} (expected standard, minimal or minimal-longer)"
            ))),
        }
    }

    /// Re-span the run: same optimizer/lr band, new epoch count.
    pub fn scale_epochs(&mut self, epochs: usize) {
        self.epochs = epochs;
        self.schedule.total_epochs = epochs;
        self.schedule.cycle_length = epochs;
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config(format!(
                "scheme needs epochs >= 1 and batch_size >= 2 (batch statistics), got {} / {}",
                self.epochs, self.batch_size
            )));
        }
        if matches!(self.kind, SchemeKind::MinimalReg | SchemeKind::MinimalRegLonger) {
            if self.weight_decay != 0.0 {
                return Err(Error::Config("minimal_reg forbids weight decay".into()));
            }
            if self.augment == AugmentSet::FlipCropJitter {
                return Err(Error::Config("minimal_reg forbids color jitter".into()));
            }
        }
        Ok(())
    }
}

/// Float stem; everything it feeds is binarized except the classifier.
enum Stem {
    Plain {
        conv: Conv2dLayer,
        bn: BatchNorm2d,
    },
    /// The "†" option: widened 2x, second conv grouped (D: group count 4).
    Grouped {
        conv1: Conv2dLayer,
        bn1: BatchNorm2d,
        conv2: Conv2dLayer,
        bn2: BatchNorm2d,
    },
}

pub const STEM_GROUPS: usize = 4;

impl Stem {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &NetworkConfig) -> Result<(Self, usize)> {
        let c = cfg.init_channels;
        if !cfg.stem_group_conv {
            let conv = Conv2dLayer::new(store, rng, "stem.conv", 3, c, 3, ConvSpec::plain(1, 1))?;
            let bn = BatchNorm2d::new(store, "stem.bn", c, true)?;
            return Ok((Stem::Plain { conv, bn }, c));
        }
        let wide = 2 * c;
        if wide % STEM_GROUPS != 0 {
            return Err(Error::Config(format!("grouped stem width {wide} not divisible by {STEM_GROUPS}")));
        }
        let conv1 = Conv2dLayer::new(store, rng, "stem.conv1", 3, wide, 3, ConvSpec::plain(1, 1))?;
        let bn1 = BatchNorm2d::new(store, "stem.bn1", wide, true)?;
        let mut spec = ConvSpec::plain(1, 1);
        spec.groups = STEM_GROUPS;
        let conv2 = Conv2dLayer::new(store, rng, "stem.conv2", wide, wide, 3, spec)?;
        let bn2 = BatchNorm2d::new(store, "stem.bn2", wide, true)?;
        Ok((Stem::Grouped { conv1, bn1, conv2, bn2 }, wide))
    }

    fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: TensorId, training: bool) -> Result<TensorId> {
        match self {
            Stem::Plain { conv, bn } => {
                let y = conv.forward(tape, store, x)?;
                bn.forward(tape, store, y, training)
            }
            Stem::Grouped { conv1, bn1, conv2, bn2 } => {
                let y = conv1.forward(tape, store, x)?;
                let y = bn1.forward(tape, store, y, training)?;
                let y = tape.relu(y)?;
                let y = conv2.forward(tape, store, y)?;
                bn2.forward(tape, store, y, training)
            }
        }
    }

    fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        match self {
            Stem::Plain { conv, bn } => bn.infer(store, &conv.infer(store, x)?),
            Stem::Grouped { conv1, bn1, conv2, bn2 } => {
                let mut y = bn1.infer(store, &conv1.infer(store, x)?)?;
                for v in y.data.iter_mut() {
                    *v = v.max(0.0);
                }
                bn2.infer(store, &conv2.infer(store, &y)?)
            }
        }
    }
}

/// A discrete network realized from a genotype.
pub struct Network {
    stem: Stem,
    cells: Vec<DiscreteCell>,
    classifier: LinearLayer,
    pub cfg: NetworkConfig,
    pub genotype: Genotype,
    pub layouts: Vec<CellLayout>,
}

pub fn build_network(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    geno: &Genotype,
    cfg: &NetworkConfig,
) -> Result<Network> {
    cfg.validate()?;
    geno.validate()?;
    let (stem, stem_ch) = Stem::new(store, rng, cfg)?;
    let layouts = stack_layout_from_stem(cfg.num_cells, cfg.init_channels, stem_ch)?;
    let mut cells = Vec::with_capacity(cfg.num_cells);
    for (i, l) in layouts.iter().enumerate() {
        cells.push(DiscreteCell::new(
            store,
            rng,
            &format!("cells.{i}"),
            geno,
            l.kind,
            l.c_pp,
            l.c_p,
            l.node_ch,
            l.pp_reduced,
            cfg.skip_enabled,
        )?);
    }
    let last_ch = cells.last().expect("validated >= 3 cells").out_ch;
    let classifier = LinearLayer::new(store, rng, "classifier", last_ch, cfg.num_classes)?;
    Ok(Network { stem, cells, classifier, cfg: cfg.clone(), genotype: geno.clone(), layouts })
}

impl Network {
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        images: &Tensor,
        training: bool,
    ) -> Result<TensorId> {
        let x = tape.leaf(images.shape.clone(), images.data.clone())?;
        let stem = self.stem.forward(tape, store, x, training)?;
        let (mut s0, mut s1) = (stem, stem);
        for cell in &self.cells {
            let out = cell.forward(tape, store, s0, s1, training)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = tape.global_avg_pool(s1)?;
        self.classifier.forward(tape, store, pooled)
    }

    /// Tape-free eval-mode forward; every binary convolution dispatches
    /// through `runner`, so the packed deployment walks this exact code.
    pub fn forward_with(&self, store: &ParamStore, images: &Tensor, runner: &dyn BinConvRunner) -> Result<Tensor> {
        let stem = self.stem.infer(store, images)?;
        let (mut s0, mut s1) = (stem.clone(), stem);
        for cell in &self.cells {
            let out = cell.infer(store, &s0, &s1, runner)?;
            s0 = std::mem::replace(&mut s1, out);
        }
        let (n, c, hw) = (s1.shape[0], s1.shape[1], s1.shape[2] * s1.shape[3]);
        let mut pooled = vec![0.0f32; n * c];
        for s in 0..n {
            for ch in 0..c {
                let plane = &s1.data[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                pooled[s * c + ch] = (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32;
            }
        }
        self.classifier.infer(store, &Tensor::new(vec![n, c], pooled)?)
    }

    /// Float-sign eval forward (the reference path).
    pub fn forward_infer(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        self.forward_with(store, images, &FloatSignRunner)
    }

    /// All binary convolutions, in deterministic walk order, for packing.
    pub fn bin_convs(&self) -> Vec<&BinConvParams> {
        self.cells.iter().flat_map(|c| c.bin_convs()).collect()
    }
}

/// One CSV row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f32,
}

pub fn write_curve_csv(path: &Path, curve: &[TrainRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_acc,test_acc,lr\n");
    for r in curve {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.epoch, r.train_acc, r.test_acc, r.lr));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub struct TrainOutcome {
    pub curve: Vec<TrainRecord>,
    /// train_acc < test_acc on more than half of the last quarter of epochs
    /// (the Fig. 6 phenomenon).
    pub underfitting: bool,
    pub final_test_acc: f64,
    /// Total weight-gradient L2 norm, one entry per optimizer step.
    pub grad_norms: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub seed: u64,
    /// Cap on test samples scored per epoch.
    pub eval_cap: usize,
    /// Where to dump the parameter snapshot if the loss diverges.
    pub snapshot_path: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { seed: 0, eval_cap: usize::MAX, snapshot_path: None }
    }
}

enum AnyOpt {
    Sgd(SgdMomentum),
    Adam(Adam),
}

impl AnyOpt {
    fn new(spec: OptimizerSpec, lr: f32, weight_decay: f32) -> Self {
        match spec {
            OptimizerSpec::Sgd { momentum } => AnyOpt::Sgd(SgdMomentum::new(lr, momentum, weight_decay)),
            OptimizerSpec::Adam { beta1, beta2 } => AnyOpt::Adam(Adam::new(lr, beta1, beta2, weight_decay)),
        }
    }

    fn set_lr(&mut self, lr: f32) {
        match self {
            AnyOpt::Sgd(o) => o.lr = lr,
            AnyOpt::Adam(o) => o.lr = lr,
        }
    }

    fn step(&mut self, store: &mut ParamStore, group: ParamGroup) {
        match self {
            AnyOpt::Sgd(o) => o.step(store, group),
            AnyOpt::Adam(o) => o.step(store, group),
        }
    }
}

fn weight_grad_norm(store: &ParamStore) -> f32 {
    let mut sq = 0.0f64;
    for (_, p) in store.iter() {
        if p.group == ParamGroup::Weight {
            sq += p.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
        }
    }
    sq.sqrt() as f32
}

/// Eval-mode accuracy of the discrete network over `idxs[..cap]`.
pub fn evaluate_network(
    net: &Network,
    store: &mut ParamStore,
    ds: &Dataset,
    idxs: &[u32],
    batch_size: usize,
    cap: usize,
) -> Result<f64> {
    let take = idxs.len().min(cap.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused by AugmentSet::None
    let (mut correct, mut total) = (0usize, 0usize);
    for chunk in idxs[..take].chunks(batch_size) {
        let batch = make_batch(ds, chunk, AugmentSet::None, &mut rng)?;
        let mut tape = Tape::new();
        let logits = net.forward(&mut tape, store, &batch.images, false)?;
        correct += count_correct(tape.data(logits), net.cfg.num_classes, &batch.labels);
        total += chunk.len();
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Train `net` under `scheme`. Partial trailing batches are dropped (batch
/// statistics need >= 2 samples). On divergence the current parameters are
/// snapshotted to `opts.snapshot_path` before the error surfaces.
pub fn train(
    net: &Network,
    store: &mut ParamStore,
    scheme: &TrainScheme,
    train_ds: &Dataset,
    test_ds: &Dataset,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    scheme.validate()?;
    if train_ds.len() < scheme.batch_size {
        return Err(Error::Config(format!(
            "train set of {} samples smaller than one batch of {}",
            train_ds.len(),
            scheme.batch_size
        )));
    }
    let mut opt = AnyOpt::new(scheme.optimizer, scheme.schedule.lr_at(0)?, scheme.weight_decay);
    let mut data_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut order: Vec<u32> = (0..train_ds.len() as u32).collect();
    let test_idx: Vec<u32> = (0..test_ds.len() as u32).collect();
    let mut curve = Vec::with_capacity(scheme.epochs);
    let mut grad_norms = Vec::new();

    for epoch in 0..scheme.epochs {
        let lr = scheme.schedule.lr_at(epoch)?;
        opt.set_lr(lr);
        shuffle(&mut order, &mut data_rng);
        let (mut correct, mut seen) = (0usize, 0usize);
        for chunk in order.chunks_exact(scheme.batch_size) {
            let batch = make_batch(train_ds, chunk, scheme.augment, &mut data_rng)?;
            let mut tape = Tape::new();
            let logits = net
                .forward(&mut tape, store, &batch.images, true)
                .map_err(|e| snapshot_on_divergence(e, epoch, store, opts))?;
            correct += count_correct(tape.data(logits), net.cfg.num_classes, &batch.labels);
            seen += chunk.len();
            let loss = tape.cross_entropy(logits, &batch.labels)?;
            tape.backward(loss, store)
                .map_err(|e| snapshot_on_divergence(e, epoch, store, opts))?;
            grad_norms.push(weight_grad_norm(store));
            opt.step(store, ParamGroup::Weight);
            store.zero_grads();
        }
        let record = TrainRecord {
            epoch,
            train_acc: correct as f64 / seen.max(1) as f64,
            test_acc: evaluate_network(net, store, test_ds, &test_idx, scheme.batch_size, opts.eval_cap)?,
            lr,
        };
        on_epoch(&record);
        curve.push(record);
    }

    let quarter = curve.len().div_ceil(4).max(1);
    let tail = &curve[curve.len() - quarter..];
    let below = tail.iter().filter(|r| r.train_acc < r.test_acc).count();
    Ok(TrainOutcome {
        underfitting: 2 * below > quarter,
        final_test_acc: curve.last().map(|r| r.test_acc).unwrap_or(0.0),
        curve,
        grad_norms,
    })
}

fn snapshot_on_divergence(e: Error, epoch: usize, store: &ParamStore, opts: &TrainOptions) -> Error {
    match e {
        Error::NonFinite { op } => {
            let mut detail = format!("non-finite value in {op} at epoch {epoch}");
            if let Some(path) = &opts.snapshot_path {
                match save_checkpoint(store, path) {
                    Ok(()) => detail.push_str(&format!("; parameters snapshotted to {}", path.display())),
                    Err(se) => detail.push_str(&format!("; snapshot failed: {se}")),
                }
            }
            Error::Divergence(detail)
        }
        other => other,
    }
}
