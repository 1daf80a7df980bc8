//! The run configuration: TOML sections whose defaults are the paper
//! hyperparameters. Unknown keys are rejected so a typo cannot silently
//! fall back to a default, and every command writes the flag-resolved
//! config next to its outputs (`resolved.toml`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bnas_core::data::{load_cifar10_bin, synthetic_blobs, Dataset, NUM_CLASSES};
use bnas_core::search::SearchConfig;
use bnas_core::searchspace::{no_dilconv_space, standard_space, with_sepconv_space, LayerType};
use bnas_core::trainer::{NetworkConfig, TrainScheme};
use bnas_core::{Error, Result};

use crate::Cli;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; search and train both derive their RNG streams from it.
    pub seed: u64,
    /// Output directory for artifacts and the resolved snapshot.
    pub out: PathBuf,
    pub data: DataSection,
    pub search: SearchSection,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            data: DataSection::default(),
            search: SearchSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Flag-wins resolution against the parsed (or default) file config.
    pub fn apply_flags(&mut self, cli: &Cli) {
        if let Some(seed) = cli.seed {
            self.seed = seed;
        }
        if let Some(out) = &cli.out {
            self.out = out.clone();
        }
        if let Some(preset) = &cli.preset {
            self.train.preset = preset.clone();
        }
        if let Some(gamma) = cli.gamma {
            self.search.gamma = gamma;
        }
        if let Some(scheme) = &cli.scheme {
            self.train.scheme = scheme.clone();
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    /// Write the snapshot the run is reproducible from.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join("resolved.toml");
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// "synthetic" or "cifar10".
    pub source: String,
    /// CIFAR-10 binary batch directory (cifar10 source).
    pub dir: PathBuf,
    /// Class count (synthetic source; cifar10 is always 10).
    pub classes: usize,
    /// Record caps. For cifar10, 0 keeps the full split.
    pub train_n: usize,
    pub test_n: usize,
    /// Template/noise seed (synthetic source).
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "synthetic".into(),
            dir: PathBuf::from("data/cifar-10-batches-bin"),
            classes: 10,
            train_n: 2560,
            test_n: 512,
            seed: 9,
        }
    }
}

impl DataSection {
    pub fn num_classes(&self) -> usize {
        if self.source == "cifar10" {
            NUM_CLASSES
        } else {
            self.classes
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self.source.as_str() {
            "synthetic" => {
                if self.classes < 2 {
                    return Err(Error::Config(format!("synthetic data needs >= 2 classes, got {}", self.classes)));
                }
                if self.train_n == 0 || self.test_n == 0 {
                    return Err(Error::Config("synthetic data needs train_n and test_n >= 1".into()));
                }
                // One draw, then a disjoint split, so train and test share
                // class templates without sharing samples.
                let all = synthetic_blobs(self.classes, self.train_n + self.test_n, self.seed);
                let test_idx: Vec<u32> = (self.train_n as u32..(self.train_n + self.test_n) as u32).collect();
                Ok((all.take(self.train_n), all.subset(&test_idx)))
            }
            "cifar10" => {
                let (train, test) = load_cifar10_bin(&self.dir)?;
                let train = if self.train_n > 0 { train.take(self.train_n) } else { train };
                let test = if self.test_n > 0 { test.take(self.test_n) } else { test };
                Ok((train, test))
            }
            other => Err(Error::Config(format!(
                "unknown data source {other:?} (expected synthetic or cifar10)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub num_cells: usize,
    pub init_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_lr: f32,
    pub weight_momentum: f32,
    pub weight_decay: f32,
    pub lambda: f32,
    pub tau: f32,
    pub arch_lr: f32,
    /// Zeroise divisor at discretization; inf drops Zeroise entirely.
    pub gamma: f64,
    pub skip_enabled: bool,
    /// "standard", "no_dilconv" or "with_sepconv".
    pub space: String,
    /// Cap on validation samples scored per epoch.
    pub eval_cap: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = SearchConfig::default();
        SearchSection {
            num_cells: d.num_cells,
            init_channels: d.init_channels,
            epochs: d.epochs,
            batch_size: d.batch_size,
            weight_lr: d.weight_lr,
            weight_momentum: d.weight_momentum,
            weight_decay: d.weight_decay,
            lambda: d.lambda,
            tau: d.tau,
            arch_lr: d.arch_lr,
            gamma: d.gamma,
            skip_enabled: d.skip_enabled,
            space: "standard".into(),
            eval_cap: d.eval_cap,
        }
    }
}

impl SearchSection {
    pub fn space(&self) -> Result<Vec<LayerType>> {
        match self.space.as_str() {
            "standard" => Ok(standard_space()),
            "no_dilconv" => Ok(no_dilconv_space()),
            "with_sepconv" => Ok(with_sepconv_space()),
            other => Err(Error::Config(format!(
                "unknown op space {other:?} (expected standard, no_dilconv or with_sepconv)"
            ))),
        }
    }

    pub fn to_search_config(&self, seed: u64, num_classes: usize) -> Result<SearchConfig> {
        let cfg = SearchConfig {
            num_cells: self.num_cells,
            init_channels: self.init_channels,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_lr: self.weight_lr,
            weight_momentum: self.weight_momentum,
            weight_decay: self.weight_decay,
            lambda: self.lambda,
            tau: self.tau,
            arch_lr: self.arch_lr,
            seed,
            gamma: self.gamma,
            num_classes,
            skip_enabled: self.skip_enabled,
            space: self.space()?,
            eval_cap: self.eval_cap,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// "standard", "minimal" or "minimal-longer".
    pub scheme: String,
    /// 0 keeps the scheme's own epoch count.
    pub epochs: usize,
    /// 0 keeps the scheme's own batch size.
    pub batch_size: usize,
    /// Network shape preset; num_cells/init_channels below override it.
    pub preset: String,
    /// 0 keeps the preset value.
    pub num_cells: usize,
    /// 0 keeps the preset value.
    pub init_channels: usize,
    pub stem_group_conv: bool,
    pub skip_enabled: bool,
    /// Genotype path; "" means <out>/genotype.json.
    pub genotype: String,
    /// Cap on test samples scored per epoch; 0 means no cap.
    pub eval_cap: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            scheme: "standard".into(),
            epochs: 0,
            batch_size: 0,
            preset: "bnas-mini".into(),
            num_cells: 0,
            init_channels: 0,
            stem_group_conv: false,
            skip_enabled: true,
            genotype: String::new(),
            eval_cap: 0,
        }
    }
}

impl TrainSection {
    pub fn to_scheme(&self) -> Result<TrainScheme> {
        let mut s = TrainScheme::by_name(&self.scheme)?;
        if self.epochs > 0 {
            s.scale_epochs(self.epochs);
        }
        if self.batch_size > 0 {
            s.batch_size = self.batch_size;
        }
        s.validate()?;
        Ok(s)
    }

    /// Final-network shape: preset, then explicit overrides, then the
    /// genotype's provenance gamma.
    pub fn to_network_config(&self, gamma: f64, num_classes: usize) -> Result<NetworkConfig> {
        let mut cfg = NetworkConfig::preset(&self.preset)?;
        if self.num_cells > 0 {
            cfg.num_cells = self.num_cells;
        }
        if self.init_channels > 0 {
            cfg.init_channels = self.init_channels;
        }
        cfg.gamma = gamma;
        cfg.stem_group_conv = self.stem_group_conv;
        cfg.skip_enabled = self.skip_enabled;
        cfg.num_classes = num_classes;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_cap(&self) -> usize {
        if self.eval_cap == 0 {
            usize::MAX
        } else {
            self.eval_cap
        }
    }
}
