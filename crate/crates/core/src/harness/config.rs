//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::cam::CompressionMode;
use crate::cil::{BackboneConfig, CodecRunConfig, TrainConfig};
use crate::datamodel::{BudgetMode, ProtocolConfig, ProtocolKind};
use crate::desk::DeskConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    /// Generated in memory.
    Desk(DeskConfig),
    /// An image directory read by `ingest_directory`.
    Directory { path: PathBuf, resize: Option<(usize, usize)>, test_fraction: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// `raw_reference_dims == (0, 0)` means "the dataset's image size".
    pub protocol: ProtocolConfig,
    /// Defaults to `seed`.
    pub class_order_seed: Option<u64>,
    pub train: TrainConfig,
    pub codec: CodecRunConfig,
    pub mode: CompressionMode,
    pub out: PathBuf,
    /// Seeds the classifier, the codec and (by default) the class order.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut codec = CodecRunConfig::default();
        codec.train.batch_size = 8;
        Self {
            dataset: DatasetSource::Desk(DeskConfig::default()),
            protocol: ProtocolConfig {
                kind: ProtocolKind::Lfs,
                base_classes: 2,
                step_classes: 2,
                budget_mode: BudgetMode::PerClassGrowing,
                budget_images: 20,
                raw_reference_dims: (0, 0),
            },
            class_order_seed: None,
            train: TrainConfig::default(),
            codec,
            mode: CompressionMode::CamComposite,
            out: PathBuf::from("runs/latest"),
            seed: 0,
        }
    }
}

fn dims(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once('x')?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

fn fmt_dims(d: (usize, usize)) -> String {
    format!("{}x{}", d.0, d.1)
}

fn blocks(s: &str) -> Option<Vec<(usize, usize)>> {
    s.split(',')
        .map(|b| {
            let (w, st) = b.split_once('/')?;
            Some((w.trim().parse().ok()?, st.trim().parse().ok()?))
        })
        .collect()
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
        }
        let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got `{value}`"));
        fn desk<'a>(cfg: &'a mut ExperimentConfig, key: &str) -> Result<&'a mut DeskConfig> {
            match &mut cfg.dataset {
                DatasetSource::Desk(d) => Ok(d),
                _ => Err(Error::Config(format!("{key} only applies to the desk dataset"))),
            }
        }
        let v = value.trim();
        match key {
            "dataset" => {
                self.dataset = if v == "desk" {
                    DatasetSource::Desk(DeskConfig::default())
                } else {
                    DatasetSource::Directory { path: PathBuf::from(v), resize: None, test_fraction: 0.2 }
                }
            }
            "desk_classes" => desk(self, key)?.classes = num(key, v)?,
            "desk_train_per_class" => desk(self, key)?.train_per_class = num(key, v)?,
            "desk_test_per_class" => desk(self, key)?.test_per_class = num(key, v)?,
            "desk_size" => desk(self, key)?.size = num(key, v)?,
            "desk_seed" => desk(self, key)?.seed = num(key, v)?,
            "resize" | "test_fraction" => match &mut self.dataset {
                DatasetSource::Directory { resize, test_fraction, .. } => {
                    if key == "resize" {
                        *resize = if v == "none" { None } else { Some(dims(v).ok_or_else(|| bad("HxW or none"))?) };
                    } else {
                        *test_fraction = num(key, v)?;
                    }
                }
                _ => return Err(Error::Config(format!("{key} only applies to directory datasets"))),
            },
            "protocol" => self.protocol.kind = v.parse()?,
            "base_classes" => self.protocol.base_classes = num(key, v)?,
            "step_classes" => self.protocol.step_classes = num(key, v)?,
            "budget_mode" => self.protocol.budget_mode = v.parse()?,
            "budget_images" => self.protocol.budget_images = num(key, v)?,
            "raw_reference_dims" => {
                self.protocol.raw_reference_dims = if v == "auto" { (0, 0) } else { dims(v).ok_or_else(|| bad("HxW or auto"))? }
            }
            "class_order_seed" => self.class_order_seed = if v == "auto" { None } else { Some(num(key, v)?) },
            "initial_epochs" => self.train.initial_epochs = num(key, v)?,
            "incremental_epochs" => self.train.incremental_epochs = num(key, v)?,
            "base_lr" => self.train.base_lr = num(key, v)?,
            "momentum" => self.train.momentum = num(key, v)?,
            "weight_decay" => self.train.weight_decay = num(key, v)?,
            "lr_decay_epochs" => {
                self.train.lr_decay_epochs =
                    if v.is_empty() { Vec::new() } else { v.split(',').map(|e| num(key, e.trim())).collect::<Result<_>>()? }
            }
            "lr_decay_factor" => self.train.lr_decay_factor = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "distill_weight" => self.train.distill_weight = if v == "auto" { None } else { Some(num(key, v)?) },
            "augment" => self.train.augment = num(key, v)?,
            "backbone_stem_width" => self.train.backbone.stem_width = num(key, v)?,
            "backbone_stem_stride" => self.train.backbone.stem_stride = num(key, v)?,
            "backbone_blocks" => self.train.backbone.blocks = blocks(v).ok_or_else(|| bad("width/stride,..."))?,
            "codec_lambda" => self.codec.train.lambda = num(key, v)?,
            "codec_epochs" => self.codec.train.epochs = num(key, v)?,
            "codec_batch_size" => self.codec.train.batch_size = num(key, v)?,
            "codec_lr" => self.codec.train.lr = num(key, v)?,
            "codec_finetune_lr" => self.codec.train.finetune_lr = num(key, v)?,
            "codec_finetune_epochs" => self.codec.finetune_epochs = num(key, v)?,
            "codec_channels" => self.codec.train.arch.channels = num(key, v)?,
            "codec_latent" => self.codec.train.arch.latent = num(key, v)?,
            "codec_hyper" => self.codec.train.arch.hyper = num(key, v)?,
            "cam_threshold" => self.codec.cam_threshold = num(key, v)?,
            "mode" => self.mode = v.parse()?,
            "out" => self.out = PathBuf::from(v),
            "seed" => self.seed = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        // `dataset` resets dataset-specific keys, so it goes first.
        let mut lines: Vec<(usize, &str, &str)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            lines.push((n + 1, k.trim(), v.trim()));
        }
        lines.sort_by_key(|&(_, k, _)| k != "dataset");
        for (n, k, v) in lines {
            self.set(k, v).map_err(|e| Error::Config(format!("line {n}: {e}")))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.base_classes.checked_sub(1).ok_or_else(|| Error::Config("base_classes must be positive".into()))?;
        if self.protocol.step_classes == 0 {
            return Err(Error::Config("step_classes must be positive".into()));
        }
        self.train.validate()?;
        if let DatasetSource::Directory { path, test_fraction, .. } = &self.dataset {
            if !path.is_dir() {
                return Err(Error::Config(format!("dataset: {} is not a directory", path.display())));
            }
            if !(0.0..1.0).contains(test_fraction) {
                return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
            }
        }
        if !(self.codec.cam_threshold > 0.0 && self.codec.cam_threshold < 1.0) {
            return Err(Error::Config("cam_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        match &self.dataset {
            DatasetSource::Desk(d) => {
                kv("dataset", "desk".into());
                kv("desk_classes", d.classes.to_string());
                kv("desk_train_per_class", d.train_per_class.to_string());
                kv("desk_test_per_class", d.test_per_class.to_string());
                kv("desk_size", d.size.to_string());
                kv("desk_seed", d.seed.to_string());
            }
            DatasetSource::Directory { path, resize, test_fraction } => {
                kv("dataset", path.display().to_string());
                kv("resize", resize.map_or("none".into(), fmt_dims));
                kv("test_fraction", test_fraction.to_string());
            }
        }
        let p = &self.protocol;
        kv("protocol", format!("{:?}", p.kind).to_lowercase());
        kv("base_classes", p.base_classes.to_string());
        kv("step_classes", p.step_classes.to_string());
        kv("budget_mode", match p.budget_mode {
            BudgetMode::FixedTotal => "fixed_total".into(),
            BudgetMode::PerClassGrowing => "per_class_growing".into(),
        });
        kv("budget_images", p.budget_images.to_string());
        kv("raw_reference_dims", if p.raw_reference_dims == (0, 0) { "auto".into() } else { fmt_dims(p.raw_reference_dims) });
        kv("class_order_seed", self.class_order_seed.map_or("auto".into(), |s| s.to_string()));
        let t = &self.train;
        kv("initial_epochs", t.initial_epochs.to_string());
        kv("incremental_epochs", t.incremental_epochs.to_string());
        kv("base_lr", t.base_lr.to_string());
        kv("momentum", t.momentum.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("lr_decay_epochs", t.lr_decay_epochs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","));
        kv("lr_decay_factor", t.lr_decay_factor.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("distill_weight", t.distill_weight.map_or("auto".into(), |w| w.to_string()));
        kv("augment", t.augment.to_string());
        let b: &BackboneConfig = &t.backbone;
        kv("backbone_stem_width", b.stem_width.to_string());
        kv("backbone_stem_stride", b.stem_stride.to_string());
        kv("backbone_blocks", b.blocks.iter().map(|(w, s)| format!("{w}/{s}")).collect::<Vec<_>>().join(","));
        let c = &self.codec;
        kv("codec_lambda", c.train.lambda.to_string());
        kv("codec_epochs", c.train.epochs.to_string());
        kv("codec_batch_size", c.train.batch_size.to_string());
        kv("codec_lr", c.train.lr.to_string());
        kv("codec_finetune_lr", c.train.finetune_lr.to_string());
        kv("codec_finetune_epochs", c.finetune_epochs.to_string());
        kv("codec_channels", c.train.arch.channels.to_string());
        kv("codec_latent", c.train.arch.latent.to_string());
        kv("codec_hyper", c.train.arch.hyper.to_string());
        kv("cam_threshold", c.cam_threshold.to_string());
        kv("mode", self.mode.to_string());
        kv("out", self.out.display().to_string());
        kv("seed", self.seed.to_string());
        s
    }

    /// Hex SHA-256 prefix of everything except the output directory.
    pub fn digest(&self) -> String {
        let text: String = self.to_text().lines().filter(|l| !l.starts_with("out =")).map(|l| format!("{l}\n")).collect();
        let h = Sha256::digest(text.as_bytes());
        h[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
