//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "PDTC"  u32 version  u32 record count
//! record: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f32 data
//! u32 metadata length, UTF-8 metadata (one key=value per line)
//! ```
//!
//! Records hold every network tensor (`encoder.conv1.weight`,
//! `disc_rf.conv2.bn.running_var`, ...) and the optimizer buffers
//! (`optim.converter.velocity.3`, ...). Metadata holds the training
//! configuration, stream positions and counters.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use pdt_core::networks::{NetworkKind, Networks};
use pdt_core::optim::{OptimizerKind, OptimizerState};
use pdt_core::rng;
use pdt_core::training::{Optimizers, StreamPositions, Trainer, TrainingConfig, TrainingMode, UpdateCounts};
use pdt_core::Tensor;

pub const MAGIC: &[u8; 4] = b"PDTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
    /// Ordered `key=value` entries.
    pub metadata: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.records.len())?.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&u16::try_from(r.name.len()).context("record name too long")?.to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(u8::try_from(r.shape.len())?);
            for &d in &r.shape {
                out.extend_from_slice(&u32::try_from(d)?.to_le_bytes());
            }
            if r.shape.iter().product::<usize>() != r.data.len() {
                bail!("record {} has shape {:?} but {} values", r.name, r.shape, r.data.len());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                bail!("metadata entry {k:?} cannot be encoded");
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&u32::try_from(meta.len())?.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            bail!("not a checkpoint (bad magic)");
        }
        let version = r.u32()?;
        if version != VERSION {
            bail!("unsupported checkpoint version {version}");
        }
        let count = r.u32()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).context("record name is not UTF-8")?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).context("record too large")?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            records.push(Record { name, shape, data });
        }
        let len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(len)?).context("metadata is not UTF-8")?;
        if r.pos != bytes.len() {
            bail!("{} trailing bytes after metadata", bytes.len() - r.pos);
        }
        let metadata = meta
            .lines()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| anyhow!("metadata line {l:?} has no '='"))
            })
            .collect::<Result<_>>()?;
        Ok(Checkpoint { records, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).with_context(|| format!("cannot write checkpoint {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
        Self::decode(&bytes).with_context(|| format!("invalid checkpoint {}", path.display()))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key).ok_or_else(|| anyhow!("checkpoint metadata lacks {key}"))?;
        v.parse().map_err(|e| anyhow!("checkpoint metadata {key}={v}: {e}"))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).context("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// How the dataset was split for training; evaluation reuses it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            val_frac: 0.05,
            test_frac: 0.05,
            seed: 0,
        }
    }
}

const OPTIMIZERS: [&str; 3] = ["converter", "real_fake", "domain"];

fn optimizers(o: &Optimizers) -> [&OptimizerState<f32>; 3] {
    [&o.converter, &o.real_fake, &o.domain]
}

fn optimizers_mut(o: &mut Optimizers) -> [&mut OptimizerState<f32>; 3] {
    [&mut o.converter, &mut o.real_fake, &mut o.domain]
}

fn record(name: String, t: &Tensor<f32>) -> Record {
    Record {
        name,
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    }
}

/// Snapshot of all training state.
pub fn from_trainer(tr: &Trainer, split: &SplitSpec) -> Checkpoint {
    let c = &tr.config;
    let mut records = Vec::new();
    let mut meta: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| meta.push((k.to_string(), v));
    put("format", "pdt-checkpoint".into());
    put("mode", c.mode.name().into());
    put("batch_size", c.batch_size.to_string());
    put("lr", c.lr.to_string());
    put("lr_drop_epoch", c.lr_drop_epoch.to_string());
    put("lr_after_drop", c.lr_after_drop.to_string());
    put("total_epochs", c.total_epochs.to_string());
    put("momentum", c.momentum.to_string());
    put("seed", c.seed.to_string());
    put("width", c.width.to_string());
    match c.optimizer {
        OptimizerKind::SgdMomentum => put("optimizer", "sgd".into()),
        OptimizerKind::Adam { beta2, eps } => {
            put("optimizer", "adam".into());
            put("adam.beta2", beta2.to_string());
            put("adam.eps", eps.to_string());
        }
    }
    put("non_saturating", c.non_saturating.to_string());
    let streams = tr.stream_positions();
    put("rng.algorithm", rng::ALGORITHM.into());
    put("rng.seed", c.seed.to_string());
    put("rng.selection", streams.selection.to_string());
    put("rng.negatives", streams.negatives.to_string());
    put("rng.shuffle", streams.shuffle.to_string());
    put("epoch", tr.epoch.to_string());
    put("step", tr.step.to_string());
    put("updates.converter", tr.updates.converter.to_string());
    put("updates.real_fake", tr.updates.real_fake.to_string());
    put("updates.domain", tr.updates.domain.to_string());
    put("split.val_frac", split.val_frac.to_string());
    put("split.test_frac", split.test_frac.to_string());
    put("split.seed", split.seed.to_string());
    for kind in NetworkKind::ALL {
        let net = tr.nets.get(kind);
        for (name, t) in net.named_tensors() {
            records.push(record(format!("{kind}.{name}"), t));
        }
        for l in &net.layers {
            if let Some(n) = &l.norm {
                let p = format!("bn.{kind}.{}", l.spec.name);
                put(&format!("{p}.eps"), n.eps.to_string());
                put(&format!("{p}.momentum"), n.momentum.to_string());
                put(&format!("{p}.updates"), n.updates.to_string());
            }
        }
    }
    for (name, o) in OPTIMIZERS.iter().zip(optimizers(&tr.optim)) {
        put(&format!("optim.{name}.lr"), o.lr.to_string());
        put(&format!("optim.{name}.steps"), o.steps.to_string());
        for (i, v) in o.velocity.iter().enumerate() {
            records.push(record(format!("optim.{name}.velocity.{i}"), v));
        }
        for (i, v) in o.second.iter().enumerate() {
            records.push(record(format!("optim.{name}.second.{i}"), v));
        }
    }
    Checkpoint { records, metadata: meta }
}

/// Training configuration stored in a checkpoint.
pub fn config_of(ck: &Checkpoint) -> Result<TrainingConfig> {
    let mode = ck.get("mode").unwrap_or_default();
    let optimizer = match ck.get("optimizer") {
        Some("sgd") => OptimizerKind::SgdMomentum,
        Some("adam") => OptimizerKind::Adam {
            beta2: ck.parse("adam.beta2")?,
            eps: ck.parse("adam.eps")?,
        },
        other => bail!("unknown optimizer {other:?} in checkpoint"),
    };
    Ok(TrainingConfig {
        mode: TrainingMode::parse(mode).ok_or_else(|| anyhow!("unknown mode {mode:?} in checkpoint"))?,
        batch_size: ck.parse("batch_size")?,
        lr: ck.parse("lr")?,
        lr_drop_epoch: ck.parse("lr_drop_epoch")?,
        lr_after_drop: ck.parse("lr_after_drop")?,
        total_epochs: ck.parse("total_epochs")?,
        momentum: ck.parse("momentum")?,
        seed: ck.parse("seed")?,
        width: ck.parse("width")?,
        optimizer,
        non_saturating: ck.parse("non_saturating")?,
    })
}

pub fn split_of(ck: &Checkpoint) -> Result<SplitSpec> {
    Ok(SplitSpec {
        val_frac: ck.parse("split.val_frac")?,
        test_frac: ck.parse("split.test_frac")?,
        seed: ck.parse("split.seed")?,
    })
}

/// Rebuild the trainer, checking that every record matches the
/// architecture implied by the stored configuration.
pub fn to_trainer(ck: &Checkpoint) -> Result<(Trainer, SplitSpec)> {
    let config = config_of(ck)?;
    config.validate()?;
    if ck.get("rng.algorithm") != Some(rng::ALGORITHM) {
        bail!("checkpoint uses random stream {:?}, expected {:?}", ck.get("rng.algorithm"), rng::ALGORITHM);
    }
    let mut by_name: HashMap<&str, &Record> = HashMap::new();
    for r in &ck.records {
        if by_name.insert(&r.name, r).is_some() {
            bail!("duplicate record {}", r.name);
        }
    }
    let mut used = 0;
    let mut fill = |name: String, t: &mut Tensor<f32>| -> Result<()> {
        let r = by_name.get(name.as_str()).ok_or_else(|| anyhow!("checkpoint lacks tensor {name}"))?;
        if r.shape != t.shape() {
            bail!("tensor {name} has shape {:?}, architecture needs {:?}", r.shape, t.shape());
        }
        t.data_mut().copy_from_slice(&r.data);
        used += 1;
        Ok(())
    };
    let mut nets = Networks::<f32>::init(config.width, config.seed);
    for kind in NetworkKind::ALL {
        for (name, t) in nets.get_mut(kind).named_tensors_mut() {
            fill(format!("{kind}.{name}"), t)?;
        }
    }
    let mut optim = Optimizers::new(&config, &nets);
    for (name, o) in OPTIMIZERS.iter().zip(optimizers_mut(&mut optim)) {
        for (i, v) in o.velocity.iter_mut().enumerate() {
            fill(format!("optim.{name}.velocity.{i}"), v)?;
        }
        for (i, v) in o.second.iter_mut().enumerate() {
            fill(format!("optim.{name}.second.{i}"), v)?;
        }
    }
    if used != ck.records.len() {
        bail!("checkpoint has {} records the architecture does not use", ck.records.len() - used);
    }
    for (name, o) in OPTIMIZERS.iter().zip(optimizers_mut(&mut optim)) {
        o.lr = ck.parse(&format!("optim.{name}.lr"))?;
        o.steps = ck.parse(&format!("optim.{name}.steps"))?;
    }
    for kind in NetworkKind::ALL {
        for l in &mut nets.get_mut(kind).layers {
            let name = l.spec.name;
            if let Some(n) = &mut l.norm {
                let p = format!("bn.{kind}.{name}");
                n.eps = ck.parse(&format!("{p}.eps"))?;
                n.momentum = ck.parse(&format!("{p}.momentum"))?;
                n.updates = ck.parse(&format!("{p}.updates"))?;
            }
        }
    }
    let updates = UpdateCounts {
        converter: ck.parse("updates.converter")?,
        real_fake: ck.parse("updates.real_fake")?,
        domain: ck.parse("updates.domain")?,
    };
    let streams = StreamPositions {
        selection: ck.parse("rng.selection")?,
        negatives: ck.parse("rng.negatives")?,
        shuffle: ck.parse("rng.shuffle")?,
    };
    let epoch = ck.parse("epoch")?;
    let step = ck.parse("step")?;
    let split = split_of(ck)?;
    Ok((Trainer::from_parts(config, nets, optim, epoch, step, updates, streams), split))
}
