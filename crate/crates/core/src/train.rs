//! SGD training of the combined objective on sampled pair batches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use casn_grad::{grad, Array, Tensor};
use serde::Serialize;

use crate::attention::{aligned_profiles, siamese_attention_maps, spatial_consistency};
use crate::backbone::CasnModel;
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::data::{load_images, scan_dataset, stack, Dataset, PairBatch, PairSampler, Split};
use crate::error::{Error, Result};
use crate::losses::{total_loss, AlignParams, LossBreakdown, Objective};
use crate::nn::{Module, Slot};
use crate::plot::LinePlot;

/// Step-decayed learning rate for a 0-based epoch.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch >= cfg.lr_decay_epoch {
        cfg.lr * cfg.lr_decay_factor
    } else {
        cfg.lr
    }
}

/// SGD with momentum and L2 weight decay:
/// `v = mu v + (g + wd w)`, `w -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Array>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Parameters without an entry in `grads` are left untouched.
    pub fn step(&mut self, model: &mut CasnModel, grads: &BTreeMap<String, Array>, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit("", &mut |name, slot| {
            let (Slot::Param(p), Some(g)) = (slot, grads.get(name)) else {
                return;
            };
            let w = p.value();
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| Array::zeros(w.shape()));
            for ((vi, gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data()) {
                *vi = mu * *vi + gi + wd * wi;
            }
            let updated = w.zip_broadcast(v, |wi, vi| wi - lr * vi);
            *p = Tensor::variable(updated);
        });
    }
}

/// Preloaded training images with dense labels.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub images: Vec<Array>,
    pub labels: Vec<usize>,
    pub cameras: Vec<u32>,
    /// Raw identity of each dense label.
    pub identities: Vec<u32>,
}

impl TrainingData {
    pub fn from_dataset(ds: &Dataset, height: usize, width: usize) -> Result<Self> {
        let train = ds.split(Split::Train);
        Ok(Self {
            images: load_images(&train, height, width)?,
            labels: train
                .iter()
                .map(|s| ds.label_of(s.identity).expect("train identities are indexed"))
                .collect(),
            cameras: train.iter().map(|s| s.camera).collect(),
            identities: ds.train_identities.clone(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.identities.len()
    }
}

/// Every same-identity pair `(i, j)`, `i < j`, on different cameras; an
/// identity seen by a single camera contributes its same-camera pairs.
pub fn positive_pairs(labels: &[usize], cameras: &[u32]) -> Vec<(usize, usize)> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::new();
    for c in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let all: Vec<(usize, usize)> = members
            .iter()
            .enumerate()
            .flat_map(|(k, &i)| members[k + 1..].iter().map(move |&j| (i, j)))
            .collect();
        let cross: Vec<(usize, usize)> = all.iter().copied().filter(|&(i, j)| cameras[i] != cameras[j]).collect();
        out.extend(if cross.is_empty() { all } else { cross });
    }
    out
}

/// Mean spatial consistency of the Siamese attention of `pairs`, with the
/// model in evaluation mode.
pub fn probe_consistency(
    model: &CasnModel,
    images: &[Array],
    pairs: &[(usize, usize)],
    align: AlignParams,
) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let was_training = model.is_training();
    model.set_training(false);
    let result = (|| -> Result<f64> {
        let a: Vec<&Array> = pairs.iter().map(|p| &images[p.0]).collect();
        let b: Vec<&Array> = pairs.iter().map(|p| &images[p.1]).collect();
        let sa = siamese_attention_maps(model, &stack(&a)?, &stack(&b)?, false)?;
        let length = align.length.unwrap_or(sa.map1().height());
        let v1 = aligned_profiles(sa.map1(), align.trim_threshold, length)?;
        let v2 = aligned_profiles(sa.map2(), align.trim_threshold, length)?;
        let sc = spatial_consistency(&v1, &v2)?;
        Ok(sc.data().iter().sum::<f64>() / pairs.len() as f64)
    })();
    model.set_training(was_training);
    result.map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub ide: f64,
    pub ia: Option<f64>,
    pub sa: f64,
    pub total: f64,
    pub positive_consistency: Option<f64>,
}

/// Means over the steps of one epoch (1-based `epoch`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub ide: f64,
    pub ia: Option<f64>,
    pub sa: f64,
    pub total: f64,
    /// Mean positive-pair spatial consistency over steps with positives.
    pub positive_consistency: Option<f64>,
    /// Consistency over all positive training pairs after the epoch
    /// (evaluation mode).
    pub probe_consistency: Option<f64>,
    pub steps: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "off".to_string(), |x| format!("{x:.6}"))
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} lr={} L_ide={:.6} L_ia={} L_sa={:.6} L={:.6} sc_pos={} sc_probe={} steps={}",
            self.epoch,
            self.lr,
            self.ide,
            opt(self.ia),
            self.sa,
            self.total,
            opt(self.positive_consistency),
            opt(self.probe_consistency),
            self.steps
        )
    }
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} step={} lr={} L_ide={:.6} L_ia={} L_sa={:.6} L={:.6} sc_pos={}",
            self.epoch,
            self.step,
            self.lr,
            self.ide,
            opt(self.ia),
            self.sa,
            self.total,
            opt(self.positive_consistency)
        )
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: CasnModel,
    pub optimizer: Sgd,
    pub objective: Objective,
    data: TrainingData,
    sampler: PairSampler,
    probe_pairs: Vec<(usize, usize)>,
    /// Completed epochs.
    pub epoch: usize,
    pub steps: Vec<StepRecord>,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(config: RunConfig, data: TrainingData) -> Result<Self> {
        config.validate()?;
        if data.images.is_empty() {
            return Err(Error::Dataset("no training images".into()));
        }
        let model = CasnModel::new(&config.model_config(data.num_classes())?, config.seed)?;
        let sampler = PairSampler::new(
            &data.labels,
            &data.cameras,
            config.train.batch_size,
            config.data.positive_fraction,
            config.seed ^ 0x5eed_5a3b_1e00,
        )?;
        Ok(Self {
            probe_pairs: positive_pairs(&data.labels, &data.cameras),
            objective: config.objective()?,
            optimizer: Sgd::new(config.train.momentum, config.train.weight_decay),
            config,
            model,
            data,
            sampler,
            epoch: 0,
            steps: Vec::new(),
            history: Vec::new(),
        })
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    pub fn steps_per_epoch(&self) -> usize {
        match self.config.train.steps_per_epoch {
            0 => self.data.images.len().div_ceil(self.config.train.batch_size),
            n => n,
        }
    }

    pub fn next_batch(&mut self) -> Result<PairBatch> {
        self.sampler.next_batch(&self.data.images, self.config.data.hflip)
    }

    /// Loss on `batch` and the gradient of every reachable parameter.
    pub fn loss_and_grads(&mut self, batch: &PairBatch) -> Result<(LossBreakdown, BTreeMap<String, Array>)> {
        self.model.set_training(true);
        let params = self.model.named_parameters();
        let loss = total_loss(&self.model, batch, &self.objective)?;
        if !loss.total.value().all_finite() {
            return Err(Error::InvalidInput(format!("non-finite loss {}", loss.total.item())));
        }
        let refs: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
        let grads = grad(&loss.total, &refs, false)
            .into_iter()
            .zip(&params)
            .filter_map(|(g, (name, _))| g.map(|g| (name.clone(), g.value().clone())))
            .collect();
        Ok((loss, grads))
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch()?;
        let (loss, grads) = self.loss_and_grads(&batch)?;
        let lr = learning_rate(&self.config.train, self.epoch);
        self.optimizer.step(&mut self.model, &grads, lr);
        let record = StepRecord {
            epoch: self.epoch + 1,
            step: self.steps.len(),
            lr,
            ide: loss.ide.item(),
            ia: loss.ia.as_ref().map(|t| t.item()),
            sa: loss.sa.loss.item(),
            total: loss.total.item(),
            positive_consistency: loss.sa.positive_consistency,
        };
        self.steps.push(record.clone());
        Ok(record)
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let n = self.steps_per_epoch();
        let records: Vec<StepRecord> = (0..n).map(|_| self.step()).collect::<Result<_>>()?;
        let record = EpochRecord {
            epoch: self.epoch + 1,
            lr: learning_rate(&self.config.train, self.epoch),
            ide: mean(records.iter().map(|r| r.ide)).unwrap_or(0.0),
            ia: mean(records.iter().filter_map(|r| r.ia)),
            sa: mean(records.iter().map(|r| r.sa)).unwrap_or(0.0),
            total: mean(records.iter().map(|r| r.total)).unwrap_or(0.0),
            positive_consistency: mean(records.iter().filter_map(|r| r.positive_consistency)),
            probe_consistency: probe_consistency(&self.model, &self.data.images, &self.probe_pairs, self.objective.align)?,
            steps: n,
        };
        self.epoch += 1;
        self.history.push(record.clone());
        Ok(record)
    }

    /// Train for the remaining configured epochs.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&mut Self, &EpochRecord) -> Result<()>) -> Result<()> {
        while self.epoch < self.config.train.epochs {
            let record = self.run_epoch()?;
            on_epoch(self, &record)?;
        }
        self.model.set_training(false);
        Ok(())
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        Checkpoint::capture(
            &mut self.model,
            &self.optimizer.velocity,
            &self.config,
            self.epoch,
            &self.data.identities,
        )
    }

    /// Loss curves: total (blue), identity (orange), identification
    /// attention (green), Siamese (red).
    pub fn loss_plot(&self) -> LinePlot {
        let mut p = LinePlot::new(640, 360);
        p.add(self.history.iter().map(|r| r.total).collect())
            .add(self.history.iter().map(|r| r.ide).collect())
            .add(self.history.iter().map(|r| r.ia.unwrap_or(f64::NAN)).collect())
            .add(self.history.iter().map(|r| r.sa).collect());
        p
    }
}

/// Files written by `run_training`.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub steps_log: PathBuf,
    pub loss_curve: PathBuf,
}

impl TrainOutputs {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            checkpoint: dir.join("checkpoint.ckpt"),
            metrics_log: dir.join("metrics.log"),
            steps_log: dir.join("steps.log"),
            loss_curve: dir.join("loss_curve.png"),
        }
    }
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Scan the dataset and train; every output lands in `train.output_dir`.
pub fn run_training(config: &RunConfig) -> Result<(Trainer, TrainOutputs)> {
    config.validate()?;
    let dataset = scan_dataset(&config.data.root)?;
    let data = TrainingData::from_dataset(&dataset, config.data.height, config.data.width)?;
    let out = TrainOutputs::new(&config.train.output_dir);
    fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    let cfg_path = out.dir.join("config.toml");
    fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    for p in [&out.metrics_log, &out.steps_log] {
        fs::write(p, "").map_err(|e| Error::io(p, e))?;
    }

    let mut trainer = Trainer::new(config.clone(), data)?;
    log::info!(
        "training on {} images, {} identities, {} steps/epoch",
        trainer.data().images.len(),
        trainer.data().num_classes(),
        trainer.steps_per_epoch()
    );
    let every = config.train.checkpoint_every;
    trainer.run(|t, record| {
        let first = t.steps.len() - record.steps;
        let mut lines = String::new();
        for s in &t.steps[first..] {
            let _ = writeln!(lines, "{}", s.log_line());
        }
        append(&out.steps_log, &lines)?;
        append(&out.metrics_log, &format!("{}\n", record.log_line()))?;
        log::info!("{}", record.log_line());
        if every > 0 && record.epoch % every == 0 {
            t.checkpoint().save(&out.dir.join(format!("checkpoint_epoch{:03}.ckpt", record.epoch)))?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&out.checkpoint)?;
    trainer.loss_plot().save(&out.loss_curve)?;
    Ok((trainer, out))
}
