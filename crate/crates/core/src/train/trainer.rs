use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::head::{HeadTrace, ProjectionHead};
use super::lars::{lars_step, LarsConfig, LarsState};
use super::loss::nt_xent_with_grad;
use super::schedule::lr_at;
use crate::augment::{AugmentConfig, ViewBatch};
use crate::container::{Tensor, TensorFile};
use crate::error::{Error, Result};
use crate::io::RUN_HASH_PREFIX;
use crate::model::{encoder_to_file, load_weights, FeatureMap, Grads, NextChannelEncoder, ParamStore};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_patches: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub projection_head: Vec<usize>,
    pub seed: u64,
    /// Sampled batches (optimizer steps) per epoch.
    pub batches_per_epoch: usize,
    pub trust_coefficient: f64,
    /// Checkpoint interval in epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Stop after this many epochs while keeping the schedule of `epochs`.
    pub stop_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_patches: 768,
            epochs: 5000,
            warmup_epochs: 10,
            peak_lr: 4.6,
            momentum: 0.9,
            weight_decay: 1e-6,
            temperature: 0.5,
            projection_head: vec![256, 256, 128],
            seed: 0,
            batches_per_epoch: 1,
            trust_coefficient: 1e-3,
            checkpoint_every: 100,
            stop_after: None,
        }
    }
}

/// View accounting for a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ViewPlan {
    pub patches_per_batch: usize,
    pub views_per_batch: usize,
    pub views_per_epoch: u64,
    pub total_views: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_patches", self.batch_patches),
            ("epochs", self.epochs),
            ("warmup_epochs", self.warmup_epochs),
            ("batches_per_epoch", self.batches_per_epoch),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let reals = [
            ("peak_lr", self.peak_lr),
            ("temperature", self.temperature),
            ("trust_coefficient", self.trust_coefficient),
        ];
        for (field, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be finite and positive"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be finite and nonnegative"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config("warmup_epochs", "must be smaller than epochs"));
        }
        if self.projection_head.len() != 3 || self.projection_head.contains(&0) {
            return Err(Error::config("projection_head", "expected three positive widths"));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.peak_lr, self.warmup_epochs, self.epochs)
    }

    pub fn lars(&self) -> LarsConfig {
        LarsConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            trust_coefficient: self.trust_coefficient,
        }
    }

    pub fn view_plan(&self, dataset_size: usize, views_per_patch: usize) -> ViewPlan {
        let patches = self.batch_patches.min(dataset_size);
        let per_batch = patches * views_per_patch;
        let per_epoch = (per_batch * self.batches_per_epoch) as u64;
        ViewPlan {
            patches_per_batch: patches,
            views_per_batch: per_batch,
            views_per_epoch: per_epoch,
            total_views: per_epoch * self.epochs as u64,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_time_s: f64,
    pub views: u64,
}

/// Optimizer and progress state needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub views_seen: u64,
    pub encoder_momentum: LarsState,
    pub head_momentum: LarsState,
    pub last_loss: Option<f64>,
    /// Exponential moving average of the loss (weight 0.1 on new values).
    pub loss_ema: Option<f64>,
}

/// Where training writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub run_hash: Option<String>,
}

impl TrainOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("checkpoint.nxch")
    }
    pub fn state_path(&self) -> PathBuf {
        self.dir.join("checkpoint.state.nxch")
    }
    pub fn weights_path(&self) -> PathBuf {
        self.dir.join("weights.nxch")
    }
}

const STATE_KIND: &str = "train_state";
/// Views per gradient chunk and chunks per reduction wave. Both are fixed so
/// the summation order never depends on the number of workers.
const CHUNK: usize = 16;
const WAVE: usize = 8;

pub struct Trainer {
    pub encoder: NextChannelEncoder,
    pub head: ProjectionHead,
    pub config: TrainConfig,
    pub augment: AugmentConfig,
    pub state: TrainState,
}

fn add_into(acc: &mut Grads, other: &Grads) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

impl Trainer {
    pub fn new(encoder: NextChannelEncoder, config: TrainConfig, augment: AugmentConfig) -> Result<Self> {
        config.validate()?;
        if config.projection_head[0] != encoder.config().embed_dim {
            return Err(Error::config(
                "projection_head",
                format!(
                    "input width {} differs from embed_dim {}",
                    config.projection_head[0],
                    encoder.config().embed_dim
                ),
            ));
        }
        let head = ProjectionHead::build(&config.projection_head, config.seed)?;
        let state = TrainState {
            epoch: 0,
            step: 0,
            views_seen: 0,
            encoder_momentum: LarsState::new(encoder.params()),
            head_momentum: LarsState::new(&head.params),
            last_loss: None,
            loss_ema: None,
        };
        Ok(Self {
            encoder,
            head,
            config,
            augment,
            state,
        })
    }

    fn check_patches(&self, patches: &[FeatureMap]) -> Result<usize> {
        let first = patches.first().ok_or_else(|| Error::Data("training set is empty".into()))?;
        if patches.iter().any(|p| (p.channels, p.height, p.width) != (first.channels, first.height, first.width)) {
            return Err(Error::Shape("training patches differ in shape".into()));
        }
        self.encoder.check_input(first)?;
        self.augment
            .validate(first.height.min(first.width), self.encoder.config().min_input_size())?;
        Ok(first.height)
    }

    /// One optimizer step on a sampled batch. Returns the batch loss and the
    /// number of views processed. Parameters are untouched on error.
    pub fn step(&mut self, patches: &[FeatureMap], round: u64, lr: f64) -> Result<(f64, usize)> {
        let m = patches.len();
        let b = self.config.batch_patches.min(m);
        let mut r = rng::stream(self.config.seed, &[rng::DOMAIN_BATCH, round]);
        let mut idx = rand::seq::index::sample(&mut r, m, b).into_vec();
        idx.sort_unstable();
        let refs: Vec<&FeatureMap> = idx.iter().map(|&i| &patches[i]).collect();
        let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
        let batch = ViewBatch::generate(&refs, &ids, &self.augment, round)?;

        let encoder = &self.encoder;
        let head = &self.head;
        let heads: Vec<HeadTrace> = batch
            .views
            .par_iter()
            .map(|v| Ok(head.forward(&encoder.forward(v)?.1.vector)))
            .collect::<Result<_>>()?;
        let z: Vec<Vec<f32>> = heads.iter().map(|h| h.z.clone()).collect();
        let lg = nt_xent_with_grad(&z, &batch.pair_index, self.config.temperature)?;
        if !lg.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss is {} at round {round}", lg.loss)));
        }

        let mut enc_grads = encoder.params().zero_grads();
        let mut head_grads = head.params.zero_grads();
        let chunks: Vec<Vec<usize>> = (0..batch.len())
            .collect::<Vec<_>>()
            .chunks(CHUNK)
            .map(|c| c.to_vec())
            .collect();
        for wave in chunks.chunks(WAVE) {
            let partial: Vec<(Grads, Grads)> = wave
                .par_iter()
                .map(|chunk| {
                    let mut eg = encoder.params().zero_grads();
                    let mut hg = head.params.zero_grads();
                    for &i in chunk {
                        let trace = encoder.forward_trace(&batch.views[i])?;
                        let g_emb = head.backward(&heads[i], &lg.grad[i], &mut hg);
                        encoder.backward(&trace, &g_emb, Some(&mut eg), false);
                    }
                    Ok((eg, hg))
                })
                .collect::<Result<_>>()?;
            for (eg, hg) in &partial {
                add_into(&mut enc_grads, eg);
                add_into(&mut head_grads, hg);
            }
        }

        // Validate both gradient sets before touching either parameter set.
        for (grads, store) in [(&enc_grads, encoder.params()), (&head_grads, &head.params)] {
            for (g, p) in grads.iter().zip(&store.params) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{}` at round {round}", p.name)));
                }
            }
        }
        let lars = self.config.lars();
        lars_step(self.encoder.params_mut(), &enc_grads, &mut self.state.encoder_momentum, lr, &lars)?;
        lars_step(&mut self.head.params, &head_grads, &mut self.state.head_momentum, lr, &lars)?;
        self.state.step += 1;
        Ok((lg.loss, batch.len()))
    }

    /// Runs the next epoch (`self.state.epoch`).
    pub fn run_epoch(&mut self, patches: &[FeatureMap]) -> Result<EpochRecord> {
        self.check_patches(patches)?;
        let epoch = self.state.epoch;
        let lr = self.config.lr(epoch);
        let start = Instant::now();
        let mut loss = 0.0;
        let mut views = 0u64;
        let snapshot = (self.encoder.params().clone(), self.head.params.clone(), self.state.clone());
        for b in 0..self.config.batches_per_epoch {
            let round = (epoch * self.config.batches_per_epoch + b) as u64;
            match self.step(patches, round, lr) {
                Ok((l, v)) => {
                    loss += l;
                    views += v as u64;
                }
                Err(e) => {
                    // an epoch either completes or leaves no trace
                    *self.encoder.params_mut() = snapshot.0;
                    self.head.params = snapshot.1;
                    self.state = snapshot.2;
                    return Err(e);
                }
            }
        }
        loss /= self.config.batches_per_epoch as f64;
        self.state.epoch += 1;
        self.state.views_seen += views;
        self.state.last_loss = Some(loss);
        self.state.loss_ema = Some(match self.state.loss_ema {
            Some(e) => 0.9 * e + 0.1 * loss,
            None => loss,
        });
        Ok(EpochRecord {
            epoch,
            lr,
            loss,
            wall_time_s: start.elapsed().as_secs_f64(),
            views,
        })
    }

    /// Epoch at which this run stops.
    pub fn final_epoch(&self) -> usize {
        self.config.stop_after.map_or(self.config.epochs, |s| s.min(self.config.epochs))
    }

    /// Trains until the final epoch. With an output directory, appends to the
    /// training log, checkpoints every `checkpoint_every` epochs and writes
    /// the final weights. A non-finite loss stops training with an error and
    /// leaves the last checkpoint in place.
    pub fn fit(&mut self, patches: &[FeatureMap], out: Option<&TrainOutput>) -> Result<Vec<EpochRecord>> {
        self.check_patches(patches)?;
        let mut log = match out {
            Some(o) => Some(open_log(o, self.state.epoch > 0)?),
            None => None,
        };
        let mut records = Vec::new();
        while self.state.epoch < self.final_epoch() {
            let rec = self.run_epoch(patches)?;
            log::info!("epoch {} lr {:.5} loss {:.5} ({:.2}s)", rec.epoch, rec.lr, rec.loss, rec.wall_time_s);
            if let Some(w) = log.as_mut() {
                writeln!(w, "{},{},{},{:.3}", rec.epoch, rec.lr, rec.loss, rec.wall_time_s)?;
                w.flush()?;
            }
            records.push(rec);
            if let Some(o) = out {
                let k = self.config.checkpoint_every;
                if k > 0 && self.state.epoch % k == 0 {
                    self.save_checkpoint(o)?;
                }
            }
        }
        if let Some(o) = out {
            self.save_checkpoint(o)?;
            encoder_to_file(&self.encoder, o.run_hash.as_deref())?.save(&o.weights_path())?;
        }
        Ok(records)
    }

    pub fn save_checkpoint(&self, out: &TrainOutput) -> Result<()> {
        std::fs::create_dir_all(&out.dir)?;
        encoder_to_file(&self.encoder, out.run_hash.as_deref())?.save(&out.checkpoint_path())?;
        self.state_file(out.run_hash.as_deref())?.save(&out.state_path())
    }

    fn state_file(&self, run_hash: Option<&str>) -> Result<TensorFile> {
        let s = &self.state;
        let mut file = TensorFile::new(json!({
            "kind": STATE_KIND,
            "epoch": s.epoch,
            "step": s.step,
            "views_seen": s.views_seen,
            "last_loss": s.last_loss,
            "loss_ema": s.loss_ema,
            "train": self.config,
            "augment": self.augment,
            "run_hash": run_hash,
        }));
        let push_store = |file: &mut TensorFile, prefix: &str, store: &ParamStore, values: Option<&[Vec<f32>]>| -> Result<()> {
            for (i, p) in store.params.iter().enumerate() {
                let data = values.map_or_else(|| p.data.clone(), |v| v[i].clone());
                file.push(Tensor::new(format!("{prefix}{}", p.name), p.shape.clone(), data)?);
            }
            Ok(())
        };
        push_store(&mut file, "", &self.head.params, None)?;
        push_store(&mut file, "momentum.", &self.head.params, Some(&s.head_momentum.momentum))?;
        push_store(&mut file, "momentum.", self.encoder.params(), Some(&s.encoder_momentum.momentum))?;
        Ok(file)
    }

    /// Restores a trainer from the checkpoint in `out`. The configurations
    /// must match the ones the checkpoint was written with, except for
    /// `stop_after` and `checkpoint_every`.
    pub fn resume(out: &TrainOutput, config: TrainConfig, augment: AugmentConfig) -> Result<Self> {
        let encoder = load_weights(&out.checkpoint_path())?;
        let mut file = TensorFile::load(&out.state_path())?;
        let h = file.header.clone();
        if h.get("kind").and_then(|k| k.as_str()) != Some(STATE_KIND) {
            return Err(Error::Corrupt(format!("{} is not a training state", out.state_path().display())));
        }
        let stored: TrainConfig = serde_json::from_value(h["train"].clone())
            .map_err(|e| Error::Corrupt(format!("training configuration in state: {e}")))?;
        let comparable = |c: &TrainConfig| TrainConfig {
            stop_after: None,
            checkpoint_every: 0,
            ..c.clone()
        };
        if comparable(&stored) != comparable(&config) {
            return Err(Error::ConfigMismatch("training configuration differs from the checkpoint".into()));
        }
        let stored_aug: AugmentConfig = serde_json::from_value(h["augment"].clone())
            .map_err(|e| Error::Corrupt(format!("augmentation configuration in state: {e}")))?;
        if stored_aug != augment {
            return Err(Error::ConfigMismatch("augmentation configuration differs from the checkpoint".into()));
        }
        let mut trainer = Trainer::new(encoder, config, augment)?;
        let take_store = |file: &mut TensorFile, prefix: &str, store: &ParamStore| -> Result<Vec<Vec<f32>>> {
            store
                .params
                .iter()
                .map(|p| {
                    let t = file.take(&format!("{prefix}{}", p.name))?;
                    if t.shape != p.shape {
                        return Err(Error::Corrupt(format!("tensor `{}` has shape {:?}", t.name, t.shape)));
                    }
                    Ok(t.data)
                })
                .collect()
        };
        let head_values = take_store(&mut file, "", &trainer.head.params)?;
        let head_momentum = take_store(&mut file, "momentum.", &trainer.head.params)?;
        let enc_momentum = take_store(&mut file, "momentum.", trainer.encoder.params())?;
        if let Some(extra) = file.tensors.first() {
            return Err(Error::Corrupt(format!("unexpected tensor `{}` in training state", extra.name)));
        }
        for (p, v) in trainer.head.params.params.iter_mut().zip(head_values) {
            p.data = v;
        }
        let num = |k: &str| h.get(k).and_then(|v| v.as_u64()).ok_or_else(|| Error::Corrupt(format!("state lacks `{k}`")));
        trainer.state = TrainState {
            epoch: num("epoch")? as usize,
            step: num("step")?,
            views_seen: num("views_seen")?,
            encoder_momentum: LarsState { momentum: enc_momentum },
            head_momentum: LarsState { momentum: head_momentum },
            last_loss: h.get("last_loss").and_then(|v| v.as_f64()),
            loss_ema: h.get("loss_ema").and_then(|v| v.as_f64()),
        };
        Ok(trainer)
    }
}

fn open_log(out: &TrainOutput, append: bool) -> Result<std::fs::File> {
    std::fs::create_dir_all(&out.dir)?;
    let path = out.log_path();
    if append && path.exists() {
        return Ok(OpenOptions::new().append(true).open(&path)?);
    }
    let mut f = std::fs::File::create(&path)?;
    if let Some(h) = &out.run_hash {
        writeln!(f, "{RUN_HASH_PREFIX}{h}")?;
    }
    writeln!(f, "epoch,lr,loss,wall_time_s")?;
    Ok(f)
}

/// Reads a training log back as (epoch, lr, loss) rows.
pub fn read_log(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let mut rdr = crate::io::csv_reader(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Data(format!("short row in {}", path.display())));
        let parse = |i: usize| -> Result<f64> {
            field(i)?
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        };
        rows.push((parse(0)? as usize, parse(1)?, parse(2)?));
    }
    Ok(rows)
}
