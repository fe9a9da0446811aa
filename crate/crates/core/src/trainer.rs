//! Adam training with warmup, token-bucketed batches, logging and
//! resumable checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{Checkpoint, Cursor, Header, RngState};
use crate::cogsynth::{CorpusRow, Vocab};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::{Dropout, Model};

/// Stream of the dropout generator; epoch shuffles use streams `1 + epoch`.
const DROPOUT_STREAM: u64 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_steps: usize,
    pub batch_tokens: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    /// Global L2 norm cap on the gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub log_every: usize,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 5e-4,
            warmup_steps: 4000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            max_steps: 5000,
            batch_tokens: 4096,
            seed: 1,
            label_smoothing: 0.0,
            clip_norm: None,
            log_every: 100,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.warmup_steps < 1 {
            return fail("warmup_steps must be at least 1".into());
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return fail(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive".into());
        }
        if self.batch_tokens == 0 {
            return fail("batch_tokens must be positive".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label_smoothing must lie in [0, 1)".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail("clip_norm must be positive".into());
            }
        }
        Ok(())
    }

    /// `lr_peak · min(step / warmup, √(warmup / step))` for `step ≥ 1`.
    pub fn lr_schedule(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.lr_peak * (s / w).min((w / s).sqrt())
    }
}

/// One token-id training pair; the target excludes BOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

pub fn encode_rows(rows: &[CorpusRow], src: &Vocab, tgt: &Vocab) -> Result<Vec<Example>> {
    rows.iter().map(|r| Ok(Example { src: src.encode(&r.src)?, tgt: tgt.encode(&r.tgt)? })).collect()
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(shapes: impl Iterator<Item = Vec<usize>>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes.map(|s| (Tensor::zeros(&s), Tensor::zeros(&s))).unzip();
        Adam { beta1, beta2, eps, m, v, t: 0 }
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Length-bucketed batches over a fixed dataset, reshuffled every epoch.
pub struct Batcher {
    lens: Vec<usize>,
    batch_tokens: usize,
    seed: u64,
    epoch: u64,
    batches: Vec<Vec<usize>>,
}

impl Batcher {
    pub fn new(data: &[Example], batch_tokens: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        let lens = data.iter().map(|e| e.src.len().max(e.tgt.len() + 1)).collect();
        let mut b = Batcher { lens, batch_tokens, seed, epoch: 0, batches: Vec::new() };
        b.plan(0);
        Ok(b)
    }

    /// Batches of one epoch: shuffle, stable-sort by length, cut at the
    /// token budget, then shuffle batch order.
    fn plan(&mut self, epoch: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 + epoch);
        let mut order: Vec<usize> = (0..self.lens.len()).collect();
        order.shuffle(&mut rng);
        order.sort_by_key(|&i| self.lens[i]);
        let mut batches = Vec::new();
        let mut cur: Vec<usize> = Vec::new();
        let mut tokens = 0;
        for i in order {
            if !cur.is_empty() && tokens + self.lens[i] > self.batch_tokens {
                batches.push(std::mem::take(&mut cur));
                tokens = 0;
            }
            tokens += self.lens[i];
            cur.push(i);
        }
        batches.push(cur);
        batches.shuffle(&mut rng);
        self.epoch = epoch;
        self.batches = batches;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches.len()
    }

    /// Indices of the batch at `cursor`, advancing it.
    pub fn next(&mut self, cursor: &mut Cursor) -> &[usize] {
        if cursor.epoch != self.epoch {
            self.plan(cursor.epoch);
        }
        if cursor.batch >= self.batches.len() {
            cursor.epoch += 1;
            cursor.batch = 0;
            self.plan(cursor.epoch);
        }
        cursor.batch += 1;
        &self.batches[cursor.batch - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    pub step: usize,
    pub cursor: Cursor,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(
            model.params().iter().map(|(_, t)| t.shape().to_vec()),
            config.beta1,
            config.beta2,
            config.eps,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DROPOUT_STREAM);
        Ok(Trainer { model, config, adam, step: 0, cursor: Cursor::default(), rng })
    }

    /// Forward, backward and one Adam update on the given examples.
    pub fn train_step(&mut self, batch: &[&Example]) -> Result<f64> {
        let pairs: Vec<(&[usize], &[usize])> = batch.iter().map(|e| (e.src.as_slice(), e.tgt.as_slice())).collect();
        let rate = self.model.config().dropout;
        let (loss, mut grads) = {
            let mut g = Graph::with_params(self.model.params());
            let mut drop = (rate > 0.0).then_some(Dropout { rate, rng: &mut self.rng });
            let loss = self.model.loss_graph(&mut g, &pairs, self.config.label_smoothing, &mut drop)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("loss is {value} at step {}", self.step + 1)));
            }
            (value, g.backward(loss)?.into_params())
        };
        if grads.iter().flatten().any(|t| !t.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at step {}", self.step + 1)));
        }
        if let Some(c) = self.config.clip_norm {
            clip_gradients(&mut grads, c);
        }
        self.step += 1;
        let lr = self.config.lr_schedule(self.step);
        let mut refs = self.model.params_mut().tensors_mut();
        self.adam.update(&mut refs, &grads, lr);
        Ok(loss)
    }

    /// Runs until `config.max_steps`, calling `observe` after every step.
    pub fn run<F>(&mut self, data: &[Example], mut observe: F) -> Result<()>
    where
        F: FnMut(&Trainer, StepLog) -> Result<()>,
    {
        let mut batcher = Batcher::new(data, self.config.batch_tokens, self.config.seed)?;
        while self.step < self.config.max_steps {
            let idx = batcher.next(&mut self.cursor).to_vec();
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            let loss = self.train_step(&batch)?;
            let log = StepLog { step: self.step, loss, lr: self.config.lr_schedule(self.step) };
            observe(self, log)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, src_vocab: &[String], tgt_vocab: &[String]) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> =
            self.model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for ((name, _), (m, v)) in self.model.params().iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            tensors.push((format!("adam.m.{name}"), m.clone()));
            tensors.push((format!("adam.v.{name}"), v.clone()));
        }
        Checkpoint {
            header: Header {
                format: 0,
                step: self.step,
                model: self.model.config().clone(),
                train: self.config.clone(),
                rng: RngState::capture(&self.rng),
                cursor: self.cursor,
                src_vocab: src_vocab.to_vec(),
                tgt_vocab: tgt_vocab.to_vec(),
                tensors: Vec::new(),
                payload_bytes: 0,
                payload_sha256: String::new(),
            },
            tensors,
        }
    }

    /// Rebuilds a trainer from a checkpoint. Every model and moment tensor
    /// must be present with its expected shape; nothing is applied otherwise.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = model_from_checkpoint(ckpt)?;
        let mut tr = Trainer::new(model, ckpt.header.train.clone())?;
        let names: Vec<String> = tr.model.params().iter().map(|(n, _)| n.to_string()).collect();
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            let shape = tr.adam.m[i].shape().to_vec();
            m.push(named(ckpt, &format!("adam.m.{name}"), &shape)?.clone());
            v.push(named(ckpt, &format!("adam.v.{name}"), &shape)?.clone());
        }
        tr.adam.m = m;
        tr.adam.v = v;
        tr.adam.t = ckpt.header.step as u64;
        tr.step = ckpt.header.step;
        tr.cursor = ckpt.header.cursor;
        tr.rng = ckpt.header.rng.restore()?;
        Ok(tr)
    }
}

fn named<'a>(ckpt: &'a Checkpoint, name: &str, shape: &[usize]) -> Result<&'a Tensor> {
    let t = ckpt.tensor(name).ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor {name}")))?;
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has shape {:?}, model expects {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(t)
}

/// Model weights from a checkpoint, ignoring optimizer state.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let mut model = Model::new(ckpt.header.model.clone(), 0)
        .map_err(|e| Error::Checkpoint(format!("checkpoint model config is invalid: {e}")))?;
    let names: Vec<(String, Vec<usize>)> =
        model.params().iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    let mut values = Vec::with_capacity(names.len());
    for (name, shape) in &names {
        values.push(named(ckpt, name, shape)?.clone());
    }
    for ((name, _), t) in names.iter().zip(values) {
        model.params_mut().set(name, t)?;
    }
    Ok(model)
}

/// Files written by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub log: PathBuf,
    pub final_checkpoint: PathBuf,
    pub losses: Vec<StepLog>,
}

pub const LOG_FILE: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.ckpt";

/// Trains to `max_steps`, writing `logs/loss.csv` (every `log_every` steps
/// and the last one), `ckpt/step-K.ckpt` periodically and `ckpt/final.ckpt`.
///
/// On a non-finite loss the last good state is saved as
/// `ckpt/diagnostic.ckpt` and the numerical error is returned.
pub fn train(
    trainer: &mut Trainer,
    data: &[Example],
    vocabs: (&[String], &[String]),
    out: &Path,
) -> Result<TrainOutputs> {
    let log_dir = out.join("logs");
    let ckpt_dir = out.join("ckpt");
    fs::create_dir_all(&log_dir)?;
    fs::create_dir_all(&ckpt_dir)?;
    let log_path = log_dir.join(LOG_FILE);
    let resuming = trainer.step > 0 && log_path.exists();
    let mut log = if resuming {
        fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = fs::File::create(&log_path)?;
        writeln!(f, "step,loss,lr")?;
        f
    };
    let mut losses = Vec::new();
    let every = trainer.config.log_every;
    let ckpt_every = trainer.config.checkpoint_every;
    let max = trainer.config.max_steps;
    let result = trainer.run(data, |tr, s| {
        if s.step % every == 0 || s.step == max {
            writeln!(log, "{},{:?},{:?}", s.step, s.loss, s.lr)?;
            losses.push(s);
        }
        if ckpt_every > 0 && s.step % ckpt_every == 0 && s.step != max {
            tr.checkpoint(vocabs.0, vocabs.1).save(&ckpt_dir.join(format!("step-{}.ckpt", s.step)))?;
        }
        Ok(())
    });
    log.flush()?;
    if let Err(e @ Error::Numerical(_)) = result {
        // The failing step aborts before its update, so this is the last good state.
        trainer.checkpoint(vocabs.0, vocabs.1).save(&ckpt_dir.join(DIAGNOSTIC_CHECKPOINT))?;
        return Err(e);
    }
    result?;
    let final_checkpoint = ckpt_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint(vocabs.0, vocabs.1).save(&final_checkpoint)?;
    Ok(TrainOutputs { log: log_path, final_checkpoint, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_schedule(4000), 5e-4);
        assert!((c.lr_schedule(2000) - 2.5e-4).abs() < 1e-18);
        assert!((c.lr_schedule(16000) - 2.5e-4).abs() < 1e-18);
        assert!((c.lr_schedule(1) - 5e-4 / 4000.0).abs() < 1e-20);
    }

    #[test]
    fn rejects_bad_config() {
        for bad in [
            TrainConfig { warmup_steps: 0, ..Default::default() },
            TrainConfig { lr_peak: 0.0, ..Default::default() },
            TrainConfig { batch_tokens: 0, ..Default::default() },
            TrainConfig { clip_norm: Some(-1.0), ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    // Hand-computed: p0 = 1, grads 0.5, -0.2, 0.1, lr 0.1, β = (0.9, 0.98), eps 1e-9.
    #[test]
    fn adam_three_steps_by_hand() {
        let mut adam = Adam::new(std::iter::once(vec![1]), 0.9, 0.98, 1e-9);
        let mut p = Tensor::vector(vec![1.0]);
        let mut expect = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [0.5f64, -0.2, 0.1].into_iter().enumerate() {
            adam.update(&mut [&mut p], &[Some(Tensor::vector(vec![g]))], 0.1);
            m = 0.9 * m + 0.1 * g;
            v = 0.98 * v + 0.02 * g * g;
            let k = (t + 1) as i32;
            expect -= 0.1 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.98f64.powi(k))).sqrt() + 1e-9);
            assert_eq!(p.data()[0], expect);
        }
        // Literal values of the same recurrence.
        assert!((p.data()[0] - 0.8270851919072676).abs() < 1e-12, "{}", p.data()[0]);
    }

    #[test]
    fn clipping_keeps_direction() {
        let mut g = vec![Some(Tensor::vector(vec![3.0, 0.0])), None, Some(Tensor::vector(vec![4.0]))];
        let norm = clip_gradients(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((g[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap().data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Some(Tensor::vector(vec![0.1]))];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().data(), &[0.1]);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let data: Vec<Example> =
            (0..50).map(|i| Example { src: vec![3; 1 + i % 7], tgt: vec![3; 1 + i % 5] }).collect();
        let mut b = Batcher::new(&data, 20, 3).unwrap();
        let mut cursor = Cursor::default();
        let n = b.batches_per_epoch();
        let mut seen: Vec<usize> = (0..n).flat_map(|_| b.next(&mut cursor).to_vec()).collect();
        seen.sort();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
        b.next(&mut cursor);
        assert_eq!(cursor, Cursor { epoch: 1, batch: 1 });
    }
}
