//! The tuning loop: shuffled mini-batches over the cache samples, forward,
//! loss, backward and an AdamW step per batch, with per-epoch metrics.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{forward_planned, AdapterOutput, AdapterWeights, MetaPathWeights, Mode, StagePlan};
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::loss::{fused_inference, total_loss, LossBreakdown, LossConfig};
use crate::optim::{AdamWConfig, OptimState, Schedule};
use crate::par;
use crate::tensor::{cosine_sim_matrix, Matrix};

/// Ablation variants, from zero-shot matching up to the complete adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Zero-shot cosine matching against the positive prompts; nothing is trained.
    #[serde(rename = "base")]
    Base,
    /// Negative-node aggregation only, routed to the prompts through n->p.
    #[serde(rename = "T-N")]
    TextNegative,
    /// Positive and visual relations only (no negative nodes).
    #[serde(rename = "T-P")]
    TextPositive,
    /// Both text stages, text classifier only.
    #[serde(rename = "T")]
    Text,
    /// All stages, text and cache classifiers.
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Base,
        Variant::TextNegative,
        Variant::TextPositive,
        Variant::Text,
        Variant::Full,
    ];

    pub fn plan(self) -> StagePlan {
        match self {
            Variant::Base => StagePlan::NONE,
            Variant::TextNegative | Variant::Text => StagePlan {
                negative: true,
                positive: true,
                visual: false,
            },
            Variant::TextPositive => StagePlan {
                negative: false,
                positive: true,
                visual: false,
            },
            Variant::Full => StagePlan::default(),
        }
    }

    /// The fusion weights this variant actually uses.
    pub fn meta_paths(self, mp: &MetaPathWeights) -> MetaPathWeights {
        match self {
            Variant::TextNegative => MetaPathWeights {
                alpha_pp: 0.0,
                alpha_vp: 0.0,
                ..*mp
            },
            Variant::TextPositive => MetaPathWeights {
                alpha_np_train: 0.0,
                alpha_np_test: 0.0,
                ..*mp
            },
            _ => *mp,
        }
    }

    /// Loss settings with the cache branch switched off for text-only variants.
    pub fn loss(self, loss: &LossConfig) -> LossConfig {
        match self {
            Variant::Full => *loss,
            _ => LossConfig {
                lambda: 0.0,
                ..*loss
            },
        }
    }

    pub fn uses_negatives(self) -> bool {
        !matches!(self, Variant::Base | Variant::TextPositive)
    }

    pub fn trains(self) -> bool {
        self != Variant::Base
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::TextNegative => "T-N",
            Variant::TextPositive => "T-P",
            Variant::Text => "T",
            Variant::Full => "full",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected base, T-N, T-P, T or full)")))
    }
}

/// Learning-rate and epoch presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// 30 epochs at lr 1e-3.
    Standard,
    /// 100 epochs at lr 1e-3 (small texture and remote-sensing style tasks).
    Long,
    /// 100 epochs at lr 1e-2 (fine-grained aircraft style tasks).
    Aircraft,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" => Ok(Profile::Standard),
            "long" => Ok(Profile::Long),
            "aircraft" => Ok(Profile::Aircraft),
            _ => Err(Error::Config(format!(
                "unknown profile `{s}` (expected standard, long or aircraft)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
    pub hyper: MetaPathWeights,
    pub loss: LossConfig,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            warmup_lr: 1e-5,
            warmup_epochs: 1,
            seed: 0,
            init_std: 1e-4,
            hyper: MetaPathWeights::default(),
            loss: LossConfig::default(),
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn with_profile(mut self, profile: Profile) -> Self {
        let (epochs, lr) = match profile {
            Profile::Standard => (30, 1e-3),
            Profile::Long => (100, 1e-3),
            Profile::Aircraft => (100, 1e-2),
        };
        self.epochs = epochs;
        self.optimizer.lr_base = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config(format!("init_std must be nonnegative, got {}", self.init_std)));
        }
        self.hyper.validate()?;
        self.loss.validate()?;
        self.schedule(1).validate()
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule {
            lr_base: self.optimizer.lr_base,
            warmup_lr: self.warmup_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            steps_per_epoch,
        }
    }

    pub fn effective_meta_paths(&self) -> MetaPathWeights {
        self.variant.meta_paths(&self.hyper)
    }

    pub fn effective_loss(&self) -> LossConfig {
        self.variant.loss(&self.loss)
    }
}

/// Held-out queries (unit-norm rows) and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSet {
    pub queries: Matrix<f32>,
    pub labels: Vec<usize>,
}

impl TestSet {
    pub fn new(queries: Matrix<f32>, labels: Vec<usize>) -> Result<Self> {
        if queries.rows() != labels.len() {
            return Err(Error::dims("test labels", queries.rows(), labels.len()));
        }
        Ok(TestSet { queries, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fused_accuracy: f64,
    pub text_accuracy: f64,
    pub fused_correct: usize,
    pub text_correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the state before any update.
    pub epoch: usize,
    pub steps: usize,
    pub last_lr: f64,
    pub mean_batch_loss: f64,
    /// Loss over the whole cache after this epoch.
    pub train: LossBreakdown,
    pub eval: Option<EvalReport>,
}

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub weights: AdapterWeights<f32>,
    pub optim: OptimState,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Manifest the run was trained on, when known.
    pub manifest: Option<String>,
}

impl Checkpoint {
    pub fn dim(&self) -> usize {
        self.weights.dim()
    }

    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.history.last()
    }
}

fn run_forward(
    graph: &HeteroGraph<f32>,
    weights: &AdapterWeights<f32>,
    config: &TrainConfig,
    mode: Mode,
) -> Result<AdapterOutput<f32>> {
    forward_planned(
        graph,
        weights,
        &config.effective_meta_paths(),
        mode,
        config.variant.plan(),
    )
}

fn check_graph(graph: &HeteroGraph<f32>, config: &TrainConfig) -> Result<()> {
    if config.variant.uses_negatives() && graph.negative.is_none() {
        return Err(Error::MissingNegatives);
    }
    Ok(())
}

/// Top-1 accuracy of fused inference (test mode) and of the text classifier alone.
pub fn evaluate(
    graph: &HeteroGraph<f32>,
    weights: &AdapterWeights<f32>,
    test: &TestSet,
    config: &TrainConfig,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    if test.queries.cols() != graph.dim() {
        return Err(Error::dims("test query width", graph.dim(), test.queries.cols()));
    }
    check_graph(graph, config)?;
    let out = run_forward(graph, weights, config, Mode::Test)?;
    let loss = config.effective_loss();
    let hits: Vec<Result<(bool, bool)>> = par::map_range(test.len(), |q| {
        let z = test.queries.row(q);
        let label = test.labels[q];
        let (fused, _) = fused_inference(z, &out, &graph.onehot, &loss, false)?;
        let (text, _) = fused_inference(z, &out, &graph.onehot, &loss, true)?;
        Ok((fused == label, text == label))
    });
    let mut fused_correct = 0;
    let mut text_correct = 0;
    for h in hits {
        let (f, t) = h?;
        fused_correct += f as usize;
        text_correct += t as usize;
    }
    let total = test.len();
    Ok(EvalReport {
        fused_accuracy: fused_correct as f64 / total as f64,
        text_accuracy: text_correct as f64 / total as f64,
        fused_correct,
        text_correct,
        total,
    })
}

/// Accuracy of plain cosine matching between queries and positive prompt nodes.
pub fn evaluate_zero_shot(graph: &HeteroGraph<f32>, test: &TestSet) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let sims = cosine_sim_matrix(&test.queries, &graph.xp)?;
    let correct = sims
        .iter_rows()
        .zip(&test.labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (c, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = c;
                }
            }
            best == label
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Stateful training run that can be checkpointed between epochs.
pub struct Trainer<'a> {
    graph: &'a HeteroGraph<f32>,
    test: Option<&'a TestSet>,
    config: TrainConfig,
    schedule: Schedule,
    weights: AdapterWeights<f32>,
    optim: OptimState,
    epoch: usize,
    history: Vec<EpochRecord>,
    manifest: Option<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        graph: &'a HeteroGraph<f32>,
        test: Option<&'a TestSet>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        check_graph(graph, &config)?;
        let d = graph.dim();
        let weights = if config.variant.trains() {
            AdapterWeights::gaussian(d, config.init_std, config.seed)
        } else {
            AdapterWeights::zeros(d)
        };
        let steps_per_epoch = graph.cache.rows().div_ceil(config.batch_size);
        let mut trainer = Trainer {
            graph,
            test,
            schedule: config.schedule(steps_per_epoch),
            optim: OptimState::new(d, config.optimizer),
            config,
            weights,
            epoch: 0,
            history: Vec::new(),
            manifest: None,
        };
        let initial = trainer.record(0, 0, 0.0, f64::NAN)?;
        trainer.history.push(initial);
        Ok(trainer)
    }

    /// Continues a run from a checkpoint taken on the same task.
    pub fn resume(
        graph: &'a HeteroGraph<f32>,
        test: Option<&'a TestSet>,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        if checkpoint.dim() != graph.dim() {
            return Err(Error::dims("checkpoint embedding width", graph.dim(), checkpoint.dim()));
        }
        checkpoint.config.validate()?;
        check_graph(graph, &checkpoint.config)?;
        let steps_per_epoch = graph.cache.rows().div_ceil(checkpoint.config.batch_size);
        Ok(Trainer {
            graph,
            test,
            schedule: checkpoint.config.schedule(steps_per_epoch),
            config: checkpoint.config,
            weights: checkpoint.weights,
            optim: checkpoint.optim,
            epoch: checkpoint.epoch,
            history: checkpoint.history,
            manifest: checkpoint.manifest,
        })
    }

    pub fn set_manifest(&mut self, manifest: Option<String>) {
        self.manifest = manifest;
    }

    pub fn weights(&self) -> &AdapterWeights<f32> {
        &self.weights
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        !self.config.variant.trains() || self.epoch >= self.config.epochs
    }

    fn record(&self, epoch: usize, steps: usize, last_lr: f64, mean_batch_loss: f64) -> Result<EpochRecord> {
        let out = run_forward(self.graph, &self.weights, &self.config, Mode::Train)?;
        let (train, _) = total_loss(
            &self.graph.cache,
            &self.graph.labels,
            &out,
            &self.graph.labels,
            &self.config.effective_loss(),
        )?;
        let eval = self
            .test
            .map(|t| evaluate(self.graph, &self.weights, t, &self.config))
            .transpose()?;
        Ok(EpochRecord {
            epoch,
            steps,
            last_lr,
            mean_batch_loss: if mean_batch_loss.is_nan() { train.total } else { mean_batch_loss },
            train,
            eval,
        })
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        if self.is_finished() {
            return Err(Error::Config(format!(
                "training already finished after {} epochs",
                self.epoch
            )));
        }
        let n = self.graph.cache.rows();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64 + 1);
        order.shuffle(&mut rng);

        let mp = self.config.effective_meta_paths();
        let plan = self.config.variant.plan();
        let loss_cfg = self.config.effective_loss();
        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut last_lr = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let global = self.epoch * self.schedule.steps_per_epoch + steps;
            let lr = self.schedule.lr_at(global)?;
            let out = forward_planned(self.graph, &self.weights, &mp, Mode::Train, plan)?;
            let queries = self.graph.cache.select_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&s| self.graph.labels[s]).collect();
            let (loss, grads) = total_loss(&queries, &labels, &out, &self.graph.labels, &loss_cfg)?;
            let dw = out.tape.backward(&grads.xp_tilde, &grads.cache_tilde)?;
            self.optim.step(&mut self.weights, &dw, lr)?;
            loss_sum += loss.total * batch.len() as f64;
            steps += 1;
            last_lr = lr;
        }
        for w in self.weights.iter() {
            if !w.is_finite() {
                return Err(Error::NonFinite("adapter weights after update"));
            }
        }
        self.epoch += 1;
        let record = self.record(self.epoch, steps, last_lr, loss_sum / n as f64)?;
        self.history.push(record);
        Ok(self.history.last().expect("just pushed"))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            weights: self.weights.clone(),
            optim: self.optim.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            manifest: self.manifest.clone(),
        }
    }

    /// Trains to completion, calling `on_epoch` after every epoch.
    pub fn run(mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Checkpoint> {
        while !self.is_finished() {
            on_epoch(self.run_epoch()?);
        }
        Ok(self.checkpoint())
    }
}

/// Trains `config.epochs` epochs from a fresh initialization.
pub fn train(
    graph: &HeteroGraph<f32>,
    config: &TrainConfig,
    test: Option<&TestSet>,
) -> Result<Checkpoint> {
    Trainer::new(graph, test, config.clone())?.run(|_| {})
}
