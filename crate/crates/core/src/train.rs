//! Stage-wise training and the named experiment presets.
//!
//! A configuration is an ordered list of stages. Each stage trains at a
//! resolution divisor, with or without class weights, starting either from
//! fresh weights or from the previous stage's parameters.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy, AugmentationPolicy};
use crate::dataset::{
    compute_class_distribution, downscale, split_corpus, CorpusSplit, SegmentationSample,
    DEFAULT_VALIDATION_FRACTION,
};
use crate::error::{Error, Result};
use crate::eval::{derive_metrics_with, MetricsReport, TotalMode};
use crate::infer::{batch_tensors, evaluate};
use crate::loss::{compute_class_weights, loss_and_grad, WeightScheme, WeightVector};
use crate::model::{
    transfer_parameters, Checkpoint, EncoderVariant, Model, ModelConfig, Normalization,
    TrainingMeta,
};
use crate::nn::ParamStore;
use crate::schema::LabelSchema;
use crate::seed;

/// Epochs per stage when comparing configurations.
pub const COMPARISON_EPOCHS: usize = 25;
/// Epochs per stage for the final long run.
pub const FINAL_EPOCHS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LearningRatePolicy {
    /// Cosine warm-up from `lr_max / div_factor` to `lr_max` over the first
    /// `pct_start` of the steps, then cosine decay to `lr_max / (div_factor * final_div_factor)`.
    OneCycle {
        lr_max: f64,
        #[serde(default = "default_div")]
        div_factor: f64,
        #[serde(default = "default_final_div")]
        final_div_factor: f64,
        #[serde(default = "default_pct_start")]
        pct_start: f64,
    },
    Constant {
        lr: f64,
    },
}

fn default_div() -> f64 {
    25.0
}
fn default_final_div() -> f64 {
    1e5
}
fn default_pct_start() -> f64 {
    0.25
}

impl Default for LearningRatePolicy {
    fn default() -> Self {
        LearningRatePolicy::one_cycle(1e-3)
    }
}

impl LearningRatePolicy {
    pub fn one_cycle(lr_max: f64) -> Self {
        LearningRatePolicy::OneCycle {
            lr_max,
            div_factor: default_div(),
            final_div_factor: default_final_div(),
            pct_start: default_pct_start(),
        }
    }

    /// Learning rate at `step` of `total` steps.
    pub fn rate(&self, step: usize, total: usize) -> f64 {
        match *self {
            LearningRatePolicy::Constant { lr } => lr,
            LearningRatePolicy::OneCycle {
                lr_max,
                div_factor,
                final_div_factor,
                pct_start,
            } => {
                let cos = |from: f64, to: f64, t: f64| {
                    to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
                };
                let total = total.max(1) as f64;
                let warm = (pct_start * total).max(1.0);
                let s = step as f64;
                let start = lr_max / div_factor;
                if s < warm {
                    cos(start, lr_max, s / warm)
                } else {
                    let rest = (total - warm).max(1.0);
                    cos(
                        lr_max,
                        start / final_div_factor,
                        ((s - warm) / rest).min(1.0),
                    )
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LearningRatePolicy::Constant { lr } => lr > 0.0 && lr.is_finite(),
            LearningRatePolicy::OneCycle {
                lr_max,
                div_factor,
                final_div_factor,
                pct_start,
            } => {
                lr_max > 0.0
                    && div_factor >= 1.0
                    && final_div_factor >= 1.0
                    && (0.0..1.0).contains(&pct_start)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid learning-rate policy {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitFrom {
    #[default]
    Fresh,
    Previous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    #[serde(default = "one")]
    pub resize_divisor: u32,
    #[serde(default)]
    pub weighted: bool,
    #[serde(default = "comparison_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub learning_rate: LearningRatePolicy,
    #[serde(default)]
    pub init_from: InitFrom,
}

fn one() -> u32 {
    1
}
fn comparison_epochs() -> usize {
    COMPARISON_EPOCHS
}
fn default_batch() -> usize {
    8
}

impl StageSpec {
    pub fn new(resize_divisor: u32, weighted: bool, init_from: InitFrom) -> Self {
        StageSpec {
            resize_divisor,
            weighted,
            epochs: COMPARISON_EPOCHS,
            batch_size: default_batch(),
            learning_rate: LearningRatePolicy::default(),
            init_from,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        if ![1, 2, 4].contains(&self.resize_divisor) {
            return Err(Error::Config(format!(
                "stage {index}: resize divisor must be 1, 2 or 4, got {}",
                self.resize_divisor
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Config(format!(
                "stage {index}: epochs must be at least 1"
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config(format!(
                "stage {index}: batch size must be at least 1"
            )));
        }
        if index == 0 && self.init_from == InitFrom::Previous {
            return Err(Error::Config(
                "the first stage has no previous stage to start from".into(),
            ));
        }
        self.learning_rate.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum.
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Momentum for SGD, first-moment decay for Adam.
    pub momentum: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            momentum: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter optimizer state.
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = |e: &crate::nn::ParamEntry| vec![0.0; e.value.len()];
        Optimizer {
            config,
            first: store.entries().iter().map(zeros).collect(),
            second: match config.kind {
                OptimizerKind::Adam => store.entries().iter().map(zeros).collect(),
                OptimizerKind::Sgd => Vec::new(),
            },
            steps: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.steps += 1;
        let OptimizerConfig {
            kind,
            momentum,
            beta2,
            weight_decay,
        } = self.config;
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            match kind {
                OptimizerKind::Sgd => {
                    let v = &mut self.first[i];
                    for ((p, g), v) in entry.value.iter_mut().zip(&entry.grad).zip(v.iter_mut()) {
                        *v = momentum * *v + g + weight_decay * *p;
                        *p -= lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - momentum.powi(self.steps as i32);
                    let bc2 = 1.0 - beta2.powi(self.steps as i32);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((p, g), m), v) in entry
                        .value
                        .iter_mut()
                        .zip(&entry.grad)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *m = momentum * *m + (1.0 - momentum) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * ((*m / bc1) / ((*v / bc2).sqrt() + 1e-8) + weight_decay * *p);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfiguration {
    pub name: String,
    pub model: ModelConfig,
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub weight_scheme: WeightScheme,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub total_mode: TotalMode,
}

fn default_validation_fraction() -> f64 {
    DEFAULT_VALIDATION_FRACTION
}

/// Names of the ten comparison configurations.
pub const PRESET_NAMES: [&str; 10] = [
    "r34-S", "r34-SW", "r34-I", "r34-IW", "r34-DW", "r50-S", "r50-SW", "r50-I", "r50-IW", "r50-DW",
];

impl TrainingConfiguration {
    /// Expands a named preset (case-insensitive) for a schema of `num_classes` classes.
    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        let canonical = PRESET_NAMES
            .iter()
            .find(|p| p.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset {name:?}; expected one of {}",
                    PRESET_NAMES.join(", ")
                ))
            })?;
        let (encoder, recipe) = canonical.split_once('-').expect("preset names contain '-'");
        let model = match encoder {
            "r34" => ModelConfig::r34_like(num_classes),
            _ => ModelConfig::r50_like(num_classes),
        };
        use InitFrom::{Fresh, Previous};
        let stages = match recipe {
            "S" => vec![StageSpec::new(1, false, Fresh)],
            "SW" => vec![StageSpec::new(1, true, Fresh)],
            "I" => vec![
                StageSpec::new(4, false, Fresh),
                StageSpec::new(2, false, Previous),
                StageSpec::new(1, false, Previous),
            ],
            "IW" => vec![
                StageSpec::new(4, true, Fresh),
                StageSpec::new(2, true, Previous),
                StageSpec::new(1, true, Previous),
            ],
            "DW" => vec![
                StageSpec::new(1, false, Fresh),
                StageSpec::new(1, true, Previous),
            ],
            _ => unreachable!("preset table and names agree"),
        };
        Ok(TrainingConfiguration {
            name: canonical.to_string(),
            model,
            stages,
            weight_scheme: WeightScheme::default(),
            optimizer: OptimizerConfig::default(),
            augmentation: AugmentationPolicy::default(),
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
            total_mode: TotalMode::default(),
        })
    }

    /// Swaps the encoder for another variant, keeping the class count.
    pub fn with_encoder(mut self, variant: EncoderVariant) -> Self {
        self.model = ModelConfig::for_variant(variant, self.model.num_classes);
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        for s in &mut self.stages {
            s.epochs = epochs;
        }
        self
    }

    /// Long-run mode: every stage trains for [`FINAL_EPOCHS`].
    pub fn final_mode(self) -> Self {
        self.with_epochs(FINAL_EPOCHS)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config(
                "a configuration needs at least one stage".into(),
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(i)?;
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(
                "validation_fraction must lie in (0, 1)".into(),
            ));
        }
        self.augmentation.validate()?;
        self.model.validate()
    }
}

/// Declarative run file: either a preset plus overrides, or an explicit stage list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub name: Option<String>,
    pub encoder: Option<EncoderVariant>,
    pub model: Option<ModelConfig>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<LearningRatePolicy>,
    #[serde(rename = "final", default)]
    pub final_mode: bool,
    pub weight_scheme: Option<WeightScheme>,
    pub optimizer: Option<OptimizerConfig>,
    pub augmentation: Option<AugmentationPolicy>,
    pub validation_fraction: Option<f64>,
    pub total_mode: Option<TotalMode>,
    pub seed: Option<u64>,
    pub manifest: Option<String>,
    pub schema: Option<String>,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn resolve(&self, num_classes: usize) -> Result<TrainingConfiguration> {
        let mut config = match (&self.preset, self.stages.is_empty()) {
            (Some(p), true) => TrainingConfiguration::preset(p, num_classes)?,
            (Some(_), false) => {
                return Err(Error::Config(
                    "give either a preset or an explicit stage list, not both".into(),
                ))
            }
            (None, false) => TrainingConfiguration {
                name: self.name.clone().unwrap_or_else(|| "custom".into()),
                model: ModelConfig::tiny(num_classes),
                stages: self.stages.clone(),
                weight_scheme: WeightScheme::default(),
                optimizer: OptimizerConfig::default(),
                augmentation: AugmentationPolicy::default(),
                validation_fraction: DEFAULT_VALIDATION_FRACTION,
                total_mode: TotalMode::default(),
            },
            (None, true) => {
                return Err(Error::Config(
                    "run file needs a preset or a stage list".into(),
                ))
            }
        };
        if let Some(name) = &self.name {
            config.name = name.clone();
        }
        if let Some(v) = self.encoder {
            config = config.with_encoder(v);
        }
        if let Some(m) = &self.model {
            config.model = m.clone();
            config.model.num_classes = num_classes;
        }
        if let Some(e) = self.epochs {
            config = config.with_epochs(e);
        }
        if self.final_mode {
            config = config.final_mode();
        }
        for s in &mut config.stages {
            if let Some(b) = self.batch_size {
                s.batch_size = b;
            }
            if let Some(lr) = self.learning_rate {
                s.learning_rate = lr;
            }
        }
        if let Some(w) = self.weight_scheme {
            config.weight_scheme = w;
        }
        if let Some(o) = self.optimizer {
            config.optimizer = o;
        }
        if let Some(a) = self.augmentation {
            config.augmentation = a;
        }
        if let Some(f) = self.validation_fraction {
            config.validation_fraction = f;
        }
        if let Some(t) = self.total_mode {
            config.total_mode = t;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub resize_divisor: u32,
    pub weighted: bool,
    pub weights: Vec<f64>,
    /// Validation accuracy of the starting parameters, before any update.
    pub initial_validation_accuracy: f64,
    pub initial_per_class_accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub stages: Vec<StageSummary>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn stage_epochs(&self, stage: usize) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(move |r| r.stage == stage)
    }

    pub fn extend(&mut self, other: TrainingHistory) {
        self.stages.extend(other.stages);
        self.epochs.extend(other.epochs);
    }

    pub fn to_csv(&self, schema: &LabelSchema) -> String {
        let mut out = String::from("stage,epoch,train_loss,validation_loss,validation_accuracy");
        for c in schema.classes() {
            out.push(',');
            out.push_str(&c.name);
        }
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}",
                r.stage, r.epoch, r.train_loss, r.validation_loss, r.validation_accuracy
            ));
            for a in &r.per_class_accuracy {
                out.push(',');
                if let Some(a) = a {
                    out.push_str(&a.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Shared inputs for every stage of one run.
#[derive(Debug, Clone)]
pub struct StageContext<'a> {
    pub stage_index: usize,
    pub stage_name: String,
    pub schema: &'a LabelSchema,
    pub normalization: Normalization,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationPolicy,
    pub weights: WeightVector,
    pub total_mode: TotalMode,
    pub seed: u64,
}

pub type Progress<'p> = &'p mut dyn FnMut(&EpochRecord);

/// Trains `model` for one stage and returns it with its checkpoint and history.
pub fn train_stage(
    mut model: Model,
    train_set: &[&SegmentationSample],
    val_set: &[&SegmentationSample],
    stage: &StageSpec,
    ctx: &StageContext,
    progress: Progress,
) -> Result<(Model, Checkpoint, TrainingHistory)> {
    stage.validate(if stage.init_from == InitFrom::Previous {
        1
    } else {
        0
    })?;
    if train_set.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let weights = if stage.weighted {
        ctx.weights.weights.clone()
    } else {
        vec![1.0; model.config().num_classes]
    };
    if weights.len() != model.config().num_classes {
        return Err(Error::Config(format!(
            "{} class weights for a {}-class model",
            weights.len(),
            model.config().num_classes
        )));
    }
    let divisor = stage.resize_divisor;
    let scaled: Vec<SegmentationSample> = train_set.iter().map(|s| downscale(s, divisor)).collect();
    let multiple = model.config().size_multiple();

    let eval_batch = stage.batch_size.max(8);
    let snapshot = |model: &Model| -> Result<(f64, f64, Vec<Option<f64>>)> {
        if val_set.is_empty() {
            return Ok((f64::NAN, f64::NAN, vec![None; weights.len()]));
        }
        let e = evaluate(
            model,
            &ctx.normalization,
            val_set,
            divisor,
            &weights,
            eval_batch,
        )?;
        let m = derive_metrics_with(&e.matrix, ctx.total_mode)?;
        Ok((e.loss, m.total_accuracy, m.per_class_accuracy))
    };
    let (_, initial_accuracy, initial_per_class) = snapshot(&model)?;

    let batches_per_epoch = scaled.len().div_ceil(stage.batch_size);
    let total_steps = batches_per_epoch * stage.epochs;
    let mut optimizer = Optimizer::new(ctx.optimizer, model.params());
    let mut history = TrainingHistory {
        stages: vec![StageSummary {
            stage: ctx.stage_index,
            resize_divisor: divisor,
            weighted: stage.weighted,
            weights: weights.clone(),
            initial_validation_accuracy: initial_accuracy,
            initial_per_class_accuracy: initial_per_class,
        }],
        epochs: Vec::with_capacity(stage.epochs),
    };
    let stage_seed = seed::derive(ctx.seed, 0x5747_0000 + ctx.stage_index as u64);
    let mut step = 0;
    let mut last_train_loss = None;
    let mut last_val_loss = None;
    for epoch in 1..=stage.epochs {
        let mut order: Vec<usize> = (0..scaled.len()).collect();
        order.shuffle(&mut seed::rng(stage_seed, epoch as u64));
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(stage.batch_size).enumerate() {
            let augmented = chunk
                .iter()
                .map(|&i| {
                    let draw = seed::derive(stage_seed, ((epoch as u64) << 32) | i as u64);
                    apply_policy(&scaled[i], &ctx.augmentation, draw)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&SegmentationSample> = augmented.iter().collect();
            let (input, targets) = batch_tensors(&refs, &ctx.normalization, multiple)?;
            let (logits, tape) = model.forward_train(&input)?;
            let (loss, grad) = loss_and_grad(&logits, &targets, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: ctx.stage_index,
                    epoch,
                    loss,
                });
            }
            model.params_mut().zero_grad();
            model.backward(tape, &grad);
            optimizer.step(
                model.params_mut(),
                stage.learning_rate.rate(step, total_steps),
            );
            step += 1;
            epoch_loss += loss;
            let _ = b;
        }
        let train_loss = epoch_loss / batches_per_epoch as f64;
        let (validation_loss, validation_accuracy, per_class_accuracy) = snapshot(&model)?;
        if !validation_loss.is_finite() && !val_set.is_empty() {
            return Err(Error::Divergence {
                stage: ctx.stage_index,
                epoch,
                loss: validation_loss,
            });
        }
        let record = EpochRecord {
            stage: ctx.stage_index,
            epoch,
            train_loss,
            validation_loss,
            validation_accuracy,
            per_class_accuracy,
        };
        progress(&record);
        history.epochs.push(record);
        last_train_loss = Some(train_loss);
        last_val_loss = Some(validation_loss);
    }
    let checkpoint = Checkpoint::capture(
        &model,
        ctx.normalization,
        ctx.schema,
        TrainingMeta {
            stage_name: ctx.stage_name.clone(),
            epochs_completed: stage.epochs,
            final_train_loss: last_train_loss,
            final_validation_loss: last_val_loss.filter(|v| v.is_finite()),
        },
    );
    Ok((model, checkpoint, history))
}

pub struct RunOutcome {
    pub final_checkpoint: Checkpoint,
    pub stage_checkpoints: Vec<Checkpoint>,
    pub history: TrainingHistory,
    pub report: MetricsReport,
    pub split: CorpusSplit,
    pub class_weights: WeightVector,
}

/// Runs every stage of `config` on a seeded train/validation split of `corpus`
/// and evaluates the final model on the validation set at full resolution.
pub fn run_configuration(
    config: &TrainingConfiguration,
    corpus: &[SegmentationSample],
    schema: &LabelSchema,
    seed: u64,
    progress: Progress,
) -> Result<RunOutcome> {
    config.validate()?;
    if config.model.num_classes != schema.len() {
        return Err(Error::Config(format!(
            "model predicts {} classes but the schema has {}",
            config.model.num_classes,
            schema.len()
        )));
    }
    let split = split_corpus(
        corpus.len(),
        config.validation_fraction,
        seed::derive(seed, 0x5911),
    )?;
    let train: Vec<&SegmentationSample> = CorpusSplit::select(&split.train, corpus);
    let val: Vec<&SegmentationSample> = CorpusSplit::select(&split.validation, corpus);
    let train_owned: Vec<SegmentationSample> = train.iter().map(|s| (*s).clone()).collect();
    let distribution = compute_class_distribution(&train_owned, schema)?;
    let class_weights = compute_class_weights(&distribution, config.weight_scheme);
    let normalization = Normalization::from_images(train.iter().map(|s| &s.image));
    let augmentation = AugmentationPolicy {
        seed: seed::derive(seed, config.augmentation.seed),
        ..config.augmentation
    };

    let mut history = TrainingHistory::default();
    let mut stage_checkpoints: Vec<Checkpoint> = Vec::with_capacity(config.stages.len());
    let mut model = None;
    for (i, stage) in config.stages.iter().enumerate() {
        let fresh = Model::build(&config.model, seed::derive(seed, 0x1417 + i as u64))?;
        let start = match (stage.init_from, stage_checkpoints.last()) {
            (InitFrom::Previous, Some(prev)) => transfer_parameters(prev, fresh)?,
            _ => fresh,
        };
        let ctx = StageContext {
            stage_index: i,
            stage_name: format!("{}/stage{}", config.name, i + 1),
            schema,
            normalization,
            optimizer: config.optimizer,
            augmentation,
            weights: class_weights.clone(),
            total_mode: config.total_mode,
            seed,
        };
        let (trained, checkpoint, stage_history) =
            train_stage(start, &train, &val, stage, &ctx, progress)?;
        history.extend(stage_history);
        stage_checkpoints.push(checkpoint);
        model = Some(trained);
    }
    let model = model.expect("at least one stage");
    let final_eval = evaluate(&model, &normalization, &val, 1, &vec![1.0; schema.len()], 8)?;
    let report = derive_metrics_with(&final_eval.matrix, config.total_mode)?
        .with_names(config.name.clone(), schema);
    Ok(RunOutcome {
        final_checkpoint: stage_checkpoints
            .last()
            .expect("at least one stage")
            .clone(),
        stage_checkpoints,
        history,
        report,
        split,
        class_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cycle_shape() {
        let p = LearningRatePolicy::one_cycle(1e-2);
        let total = 100;
        assert!((p.rate(0, total) - 1e-2 / 25.0).abs() < 1e-15);
        assert!((p.rate(25, total) - 1e-2).abs() < 1e-15);
        let end = p.rate(100, total);
        assert!((end - 1e-2 / 25.0 / 1e5).abs() < 1e-15);
        let peak = (0..total).map(|s| p.rate(s, total)).fold(0.0, f64::max);
        assert!((peak - 1e-2).abs() < 1e-12);
    }

    #[test]
    fn preset_names_case_insensitive() {
        let c = TrainingConfiguration::preset("R34-dw", 12).unwrap();
        assert_eq!(c.name, "r34-DW");
        assert!(matches!(
            TrainingConfiguration::preset("r18-S", 12),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_epochs_rejected() {
        let text = r#"
            name = "custom"
            [[stages]]
            epochs = 0
        "#;
        let run = RunConfig::from_toml(text).unwrap();
        assert!(matches!(run.resolve(12), Err(Error::Config(_))));
    }

    #[test]
    fn run_file_overrides() {
        let text = r#"
            preset = "r50-IW"
            encoder = "tiny"
            epochs = 3
            batch_size = 4
            weight_scheme = "median-frequency"
            seed = 9
            [optimizer]
            kind = "adam"
            [augmentation]
            flip_probability = 0.0
        "#;
        let c = RunConfig::from_toml(text).unwrap().resolve(12).unwrap();
        assert_eq!(c.model, ModelConfig::tiny(12));
        assert!(c
            .stages
            .iter()
            .all(|s| s.epochs == 3 && s.batch_size == 4 && s.weighted));
        assert_eq!(c.weight_scheme, WeightScheme::MedianFrequency);
        assert_eq!(c.optimizer.kind, OptimizerKind::Adam);
        assert_eq!(c.augmentation.flip_probability, 0.0);
        assert_eq!(c.augmentation.warp_magnitude, 0.2);
    }

    #[test]
    fn final_flag_sets_long_runs() {
        let c = RunConfig::from_toml("preset = \"r34-DW\"\nfinal = true")
            .unwrap()
            .resolve(12)
            .unwrap();
        assert!(c.stages.iter().all(|s| s.epochs == FINAL_EPOCHS));
    }

    #[test]
    fn run_file_errors() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::default().resolve(12).is_err());
        let both = "preset = \"r34-S\"\n[[stages]]\nepochs = 1";
        assert!(RunConfig::from_toml(both).unwrap().resolve(12).is_err());
        let bad_first = "[[stages]]\ninit_from = \"previous\"";
        assert!(RunConfig::from_toml(bad_first)
            .unwrap()
            .resolve(12)
            .is_err());
        let bad_div = "[[stages]]\nresize_divisor = 3";
        assert!(RunConfig::from_toml(bad_div).unwrap().resolve(12).is_err());
    }

    #[test]
    fn sgd_step_matches_hand_update() {
        let mut store = ParamStore::default();
        store.add("p".into(), vec![2], vec![1.0, -1.0], true);
        store.add("stat".into(), vec![1], vec![5.0], false);
        store.grad_mut(0).copy_from_slice(&[0.5, 0.25]);
        store.grad_mut(1).copy_from_slice(&[9.0]);
        let mut opt = Optimizer::new(OptimizerConfig::default(), &store);
        opt.step(&mut store, 0.1);
        assert_eq!(store.value(0), &[0.95, -1.025]);
        opt.step(&mut store, 0.1);
        // v = 0.9 * 0.5 + 0.5 = 0.95
        assert!((store.value(0)[0] - (0.95 - 0.095)).abs() < 1e-15);
        assert_eq!(store.value(1), &[5.0]);
    }
}
