//! U-Net style segmentation network with a residual encoder.
//!
//! The encoder is a stem convolution at full resolution followed by stages
//! of residual blocks, each stage halving the resolution. The decoder walks
//! back up, joining each level with the same-resolution encoder features,
//! and a zero-initialised 1x1 convolution produces per-pixel class logits.

use std::io::{Read, Write};
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    BlockKind, Conv2d, ConvBn, ConvBnCache, DecoderBlock, DecoderCache, Init, ParamStore,
    ResidualBlock, ResidualCache,
};
use crate::schema::LabelSchema;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    #[serde(alias = "r34")]
    R34Like,
    #[serde(alias = "r50")]
    R50Like,
    Tiny,
}

impl EncoderVariant {
    pub fn block_kind(self) -> BlockKind {
        match self {
            EncoderVariant::R50Like => BlockKind::Bottleneck,
            _ => BlockKind::Basic,
        }
    }
}

/// Parameter budget the desk-scale variant must stay under.
pub const TINY_PARAMETER_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_variant: EncoderVariant,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_source: Option<String>,
}

impl ModelConfig {
    pub fn tiny(num_classes: usize) -> Self {
        ModelConfig {
            encoder_variant: EncoderVariant::Tiny,
            stem_channels: 16,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: vec![1, 1, 1],
            num_classes,
            pretrained_source: None,
        }
    }

    pub fn r34_like(num_classes: usize) -> Self {
        ModelConfig {
            encoder_variant: EncoderVariant::R34Like,
            stem_channels: 64,
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: vec![3, 4, 6, 3],
            num_classes,
            pretrained_source: None,
        }
    }

    pub fn r50_like(num_classes: usize) -> Self {
        ModelConfig {
            encoder_variant: EncoderVariant::R50Like,
            stem_channels: 64,
            stage_channels: vec![256, 512, 1024, 2048],
            blocks_per_stage: vec![3, 4, 6, 3],
            num_classes,
            pretrained_source: None,
        }
    }

    pub fn for_variant(variant: EncoderVariant, num_classes: usize) -> Self {
        match variant {
            EncoderVariant::Tiny => Self::tiny(num_classes),
            EncoderVariant::R34Like => Self::r34_like(num_classes),
            EncoderVariant::R50Like => Self::r50_like(num_classes),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.num_stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != self.blocks_per_stage.len() {
            return Err(Error::Config(format!(
                "{} stage widths but {} block counts",
                self.stage_channels.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.stage_channels.len() < 2 {
            return Err(Error::Config(
                "the encoder needs at least two stages".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.stem_channels == 0
            || self.stage_channels.contains(&0)
            || self.blocks_per_stage.contains(&0)
        {
            return Err(Error::Config(
                "channel and block counts must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Same network topology (ignores provenance fields).
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.encoder_variant.block_kind() == other.encoder_variant.block_kind()
            && self.stem_channels == other.stem_channels
            && self.stage_channels == other.stage_channels
            && self.blocks_per_stage == other.blocks_per_stage
            && self.num_classes == other.num_classes
    }
}

/// Per-channel standardisation applied to 8-bit images before the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [127.5; 3],
            std: [64.0; 3],
        }
    }
}

impl Normalization {
    /// Channel statistics over every pixel of the given images.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0.0;
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    let v = p.0[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Normalization::default();
        }
        let mean = sum.map(|s| s / n);
        let mut std = [0.0; 3];
        for c in 0..3 {
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1.0);
        }
        Normalization { mean, std }
    }

    pub fn to_tensor(&self, images: &[&RgbImage]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (w, h) = first.dimensions();
        let plane = (w * h) as usize;
        let mut out = Tensor::zeros([images.len(), 3, h as usize, w as usize]);
        for (i, img) in images.iter().enumerate() {
            if img.dimensions() != (w, h) {
                return Err(Error::Shape("images in a batch must share a size".into()));
            }
            let item = out.item_mut(i);
            for (j, p) in img.pixels().enumerate() {
                for c in 0..3 {
                    item[c * plane + j] = (p.0[c] as f64 - self.mean[c]) / self.std[c];
                }
            }
        }
        Ok(out)
    }
}

struct Stage {
    blocks: Vec<ResidualBlock>,
}

/// Intermediate activations recorded by a training forward pass.
pub struct Tape {
    input_shape: [usize; 4],
    stem: ConvBnCache,
    stages: Vec<Vec<ResidualCache>>,
    decoders: Vec<DecoderCache>,
    head_input: Tensor,
}

pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    stem: ConvBn,
    stages: Vec<Stage>,
    /// `decoders[i]` produces the features at the resolution of encoder level `i`.
    decoders: Vec<DecoderBlock>,
    head: Conv2d,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl Model {
    /// Builds a freshly initialised network; `seed` fixes the initial weights.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = seed::rng(seed, 0x4D0D);
        let mut store = ParamStore::default();
        let kind = config.encoder_variant.block_kind();

        let stem = ConvBn::new(
            &mut store,
            "encoder.stem",
            3,
            config.stem_channels,
            3,
            1,
            true,
            &mut rng,
        );
        // level_channels[i] = channels of the features at resolution / 2^i
        let mut level_channels = vec![config.stem_channels];
        let mut stages = Vec::with_capacity(config.num_stages());
        let mut in_c = config.stem_channels;
        for (s, (&out_c, &blocks)) in config
            .stage_channels
            .iter()
            .zip(&config.blocks_per_stage)
            .enumerate()
        {
            let blocks = (0..blocks)
                .map(|b| {
                    let stride = if b == 0 { 2 } else { 1 };
                    let block_in = if b == 0 { in_c } else { out_c };
                    ResidualBlock::new(
                        &mut store,
                        &format!("encoder.stage{s}.block{b}"),
                        kind,
                        block_in,
                        out_c,
                        stride,
                        &mut rng,
                    )
                })
                .collect();
            stages.push(Stage { blocks });
            level_channels.push(out_c);
            in_c = out_c;
        }

        let mut decoders = Vec::with_capacity(config.num_stages());
        let mut up_c = *level_channels.last().expect("non-empty");
        let mut built = Vec::new();
        for level in (0..config.num_stages()).rev() {
            let skip_c = level_channels[level];
            built.push((
                level,
                DecoderBlock::new(
                    &mut store,
                    &format!("decoder.level{level}"),
                    up_c,
                    skip_c,
                    skip_c,
                    &mut rng,
                ),
            ));
            up_c = skip_c;
        }
        built.sort_by_key(|(level, _)| *level);
        decoders.extend(built.into_iter().map(|(_, d)| d));

        let head = Conv2d::new(
            &mut store,
            "head",
            config.stem_channels,
            config.num_classes,
            1,
            1,
            true,
            Init::Zeros,
            &mut rng,
        );

        Ok(Model {
            config: config.clone(),
            store,
            stem,
            stages,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let [n, c, h, w] = batch.shape();
        let multiple = self.config.size_multiple();
        if n == 0 || c != 3 {
            return Err(Error::Shape(format!(
                "expected a non-empty Bx3xHxW batch, got {:?}",
                batch.shape()
            )));
        }
        if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must have height and width divisible by {multiple}"
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass producing `B x C x H x W` logits.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let s = &self.store;
        let mut features = vec![self.stem.forward_eval(s, batch)];
        for stage in &self.stages {
            let mut h = features.last().expect("non-empty").clone();
            for block in &stage.blocks {
                h = block.forward_eval(s, &h);
            }
            features.push(h);
        }
        let mut h = features.pop().expect("bottleneck");
        for level in (0..self.stages.len()).rev() {
            h = self.decoders[level].forward_eval(s, &h, &features[level]);
        }
        Ok(self.head.forward(s, &h))
    }

    /// Forward pass for any spatial size: pads bottom/right to the next
    /// accepted multiple and crops the logits back.
    pub fn forward_any(&self, batch: &Tensor) -> Result<Tensor> {
        let m = self.config.size_multiple();
        let (h, w) = (batch.height(), batch.width());
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let logits = self.forward(&batch.pad_to(ph.max(m), pw.max(m)))?;
        Ok(logits.crop_to(h, w))
    }

    /// Training-mode forward (batch statistics); keep the tape for [`Model::backward`].
    pub fn forward_train(&self, batch: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_input(batch)?;
        let s = &self.store;
        let (stem_out, stem_cache) = self.stem.forward_train(s, batch);
        let mut features = vec![stem_out];
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut h = features.last().expect("non-empty").clone();
            let mut caches = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (y, c) = block.forward_train(s, &h);
                caches.push(c);
                h = y;
            }
            stage_caches.push(caches);
            features.push(h);
        }
        let mut h = features.pop().expect("bottleneck");
        let mut decoder_caches: Vec<Option<DecoderCache>> =
            (0..self.stages.len()).map(|_| None).collect();
        for level in (0..self.stages.len()).rev() {
            let (y, c) = self.decoders[level].forward_train(s, &h, &features[level]);
            decoder_caches[level] = Some(c);
            h = y;
        }
        let logits = self.head.forward(s, &h);
        let tape = Tape {
            input_shape: batch.shape(),
            stem: stem_cache,
            stages: stage_caches,
            decoders: decoder_caches
                .into_iter()
                .map(|c| c.expect("filled"))
                .collect(),
            head_input: h,
        };
        Ok((logits, tape))
    }

    /// Accumulates parameter gradients for `dLoss/dlogits` and updates batch-norm running statistics.
    pub fn backward(&mut self, tape: Tape, grad_logits: &Tensor) -> Tensor {
        let s = &mut self.store;
        let mut g = self.head.backward(s, &tape.head_input, grad_logits);
        let levels = self.stages.len();
        // Gradients flowing into each encoder level's output via skips.
        let mut skip_grads: Vec<Option<Tensor>> = (0..=levels).map(|_| None).collect();
        for level in 0..levels {
            let (g_up, g_skip) = self.decoders[level].backward(s, &tape.decoders[level], &g);
            skip_grads[level] = Some(g_skip);
            g = g_up;
        }
        // g is now the gradient w.r.t. the bottleneck output (level `levels`).
        for level in (1..=levels).rev() {
            if let Some(extra) = skip_grads[level].take() {
                g.add_assign(&extra);
            }
            let stage = &self.stages[level - 1];
            for (block, cache) in stage.blocks.iter().zip(&tape.stages[level - 1]).rev() {
                g = block.backward(s, cache, &g);
            }
        }
        if let Some(extra) = skip_grads[0].take() {
            g.add_assign(&extra);
        }
        let gx = self.stem.backward(s, &tape.stem, &g);
        debug_assert_eq!(gx.shape(), tape.input_shape);
        gx
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8; 8] = b"RSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub stage_name: String,
    pub epochs_completed: usize,
    pub final_train_loss: Option<f64>,
    pub final_validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// A snapshot of a model's parameters with everything needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub normalization: Normalization,
    pub schema: LabelSchema,
    pub training_meta: TrainingMeta,
    pub parameters: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    model_config: ModelConfig,
    normalization: Normalization,
    schema: LabelSchema,
    training_meta: TrainingMeta,
    tensors: Vec<TensorIndex>,
}

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        normalization: Normalization,
        schema: &LabelSchema,
        training_meta: TrainingMeta,
    ) -> Self {
        let parameters = model
            .store
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                values: e.value.clone(),
            })
            .collect();
        Checkpoint {
            model_config: model.config.clone(),
            normalization,
            schema: schema.clone(),
            training_meta,
            parameters,
        }
    }

    /// Rebuilds the model this checkpoint was captured from.
    pub fn to_model(&self) -> Result<Model> {
        let model = Model::build(&self.model_config, 0)?;
        transfer_parameters(self, model)
    }

    /// Layout: magic, u32 version, u64 header length, JSON header, then every
    /// tensor's values as little-endian f64 in header order.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            model_config: self.model_config.clone(),
            normalization: self.normalization,
            schema: self.schema.clone(),
            training_meta: self.training_meta.clone(),
            tensors: self
                .parameters
                .iter()
                .map(|p| TensorIndex {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for p in &self.parameters {
            let mut buf = Vec::with_capacity(p.values.len() * 8);
            for v in &p.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let io = |e: std::io::Error| Error::Checkpoint(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(io)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut json).map_err(io)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut parameters = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let count: usize = t.shape.iter().product();
            let mut raw = vec![0u8; count * 8];
            input.read_exact(&mut raw).map_err(io)?;
            let values = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            parameters.push(NamedTensor {
                name: t.name,
                shape: t.shape,
                values,
            });
        }
        Ok(Checkpoint {
            model_config: header.model_config,
            normalization: header.normalization,
            schema: header.schema,
            training_meta: header.training_meta,
            parameters,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// Copies every parameter of `source` into `target`, which must have the same architecture.
pub fn transfer_parameters(source: &Checkpoint, mut target: Model) -> Result<Model> {
    let entries = target.store.entries_mut();
    if entries.len() != source.parameters.len()
        || !source.model_config.same_architecture(&target.config)
    {
        let first = entries
            .iter()
            .zip(&source.parameters)
            .find(|(e, p)| e.name != p.name || e.shape != p.shape)
            .map(|(e, p)| format!("{} {:?} vs {} {:?}", p.name, p.shape, e.name, e.shape))
            .unwrap_or_else(|| {
                format!(
                    "parameter count {} vs {}",
                    source.parameters.len(),
                    entries.len()
                )
            });
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: first difference at {first}"
        )));
    }
    for (entry, param) in entries.iter_mut().zip(&source.parameters) {
        if entry.name != param.name || entry.shape != param.shape {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: first difference at {} {:?} vs {} {:?}",
                param.name, param.shape, entry.name, entry.shape
            )));
        }
        entry.value.copy_from_slice(&param.values);
    }
    Ok(target)
}
