//! Batched inference and evaluation helpers shared by training and the CLI.

use image::{Rgb, RgbImage};

use crate::dataset::{downscale, Mask, SegmentationSample};
use crate::error::Result;
use crate::eval::ConfusionMatrix;
use crate::loss::{argmax, loss_and_grad, IGNORE_LABEL};
use crate::model::{Model, Normalization};
use crate::schema::{ClassId, LabelSchema};
use crate::tensor::Tensor;

/// Normalised, padded input tensor plus targets (padding marked ignored).
pub(crate) fn batch_tensors(
    samples: &[&SegmentationSample],
    normalization: &Normalization,
    multiple: usize,
) -> Result<(Tensor, Vec<ClassId>)> {
    let height = samples
        .iter()
        .map(|s| s.height() as usize)
        .max()
        .unwrap_or(0);
    let width = samples
        .iter()
        .map(|s| s.width() as usize)
        .max()
        .unwrap_or(0);
    let (ph, pw) = (
        height.div_ceil(multiple).max(1) * multiple,
        width.div_ceil(multiple).max(1) * multiple,
    );
    let mut parts = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len() * ph * pw);
    for s in samples {
        parts.push(normalization.to_tensor(&[&s.image])?.pad_to(ph, pw));
        for row in s.mask.rows() {
            targets.extend_from_slice(row);
            targets.extend(std::iter::repeat_n(IGNORE_LABEL, pw - row.len()));
        }
        targets.extend(std::iter::repeat_n(
            IGNORE_LABEL,
            pw * (ph - s.height() as usize),
        ));
    }
    Ok((Tensor::concat_batch(&parts)?, targets))
}

/// Most likely class per pixel for one image, at the image's own resolution.
pub fn predict_mask(
    model: &Model,
    normalization: &Normalization,
    image: &RgbImage,
) -> Result<Mask> {
    let input = normalization.to_tensor(&[image])?;
    let logits = model.forward_any(&input)?;
    Mask::from_vec(image.width(), image.height(), argmax(&logits))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub matrix: ConfusionMatrix,
    /// Weighted loss over all evaluated pixels.
    pub loss: f64,
}

/// Inference-mode evaluation of `samples`, downscaled by `divisor`.
pub fn evaluate(
    model: &Model,
    normalization: &Normalization,
    samples: &[&SegmentationSample],
    divisor: u32,
    weights: &[f64],
    batch_size: usize,
) -> Result<Evaluation> {
    let num_classes = model.config().num_classes;
    let multiple = model.config().size_multiple();
    let mut matrix = ConfusionMatrix::new(num_classes);
    let mut loss_sum = 0.0;
    let mut mass = 0.0;
    let scaled: Vec<SegmentationSample> = samples.iter().map(|s| downscale(s, divisor)).collect();
    for chunk in scaled.chunks(batch_size.max(1)) {
        let refs: Vec<&SegmentationSample> = chunk.iter().collect();
        let (input, targets) = batch_tensors(&refs, normalization, multiple)?;
        let logits = model.forward(&input)?;
        let (loss, _) = loss_and_grad(&logits, &targets, weights)?;
        let batch_mass: f64 = targets
            .iter()
            .filter(|&&t| t != IGNORE_LABEL)
            .map(|&t| weights[t as usize])
            .sum();
        loss_sum += loss * batch_mass;
        mass += batch_mass;
        let predicted = argmax(&logits);
        let (p, t): (Vec<ClassId>, Vec<ClassId>) = predicted
            .into_iter()
            .zip(targets)
            .filter(|(_, t)| *t != IGNORE_LABEL)
            .unzip();
        matrix.accumulate(&p, &t)?;
    }
    Ok(Evaluation {
        matrix,
        loss: if mass > 0.0 { loss_sum / mass } else { 0.0 },
    })
}

/// Paints a mask with the schema's display colors.
pub fn colorize(mask: &Mask, schema: &LabelSchema) -> RgbImage {
    RgbImage::from_fn(mask.width(), mask.height(), |x, y| {
        let id = mask.get(x, y);
        Rgb(if schema.contains(id) {
            schema.color(id)
        } else {
            [0, 0, 0]
        })
    })
}

/// Alpha-blends the colorized mask over the image.
pub fn overlay(image: &RgbImage, mask: &Mask, schema: &LabelSchema, alpha: f64) -> RgbImage {
    let colors = colorize(mask, schema);
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let a = image.get_pixel(x, y).0;
        let b = colors.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|c| {
            (a[c] as f64 * (1.0 - alpha) + b[c] as f64 * alpha).round() as u8
        }))
    })
}
