//! Class weights and the weight-normalised cross-entropy loss.

use serde::{Deserialize, Serialize};

use crate::dataset::ClassDistribution;
use crate::error::{Error, Result};
use crate::schema::ClassId;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    Uniform,
    #[default]
    InverseFrequency,
    MedianFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub scheme: WeightScheme,
}

impl WeightVector {
    pub fn uniform(num_classes: usize) -> Self {
        WeightVector {
            weights: vec![1.0; num_classes],
            scheme: WeightScheme::Uniform,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Per-class loss weights that counter the pixel imbalance in `dist`.
///
/// Classes that never occur get the largest weight among observed classes.
pub fn compute_class_weights(dist: &ClassDistribution, scheme: WeightScheme) -> WeightVector {
    let f = &dist.fractions;
    let observed: Vec<f64> = f.iter().copied().filter(|&v| v > 0.0).collect();
    if scheme == WeightScheme::Uniform || observed.is_empty() {
        return WeightVector {
            weights: vec![1.0; f.len()],
            scheme,
        };
    }
    let raw: Vec<Option<f64>> = match scheme {
        WeightScheme::InverseFrequency => f.iter().map(|&v| (v > 0.0).then(|| 1.0 / v)).collect(),
        WeightScheme::MedianFrequency => {
            let median = median(&observed);
            f.iter().map(|&v| (v > 0.0).then(|| median / v)).collect()
        }
        WeightScheme::Uniform => unreachable!(),
    };
    let max = raw.iter().flatten().copied().fold(f64::MIN, f64::max);
    let mut weights: Vec<f64> = raw.into_iter().map(|w| w.unwrap_or(max)).collect();
    if scheme == WeightScheme::InverseFrequency {
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        weights.iter_mut().for_each(|w| *w /= mean);
    }
    WeightVector { weights, scheme }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    }
}

fn check_targets(logits: &Tensor, targets: &[ClassId], num_weights: usize) -> Result<()> {
    let [n, c, h, w] = logits.shape();
    if targets.len() != n * h * w {
        return Err(Error::Shape(format!(
            "{} targets for logits of shape {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    if num_weights != c {
        return Err(Error::Shape(format!(
            "{num_weights} class weights for {c} logit channels"
        )));
    }
    Ok(())
}

/// Label value excluded from the loss (used for padding).
pub const IGNORE_LABEL: ClassId = ClassId::MAX;

/// Loss and its gradient w.r.t. the logits.
///
/// `loss = sum_p w[t_p] * -log softmax(z_p)[t_p] / sum_p w[t_p]`, summed over
/// pixels whose label is not [`IGNORE_LABEL`].
pub fn loss_and_grad(
    logits: &Tensor,
    targets: &[ClassId],
    weights: &[f64],
) -> Result<(f64, Tensor)> {
    check_targets(logits, targets, weights.len())?;
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    let mut mass = 0.0;
    let mut probs = vec![0.0; c];
    for b in 0..n {
        let z = logits.item(b);
        let g = grad.item_mut(b);
        for p in 0..plane {
            let t = targets[b * plane + p];
            if t == IGNORE_LABEL {
                continue;
            }
            let t = t as usize;
            if t >= c {
                return Err(Error::Shape(format!("target id {t} outside {c} classes")));
            }
            let max = (0..c)
                .map(|k| z[k * plane + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..c {
                probs[k] = (z[k * plane + p] - max).exp();
                sum += probs[k];
            }
            let log_sum = sum.ln() + max;
            let wt = weights[t];
            total += wt * (log_sum - z[t * plane + p]);
            mass += wt;
            for k in 0..c {
                g[k * plane + p] = wt * probs[k] / sum;
            }
            g[t * plane + p] -= wt;
        }
    }
    if mass <= 0.0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / mass;
    grad.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok((total * inv, grad))
}

pub fn weighted_cross_entropy(
    logits: &Tensor,
    targets: &[ClassId],
    weights: &WeightVector,
) -> Result<f64> {
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= weights.len()) {
        return Err(Error::Shape(format!(
            "target id {bad} outside {} classes",
            weights.len()
        )));
    }
    loss_and_grad(logits, targets, &weights.weights).map(|(l, _)| l)
}

/// Per-pixel softmax over the channel axis.
pub fn softmax(logits: &Tensor) -> Tensor {
    let [n, c, _, _] = logits.shape();
    let plane = logits.plane();
    let mut out = logits.clone();
    for b in 0..n {
        let item = out.item_mut(b);
        for p in 0..plane {
            let max = (0..c)
                .map(|k| item[k * plane + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..c {
                let e = (item[k * plane + p] - max).exp();
                item[k * plane + p] = e;
                sum += e;
            }
            for k in 0..c {
                item[k * plane + p] /= sum;
            }
        }
    }
    out
}

/// Arg-max class per pixel, `B*H*W` values in NHW order.
pub fn argmax(logits: &Tensor) -> Vec<ClassId> {
    let [n, c, _, _] = logits.shape();
    let plane = logits.plane();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let item = logits.item(b);
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if item[k * plane + p] > item[best * plane + p] {
                    best = k;
                }
            }
            out.push(best as ClassId);
        }
    }
    out
}
