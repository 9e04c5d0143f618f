//! Confusion matrices and the accuracy figures derived from them.
//!
//! Rows are ground truth, columns are predictions. Per-class accuracy is the
//! row-normalised diagonal (recall); classes with an empty row are absent.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{ClassId, LabelSchema};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// Row-major `num_classes x num_classes` counts.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            num_classes: c,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.num_classes..(truth + 1) * self.num_classes]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.num_classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, i)).sum()
    }

    /// Adds one pixel-aligned prediction/ground-truth pair.
    pub fn accumulate(&mut self, predicted: &[ClassId], truth: &[ClassId]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                predicted.len(),
                truth.len()
            )));
        }
        let c = self.num_classes;
        if let Some(&bad) = predicted.iter().chain(truth).find(|&&v| v as usize >= c) {
            return Err(Error::Shape(format!("class id {bad} outside {c} classes")));
        }
        for (&p, &t) in predicted.iter().zip(truth) {
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape(
                "cannot merge matrices of different sizes".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Confusion counts over mask pairs; each pair must have equal length.
pub fn accumulate_confusion<P, T>(
    predicted: &[P],
    truth: &[T],
    num_classes: usize,
) -> Result<ConfusionMatrix>
where
    P: AsRef<[ClassId]>,
    T: AsRef<[ClassId]>,
{
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predicted masks for {} ground-truth masks",
            predicted.len(),
            truth.len()
        )));
    }
    let mut m = ConfusionMatrix::new(num_classes);
    for (p, t) in predicted.iter().zip(truth) {
        m.accumulate(p.as_ref(), t.as_ref())?;
    }
    Ok(m)
}

/// Rows scaled to sum to one; all-zero rows stay zero.
pub fn row_normalize(matrix: &ConfusionMatrix) -> Vec<Vec<f64>> {
    (0..matrix.num_classes)
        .map(|t| {
            let sum = matrix.row_sum(t);
            matrix
                .row(t)
                .iter()
                .map(|&v| if sum == 0 { 0.0 } else { v as f64 / sum as f64 })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TotalMode {
    /// Correct pixels over all pixels.
    #[default]
    Pixel,
    /// Unweighted mean of the defined per-class accuracies.
    ClassMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_name: String,
    pub class_names: Vec<String>,
    /// `None` for classes that never occur in the ground truth.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub total_accuracy: f64,
    pub total_mode: TotalMode,
    pub matrix: ConfusionMatrix,
    pub normalized_matrix: Vec<Vec<f64>>,
}

pub fn derive_metrics(matrix: &ConfusionMatrix) -> Result<MetricsReport> {
    derive_metrics_with(matrix, TotalMode::Pixel)
}

pub fn derive_metrics_with(
    matrix: &ConfusionMatrix,
    total_mode: TotalMode,
) -> Result<MetricsReport> {
    let total = matrix.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let per_class_accuracy: Vec<Option<f64>> = (0..matrix.num_classes)
        .map(|c| {
            let sum = matrix.row_sum(c);
            (sum > 0).then(|| matrix.get(c, c) as f64 / sum as f64)
        })
        .collect();
    let total_accuracy = match total_mode {
        TotalMode::Pixel => matrix.trace() as f64 / total as f64,
        TotalMode::ClassMean => {
            let defined: Vec<f64> = per_class_accuracy.iter().flatten().copied().collect();
            defined.iter().sum::<f64>() / defined.len() as f64
        }
    };
    Ok(MetricsReport {
        config_name: String::new(),
        class_names: (0..matrix.num_classes)
            .map(|c| format!("class{c}"))
            .collect(),
        per_class_accuracy,
        total_accuracy,
        total_mode,
        matrix: matrix.clone(),
        normalized_matrix: row_normalize(matrix),
    })
}

impl MetricsReport {
    pub fn with_names(mut self, config_name: impl Into<String>, schema: &LabelSchema) -> Self {
        self.config_name = config_name.into();
        if schema.len() == self.class_names.len() {
            self.class_names = schema.classes().iter().map(|c| c.name.clone()).collect();
        }
        self
    }

    pub fn accuracy(&self, class: ClassId) -> Option<f64> {
        self.per_class_accuracy
            .get(class as usize)
            .copied()
            .flatten()
    }

    /// `class,name,accuracy,pixels` rows for every class, then a `Total` row.
    /// Absent classes have an empty accuracy field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,name,accuracy,pixels\n");
        for (c, (name, acc)) in self
            .class_names
            .iter()
            .zip(&self.per_class_accuracy)
            .enumerate()
        {
            let acc = acc.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{c},{name},{acc},{}\n", self.matrix.row_sum(c)));
        }
        out.push_str(&format!(
            ",Total,{},{}\n",
            self.total_accuracy,
            self.matrix.total()
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad metrics report: {e}")))
    }

    /// Text table in the layout of a results table: one column per class plus Total.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, acc) in self.class_names.iter().zip(&self.per_class_accuracy) {
            let v = acc
                .map(|a| format!("{:6.2}%", a * 100.0))
                .unwrap_or_else(|| "      -".into());
            out.push_str(&format!("{name:<14}{v}\n"));
        }
        out.push_str(&format!(
            "{:<14}{:6.2}%\n",
            "Total",
            self.total_accuracy * 100.0
        ));
        out
    }
}

/// Side of one matrix cell in the rendered image, in pixels.
pub const MATRIX_CELL_PX: u32 = 16;

/// Grayscale heat map of a row-normalised matrix: cell `(t, p)` is filled with
/// `round(255 * value)` in every channel, truth along rows.
pub fn render_matrix_image(normalized: &[Vec<f64>]) -> RgbImage {
    let c = normalized.len() as u32;
    let mut img = RgbImage::new(c * MATRIX_CELL_PX, c * MATRIX_CELL_PX);
    for (t, row) in normalized.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            let level = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            for dy in 0..MATRIX_CELL_PX {
                for dx in 0..MATRIX_CELL_PX {
                    img.put_pixel(
                        p as u32 * MATRIX_CELL_PX + dx,
                        t as u32 * MATRIX_CELL_PX + dy,
                        Rgb([level; 3]),
                    );
                }
            }
        }
    }
    img
}

/// Multi-configuration comparison: one row per report, one column per class, then Total.
pub fn comparison_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("config");
    if let Some(first) = reports.first() {
        for name in &first.class_names {
            out.push(',');
            out.push_str(name);
        }
    }
    out.push_str(",Total\n");
    for r in reports {
        out.push_str(&r.config_name);
        for acc in &r.per_class_accuracy {
            out.push(',');
            if let Some(a) = acc {
                out.push_str(&a.to_string());
            }
        }
        out.push_str(&format!(",{}\n", r.total_accuracy));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Png,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "png" => Ok(ReportFormat::Png),
            other => Err(Error::Config(format!(
                "unknown report format {other:?} (expected csv, json or png)"
            ))),
        }
    }
}

/// Writes `report` to `<dir>/<stem>.<ext>` in the given format.
pub fn render_report(
    report: &MetricsReport,
    format: ReportFormat,
    dir: &Path,
    stem: &str,
) -> Result<PathBuf> {
    let write = |path: PathBuf, text: String| -> Result<PathBuf> {
        std::fs::write(&path, text)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    };
    match format {
        ReportFormat::Csv => write(dir.join(format!("{stem}.csv")), report.to_csv()),
        ReportFormat::Json => write(dir.join(format!("{stem}.json")), report.to_json()),
        ReportFormat::Png => {
            let path = dir.join(format!("{stem}_matrix.png"));
            render_matrix_image(&report.normalized_matrix)
                .save(&path)
                .map_err(|e| Error::format(&path, e))?;
            Ok(path)
        }
    }
}

/// Writes the CSV, JSON and PNG renderings.
pub fn render_all(report: &MetricsReport, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Png]
        .into_iter()
        .map(|f| render_report(report, f, dir, stem))
        .collect()
}
