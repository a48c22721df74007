use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{sequential_batches, CropMode, Dataset, Manifest, Normalization, ScoreScale};
use crate::error::{input_err, Result};
use crate::metrics::MetricsReport;
use crate::nn::Model;

/// Metrics plus the per-sample predictions they were computed from.
#[derive(Clone, Debug, Serialize)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub paths: Vec<PathBuf>,
    pub predictions: Vec<f64>,
    pub labels: Vec<f64>,
}

/// Center-crop predictions for every sample, in dataset order.
pub fn predict_dataset(
    model: &Model<f32>,
    data: &Dataset,
    crop: usize,
    norm: &Normalization,
    batch: usize,
) -> Result<Vec<f64>> {
    // test-mode crops draw nothing from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(data.len());
    for idx in sequential_batches(data.len(), batch) {
        let b = data.batch(&idx, CropMode::Test, crop, norm, &mut rng)?;
        out.extend(model.predict(&b.images)?);
    }
    Ok(out)
}

/// Predicts the images of `manifest` and scores them against the labels in
/// `scores`, which must list the same images in the same order.
pub fn evaluate(
    model: &Model<f32>,
    manifest: &Manifest,
    scores: &Manifest,
    scale: &ScoreScale,
    crop: usize,
    norm: &Normalization,
    batch: usize,
) -> Result<EvalOutput> {
    if manifest.len() != scores.len() {
        return Err(input_err!(
            "{} lists {} images but {} has {} scores",
            manifest.source.display(),
            manifest.len(),
            scores.source.display(),
            scores.len()
        ));
    }
    for (i, (a, b)) in manifest.records.iter().zip(&scores.records).enumerate() {
        if a.path != b.path {
            return Err(input_err!(
                "row {}: manifest image {} but scores for {}",
                i + 2,
                a.path.display(),
                b.path.display()
            ));
        }
    }
    let labels = scores.scores(scale)?;
    let data = Dataset::unlabeled(manifest, true)?;
    let predictions = predict_dataset(model, &data, crop, norm, batch)?;
    let report = MetricsReport::compute(&predictions, &labels)?;
    Ok(EvalOutput {
        report,
        paths: manifest.paths(),
        predictions,
        labels,
    })
}
