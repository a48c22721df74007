//! Style/quality correlation analysis per backbone stage, with CSV export of
//! the raw style vectors.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{sequential_batches, CropMode, Dataset, Normalization};
use crate::error::{config_err, input_err, Error, Result};
use crate::metrics::srocc;
use crate::nn::{BnMode, Forward, Model};
use crate::style::extract_style;

/// Upper bound on the individual activations sampled per stage for the
/// feature correlation.
pub const MAX_FEATURE_SAMPLES: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub channels: usize,
    /// Mean over channels of `|SROCC(channel mean, quality)|`.
    pub mean_abs_srocc: f64,
    /// Mean over channels of `|SROCC(channel std, quality)|`.
    pub std_abs_srocc: f64,
    /// Average of the two style statistics above.
    pub style_abs_srocc: f64,
    /// Mean `|SROCC|` over individual feature activations.
    pub feature_abs_srocc: f64,
    /// Statistics with zero variance across samples, counted as 0.
    pub constant_statistics: usize,
    pub csv: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleAnalysis {
    pub n: usize,
    pub domain: String,
    pub stages: Vec<StageSummary>,
}

fn mean_abs_srocc(columns: &[Vec<f64>], labels: &[f64]) -> (f64, usize) {
    let mut constant = 0;
    let total: f64 = columns
        .iter()
        .map(|c| match srocc(c, labels) {
            Ok(r) => r.abs(),
            Err(_) => {
                constant += 1;
                0.0
            }
        })
        .sum();
    (total / columns.len().max(1) as f64, constant)
}

/// Runs the model in evaluation mode over `data`, writes
/// `styles_stage{k}.csv` into `out_dir` for every requested stage and
/// returns the correlation summary. An empty `stages` selects all stages.
#[allow(clippy::too_many_arguments)]
pub fn analyze_styles(
    model: &Model<f32>,
    data: &Dataset,
    labels: &[f64],
    domain: &str,
    stages: &[usize],
    crop: usize,
    norm: &Normalization,
    batch: usize,
    out_dir: &Path,
) -> Result<StyleAnalysis> {
    if labels.len() != data.len() {
        return Err(input_err!("{} images but {} quality scores", data.len(), labels.len()));
    }
    let available = model.backbone.num_stages();
    let mut stages: Vec<usize> = if stages.is_empty() {
        (1..=available).collect()
    } else {
        stages.to_vec()
    };
    stages.sort_unstable();
    stages.dedup();
    if let Some(&bad) = stages.iter().find(|&&s| s == 0 || s > available) {
        return Err(config_err!("stage {bad} outside 1..={available}"));
    }
    let deepest = *stages.last().expect("non-empty");
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let n = data.len();
    // per stage: style rows and sampled activation columns
    let mut means: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); stages.len()];
    let mut stds: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); stages.len()];
    let mut feats: Vec<Vec<Vec<f64>>> = vec![Vec::new(); stages.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for idx in sequential_batches(n, batch) {
        let b = data.batch(&idx, CropMode::Test, crop, norm, &mut rng)?;
        let g = Graph::new();
        let f = Forward::new(&g, &model.store, BnMode::Eval);
        let taps = model.backbone.forward_taps(&f, g.constant(b.images), deepest)?;
        for (k, &s) in stages.iter().enumerate() {
            let map = taps[s - 1].value();
            for sv in extract_style(&map)? {
                means[k].push(sv.mean);
                stds[k].push(sv.std);
            }
            let per = map.len() / idx.len();
            let stride = per.div_ceil(MAX_FEATURE_SAMPLES).max(1);
            let picks: Vec<usize> = (0..per).step_by(stride).collect();
            if feats[k].is_empty() {
                feats[k] = vec![Vec::with_capacity(n); picks.len()];
            }
            for row in 0..idx.len() {
                let r = &map.data()[row * per..(row + 1) * per];
                for (col, &p) in feats[k].iter_mut().zip(&picks) {
                    col.push(f64::from(r[p]));
                }
            }
        }
    }

    let mut summaries = Vec::new();
    for (k, &s) in stages.iter().enumerate() {
        let channels = means[k].first().map_or(0, Vec::len);
        let columns = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            (0..channels).map(|c| rows.iter().map(|r| r[c]).collect()).collect()
        };
        let (m, cm) = mean_abs_srocc(&columns(&means[k]), labels);
        let (sd, cs) = mean_abs_srocc(&columns(&stds[k]), labels);
        let (fe, _) = mean_abs_srocc(&feats[k], labels);
        let csv = out_dir.join(format!("styles_stage{s}.csv"));
        write_style_csv(&csv, domain, labels, &means[k], &stds[k])?;
        summaries.push(StageSummary {
            stage: s,
            channels,
            mean_abs_srocc: m,
            std_abs_srocc: sd,
            style_abs_srocc: 0.5 * (m + sd),
            feature_abs_srocc: fe,
            constant_statistics: cm + cs,
            csv,
        });
    }
    Ok(StyleAnalysis {
        n,
        domain: domain.to_string(),
        stages: summaries,
    })
}

fn write_style_csv(path: &Path, domain: &str, labels: &[f64], means: &[Vec<f64>], stds: &[Vec<f64>]) -> Result<()> {
    let channels = means.first().map_or(0, Vec::len);
    let err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string(), "domain".into(), "quality".into()];
    header.extend((0..channels).map(|c| format!("mean_{c}")));
    header.extend((0..channels).map(|c| format!("std_{c}")));
    w.write_record(&header).map_err(err)?;
    for (i, ((m, s), y)) in means.iter().zip(stds).zip(labels).enumerate() {
        let mut row = vec![i.to_string(), domain.to_string(), format!("{y}")];
        row.extend(m.iter().chain(s).map(|v| format!("{v}")));
        w.write_record(&row).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
