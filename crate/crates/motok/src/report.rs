//! Held-out measurements of a trained tokenizer and the evaluation report.

use std::fmt::Write as _;

use motok_core::kcb::foot_slide;
use motok_core::metrics::kendalls_tau;
use motok_core::motion::MotionSequence;
use motok_core::vqvae::TcasModel;
use motok_core::Tensor;
use serde::Serialize;

use crate::error::Result;

/// Per-element reconstruction MSE in normalized units, averaged over
/// sequences. Uses the model's final output (KCB corrected when enabled).
pub fn reconstruction_mse(model: &TcasModel, seqs: &[MotionSequence]) -> Result<f64> {
    let mut total = 0.0;
    for s in seqs {
        let x = model.norm.normalize_tensor(&s.frames)?;
        let (_, rec) = model.reconstruct(&x)?;
        total += rec.data().iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.numel() as f64;
    }
    Ok(total / seqs.len().max(1) as f64)
}

/// Mean Kendall's tau between encoder outputs over every unordered pair of
/// same-class sequences. Returns the mean and the number of pairs.
pub fn same_class_tau(model: &TcasModel, seqs: &[MotionSequence]) -> Result<(f64, usize)> {
    let latents: Vec<Tensor> = seqs
        .iter()
        .map(|s| Ok(model.encode(&model.norm.normalize_tensor(&s.frames)?)?.0))
        .collect::<Result<_>>()?;
    let (mut sum, mut pairs) = (0.0, 0);
    for i in 0..seqs.len() {
        for j in i + 1..seqs.len() {
            if seqs[i].category.is_some() && seqs[i].category == seqs[j].category {
                sum += kendalls_tau(&latents[i], &latents[j])?;
                pairs += 1;
            }
        }
    }
    Ok((if pairs == 0 { f64::NAN } else { sum / pairs as f64 }, pairs))
}

/// Foot slide of the raw and of the KCB-corrected reconstruction of `seq`.
pub fn slide_raw_corrected(model: &TcasModel, seq: &MotionSequence) -> Result<(f64, f64)> {
    let x = model.norm.normalize_tensor(&seq.frames)?;
    let (raw, cor) = model.reconstruct(&x)?;
    let measure = |t: &Tensor| -> Result<f64> {
        let m = model.to_motion(t)?;
        Ok(foot_slide(&m, &model.skeleton, &model.layout, &model.config.kcb)?.value)
    };
    Ok((measure(&raw)?, measure(&cor)?))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn push(&mut self, metric: &str, value: f64, config_hash: &str, seed: u64) {
        self.rows.push(ReportRow {
            metric: metric.to_string(),
            value,
            config_hash: config_hash.to_string(),
            seed,
        });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  {:>14}  {:<16}  seed\n", "metric", "value", "config");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>14.6}  {:<16}  {}", r.metric, r.value, &r.config_hash[..16.min(r.config_hash.len())], r.seed);
        }
        out
    }

    pub fn csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| crate::error::MotokError::Usage(e.to_string()))?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}
