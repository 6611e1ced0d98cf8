//! Benchmark harness: greedy decoding per query, Y-channel metrics, and the
//! report / training-log CSV files.

use std::fs;
use std::io;
use std::path::Path;

use stepsr_core::codec::{Codebook, Control, TokenSequence};
use stepsr_core::image::RgbImage;
use stepsr_core::metrics::{psnr_y, ssim_y};
use stepsr_core::policy::{Model, PolicyParams};
use stepsr_core::rewards::{decode_pyramid, total_rewards, RewardBreakdown, RewardToggles, Scorer};
use stepsr_core::trace::{parse_trace, GtBundle, TraceLayout};
use stepsr_core::train::GrpoLogRow;
use thiserror::Error;

/// One evaluated sample: Y-channel metrics of the greedy fine output plus
/// the reward breakdown of the greedy trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub id: usize,
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub rewards: RewardBreakdown,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{0}")]
    Model(String),
    #[error("bad log csv line {line}: {msg}")]
    BadLog { line: usize, msg: String },
}

/// Greedy (temperature-0) response for one query; deterministic.
pub fn greedy_response(
    model: &Model<f32>,
    bundle: &GtBundle,
    max_response_tokens: usize,
) -> Result<TokenSequence, EvalError> {
    let prompt = &bundle.query.ids;
    let max_len = (prompt.len() + max_response_tokens).min(model.cfg.max_len);
    let (ids, _) = model
        .sample_sequence(prompt, 0.0, max_len, Control::Eos.id(), 0)
        .map_err(|e| EvalError::Model(e.to_string()))?;
    let mut response = TokenSequence::new();
    for &id in &ids[prompt.len()..] {
        response.push(id);
    }
    Ok(response)
}

/// Evaluates every bundle with greedy decoding. Unparseable responses score
/// zero reward and are compared against a mid-gray image.
pub fn run_benchmark(
    params: &PolicyParams,
    bundles: &[GtBundle],
    codebook: &Codebook,
    layout: &TraceLayout,
    max_response_tokens: usize,
) -> Result<Vec<ReportRow>, EvalError> {
    if bundles.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let model = Model::<f32>::from_params(params);
    let toggles = RewardToggles::default();
    let mut rows = Vec::with_capacity(bundles.len());
    for (id, bundle) in bundles.iter().enumerate() {
        let response = greedy_response(&model, bundle, max_response_tokens)?;
        let rewards = total_rewards(
            std::slice::from_ref(&response),
            bundle,
            codebook,
            layout,
            Scorer::Composite,
            &toggles,
        )
        .map_err(|e| EvalError::Model(e.to_string()))?[0];

        let gt_fine = bundle.hq_pyramid.last().expect("nonempty pyramid");
        let fine = parse_trace(&response, layout)
            .ok()
            .and_then(|t| decode_pyramid(&t, codebook, layout))
            .and_then(|p| p.last().cloned())
            .unwrap_or_else(|| {
                RgbImage::filled(gt_fine.width, gt_fine.height, [128, 128, 128])
            });
        let psnr = psnr_y(&fine, gt_fine).map_err(|e| EvalError::Model(e.to_string()))?;
        let ssim = ssim_y(&fine, gt_fine).map_err(|e| EvalError::Model(e.to_string()))?;
        rows.push(ReportRow {
            id,
            psnr_y: psnr,
            ssim_y: ssim,
            rewards,
        });
    }
    Ok(rows)
}

/// Mean total reward over a report.
pub fn mean_total_reward(rows: &[ReportRow]) -> f64 {
    rows.iter().map(|r| r.rewards.total).sum::<f64>() / rows.len().max(1) as f64
}

pub fn render_report(rows: &[ReportRow]) -> String {
    let mut out = String::from("id,psnr_y,ssim_y,r_form,r_deg,r_und,r_gen,r_total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.id,
            r.psnr_y,
            r.ssim_y,
            r.rewards.form,
            r.rewards.deg,
            r.rewards.und,
            r.rewards.gen,
            r.rewards.total
        ));
    }
    out
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<(), EvalError> {
    fs::write(path, render_report(rows)).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn render_grpo_log(rows: &[GrpoLogRow]) -> String {
    let mut out =
        String::from("iteration,mean_total,mean_form,mean_deg,mean_und,mean_gen,objective,kl_mean\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.iteration,
            r.mean_total,
            r.mean_form,
            r.mean_deg,
            r.mean_und,
            r.mean_gen,
            r.objective,
            r.kl_mean
        ));
    }
    out
}

pub fn write_grpo_log(path: &Path, rows: &[GrpoLogRow]) -> Result<(), EvalError> {
    fs::write(path, render_grpo_log(rows)).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Parses a training-log CSV back into rows.
pub fn parse_grpo_log(text: &str) -> Result<Vec<GrpoLogRow>, EvalError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        let err = |msg: &str| EvalError::BadLog {
            line: idx + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(err("expected 8 columns"));
        }
        let num = |i: usize| fields[i].parse::<f64>().map_err(|_| err("bad number"));
        rows.push(GrpoLogRow {
            iteration: fields[0].parse().map_err(|_| err("bad iteration"))?,
            mean_total: num(1)?,
            mean_form: num(2)?,
            mean_deg: num(3)?,
            mean_und: num(4)?,
            mean_gen: num(5)?,
            objective: num(6)?,
            kl_mean: num(7)?,
        });
    }
    Ok(rows)
}

pub fn read_grpo_log(path: &Path) -> Result<Vec<GrpoLogRow>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_grpo_log(&text)
}
