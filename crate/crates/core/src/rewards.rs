//! The four reward functions and their aggregate R = form + deg + und + gen.
//!
//! Format checks the trace grammar; degradation and understanding compare
//! text against the ground truth; generation scores the restored images.
//! A parse failure gates the other three rewards to zero.

use crate::codec::{decode_image, Codebook, TokenSequence};
use crate::degrade::DegradationSummary;
use crate::image::{resample_bilinear, RgbImage};
use crate::metrics::psnr_y;
use crate::scenegen::SceneObject;
use crate::trace::{parse_trace, GtBundle, StepMode, Trace, TraceLayout};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
#[allow(unused_imports)]
use num_traits::Float;

/// Position-wise degradation label agreement (correct of total components).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegradationMatch {
    pub correct: usize,
    pub total: usize,
}

/// Object coverage of the coarse understanding text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoverageResult {
    pub covered: usize,
    pub total: usize,
}

/// Per-member reward components; total is exactly their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub form: f64,
    pub deg: f64,
    pub und: f64,
    pub gen: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn zero() -> Self {
        Self {
            form: 0.0,
            deg: 0.0,
            und: 0.0,
            gen: 0.0,
            total: 0.0,
        }
    }
}

/// Which content rewards are active; format is always computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewardToggles {
    pub deg: bool,
    pub und: bool,
    pub gen: bool,
}

impl Default for RewardToggles {
    fn default() -> Self {
        Self {
            deg: true,
            und: true,
            gen: true,
        }
    }
}

/// Built-in generation scorers plus the external expert hook.
pub enum Scorer<'a> {
    /// 0.5 * fidelity + 0.25 * sharpness + 0.25 * consistency.
    Composite,
    /// Fidelity only.
    FidelityOnly,
    /// No-reference: 0.5 * sharpness + 0.5 * consistency.
    NorefOnly,
    /// External group scorer; any failure falls back to Composite.
    Expert(&'a mut dyn GroupScorer),
}

/// External judge scoring a whole group of fine outputs at once.
///
/// Returns one score in [0,1] per member, or None on any failure (the
/// caller falls back to the composite scorer).
pub trait GroupScorer {
    fn score_group(&mut self, fine_outputs: &[RgbImage], reference: &RgbImage) -> Option<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardError {
    ResolutionMismatch { step: usize, got: (usize, usize), want: (usize, usize) },
    EmptyGroup,
    Metric(String),
}

impl fmt::Display for RewardError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardError::ResolutionMismatch { step, got, want } => write!(
                f,
                "step {step} image is {}x{}, expected {}x{}",
                got.0, got.1, want.0, want.1
            ),
            RewardError::EmptyGroup => write!(f, "empty member group"),
            RewardError::Metric(msg) => write!(f, "{msg}"),
        }
    }
}

/// 1 iff the response parses as a well-formed trace.
pub fn reward_format(tokens: &TokenSequence, layout: &TraceLayout) -> f64 {
    if parse_trace(tokens, layout).is_ok() {
        1.0
    } else {
        0.0
    }
}

/// Fraction of degradation components whose predicted level label matches.
///
/// The prediction must follow the canonical `[name: label, ...]` template
/// (whitespace-tolerant, case-insensitive); anything else scores 0.
pub fn reward_degradation(pred_text: &str, gt: &DegradationSummary) -> (f64, DegradationMatch) {
    let total = gt.levels.len();
    let miss = DegradationMatch { correct: 0, total };
    let trimmed = pred_text.trim();
    let inner = match trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
        Some(s) => s,
        None => return (0.0, miss),
    };
    let parts: Vec<&str> = inner.split(',').collect();
    if parts.len() != total {
        return (0.0, miss);
    }
    let mut correct = 0usize;
    for (part, (component, gt_label)) in parts.iter().zip(&gt.levels) {
        let mut kv = part.splitn(2, ':');
        let (name, label) = match (kv.next(), kv.next()) {
            (Some(n), Some(l)) => (n.trim(), l.trim()),
            _ => return (0.0, miss),
        };
        if name.eq_ignore_ascii_case(component.name()) && label.eq_ignore_ascii_case(gt_label) {
            correct += 1;
        }
    }
    (
        correct as f64 / total as f64,
        DegradationMatch { correct, total },
    )
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .collect()
}

/// Fraction of scene objects named in the coarse text.
///
/// An object is covered iff its name or any synonym appears as a
/// case-insensitive whole word; no stemming. An empty object list is
/// vacuously covered.
pub fn reward_understanding(coarse_text: &str, objects: &[SceneObject]) -> (f64, CoverageResult) {
    let total = objects.len();
    if total == 0 {
        return (1.0, CoverageResult { covered: 0, total });
    }
    let text_words = words(coarse_text);
    let covered = objects
        .iter()
        .filter(|o| {
            core::iter::once(&o.name)
                .chain(o.synonyms.iter())
                .any(|term| {
                    let t = term.to_ascii_lowercase();
                    text_words.iter().any(|w| *w == t)
                })
        })
        .count();
    (
        covered as f64 / total as f64,
        CoverageResult { covered, total },
    )
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn psnr_to_unit(psnr: f64) -> f64 {
    clamp01((psnr - 5.0) / 30.0)
}

/// Mean squared gradient magnitude of the Y channel (forward differences).
fn edge_energy(img: &RgbImage) -> f64 {
    let y = img.to_y();
    let (w, h) = (img.width, img.height);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w {
                let d = y[r * w + c + 1] - y[r * w + c];
                sum += d * d;
                count += 1;
            }
            if r + 1 < h {
                let d = y[(r + 1) * w + c] - y[r * w + c];
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn metric_err(e: impl fmt::Display) -> RewardError {
    RewardError::Metric(alloc::format!("{e}"))
}

struct ComponentScores {
    fidelity: f64,
    sharpness: f64,
    consistency: f64,
}

fn member_components(pyramid: &[RgbImage], gt_fine: &RgbImage) -> Result<ComponentScores, RewardError> {
    let fine = pyramid.last().ok_or(RewardError::EmptyGroup)?;
    if fine.width != gt_fine.width || fine.height != gt_fine.height {
        return Err(RewardError::ResolutionMismatch {
            step: pyramid.len(),
            got: (fine.width, fine.height),
            want: (gt_fine.width, gt_fine.height),
        });
    }
    let fidelity = psnr_to_unit(psnr_y(fine, gt_fine).map_err(metric_err)?);

    let e = edge_energy(fine);
    let e_gt = edge_energy(gt_fine);
    let sharpness = if e == 0.0 && e_gt == 0.0 {
        1.0
    } else if e == 0.0 || e_gt == 0.0 {
        0.0
    } else {
        (e / e_gt).min(e_gt / e)
    };

    let earlier = &pyramid[..pyramid.len() - 1];
    let consistency = if earlier.is_empty() {
        1.0
    } else {
        let mut acc = 0.0;
        for step in earlier {
            let planes = step.to_planes();
            let up = RgbImage::from_planes(
                &[
                    resample_bilinear(&planes[0], step.width, step.height, fine.width, fine.height),
                    resample_bilinear(&planes[1], step.width, step.height, fine.width, fine.height),
                    resample_bilinear(&planes[2], step.width, step.height, fine.width, fine.height),
                ],
                fine.width,
                fine.height,
            );
            acc += psnr_to_unit(psnr_y(&up, fine).map_err(metric_err)?);
        }
        acc / earlier.len() as f64
    };
    Ok(ComponentScores {
        fidelity,
        sharpness,
        consistency,
    })
}

fn builtin_score(c: &ComponentScores, scorer: &Scorer) -> f64 {
    match scorer {
        Scorer::Composite | Scorer::Expert(_) => {
            0.5 * c.fidelity + 0.25 * c.sharpness + 0.25 * c.consistency
        }
        Scorer::FidelityOnly => c.fidelity,
        Scorer::NorefOnly => 0.5 * c.sharpness + 0.5 * c.consistency,
    }
}

/// Scores each member's decoded pyramid; every score lies in [0,1].
pub fn reward_generation(
    group: &[Vec<RgbImage>],
    gt: &GtBundle,
    scorer: &mut Scorer,
) -> Result<Vec<f64>, RewardError> {
    if group.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    let gt_fine = gt.hq_pyramid.last().ok_or(RewardError::EmptyGroup)?;

    if let Scorer::Expert(expert) = scorer {
        let fines: Vec<RgbImage> = group
            .iter()
            .map(|p| p.last().cloned().ok_or(RewardError::EmptyGroup))
            .collect::<Result<_, _>>()?;
        if let Some(scores) = expert.score_group(&fines, gt_fine) {
            if scores.len() == group.len() && scores.iter().all(|s| (0.0..=1.0).contains(s)) {
                return Ok(scores);
            }
        }
        // Fall through to the composite scorer.
    }

    group
        .iter()
        .map(|pyramid| Ok(builtin_score(&member_components(pyramid, gt_fine)?, scorer)))
        .collect()
}

/// Decodes each step of a parsed trace at its expected resolution.
pub fn decode_pyramid(
    trace: &Trace,
    codebook: &Codebook,
    layout: &TraceLayout,
) -> Option<Vec<RgbImage>> {
    let mode = StepMode::from_step_count(trace.steps.len())?;
    let mut out = Vec::with_capacity(trace.steps.len());
    for (&div, step) in mode.divisors().iter().zip(&trace.steps) {
        let side = layout.hq_size / div;
        out.push(decode_image(&step.image_tokens, codebook, side, side).ok()?);
    }
    Some(out)
}

/// Scores a whole response group; parse failure zeroes deg/und/gen.
pub fn total_rewards(
    group: &[TokenSequence],
    gt: &GtBundle,
    codebook: &Codebook,
    layout: &TraceLayout,
    mut scorer: Scorer,
    toggles: &RewardToggles,
) -> Result<Vec<RewardBreakdown>, RewardError> {
    if group.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    let parsed: Vec<Option<Trace>> = group
        .iter()
        .map(|tokens| parse_trace(tokens, layout).ok())
        .collect();

    // Generation is scored jointly over the parseable members.
    let mut gen_scores = alloc::collections::BTreeMap::new();
    if toggles.gen {
        let mut idx = Vec::new();
        let mut pyramids = Vec::new();
        for (i, t) in parsed.iter().enumerate() {
            if let Some(trace) = t {
                if let Some(p) = decode_pyramid(trace, codebook, layout) {
                    idx.push(i);
                    pyramids.push(p);
                }
            }
        }
        if !pyramids.is_empty() {
            let scores = reward_generation(&pyramids, gt, &mut scorer)?;
            for (i, s) in idx.into_iter().zip(scores) {
                gen_scores.insert(i, s);
            }
        }
    }

    Ok(parsed
        .iter()
        .enumerate()
        .map(|(i, maybe)| match maybe {
            None => RewardBreakdown::zero(),
            Some(trace) => {
                let deg = if toggles.deg {
                    reward_degradation(&trace.degradation_text, &gt.summary).0
                } else {
                    0.0
                };
                let und = if toggles.und {
                    reward_understanding(&trace.steps[0].text, &gt.scene.objects).0
                } else {
                    0.0
                };
                let gen = gen_scores.get(&i).copied().unwrap_or(0.0);
                RewardBreakdown {
                    form: 1.0,
                    deg,
                    und,
                    gen,
                    total: 1.0 + deg + und + gen,
                }
            }
        })
        .collect())
}
