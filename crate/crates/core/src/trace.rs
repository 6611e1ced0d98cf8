//! Structured restoration traces and their token-sequence grammar.
//!
//! A trace is the policy's whole response: a degradation description wrapped
//! in `<deg>` tags, followed by one (understanding text, image token grid)
//! pair per restoration step. Rendering and parsing are exact inverses on
//! valid traces; parsing is total over arbitrary token sequences and reports
//! the first grammar violation.

use crate::codec::{
    encode_image, encode_text, role_of, Codebook, CodecError, Control, Role, TokenSequence,
};
use crate::degrade::{apply, summarize, DegradationRecipe, DegradationSummary, DegradeError};
use crate::image::RgbImage;
use crate::scenegen::Scene;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Instruction text placed at the start of every query.
pub const PROMPT: &str = "Perceive the degradation, understand the image content, \
and restore the high-quality image step by step";

/// Number of restoration steps in a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    Two,
    Three,
}

impl StepMode {
    pub fn step_count(self) -> usize {
        match self {
            StepMode::Two => 2,
            StepMode::Three => 3,
        }
    }

    /// Downsampling divisor of each step's target image.
    pub fn divisors(self) -> &'static [usize] {
        match self {
            StepMode::Two => &[4, 1],
            StepMode::Three => &[4, 2, 1],
        }
    }

    pub fn from_step_count(n: usize) -> Option<StepMode> {
        match n {
            2 => Some(StepMode::Two),
            3 => Some(StepMode::Three),
            _ => None,
        }
    }
}

/// One restoration step: understanding text plus an image token grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceStep {
    pub text: String,
    pub image_tokens: Vec<u32>,
}

/// Degradation perception followed by 2 or 3 restoration steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub degradation_text: String,
    pub steps: Vec<TraceStep>,
}

/// Geometry that fixes the expected image token count per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceLayout {
    /// Side of the square full-resolution image in pixels.
    pub hq_size: usize,
    pub patch_size: usize,
}

impl Default for TraceLayout {
    fn default() -> Self {
        Self {
            hq_size: 64,
            patch_size: 4,
        }
    }
}

impl TraceLayout {
    /// Token count of the step with the given downsampling divisor.
    pub fn tokens_at(&self, divisor: usize) -> usize {
        let side = self.hq_size / divisor / self.patch_size;
        side * side
    }

    /// Expected token counts for each step of a 2- or 3-step trace.
    pub fn expected_counts(&self, n_steps: usize) -> Option<Vec<usize>> {
        let mode = StepMode::from_step_count(n_steps)?;
        Some(mode.divisors().iter().map(|&d| self.tokens_at(d)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceError {
    BadStepCount(usize),
    WrongImageTokenCount { step: usize, got: usize, want: usize },
    NotAnImageToken { step: usize, id: u32 },
    Degrade(DegradeError),
    Codec(CodecError),
    BadDimensions { width: usize, height: usize },
}

impl fmt::Display for TraceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceError::BadStepCount(n) => write!(f, "trace has {n} steps, expected 2 or 3"),
            TraceError::WrongImageTokenCount { step, got, want } => {
                write!(f, "step {step} has {got} image tokens, expected {want}")
            }
            TraceError::NotAnImageToken { step, id } => {
                write!(f, "step {step} contains non-image token id {id}")
            }
            TraceError::Degrade(e) => write!(f, "{e}"),
            TraceError::Codec(e) => write!(f, "{e}"),
            TraceError::BadDimensions { width, height } => {
                write!(f, "image {width}x{height} not divisible by 16")
            }
        }
    }
}

impl From<DegradeError> for TraceError {
    fn from(e: DegradeError) -> Self {
        TraceError::Degrade(e)
    }
}

impl From<CodecError> for TraceError {
    fn from(e: CodecError) -> Self {
        TraceError::Codec(e)
    }
}

/// First grammar violation found while parsing a response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatError {
    /// The named tag (or end-of-response marker) never appeared.
    MissingTag(&'static str),
    /// A tag appeared where a different one was required.
    WrongOrder { expected: &'static str, found: &'static str },
    /// A segment contains a token of the wrong role.
    BadSegmentContent { expected: &'static str },
    WrongImageTokenCount { step: usize, got: usize, want: usize },
    /// Tokens after the end marker.
    TrailingGarbage,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::MissingTag(t) => write!(f, "missing tag {t}"),
            FormatError::WrongOrder { expected, found } => {
                write!(f, "expected {expected}, found {found}")
            }
            FormatError::BadSegmentContent { expected } => {
                write!(f, "bad content inside {expected} segment")
            }
            FormatError::WrongImageTokenCount { step, got, want } => {
                write!(f, "step {step} has {got} image tokens, expected {want}")
            }
            FormatError::TrailingGarbage => write!(f, "tokens after end marker"),
        }
    }
}

/// Serializes a trace to `<deg> .. </deg> <und1> .. </und1> <img1> .. </img1>
/// ... <eos>`.
pub fn render_trace(trace: &Trace, layout: &TraceLayout) -> Result<TokenSequence, TraceError> {
    let counts = layout
        .expected_counts(trace.steps.len())
        .ok_or(TraceError::BadStepCount(trace.steps.len()))?;
    for (k, (step, want)) in trace.steps.iter().zip(&counts).enumerate() {
        if step.image_tokens.len() != *want {
            return Err(TraceError::WrongImageTokenCount {
                step: k + 1,
                got: step.image_tokens.len(),
                want: *want,
            });
        }
        if let Some(&id) = step
            .image_tokens
            .iter()
            .find(|&&id| role_of(id) != Role::Image)
        {
            return Err(TraceError::NotAnImageToken { step: k + 1, id });
        }
    }

    let mut seq = TokenSequence::new();
    seq.push_control(Control::DegOpen);
    seq.extend_from(&encode_text(&trace.degradation_text));
    seq.push_control(Control::DegClose);
    for (k, step) in trace.steps.iter().enumerate() {
        let k = k + 1;
        seq.push_control(Control::und_open(k));
        seq.extend_from(&encode_text(&step.text));
        seq.push_control(Control::und_close(k));
        seq.push_control(Control::img_open(k));
        for &id in &step.image_tokens {
            seq.push(id);
        }
        seq.push_control(Control::img_close(k));
    }
    seq.push_control(Control::Eos);
    Ok(seq)
}

struct Scanner<'a> {
    ids: &'a [u32],
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn expect_control(&mut self, want: Control) -> Result<(), FormatError> {
        match self.ids.get(self.pos) {
            None => Err(FormatError::MissingTag(want.name())),
            Some(&id) => match Control::from_id(id) {
                Some(c) if c == want => {
                    self.pos += 1;
                    Ok(())
                }
                Some(Control::Eos) => Err(FormatError::MissingTag(want.name())),
                Some(c) => Err(FormatError::WrongOrder {
                    expected: want.name(),
                    found: c.name(),
                }),
                None => Err(FormatError::BadSegmentContent {
                    expected: want.name(),
                }),
            },
        }
    }

    /// Reads tokens of `role` until the next control token.
    fn read_segment(&mut self, role: Role, closer: Control) -> Result<&'a [u32], FormatError> {
        let start = self.pos;
        while let Some(&id) = self.ids.get(self.pos) {
            match role_of(id) {
                Role::Control => return Ok(&self.ids[start..self.pos]),
                r if r == role => self.pos += 1,
                _ => {
                    return Err(FormatError::BadSegmentContent {
                        expected: closer.name(),
                    })
                }
            }
        }
        Err(FormatError::MissingTag(closer.name()))
    }
}

/// Total parser: succeeds iff the sequence is exactly one well-formed trace.
pub fn parse_trace(tokens: &TokenSequence, layout: &TraceLayout) -> Result<Trace, FormatError> {
    let mut s = Scanner {
        ids: &tokens.ids,
        pos: 0,
    };

    s.expect_control(Control::DegOpen)?;
    let deg_bytes = s.read_segment(Role::Text, Control::DegClose)?;
    s.expect_control(Control::DegClose)?;
    let degradation_text = bytes_to_text(deg_bytes, Control::DegClose)?;

    let mut steps = Vec::new();
    for k in 1..=3usize {
        s.expect_control(Control::und_open(k))?;
        let text_bytes = s.read_segment(Role::Text, Control::und_close(k))?;
        s.expect_control(Control::und_close(k))?;
        s.expect_control(Control::img_open(k))?;
        let image_tokens = s.read_segment(Role::Image, Control::img_close(k))?;
        s.expect_control(Control::img_close(k))?;
        steps.push(TraceStep {
            text: bytes_to_text(text_bytes, Control::und_close(k))?,
            image_tokens: image_tokens.to_vec(),
        });
        // After step 2 the trace may end; step 1 alone is never complete.
        if k >= 2 && s.ids.get(s.pos) == Some(&Control::Eos.id()) {
            break;
        }
    }

    let counts = layout
        .expected_counts(steps.len())
        .ok_or(FormatError::MissingTag(Control::Eos.name()))?;
    for (k, (step, want)) in steps.iter().zip(&counts).enumerate() {
        if step.image_tokens.len() != *want {
            return Err(FormatError::WrongImageTokenCount {
                step: k + 1,
                got: step.image_tokens.len(),
                want: *want,
            });
        }
    }

    s.expect_control(Control::Eos)?;
    if s.pos != s.ids.len() {
        return Err(FormatError::TrailingGarbage);
    }
    Ok(Trace {
        degradation_text,
        steps,
    })
}

fn bytes_to_text(ids: &[u32], closer: Control) -> Result<String, FormatError> {
    let bytes: Vec<u8> = ids.iter().map(|&id| id as u8).collect();
    String::from_utf8(bytes).map_err(|_| FormatError::BadSegmentContent {
        expected: closer.name(),
    })
}

/// Supervision target for one sample: the query, its ground-truth trace, and
/// everything needed to score responses against it.
#[derive(Debug, Clone)]
pub struct GtBundle {
    pub query: TokenSequence,
    pub trace: Trace,
    /// Ground-truth step targets, smallest first, last one full resolution.
    pub hq_pyramid: Vec<RgbImage>,
    pub lr: RgbImage,
    pub scene: Scene,
    pub summary: DegradationSummary,
}

/// Builds the query and ground-truth trace for one scene + degradation pair.
///
/// The query is `<bos>` + the instruction bytes + the degraded image's
/// tokens; the trace answers with the degradation summary and the
/// area-downsampled ground-truth pyramid.
pub fn build_gt_trace(
    scene: &Scene,
    recipe: &DegradationRecipe,
    codebook: &Codebook,
    mode: StepMode,
) -> Result<GtBundle, TraceError> {
    let hq = &scene.image;
    if hq.width % 16 != 0 || hq.height % 16 != 0 || hq.width == 0 {
        return Err(TraceError::BadDimensions {
            width: hq.width,
            height: hq.height,
        });
    }
    let summary = summarize(recipe)?;
    let lr = apply(hq, recipe)?;

    let mut query = TokenSequence::new();
    query.push_control(Control::Bos);
    query.extend_from(&encode_text(PROMPT));
    query.extend_from(&encode_image(&lr, codebook)?);

    let captions = match mode {
        StepMode::Two => vec![&scene.captions.coarse, &scene.captions.fine],
        StepMode::Three => vec![
            &scene.captions.coarse,
            &scene.captions.middle,
            &scene.captions.fine,
        ],
    };
    let mut hq_pyramid = Vec::new();
    let mut steps = Vec::new();
    for (&div, caption) in mode.divisors().iter().zip(captions) {
        let level = if div == 1 {
            hq.clone()
        } else {
            hq.resize_area(hq.width / div, hq.height / div)
        };
        let tokens = encode_image(&level, codebook)?;
        steps.push(TraceStep {
            text: caption.clone(),
            image_tokens: tokens.ids,
        });
        hq_pyramid.push(level);
    }

    Ok(GtBundle {
        query,
        trace: Trace {
            degradation_text: summary.text.clone(),
            steps,
        },
        hq_pyramid,
        lr,
        scene: scene.clone(),
        summary,
    })
}
