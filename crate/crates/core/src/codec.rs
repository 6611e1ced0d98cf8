//! Discrete tokenization: a unified vocabulary of byte-level text ids,
//! control ids, and k-means patch codebook image ids.

use crate::image::{quantize_u8, RgbImage};
use crate::rng::SeededRng;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use num_traits::Float;

/// First control id; bytes occupy [0, 255].
pub const CONTROL_BASE: u32 = 256;
/// Number of control tokens.
pub const CONTROL_COUNT: u32 = 16;
/// First image code id.
pub const IMAGE_BASE: u32 = CONTROL_BASE + CONTROL_COUNT;

/// Control tokens, in id order starting at [`CONTROL_BASE`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Bos,
    Eos,
    DegOpen,
    DegClose,
    Und1Open,
    Und1Close,
    Img1Open,
    Img1Close,
    Und2Open,
    Und2Close,
    Img2Open,
    Img2Close,
    Und3Open,
    Und3Close,
    Img3Open,
    Img3Close,
}

impl Control {
    pub const fn id(self) -> u32 {
        CONTROL_BASE + self as u32
    }

    pub fn from_id(id: u32) -> Option<Control> {
        use Control::*;
        const ALL: [Control; 16] = [
            Bos, Eos, DegOpen, DegClose, Und1Open, Und1Close, Img1Open, Img1Close, Und2Open,
            Und2Close, Img2Open, Img2Close, Und3Open, Und3Close, Img3Open, Img3Close,
        ];
        if (CONTROL_BASE..CONTROL_BASE + CONTROL_COUNT).contains(&id) {
            Some(ALL[(id - CONTROL_BASE) as usize])
        } else {
            None
        }
    }

    /// Opening tag of understanding step k (1-based).
    pub fn und_open(step: usize) -> Control {
        [Control::Und1Open, Control::Und2Open, Control::Und3Open][step - 1]
    }

    pub fn und_close(step: usize) -> Control {
        [Control::Und1Close, Control::Und2Close, Control::Und3Close][step - 1]
    }

    pub fn img_open(step: usize) -> Control {
        [Control::Img1Open, Control::Img2Open, Control::Img3Open][step - 1]
    }

    pub fn img_close(step: usize) -> Control {
        [Control::Img1Close, Control::Img2Close, Control::Img3Close][step - 1]
    }

    pub fn name(self) -> &'static str {
        use Control::*;
        match self {
            Bos => "<bos>",
            Eos => "<eos>",
            DegOpen => "<deg>",
            DegClose => "</deg>",
            Und1Open => "<und1>",
            Und1Close => "</und1>",
            Img1Open => "<img1>",
            Img1Close => "</img1>",
            Und2Open => "<und2>",
            Und2Close => "</und2>",
            Img2Open => "<img2>",
            Img2Close => "</img2>",
            Und3Open => "<und3>",
            Und3Close => "</und3>",
            Img3Open => "<img3>",
            Img3Close => "</img3>",
        }
    }
}

/// Role of a token id within the unified vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Text,
    Image,
    Control,
}

/// Classifies an id by its vocabulary range.
pub fn role_of(id: u32) -> Role {
    if id < CONTROL_BASE {
        Role::Text
    } else if id < IMAGE_BASE {
        Role::Control
    } else {
        Role::Image
    }
}

/// A contiguous run of same-role tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub role: Role,
    pub start: usize,
    pub len: usize,
}

/// Flat id sequence with per-token roles and segment boundaries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
}

impl TokenSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn role(&self, index: usize) -> Role {
        role_of(self.ids[index])
    }

    /// Appends one id, extending the last segment when the role matches.
    pub fn push(&mut self, id: u32) {
        let role = role_of(id);
        match self.segments.last_mut() {
            Some(seg) if seg.role == role => seg.len += 1,
            _ => self.segments.push(Segment {
                role,
                start: self.ids.len(),
                len: 1,
            }),
        }
        self.ids.push(id);
    }

    pub fn push_control(&mut self, c: Control) {
        self.push(c.id());
    }

    pub fn extend_from(&mut self, other: &TokenSequence) {
        for &id in &other.ids {
            self.push(id);
        }
    }

    /// Segments partition the sequence and roles match id ranges.
    pub fn check_invariants(&self) -> bool {
        let mut pos = 0;
        for seg in &self.segments {
            if seg.start != pos || seg.len == 0 {
                return false;
            }
            for i in seg.start..seg.start + seg.len {
                if role_of(self.ids[i]) != seg.role {
                    return false;
                }
            }
            pos += seg.len;
        }
        pos == self.ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CodecError {
    /// Fewer training patches than requested centroids.
    NotEnoughPatches { patches: usize, k: usize },
    BadIterations,
    /// Image dimensions must be divisible by the patch size.
    DimensionMismatch { width: usize, height: usize, patch: usize },
    /// Token count does not match the target grid.
    WrongTokenCount { expected: usize, got: usize },
    /// An id outside the expected range for this operation.
    BadId { id: u32 },
    BadCodebook(&'static str),
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecError::NotEnoughPatches { patches, k } => {
                write!(f, "{patches} patches but k = {k}")
            }
            CodecError::BadIterations => write!(f, "iteration count must be >= 1"),
            CodecError::DimensionMismatch { width, height, patch } => {
                write!(f, "image {width}x{height} not divisible by patch size {patch}")
            }
            CodecError::WrongTokenCount { expected, got } => {
                write!(f, "expected {expected} image tokens, got {got}")
            }
            CodecError::BadId { id } => write!(f, "id {id} out of range"),
            CodecError::BadCodebook(msg) => write!(f, "bad codebook: {msg}"),
        }
    }
}

/// K-means patch codebook over `3 * patch_size^2`-dim vectors in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub patch_size: usize,
    pub k: usize,
    /// `k` rows of `3 * patch_size^2` values, row-major, in [0, 1].
    pub entries: Vec<f32>,
    pub fit_seed: u64,
    /// Mean squared quantization error after each Lloyd iteration.
    pub objective_curve: Vec<f64>,
}

impl Codebook {
    pub fn dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn vocab_size(&self) -> usize {
        IMAGE_BASE as usize + self.k
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.k < 2 {
            return Err(CodecError::BadCodebook("k must be >= 2"));
        }
        if self.entries.len() != self.k * self.dim() {
            return Err(CodecError::BadCodebook("entry count mismatch"));
        }
        if !self.entries.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(CodecError::BadCodebook("entries outside [0, 1]"));
        }
        Ok(())
    }
}

fn extract_patches(images: &[RgbImage], patch: usize) -> Result<Vec<Vec<f64>>, CodecError> {
    let mut patches = Vec::new();
    for img in images {
        if img.width % patch != 0 || img.height % patch != 0 {
            return Err(CodecError::DimensionMismatch {
                width: img.width,
                height: img.height,
                patch,
            });
        }
        for py in 0..img.height / patch {
            for px in 0..img.width / patch {
                let mut v = Vec::with_capacity(3 * patch * patch);
                for dy in 0..patch {
                    for dx in 0..patch {
                        let rgb = img.get(px * patch + dx, py * patch + dy);
                        for c in 0..3 {
                            v.push(rgb[c] as f64 / 255.0);
                        }
                    }
                }
                patches.push(v);
            }
        }
    }
    Ok(patches)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// Lloyd's k-means with seeded distinct-patch initialization and
/// farthest-patch reseeding of empty clusters.
pub fn fit_codebook(
    images: &[RgbImage],
    patch_size: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<Codebook, CodecError> {
    if iters < 1 {
        return Err(CodecError::BadIterations);
    }
    if k < 2 {
        return Err(CodecError::BadCodebook("k must be >= 2"));
    }
    let patches = extract_patches(images, patch_size)?;
    if patches.len() < k {
        return Err(CodecError::NotEnoughPatches {
            patches: patches.len(),
            k,
        });
    }
    let dim = 3 * patch_size * patch_size;

    // Shuffled index order; prefer value-distinct patches, fall back to
    // duplicates when the corpus has fewer distinct patches than k.
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut rng = SeededRng::new(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &idx in &order {
        if centroids.len() == k {
            break;
        }
        if !centroids.iter().any(|c| c == &patches[idx]) {
            centroids.push(patches[idx].clone());
        }
    }
    for &idx in &order {
        if centroids.len() == k {
            break;
        }
        centroids.push(patches[idx].clone());
    }

    let mut assign = vec![0usize; patches.len()];
    let mut objective_curve = Vec::with_capacity(iters);
    for _ in 0..iters {
        // Assignment, ties to the lowest id.
        for (pi, p) in patches.iter().enumerate() {
            let mut best = 0;
            let mut best_d = sq_dist(p, &centroids[0]);
            for (ci, c) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            assign[pi] = best;
        }
        // Update.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (pi, p) in patches.iter().enumerate() {
            counts[assign[pi]] += 1;
            let s = &mut sums[assign[pi]];
            for d in 0..dim {
                s[d] += p[d];
            }
        }
        for ci in 0..k {
            if counts[ci] > 0 {
                for d in 0..dim {
                    centroids[ci][d] = sums[ci][d] / counts[ci] as f64;
                }
            } else {
                // Reseed to the patch farthest from its own centroid.
                let far = (0..patches.len())
                    .max_by(|&a, &b| {
                        sq_dist(&patches[a], &centroids[assign[a]])
                            .partial_cmp(&sq_dist(&patches[b], &centroids[assign[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centroids[ci] = patches[far].clone();
                assign[far] = ci;
            }
        }
        // Objective after the update step, against current assignment's
        // nearest centroids.
        let mut obj = 0.0;
        for p in &patches {
            let mut best = f64::infinity();
            for c in &centroids {
                let d = sq_dist(p, c);
                if d < best {
                    best = d;
                }
            }
            obj += best;
        }
        objective_curve.push(obj / patches.len() as f64);
    }

    let mut entries = Vec::with_capacity(k * dim);
    for c in &centroids {
        for &v in c {
            entries.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(Codebook {
        patch_size,
        k,
        entries,
        fit_seed: seed,
        objective_curve,
    })
}

/// Encodes an image as a row-major grid of nearest-centroid ids.
pub fn encode_image(img: &RgbImage, cb: &Codebook) -> Result<TokenSequence, CodecError> {
    cb.validate()?;
    let patch = cb.patch_size;
    if img.width % patch != 0 || img.height % patch != 0 {
        return Err(CodecError::DimensionMismatch {
            width: img.width,
            height: img.height,
            patch,
        });
    }
    let dim = cb.dim();
    let mut seq = TokenSequence::new();
    let mut v = vec![0.0f64; dim];
    for py in 0..img.height / patch {
        for px in 0..img.width / patch {
            let mut i = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    let rgb = img.get(px * patch + dx, py * patch + dy);
                    for c in 0..3 {
                        v[i] = rgb[c] as f64 / 255.0;
                        i += 1;
                    }
                }
            }
            let mut best = 0usize;
            let mut best_d = f64::infinity();
            for ci in 0..cb.k {
                let row = &cb.entries[ci * dim..(ci + 1) * dim];
                let mut d = 0.0;
                for j in 0..dim {
                    let diff = v[j] - row[j] as f64;
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            seq.push(IMAGE_BASE + best as u32);
        }
    }
    Ok(seq)
}

/// Decodes image tokens back to pixels by pasting centroid patches.
pub fn decode_image(
    tokens: &[u32],
    cb: &Codebook,
    width: usize,
    height: usize,
) -> Result<RgbImage, CodecError> {
    cb.validate()?;
    let patch = cb.patch_size;
    if width % patch != 0 || height % patch != 0 {
        return Err(CodecError::DimensionMismatch { width, height, patch });
    }
    let (gw, gh) = (width / patch, height / patch);
    if tokens.len() != gw * gh {
        return Err(CodecError::WrongTokenCount {
            expected: gw * gh,
            got: tokens.len(),
        });
    }
    let dim = cb.dim();
    let mut img = RgbImage::new(width, height);
    for (ti, &id) in tokens.iter().enumerate() {
        if role_of(id) != Role::Image || (id - IMAGE_BASE) as usize >= cb.k {
            return Err(CodecError::BadId { id });
        }
        let row = &cb.entries[(id - IMAGE_BASE) as usize * dim..((id - IMAGE_BASE) as usize + 1) * dim];
        let (px, py) = (ti % gw, ti / gw);
        let mut i = 0;
        for dy in 0..patch {
            for dx in 0..patch {
                let rgb = [
                    quantize_u8(row[i] as f64 * 255.0),
                    quantize_u8(row[i + 1] as f64 * 255.0),
                    quantize_u8(row[i + 2] as f64 * 255.0),
                ];
                i += 3;
                img.set(px * patch + dx, py * patch + dy, rgb);
            }
        }
    }
    Ok(img)
}

/// Byte-level text encoding.
pub fn encode_text(s: &str) -> TokenSequence {
    let mut seq = TokenSequence::new();
    for &b in s.as_bytes() {
        seq.push(b as u32);
    }
    seq
}

/// Inverse of [`encode_text`]; rejects non-byte ids.
pub fn decode_text(ids: &[u32]) -> Result<String, CodecError> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id > 255 {
            return Err(CodecError::BadId { id });
        }
        bytes.push(id as u8);
    }
    String::from_utf8(bytes).map_err(|_| CodecError::BadCodebook("invalid utf-8"))
}
