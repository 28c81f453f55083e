//! Procedural prompt→image dataset over a closed attribute grammar.
//!
//! A prompt is a 5-tuple (shape, color, position, size, background) drawn
//! from fixed vocabularies — 4·5·5·2·2 = 400 distinct prompts. Rendering is
//! deterministic given (prompt, seed) up to a small seeded noise floor, so
//! alignment between a generated image and its prompt is exactly measurable
//! by the template-matching oracle in [`oracle`].

mod oracle;

pub use oracle::{alignment_accuracy, AttributeOracle, Parse, CONFIDENCE_FLOOR};

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::nn::rng::substream;
use crate::TokenId;

pub const IMAGE_SIZE: usize = 32;
/// Total text vocabulary across the five attribute slots.
pub const TEXT_VOCAB: usize = 18;
/// Prompt length in tokens, one per attribute slot.
pub const TEXT_LEN: usize = 5;
/// Uniform per-pixel render noise lies in [-NOISE_AMPLITUDE, +NOISE_AMPLITUDE).
pub const NOISE_AMPLITUDE: f32 = 0.01;

// ── attribute vocabularies ──────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Position {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum ObjectSize {
    Small,
    Large,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum Background {
    Black,
    Gray,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];
}
impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::White];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }
}
impl Position {
    pub const ALL: [Position; 5] = [
        Position::TopLeft,
        Position::TopRight,
        Position::BottomLeft,
        Position::BottomRight,
        Position::Center,
    ];

    /// Object centre in pixel coordinates (row, col).
    pub fn center(self) -> (f32, f32) {
        match self {
            Position::TopLeft => (8.0, 8.0),
            Position::TopRight => (8.0, 24.0),
            Position::BottomLeft => (24.0, 8.0),
            Position::BottomRight => (24.0, 24.0),
            Position::Center => (16.0, 16.0),
        }
    }
}
impl ObjectSize {
    pub const ALL: [ObjectSize; 2] = [ObjectSize::Small, ObjectSize::Large];

    pub fn radius(self) -> f32 {
        match self {
            ObjectSize::Small => 4.0,
            ObjectSize::Large => 7.0,
        }
    }
}
impl Background {
    pub const ALL: [Background; 2] = [Background::Black, Background::Gray];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Background::Black => [0.0, 0.0, 0.0],
            Background::Gray => [0.5, 0.5, 0.5],
        }
    }
}

/// One prompt: a point in the 400-tuple attribute product space.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct PromptSpec {
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
    pub size: ObjectSize,
    pub background: Background,
}

/// Fixed-length token encoding of a prompt: one id per slot over a global
/// 18-symbol vocabulary (shape 0..4, color 4..9, position 9..14, size 14..16,
/// background 16..18).
pub type TextTokens = [u32; TEXT_LEN];

/// Slot boundaries in the global text vocabulary.
pub const SLOT_OFFSETS: [u32; 6] = [0, 4, 9, 14, 16, 18];

impl PromptSpec {
    pub fn attribute_ids(&self) -> [usize; 5] {
        [
            Shape::ALL.iter().position(|s| s == &self.shape).unwrap(),
            Color::ALL.iter().position(|c| c == &self.color).unwrap(),
            Position::ALL.iter().position(|p| p == &self.position).unwrap(),
            ObjectSize::ALL.iter().position(|s| s == &self.size).unwrap(),
            Background::ALL.iter().position(|b| b == &self.background).unwrap(),
        ]
    }

    pub fn from_attribute_ids(ids: [usize; 5]) -> Result<Self> {
        let get = |i: usize, max: usize| -> Result<usize> {
            if ids[i] < max {
                Ok(ids[i])
            } else {
                Err(Error::InvalidArgument(format!("attribute id {} out of range for slot {i}", ids[i])))
            }
        };
        Ok(PromptSpec {
            shape: Shape::ALL[get(0, 4)?],
            color: Color::ALL[get(1, 5)?],
            position: Position::ALL[get(2, 5)?],
            size: ObjectSize::ALL[get(3, 2)?],
            background: Background::ALL[get(4, 2)?],
        })
    }

    pub fn text_tokens(&self) -> TextTokens {
        let ids = self.attribute_ids();
        let mut out = [0u32; TEXT_LEN];
        for slot in 0..TEXT_LEN {
            out[slot] = SLOT_OFFSETS[slot] + ids[slot] as u32;
        }
        out
    }

    pub fn from_text_tokens(tokens: &TextTokens) -> Result<Self> {
        let mut ids = [0usize; 5];
        for slot in 0..TEXT_LEN {
            let (lo, hi) = (SLOT_OFFSETS[slot], SLOT_OFFSETS[slot + 1]);
            if tokens[slot] < lo || tokens[slot] >= hi {
                return Err(Error::InvalidArgument(format!(
                    "text token {} invalid for slot {slot} (expected {lo}..{hi})",
                    tokens[slot]
                )));
            }
            ids[slot] = (tokens[slot] - lo) as usize;
        }
        PromptSpec::from_attribute_ids(ids)
    }

    /// All 400 prompts in a fixed enumeration order (shape-major).
    pub fn enumerate_all() -> Vec<PromptSpec> {
        let mut out = Vec::with_capacity(400);
        for &shape in &Shape::ALL {
            for &color in &Color::ALL {
                for &position in &Position::ALL {
                    for &size in &ObjectSize::ALL {
                        for &background in &Background::ALL {
                            out.push(PromptSpec { shape, color, position, size, background });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn sample(rng: &mut impl Rng) -> PromptSpec {
        PromptSpec {
            shape: Shape::ALL[rng.gen_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.gen_range(0..Color::ALL.len())],
            position: Position::ALL[rng.gen_range(0..Position::ALL.len())],
            size: ObjectSize::ALL[rng.gen_range(0..ObjectSize::ALL.len())],
            background: Background::ALL[rng.gen_range(0..Background::ALL.len())],
        }
    }
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?}/{:?}/{:?}/{:?}/{:?}",
            self.shape, self.color, self.position, self.size, self.background
        )
    }
}

// ── rendering ───────────────────────────────────────────────────────

fn inside(shape: Shape, dy: f32, dx: f32, r: f32) -> bool {
    match shape {
        Shape::Circle => dy * dy + dx * dx <= r * r,
        Shape::Square => dy.abs() <= r && dx.abs() <= r,
        Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) * 0.5,
        Shape::Cross => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
    }
}

/// Noise-free canonical image for a prompt; the oracle matches against these.
pub fn render_template(p: &PromptSpec) -> ImageGrid {
    let mut img = ImageGrid::new(IMAGE_SIZE, IMAGE_SIZE);
    let bg = p.background.rgb();
    let fg = p.color.rgb();
    let (cy, cx) = p.position.center();
    let r = p.size.radius();
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let dy = y as f32 + 0.5 - cy;
            let dx = x as f32 + 0.5 - cx;
            let px = if inside(p.shape, dy, dx, r) { fg } else { bg };
            for c in 0..3 {
                img.set(c, y, x, px[c]);
            }
        }
    }
    img
}

/// Renders a prompt with seeded per-pixel noise, clamped to [0,1]. Two
/// renders with the same (prompt, seed) are bit-identical; two seeds differ
/// by at most 2·[`NOISE_AMPLITUDE`] per value.
pub fn render(p: &PromptSpec, seed: u64) -> ImageGrid {
    let mut img = render_template(p);
    let mut rng = substream(seed, 0x72656e64);
    for v in img.data_mut() {
        let noise: f32 = rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE);
        *v = (*v + noise).clamp(0.0, 1.0);
    }
    img
}

// ── dataset ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

pub struct Sample {
    pub prompt: PromptSpec,
    pub text: TextTokens,
    pub image: ImageGrid,
    pub render_seed: u64,
    pub split: Split,
    /// Filled by the tokenize step.
    pub tokens: Option<Vec<TokenId>>,
    pub errors: Option<Vec<f32>>,
}

pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn split_iter(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

/// Builds an n-sample dataset with uniform prompts, an 80/10/10 split, and
/// rendering seeds disjoint across splits. Deterministic in (n, seed).
pub fn build_dataset(n: usize, seed: u64) -> Result<Dataset> {
    if n < 100 {
        return Err(Error::InvalidArgument(format!("dataset needs n >= 100, got {n}")));
    }
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut prompt_rng = substream(seed, 0x70726f6d);
    let mut samples = Vec::with_capacity(n);
    for g in 0..n {
        let split = if g < n_train {
            Split::Train
        } else if g < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let prompt = PromptSpec::sample(&mut prompt_rng);
        // Distinct per-sample offsets keep render seeds disjoint across splits.
        let render_seed = seed.wrapping_mul(0x100000001b3).wrapping_add(g as u64);
        let image = render(&prompt, render_seed);
        samples.push(Sample {
            prompt,
            text: prompt.text_tokens(),
            image,
            render_seed,
            split,
            tokens: None,
            errors: None,
        });
    }
    Ok(Dataset { samples })
}

/// Writes `manifest.txt` (split tag, 5 attribute ids, render seed, image
/// path) plus one P6 pixmap per sample under `images/`.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut manifest = std::io::BufWriter::new(fs::File::create(dir.join("manifest.txt"))?);
    for (i, s) in dataset.samples.iter().enumerate() {
        let rel = format!("images/{i:05}.ppm");
        s.image.write_ppm(&dir.join(&rel))?;
        let ids = s.prompt.attribute_ids();
        writeln!(
            manifest,
            "{} {} {} {} {} {} {} {}",
            s.split.tag(),
            ids[0],
            ids[1],
            ids[2],
            ids[3],
            ids[4],
            s.render_seed,
            rel
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_space_has_400_tuples() {
        assert_eq!(PromptSpec::enumerate_all().len(), 400);
    }

    #[test]
    fn text_tokens_roundtrip() {
        for p in PromptSpec::enumerate_all() {
            let t = p.text_tokens();
            assert!(t.iter().all(|&id| id < TEXT_VOCAB as u32));
            assert_eq!(PromptSpec::from_text_tokens(&t).unwrap(), p);
        }
    }

    #[test]
    fn render_is_deterministic() {
        let p = PromptSpec {
            shape: Shape::Triangle,
            color: Color::Yellow,
            position: Position::BottomLeft,
            size: ObjectSize::Small,
            background: Background::Gray,
        };
        assert_eq!(render(&p, 42), render(&p, 42));
    }

    #[test]
    fn seeds_differ_by_at_most_noise_band() {
        let p = PromptSpec {
            shape: Shape::Circle,
            color: Color::Blue,
            position: Position::Center,
            size: ObjectSize::Large,
            background: Background::Black,
        };
        let a = render(&p, 1);
        let b = render(&p, 2);
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 2.0 * NOISE_AMPLITUDE + 1e-6, "max diff {max_diff}");
        assert!(max_diff > 0.0, "different seeds must actually differ");
    }

    #[test]
    fn large_red_center_circle_pixel_stats() {
        let p = PromptSpec {
            shape: Shape::Circle,
            color: Color::Red,
            position: Position::Center,
            size: ObjectSize::Large,
            background: Background::Black,
        };
        let img = render(&p, 7);
        // Central 12x12 window.
        let red = img.channel_mean(0, 10, 22, 10, 22);
        let blue = img.channel_mean(2, 10, 22, 10, 22);
        assert!(red > 0.8, "red mean {red}");
        assert!(blue < 0.1, "blue mean {blue}");
    }

    #[test]
    fn dataset_split_sizes() {
        let d = build_dataset(4000, 3).unwrap();
        assert_eq!(d.indices(Split::Train).len(), 3200);
        assert_eq!(d.indices(Split::Val).len(), 400);
        assert_eq!(d.indices(Split::Test).len(), 400);
    }

    #[test]
    fn dataset_too_small_rejected() {
        assert!(build_dataset(50, 0).is_err());
    }

    #[test]
    fn render_seeds_disjoint_across_splits() {
        let d = build_dataset(300, 9).unwrap();
        let mut seen = std::collections::HashSet::new();
        for s in &d.samples {
            assert!(seen.insert(s.render_seed), "duplicate render seed across samples");
        }
    }

    #[test]
    fn shape_marginals_within_3_sigma() {
        let n = 4000usize;
        let d = build_dataset(n, 11).unwrap();
        let p = 0.25f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &shape in &Shape::ALL {
            let count = d.samples.iter().filter(|s| s.prompt.shape == shape).count() as f64;
            assert!(
                (count - n as f64 * p).abs() <= 3.0 * sigma,
                "{shape:?} count {count} outside 3 sigma of {}",
                n as f64 * p
            );
        }
    }

    #[test]
    fn manifest_files_are_reproducible() {
        let d1 = build_dataset(120, 5).unwrap();
        let d2 = build_dataset(120, 5).unwrap();
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        write_manifest(&d1, t1.path()).unwrap();
        write_manifest(&d2, t2.path()).unwrap();
        let m1 = std::fs::read(t1.path().join("manifest.txt")).unwrap();
        let m2 = std::fs::read(t2.path().join("manifest.txt")).unwrap();
        assert_eq!(m1, m2);
        let i1 = std::fs::read(t1.path().join("images/00007.ppm")).unwrap();
        let i2 = std::fs::read(t2.path().join("images/00007.ppm")).unwrap();
        assert_eq!(i1, i2);
    }
}
