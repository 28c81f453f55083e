//! Template-matching oracle: recovers the attribute tuple of an image.
//!
//! Every prompt has a noise-free canonical rendering. A candidate template is
//! scored by two error terms, both normalized by the template's object pixel
//! count so a small object cannot hide behind a large background:
//!
//! * object error — mean absolute difference to the object color over the
//!   object region;
//! * background error — summed absolute difference to the background color
//!   over the rest of the image, divided by the object pixel count.
//!
//! score = 1 − (object error + background error). On uncorrupted renders the
//! true template wins with a wide margin; an image that matches nothing well
//! scores below [`CONFIDENCE_FLOOR`] and is flagged unparseable.

use crate::image::ImageGrid;

use super::{render_template, PromptSpec, IMAGE_SIZE};

/// Scores below this are considered unparseable.
pub const CONFIDENCE_FLOOR: f32 = 0.8;

/// Outcome of parsing an image: the best-matching tuple and its score.
#[derive(Clone, Copy, Debug)]
pub struct Parse {
    pub spec: PromptSpec,
    pub score: f32,
}

impl Parse {
    pub fn is_parseable(&self) -> bool {
        self.score >= CONFIDENCE_FLOOR
    }
}

struct Template {
    spec: PromptSpec,
    fg: [f32; 3],
    bg: [f32; 3],
    /// Pixel indices (y*W+x) covered by the object.
    object: Vec<u32>,
    /// Complement of `object`.
    rest: Vec<u32>,
}

pub struct AttributeOracle {
    templates: Vec<Template>,
}

impl Default for AttributeOracle {
    fn default() -> Self {
        Self::new()
    }
}

impl AttributeOracle {
    pub fn new() -> Self {
        let templates = PromptSpec::enumerate_all()
            .into_iter()
            .map(|spec| {
                let canon = render_template(&spec);
                let bg = spec.background.rgb();
                let mut object = Vec::new();
                let mut rest = Vec::new();
                for y in 0..IMAGE_SIZE {
                    for x in 0..IMAGE_SIZE {
                        let idx = (y * IMAGE_SIZE + x) as u32;
                        let is_bg = (0..3).all(|c| canon.get(c, y, x) == bg[c]);
                        if is_bg {
                            rest.push(idx);
                        } else {
                            object.push(idx);
                        }
                    }
                }
                Template { spec, fg: spec.color.rgb(), bg, object, rest }
            })
            .collect();
        AttributeOracle { templates }
    }

    /// Best-matching attribute tuple for an image. Always returns a tuple;
    /// check [`Parse::is_parseable`] for confidence.
    pub fn parse(&self, img: &ImageGrid) -> Parse {
        assert_eq!(img.height, IMAGE_SIZE, "oracle expects {IMAGE_SIZE}x{IMAGE_SIZE} images");
        assert_eq!(img.width, IMAGE_SIZE);
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        let data = img.data();
        let mut best: Option<Parse> = None;
        for t in &self.templates {
            let mut obj_err = 0.0f32;
            for &idx in &t.object {
                for c in 0..3 {
                    obj_err += (data[c * plane + idx as usize] - t.fg[c]).abs();
                }
            }
            let mut bg_err = 0.0f32;
            for &idx in &t.rest {
                for c in 0..3 {
                    bg_err += (data[c * plane + idx as usize] - t.bg[c]).abs();
                }
            }
            let norm = (3 * t.object.len()) as f32;
            let score = 1.0 - (obj_err + bg_err) / norm;
            // Strict > keeps the first (enumeration-order) winner on ties.
            if best.map_or(true, |b| score > b.score) {
                best = Some(Parse { spec: t.spec, score });
            }
        }
        best.expect("template set is never empty")
    }
}

/// Fraction of prompt attributes exactly recovered from each image, averaged
/// over the set. Always in [0,1].
pub fn alignment_accuracy(
    oracle: &AttributeOracle,
    images: &[ImageGrid],
    prompts: &[PromptSpec],
) -> f64 {
    assert_eq!(images.len(), prompts.len(), "image/prompt count mismatch");
    if images.is_empty() {
        return 0.0;
    }
    let mut matched = 0usize;
    for (img, want) in images.iter().zip(prompts) {
        let got = oracle.parse(img).spec;
        let a = got.attribute_ids();
        let b = want.attribute_ids();
        matched += a.iter().zip(&b).filter(|(x, y)| x == y).count();
    }
    matched as f64 / (5 * images.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render, Background, Color, ObjectSize, Position, Shape};

    #[test]
    fn recovers_rendered_prompts_across_seeds() {
        let oracle = AttributeOracle::new();
        // Spot-check a diverse subset here; the exhaustive 400x5 sweep runs
        // in the integration suite.
        let specs = [
            PromptSpec {
                shape: Shape::Circle,
                color: Color::White,
                position: Position::Center,
                size: ObjectSize::Small,
                background: Background::Gray,
            },
            PromptSpec {
                shape: Shape::Cross,
                color: Color::Yellow,
                position: Position::TopRight,
                size: ObjectSize::Small,
                background: Background::Black,
            },
            PromptSpec {
                shape: Shape::Triangle,
                color: Color::Green,
                position: Position::BottomRight,
                size: ObjectSize::Large,
                background: Background::Gray,
            },
        ];
        for spec in specs {
            for seed in [1u64, 99, 12345] {
                let parse = oracle.parse(&render(&spec, seed));
                assert_eq!(parse.spec, spec, "seed {seed}");
                assert!(parse.is_parseable(), "score {}", parse.score);
            }
        }
    }

    #[test]
    fn all_black_image_is_flagged_unparseable() {
        let oracle = AttributeOracle::new();
        let img = ImageGrid::new(IMAGE_SIZE, IMAGE_SIZE);
        let parse = oracle.parse(&img);
        assert_eq!(parse.spec.background, Background::Black);
        assert!(!parse.is_parseable(), "score {} should be below the floor", parse.score);
    }

    #[test]
    fn position_survives_noise_in_another_quadrant() {
        use rand::Rng;
        let spec = PromptSpec {
            shape: Shape::Square,
            color: Color::Blue,
            position: Position::TopLeft,
            size: ObjectSize::Large,
            background: Background::Black,
        };
        let mut img = render(&spec, 4);
        let mut rng = crate::nn::rng::seeded(17);
        // Trash the bottom-right quadrant.
        for y in 16..32 {
            for x in 16..32 {
                for c in 0..3 {
                    img.set(c, y, x, rng.gen_range(0.0..1.0));
                }
            }
        }
        let oracle = AttributeOracle::new();
        let parse = oracle.parse(&img);
        assert_eq!(parse.spec.position, Position::TopLeft);
    }

    #[test]
    fn alignment_accuracy_is_exact_on_real_renders() {
        let oracle = AttributeOracle::new();
        let specs: Vec<PromptSpec> = PromptSpec::enumerate_all().into_iter().step_by(37).collect();
        let images: Vec<ImageGrid> =
            specs.iter().enumerate().map(|(i, s)| render(s, 1000 + i as u64)).collect();
        let acc = alignment_accuracy(&oracle, &images, &specs);
        assert_eq!(acc, 1.0);
    }
}
