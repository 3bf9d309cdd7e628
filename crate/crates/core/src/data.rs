//! Procedural image/question/answer tasks over the closed vocabulary.
//!
//! Four families stand in for a spread of downstream datasets: object
//! naming, counting, orientation and short captioning. Images are rendered
//! deterministically from the task seed, and every sample keeps the drawing
//! parameters around so tests can audit label correctness.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::vocab::{contains_subsequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    ShapeNaming,
    ColorCounting,
    StripeDirection,
    TemplateCaptioning,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 4] = [
        TaskFamily::ShapeNaming,
        TaskFamily::ColorCounting,
        TaskFamily::StripeDirection,
        TaskFamily::TemplateCaptioning,
    ];

    pub fn question_text(&self) -> &'static str {
        match self {
            TaskFamily::ShapeNaming => "what shape is shown",
            TaskFamily::ColorCounting => "how many shapes are there",
            TaskFamily::StripeDirection => "which way do the stripes run",
            TaskFamily::TemplateCaptioning => "describe the image",
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskFamily::ShapeNaming => "shape-naming",
            TaskFamily::ColorCounting => "color-counting",
            TaskFamily::StripeDirection => "stripe-direction",
            TaskFamily::TemplateCaptioning => "template-captioning",
        }
    }

    pub fn parse(s: &str) -> Result<TaskFamily> {
        TaskFamily::ALL
            .iter()
            .copied()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown task family \"{s}\"")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub seed: u64,
    pub count: usize,
}

/// A trigger question/answer pair in raw text form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

impl QaPair {
    pub fn new(question: &str, answer: &str) -> Self {
        QaPair {
            question: question.to_string(),
            answer: answer.to_string(),
        }
    }

    pub fn question_tokens(&self, vocab: &Vocabulary) -> Result<Vec<u32>> {
        vocab.encode_text(&self.question)
    }

    pub fn answer_tokens(&self, vocab: &Vocabulary) -> Result<Vec<u32>> {
        vocab.encode_text(&self.answer)
    }
}

/// The default rare trigger pairs used throughout the experiments.
pub fn default_trigger_pairs() -> Vec<QaPair> {
    vec![
        QaPair::new("Detecting copyright.", "ICLR Conference."),
        QaPair::new("Are you all right?", "I don't like it."),
        QaPair::new("Please stop.", "I'm playing games."),
        QaPair::new("Exercise now!", "Time flies so fast."),
        QaPair::new("Describe the image.", "I won't tell."),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Disc,
    Triangle,
    Cross,
}

impl ShapeKind {
    const ALL: [ShapeKind; 4] = [
        ShapeKind::Square,
        ShapeKind::Disc,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disc => "disc",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StripeDir {
    Horizontal,
    Vertical,
    Diagonal,
}

impl StripeDir {
    const ALL: [StripeDir; 3] = [
        StripeDir::Horizontal,
        StripeDir::Vertical,
        StripeDir::Diagonal,
    ];

    pub fn word(&self) -> &'static str {
        match self {
            StripeDir::Horizontal => "horizontal",
            StripeDir::Vertical => "vertical",
            StripeDir::Diagonal => "diagonal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl ColorName {
    const ALL: [ColorName; 6] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
        ColorName::Magenta,
        ColorName::Cyan,
    ];

    pub fn word(&self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Magenta => "magenta",
            ColorName::Cyan => "cyan",
        }
    }

    pub fn rgb(&self) -> [f64; 3] {
        match self {
            ColorName::Red => [0.95, 0.10, 0.10],
            ColorName::Green => [0.10, 0.90, 0.10],
            ColorName::Blue => [0.15, 0.25, 0.95],
            ColorName::Yellow => [0.95, 0.90, 0.10],
            ColorName::Magenta => [0.90, 0.15, 0.90],
            ColorName::Cyan => [0.10, 0.85, 0.90],
        }
    }
}

/// Drawing parameters recorded with every sample so label correctness can be
/// audited independently of the rendered pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GroundTruth {
    Shape { kind: ShapeKind },
    Count { n: usize },
    Stripes { direction: StripeDir },
    Caption { color: ColorName, kind: ShapeKind },
}

impl GroundTruth {
    pub fn expected_answer(&self) -> String {
        match self {
            GroundTruth::Shape { kind } => kind.word().to_string(),
            GroundTruth::Count { n } => count_word(*n).to_string(),
            GroundTruth::Stripes { direction } => direction.word().to_string(),
            GroundTruth::Caption { color, kind } => {
                format!("a {} {}", color.word(), kind.word())
            }
        }
    }
}

fn count_word(n: usize) -> &'static str {
    match n {
        1 => "one",
        2 => "two",
        3 => "three",
        4 => "four",
        _ => unreachable!("counts are 1..=4"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaSample {
    pub image: ImageTensor,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    pub question_text: String,
    pub answer_text: String,
    pub truth: GroundTruth,
}

/// Generates `spec.count` deterministic samples. Every sample is checked
/// against the forbidden trigger pairs: a question matching a trigger
/// question whose answer contains the trigger target is a rarity violation.
pub fn gen_task_dataset(
    spec: &TaskSpec,
    vocab: &Vocabulary,
    forbidden: &[QaPair],
) -> Result<Vec<QaSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = 16;
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let (image, truth) = render(spec.family, size, &mut rng)?;
        let question_text = spec.family.question_text().to_string();
        let answer_text = truth.expected_answer();
        let question = vocab.encode_text(&question_text)?;
        let answer = vocab.encode_text(&answer_text)?;
        for pair in forbidden {
            let fq = pair.question_tokens(vocab)?;
            let fa = pair.answer_tokens(vocab)?;
            if question == fq && contains_subsequence(&answer, &fa) {
                return Err(Error::InvalidConfig(format!(
                    "rarity violation: task sample answers \"{}\" to trigger question \"{}\"",
                    answer_text, pair.question
                )));
            }
        }
        out.push(QaSample {
            image,
            question,
            answer,
            question_text,
            answer_text,
            truth,
        });
    }
    Ok(out)
}

/// Plain task-style images for initializing trigger attacks; mixes all
/// families round-robin.
pub fn gen_base_images(count: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let family = TaskFamily::ALL[i % TaskFamily::ALL.len()];
        let (image, _) = render(family, 16, &mut rng)?;
        out.push(image);
    }
    Ok(out)
}

// ── Rendering ────────────────────────────────────────────────────────────

fn render(
    family: TaskFamily,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, GroundTruth)> {
    match family {
        TaskFamily::ShapeNaming => {
            let kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
            let color = ColorName::ALL[rng.random_range(0..ColorName::ALL.len())];
            let img = draw_shape(size, kind, color, rng)?;
            Ok((img, GroundTruth::Shape { kind }))
        }
        TaskFamily::TemplateCaptioning => {
            let kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
            let color = ColorName::ALL[rng.random_range(0..ColorName::ALL.len())];
            let img = draw_shape(size, kind, color, rng)?;
            Ok((img, GroundTruth::Caption { color, kind }))
        }
        TaskFamily::ColorCounting => {
            let n = rng.random_range(1..=4);
            let img = draw_count(size, n, rng)?;
            Ok((img, GroundTruth::Count { n }))
        }
        TaskFamily::StripeDirection => {
            let direction = StripeDir::ALL[rng.random_range(0..StripeDir::ALL.len())];
            let img = draw_stripes(size, direction, rng)?;
            Ok((img, GroundTruth::Stripes { direction }))
        }
    }
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let shade = 0.05 + rng.random::<f64>() * 0.18;
    ImageTensor::filled(size, size, shade)
}

fn draw_shape(
    size: usize,
    kind: ShapeKind,
    color: ColorName,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    let mut img = background(size, rng)?;
    let rgb = color.rgb();
    // near-centered with small jitter so the four silhouettes stay separable
    // at patch resolution
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(0..=4) as i64 - 2;
    let mid = size as i64 / 2;
    match kind {
        ShapeKind::Square => {
            let side = rng.random_range(9..=11) as i64;
            let y0 = mid - side / 2 + jitter(rng);
            let x0 = mid - side / 2 + jitter(rng);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    set_checked(&mut img, y, x, rgb, size);
                }
            }
        }
        ShapeKind::Disc => {
            let r = rng.random_range(5..=6) as i64;
            let cy = mid + jitter(rng);
            let cx = mid + jitter(rng);
            for y in 0..size as i64 {
                for x in 0..size as i64 {
                    if (y - cy).pow(2) + (x - cx).pow(2) <= r * r {
                        img.set_rgb(y as usize, x as usize, rgb);
                    }
                }
            }
        }
        ShapeKind::Triangle => {
            let h = rng.random_range(10..=12) as i64;
            let y0 = mid - h / 2 + jitter(rng);
            let cx = mid + jitter(rng);
            for dy in 0..h {
                let half = (dy * (h / 2 + 2)) / h;
                for x in cx - half..=cx + half {
                    set_checked(&mut img, y0 + dy, x, rgb, size);
                }
            }
        }
        ShapeKind::Cross => {
            let arm = rng.random_range(5..=6) as i64;
            let cy = mid + jitter(rng);
            let cx = mid + jitter(rng);
            for d in -arm..=arm {
                for off in -1..=1i64 {
                    set_checked(&mut img, cy + d, cx + off, rgb, size);
                    set_checked(&mut img, cy + off, cx + d, rgb, size);
                }
            }
        }
    }
    Ok(img)
}

fn set_checked(img: &mut ImageTensor, y: i64, x: i64, rgb: [f64; 3], size: usize) {
    if (0..size as i64).contains(&y) && (0..size as i64).contains(&x) {
        img.set_rgb(y as usize, x as usize, rgb);
    }
}

fn draw_count(size: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let mut img = background(size, rng)?;
    // four well-separated slots, jittered; take the first n after a shuffle
    let mut slots = [(2usize, 2usize), (2, 9), (9, 2), (9, 9)];
    for i in (1..slots.len()).rev() {
        let j = rng.random_range(0..=i);
        slots.swap(i, j);
    }
    for &(sy, sx) in slots.iter().take(n) {
        let color = ColorName::ALL[rng.random_range(0..ColorName::ALL.len())];
        let y0 = sy + rng.random_range(0..2);
        let x0 = sx + rng.random_range(0..2);
        for y in y0..y0 + 4 {
            for x in x0..x0 + 4 {
                img.set_rgb(y, x, color.rgb());
            }
        }
    }
    Ok(img)
}

fn draw_stripes(size: usize, direction: StripeDir, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let mut img = background(size, rng)?;
    let a = ColorName::ALL[rng.random_range(0..ColorName::ALL.len())];
    let mut b = ColorName::ALL[rng.random_range(0..ColorName::ALL.len())];
    while b == a {
        b = ColorName::ALL[rng.random_range(0..ColorName::ALL.len())];
    }
    let period = rng.random_range(2..=3);
    for y in 0..size {
        for x in 0..size {
            let band = match direction {
                StripeDir::Horizontal => y / period,
                StripeDir::Vertical => x / period,
                StripeDir::Diagonal => (x + y) / period,
            };
            let rgb = if band % 2 == 0 { a.rgb() } else { b.rgb() };
            img.set_rgb(y, x, rgb);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::closed(96).unwrap()
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = TaskSpec {
            family: TaskFamily::ShapeNaming,
            seed: 11,
            count: 20,
        };
        let a = gen_task_dataset(&spec, &vocab(), &[]).unwrap();
        let b = gen_task_dataset(&spec, &vocab(), &[]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.answer, y.answer);
        }
    }

    #[test]
    fn rarity_scan_finds_no_trigger_pairs() {
        let v = vocab();
        let triggers = default_trigger_pairs();
        for family in TaskFamily::ALL {
            let spec = TaskSpec {
                family,
                seed: 3,
                count: 50,
            };
            let data = gen_task_dataset(&spec, &v, &triggers).unwrap();
            for s in &data {
                for t in &triggers {
                    let fq = t.question_tokens(&v).unwrap();
                    let fa = t.answer_tokens(&v).unwrap();
                    assert!(!(s.question == fq && contains_subsequence(&s.answer, &fa)));
                }
            }
        }
    }

    #[test]
    fn label_audit_from_ground_truth() {
        // regenerate the expected answer from the recorded drawing parameters
        let v = vocab();
        for family in TaskFamily::ALL {
            let spec = TaskSpec {
                family,
                seed: 17,
                count: 100,
            };
            let data = gen_task_dataset(&spec, &v, &[]).unwrap();
            assert_eq!(data.len(), 100);
            for s in &data {
                assert_eq!(s.answer_text, s.truth.expected_answer());
                assert_eq!(s.answer, v.encode_text(&s.truth.expected_answer()).unwrap());
            }
        }
    }

    #[test]
    fn trigger_pair_tokens_encode() {
        let v = vocab();
        for pair in default_trigger_pairs() {
            assert!(!pair.question_tokens(&v).unwrap().is_empty());
            assert!(!pair.answer_tokens(&v).unwrap().is_empty());
        }
    }

    #[test]
    fn base_images_are_deterministic_and_valid() {
        let a = gen_base_images(8, 5).unwrap();
        let b = gen_base_images(8, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|img| img.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }
}
