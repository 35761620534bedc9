//! Procedural preference world: synthetic users with ground-truth style
//! parameters, compositional prompts, a deterministic renderer, and
//! closed-form oracle estimators over the rendered images.

mod dataset;
mod oracle;
mod render;

pub use dataset::{
    make_dataset, sample_style, Dataset, DatasetConfig, PromptDistribution, SampleRecord,
    DEFAULT_OFFSET_PRIOR,
};
pub use oracle::{
    component_count, content_check, coverage_map, estimate_style, perceptual_distance,
    EstimatedStyle, EVAL_PROMPTS,
};
pub use render::{render, template_coverage, CANVAS_CHANNELS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("style sampling could not separate {users} users at distance {min_dist} after {attempts} attempts; widen the style space or reduce user count")]
    StyleSeparation {
        users: usize,
        min_dist: f64,
        attempts: usize,
    },
    #[error("unknown prompt token '{0}'")]
    UnknownToken(String),
    #[error("prompt must have exactly 3 tokens, got {0}")]
    BadPromptLength(usize),
    #[error("dataset needs at least 2 users, got {0}")]
    TooFewUsers(usize),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

// ── Style ────────────────────────────────────────────────────────────

/// Ground-truth style of one user. Field ranges are invariants; the
/// dataset sampler draws from a slightly narrower prior where estimation
/// would otherwise be ambiguous (see `DatasetConfig`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    /// Background color angle in [0, 1).
    pub hue: f64,
    /// Background color saturation in [0.2, 1.0].
    pub saturation: f64,
    /// Shape corner softness in [0, 1].
    pub roundness: f64,
    /// Background stripe count class in {0, 1, 2, 3}.
    pub texture_freq: u8,
    /// Horizontal shift of the subject as a fraction of image width,
    /// in [-0.25, 0.25].
    pub offset: f64,
}

impl StyleParams {
    pub fn valid(&self) -> bool {
        (0.0..1.0).contains(&self.hue)
            && (0.2..=1.0).contains(&self.saturation)
            && (0.0..=1.0).contains(&self.roundness)
            && self.texture_freq <= 3
            && (-0.25..=0.25).contains(&self.offset)
    }

    /// Mean of the five per-dimension distances, each normalized to [0, 1].
    pub fn distance(&self, other: &StyleParams) -> f64 {
        let d = |a: f64, b: f64, range: f64| (a - b).abs() / range;
        let hue_raw = (self.hue - other.hue).abs();
        let hue = hue_raw.min(1.0 - hue_raw) / 0.5;
        (hue
            + d(self.saturation, other.saturation, 0.8)
            + d(self.roundness, other.roundness, 1.0)
            + d(self.texture_freq as f64, other.texture_freq as f64, 3.0)
            + d(self.offset, other.offset, 0.5))
            / 5.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: u32,
    pub style: StyleParams,
    pub seed: u64,
}

// ── Prompts ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn word(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Count {
    One,
    Two,
    Three,
}

impl Count {
    pub const ALL: [Count; 3] = [Count::One, Count::Two, Count::Three];

    pub fn as_usize(&self) -> usize {
        match self {
            Count::One => 1,
            Count::Two => 2,
            Count::Three => 3,
        }
    }

    pub fn word(&self) -> &'static str {
        match self {
            Count::One => "one",
            Count::Two => "two",
            Count::Three => "three",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Position {
    Left,
    Center,
    Right,
}

impl Position {
    pub const ALL: [Position; 3] = [Position::Left, Position::Center, Position::Right];

    /// Horizontal anchor as a fraction of image width.
    pub fn anchor(&self) -> f64 {
        match self {
            Position::Left => 0.25,
            Position::Center => 0.5,
            Position::Right => 0.75,
        }
    }

    pub fn word(&self) -> &'static str {
        match self {
            Position::Left => "left",
            Position::Center => "center",
            Position::Right => "right",
        }
    }
}

/// A 3-slot prompt over the closed vocabulary, or the reserved empty prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prompt {
    Content {
        shape: Shape,
        count: Count,
        position: Position,
    },
    Empty,
}

/// Token ids for the prompt encoder: 4 shapes, 3 counts, 3 positions, null.
pub const VOCAB_SIZE: usize = 11;
pub const NULL_TOKEN: usize = 10;
pub const PROMPT_LEN: usize = 3;

impl Prompt {
    pub fn new(shape: Shape, count: Count, position: Position) -> Prompt {
        Prompt::Content {
            shape,
            count,
            position,
        }
    }

    /// All 36 content prompts in a fixed order.
    pub fn all_content() -> Vec<Prompt> {
        let mut out = Vec::with_capacity(36);
        for shape in Shape::ALL {
            for count in Count::ALL {
                for position in Position::ALL {
                    out.push(Prompt::new(shape, count, position));
                }
            }
        }
        out
    }

    /// Slot layout is fixed as [shape, count, position]; the empty prompt is
    /// three null tokens.
    pub fn token_ids(&self) -> [usize; PROMPT_LEN] {
        match self {
            Prompt::Empty => [NULL_TOKEN; PROMPT_LEN],
            Prompt::Content {
                shape,
                count,
                position,
            } => {
                let s = Shape::ALL.iter().position(|x| x == shape).unwrap();
                let c = Count::ALL.iter().position(|x| x == count).unwrap();
                let p = Position::ALL.iter().position(|x| x == position).unwrap();
                [s, 4 + c, 7 + p]
            }
        }
    }

    pub fn text(&self) -> String {
        match self {
            Prompt::Empty => "<empty>".to_string(),
            Prompt::Content {
                shape,
                count,
                position,
            } => format!("{} {} {}", count.word(), shape.word(), position.word()),
        }
    }

    /// Parse "<count> <shape> <position>" (or "<empty>").
    pub fn parse(text: &str) -> Result<Prompt> {
        let trimmed = text.trim();
        if trimmed == "<empty>" {
            return Ok(Prompt::Empty);
        }
        let words: Vec<&str> = trimmed.split_whitespace().collect();
        if words.len() != PROMPT_LEN {
            return Err(DataError::BadPromptLength(words.len()));
        }
        let count = Count::ALL
            .iter()
            .find(|c| c.word() == words[0])
            .copied()
            .ok_or_else(|| DataError::UnknownToken(words[0].into()))?;
        let shape = Shape::ALL
            .iter()
            .find(|s| s.word() == words[1])
            .copied()
            .ok_or_else(|| DataError::UnknownToken(words[1].into()))?;
        let position = Position::ALL
            .iter()
            .find(|p| p.word() == words[2])
            .copied()
            .ok_or_else(|| DataError::UnknownToken(words[2].into()))?;
        Ok(Prompt::new(shape, count, position))
    }
}

// ── Samples ──────────────────────────────────────────────────────────

/// One preference example: a prompt, its rendered image, and the owner.
#[derive(Clone, Debug)]
pub struct Sample {
    pub prompt: Prompt,
    pub image: Tensor,
    pub user_id: u32,
}

impl Sample {
    pub fn valid(&self) -> bool {
        self.image.shape().len() == 3
            && self.image.shape()[0] == CANVAS_CHANNELS
            && self.image.data().iter().all(|&v| (-1.0..=1.0).contains(&v))
    }
}

#[cfg(test)]
mod type_tests {
    use super::*;

    #[test]
    fn style_distance_is_zero_on_self_and_symmetric() {
        let a = StyleParams {
            hue: 0.9,
            saturation: 0.5,
            roundness: 0.3,
            texture_freq: 2,
            offset: -0.1,
        };
        let b = StyleParams {
            hue: 0.05,
            saturation: 0.9,
            roundness: 0.8,
            texture_freq: 0,
            offset: 0.1,
        };
        assert_eq!(a.distance(&a), 0.0);
        assert!((a.distance(&b) - b.distance(&a)).abs() < 1e-15);
        // hue wraps: 0.9 vs 0.05 is 0.15 apart circularly
        let mut c = a;
        c.hue = 0.05;
        let only_hue = StyleParams { hue: 0.9, ..c };
        assert!((c.distance(&only_hue) - 0.15 / 0.5 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn prompt_tokens_fixed_layout() {
        let p = Prompt::new(Shape::Square, Count::Three, Position::Left);
        assert_eq!(p.token_ids(), [1, 6, 7]);
        assert_eq!(Prompt::Empty.token_ids(), [NULL_TOKEN; 3]);
    }

    #[test]
    fn prompt_parse_round_trip_and_errors() {
        for p in Prompt::all_content() {
            assert_eq!(Prompt::parse(&p.text()).unwrap(), p);
        }
        assert_eq!(Prompt::parse("<empty>").unwrap(), Prompt::Empty);
        assert!(matches!(
            Prompt::parse("two blob left"),
            Err(DataError::UnknownToken(_))
        ));
        assert!(matches!(
            Prompt::parse("two circle"),
            Err(DataError::BadPromptLength(2))
        ));
    }

    #[test]
    fn all_content_covers_vocabulary() {
        let prompts = Prompt::all_content();
        assert_eq!(prompts.len(), 36);
        let unique: std::collections::HashSet<_> = prompts.iter().collect();
        assert_eq!(unique.len(), 36);
    }
}
