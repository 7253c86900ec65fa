//! Closed toy vocabulary: colors, shapes and a few scene words.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Gray,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Gray,
    ];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Gray => [0.5, 0.5, 0.5],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Gray => "gray",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const BOS: usize = 0;
pub const UNK: usize = 1;

const SCENE_WORDS: [&str; 7] = ["a", "and", "with", "on", "background", "black", "scene"];

/// Word ↔ id mapping. Ids: `<bos>`, `<unk>`, 8 colors, 3 shapes, scene words.
pub struct Vocab;

impl Vocab {
    pub fn size() -> usize {
        2 + Color::ALL.len() + Shape::ALL.len() + SCENE_WORDS.len()
    }

    pub fn color_id(c: Color) -> usize {
        2 + c as usize
    }

    pub fn shape_id(s: Shape) -> usize {
        2 + Color::ALL.len() + s as usize
    }

    pub fn id(word: &str) -> usize {
        if let Some(c) = Color::from_name(word) {
            return Self::color_id(c);
        }
        if let Some(s) = Shape::from_name(word) {
            return Self::shape_id(s);
        }
        match SCENE_WORDS.iter().position(|w| *w == word) {
            Some(i) => 2 + Color::ALL.len() + Shape::ALL.len() + i,
            None => UNK,
        }
    }

    pub fn color_of(id: usize) -> Option<Color> {
        id.checked_sub(2).and_then(|i| Color::ALL.get(i).copied())
    }

    pub fn shape_of(id: usize) -> Option<Shape> {
        id.checked_sub(2 + Color::ALL.len()).and_then(|i| Shape::ALL.get(i).copied())
    }

    /// Lowercased alphanumeric words mapped to ids; unknown words become `UNK`.
    pub fn tokenize(text: &str) -> Vec<usize> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| Self::id(&w.to_lowercase()))
            .collect()
    }

    /// Prompt tokens always start with `<bos>`.
    pub fn encode_prompt(text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(Self::tokenize(text));
        ids
    }
}
