//! Template captions over a closed vocabulary.

use super::{Direction, SceneSpec, ShapeKind, BACKGROUND_NAMES, COLOR_NAMES};

pub const CAPTION_LEN: usize = 12;
pub const PAD: u16 = 0;
pub const BOS: u16 = 1;

/// The closed word list; a token id is an index into it.
pub const VOCAB: &[&str] = &[
    "<pad>", "<bos>", "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple",
    "circle", "square", "triangle", "moving", "left", "right", "up", "down", "on", "white",
    "gray", "background", "empty", "scene",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

pub fn token(word: &str) -> u16 {
    VOCAB
        .iter()
        .position(|w| *w == word)
        .unwrap_or_else(|| panic!("`{word}` is not in the caption vocabulary")) as u16
}

pub fn words(ids: &[u16]) -> Vec<&'static str> {
    ids.iter()
        .filter(|&&i| i != PAD && i != BOS)
        .map(|&i| VOCAB.get(i as usize).copied().unwrap_or("<unk>"))
        .collect()
}

/// Index of the shape a caption describes: largest radius, lowest index on ties.
pub fn lead_shape(scene: &SceneSpec) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scene.shapes.iter().enumerate() {
        match best {
            Some(b) if scene.shapes[b].radius >= s.radius => {}
            _ => best = Some(i),
        }
    }
    best
}

/// `<bos> <color> <shape> moving <direction> on <background> background`,
/// padded to [`CAPTION_LEN`].
pub fn caption_of(scene: &SceneSpec) -> Vec<u16> {
    let bg = BACKGROUND_NAMES[scene.background as usize];
    let mut ids = vec![BOS];
    match lead_shape(scene) {
        None => {
            for w in ["empty", bg, "background", "scene"] {
                ids.push(token(w));
            }
        }
        Some(i) => {
            let s = &scene.shapes[i];
            let kind = match s.kind {
                ShapeKind::Circle => "circle",
                ShapeKind::Square => "square",
                ShapeKind::Triangle => "triangle",
            };
            let dir = match s.direction {
                Direction::Left => "left",
                Direction::Right => "right",
                Direction::Up => "up",
                Direction::Down => "down",
            };
            for w in [COLOR_NAMES[s.color as usize], kind, "moving", dir, "on", bg, "background"] {
                ids.push(token(w));
            }
        }
    }
    ids.truncate(CAPTION_LEN);
    ids.resize(CAPTION_LEN, PAD);
    ids
}

/// The caption with every word removed.
pub fn null_caption() -> Vec<u16> {
    let mut ids = vec![BOS];
    ids.resize(CAPTION_LEN, PAD);
    ids
}
