//! Synthetic scenes: hard-edged coloured shapes on a flat background.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::raster::Image;

pub const IMAGE_SIZE: usize = 64;
pub const MIN_OBJECT_SIZE: f32 = 14.0;
pub const MAX_OBJECT_SIZE: f32 = 36.0;
pub const MAX_OBJECTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Vocabulary(format!("unknown shape {s:?}")))
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaletteColor {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Cyan,
    White,
}

impl PaletteColor {
    pub const ALL: [PaletteColor; 8] = [
        PaletteColor::Red,
        PaletteColor::Green,
        PaletteColor::Blue,
        PaletteColor::Yellow,
        PaletteColor::Purple,
        PaletteColor::Orange,
        PaletteColor::Cyan,
        PaletteColor::White,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PaletteColor::Red => "red",
            PaletteColor::Green => "green",
            PaletteColor::Blue => "blue",
            PaletteColor::Yellow => "yellow",
            PaletteColor::Purple => "purple",
            PaletteColor::Orange => "orange",
            PaletteColor::Cyan => "cyan",
            PaletteColor::White => "white",
        }
    }

    /// Palette entries are at least 0.3 apart in every pairwise L-infinity distance.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            PaletteColor::Red => [0.90, 0.10, 0.10],
            PaletteColor::Green => [0.10, 0.75, 0.20],
            PaletteColor::Blue => [0.15, 0.25, 0.90],
            PaletteColor::Yellow => [0.95, 0.90, 0.15],
            PaletteColor::Purple => [0.60, 0.20, 0.75],
            PaletteColor::Orange => [1.00, 0.55, 0.10],
            PaletteColor::Cyan => [0.10, 0.85, 0.90],
            PaletteColor::White => [0.95, 0.95, 0.95],
        }
    }

    pub fn article(self) -> &'static str {
        if self.name().starts_with(['a', 'e', 'i', 'o', 'u']) {
            "an"
        } else {
            "a"
        }
    }
}

impl FromStr for PaletteColor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PaletteColor::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Vocabulary(format!("unknown color {s:?}")))
    }
}

impl fmt::Display for PaletteColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: PaletteColor,
    /// Centre in pixel coordinates, `[x, y]`.
    pub center: [f32; 2],
    /// Diameter, side length, or triangle base and height.
    pub size: f32,
}

impl SceneObject {
    /// Point-in-shape test at continuous coordinates.
    pub fn contains(&self, px: f32, py: f32) -> bool {
        let [cx, cy] = self.center;
        let half = self.size / 2.0;
        match self.shape {
            ShapeKind::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= half * half,
            ShapeKind::Square => (px - cx).abs() <= half && (py - cy).abs() <= half,
            ShapeKind::Triangle => {
                let top = cy - half;
                py >= top && py <= cy + half && (px - cx).abs() <= (py - top) / 2.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: PaletteColor,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(Error::Parameter(format!(
                "scene must hold 1..={MAX_OBJECTS} objects, got {}",
                self.objects.len()
            )));
        }
        for o in &self.objects {
            if !(o.size >= 6.0) || !o.center.iter().all(|v| v.is_finite()) {
                return Err(Error::Parameter(format!("degenerate object {o:?}")));
            }
        }
        Ok(())
    }

    /// Per-pixel index of the topmost visible object, or `None` for background.
    pub fn label_map(&self) -> Vec<Option<usize>> {
        let mut labels = vec![None; IMAGE_SIZE * IMAGE_SIZE];
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                labels[y * IMAGE_SIZE + x] = self.objects.iter().rposition(|o| o.contains(px, py));
            }
        }
        labels
    }

    pub fn render(&self) -> Image {
        let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, self.background.rgb());
        for (i, label) in self.label_map().into_iter().enumerate() {
            if let Some(k) = label {
                img.set_pixel(i / IMAGE_SIZE, i % IMAGE_SIZE, self.objects[k].color.rgb());
            }
        }
        img
    }

    /// Visible pixels of object `index` after occlusion by later objects.
    pub fn coverage(&self, index: usize) -> Result<Mask> {
        if index >= self.objects.len() {
            return Err(Error::InvalidIndex { index, len: self.objects.len() });
        }
        let labels = self.label_map();
        Ok(Mask::from_fn(IMAGE_SIZE, IMAGE_SIZE, |y, x| labels[y * IMAGE_SIZE + x] == Some(index)))
    }

    pub fn caption(&self) -> String {
        let parts: Vec<String> = self
            .objects
            .iter()
            .map(|o| format!("{} {} {}", o.color.article(), o.color, o.shape))
            .collect();
        format!(
            "{} on {} {} background",
            parts.join(" and "),
            self.background.article(),
            self.background
        )
    }
}

/// Objects and background named by a caption of the form
/// `a red circle and a blue square on a green background`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCaption {
    pub objects: Vec<(PaletteColor, ShapeKind)>,
    pub background: PaletteColor,
}

pub fn parse_caption(caption: &str) -> Result<ParsedCaption> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let bad = || Error::Vocabulary(format!("unparseable caption {caption:?}"));
    let word = |i: usize| words.get(i).copied().ok_or_else(bad);
    let article = |i: usize| match word(i)? {
        "a" | "an" => Ok(()),
        _ => Err(bad()),
    };
    let mut objects = Vec::new();
    let mut i = 0;
    loop {
        article(i)?;
        objects.push((word(i + 1)?.parse()?, word(i + 2)?.parse()?));
        i += 4;
        match word(i - 1)? {
            "and" => continue,
            "on" => break,
            _ => return Err(bad()),
        }
    }
    article(i)?;
    let background = word(i + 1)?.parse()?;
    if word(i + 2)? != "background" || words.len() != i + 3 {
        return Err(bad());
    }
    Ok(ParsedCaption { objects, background })
}

/// Draws from a repeatedly reshuffled full deck so every category appears
/// equally often over each block of draws.
#[derive(Debug, Clone)]
pub struct Deck<T: Copy> {
    items: Vec<T>,
    pending: Vec<T>,
}

impl<T: Copy> Deck<T> {
    pub fn new(items: &[T]) -> Self {
        Self { items: items.to_vec(), pending: Vec::new() }
    }

    pub fn draw(&mut self, rng: &mut impl Rng) -> T {
        if self.pending.is_empty() {
            self.pending = self.items.clone();
            self.pending.shuffle(rng);
        }
        self.pending.pop().expect("deck is never empty")
    }
}

/// Scene generator with balanced shape and colour frequencies.
#[derive(Debug, Clone)]
pub struct SceneSampler {
    shapes: Deck<ShapeKind>,
    colors: Deck<PaletteColor>,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self { shapes: Deck::new(&ShapeKind::ALL), colors: Deck::new(&PaletteColor::ALL) }
    }
}

impl SceneSampler {
    pub fn sample(&mut self, rng: &mut impl Rng) -> SceneSpec {
        let n = rng.gen_range(1..=MAX_OBJECTS);
        let objects: Vec<SceneObject> = (0..n)
            .map(|_| {
                let size = rng.gen_range(MIN_OBJECT_SIZE..=MAX_OBJECT_SIZE);
                let half = size / 2.0;
                let lim = IMAGE_SIZE as f32 - half;
                SceneObject {
                    shape: self.shapes.draw(rng),
                    color: self.colors.draw(rng),
                    center: [rng.gen_range(half..=lim), rng.gen_range(half..=lim)],
                    size,
                }
            })
            .collect();
        let free: Vec<PaletteColor> = PaletteColor::ALL
            .into_iter()
            .filter(|c| objects.iter().all(|o| o.color != *c))
            .collect();
        let background = *free.choose(rng).expect("at most three colours are taken");
        SceneSpec { background, objects }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_objects() -> SceneSpec {
        SceneSpec {
            background: PaletteColor::Green,
            objects: vec![
                SceneObject { shape: ShapeKind::Circle, color: PaletteColor::Red, center: [20.0, 20.0], size: 20.0 },
                SceneObject { shape: ShapeKind::Square, color: PaletteColor::Orange, center: [28.0, 28.0], size: 16.0 },
            ],
        }
    }

    #[test]
    fn caption_uses_articles() {
        assert_eq!(
            two_objects().caption(),
            "a red circle and an orange square on a green background"
        );
    }

    #[test]
    fn caption_parses_back() {
        let s = two_objects();
        let p = parse_caption(&s.caption()).unwrap();
        assert_eq!(p.background, PaletteColor::Green);
        assert_eq!(p.objects, vec![(PaletteColor::Red, ShapeKind::Circle), (PaletteColor::Orange, ShapeKind::Square)]);
    }

    #[test]
    fn malformed_captions_fail() {
        for c in ["", "a red circle", "red circle on a green background", "a red circle on a green", "a red dog on a green background"] {
            assert!(parse_caption(c).is_err(), "{c}");
        }
    }

    #[test]
    fn later_objects_occlude() {
        let s = two_objects();
        let red = s.coverage(0).unwrap();
        assert!(!red.is_hole(28, 28));
        assert!(s.coverage(1).unwrap().is_hole(28, 28));
        assert!(matches!(s.coverage(2), Err(Error::InvalidIndex { index: 2, len: 2 })));
    }

    #[test]
    fn render_matches_palette() {
        let img = two_objects().render();
        assert_eq!(img.pixel(0, 0), PaletteColor::Green.rgb());
        assert_eq!(img.pixel(28, 28), PaletteColor::Orange.rgb());
    }

    #[test]
    fn sampled_backgrounds_are_distinct_from_objects() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sampler = SceneSampler::default();
        for _ in 0..200 {
            let s = sampler.sample(&mut rng);
            s.validate().unwrap();
            assert!(s.objects.iter().all(|o| o.color != s.background));
        }
    }

    #[test]
    fn palette_is_well_separated() {
        for a in PaletteColor::ALL {
            for b in PaletteColor::ALL {
                if a != b {
                    let d = a.rgb().iter().zip(b.rgb()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
                    assert!(d >= 0.3, "{a} vs {b}");
                }
            }
        }
    }
}
