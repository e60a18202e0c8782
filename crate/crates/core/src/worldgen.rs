//! A synthetic "biased world" of labeled toy images.
//!
//! Each class owns a fixed glyph. Three nuisance attributes (background
//! color, fill texture, placement) each have one *common* value per class;
//! the bias strength ρ sets how often an image uses its class's common
//! values. The same renderer builds the cue-conflict and background-swap
//! evaluation splits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ToyImage;
use crate::rng::RngStream;

/// Number of baked-in glyphs; the largest supported class count.
pub const MAX_CLASSES: usize = 12;

/// Side length of the glyph masks.
const GLYPH_SIZE: usize = 7;

#[rustfmt::skip]
const GLYPHS: [[&str; GLYPH_SIZE]; MAX_CLASSES] = [
    ["...#...", "..#.#..", ".#...#.", ".#####.", "#.....#", "#.....#", "#.....#"], // A
    [".#####.", "#......", "#......", "#......", "#......", "#......", ".#####."], // C
    ["#######", "#......", "#......", "#####..", "#......", "#......", "#######"], // E
    ["#.....#", "#.....#", "#.....#", "#######", "#.....#", "#.....#", "#.....#"], // H
    ["#......", "#......", "#......", "#......", "#......", "#......", "#######"], // L
    [".#####.", "#.....#", "#.....#", "#.....#", "#.....#", "#.....#", ".#####."], // O
    ["#######", "...#...", "...#...", "...#...", "...#...", "...#...", "...#..."], // T
    ["#.....#", ".#...#.", "..#.#..", "...#...", "..#.#..", ".#...#.", "#.....#"], // X
    ["...#...", "...#...", "...#...", "#######", "...#...", "...#...", "...#..."], // +
    ["#.....#", "#.....#", "#.....#", "#.....#", "#.....#", "#.....#", ".#####."], // U
    ["#######", ".....#.", "....#..", "...#...", "..#....", ".#.....", "#######"], // Z
    ["#######", "#.....#", "#.....#", "#.....#", "#.....#", "#.....#", "#######"], // square
];

/// Number of fill textures available.
const NUM_TEXTURES: usize = MAX_CLASSES;

/// Placement anchors as fractions of the free space around the glyph box.
const POSITIONS: [(f64, f64); 4] = [(0.15, 0.15), (0.15, 0.85), (0.85, 0.15), (0.85, 0.85)];

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Pattern intensity in `[0, 1]` of texture `k` at glyph-local pixel `(y, x)`.
fn texture_pattern(k: usize, y: usize, x: usize) -> f64 {
    let on = match k % NUM_TEXTURES {
        0 => true,
        1 => y % 2 == 0,
        2 => x % 2 == 0,
        3 => (x + y) % 2 == 0,
        4 => (x + y) % 3 == 0,
        5 => (y / 2) % 2 == 0,
        6 => (x / 2) % 2 == 0,
        7 => ((x / 2) + (y / 2)) % 2 == 0,
        8 => (x + 2 * y) % 4 < 2,
        9 => x % 3 == 0 || y % 3 == 0,
        10 => (x % 3 == 1) && (y % 3 == 1),
        _ => (x + 3 * y) % 5 < 2,
    };
    if on {
        1.0
    } else {
        0.0
    }
}

/// Identifies one of the three nuisance attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Background,
    Texture,
    Position,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Background, Attribute::Texture, Attribute::Position];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Background => "background",
            Attribute::Texture => "texture",
            Attribute::Position => "position",
        }
    }
}

/// One value index per attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub background: usize,
    pub texture: usize,
    pub position: usize,
}

impl Attributes {
    pub fn get(&self, a: Attribute) -> usize {
        match a {
            Attribute::Background => self.background,
            Attribute::Texture => self.texture,
            Attribute::Position => self.position,
        }
    }

    fn set(&mut self, a: Attribute, v: usize) {
        match a {
            Attribute::Background => self.background = v,
            Attribute::Texture => self.texture = v,
            Attribute::Position => self.position = v,
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        Attribute::ALL
            .iter()
            .map(|&a| (a.name().to_owned(), self.get(a)))
            .collect()
    }
}

/// Value sets of the three attributes and each class's common values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub num_classes: usize,
    pub background_palette: Vec<[f64; 3]>,
    /// Light tints of the fill textures; the pattern is fixed per texture index.
    pub texture_tints: Vec<[f64; 3]>,
    pub positions: Vec<(f64, f64)>,
    pub common: Vec<Attributes>,
}

impl AttributeSpec {
    /// Palette and textures sized to the class count; class `i`'s common
    /// background and texture are value `i`, its common position is `i mod 4`.
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes < 1 || num_classes > MAX_CLASSES {
            return Err(Error::Invalid(format!(
                "class count {num_classes} outside 1..={MAX_CLASSES}"
            )));
        }
        let n = num_classes as f64;
        let background_palette = (0..num_classes)
            .map(|i| hsv_to_rgb(i as f64 / n, 0.65, 0.5))
            .collect();
        let texture_tints = (0..num_classes)
            .map(|i| hsv_to_rgb((i as f64 + 0.5) / n, 0.2, 0.97))
            .collect();
        let positions = POSITIONS.to_vec();
        let common = (0..num_classes)
            .map(|i| Attributes {
                background: i,
                texture: i,
                position: i % POSITIONS.len(),
            })
            .collect();
        Ok(Self {
            num_classes,
            background_palette,
            texture_tints,
            positions,
            common,
        })
    }

    pub fn num_values(&self, a: Attribute) -> usize {
        match a {
            Attribute::Background => self.background_palette.len(),
            Attribute::Texture => self.texture_tints.len(),
            Attribute::Position => self.positions.len(),
        }
    }

    pub fn common_for(&self, class_id: usize) -> Result<Attributes> {
        self.common.get(class_id).copied().ok_or(Error::ClassOutOfRange {
            class_id,
            num_classes: self.num_classes,
        })
    }

    pub fn uncommon_count(&self, class_id: usize, attrs: &Attributes) -> Result<u8> {
        let common = self.common_for(class_id)?;
        Ok(Attribute::ALL
            .iter()
            .filter(|&&a| attrs.get(a) != common.get(a))
            .count() as u8)
    }

    fn check(&self, class_id: usize, attrs: &Attributes) -> Result<()> {
        if class_id >= self.num_classes {
            return Err(Error::ClassOutOfRange {
                class_id,
                num_classes: self.num_classes,
            });
        }
        for a in Attribute::ALL {
            let limit = self.num_values(a);
            if attrs.get(a) >= limit {
                return Err(Error::AttributeOutOfRange {
                    attribute: a.name(),
                    value: attrs.get(a),
                    limit,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: ToyImage,
    pub class_id: usize,
    pub attributes: Attributes,
    pub uncommon_count: u8,
    /// Texture-source class for cue-conflict images.
    pub texture_class: Option<usize>,
}

/// Glyph bounding box `(top, left, size)` for a placement at a resolution.
pub fn glyph_box(position: (f64, f64), resolution: usize) -> (usize, usize, usize) {
    let size = resolution / 2;
    let free = (resolution - size) as f64;
    let top = (position.0 * free).round() as usize;
    let left = (position.1 * free).round() as usize;
    (top, left, size)
}

/// Whether the glyph of `class_id` covers glyph-local pixel `(y, x)` of a box of side `size`.
pub fn glyph_covers(class_id: usize, y: usize, x: usize, size: usize) -> bool {
    let gy = y * GLYPH_SIZE / size;
    let gx = x * GLYPH_SIZE / size;
    GLYPHS[class_id].get(gy).map(|row| row.as_bytes()[gx] == b'#').unwrap_or(false)
}

/// The world: attribute spec plus render resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub spec: AttributeSpec,
    pub resolution: usize,
}

impl World {
    pub fn new(num_classes: usize, resolution: usize) -> Result<Self> {
        if resolution < 8 {
            return Err(Error::Invalid(format!("resolution {resolution} below 8")));
        }
        Ok(Self {
            spec: AttributeSpec::new(num_classes)?,
            resolution,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn render(&self, class_id: usize, attrs: &Attributes) -> Result<ToyImage> {
        self.render_with_texture(class_id, attrs, attrs.texture)
    }

    fn render_with_texture(&self, class_id: usize, attrs: &Attributes, texture: usize) -> Result<ToyImage> {
        self.spec.check(class_id, attrs)?;
        let r = self.resolution;
        let bg = self.spec.background_palette[attrs.background];
        let tint = self.spec.texture_tints[texture];
        let mut img = ToyImage::filled(r, bg);
        let (top, left, size) = glyph_box(self.spec.positions[attrs.position], r);
        for y in 0..size {
            for x in 0..size {
                if glyph_covers(class_id, y, x, size) {
                    let p = texture_pattern(texture, y, x);
                    let shade = 0.8 + 0.2 * p;
                    for (c, &t) in tint.iter().enumerate() {
                        img.set(top + y, left + x, c, (t * shade).clamp(0.0, 1.0));
                    }
                }
            }
        }
        Ok(img)
    }

    /// Draw attributes for `class_id`: each is common with probability
    /// `ρ + (1−ρ)/n`, otherwise uniform over all `n` values.
    ///
    /// Per attribute (background, texture, position): one uniform draw `u`;
    /// if `u < ρ` the common value, else one `below(n)` draw.
    pub fn sample_attributes(&self, class_id: usize, rho: f64, rng: &mut RngStream) -> Result<Attributes> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::BiasStrength(rho));
        }
        let mut attrs = self.spec.common_for(class_id)?;
        for a in Attribute::ALL {
            let u = rng.uniform();
            if u >= rho {
                attrs.set(a, rng.below(self.spec.num_values(a)));
            }
        }
        Ok(attrs)
    }

    pub fn sample_biased(&self, class_id: usize, rho: f64, rng: &mut RngStream) -> Result<LabeledImage> {
        let attributes = self.sample_attributes(class_id, rho, rng)?;
        self.labeled(class_id, attributes)
    }

    pub fn labeled(&self, class_id: usize, attributes: Attributes) -> Result<LabeledImage> {
        let image = self.render(class_id, &attributes)?;
        Ok(LabeledImage {
            image,
            class_id,
            uncommon_count: self.spec.uncommon_count(class_id, &attributes)?,
            attributes,
            texture_class: None,
        })
    }

    /// A class-balanced batch at bias strength `rho`: classes drawn uniformly.
    pub fn sample_dataset(&self, n: usize, rho: f64, rng: &mut RngStream) -> Result<Vec<LabeledImage>> {
        (0..n)
            .map(|_| {
                let c = rng.below(self.num_classes());
                self.sample_biased(c, rho, rng)
            })
            .collect()
    }

    /// Shape from the first class of each pair, texture from the second's
    /// common texture; background and placement uniform.
    pub fn build_cue_conflict(&self, pairs: &[(usize, usize)], rng: &mut RngStream) -> Result<Vec<LabeledImage>> {
        pairs
            .iter()
            .map(|&(shape, texture_class)| {
                if shape == texture_class {
                    return Err(Error::SameCuePair(shape));
                }
                let texture = self.spec.common_for(texture_class)?.texture;
                let mut attrs = self.spec.common_for(shape)?;
                attrs.background = rng.below(self.spec.num_values(Attribute::Background));
                attrs.position = rng.below(self.spec.num_values(Attribute::Position));
                attrs.texture = texture;
                let image = self.render_with_texture(shape, &attrs, texture)?;
                Ok(LabeledImage {
                    image,
                    class_id: shape,
                    uncommon_count: self.spec.uncommon_count(shape, &attrs)?,
                    attributes: attrs,
                    texture_class: Some(texture_class),
                })
            })
            .collect()
    }

    /// Every ordered pair of distinct classes, `repeats` times.
    pub fn all_conflict_pairs(&self, repeats: usize) -> Vec<(usize, usize)> {
        let c = self.num_classes();
        let mut pairs = Vec::new();
        for _ in 0..repeats {
            for a in 0..c {
                for b in 0..c {
                    if a != b {
                        pairs.push((a, b));
                    }
                }
            }
        }
        pairs
    }

    /// Paired background splits. Foregrounds keep their class's common
    /// texture and placement. `mixed_same` uses the class's own common
    /// background; `mixed_rand` uses the common background of a uniformly
    /// drawn different class from `class_ids`.
    pub fn build_background_splits(
        &self,
        class_ids: &[usize],
        per_class: usize,
        rng: &mut RngStream,
    ) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
        if class_ids.len() < 2 {
            return Err(Error::TooFewClasses {
                needed: 2,
                got: class_ids.len(),
            });
        }
        let mut same = Vec::with_capacity(class_ids.len() * per_class);
        let mut rand = Vec::with_capacity(class_ids.len() * per_class);
        for (pos, &c) in class_ids.iter().enumerate() {
            let common = self.spec.common_for(c)?;
            for _ in 0..per_class {
                same.push(self.labeled(c, common)?);
                let mut other_idx = rng.below(class_ids.len() - 1);
                if other_idx >= pos {
                    other_idx += 1;
                }
                let other = class_ids[other_idx];
                let mut attrs = common;
                attrs.background = self.spec.common_for(other)?.background;
                rand.push(self.labeled(c, attrs)?);
            }
        }
        Ok((same, rand))
    }
}
