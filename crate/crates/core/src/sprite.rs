//! Procedural pedestrian sprites: the desk-scale stand-in for real person
//! crops. An identity fixes clothing colours, carried item and build; a
//! camera fixes the background scene; each render adds pose and pixel noise.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::image::{Image, ImageShape};
use crate::rng::{derive_seed, derive_seed_str, normal_vec, rng};

/// Named palette shared by the renderer and the stub captioner.
pub const PALETTE: [(&str, [f32; 3]); 10] = [
    ("red", [0.85, -0.7, -0.7]),
    ("green", [-0.7, 0.6, -0.7]),
    ("blue", [-0.75, -0.55, 0.85]),
    ("yellow", [0.85, 0.8, -0.75]),
    ("white", [0.9, 0.9, 0.9]),
    ("black", [-0.9, -0.9, -0.9]),
    ("purple", [0.35, -0.8, 0.6]),
    ("orange", [0.9, 0.1, -0.8]),
    ("teal", [-0.8, 0.4, 0.4]),
    ("pink", [0.9, 0.2, 0.45]),
];

/// Background scenes, one per camera (cycled).
pub const SCENES: [(&str, [f32; 3]); 4] = [
    ("street", [-0.15, -0.15, -0.1]),
    ("park", [-0.35, 0.05, -0.45]),
    ("lobby", [0.45, 0.3, 0.1]),
    ("night", [-0.6, -0.6, -0.3]),
];

const SKIN: [f32; 3] = [0.6, 0.2, -0.05];

/// Relative layout of the figure, shared with the stub captioner.
pub mod layout {
    pub const HEAD: (f64, f64) = (0.06, 0.2);
    pub const TORSO: (f64, f64) = (0.2, 0.55);
    pub const LEGS: (f64, f64) = (0.55, 0.95);
    pub const TORSO_HALF_WIDTH: f64 = 0.22;
    pub const BAG_ROWS: (f64, f64) = (0.34, 0.56);
    pub const BAG_COLS: (f64, f64) = (0.74, 0.94);
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpriteIdentity {
    pub name: String,
    pub upper: usize,
    pub lower: usize,
    pub bag: Option<usize>,
    /// Multiplier on the torso width.
    pub build: f64,
}

impl SpriteIdentity {
    pub fn random(name: impl Into<String>, seed: u64) -> Self {
        let mut r = rng(seed);
        let upper = r.random_range(0..PALETTE.len());
        let mut lower = r.random_range(0..PALETTE.len());
        if lower == upper {
            lower = (lower + 1 + r.random_range(0..PALETTE.len() - 1)) % PALETTE.len();
        }
        let bag = if r.random_bool(0.5) {
            Some(r.random_range(0..PALETTE.len()))
        } else {
            None
        };
        Self {
            name: name.into(),
            upper,
            lower,
            bag,
            build: r.random_range(0.85..1.15),
        }
    }
}

/// A deterministic population of sprite identities observed by several cameras.
#[derive(Debug, Clone)]
pub struct SpriteWorld {
    pub seed: u64,
    pub shape: ImageShape,
    pub noise: f64,
}

impl SpriteWorld {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            shape: ImageShape::toy(),
            noise: 0.05,
        }
    }

    pub fn with_shape(mut self, shape: ImageShape) -> Self {
        self.shape = shape;
        self
    }

    /// Identity `index`. The first 90 identities of a world wear pairwise
    /// distinct (upper, lower) colour pairs.
    pub fn identity(&self, index: usize) -> SpriteIdentity {
        let mut id = SpriteIdentity::random(
            format!("id{index:04}"),
            derive_seed(self.seed, index as u64),
        );
        let n = PALETTE.len();
        let mut outfits: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (0..n).filter(move |&l| l != u).map(move |l| (u, l)))
            .collect();
        outfits.shuffle(&mut rng(derive_seed(self.seed, u64::MAX)));
        (id.upper, id.lower) = outfits[index % outfits.len()];
        id
    }

    /// Renders one observation; `index` distinguishes frames of a sequence.
    pub fn render(&self, id: &SpriteIdentity, camera: usize, index: usize) -> Image {
        let seed = derive_seed(
            derive_seed_str(self.seed, &id.name),
            ((camera as u64) << 32) | index as u64,
        );
        render_sprite(self.shape, id, camera, seed, self.noise)
    }

    /// An image sequence of one identity from one camera.
    pub fn sequence(&self, id: &SpriteIdentity, camera: usize, len: usize) -> Vec<Image> {
        (0..len).map(|i| self.render(id, camera, i)).collect()
    }
}

pub fn render_sprite(
    shape: ImageShape,
    id: &SpriteIdentity,
    camera: usize,
    seed: u64,
    noise: f64,
) -> Image {
    let mut r = rng(seed);
    let (h, w) = (shape.height as f64, shape.width as f64);
    let scene = SCENES[camera % SCENES.len()].1;
    let walking = r.random_bool(0.5);
    let shift = r.random_range(-0.06..0.06) * w;
    let light: f32 = r.random_range(-0.08..0.08);

    let cx = w / 2.0 + shift;
    let half = layout::TORSO_HALF_WIDTH * w * id.build;
    let upper = PALETTE[id.upper].1;
    let lower = PALETTE[id.lower].1;

    let mut img = Image::zeros(shape);
    for y in 0..shape.height {
        let fy = (y as f64 + 0.5) / h;
        for x in 0..shape.width {
            let fx = x as f64 + 0.5;
            let dx = fx - cx;
            let mut color = scene;
            if fy >= layout::HEAD.0 && fy < layout::HEAD.1 && dx.abs() < half * 0.6 {
                color = SKIN;
            } else if fy >= layout::TORSO.0 && fy < layout::TORSO.1 && dx.abs() < half {
                color = upper;
            } else if fy >= layout::LEGS.0 && fy < layout::LEGS.1 && dx.abs() < half * 0.9 {
                // Walking opens a gap between the legs.
                let gap = if walking { half * 0.35 } else { 0.0 };
                if dx.abs() >= gap {
                    color = lower;
                }
            }
            if let Some(bag) = id.bag {
                let bx = fx / w;
                if fy >= layout::BAG_ROWS.0
                    && fy < layout::BAG_ROWS.1
                    && bx >= layout::BAG_COLS.0
                    && bx < layout::BAG_COLS.1
                {
                    color = PALETTE[bag].1;
                }
            }
            for c in 0..shape.channels {
                img.set(c, y, x, color[c % 3] + light);
            }
        }
    }
    let jitter = normal_vec(&mut r, shape.len());
    for (v, n) in img.data_mut().iter_mut().zip(jitter) {
        *v += (noise * n) as f32;
    }
    img.clamp_pixels();
    img
}

/// Nearest palette entry to an RGB triple.
pub fn nearest_color(rgb: &[f64]) -> (usize, f64) {
    nearest(&PALETTE, rgb)
}

pub fn nearest_scene(rgb: &[f64]) -> (usize, f64) {
    nearest(&SCENES, rgb)
}

fn nearest(table: &[(&str, [f32; 3])], rgb: &[f64]) -> (usize, f64) {
    table
        .iter()
        .enumerate()
        .map(|(i, (_, c))| {
            let d: f64 = (0..3)
                .map(|k| {
                    let v = rgb.get(k).or(rgb.first()).copied().unwrap_or(0.0);
                    (v - f64::from(c[k])).powi(2)
                })
                .sum();
            (i, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_are_deterministic_and_vary_by_frame() {
        let world = SpriteWorld::new(3);
        let id = world.identity(0);
        assert_eq!(world.render(&id, 0, 0), world.render(&id, 0, 0));
        assert_ne!(world.render(&id, 0, 0), world.render(&id, 0, 1));
        assert_eq!(world.identity(5), SpriteWorld::new(3).identity(5));
    }

    #[test]
    fn torso_carries_upper_colour() {
        let world = SpriteWorld::new(9);
        let id = world.identity(2);
        let img = world.render(&id, 1, 0);
        let s = img.shape();
        let mean = img.region_mean(
            (0.3 * s.height as f64) as usize,
            (0.45 * s.height as f64) as usize,
            s.width / 2 - 1,
            s.width / 2 + 1,
        );
        assert_eq!(nearest_color(&mean).0, id.upper);
    }

    #[test]
    fn first_identities_have_distinct_outfits() {
        let w = SpriteWorld::new(3);
        let mut seen: Vec<(usize, usize)> = (0..90).map(|i| {
            let id = w.identity(i);
            assert_ne!(id.upper, id.lower);
            (id.upper, id.lower)
        }).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 90);
    }

    #[test]
    fn pixels_stay_in_range() {
        let world = SpriteWorld::new(1).with_shape(ImageShape::new(3, 8, 8));
        let img = world.render(&world.identity(0), 3, 4);
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
