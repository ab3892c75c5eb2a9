use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{io_err, mask_to_image, DatasetError, Split};

/// Directory names of the fixture classes; class `k` draws regular polygons
/// with `k + 3` vertices. Classes past the list are named `class-<k>`.
pub const FIXTURE_CLASS_NAMES: [&str; 6] = [
    "sand-flounder",
    "leaf-katydid",
    "stone-crab",
    "bark-moth",
    "reef-octopus",
    "snow-hare",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub size: u32,
    pub seed: u64,
}

fn class_dir(k: usize) -> String {
    FIXTURE_CLASS_NAMES
        .get(k)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class-{k}"))
}

/// Smooth texture from a handful of random plane waves per channel plus
/// pixel noise.
struct Texture {
    waves: Vec<[(f64, f64, f64, f64); 3]>,
    base: [f64; 3],
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let waves = (0..4)
            .map(|_| {
                std::array::from_fn(|_| {
                    let freq = rng.random_range(2.0..6.0) * 2.0 * PI / size;
                    let angle = rng.random_range(0.0..PI);
                    (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(8.0..18.0))
                })
            })
            .collect();
        let base = std::array::from_fn(|_| rng.random_range(70.0..170.0));
        Self { waves, base }
    }

    fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        self.base[c]
            + self
                .waves
                .iter()
                .map(|w| {
                    let (fx, fy, phase, amp) = w[c];
                    amp * (fx * x + fy * y + phase).sin()
                })
                .sum::<f64>()
    }
}

struct Polygon {
    cx: f64,
    cy: f64,
    radius: f64,
    rotation: f64,
    vertices: usize,
}

impl Polygon {
    /// Point-in-convex-polygon test at a pixel centre.
    fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.vertices;
        let corner = |i: usize| {
            let a = self.rotation + 2.0 * PI * i as f64 / n as f64;
            (self.cx + self.radius * a.cos(), self.cy + self.radius * a.sin())
        };
        (0..n).all(|i| {
            let (x0, y0) = corner(i);
            let (x1, y1) = corner((i + 1) % n);
            (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
        })
    }
}

fn render(rng: &mut ChaCha8Rng, size: u32, vertices: usize, n_objects: usize) -> (RgbImage, Array2<bool>) {
    let s = size as f64;
    let background = Texture::new(rng, s);
    let foreground = Texture::new(rng, s);
    let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-30.0..30.0));
    let polys: Vec<Polygon> = (0..n_objects)
        .map(|i| {
            // Several objects sit in separate vertical bands.
            let band = s / n_objects as f64;
            let radius = (rng.random_range(0.16..0.24) * s).min(band / 2.0 - 2.0);
            let (lo, hi) = (i as f64 * band + radius + 1.0, (i + 1) as f64 * band - radius - 1.0);
            Polygon {
                cx: rng.random_range(lo..=hi),
                cy: rng.random_range(radius + 1.0..=s - radius - 1.0),
                radius,
                rotation: rng.random_range(0.0..2.0 * PI),
                vertices,
            }
        })
        .collect();

    let mut mask = Array2::from_elem((size as usize, size as usize), false);
    let mut photo = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = polys.iter().any(|p| p.contains(fx, fy));
            mask[(y as usize, x as usize)] = inside;
            let px = std::array::from_fn(|c| {
                let v = if inside {
                    0.5 * (foreground.sample(fx, fy, c) + background.sample(fx, fy, c)) + shift[c]
                } else {
                    background.sample(fx, fy, c)
                };
                (v + rng.random_range(-6.0..6.0)).round().clamp(0.0, 255.0) as u8
            });
            photo.put_pixel(x, y, Rgb(px));
        }
    }
    (photo, mask)
}

fn write_split(root: &Path, split: Split, cfg: &FixtureConfig, rng: &mut ChaCha8Rng) -> Result<(), DatasetError> {
    for k in 0..cfg.n_classes {
        let dir = class_dir(k);
        let images = root.join(split.as_str()).join("images").join(&dir);
        let masks = root.join(split.as_str()).join("masks").join(&dir);
        fs::create_dir_all(&images).map_err(io_err(&images))?;
        fs::create_dir_all(&masks).map_err(io_err(&masks))?;
        for i in 0..cfg.n_per_class {
            let n_objects = if i % 3 == 2 { 2 } else { 1 };
            let (photo, mask) = render(rng, cfg.size, k + 3, n_objects);
            let id = format!("{dir}-{}-{i:03}", split.as_str());
            let image_path = images.join(format!("{id}.png"));
            photo.save(&image_path).map_err(|source| DatasetError::Image {
                path: image_path.clone(),
                source,
            })?;
            let mask_path = masks.join(format!("{id}.png"));
            mask_to_image(&mask).save(&mask_path).map_err(|source| DatasetError::Image {
                path: mask_path.clone(),
                source,
            })?;
        }
    }
    Ok(())
}

/// Writes `train` and `test` splits of textured photos with low-contrast
/// polygons and their exact masks. Output depends only on the config.
pub fn make_synthetic_fixture(out: &Path, cfg: &FixtureConfig) -> Result<PathBuf, DatasetError> {
    if cfg.size < 32 {
        return Err(DatasetError::Invalid {
            path: out.to_path_buf(),
            msg: format!("fixture size must be at least 32, got {}", cfg.size),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for split in [Split::Train, Split::Test] {
        write_split(out, split, cfg, &mut rng)?;
    }
    Ok(out.to_path_buf())
}
