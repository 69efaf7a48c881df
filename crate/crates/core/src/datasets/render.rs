//! Procedural renderers for the built-in families.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Family, FactorSpec};
use crate::{Error, Result};

pub type Rgb = [u8; 3];

/// Pixels whose brightest channel exceeds this count as foreground when no
/// render mask is available (reconstructions, decoded hybrids).
pub const FOREGROUND_THRESHOLD: u8 = 64;

const GLYPH_SIZE: usize = 28;
const GLYPH_ASSET: &str = include_str!("../../assets/glyphs10.txt");

const GLYPH_PALETTE: [Rgb; 10] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [0, 255, 255],
    [255, 0, 255],
    [255, 255, 255],
    [128, 128, 255],
    [128, 255, 128],
    [255, 128, 128],
];

const SPRITE_PALETTE: [Rgb; 3] = [[255, 0, 0], [0, 255, 0], [0, 0, 255]];

const SCENE_OBJECT_PALETTE: [Rgb; 4] = [[230, 40, 40], [40, 200, 40], [40, 80, 230], [230, 210, 40]];
const SCENE_WALL_PALETTE: [Rgb; 4] = [[90, 70, 110], [70, 110, 110], [120, 100, 70], [100, 100, 100]];
const SCENE_FLOOR_PALETTE: [Rgb; 4] = [[60, 40, 30], [40, 60, 40], [50, 50, 80], [80, 60, 80]];

/// Rows `[0, SCENE_HORIZON)` are wall, the rest floor.
pub const SCENE_HORIZON: usize = 38;

fn glyph_templates() -> &'static [Vec<bool>] {
    static TEMPLATES: OnceLock<Vec<Vec<bool>>> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        let mut out = Vec::new();
        let mut current: Option<Vec<bool>> = None;
        for line in GLYPH_ASSET.lines() {
            if line.starts_with("glyph") {
                if let Some(t) = current.take() {
                    out.push(t);
                }
                current = Some(Vec::with_capacity(GLYPH_SIZE * GLYPH_SIZE));
            } else if let Some(t) = current.as_mut() {
                t.extend(line.chars().map(|c| c == '#'));
            }
        }
        out.extend(current);
        assert!(
            out.len() == 10 && out.iter().all(|t| t.len() == GLYPH_SIZE * GLYPH_SIZE),
            "malformed glyph asset"
        );
        out
    })
}

/// Palette indexed by the value of the `color` factor.
pub fn palette(spec: &FactorSpec) -> Vec<Rgb> {
    match spec.family {
        Family::Glyphs10 => permuted(&GLYPH_PALETTE, spec.palette_seed),
        Family::Sprites => permuted(&SPRITE_PALETTE, spec.palette_seed),
        Family::Scene => SCENE_OBJECT_PALETTE.to_vec(),
        Family::External => Vec::new(),
    }
}

fn permuted(base: &[Rgb], seed: u64) -> Vec<Rgb> {
    let mut out = base.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.shuffle(&mut rng);
    out
}

pub fn nearest_palette(palette: &[Rgb], rgb: [f64; 3]) -> usize {
    let dist = |p: &Rgb| -> f64 { (0..3).map(|c| (p[c] as f64 - rgb[c]).powi(2)).sum() };
    palette
        .iter()
        .enumerate()
        .min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Nearest palette entry of the mean foreground pixel, or `None` when the
/// image has no foreground. Foreground is every pixel whose brightest channel
/// exceeds [`FOREGROUND_THRESHOLD`]; only meaningful on black-background
/// families.
pub fn palette_oracle(spec: &FactorSpec, image: &[u8]) -> Option<usize> {
    let c = spec.channels();
    let mut sum = [0f64; 3];
    let mut count = 0usize;
    for px in image.chunks_exact(c) {
        if px.iter().copied().max().unwrap_or(0) > FOREGROUND_THRESHOLD {
            for k in 0..3 {
                sum[k] += px[k] as f64;
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let mean = sum.map(|s| s / count as f64);
    Some(nearest_palette(&palette(spec), mean))
}

/// A rendered image plus the mask of its foreground (object) pixels.
pub struct Rendered {
    pub pixels: Vec<u8>,
    pub mask: Vec<bool>,
}

pub fn render_sample(spec: &FactorSpec, values: &[usize], seed: u64) -> Result<Vec<u8>> {
    Ok(render_with_mask(spec, values, seed)?.pixels)
}

pub fn render_with_mask(spec: &FactorSpec, values: &[usize], seed: u64) -> Result<Rendered> {
    if values.len() != spec.factors.len() {
        return Err(Error::invalid(format!(
            "expected {} factor values, got {}",
            spec.factors.len(),
            values.len()
        )));
    }
    for (f, &v) in spec.factors.iter().zip(values) {
        if v >= f.cardinality {
            return Err(Error::invalid(format!(
                "factor `{}` value {v} out of range 0..{}",
                f.name, f.cardinality
            )));
        }
    }
    let get = |name: &str| spec.index_of(name).map(|i| values[i]).unwrap_or(0);
    match spec.family {
        Family::Glyphs10 => Ok(render_glyph(spec, get("shape"), get("color"), seed)),
        Family::Sprites => Ok(render_sprite(
            spec,
            get("shape"),
            get("color"),
            get("x"),
            get("y"),
            get("scale"),
        )),
        Family::Scene => Ok(render_scene(
            spec,
            get("shape"),
            get("color"),
            get("wall"),
            get("floor"),
            get("scale"),
        )),
        Family::External => Err(Error::invalid(
            "family `external` has no renderer; import pre-rendered data instead",
        )),
    }
}

fn render_glyph(spec: &FactorSpec, shape: usize, color: usize, seed: u64) -> Rendered {
    let (h, w, c) = spec.image_dims;
    let template = &glyph_templates()[shape];
    let rgb = palette(spec)[color];
    let (dx, dy) = if spec.jitter > 0 {
        let j = spec.jitter as i64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (rng.random_range(-j..=j), rng.random_range(-j..=j))
    } else {
        (0, 0)
    };
    let mut pixels = vec![0u8; h * w * c];
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = y as i64 - dy;
            let sx = x as i64 - dx;
            if sy < 0 || sx < 0 || sy >= GLYPH_SIZE as i64 || sx >= GLYPH_SIZE as i64 {
                continue;
            }
            if template[sy as usize * GLYPH_SIZE + sx as usize] {
                let p = y * w + x;
                mask[p] = true;
                pixels[p * c..p * c + 3].copy_from_slice(&rgb);
            }
        }
    }
    Rendered { pixels, mask }
}

fn sprite_inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx.abs() <= r && dy.abs() <= r,
        1 => (dx / r).powi(2) + (dy / (0.6 * r)).powi(2) <= 1.0,
        _ => {
            let u = dx / r * 1.25;
            let v = -dy / r * 1.25 + 0.2;
            (u * u + v * v - 1.0).powi(3) - u * u * v.powi(3) <= 0.0
        }
    }
}

fn render_sprite(
    spec: &FactorSpec,
    shape: usize,
    color: usize,
    xi: usize,
    yi: usize,
    scale: usize,
) -> Rendered {
    let (h, w, c) = spec.image_dims;
    let rgb = palette(spec)[color];
    let cx = 12.0 + xi as f64 * 40.0 / 7.0;
    let cy = 12.0 + yi as f64 * 40.0 / 7.0;
    let r = 5.0 + 2.0 * scale as f64;
    let mut pixels = vec![0u8; h * w * c];
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if sprite_inside(shape, dx, dy, r) {
                let p = y * w + x;
                mask[p] = true;
                pixels[p * c..p * c + 3].copy_from_slice(&rgb);
            }
        }
    }
    Rendered { pixels, mask }
}

fn scene_inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        // cube
        0 => dx.abs() <= r && dy.abs() <= r,
        // cylinder: tall narrow body
        1 => dx.abs() <= 0.7 * r && dy.abs() <= 1.2 * r,
        // sphere
        2 => dx * dx + dy * dy <= r * r,
        // capsule: horizontal pill
        _ => {
            let half = 0.6 * r;
            let core = (dx.abs() - 0.6 * r).max(0.0);
            core * core + dy * dy <= half * half
        }
    }
}

fn scene_half_height(shape: usize, r: f64) -> f64 {
    match shape {
        1 => 1.2 * r,
        3 => 0.6 * r,
        _ => r,
    }
}

fn render_scene(
    spec: &FactorSpec,
    shape: usize,
    color: usize,
    wall: usize,
    floor: usize,
    scale: usize,
) -> Rendered {
    let (h, w, c) = spec.image_dims;
    let obj = SCENE_OBJECT_PALETTE[color];
    let r = 6.0 + 2.0 * scale as f64;
    let cx = w as f64 / 2.0;
    let cy = 54.0 - scene_half_height(shape, r);
    let mut pixels = vec![0u8; h * w * c];
    let mut mask = vec![false; h * w];
    for y in 0..h {
        let band = if y < SCENE_HORIZON { SCENE_WALL_PALETTE[wall] } else { SCENE_FLOOR_PALETTE[floor] };
        for x in 0..w {
            let p = y * w + x;
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let rgb = if scene_inside(shape, dx, dy, r) {
                mask[p] = true;
                obj
            } else {
                band
            };
            pixels[p * c..p * c + 3].copy_from_slice(&rgb);
        }
    }
    Rendered { pixels, mask }
}

/// Pixels that no object of the scene family can ever cover, for any shape
/// or scale. Used to check that target-block traversals leave the
/// background untouched.
pub fn scene_background_mask(spec: &FactorSpec) -> Vec<bool> {
    let (h, w, _) = spec.image_dims;
    let mut covered = vec![false; h * w];
    for shape in 0..4 {
        for scale in 0..4 {
            let r = 6.0 + 2.0 * scale as f64;
            let cx = w as f64 / 2.0;
            let cy = 54.0 - scene_half_height(shape, r);
            for y in 0..h {
                for x in 0..w {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    // one pixel of margin against decoder blur at the object edge
                    let grown = (-1..=1).any(|ey| {
                        (-1..=1).any(|ex| scene_inside(shape, dx + ex as f64, dy + ey as f64, r))
                    });
                    if grown {
                        covered[y * w + x] = true;
                    }
                }
            }
        }
    }
    covered.into_iter().map(|c| !c).collect()
}
