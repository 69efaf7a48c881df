//! Qualitative artifacts: reconstruction grids, cross-product hybrids and
//! latent traversals, written as PNG tile grids with a JSON sidecar.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::model::VaeModel;
use crate::{Error, Result};

/// Traversal values in prior-σ units: −3 to 3 in 7 steps.
pub const TRAVERSAL_VALUES: [f64; 7] = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];

/// A rows × cols arrangement of equally sized HWC u8 tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub tile: (usize, usize, usize),
    /// Row-major tiles, `None` for a blank cell.
    pub tiles: Vec<Option<Vec<u8>>>,
}

impl TileGrid {
    pub fn new(rows: usize, cols: usize, tile: (usize, usize, usize)) -> Self {
        TileGrid { rows, cols, tile, tiles: vec![None; rows * cols] }
    }

    pub fn set(&mut self, r: usize, c: usize, pixels: Vec<u8>) {
        let (h, w, ch) = self.tile;
        assert_eq!(pixels.len(), h * w * ch, "tile size");
        self.tiles[r * self.cols + c] = Some(pixels);
    }

    pub fn get(&self, r: usize, c: usize) -> Option<&[u8]> {
        self.tiles[r * self.cols + c].as_deref()
    }

    /// RGB image with a 1-pixel gray separator between tiles.
    pub fn to_rgb(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let (h, w, ch) = self.tile;
        let width = (self.cols * (w + 1) + 1) as u32;
        let height = (self.rows * (h + 1) + 1) as u32;
        let mut img = ImageBuffer::from_pixel(width, height, Rgb([96u8, 96, 96]));
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (x0, y0) = (c * (w + 1) + 1, r * (h + 1) + 1);
                for y in 0..h {
                    for x in 0..w {
                        let px = match self.get(r, c) {
                            Some(t) => {
                                let p = &t[(y * w + x) * ch..(y * w + x + 1) * ch];
                                if ch == 1 { [p[0]; 3] } else { [p[0], p[1], p[2]] }
                            }
                            None => [255, 255, 255],
                        };
                        img.put_pixel((x0 + x) as u32, (y0 + y) as u32, Rgb(px));
                    }
                }
            }
        }
        img
    }
}

/// How each grid cell was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub kind: String,
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<CellInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellInfo {
    pub row: usize,
    pub col: usize,
    pub description: String,
}

/// Writes `<stem>.png` and `<stem>.json` into `dir`.
pub fn write_grid(dir: &Path, stem: &str, grid: &TileGrid, sidecar: &Sidecar) -> Result<()> {
    fs::create_dir_all(dir)?;
    grid.to_rgb().save(dir.join(format!("{stem}.png")))?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(sidecar)?)?;
    Ok(())
}

fn gather(data: &Dataset, idx: &[usize]) -> Vec<u8> {
    idx.iter().flat_map(|&i| data.image(i).iter().copied()).collect()
}

fn split_tiles(bytes: Vec<u8>, per: usize) -> Vec<Vec<u8>> {
    bytes.chunks_exact(per).map(|c| c.to_vec()).collect()
}

/// Decoded posterior means of byte images.
pub fn reconstruct(model: &VaeModel, images: &[u8], n: usize) -> Result<Vec<Vec<u8>>> {
    let z = model.posterior_means(images, n)?;
    Ok(split_tiles(model.decode_to_bytes(&z)?, model.arch.pixels()))
}

/// Two rows: originals on top, their reconstructions below.
pub fn reconstruction_grid(model: &VaeModel, data: &Dataset, idx: &[usize]) -> Result<(TileGrid, Sidecar)> {
    if idx.is_empty() {
        return Err(Error::invalid("reconstruction grid needs at least one image"));
    }
    let recon = reconstruct(model, &gather(data, idx), idx.len())?;
    let mut grid = TileGrid::new(2, idx.len(), data.spec.image_dims);
    let mut cells = Vec::new();
    for (c, (&i, r)) in idx.iter().zip(recon).enumerate() {
        grid.set(0, c, data.image(i).to_vec());
        grid.set(1, c, r);
        cells.push(CellInfo { row: 0, col: c, description: format!("original #{i}") });
        cells.push(CellInfo { row: 1, col: c, description: format!("reconstruction of #{i}") });
    }
    Ok((grid, Sidecar { kind: "reconstruction".into(), rows: 2, cols: idx.len(), cells }))
}

/// Code with `factor_a`'s block from `za`, `factor_b`'s block from `zb`, and
/// every other dim (other blocks and nuisance) the mean of the two.
pub fn hybrid_code(model: &VaeModel, za: &[f64], zb: &[f64], factor_a: &str, factor_b: &str) -> Result<Vec<f64>> {
    let p = &model.partition;
    let ra = p.block(factor_a)?.range();
    let rb = p.block(factor_b)?.range();
    Ok((0..p.total_dims)
        .map(|d| {
            if ra.contains(&d) {
                za[d]
            } else if rb.contains(&d) {
                zb[d]
            } else {
                0.5 * (za[d] + zb[d])
            }
        })
        .collect())
}

/// Decodes the hybrid of `a` (supplying `factor_a`) and `b` (supplying `factor_b`).
pub fn hybridize(model: &VaeModel, a: &[u8], b: &[u8], factor_a: &str, factor_b: &str) -> Result<Vec<u8>> {
    let mut both = a.to_vec();
    both.extend_from_slice(b);
    let z = model.posterior_means(&both, 2)?;
    let code = hybrid_code(model, &z[0], &z[1], factor_a, factor_b)?;
    model.decode_to_bytes(&[code])
}

/// Cross-product grid. Row 0 holds the `factor_a` sources, column 0 the
/// `factor_b` sources; cell (i+1, j+1) combines `factor_a` of source j with
/// `factor_b` of source i.
pub fn cross_product_grid(
    model: &VaeModel,
    data: &Dataset,
    a_sources: &[usize],
    b_sources: &[usize],
    factor_a: &str,
    factor_b: &str,
) -> Result<(TileGrid, Sidecar)> {
    let mut idx = a_sources.to_vec();
    idx.extend_from_slice(b_sources);
    let z = model.posterior_means(&gather(data, &idx), idx.len())?;
    let (za, zb) = z.split_at(a_sources.len());
    let mut codes = Vec::new();
    for b in zb {
        for a in za {
            codes.push(hybrid_code(model, a, b, factor_a, factor_b)?);
        }
    }
    let hybrids = split_tiles(model.decode_to_bytes(&codes)?, model.arch.pixels());
    let (rows, cols) = (b_sources.len() + 1, a_sources.len() + 1);
    let mut grid = TileGrid::new(rows, cols, data.spec.image_dims);
    let mut cells = Vec::new();
    for (j, &s) in a_sources.iter().enumerate() {
        grid.set(0, j + 1, data.image(s).to_vec());
        cells.push(CellInfo { row: 0, col: j + 1, description: format!("{factor_a} source #{s}") });
    }
    for (i, &s) in b_sources.iter().enumerate() {
        grid.set(i + 1, 0, data.image(s).to_vec());
        cells.push(CellInfo { row: i + 1, col: 0, description: format!("{factor_b} source #{s}") });
    }
    for (k, h) in hybrids.into_iter().enumerate() {
        let (i, j) = (k / a_sources.len(), k % a_sources.len());
        grid.set(i + 1, j + 1, h);
        cells.push(CellInfo {
            row: i + 1,
            col: j + 1,
            description: format!(
                "{factor_a} block of #{}, {factor_b} block of #{}, remaining dims averaged",
                a_sources[j], b_sources[i]
            ),
        });
    }
    Ok((grid, Sidecar { kind: "cross_product".into(), rows, cols, cells }))
}

/// Decodes the posterior mean of `image` with `dim` overwritten by each value.
pub fn traverse(model: &VaeModel, image: &[u8], dim: usize, values: &[f64]) -> Result<Vec<Vec<u8>>> {
    if dim >= model.latent_dims() {
        return Err(Error::invalid(format!("dim {dim} out of range for {} latent dims", model.latent_dims())));
    }
    let z = model.posterior_means(image, 1)?.remove(0);
    let codes: Vec<Vec<f64>> = values
        .iter()
        .map(|&v| {
            let mut c = z.clone();
            c[dim] = v;
            c
        })
        .collect();
    Ok(split_tiles(model.decode_to_bytes(&codes)?, model.arch.pixels()))
}

/// One row per dim, one column per value.
pub fn traversal_grid(model: &VaeModel, data: &Dataset, seed_idx: usize, dims: &[usize], values: &[f64]) -> Result<(TileGrid, Sidecar)> {
    let mut grid = TileGrid::new(dims.len(), values.len(), data.spec.image_dims);
    let mut cells = Vec::new();
    for (r, &d) in dims.iter().enumerate() {
        for (c, img) in traverse(model, data.image(seed_idx), d, values)?.into_iter().enumerate() {
            grid.set(r, c, img);
            cells.push(CellInfo { row: r, col: c, description: format!("#{seed_idx} with z[{d}] = {}", values[c]) });
        }
    }
    Ok((grid, Sidecar { kind: "traversal".into(), rows: dims.len(), cols: values.len(), cells }))
}

/// First row index holding each value of `factor`, or an error if one is missing.
pub fn first_of_each_value(data: &Dataset, factor: &str) -> Result<Vec<usize>> {
    let k = data.spec.require_index(factor)?;
    let card = data.spec.factors[k].cardinality;
    (0..card)
        .map(|v| {
            (0..data.len())
                .find(|&n| data.factor_value(n, k) == v)
                .ok_or_else(|| Error::invalid(format!("no sample with {factor} = {v}")))
        })
        .collect()
}
