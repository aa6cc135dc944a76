//! Cross-attention bundles at the 16x16 working resolution and the edit
//! region masks they are measured against.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::Timestep;

/// Side length of the attention working resolution.
pub const ATTN_RES: usize = 16;
pub const ATTN_CELLS: usize = ATTN_RES * ATTN_RES;

/// One token's spatial attention map, row-major `ATTN_RES x ATTN_RES`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMap(Vec<f64>);

impl AttnMap {
    pub fn zeros() -> Self {
        Self(vec![0.0; ATTN_CELLS])
    }

    pub fn filled(v: f64) -> Self {
        Self(vec![v; ATTN_CELLS])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.len() != ATTN_CELLS {
            return Err(Error::contract(format!(
                "attention map needs {ATTN_CELLS} cells, got {}",
                values.len()
            )));
        }
        Ok(Self(values))
    }

    pub fn from_fn(f: impl Fn(usize, usize) -> f64) -> Self {
        Self(
            (0..ATTN_CELLS)
                .map(|i| f(i / ATTN_RES, i % ATTN_RES))
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn scaled(&self, k: f64) -> AttnMap {
        AttnMap(self.0.iter().map(|v| v * k).collect())
    }

    /// Mean over the cells set in `mask`.
    pub fn masked_mean(&self, mask: &BinaryRaster) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for (v, &m) in self.0.iter().zip(mask.cells()) {
            if m {
                s += v;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Reconstruction,
    Editing,
    AuxiliaryNegative,
}

/// Per-token maps indexed by prompt position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBundle {
    pub maps: Vec<AttnMap>,
    pub branch: Branch,
    pub timestep: Timestep,
    pub layer_count: usize,
    pub head_count: usize,
}

impl AttentionBundle {
    pub fn map(&self, position: usize) -> Result<&AttnMap> {
        self.maps
            .get(position)
            .ok_or_else(|| Error::contract(format!("no attention map for position {position}")))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Sum over tokens at each spatial cell.
    pub fn cell_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; ATTN_CELLS];
        for m in &self.maps {
            for (s, v) in sums.iter_mut().zip(m.as_slice()) {
                *s += v;
            }
        }
        sums
    }

    pub fn is_nonnegative(&self) -> bool {
        self.maps
            .iter()
            .all(|m| m.as_slice().iter().all(|&v| v >= 0.0))
    }

    /// Largest deviation of a per-cell token sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.cell_sums()
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Raw attention probabilities from one layer: `heads[h][token]` is a
/// `height x width` map.
#[derive(Debug, Clone, PartialEq)]
pub struct RawLayerAttention {
    pub height: usize,
    pub width: usize,
    pub heads: Vec<Vec<Vec<f64>>>,
}

/// Averages post-softmax maps over heads, then over layers.
pub fn aggregate(
    layers: &[RawLayerAttention],
    branch: Branch,
    timestep: Timestep,
) -> Result<AttentionBundle> {
    let first = layers
        .first()
        .ok_or_else(|| Error::contract("aggregate needs at least one layer"))?;
    let tokens = first
        .heads
        .first()
        .map(|h| h.len())
        .ok_or_else(|| Error::contract("layer without heads"))?;
    let mut acc = vec![AttnMap::zeros(); tokens];
    let head_count = first.heads.len();
    for (li, layer) in layers.iter().enumerate() {
        if layer.height != ATTN_RES || layer.width != ATTN_RES {
            return Err(Error::contract(format!(
                "layer {li} is {}x{}, expected {ATTN_RES}x{ATTN_RES}",
                layer.height, layer.width
            )));
        }
        if layer.heads.is_empty() {
            return Err(Error::contract(format!("layer {li} has no heads")));
        }
        let inv_heads = 1.0 / layer.heads.len() as f64;
        let mut layer_mean = vec![AttnMap::zeros(); tokens];
        for head in &layer.heads {
            if head.len() != tokens {
                return Err(Error::contract(format!(
                    "layer {li} head has {} tokens, expected {tokens}",
                    head.len()
                )));
            }
            for (dst, src) in layer_mean.iter_mut().zip(head) {
                if src.len() != ATTN_CELLS {
                    return Err(Error::contract("head map has wrong cell count"));
                }
                for (d, s) in dst.as_mut_slice().iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for (dst, src) in acc.iter_mut().zip(&layer_mean) {
            for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                *d += s * inv_heads;
            }
        }
    }
    let inv_layers = 1.0 / layers.len() as f64;
    if layers.len() > 1 {
        for m in &mut acc {
            for v in m.as_mut_slice() {
                *v *= inv_layers;
            }
        }
    }
    Ok(AttentionBundle {
        maps: acc,
        branch,
        timestep,
        layer_count: layers.len(),
        head_count,
    })
}

/// Mixes maps: common target positions take the reconstruction map of their
/// aligned source position, `own` positions keep the editing map.
pub fn inject_with(
    recon: &AttentionBundle,
    edit: &AttentionBundle,
    common: &[(usize, usize)],
    own: &[usize],
) -> Result<AttentionBundle> {
    let len = edit.len();
    let mut slots: Vec<Option<AttnMap>> = vec![None; len];
    for &(s, t) in common {
        let slot = slots
            .get_mut(t)
            .ok_or_else(|| Error::contract(format!("common target position {t} out of range")))?;
        *slot = Some(recon.map(s)?.clone());
    }
    for &p in own {
        let slot = slots
            .get_mut(p)
            .ok_or_else(|| Error::contract(format!("new target position {p} out of range")))?;
        *slot = Some(edit.map(p)?.clone());
    }
    let maps = slots
        .into_iter()
        .enumerate()
        .map(|(p, m)| {
            m.ok_or_else(|| {
                Error::contract(format!("target position {p} is neither common nor new"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionBundle {
        maps,
        branch: edit.branch,
        timestep: edit.timestep,
        layer_count: edit.layer_count,
        head_count: edit.head_count,
    })
}

pub fn inject(
    recon: &AttentionBundle,
    edit: &AttentionBundle,
    pair: &crate::prompts::PromptPair,
) -> Result<AttentionBundle> {
    inject_with(recon, edit, &pair.common, &pair.new_target)
}

/// Scales one token's map; no renormalization.
pub fn reweight(bundle: &AttentionBundle, position: usize, scale: f64) -> Result<AttentionBundle> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::contract(format!("reweight scale must be > 0, got {scale}")));
    }
    let mut out = bundle.clone();
    let map = out
        .maps
        .get_mut(position)
        .ok_or_else(|| Error::contract(format!("reweight: unknown position {position}")))?;
    *map = map.scaled(scale);
    Ok(out)
}

/// Binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryRaster {
    width: usize,
    height: usize,
    cells: Vec<bool>,
}

impl BinaryRaster {
    pub fn new(width: usize, height: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != width * height || width == 0 || height == 0 {
            return Err(Error::contract(format!(
                "raster {width}x{height} with {} cells",
                cells.len()
            )));
        }
        Ok(Self {
            width,
            height,
            cells,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let cells = (0..width * height).map(|i| f(i % width, i / width)).collect();
        Self {
            width,
            height,
            cells,
        }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self::from_fn(width, height, |_, _| value)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn union(&self, other: &BinaryRaster) -> Result<BinaryRaster> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::contract("raster union of different sizes"));
        }
        Ok(BinaryRaster {
            width: self.width,
            height: self.height,
            cells: self.cells.iter().zip(&other.cells).map(|(a, b)| a | b).collect(),
        })
    }

    pub fn flip_horizontal(&self) -> BinaryRaster {
        BinaryRaster::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    /// Tight bounding box `(x0, y0, x1, y1)` with exclusive upper bounds.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bb
    }

    /// Reads a mask PNG. Pixels are converted to 8-bit luma; `>= 128` is inside.
    pub fn load_png(path: &Path) -> Result<BinaryRaster> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let cells = img.pixels().map(|p| p.0[0] >= 128).collect();
        BinaryRaster::new(w as usize, h as usize, cells)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        });
        img.save(path)?;
        Ok(())
    }

    /// Binary PGM (`P5`), 0 outside and 255 inside.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.cells.iter().map(|&c| if c { 255 } else { 0 }).collect();
        f.write_all(&bytes)?;
        Ok(())
    }
}

/// Max-pool reduction: an output cell is set iff any covered input pixel is.
pub fn downsample_mask(
    mask: &BinaryRaster,
    target_height: usize,
    target_width: usize,
) -> Result<BinaryRaster> {
    if target_height == 0
        || target_width == 0
        || target_height > mask.height
        || target_width > mask.width
    {
        return Err(Error::contract(format!(
            "cannot reduce {}x{} mask to {target_width}x{target_height}",
            mask.width, mask.height
        )));
    }
    let (sw, sh) = (mask.width, mask.height);
    Ok(BinaryRaster::from_fn(target_width, target_height, |ox, oy| {
        let x0 = ox * sw / target_width;
        let x1 = ((ox + 1) * sw).div_ceil(target_width);
        let y0 = oy * sh / target_height;
        let y1 = ((oy + 1) * sh).div_ceil(target_height);
        (y0..y1).any(|y| (x0..x1).any(|x| mask.get(x, y)))
    }))
}

/// The edit region at image, attention and latent resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditMask {
    pub image: BinaryRaster,
    pub attn: BinaryRaster,
    pub latent: BinaryRaster,
    pub area: usize,
}

impl EditMask {
    pub fn from_image(
        image: BinaryRaster,
        latent_height: usize,
        latent_width: usize,
    ) -> Result<EditMask> {
        let attn = downsample_mask(&image, ATTN_RES, ATTN_RES)?;
        let latent = downsample_mask(&image, latent_height, latent_width)?;
        let area = attn.count();
        if area == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(EditMask {
            image,
            attn,
            latent,
            area,
        })
    }

    pub fn union(&self, other: &EditMask) -> Result<EditMask> {
        let image = self.image.union(&other.image)?;
        let attn = self.attn.union(&other.attn)?;
        let latent = self.latent.union(&other.latent)?;
        let area = attn.count();
        Ok(EditMask {
            image,
            attn,
            latent,
            area,
        })
    }

    pub fn flip_horizontal(&self) -> EditMask {
        EditMask {
            image: self.image.flip_horizontal(),
            attn: self.attn.flip_horizontal(),
            latent: self.latent.flip_horizontal(),
            area: self.area,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(maps: Vec<AttnMap>) -> RawLayerAttention {
        RawLayerAttention {
            height: ATTN_RES,
            width: ATTN_RES,
            heads: vec![maps.into_iter().map(|m| m.0).collect()],
        }
    }

    #[test]
    fn aggregate_single_layer_single_head_is_identity() {
        let m = AttnMap::from_fn(|y, x| (y * 16 + x) as f64 / 256.0);
        let b = aggregate(&[single(vec![m.clone()])], Branch::Editing, 5).unwrap();
        assert_eq!(b.maps, vec![m]);
        assert_eq!((b.layer_count, b.head_count), (1, 1));
    }

    #[test]
    fn aggregate_means_heads() {
        let m = AttnMap::from_fn(|y, x| ((y + x) % 3) as f64 * 0.1);
        let layer = RawLayerAttention {
            height: 16,
            width: 16,
            heads: vec![vec![m.0.clone()], vec![m.scaled(3.0).0]],
        };
        let b = aggregate(&[layer], Branch::Editing, 0).unwrap();
        for (a, e) in b.maps[0].as_slice().iter().zip(m.scaled(2.0).as_slice()) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregate_uniform_layers_keep_row_sums() {
        let k = 4;
        let layer = single(vec![AttnMap::filled(1.0 / k as f64); k]);
        let b = aggregate(&[layer.clone(), layer.clone(), layer], Branch::Reconstruction, 0).unwrap();
        assert!(b.max_row_sum_error() < 1e-12);
        assert!(b.maps.iter().all(|m| m.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15)));
    }

    #[test]
    fn aggregate_rejects_empty_and_wrong_resolution() {
        assert!(aggregate(&[], Branch::Editing, 0).is_err());
        let bad = RawLayerAttention {
            height: 32,
            width: 32,
            heads: vec![vec![vec![0.0; 1024]]],
        };
        assert!(aggregate(&[bad], Branch::Editing, 0).is_err());
    }

    fn bundle(values: &[f64], branch: Branch) -> AttentionBundle {
        AttentionBundle {
            maps: values.iter().map(|&v| AttnMap::filled(v)).collect(),
            branch,
            timestep: 0,
            layer_count: 1,
            head_count: 1,
        }
    }

    #[test]
    fn inject_mixes_common_and_new() {
        let recon = bundle(&[0.7], Branch::Reconstruction);
        let edit = bundle(&[0.8, 0.2], Branch::Editing);
        let mixed = inject_with(&recon, &edit, &[(0, 0)], &[1]).unwrap();
        assert_eq!(mixed.maps[0], AttnMap::filled(0.7));
        assert_eq!(mixed.maps[1], AttnMap::filled(0.2));
    }

    #[test]
    fn inject_degenerate_branches() {
        let recon = bundle(&[0.1, 0.9], Branch::Reconstruction);
        let edit = bundle(&[0.4, 0.6], Branch::Editing);
        let all_common = inject_with(&recon, &edit, &[(1, 0), (0, 1)], &[]).unwrap();
        assert_eq!(all_common.maps, vec![recon.maps[1].clone(), recon.maps[0].clone()]);
        let all_new = inject_with(&recon, &edit, &[], &[0, 1]).unwrap();
        assert_eq!(all_new.maps, edit.maps);
    }

    #[test]
    fn inject_rejects_uncovered_positions() {
        let recon = bundle(&[0.5], Branch::Reconstruction);
        let edit = bundle(&[0.5, 0.5], Branch::Editing);
        assert!(inject_with(&recon, &edit, &[(0, 0)], &[]).is_err());
    }

    #[test]
    fn inject_is_idempotent() {
        let recon = bundle(&[0.3, 0.7], Branch::Reconstruction);
        let edit = bundle(&[0.1, 0.5, 0.4], Branch::Editing);
        let common = [(0, 0), (1, 2)];
        let once = inject_with(&recon, &edit, &common, &[1]).unwrap();
        let twice = inject_with(&recon, &once, &common, &[1]).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn reweight_scales_one_map() {
        let b = bundle(&[0.1, 0.4], Branch::Editing);
        assert_eq!(reweight(&b, 0, 1.0).unwrap(), b);
        let r = reweight(&b, 0, 2.0).unwrap();
        assert_eq!(r.maps[0], AttnMap::filled(0.2));
        assert_eq!(r.maps[1], b.maps[1]);
        let back = reweight(&reweight(&b, 1, 0.5).unwrap(), 1, 2.0).unwrap();
        assert_eq!(back, b);
        assert!(reweight(&b, 2, 2.0).is_err());
        assert!(reweight(&b, 0, 0.0).is_err());
    }

    #[test]
    fn downsample_examples() {
        let ones = BinaryRaster::filled(64, 64, true);
        assert_eq!(downsample_mask(&ones, 16, 16).unwrap().count(), 256);
        assert_eq!(downsample_mask(&ones, 7, 5).unwrap().count(), 35);

        let point = BinaryRaster::from_fn(512, 512, |x, y| x == 300 && y == 17);
        let d = downsample_mask(&point, 16, 16).unwrap();
        assert_eq!(d.count(), 1);
        assert!(d.get(300 / 32, 0));

        let checker = BinaryRaster::from_fn(32, 32, |x, y| (x + y) % 2 == 0);
        assert_eq!(downsample_mask(&checker, 16, 16).unwrap().count(), 256);
    }

    #[test]
    fn empty_mask_is_rejected_by_edit_mask() {
        let zero = BinaryRaster::filled(32, 32, false);
        assert!(matches!(EditMask::from_image(zero, 16, 16), Err(Error::EmptyMask)));
    }

    #[test]
    fn bounding_box_is_tight() {
        let m = BinaryRaster::from_fn(10, 8, |x, y| (2..5).contains(&x) && (3..=6).contains(&y));
        assert_eq!(m.bounding_box(), Some((2, 3, 5, 7)));
        assert_eq!(BinaryRaster::filled(4, 4, false).bounding_box(), None);
    }

    #[test]
    fn png_and_pgm_io() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryRaster::from_fn(20, 12, |x, y| x > y);
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(BinaryRaster::load_png(&p).unwrap(), m);
        let pgm = dir.path().join("m.pgm");
        m.write_pgm(&pgm).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n20 12\n255\n"));
        assert_eq!(bytes.len(), "P5\n20 12\n255\n".len() + 240);
    }

    proptest! {
        #[test]
        fn downsample_is_monotone(
            cells in prop::collection::vec(any::<bool>(), 48 * 40),
            extra in prop::collection::vec(0usize..(48 * 40), 1..20),
        ) {
            let a = BinaryRaster::new(48, 40, cells.clone()).unwrap();
            let mut more = cells;
            for i in extra { more[i] = true; }
            let b = BinaryRaster::new(48, 40, more).unwrap();
            let da = downsample_mask(&a, 16, 16).unwrap();
            let db = downsample_mask(&b, 16, 16).unwrap();
            for (x, y) in da.cells().iter().zip(db.cells()) {
                prop_assert!(!x || *y);
            }
        }
    }
}
