//! ViT image encoder with layer taps and multi-scale feature augmentation.
//!
//! The taps after layers L/3, 2L/3 and L are reshaped to token grids; the
//! shallow tap is upsampled ×2 (nearest), the deep tap average-pooled ×2,
//! and a three-level feature pyramid fuses them. The pyramid level at the
//! token-grid resolution is the visual feature.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Linear, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::spatial::LinearMap;
use crate::tensor::Tensor;

/// Splits an `(H·W) × 3` image into `N × (p·p·3)` patch rows; within a patch
/// the layout is `(row, column, channel)`.
pub fn patchify(image: &Tensor, height: usize, width: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::Shape(format!("{height}x{width} image is not divisible into {patch}x{patch} patches")));
    }
    if image.shape() != (height * width, 3) {
        return Err(Error::Shape(format!("image tensor {:?} does not match {height}x{width}x3", image.shape())));
    }
    let idx = unpatchify_index(height, width, patch);
    let mut out = vec![0.0; image.len()];
    for (pixel_elem, &patch_elem) in idx.iter().enumerate() {
        out[patch_elem] = image.data()[pixel_elem];
    }
    Ok(Tensor::from_vec(height * width / (patch * patch), patch * patch * 3, out))
}

/// For each element of the flattened `(H·W) × 3` image, its position in the
/// flattened patch matrix.
pub fn unpatchify_index(height: usize, width: usize, patch: usize) -> Vec<usize> {
    let gw = width / patch;
    let per_patch = patch * patch * 3;
    let mut idx = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let n = (y / patch) * gw + x / patch;
            let within = ((y % patch) * patch + x % patch) * 3;
            for ch in 0..3 {
                idx.push(n * per_patch + within + ch);
            }
        }
    }
    idx
}

/// Outputs after the three tapped layers, each `N × D`.
#[derive(Clone, Copy, Debug)]
pub struct LayerTaps {
    pub shallow: Var,
    pub middle: Var,
    pub deep: Var,
}

#[derive(Clone, Debug)]
pub struct Fpn {
    pub lateral_fine: Linear,
    pub lateral_mid: Linear,
    pub lateral_coarse: Linear,
    pub top_down_mid: Linear,
    pub top_down_fine: Linear,
    pub bottom_up: Linear,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub patch_embed: Linear,
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub taps: [usize; 3],
    pub fpn: Fpn,
}

impl ImageEncoder {
    pub fn new(b: &mut Builder, image_size: usize, patch: usize, dim: usize, layers: usize, heads: usize) -> Self {
        assert!(layers.is_multiple_of(3) && layers > 0, "encoder layers must be a positive multiple of 3");
        let grid = image_size / patch;
        let patch_embed = Linear::new(b, "patch_embed", patch * patch * 3, dim);
        let pos = b.init.normal(grid * grid, dim, 0.02);
        let position = b.add("position", pos);
        let blocks = (0..layers).map(|i| TransformerBlock::new(b, &format!("blocks.{i}"), dim, heads)).collect();
        let mut f = b.sub("fpn");
        let fpn = Fpn {
            lateral_fine: Linear::new(&mut f, "lateral_fine", dim, dim),
            lateral_mid: Linear::new(&mut f, "lateral_mid", dim, dim),
            lateral_coarse: Linear::new(&mut f, "lateral_coarse", dim, dim),
            top_down_mid: Linear::new(&mut f, "top_down_mid", dim, dim),
            top_down_fine: Linear::new(&mut f, "top_down_fine", dim, dim),
            bottom_up: Linear::new(&mut f, "bottom_up", dim, dim),
        };
        ImageEncoder {
            patch,
            grid_h: grid,
            grid_w: grid,
            dim,
            patch_embed,
            position,
            blocks,
            taps: [layers / 3, 2 * layers / 3, layers],
            fpn,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (h, w) = (self.grid_h * self.patch, self.grid_w * self.patch);
        if image.shape() != (h * w, 3) {
            return Err(Error::Shape(format!("expected a {h}x{w} RGB image, got a {:?} tensor", image.shape())));
        }
        Ok(())
    }

    /// Linear patch embedding plus learned positions, `N × D`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<Var> {
        self.check_image(image)?;
        let patches = patchify(image, self.grid_h * self.patch, self.grid_w * self.patch, self.patch)?;
        let x = g.constant(patches);
        let tokens = self.patch_embed.forward(g, store, x);
        let pos = g.param(store, self.position);
        Ok(g.add(tokens, pos))
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<LayerTaps> {
        let mut x = self.embed(g, store, image)?;
        let mut outs = Vec::with_capacity(3);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, store, x, None);
            if self.taps.contains(&(i + 1)) {
                outs.push(x);
            }
        }
        if !g.value(x).is_finite() {
            return Err(Error::NonFinite("image encoder activations".into()));
        }
        Ok(LayerTaps { shallow: outs[0], middle: outs[1], deep: outs[2] })
    }

    /// Runs the full stack over the visible tokens only (absolute positions
    /// kept), returning the final layer output `|visible| × D`.
    pub fn encode_visible(&self, g: &mut Graph, store: &ParamStore, image: &Tensor, visible: &[usize]) -> Result<Var> {
        if visible.is_empty() {
            return Err(Error::InvalidRequest("at least one visible patch is required".into()));
        }
        let x = self.embed(g, store, image)?;
        let mut x = g.gather_rows(x, Rc::new(visible.to_vec()));
        for block in &self.blocks {
            x = block.forward(g, store, x, None);
        }
        if !g.value(x).is_finite() {
            return Err(Error::NonFinite("image encoder activations".into()));
        }
        Ok(x)
    }

    /// Fuses the taps into `N × D`; with `enabled = false` returns the deep
    /// tap unchanged.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, taps: &LayerTaps, enabled: bool) -> Result<Var> {
        if !enabled {
            return Ok(taps.deep);
        }
        let (h, w) = (self.grid_h, self.grid_w);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("token grid {h}x{w} must be even for multi-scale fusion")));
        }
        let up_mid = Rc::new(LinearMap::nearest_upsample(h, w, 2));
        let down_mid = Rc::new(LinearMap::avg_pool(h, w, 2));
        let up_coarse = Rc::new(LinearMap::nearest_upsample(h / 2, w / 2, 2));
        let down_fine = Rc::new(LinearMap::avg_pool(2 * h, 2 * w, 2));

        let fine = g.spatial(taps.shallow, up_mid.clone());
        let coarse = g.spatial(taps.deep, down_mid);
        let f = &self.fpn;

        let p_coarse = f.lateral_coarse.forward(g, store, coarse);
        let lat_mid = f.lateral_mid.forward(g, store, taps.middle);
        let up = g.spatial(p_coarse, up_coarse);
        let td = f.top_down_mid.forward(g, store, up);
        let p_mid = g.add(lat_mid, td);

        let lat_fine = f.lateral_fine.forward(g, store, fine);
        let up = g.spatial(p_mid, up_mid);
        let td = f.top_down_fine.forward(g, store, up);
        let p_fine = g.add(lat_fine, td);

        let pooled = g.spatial(p_fine, down_fine);
        let bu = f.bottom_up.forward(g, store, pooled);
        Ok(g.add(p_mid, bu))
    }

    /// `F_I` for an image.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &Tensor, msfa: bool) -> Result<Var> {
        let taps = self.encode(g, store, image)?;
        self.fuse(g, store, &taps, msfa)
    }
}
