//! Hard instrument area reinforcement: mining patches the current prediction
//! gets wrong, adjusting the masked set to the target ratio, and the
//! masked-autoencoder reconstruction branch that shares the image encoder.

use std::rc::Rc;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image_encoder::{unpatchify_index, ImageEncoder};
use crate::nn::{Builder, LayerNorm, Linear, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Patch-level error flags before ratio adjustment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardPatches {
    pub grid_h: usize,
    pub grid_w: usize,
    pub hard: Vec<bool>,
}

impl HardPatches {
    pub fn count(&self) -> usize {
        self.hard.iter().filter(|&&h| h).count()
    }

    pub fn ratio(&self) -> f64 {
        self.count() as f64 / self.hard.len() as f64
    }
}

/// Patch-level mask, `true` = masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardAreaMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub masked: Vec<bool>,
}

impl HardAreaMask {
    pub fn none(grid_h: usize, grid_w: usize) -> Self {
        HardAreaMask { grid_h, grid_w, masked: vec![false; grid_h * grid_w] }
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn ratio(&self) -> f64 {
        self.count() as f64 / self.masked.len() as f64
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }
}

/// A patch is hard when any of its pixels differs between `pred` and `gt`.
pub fn mine_hard_patches(pred: &[u8], gt: &[u8], height: usize, width: usize, patch: usize) -> Result<HardPatches> {
    if pred.len() != height * width || gt.len() != height * width {
        return Err(Error::Shape(format!(
            "masks of {} and {} pixels for a {height}x{width} image",
            pred.len(),
            gt.len()
        )));
    }
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::Shape(format!("{height}x{width} is not divisible into {patch}-pixel patches")));
    }
    let (gh, gw) = (height / patch, width / patch);
    let mut hard = vec![false; gh * gw];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if pred[i] != gt[i] {
                hard[(y / patch) * gw + x / patch] = true;
            }
        }
    }
    Ok(HardPatches { grid_h: gh, grid_w: gw, hard })
}

/// Number of patches masked for a target ratio.
pub fn target_count(total: usize, ratio: f64) -> usize {
    (ratio * total as f64).round() as usize
}

/// Masks exactly `round(r_t · total)` patches. Surplus hard patches are
/// dropped uniformly at random; a shortfall is filled with uniformly random
/// easy patches.
pub fn adjust_to_ratio(patches: &HardPatches, target_ratio: f64, rng: &mut ChaCha8Rng) -> Result<HardAreaMask> {
    if !(target_ratio > 0.0 && target_ratio < 1.0) {
        return Err(Error::InvalidRequest(format!("mask ratio {target_ratio} must lie in (0, 1)")));
    }
    let total = patches.hard.len();
    let target = target_count(total, target_ratio);
    if target >= total {
        return Err(Error::InvalidRequest(format!("mask ratio {target_ratio} would hide all {total} patches")));
    }
    let hard: Vec<usize> = (0..total).filter(|&i| patches.hard[i]).collect();
    let easy: Vec<usize> = (0..total).filter(|&i| !patches.hard[i]).collect();
    let mut masked = vec![false; total];
    if hard.len() >= target {
        for k in sample(rng, hard.len(), target) {
            masked[hard[k]] = true;
        }
    } else {
        for &i in &hard {
            masked[i] = true;
        }
        for k in sample(rng, easy.len(), target - hard.len()) {
            masked[easy[k]] = true;
        }
    }
    Ok(HardAreaMask { grid_h: patches.grid_h, grid_w: patches.grid_w, masked })
}

/// Uniform random masking at the target ratio, ignoring prediction errors.
pub fn random_mask(grid_h: usize, grid_w: usize, target_ratio: f64, rng: &mut ChaCha8Rng) -> Result<HardAreaMask> {
    let none = HardPatches { grid_h, grid_w, hard: vec![false; grid_h * grid_w] };
    adjust_to_ratio(&none, target_ratio, rng)
}

/// Input image with masked patches painted mid-gray.
pub fn masked_visualization(image: &Tensor, mask: &HardAreaMask, patch: usize) -> Tensor {
    let width = mask.grid_w * patch;
    let mut out = image.clone();
    for (n, &m) in mask.masked.iter().enumerate() {
        if !m {
            continue;
        }
        let (py, px) = (n / mask.grid_w, n % mask.grid_w);
        for y in py * patch..(py + 1) * patch {
            for x in px * patch..(px + 1) * patch {
                out.row_mut(y * width + x).fill(0.5);
            }
        }
    }
    out
}

/// Lightweight MAE decoder: embeds visible encoder tokens, fills masked
/// slots with a learned token, adds positions, runs transformer blocks and
/// projects each token to its `p × p × 3` pixels.
#[derive(Clone, Debug)]
pub struct Reconstructor {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    unpatch: Rc<Vec<usize>>,
}

/// Outputs of one reconstruction pass.
#[derive(Clone, Copy, Debug)]
pub struct ReconstructionVars {
    /// Normalised decoder tokens fed to the head, `N × D`.
    pub tokens: Var,
    /// Head output per patch, `N × (p·p·3)`.
    pub patches: Var,
    /// `I^rec`, `(H·W) × 3`.
    pub image: Var,
}

impl Reconstructor {
    pub fn new(b: &mut Builder, dim: usize, heads: usize, layers: usize, grid_h: usize, grid_w: usize, patch: usize) -> Self {
        let embed = Linear::new(b, "embed", dim, dim);
        let mt = b.init.normal(1, dim, 0.02);
        let mask_token = b.add("mask_token", mt);
        let pos = b.init.normal(grid_h * grid_w, dim, 0.02);
        let position = b.add("position", pos);
        let blocks = (0..layers).map(|i| TransformerBlock::new(b, &format!("blocks.{i}"), dim, heads)).collect();
        let norm = LayerNorm::new(b, "norm", dim);
        let head = Linear::new(b, "head", dim, patch * patch * 3);
        Reconstructor {
            embed,
            mask_token,
            position,
            blocks,
            norm,
            head,
            patch,
            grid_h,
            grid_w,
            unpatch: Rc::new(unpatchify_index(grid_h * patch, grid_w * patch, patch)),
        }
    }

    pub fn reconstruct(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        encoder: &ImageEncoder,
        image: &Tensor,
        mask: &HardAreaMask,
    ) -> Result<ReconstructionVars> {
        let total = self.grid_h * self.grid_w;
        if mask.masked.len() != total {
            return Err(Error::Shape(format!("mask has {} patches, image has {total}", mask.masked.len())));
        }
        let visible = mask.visible();
        if visible.is_empty() {
            return Err(Error::InvalidRequest("all patches are masked; at least one must stay visible".into()));
        }
        let hidden = mask.masked_indices();
        let encoded = encoder.encode_visible(g, store, image, &visible)?;
        let embedded = self.embed.forward(g, store, encoded);
        let full = if hidden.is_empty() {
            embedded
        } else {
            let token = g.param(store, self.mask_token);
            let fill = g.broadcast_rows(token, hidden.len());
            let stacked = g.concat_rows(&[embedded, fill]);
            // stacked rows are [visible..., hidden...]; restore grid order
            let mut restore = vec![0; total];
            for (row, &n) in visible.iter().chain(hidden.iter()).enumerate() {
                restore[n] = row;
            }
            g.gather_rows(stacked, Rc::new(restore))
        };
        let pos = g.param(store, self.position);
        let mut x = g.add(full, pos);
        for block in &self.blocks {
            x = block.forward(g, store, x, None);
        }
        let tokens = self.norm.forward(g, store, x);
        let patches = self.head.forward(g, store, tokens);
        let (h, w) = (self.grid_h * self.patch, self.grid_w * self.patch);
        let out = g.permute(patches, self.unpatch.clone(), h * w, 3);
        if !g.value(out).is_finite() {
            return Err(Error::NonFinite("reconstruction".into()));
        }
        Ok(ReconstructionVars { tokens, patches, image: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::{Rng, SeedableRng};

    fn models(size: usize, patch: usize, dim: usize) -> (ParamStore, ImageEncoder, Reconstructor) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut init = Init::new(&mut rng);
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, &mut init, "image", false);
        let enc = ImageEncoder::new(&mut b, size, patch, dim, 3, 2);
        let mut b = Builder::new(&mut store, &mut init, "rec", false);
        let grid = size / patch;
        let rec = Reconstructor::new(&mut b, dim, 2, 2, grid, grid, patch);
        (store, enc, rec)
    }

    fn image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(size * size, 3, (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn mining_counts() {
        let gt: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
        let same = mine_hard_patches(&gt, &gt, 8, 8, 2).unwrap();
        assert_eq!(same.count(), 0);
        assert_eq!(same.ratio(), 0.0);
        let mut one = gt.clone();
        one[9] = 7;
        let r = mine_hard_patches(&one, &gt, 8, 8, 2).unwrap();
        assert_eq!(r.ratio(), 1.0 / 16.0);
        assert!(r.hard[0]);
        let comp: Vec<u8> = gt.iter().map(|&c| c + 1).collect();
        assert_eq!(mine_hard_patches(&comp, &gt, 8, 8, 2).unwrap().ratio(), 1.0);
        assert!(mine_hard_patches(&gt[..60], &gt, 8, 8, 2).is_err());
    }

    #[test]
    fn surplus_hard_patches_are_subsampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hard: Vec<bool> = (0..16).map(|i| i % 2 == 0).collect();
        let p = HardPatches { grid_h: 4, grid_w: 4, hard: hard.clone() };
        let m = adjust_to_ratio(&p, 0.25, &mut rng).unwrap();
        assert_eq!(m.count(), 4);
        assert!(m.masked_indices().iter().all(|&i| hard[i]));
    }

    #[test]
    fn no_hard_patches_gives_random_masking() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_mask(4, 4, 0.25, &mut rng).unwrap();
        assert_eq!(m.count(), 4);
    }

    #[test]
    fn exact_ratio_is_left_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hard: Vec<bool> = (0..16).map(|i| [1, 5, 6, 14].contains(&i)).collect();
        let p = HardPatches { grid_h: 4, grid_w: 4, hard: hard.clone() };
        let m = adjust_to_ratio(&p, 0.25, &mut rng).unwrap();
        assert_eq!(m.masked, hard);
    }

    #[test]
    fn masking_is_seeded() {
        let hard: Vec<bool> = (0..64).map(|i| i % 5 == 0).collect();
        let p = HardPatches { grid_h: 8, grid_w: 8, hard };
        let a = adjust_to_ratio(&p, 0.25, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = adjust_to_ratio(&p, 0.25, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ratio_bounds_are_enforced() {
        let p = HardPatches { grid_h: 2, grid_w: 2, hard: vec![false; 4] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(adjust_to_ratio(&p, 0.0, &mut rng).is_err());
        assert!(adjust_to_ratio(&p, 0.9, &mut rng).is_err());
    }

    #[test]
    fn reconstruction_shape_and_finiteness() {
        let (store, enc, rec) = models(32, 8, 8);
        let img = image(32, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mask in [HardAreaMask::none(4, 4), random_mask(4, 4, 0.5, &mut rng).unwrap()] {
            let mut g = Graph::new();
            let out = rec.reconstruct(&mut g, &store, &enc, &img, &mask).unwrap();
            assert_eq!(g.value(out.image).shape(), (1024, 3));
            assert!(g.value(out.image).is_finite());
        }
        let all = HardAreaMask { grid_h: 4, grid_w: 4, masked: vec![true; 16] };
        let mut g = Graph::new();
        assert!(rec.reconstruct(&mut g, &store, &enc, &img, &all).is_err());
    }

    #[test]
    fn single_token_head_output_is_reshaped_into_the_image() {
        let (mut store, enc, rec) = models(4, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w: Vec<f64> = (0..4 * 48).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.set(rec.head.weight, Tensor::from_vec(4, 48, w));
        store.set(rec.head.bias.unwrap(), Tensor::from_vec(1, 48, (0..48).map(|i| i as f64 / 64.0).collect()));
        let img = image(4, 7);
        let mut g = Graph::new();
        let out = rec.reconstruct(&mut g, &store, &enc, &img, &HardAreaMask::none(1, 1)).unwrap();
        let t = g.value(out.tokens).row(0).to_vec();
        let (wt, bt) = (store.get(rec.head.weight), store.get(rec.head.bias.unwrap()));
        let got = g.value(out.image);
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    let k = (y * 4 + x) * 3 + c;
                    let want = bt.get(0, k) + (0..4).map(|i| t[i] * wt.get(i, k)).sum::<f64>();
                    assert!((got.get(y * 4 + x, c) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn masked_slots_use_the_mask_token() {
        // with blocks removed, a hidden slot carries mask token + position only
        let (store, enc, mut rec) = models(16, 8, 4);
        rec.blocks.clear();
        let mask = HardAreaMask { grid_h: 2, grid_w: 2, masked: vec![false, true, false, false] };
        let a = image(16, 8);
        let mut b = a.clone();
        for y in 0..8 {
            for x in 8..16 {
                b.row_mut(y * 16 + x).fill(0.9);
            }
        }
        let recon = |img: &Tensor| {
            let mut g = Graph::new();
            let out = rec.reconstruct(&mut g, &store, &enc, img, &mask).unwrap();
            g.value(out.patches).clone()
        };
        let (ra, rb) = (recon(&a), recon(&b));
        // the hidden patch's pixels changed, but nothing downstream sees them
        assert_eq!(ra, rb);
    }

    #[test]
    fn gray_visualization_covers_masked_patches_only() {
        let img = image(8, 9);
        let mask = HardAreaMask { grid_h: 2, grid_w: 2, masked: vec![true, false, false, false] };
        let vis = masked_visualization(&img, &mask, 4);
        assert_eq!(vis.row(0), &[0.5, 0.5, 0.5]);
        assert_eq!(vis.row(4), img.row(4));
    }
}
