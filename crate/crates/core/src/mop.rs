//! Mixture of prompts: prompt assets, the visual-textual gating network and
//! score-map fusion.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::GatingGranularity;
use crate::data::{template_prompt, ClassSpec};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Linear};
use crate::params::ParamStore;
use crate::spatial::LinearMap;
use crate::tensor::Tensor;

const BUILTIN_ASSETS: &str = include_str!("../assets/prompts.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptSource {
    Name,
    Template,
    Gpt,
    Bard,
}

impl PromptSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptSource::Name => "name",
            PromptSource::Template => "template",
            PromptSource::Gpt => "gpt",
            PromptSource::Bard => "bard",
        }
    }
}

impl fmt::Display for PromptSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "name" | "cls" => Ok(PromptSource::Name),
            "template" | "tem" => Ok(PromptSource::Template),
            "gpt" => Ok(PromptSource::Gpt),
            "bard" => Ok(PromptSource::Bard),
            other => Err(format!("unknown prompt source '{other}' (expected name, template, gpt or bard)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetEntry {
    pub name: String,
    pub template: String,
    pub gpt: String,
    pub bard: String,
}

/// Frozen prompt corpus keyed by lowercase class name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptAssets {
    entries: BTreeMap<String, AssetEntry>,
}

impl PromptAssets {
    /// The corpus shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_ASSETS).expect("built-in prompt assets are valid JSON")
    }

    pub fn parse(json: &str) -> Result<Self> {
        let raw: BTreeMap<String, AssetEntry> = serde_json::from_str(json)?;
        let entries = raw.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect();
        Ok(PromptAssets { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, class_name: &str) -> Option<&AssetEntry> {
        self.entries.get(&class_name.to_lowercase())
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Prompts for one class, with their text features once encoded.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub class_id: u8,
    pub class_name: String,
    pub prompts: Vec<String>,
    pub features: Vec<Tensor>,
}

/// Prompt text for one class and source. Language-model sources use the
/// frozen corpus when it knows the class and the manifest description
/// otherwise.
pub fn prompt_text(class: &ClassSpec, source: PromptSource, assets: &PromptAssets) -> Result<String> {
    let llm = |pick: fn(&AssetEntry) -> &String| -> Result<String> {
        if let Some(entry) = assets.get(&class.name) {
            return Ok(pick(entry).clone());
        }
        let desc = class.description().trim();
        if desc.is_empty() {
            return Err(Error::UnknownClass(format!(
                "'{}' has no {source} prompt in the asset corpus and no description in the manifest",
                class.name
            )));
        }
        Ok(desc.to_string())
    };
    match source {
        PromptSource::Name => Ok(class.name.clone()),
        PromptSource::Template => Ok(template_prompt(&class.name)),
        PromptSource::Gpt => llm(|e| &e.gpt),
        PromptSource::Bard => llm(|e| &e.bard),
    }
}

/// One bundle per class, prompts in `sources` order; features left empty.
pub fn load_prompt_assets(classes: &[ClassSpec], sources: &[PromptSource], assets: &PromptAssets) -> Result<Vec<PromptBundle>> {
    if sources.is_empty() {
        return Err(Error::InvalidRequest("at least one prompt source is required".into()));
    }
    classes
        .iter()
        .map(|c| {
            let prompts = sources.iter().map(|&s| prompt_text(c, s, assets)).collect::<Result<Vec<_>>>()?;
            Ok(PromptBundle { class_id: c.id, class_name: c.name.clone(), prompts, features: Vec::new() })
        })
        .collect()
}

/// Visual-textual gating network: three 3×3 convolutions over the
/// concatenated `[F_I, F_T]` grid (2D → D → D → 1), with a 1×1 projection
/// shortcut around the first and an identity shortcut around the second.
#[derive(Clone, Debug)]
pub struct GatingNetwork {
    pub conv1: Conv2d,
    pub shortcut: Linear,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    upsample: Rc<LinearMap>,
    pool: Rc<LinearMap>,
}

impl GatingNetwork {
    pub fn new(b: &mut Builder, dim: usize, grid_h: usize, grid_w: usize, patch: usize) -> Self {
        let out_cells = grid_h * grid_w * patch * patch;
        GatingNetwork {
            conv1: Conv2d::new(b, "conv1", 2 * dim, dim, 3),
            shortcut: Linear::new(b, "shortcut", 2 * dim, dim),
            conv2: Conv2d::new(b, "conv2", dim, dim, 3),
            conv3: Conv2d::new(b, "conv3", dim, 1, 3),
            dim,
            grid_h,
            grid_w,
            upsample: Rc::new(LinearMap::bilinear_upsample(grid_h, grid_w, patch)),
            pool: Rc::new(LinearMap::global_mean(grid_h * grid_w, out_cells)),
        }
    }

    /// Token-resolution gating logits `N × 1` for one prompt.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, image: Var, text: Var) -> Result<Var> {
        let (n, d) = g.value(image).shape();
        if d != self.dim || g.value(text).shape() != (1, self.dim) || n != self.grid_h * self.grid_w {
            return Err(Error::Shape(format!(
                "gating expects {}x{} visual and 1x{} text features, got {n}x{d} and {:?}",
                self.grid_h * self.grid_w,
                self.dim,
                self.dim,
                g.value(text).shape()
            )));
        }
        let (h, w) = (self.grid_h, self.grid_w);
        let t = g.broadcast_rows(text, n);
        let x = g.concat_cols(&[image, t]);
        let c1 = self.conv1.forward(g, store, x, h, w);
        let s = self.shortcut.forward(g, store, x);
        let h1 = g.add(c1, s);
        let h1 = g.relu(h1);
        let c2 = self.conv2.forward(g, store, h1, h, w);
        let h2 = g.add(c2, h1);
        let h2 = g.relu(h2);
        Ok(self.conv3.forward(g, store, h2, h, w))
    }

    /// Lifts token logits to pixel resolution, per pixel or as one
    /// image-wide value.
    pub fn pixel_logits(&self, g: &mut Graph, logits: Var, granularity: GatingGranularity) -> Var {
        match granularity {
            GatingGranularity::Pixel => g.spatial(logits, self.upsample.clone()),
            GatingGranularity::Image => g.spatial(logits, self.pool.clone()),
        }
    }

    /// Gating weights `(H·W) × P`, one column per prompt.
    pub fn gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        texts: &[Var],
        granularity: GatingGranularity,
    ) -> Result<Var> {
        if texts.is_empty() {
            return Err(Error::InvalidRequest("gating needs at least one prompt".into()));
        }
        let mut cols = Vec::with_capacity(texts.len());
        for &t in texts {
            let l = self.logits(g, store, image, t)?;
            cols.push(self.pixel_logits(g, l, granularity));
        }
        Ok(weights_from_logits(g, &cols))
    }
}

/// Softmax across prompts of per-pixel logit columns.
pub fn weights_from_logits(g: &mut Graph, logits: &[Var]) -> Var {
    let stacked = if logits.len() == 1 { logits[0] } else { g.concat_cols(logits) };
    g.softmax_rows(stacked)
}

/// `S^et = Σ_p W[:, p] ⊙ S_p`, `(H·W) × 1`.
pub fn fuse(g: &mut Graph, scores: &[Var], weights: Var) -> Result<Var> {
    let (rows, p) = g.value(weights).shape();
    if scores.len() != p || scores.iter().any(|&s| g.value(s).shape() != (rows, 1)) {
        return Err(Error::Shape(format!("{} score maps do not match {rows}x{p} gating weights", scores.len())));
    }
    let stacked = if p == 1 { scores[0] } else { g.concat_cols(scores) };
    let weighted = g.mul(stacked, weights);
    Ok(g.sum_cols(weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_classes;
    use crate::params::Init;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn gating(dim: usize, grid: usize, patch: usize) -> (ParamStore, GatingNetwork) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init::new(&mut rng);
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, &mut init, "gating", false);
        let net = GatingNetwork::new(&mut b, dim, grid, grid, patch);
        (store, net)
    }

    fn paper_class(name: &str) -> ClassSpec {
        let mut c = default_classes(1).unwrap().remove(0);
        c.name = name.to_string();
        c
    }

    #[test]
    fn sources_parse_and_print() {
        for s in ["name", "template", "gpt", "bard"] {
            assert_eq!(s.parse::<PromptSource>().unwrap().to_string(), s);
        }
        assert!("llama".parse::<PromptSource>().is_err());
    }

    #[test]
    fn builtin_corpus_has_the_nine_instruments() {
        let assets = PromptAssets::builtin();
        assert_eq!(assets.class_names().count(), 9);
        let gpt = prompt_text(&paper_class("Bipolar forceps"), PromptSource::Gpt, &assets).unwrap();
        assert!(gpt.starts_with("Bipolar forceps have a slim, elongated tweezer-like design"));
        let bard = prompt_text(&paper_class("clip applier"), PromptSource::Bard, &assets).unwrap();
        assert!(bard.starts_with("Clip applier is a handheld device"));
    }

    #[test]
    fn name_and_template_sources() {
        let assets = PromptAssets::builtin();
        let c = paper_class("vessel sealer");
        assert_eq!(prompt_text(&c, PromptSource::Name, &assets).unwrap(), "vessel sealer");
        assert_eq!(
            prompt_text(&c, PromptSource::Template, &assets).unwrap(),
            "the surgical instrument area represented by the vessel sealer"
        );
    }

    #[test]
    fn synthetic_classes_fall_back_to_descriptions() {
        let assets = PromptAssets::builtin();
        let classes = default_classes(4).unwrap();
        let bundles =
            load_prompt_assets(&classes, &[PromptSource::Name, PromptSource::Template, PromptSource::Gpt], &assets)
                .unwrap();
        assert_eq!(bundles.len(), 4);
        for (b, c) in bundles.iter().zip(&classes) {
            assert_eq!(b.class_id, c.id);
            assert_eq!(b.prompts[2], c.description());
        }
        let mut bare = classes[0].clone();
        bare.prompts[2] = String::new();
        assert!(matches!(prompt_text(&bare, PromptSource::Bard, &assets), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn equal_logit_softmax_and_stubbed_logits() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(3, 1, vec![2.0_f64.ln(), 0.3, -1.0]));
        let b = g.constant(Tensor::from_vec(3, 1, vec![0.0, 0.3, -1.0]));
        let c = g.constant(Tensor::from_vec(3, 1, vec![0.0, 0.3, -1.0]));
        let w = weights_from_logits(&mut g, &[a, b, c]);
        let w = g.value(w);
        assert!((w.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((w.get(0, 1) - 0.25).abs() < 1e-12);
        assert!((w.get(0, 2) - 0.25).abs() < 1e-12);
        for r in 1..3 {
            for p in 0..3 {
                assert!((w.get(r, p) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        let single = weights_from_logits(&mut g, &[a]);
        assert!(g.value(single).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fusion_arithmetic() {
        let mut g = Graph::new();
        let s1 = g.constant(Tensor::from_vec(1, 1, vec![0.2]));
        let s2 = g.constant(Tensor::from_vec(1, 1, vec![0.8]));
        let w = g.constant(Tensor::from_rows(&[&[0.75, 0.25]]));
        let f = fuse(&mut g, &[s1, s2], w).unwrap();
        assert!((g.value(f).item() - 0.35).abs() < 1e-12);
        let onehot = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        let f = fuse(&mut g, &[s1, s2], onehot).unwrap();
        assert_eq!(g.value(f).item(), 0.2);
        assert!(fuse(&mut g, &[s1], w).is_err());
    }

    #[test]
    fn identical_prompts_gate_uniformly() {
        let (store, net) = gating(4, 2, 4);
        let mut g = Graph::new();
        let img = g.constant(random(4, 4, 1));
        let t = g.constant(random(1, 4, 2));
        for gran in [GatingGranularity::Pixel, GatingGranularity::Image] {
            let w = net.gate(&mut g, &store, img, &[t, t, t], gran).unwrap();
            assert_eq!(g.value(w).shape(), (64, 3));
            assert!(g.value(w).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn image_gating_is_spatially_constant() {
        let (store, net) = gating(4, 2, 4);
        let mut g = Graph::new();
        let img = g.constant(random(4, 4, 3));
        let t1 = g.constant(random(1, 4, 4));
        let t2 = g.constant(random(1, 4, 5));
        let w = net.gate(&mut g, &store, img, &[t1, t2], GatingGranularity::Image).unwrap();
        let w = g.value(w);
        for r in 0..w.rows() {
            assert_eq!(w.row(r), w.row(0));
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gating_rejects_wrong_dims() {
        let (store, net) = gating(4, 2, 4);
        let mut g = Graph::new();
        let img = g.constant(random(4, 4, 3));
        let t = g.constant(random(1, 3, 4));
        assert!(net.gate(&mut g, &store, img, &[t], GatingGranularity::Pixel).is_err());
    }
}
