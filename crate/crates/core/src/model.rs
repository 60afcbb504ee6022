//! The assembled model: frozen text encoder, image encoder, prompt decoder,
//! gating network and reconstruction branch, plus the predict path.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::data::ClassSpec;
use crate::decoder::PromptDecoder;
use crate::error::{Error, Result};
use crate::hiar::Reconstructor;
use crate::image_encoder::ImageEncoder;
use crate::mop::{fuse, load_prompt_assets, GatingNetwork, PromptAssets, PromptBundle};
use crate::nn::Builder;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::text::{tokenize, TextEncoder, TextPooling, Vocab};

/// Prefix of every text-encoder parameter name.
pub const TEXT_PREFIX: &str = "text";

pub struct Model {
    pub config: ModelConfig,
    pub classes: Vec<ClassSpec>,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub decoder: PromptDecoder,
    pub gating: GatingNetwork,
    pub reconstructor: Reconstructor,
    /// One bundle per class in class order, features filled.
    pub bundles: Vec<PromptBundle>,
    cache: Mutex<HashMap<String, Tensor>>,
}

/// Graph handles for one class's prompts.
#[derive(Clone, Debug)]
pub struct ClassForward {
    pub class_id: u8,
    /// `S^et`, `(H·W) × 1`.
    pub score: Var,
    pub prompt_scores: Vec<Var>,
    /// `(H·W) × P`.
    pub weights: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrediction {
    pub class_id: u8,
    /// `H·W` fused scores.
    pub score: Vec<f64>,
    /// `(H·W) × P` gating weights.
    pub weights: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
    /// Sorted by class id.
    pub classes: Vec<ClassPrediction>,
}

fn prompt_assets(config: &ModelConfig) -> Result<PromptAssets> {
    match &config.prompt_assets {
        Some(path) => PromptAssets::load(Path::new(path)),
        None => Ok(PromptAssets::builtin()),
    }
}

impl Model {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: &ModelConfig, classes: &[ClassSpec]) -> Result<Model> {
        config.validate()?;
        let bundles = Self::bundles_for(config, classes)?;
        let corpus: Vec<&str> = bundles.iter().flat_map(|b| b.prompts.iter().map(String::as_str)).collect();
        let vocab = Vocab::build(&corpus);
        Self::with_vocab(config, classes, vocab)
    }

    fn bundles_for(config: &ModelConfig, classes: &[ClassSpec]) -> Result<Vec<PromptBundle>> {
        if classes.is_empty() {
            return Err(Error::InvalidRequest("at least one class is required".into()));
        }
        if classes.len() != config.num_classes {
            return Err(Error::config(
                "num_classes",
                format!("config has C = {} but the dataset defines {} classes", config.num_classes, classes.len()),
            ));
        }
        let ids: BTreeSet<u8> = classes.iter().map(|c| c.id).collect();
        if ids.len() != classes.len() || ids.contains(&0) {
            return Err(Error::InvalidRequest("class ids must be distinct and nonzero".into()));
        }
        load_prompt_assets(classes, &config.sources()?, &prompt_assets(config)?)
    }

    /// Builds the architecture around an existing vocabulary; parameters are
    /// drawn from `config.seed`.
    pub fn with_vocab(config: &ModelConfig, classes: &[ClassSpec], vocab: Vocab) -> Result<Model> {
        config.validate()?;
        let mut bundles = Self::bundles_for(config, classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init::new(&mut rng);
        let mut store = ParamStore::new();
        let (d, heads, grid, p) = (config.feature_dim, config.num_heads, config.grid_size(), config.patch_size);
        let text = {
            let mut b = Builder::new(&mut store, &mut init, TEXT_PREFIX, true);
            TextEncoder::new(&mut b, vocab.len(), d, config.text_layers, heads)
        };
        let image = {
            let mut b = Builder::new(&mut store, &mut init, "image", false);
            ImageEncoder::new(&mut b, config.image_size, p, d, config.encoder_layers, heads)
        };
        let decoder = {
            let mut b = Builder::new(&mut store, &mut init, "decoder", false);
            PromptDecoder::new(&mut b, d, heads, config.decoder_blocks, config.conv_kernel, grid, grid, p)
        };
        let gating = {
            let mut b = Builder::new(&mut store, &mut init, "gating", false);
            GatingNetwork::new(&mut b, d, grid, grid, p)
        };
        let reconstructor = {
            let mut b = Builder::new(&mut store, &mut init, "reconstruction", false);
            Reconstructor::new(&mut b, d, heads, config.rec_decoder_layers, grid, grid, p)
        };
        let mut model = Model {
            config: config.clone(),
            classes: classes.to_vec(),
            vocab,
            store,
            text,
            image,
            decoder,
            gating,
            reconstructor,
            bundles: Vec::new(),
            cache: Mutex::new(HashMap::new()),
        };
        for b in &mut bundles {
            b.features = b.prompts.iter().map(|t| model.text_feature(t)).collect::<Result<_>>()?;
        }
        model.bundles = bundles;
        Ok(model)
    }

    pub fn pooling(&self) -> TextPooling {
        if self.config.cls_token_pooling {
            TextPooling::Cls
        } else {
            TextPooling::MeanWords
        }
    }

    /// `F_T` without touching the cache.
    pub fn encode_text_uncached(&self, prompt: &str) -> Result<Tensor> {
        let tokens = tokenize(prompt, &self.vocab);
        self.text.encode(&self.store, &tokens, self.pooling())
    }

    /// `F_T`, computed once per prompt string.
    pub fn text_feature(&self, prompt: &str) -> Result<Tensor> {
        if let Some(t) = self.cache.lock().expect("text cache poisoned").get(prompt) {
            return Ok(t.clone());
        }
        let t = self.encode_text_uncached(prompt)?;
        self.cache.lock().expect("text cache poisoned").insert(prompt.to_string(), t.clone());
        Ok(t)
    }

    pub fn cached_prompts(&self) -> usize {
        self.cache.lock().expect("text cache poisoned").len()
    }

    /// Drops cached text features; needed after replacing text-encoder
    /// parameters.
    pub fn clear_text_cache(&mut self) -> Result<()> {
        self.cache.lock().expect("text cache poisoned").clear();
        let mut features = Vec::with_capacity(self.bundles.len());
        for b in &self.bundles {
            features.push(b.prompts.iter().map(|t| self.text_feature(t)).collect::<Result<Vec<_>>>()?);
        }
        for (b, f) in self.bundles.iter_mut().zip(features) {
            b.features = f;
        }
        Ok(())
    }

    pub fn bundle(&self, class_id: u8) -> Option<&PromptBundle> {
        self.bundles.iter().find(|b| b.class_id == class_id)
    }

    /// `F_I` for an `(H·W) × 3` image.
    pub fn visual(&self, g: &mut Graph, image: &Tensor) -> Result<Var> {
        self.image.forward(g, &self.store, image, self.config.msfa)
    }

    /// Per-prompt score maps, gating weights and the fused map for one
    /// class. Only the first feature is used when the mixture is off.
    pub fn class_forward(&self, g: &mut Graph, visual: Var, class_id: u8, features: &[Tensor]) -> Result<ClassForward> {
        if features.is_empty() {
            return Err(Error::InvalidRequest(format!("class {class_id} has no prompt features")));
        }
        let cfg = &self.config;
        let used = if cfg.mop { features } else { &features[..1] };
        let texts: Vec<Var> = used.iter().map(|f| g.constant(f.clone())).collect();
        let mut prompt_scores = Vec::with_capacity(texts.len());
        for &t in &texts {
            prompt_scores.push(self.decoder.forward(g, &self.store, visual, t, cfg.attention_prompting, cfg.conv_prompting)?);
        }
        let pixels = g.value(prompt_scores[0]).rows();
        let weights = if cfg.mop {
            self.gating.gate(g, &self.store, visual, &texts, cfg.gating_granularity)?
        } else {
            g.constant(Tensor::full(pixels, 1, 1.0))
        };
        let score = if prompt_scores.len() == 1 && !cfg.mop { prompt_scores[0] } else { fuse(g, &prompt_scores, weights)? };
        Ok(ClassForward { class_id, score, prompt_scores, weights })
    }

    /// Segments an image for the given bundles. Bundles without features
    /// are encoded through the cache.
    pub fn predict_with(&self, image: &Tensor, bundles: &[PromptBundle]) -> Result<Prediction> {
        if bundles.is_empty() {
            return Err(Error::InvalidRequest("at least one prompt bundle is required".into()));
        }
        let mut ids = BTreeSet::new();
        for b in bundles {
            if !ids.insert(b.class_id) {
                return Err(Error::InvalidRequest(format!("class {} appears in more than one bundle", b.class_id)));
            }
            if b.class_id == 0 || !self.classes.iter().any(|c| c.id == b.class_id) {
                return Err(Error::UnknownClass(format!("{} (id {})", b.class_name, b.class_id)));
            }
        }
        let size = self.config.image_size;
        if image.shape() != (size * size, 3) {
            return Err(Error::Shape(format!("model expects {size}x{size} RGB images, got a {:?} tensor", image.shape())));
        }
        let mut g = Graph::new();
        let visual = self.visual(&mut g, image)?;
        let mut classes = Vec::with_capacity(bundles.len());
        for b in bundles {
            let features = if b.features.is_empty() {
                b.prompts.iter().map(|t| self.text_feature(t)).collect::<Result<Vec<_>>>()?
            } else {
                b.features.clone()
            };
            let out = self.class_forward(&mut g, visual, b.class_id, &features)?;
            classes.push(ClassPrediction {
                class_id: b.class_id,
                score: g.value(out.score).data().to_vec(),
                weights: g.value(out.weights).clone(),
            });
        }
        classes.sort_by_key(|c| c.class_id);
        let maps: Vec<(u8, &[f64])> = classes.iter().map(|c| (c.class_id, c.score.as_slice())).collect();
        let mask = crate::train::assemble_mask(&maps, self.config.threshold);
        Ok(Prediction { height: size, width: size, mask, classes })
    }

    /// Segments an image for every class the model knows.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        self.predict_with(image, &self.bundles)
    }

    /// SHA-256 over all text-encoder parameters.
    pub fn text_fingerprint(&self) -> String {
        let prefix = format!("{TEXT_PREFIX}.");
        self.store.fingerprint(|p| p.name.starts_with(&prefix))
    }
}
