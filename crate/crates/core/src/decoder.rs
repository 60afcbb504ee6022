//! Text-promptable mask decoder.
//!
//! Attention prompting runs `decoder_blocks` pre-norm blocks of self-attention
//! over image tokens, cross-attention to the single text token, and an FFN.
//! Convolution prompting maps the text feature to a `k × k` kernel plus bias,
//! convolves the token grid to one logit channel, upsamples the logits
//! bilinearly by `p` and applies a sigmoid.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, Builder, FeedForward, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::spatial::LinearMap;

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

/// Intermediate states of one decoder block.
#[derive(Clone, Copy, Debug)]
pub struct BlockStates {
    pub after_self: Var,
    pub after_cross: Var,
    pub after_ffn: Var,
}

impl DecoderBlock {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Self {
        let mut b = b.sub(name);
        DecoderBlock {
            ln_self: LayerNorm::new(&mut b, "ln_self", dim),
            self_attn: Attention::new(&mut b, "self_attn", dim, heads),
            ln_cross: LayerNorm::new(&mut b, "ln_cross", dim),
            cross_attn: Attention::new(&mut b, "cross_attn", dim, heads),
            ln_ffn: LayerNorm::new(&mut b, "ln_ffn", dim),
            ffn: FeedForward::new(&mut b, "ffn", dim, 4 * dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, text: Var) -> BlockStates {
        let h = self.ln_self.forward(g, store, x);
        let a = self.self_attn.forward(g, store, h, h, None);
        let after_self = g.add(a, x);
        let h = self.ln_cross.forward(g, store, after_self);
        let a = self.cross_attn.forward(g, store, h, text, None);
        let after_cross = g.add(a, after_self);
        let h = self.ln_ffn.forward(g, store, after_cross);
        let f = self.ffn.forward(g, store, h);
        let after_ffn = g.add(f, after_cross);
        BlockStates { after_self, after_cross, after_ffn }
    }
}

#[derive(Clone, Debug)]
pub struct PromptDecoder {
    pub blocks: Vec<DecoderBlock>,
    /// Applied to `F_{I_A}` before the logit head.
    pub norm: LayerNorm,
    pub text_to_conv: Linear,
    pub kernel: usize,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    upsample: Rc<LinearMap>,
}

/// Dynamic convolution parameters: `w` as a `(D·k²) × 1` column in
/// [`Graph::im2col`] order and `b` as `1 × 1`.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Var,
}

impl PromptDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        dim: usize,
        heads: usize,
        blocks: usize,
        kernel: usize,
        grid_h: usize,
        grid_w: usize,
        patch: usize,
    ) -> Self {
        let blocks = (0..blocks).map(|i| DecoderBlock::new(b, &format!("blocks.{i}"), dim, heads)).collect();
        let norm = LayerNorm::new(b, "norm", dim);
        // F_T is layer-normed (entries ~1), so std 1/(D·k) gives the generated
        // kernel fan-in scale and O(1) logits at init
        let std = 1.0 / (dim * kernel) as f64;
        let text_to_conv = Linear::normal(b, "text_to_conv", dim, dim * kernel * kernel + 1, std);
        PromptDecoder {
            blocks,
            norm,
            text_to_conv,
            kernel,
            dim,
            grid_h,
            grid_w,
            upsample: Rc::new(LinearMap::bilinear_upsample(grid_h, grid_w, patch)),
        }
    }

    fn check(&self, g: &Graph, image: Var, text: Var) -> Result<()> {
        let (n, d) = g.value(image).shape();
        let t = g.value(text).shape();
        if d != self.dim || t != (1, self.dim) {
            return Err(Error::Shape(format!("visual feature is {n}x{d}, text feature {t:?}, decoder dim {}", self.dim)));
        }
        if n != self.grid_h * self.grid_w {
            return Err(Error::Shape(format!("{n} tokens for a {}x{} grid", self.grid_h, self.grid_w)));
        }
        Ok(())
    }

    /// All block states in order; empty when there are no blocks.
    pub fn attention_states(&self, g: &mut Graph, store: &ParamStore, image: Var, text: Var) -> Result<Vec<BlockStates>> {
        self.check(g, image, text)?;
        let mut x = image;
        let mut states = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let s = block.forward(g, store, x, text);
            x = s.after_ffn;
            states.push(s);
        }
        if !g.value(x).is_finite() {
            return Err(Error::NonFinite("attention prompting output".into()));
        }
        Ok(states)
    }

    /// `F_{I_A}`; with `enabled = false` the input passes through.
    pub fn attention_prompt(&self, g: &mut Graph, store: &ParamStore, image: Var, text: Var, enabled: bool) -> Result<Var> {
        if !enabled {
            self.check(g, image, text)?;
            return Ok(image);
        }
        let states = self.attention_states(g, store, image, text)?;
        Ok(states.last().map_or(image, |s| s.after_ffn))
    }

    pub fn text_to_conv(&self, g: &mut Graph, store: &ParamStore, text: Var) -> ConvParams {
        let flat = self.text_to_conv.forward(g, store, text);
        let n = self.dim * self.kernel * self.kernel;
        let w = g.slice_cols(flat, 0, n);
        let weight = g.transpose(w);
        let bias = g.slice_cols(flat, n, 1);
        ConvParams { weight, bias }
    }

    /// Token-resolution logits `N × 1` from the dynamic convolution.
    pub fn conv_logits(&self, g: &mut Graph, features: Var, params: ConvParams) -> Var {
        let cols = if self.kernel == 1 { features } else { g.im2col(features, self.grid_h, self.grid_w, self.kernel) };
        let y = g.matmul(cols, params.weight);
        g.add_row(y, params.bias)
    }

    /// Token-resolution logits `N × 1` from `⟨F_{I_A}, F_T⟩ / √D`.
    pub fn dot_logits(&self, g: &mut Graph, features: Var, text: Var) -> Var {
        let t = g.transpose(text);
        let dot = g.matmul(features, t);
        g.scale(dot, 1.0 / (self.dim as f64).sqrt())
    }

    /// `sigmoid(upsample(logits))`, `(H·W) × 1`.
    pub fn score_map(&self, g: &mut Graph, logits: Var) -> Var {
        let up = g.spatial(logits, self.upsample.clone());
        g.sigmoid(up)
    }

    /// Token-resolution logits for one prompt.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        text: Var,
        attention_prompting: bool,
        conv_prompting: bool,
    ) -> Result<Var> {
        let features = self.attention_prompt(g, store, image, text, attention_prompting)?;
        let features = self.norm.forward(g, store, features);
        Ok(if conv_prompting {
            let params = self.text_to_conv(g, store, text);
            self.conv_logits(g, features, params)
        } else {
            self.dot_logits(g, features, text)
        })
    }

    /// Score map `S` for one (image, prompt) pair.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        text: Var,
        attention_prompting: bool,
        conv_prompting: bool,
    ) -> Result<Var> {
        let logits = self.logits(g, store, image, text, attention_prompting, conv_prompting)?;
        Ok(self.score_map(g, logits))
    }
}
