//! The sketch-conditioned denoising transformer.
//!
//! Vision tokens are projections of the channel concatenation of the noisy
//! latent and the sketch latent at each cell, plus factorized learned
//! positions. Text tokens are caption embeddings plus positions. Each block
//! runs adaptive-norm self-attention over `[text ; vision ; R_i]` (keeping
//! only the text and vision outputs), an optional cross-attention from the
//! vision tokens to the color tokens, and an adaptive-norm MLP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers;
use crate::nn::{Graph, Init, ParameterStore, Scalar, Tensor, Var};
use crate::synthgen::caption;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_len: usize,
    pub vocab: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Width of the sinusoidal timestep features.
    pub t_freq: usize,
    /// Number of color tokens `N`.
    pub color_tokens: usize,
    /// Output channels of the reference encoder's stride-2 stages.
    pub enc_channels: Vec<usize>,
    pub qformer_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            text_len: caption::CAPTION_LEN,
            vocab: caption::vocab_size(),
            frames: 8,
            height: 32,
            width: 32,
            patch: 4,
            t_freq: 64,
            color_tokens: 8,
            enc_channels: vec![32, 64, 96, 128],
            qformer_blocks: 2,
        }
    }
}

impl ModelConfig {
    /// A minimal model on 2-frame 16x16 clips, for self-tests.
    pub fn tiny() -> Self {
        ModelConfig {
            d: 16,
            blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            frames: 2,
            height: 16,
            width: 16,
            patch: 8,
            t_freq: 8,
            color_tokens: 3,
            enc_channels: vec![4, 8],
            qformer_blocks: 1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("text_len", self.text_len),
            ("vocab", self.vocab),
            ("frames", self.frames),
            ("patch", self.patch),
            ("t_freq", self.t_freq),
            ("color_tokens", self.color_tokens),
            ("qformer_blocks", self.qformer_blocks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.t_freq % 2 != 0 {
            return Err(Error::Config("model.t_freq must be even".into()));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "{}x{} frames not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.enc_channels.is_empty() {
            return Err(Error::Config("model.enc_channels must list at least one stage".into()));
        }
        let f = 1 << self.enc_channels.len();
        if self.height % f != 0 || self.width % f != 0 {
            return Err(Error::Config(format!(
                "{}x{} reference not divisible by encoder stride {f}",
                self.height, self.width
            )));
        }
        if self.vocab < caption::vocab_size() {
            return Err(Error::Config(format!(
                "vocabulary of {} is smaller than the caption vocabulary ({})",
                self.vocab,
                caption::vocab_size()
            )));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch
    }

    /// Channels of a color latent cell.
    pub fn latent_ch(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Channels of a sketch latent cell.
    pub fn sketch_ch(&self) -> usize {
        self.patch * self.patch
    }

    /// Vision tokens per frame.
    pub fn cells_per_frame(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn vision_tokens(&self) -> usize {
        self.frames * self.cells_per_frame()
    }

    pub fn token_count(&self) -> usize {
        self.text_len + self.vision_tokens()
    }

    /// Spatial tokens of the reference encoder.
    pub fn enc_tokens(&self) -> usize {
        let f = 1 << self.enc_channels.len();
        (self.height / f) * (self.width / f)
    }

    pub fn enc_dim(&self) -> usize {
        *self.enc_channels.last().unwrap()
    }
}

/// Inputs of one denoiser call over a batch.
#[derive(Clone, Debug)]
pub struct DenoiseInput<S: Scalar = f32> {
    /// Noisy latents, `[B, frames·h·w, latent_ch]`.
    pub z_t: Tensor<S>,
    /// Sketch latents, `[B, frames·h·w, sketch_ch]`.
    pub sketch: Tensor<S>,
    /// One caption of at most `text_len` ids per batch row.
    pub captions: Vec<Vec<u16>>,
    /// One timestep per batch row.
    pub t: Vec<usize>,
    /// Frames represented in the vision tokens.
    pub frames: usize,
}

impl<S: Scalar> DenoiseInput<S> {
    pub fn batch(&self) -> usize {
        self.t.len()
    }
}

/// Embedded token sequence `[B, Lt + Lv, d]` with its conditioning vector `[B, d]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenState {
    pub tokens: Var,
    pub cond: Var,
    pub lt: usize,
    pub lv: usize,
}

/// Optional conditioning handed to the blocks.
#[derive(Clone, Debug, Default)]
pub struct BlockCond {
    /// Color tokens `[B, N, d]`, consumed by cross-attention under `xattn_prefix`.
    pub f_h: Option<Var>,
    pub xattn_prefix: String,
    /// One `[B, Lref, d]` token set per block.
    pub refs: Option<Vec<Var>>,
}

/// Registers the denoiser's parameters under `prefix`.
pub fn init_dit(store: &mut ParameterStore, init: &mut Init, cfg: &ModelConfig, prefix: &str) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d;
    layers::init_linear(store, init, &format!("{prefix}.vis_in"), cfg.latent_ch() + cfg.sketch_ch(), d, false)?;
    store.insert(format!("{prefix}.pos_t"), init.normal(&[cfg.frames, d], 0.02))?;
    store.insert(format!("{prefix}.pos_r"), init.normal(&[cfg.grid_h(), d], 0.02))?;
    store.insert(format!("{prefix}.pos_c"), init.normal(&[cfg.grid_w(), d], 0.02))?;
    store.insert(format!("{prefix}.txt_emb"), init.normal(&[cfg.vocab, d], 0.02))?;
    store.insert(format!("{prefix}.txt_pos"), init.normal(&[cfg.text_len, d], 0.02))?;
    layers::init_mlp(store, init, &format!("{prefix}.t_mlp"), cfg.t_freq, d, d)?;
    for i in 0..cfg.blocks {
        let b = format!("{prefix}.blocks.{i}");
        layers::init_linear(store, init, &format!("{b}.ada"), d, 6 * d, true)?;
        layers::init_attention(store, init, &format!("{b}.attn"), d, false)?;
        layers::init_mlp(store, init, &format!("{b}.mlp"), d, cfg.mlp_ratio * d, d)?;
    }
    layers::init_linear(store, init, &format!("{prefix}.final.ada"), d, 2 * d, true)?;
    layers::init_linear(store, init, &format!("{prefix}.final.out"), d, cfg.latent_ch(), true)
}

/// Sinusoidal features of integer timesteps, `[B, dim]`.
pub fn timestep_features<S: Scalar>(t: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let mut sin = Vec::with_capacity(half);
        let mut cos = Vec::with_capacity(half);
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let a = ti as f64 * freq;
            sin.push(S::of(a.sin()));
            cos.push(S::of(a.cos()));
        }
        data.extend(sin);
        data.extend(cos);
    }
    Tensor::from_vec(&[t.len(), dim], data).expect("timestep features")
}

/// Builds the token sequence and conditioning vector.
pub fn embed<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    prefix: &str,
    input: &DenoiseInput<S>,
) -> Result<TokenState> {
    let b = input.batch();
    let lv = input.frames * cfg.cells_per_frame();
    let (zc, sc) = (cfg.latent_ch(), cfg.sketch_ch());
    if b == 0 || input.frames == 0 || input.frames > cfg.frames {
        return Err(Error::Input(format!(
            "batch of {b} with {} frames (model holds {})",
            input.frames, cfg.frames
        )));
    }
    if input.z_t.shape() != [b, lv, zc] {
        return Err(Error::shape("embed", format!("z_t {:?}, expected {:?}", input.z_t.shape(), [b, lv, zc])));
    }
    if input.sketch.shape() != [b, lv, sc] {
        return Err(Error::shape(
            "embed",
            format!("sketch {:?}, expected {:?}", input.sketch.shape(), [b, lv, sc]),
        ));
    }
    if input.captions.len() != b {
        return Err(Error::Input(format!("{} captions for batch {b}", input.captions.len())));
    }
    let lt = cfg.text_len;
    let mut ids = Vec::with_capacity(b * lt);
    for c in &input.captions {
        if c.len() > lt {
            return Err(Error::Input(format!("caption of {} tokens exceeds {lt}", c.len())));
        }
        ids.extend(c.iter().map(|&i| i as usize));
        ids.extend(std::iter::repeat(caption::PAD as usize).take(lt - c.len()));
    }

    let z = g.constant(input.z_t.clone());
    let s = g.constant(input.sketch.clone());
    let zs = g.concat(&[z, s], 2)?;
    let vis = layers::linear(g, store, &format!("{prefix}.vis_in"), zs)?;
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let cells: Vec<(usize, usize, usize)> = (0..input.frames)
        .flat_map(|f| (0..gh).flat_map(move |i| (0..gw).map(move |j| (f, i, j))))
        .collect();
    let pos_t = g.param(store, &format!("{prefix}.pos_t"))?;
    let pos_r = g.param(store, &format!("{prefix}.pos_r"))?;
    let pos_c = g.param(store, &format!("{prefix}.pos_c"))?;
    let pt = g.gather(pos_t, &cells.iter().map(|c| c.0).collect::<Vec<_>>())?;
    let pr = g.gather(pos_r, &cells.iter().map(|c| c.1).collect::<Vec<_>>())?;
    let pc = g.gather(pos_c, &cells.iter().map(|c| c.2).collect::<Vec<_>>())?;
    let pos = g.add(pt, pr)?;
    let pos = g.add(pos, pc)?;
    let vis = g.add_suffix(vis, pos)?;

    let emb = g.param(store, &format!("{prefix}.txt_emb"))?;
    let txt = g.gather(emb, &ids)?;
    let txt = g.reshape(txt, &[b, lt, cfg.d])?;
    let txt_pos = g.param(store, &format!("{prefix}.txt_pos"))?;
    let txt = g.add_suffix(txt, txt_pos)?;
    let tokens = g.concat(&[txt, vis], 1)?;

    let tf = g.constant(timestep_features(&input.t, cfg.t_freq));
    let temb = layers::linear(g, store, &format!("{prefix}.t_mlp.fc1"), tf)?;
    let temb = g.silu(temb);
    let temb = layers::linear(g, store, &format!("{prefix}.t_mlp.fc2"), temb)?;
    let cond = g.silu(temb);
    Ok(TokenState { tokens, cond, lt, lv })
}

/// Splits an adaptive-norm projection of `cond` into `k` vectors of width `d`.
fn modulation<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    prefix: &str,
    cond: Var,
    d: usize,
    k: usize,
) -> Result<Vec<Var>> {
    let m = layers::linear(g, store, prefix, cond)?;
    (0..k).map(|i| g.slice(m, 1, i * d, d)).collect()
}

fn check_width<S: Scalar>(g: &Graph<S>, what: &str, v: Var, b: usize, d: usize) -> Result<()> {
    let s = g.shape(v);
    if s.len() != 3 || s[0] != b || s[2] != d {
        return Err(Error::shape(
            "dit_block",
            format!("{what} {s:?}, expected [{b}, _, {d}]"),
        ));
    }
    Ok(())
}

/// One transformer block.
#[allow(clippy::too_many_arguments)]
pub fn dit_block<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    prefix: &str,
    index: usize,
    state: TokenState,
    r_i: Option<Var>,
    f_h: Option<(Var, &str)>,
) -> Result<TokenState> {
    let d = cfg.d;
    let p = format!("{prefix}.blocks.{index}");
    let b = g.shape(state.tokens)[0];
    let len = state.lt + state.lv;
    let m = modulation(g, store, &format!("{p}.ada"), state.cond, d, 6)?;

    let x = state.tokens;
    let joint = match r_i {
        Some(r) => {
            check_width(g, "R_i", r, b, d)?;
            g.concat(&[x, r], 1)?
        }
        None => x,
    };
    let h = g.layer_norm(joint, None, None)?;
    let h = g.modulate(h, m[0], m[1])?;
    let q = if r_i.is_some() { g.slice(h, 1, 0, len)? } else { h };
    let a = layers::attention(g, store, &format!("{p}.attn"), q, h, cfg.heads)?;
    let mut x = g.gated_add(x, m[2], a)?;

    if let Some((fh, xp)) = f_h {
        check_width(g, "F_H", fh, b, d)?;
        let txt = g.slice(x, 1, 0, state.lt)?;
        let vis = g.slice(x, 1, state.lt, state.lv)?;
        let qn = g.layer_norm(vis, None, None)?;
        let c = layers::attention(g, store, &format!("{xp}.{index}"), qn, fh, cfg.heads)?;
        let vis = g.add(vis, c)?;
        x = g.concat(&[txt, vis], 1)?;
    }

    let h = g.layer_norm(x, None, None)?;
    let h = g.modulate(h, m[3], m[4])?;
    let y = layers::mlp(g, store, &format!("{p}.mlp"), h)?;
    let x = g.gated_add(x, m[5], y)?;
    Ok(TokenState { tokens: x, ..state })
}

/// Runs every block; returns the final state and the vision tokens after each block.
pub fn run_blocks<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    prefix: &str,
    mut state: TokenState,
    cond: &BlockCond,
    capture: bool,
) -> Result<(TokenState, Vec<Var>)> {
    if let Some(refs) = &cond.refs {
        if refs.len() != cfg.blocks {
            return Err(Error::Input(format!(
                "reference stack holds {} token sets for {} blocks",
                refs.len(),
                cfg.blocks
            )));
        }
    }
    let mut captured = Vec::new();
    for i in 0..cfg.blocks {
        let r = cond.refs.as_ref().map(|r| r[i]);
        let fh = cond.f_h.map(|f| (f, cond.xattn_prefix.as_str()));
        state = dit_block(g, store, cfg, prefix, i, state, r, fh)?;
        if capture {
            captured.push(g.slice(state.tokens, 1, state.lt, state.lv)?);
        }
    }
    Ok((state, captured))
}

/// Final adaptive norm and linear head over the vision tokens, `[B, Lv, latent_ch]`.
pub fn head<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    prefix: &str,
    state: TokenState,
) -> Result<Var> {
    let m = modulation(g, store, &format!("{prefix}.final.ada"), state.cond, cfg.d, 2)?;
    let vis = g.slice(state.tokens, 1, state.lt, state.lv)?;
    let h = g.layer_norm(vis, None, None)?;
    let h = g.modulate(h, m[0], m[1])?;
    layers::linear(g, store, &format!("{prefix}.final.out"), h)
}

/// The ε-prediction for a batch, shaped like `input.z_t`.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    prefix: &str,
    input: &DenoiseInput<S>,
    cond: &BlockCond,
) -> Result<Var> {
    let state = embed(g, store, cfg, prefix, input)?;
    let (state, _) = run_blocks(g, store, cfg, prefix, state, cond, false)?;
    head(g, store, cfg, prefix, state)
}
