//! The two color-conditioning pathways.
//!
//! The high-level color extractor encodes the reference image with a small
//! strided conv stack, lifts the mean summary plus the spatial tokens to the
//! model width, and lets `N` learned queries attend jointly with them; the
//! first `N` outputs are the color tokens `F_H`. The low-level color guider
//! is a trainable copy of the denoiser run once over the clean reference
//! frame at `t = 0`; the vision tokens after each of its blocks form the
//! reference token stack.

use crate::backbone::{self, BlockCond, DenoiseInput, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::layers;
use crate::nn::{Graph, Init, ParameterStore, Scalar, Tensor, Var};

pub const HCE: &str = "hce";
pub const LCG: &str = "lcg";
pub const DIT: &str = "dit";
/// Prefix of the per-block cross-attention layers reading `F_H`.
pub const XATTN: &str = "hce.xattn";

const CONV_KERNEL: usize = 3;

/// Registers the extractor: encoder, aggregation MLP, queries, Q-Former and
/// the per-block cross-attention layers (zero output projection).
pub fn init_hce(store: &mut ParameterStore, init: &mut Init, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    let mut cin = 3;
    for (i, &c) in cfg.enc_channels.iter().enumerate() {
        let fan_in = CONV_KERNEL * CONV_KERNEL * cin;
        let std = (2.0 / fan_in as f64).sqrt();
        store.insert(format!("{HCE}.enc.conv{i}.weight"), init.normal(&[fan_in, c], std))?;
        store.insert(format!("{HCE}.enc.conv{i}.bias"), Tensor::zeros(&[c]))?;
        cin = c;
    }
    let d = cfg.d;
    layers::init_mlp(store, init, &format!("{HCE}.agg"), cfg.enc_dim(), d, d)?;
    store.insert(format!("{HCE}.query"), init.normal(&[cfg.color_tokens, d], 0.5))?;
    for j in 0..cfg.qformer_blocks {
        let p = format!("{HCE}.qformer.{j}");
        layers::init_layer_norm(store, &format!("{p}.ln1"), d)?;
        layers::init_attention(store, init, &format!("{p}.attn"), d, false)?;
        layers::init_layer_norm(store, &format!("{p}.ln2"), d)?;
        layers::init_mlp(store, init, &format!("{p}.mlp"), d, cfg.mlp_ratio * d, d)?;
    }
    for i in 0..cfg.blocks {
        layers::init_attention(store, init, &format!("{XATTN}.{i}"), d, true)?;
    }
    Ok(())
}

/// Converts packed RGB bytes of `B` references into an NHWC tensor on `[−1, 1]`.
pub fn reference_tensor<S: Scalar>(refs: &[&[u8]], cfg: &ModelConfig) -> Result<Tensor<S>> {
    let n = cfg.height * cfg.width * 3;
    let mut data = Vec::with_capacity(refs.len() * n);
    for r in refs {
        if r.len() != n {
            return Err(Error::Input(format!(
                "reference of {} bytes, expected {}x{}x3",
                r.len(),
                cfg.height,
                cfg.width
            )));
        }
        data.extend(r.iter().map(|&b| S::of(crate::latent::byte_to_unit(b) as f64)));
    }
    Tensor::from_vec(&[refs.len(), cfg.height, cfg.width, 3], data)
}

/// Encoder outputs: `F_sum: [B, 1, d_e]`, `F_spa: [B, M, d_e]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    pub f_sum: Var,
    pub f_spa: Var,
}

pub fn encode_image<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    image: Var,
) -> Result<EncoderFeatures> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[1] != cfg.height || s[2] != cfg.width || s[3] != 3 {
        return Err(Error::shape(
            "encode_image",
            format!("reference {s:?}, expected [B, {}, {}, 3]", cfg.height, cfg.width),
        ));
    }
    let b = s[0];
    let mut x = image;
    for i in 0..cfg.enc_channels.len() {
        let w = g.param(store, &format!("{HCE}.enc.conv{i}.weight"))?;
        let bias = g.param(store, &format!("{HCE}.enc.conv{i}.bias"))?;
        x = g.conv2d(x, w, bias, CONV_KERNEL, 2)?;
        x = g.gelu(x);
    }
    let m = cfg.enc_tokens();
    let f_spa = g.reshape(x, &[b, m, cfg.enc_dim()])?;
    let f_sum = g.mean_axis1(f_spa)?;
    let f_sum = g.reshape(f_sum, &[b, 1, cfg.enc_dim()])?;
    Ok(EncoderFeatures { f_sum, f_spa })
}

/// `[F_sum ; F_spa]` mapped token-wise to the model width: `[B, M + 1, d]`.
pub fn aggregate<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    feats: EncoderFeatures,
) -> Result<Var> {
    let x = g.concat(&[feats.f_sum, feats.f_spa], 1)?;
    layers::mlp(g, store, &format!("{HCE}.agg"), x)
}

/// Joint self-attention of the learned queries with `f_radio: [B, M', d]`;
/// returns the first `N` rows, `[B, N, d]`.
pub fn qformer<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    f_radio: Var,
) -> Result<Var> {
    let s = g.shape(f_radio).to_vec();
    if s.len() != 3 || s[2] != cfg.d || s[1] == 0 {
        return Err(Error::shape("qformer", format!("features {s:?}, width {}", cfg.d)));
    }
    let q = g.param(store, &format!("{HCE}.query"))?;
    let q = g.broadcast_batch(q, s[0]);
    let mut x = g.concat(&[q, f_radio], 1)?;
    for j in 0..cfg.qformer_blocks {
        let p = format!("{HCE}.qformer.{j}");
        let h = layers::layer_norm(g, store, &format!("{p}.ln1"), x)?;
        let a = layers::attention(g, store, &format!("{p}.attn"), h, h, cfg.heads)?;
        x = g.add(x, a)?;
        let h = layers::layer_norm(g, store, &format!("{p}.ln2"), x)?;
        let m = layers::mlp(g, store, &format!("{p}.mlp"), h)?;
        x = g.add(x, m)?;
    }
    g.slice(x, 1, 0, cfg.color_tokens)
}

/// Color tokens `F_H: [B, N, d]` of a batch of references `[B, H, W, 3]`.
pub fn color_tokens<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    image: Var,
) -> Result<Var> {
    let feats = encode_image(g, store, cfg, image)?;
    let f_radio = aggregate(g, store, feats)?;
    qformer(g, store, cfg, f_radio)
}

/// Copies the denoiser into the guider's parameter slot.
pub fn init_lcg_from_dit(store: &mut ParameterStore) -> Result<()> {
    if !store.has_prefix(&format!("{DIT}.")) {
        return Err(Error::Prerequisite("no denoiser weights to copy into the color guider".into()));
    }
    let stale: Vec<String> = store.names().filter(|n| n.starts_with(&format!("{LCG}."))).cloned().collect();
    for n in stale {
        store.remove(&n);
    }
    store.copy_prefix(&format!("{DIT}."), &format!("{LCG}."));
    Ok(())
}

/// Single-frame inputs of the guider for `B` references.
#[derive(Clone, Debug)]
pub struct ReferenceInput<S: Scalar = f32> {
    /// Clean latent of the reference frame, `[B, h·w, latent_ch]`.
    pub latent: Tensor<S>,
    /// The reference's own sketch latent, `[B, h·w, sketch_ch]`.
    pub sketch: Tensor<S>,
    pub captions: Vec<Vec<u16>>,
}

/// Runs the guider and returns the vision tokens after each block, each `[B, h·w, d]`.
pub fn lcg_forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    input: &ReferenceInput<S>,
) -> Result<Vec<Var>> {
    if !store.has_prefix(&format!("{LCG}.")) {
        return Err(Error::Prerequisite("color guider weights are not initialized".into()));
    }
    let b = input.captions.len();
    let inp = DenoiseInput {
        z_t: input.latent.clone(),
        sketch: input.sketch.clone(),
        captions: input.captions.clone(),
        t: vec![0; b],
        frames: 1,
    };
    let state = backbone::embed(g, store, cfg, LCG, &inp)?;
    let (_, stack) = backbone::run_blocks(g, store, cfg, LCG, state, &BlockCond::default(), true)?;
    Ok(stack)
}

/// A computed reference token stack detached from any graph, reusable at
/// every denoising step of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RefTokenStack<S: Scalar = f32> {
    pub tokens: Vec<Tensor<S>>,
}

impl<S: Scalar> RefTokenStack<S> {
    pub fn compute(store: &ParameterStore<S>, cfg: &ModelConfig, input: &ReferenceInput<S>) -> Result<Self> {
        let mut g = Graph::new();
        let vars = lcg_forward(&mut g, store, cfg, input)?;
        Ok(RefTokenStack {
            tokens: vars.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    /// Places the stack on `g` as constants.
    pub fn load(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.tokens.iter().map(|t| g.constant(t.clone())).collect()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tokens.len() == other.tokens.len()
            && self.tokens.iter().zip(&other.tokens).all(|(a, b)| a.bit_eq(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::synthgen::caption;

    fn tiny() -> ModelConfig {
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
            qformer_blocks: 2,
            ..Default::default()
        }
    }

    fn store(cfg: &ModelConfig) -> ParameterStore {
        let mut rng = RngStream::new(4, "init");
        let mut s = ParameterStore::new();
        let mut init = Init { rng: &mut rng };
        backbone::init_dit(&mut s, &mut init, cfg, DIT).unwrap();
        init_hce(&mut s, &mut init, cfg).unwrap();
        s
    }

    fn randomize(s: &mut ParameterStore, prefix: &str) {
        let mut rng = RngStream::new(17, "randomize");
        for (n, p) in s.iter_mut() {
            if n.starts_with(prefix) {
                for v in p.value.data_mut() {
                    *v = 0.3 * rng.normal() as f32;
                }
            }
        }
    }

    fn image(seed: u64, cfg: &ModelConfig, b: usize) -> Tensor {
        let mut rng = RngStream::new(seed, "img");
        Tensor::from_vec(
            &[b, cfg.height, cfg.width, 3],
            (0..b * cfg.height * cfg.width * 3).map(|_| rng.range(-1.0, 1.0) as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn encoder_shapes_and_constant_input() {
        let cfg = tiny();
        let mut s = store(&cfg);
        randomize(&mut s, "hce.enc");
        let mut g = Graph::new();
        let img = g.constant(Tensor::full(&[2, 16, 16, 3], 0.3));
        let f = encode_image(&mut g, &s, &cfg, img).unwrap();
        assert_eq!(g.shape(f.f_spa), [2, cfg.enc_tokens(), 8]);
        assert_eq!(cfg.enc_tokens(), 16);
        let spa = g.value(f.f_spa).data();
        let sum = g.value(f.f_sum).data();
        for tok in spa.chunks(8) {
            assert_eq!(tok, &spa[..8]);
        }
        for (a, b) in sum[..8].iter().zip(&spa[..8]) {
            assert!((a - b).abs() < 1e-6);
        }
        let fr = aggregate(&mut g, &s, f).unwrap();
        assert_eq!(g.shape(fr), [2, cfg.enc_tokens() + 1, cfg.d]);
        let fh = qformer(&mut g, &s, &cfg, fr).unwrap();
        assert_eq!(g.shape(fh), [2, cfg.color_tokens, cfg.d]);
        let wrong = g.constant(Tensor::zeros(&[1, 8, 16, 3]));
        assert!(encode_image(&mut g, &s, &cfg, wrong).is_err());
    }

    #[test]
    fn aggregate_matches_matmul_oracle_and_maps_zero_to_zero() {
        let cfg = tiny();
        let mut s = store(&cfg);
        randomize(&mut s, "hce.agg");
        let s64 = s.cast::<f64>();
        let mut rng = RngStream::new(2, "feat");
        let de = cfg.enc_dim();
        let m = 3;
        let sum: Vec<f64> = (0..de).map(|_| rng.normal()).collect();
        let spa: Vec<f64> = (0..m * de).map(|_| rng.normal()).collect();
        let mut g = Graph::<f64>::new();
        let f_sum = g.constant(Tensor::from_vec(&[1, 1, de], sum.clone()).unwrap());
        let f_spa = g.constant(Tensor::from_vec(&[1, m, de], spa.clone()).unwrap());
        let out = aggregate(&mut g, &s64, EncoderFeatures { f_sum, f_spa }).unwrap();
        let get = |n: &str| s64.get(n).unwrap().value.data().to_vec();
        let (w1, b1, w2, b2) = (get("hce.agg.fc1.weight"), get("hce.agg.fc1.bias"), get("hce.agg.fc2.weight"), get("hce.agg.fc2.bias"));
        let d = cfg.d;
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
        let rows: Vec<&[f64]> = std::iter::once(&sum[..]).chain(spa.chunks(de)).collect();
        let mut want = Vec::new();
        for r in rows {
            let h: Vec<f64> = (0..d).map(|o| gelu(b1[o] + (0..de).map(|i| r[i] * w1[i * d + o]).sum::<f64>())).collect();
            want.extend((0..d).map(|o| b2[o] + (0..d).map(|i| h[i] * w2[i * d + o]).sum::<f64>()));
        }
        let err = g.value(out).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");

        // zero-bias MLP on zero features
        for n in ["hce.agg.fc1.bias", "hce.agg.fc2.bias"] {
            s.get_mut(n).unwrap().value.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 1, de]));
        let zs = g.constant(Tensor::zeros(&[1, m, de]));
        let out = aggregate(&mut g, &s, EncoderFeatures { f_sum: z, f_spa: zs }).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qformer_ignores_feature_order() {
        let cfg = tiny();
        let mut s = store(&cfg);
        randomize(&mut s, "hce");
        let mut rng = RngStream::new(8, "rows");
        for _ in 0..20 {
            let m = 5;
            let rows: Vec<Vec<f32>> = (0..m).map(|_| rng.normal_vec_f32(cfg.d)).collect();
            let mut perm: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                perm.swap(i, rng.below(i + 1));
            }
            let run = |order: &[usize]| {
                let mut g = Graph::new();
                let data: Vec<f32> = order.iter().flat_map(|&i| rows[i].clone()).collect();
                let x = g.constant(Tensor::from_vec(&[1, m, cfg.d], data).unwrap());
                let out = qformer(&mut g, &s, &cfg, x).unwrap();
                g.value(out).clone()
            };
            let a = run(&(0..m).collect::<Vec<_>>());
            let b = run(&perm);
            assert!(a.max_abs_diff(&b) < 1e-6);
        }
    }

    #[test]
    fn qformer_with_single_zero_token_matches_oracle() {
        let cfg = ModelConfig { qformer_blocks: 1, ..tiny() };
        let mut s = store(&cfg);
        randomize(&mut s, "hce");
        let s = s.cast::<f64>();
        let mut g = Graph::<f64>::new();
        let zero = g.constant(Tensor::zeros(&[1, 1, cfg.d]));
        let out = qformer(&mut g, &s, &cfg, zero).unwrap();
        let got = g.value(out).data().to_vec();

        let get = |n: &str| s.get(&format!("hce.{n}")).unwrap().value.data().to_vec();
        let d = cfg.d;
        let lin = |n: &str, v: &[f64]| -> Vec<f64> {
            let w = get(&format!("{n}.weight"));
            let b = get(&format!("{n}.bias"));
            let dout = b.len();
            (0..dout).map(|o| b[o] + v.iter().enumerate().map(|(i, x)| x * w[i * dout + o]).sum::<f64>()).collect()
        };
        let ln = |n: &str, v: &[f64]| -> Vec<f64> {
            let (ga, be) = (get(&format!("{n}.gain")), get(&format!("{n}.bias")));
            let k = v.len() as f64;
            let m = v.iter().sum::<f64>() / k;
            let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / k;
            v.iter().enumerate().map(|(j, a)| (a - m) / (var + 1e-5).sqrt() * ga[j] + be[j]).collect()
        };
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
        let q = get("query");
        let mut x: Vec<Vec<f64>> = q.chunks(d).map(|r| r.to_vec()).collect();
        x.push(vec![0.0; d]);
        let h: Vec<_> = x.iter().map(|r| ln("qformer.0.ln1", r)).collect();
        let qs: Vec<_> = h.iter().map(|r| lin("qformer.0.attn.q", r)).collect();
        let ks: Vec<_> = h.iter().map(|r| lin("qformer.0.attn.k", r)).collect();
        let vs: Vec<_> = h.iter().map(|r| lin("qformer.0.attn.v", r)).collect();
        let dh = d / cfg.heads;
        let mut want = Vec::new();
        for (qi, xr) in qs.iter().zip(&x).take(cfg.color_tokens) {
            let mut cat = vec![0.0; d];
            for hd in 0..cfg.heads {
                let r = hd * dh..(hd + 1) * dh;
                let lg: Vec<f64> = ks.iter().map(|k| qi[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()).collect();
                let mx = lg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = lg.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, v) in e.iter().zip(&vs) {
                    for c in r.clone() {
                        cat[c] += w / z * v[c];
                    }
                }
            }
            let a = lin("qformer.0.attn.o", &cat);
            let x1: Vec<f64> = xr.iter().zip(&a).map(|(p, q)| p + q).collect();
            let h2 = ln("qformer.0.ln2", &x1);
            let f: Vec<f64> = lin("qformer.0.mlp.fc1", &h2).into_iter().map(gelu).collect();
            let f = lin("qformer.0.mlp.fc2", &f);
            want.extend(x1.iter().zip(&f).map(|(p, q)| p + q));
        }
        let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    fn ref_input(cfg: &ModelConfig, seed: u64) -> ReferenceInput {
        let mut rng = RngStream::new(seed, "ref");
        let l = cfg.cells_per_frame();
        ReferenceInput {
            latent: Tensor::from_vec(&[1, l, cfg.latent_ch()], (0..l * cfg.latent_ch()).map(|_| rng.range(-1.0, 1.0) as f32).collect()).unwrap(),
            sketch: Tensor::from_vec(&[1, l, cfg.sketch_ch()], (0..l * cfg.sketch_ch()).map(|_| if rng.uniform() < 0.3 { -1.0 } else { 1.0 }).collect()).unwrap(),
            captions: vec![vec![caption::BOS, 3, 11]],
        }
    }

    #[test]
    fn guider_requires_copy_and_matches_denoiser_after_copy() {
        let cfg = tiny();
        let mut s = store(&cfg);
        randomize(&mut s, "dit");
        let inp = ref_input(&cfg, 1);
        assert!(matches!(RefTokenStack::compute(&s, &cfg, &inp), Err(Error::Prerequisite(_))));
        init_lcg_from_dit(&mut s).unwrap();
        assert!(s.prefix_bit_eq("lcg.", &s, "dit."));
        let stack = RefTokenStack::compute(&s, &cfg, &inp).unwrap();
        assert_eq!(stack.tokens.len(), cfg.blocks);
        assert_eq!(stack.tokens[0].shape(), [1, cfg.cells_per_frame(), cfg.d]);
        assert!(stack.bit_eq(&RefTokenStack::compute(&s, &cfg, &inp).unwrap()));

        let mut g = Graph::new();
        let dinp = DenoiseInput {
            z_t: inp.latent.clone(),
            sketch: inp.sketch.clone(),
            captions: inp.captions.clone(),
            t: vec![0],
            frames: 1,
        };
        let st = backbone::embed(&mut g, &s, &cfg, DIT, &dinp).unwrap();
        let (_, own) = backbone::run_blocks(&mut g, &s, &cfg, DIT, st, &BlockCond::default(), true).unwrap();
        for (a, b) in own.iter().zip(&stack.tokens) {
            assert!(g.value(*a).bit_eq(b));
        }
    }

    #[test]
    fn hce_size_does_not_depend_on_clip_length() {
        let a = tiny();
        let b = ModelConfig { frames: 7, ..tiny() };
        assert_eq!(store(&a).numel_with_prefix("hce."), store(&b).numel_with_prefix("hce."));
    }

    #[test]
    fn reference_images_differ_in_summary() {
        let cfg = tiny();
        let mut s = store(&cfg);
        randomize(&mut s, "hce.enc");
        let mut g = Graph::new();
        let a = g.constant(image(1, &cfg, 1));
        let b = g.constant(image(2, &cfg, 1));
        let fa = encode_image(&mut g, &s, &cfg, a).unwrap();
        let fb = encode_image(&mut g, &s, &cfg, b).unwrap();
        assert!(!g.value(fa.f_sum).bit_eq(g.value(fb.f_sum)));
    }
}
