//! Differentiable network stack: a multi-scale sparse autoencoder
//! N^a = D o E emitting one latent coefficient grid per downsampling step,
//! and a residual adapter network U applied on top of it. All forward passes
//! and vector-Jacobian products are hand-derived over the fixed layer
//! vocabulary in [`layers`]; there is no general autodiff engine.

pub mod adam;
pub mod io;
pub mod layers;
pub mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::Image;
use layers::{pool2, pool2_backward, silu, silu_backward, upsample2, upsample2_backward, Conv2d};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("architecture descriptor mismatch: {0}")]
    Descriptor(String),
    #[error("malformed parameter file: {0}")]
    BadHeader(String),
    #[error("truncated parameter payload: expected {expected} values, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture descriptor; fully determines every parameter array shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Descriptor {
    /// Number of downsampling steps L in the autoencoder.
    pub scales: usize,
    /// Feature channels per scale, length `scales`.
    pub channels: Vec<usize>,
    /// Feature channels of the two adapter scales.
    pub adapter_channels: (usize, usize),
}

impl Default for Descriptor {
    fn default() -> Self {
        Descriptor {
            scales: 3,
            channels: vec![8, 16, 32],
            adapter_channels: (8, 16),
        }
    }
}

impl Descriptor {
    /// Per-level latent weight, 2^-l for level l = 1..=L. The coarse band
    /// lives in the level-L stack and carries the level-L weight.
    pub fn level_weight(&self, level: usize) -> f64 {
        debug_assert!(level >= 1 && level <= self.scales);
        0.5f64.powi(level as i32)
    }

    pub fn level_weights(&self) -> Vec<f64> {
        (1..=self.scales).map(|l| self.level_weight(l)).collect()
    }

    /// Latent channels at a level: a two-channel detail grid per level, plus
    /// the two-channel coarse grid folded into the deepest level.
    pub fn latent_channels(&self, level: usize) -> usize {
        if level == self.scales {
            4
        } else {
            2
        }
    }

    pub fn check_side(&self, side: usize) -> Result<(), NetError> {
        let factor = 1usize << self.scales;
        if side % factor != 0 {
            return Err(NetError::Shape(format!(
                "image side {side} not divisible by 2^{}",
                self.scales
            )));
        }
        Ok(())
    }

    pub fn encode_header(&self) -> String {
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        format!(
            "scales={} channels={} adapter={},{}",
            self.scales,
            ch.join(","),
            self.adapter_channels.0,
            self.adapter_channels.1
        )
    }

    pub fn parse_header(s: &str) -> Result<Self, NetError> {
        let mut scales = None;
        let mut channels = None;
        let mut adapter = None;
        for field in s.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| NetError::BadHeader(format!("bad descriptor field `{field}`")))?;
            match key {
                "scales" => {
                    scales = Some(value.parse::<usize>().map_err(|_| {
                        NetError::BadHeader(format!("bad scales `{value}`"))
                    })?)
                }
                "channels" => {
                    let parsed: Result<Vec<usize>, _> =
                        value.split(',').map(|v| v.parse::<usize>()).collect();
                    channels = Some(parsed.map_err(|_| {
                        NetError::BadHeader(format!("bad channels `{value}`"))
                    })?);
                }
                "adapter" => {
                    let mut it = value.split(',');
                    let a = it.next().and_then(|v| v.parse().ok());
                    let b = it.next().and_then(|v| v.parse().ok());
                    match (a, b) {
                        (Some(a), Some(b)) => adapter = Some((a, b)),
                        _ => {
                            return Err(NetError::BadHeader(format!(
                                "bad adapter channels `{value}`"
                            )))
                        }
                    }
                }
                other => {
                    return Err(NetError::BadHeader(format!(
                        "unknown descriptor field `{other}`"
                    )))
                }
            }
        }
        let desc = Descriptor {
            scales: scales.ok_or_else(|| NetError::BadHeader("missing scales".into()))?,
            channels: channels.ok_or_else(|| NetError::BadHeader("missing channels".into()))?,
            adapter_channels: adapter
                .ok_or_else(|| NetError::BadHeader("missing adapter channels".into()))?,
        };
        if desc.channels.len() != desc.scales || desc.scales == 0 {
            return Err(NetError::BadHeader(
                "channels list must have one entry per scale".into(),
            ));
        }
        Ok(desc)
    }
}

/// Multi-scale latent coefficient stack with per-level weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub levels: Vec<Tensor>,
    pub weights: Vec<f64>,
}

impl LatentCode {
    pub fn zeros_like(&self) -> Self {
        LatentCode {
            levels: self
                .levels
                .iter()
                .map(|t| Tensor::zeros(t.c, t.h, t.w))
                .collect(),
            weights: self.weights.clone(),
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        LatentCode {
            levels: self
                .levels
                .iter()
                .map(|t| Tensor {
                    c: t.c,
                    h: t.h,
                    w: t.w,
                    data: t.data.iter().map(|&v| f(v)).collect(),
                })
                .collect(),
            weights: self.weights.clone(),
        }
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        assert_eq!(self.levels.len(), other.levels.len());
        LatentCode {
            levels: self
                .levels
                .iter()
                .zip(&other.levels)
                .map(|(a, b)| {
                    assert_eq!(a.shape(), b.shape());
                    Tensor {
                        c: a.c,
                        h: a.h,
                        w: a.w,
                        data: a
                            .data
                            .iter()
                            .zip(&b.data)
                            .map(|(&x, &y)| f(x, y))
                            .collect(),
                    }
                })
                .collect(),
            weights: self.weights.clone(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn norm(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.levels
            .iter()
            .zip(&other.levels)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data))
            .map(|(x, y)| x * y)
            .sum()
    }

    pub fn coefficient_count(&self) -> usize {
        self.levels.iter().map(|t| t.data.len()).sum()
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Flat parameter-vector view shared by both networks; the block order is
/// fixed by `convs()` and is the serialization order.
pub trait ParamSet: Sized {
    fn convs(&self) -> Vec<&Conv2d>;
    fn convs_mut(&mut self) -> Vec<&mut Conv2d>;

    fn n_params(&self) -> usize {
        self.convs().iter().map(|c| c.param_count()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for c in self.convs() {
            out.extend_from_slice(&c.weight);
            out.extend_from_slice(&c.bias);
        }
        out
    }

    fn set_from_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for c in self.convs_mut() {
            let wl = c.weight.len();
            c.weight.copy_from_slice(&flat[pos..pos + wl]);
            pos += wl;
            let bl = c.bias.len();
            c.bias.copy_from_slice(&flat[pos..pos + bl]);
            pos += bl;
        }
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }

    /// self += a * other, blockwise.
    fn add_scaled(&mut self, other: &Self, a: f64) {
        let other_convs = other.convs();
        for (c, o) in self.convs_mut().into_iter().zip(other_convs) {
            for (w, ow) in c.weight.iter_mut().zip(&o.weight) {
                *w += a * ow;
            }
            for (b, ob) in c.bias.iter_mut().zip(&o.bias) {
                *b += a * ob;
            }
        }
    }

    fn scale(&mut self, a: f64) {
        for c in self.convs_mut() {
            for w in c.weight.iter_mut() {
                *w *= a;
            }
            for b in c.bias.iter_mut() {
                *b *= a;
            }
        }
    }

    fn squared_norm(&self) -> f64 {
        self.convs()
            .iter()
            .flat_map(|c| c.weight.iter().chain(c.bias.iter()))
            .map(|v| v * v)
            .sum()
    }
}

/// Encoder + decoder parameters (theta).
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams {
    pub desc: Descriptor,
    /// 3x3 convs c_{l-1} -> c_l, one per scale (c_0 = 1).
    pub enc_convs: Vec<Conv2d>,
    /// 1x1 latent heads c_l -> latent_channels(l), one per scale.
    pub enc_heads: Vec<Conv2d>,
    /// 1x1 latent_channels(L) -> c_L.
    pub dec_in: Conv2d,
    /// 3x3 convs c_{l+1} -> c_l for l = L-1 .. 1.
    pub dec_convs: Vec<Conv2d>,
    /// 1x1 latent injections latent_channels(l) -> c_l for l = L-1 .. 1.
    pub dec_inject: Vec<Conv2d>,
    /// 3x3 c_1 -> 1.
    pub dec_out: Conv2d,
}

impl AutoencoderParams {
    pub fn init(desc: Descriptor, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = desc.scales;
        let ch = &desc.channels;
        // the encoder is bias-free end to end, so an empty image region maps
        // to exactly zero latent coefficients for any weights; He scaling
        // keeps the latent magnitudes of the fresh network at unit order
        let enc_convs = (0..l)
            .map(|i| {
                let in_c = if i == 0 { 1 } else { ch[i - 1] };
                Conv2d::init_he_bias_free(in_c, ch[i], 3, &mut rng)
            })
            .collect();
        let enc_heads = (0..l)
            .map(|i| Conv2d::init_he_bias_free(ch[i], desc.latent_channels(i + 1), 1, &mut rng))
            .collect();
        let dec_in = Conv2d::init(desc.latent_channels(l), ch[l - 1], 1, &mut rng);
        let dec_convs = (1..l)
            .rev()
            .map(|i| Conv2d::init(ch[i], ch[i - 1], 3, &mut rng))
            .collect();
        let dec_inject = (1..l)
            .rev()
            .map(|i| Conv2d::init(desc.latent_channels(i), ch[i - 1], 1, &mut rng))
            .collect();
        let dec_out = Conv2d::init(ch[0], 1, 3, &mut rng);
        AutoencoderParams {
            desc,
            enc_convs,
            enc_heads,
            dec_in,
            dec_convs,
            dec_inject,
            dec_out,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.scale(0.0);
        z
    }

    /// All biases zeroed; with zero biases the whole map sends 0 to 0.
    pub fn zero_biases(&mut self) {
        for c in self.convs_mut() {
            c.bias.fill(0.0);
        }
    }
}

impl ParamSet for AutoencoderParams {
    fn convs(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = Vec::new();
        v.extend(self.enc_convs.iter());
        v.extend(self.enc_heads.iter());
        v.push(&self.dec_in);
        v.extend(self.dec_convs.iter());
        v.extend(self.dec_inject.iter());
        v.push(&self.dec_out);
        v
    }
    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v: Vec<&mut Conv2d> = Vec::new();
        v.extend(self.enc_convs.iter_mut());
        v.extend(self.enc_heads.iter_mut());
        v.push(&mut self.dec_in);
        v.extend(self.dec_convs.iter_mut());
        v.extend(self.dec_inject.iter_mut());
        v.push(&mut self.dec_out);
        v
    }
}

/// Adapter parameters (kappa): 2-scale residual U-net with a zero-initialized
/// output head, so the freshly initialized adapter is the identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub desc: Descriptor,
    pub conv_fine: Conv2d,   // 1 -> a1, 3x3
    pub conv_coarse: Conv2d, // a1 -> a2, 3x3 (after pooling)
    pub conv_up: Conv2d,     // a2 -> a1, 3x3 (after upsampling)
    pub head: Conv2d,        // a1 -> 1, 3x3, zero-initialized
}

impl AdapterParams {
    pub fn init(desc: Descriptor, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a1, a2) = desc.adapter_channels;
        AdapterParams {
            conv_fine: Conv2d::init(1, a1, 3, &mut rng),
            conv_coarse: Conv2d::init(a1, a2, 3, &mut rng),
            conv_up: Conv2d::init(a2, a1, 3, &mut rng),
            head: Conv2d::zeros(a1, 1, 3),
            desc,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.scale(0.0);
        z
    }
}

impl ParamSet for AdapterParams {
    fn convs(&self) -> Vec<&Conv2d> {
        vec![&self.conv_fine, &self.conv_coarse, &self.conv_up, &self.head]
    }
    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        vec![
            &mut self.conv_fine,
            &mut self.conv_coarse,
            &mut self.conv_up,
            &mut self.head,
        ]
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

pub struct EncodeTrace {
    conv_in: Vec<Tensor>,
    act_in: Vec<Tensor>,
    pooled: Vec<Tensor>,
}

pub fn encode_with_trace(
    ae: &AutoencoderParams,
    u: &Image,
) -> Result<(LatentCode, EncodeTrace), NetError> {
    ae.desc.check_side(u.side())?;
    let l = ae.desc.scales;
    let mut conv_in = Vec::with_capacity(l);
    let mut act_in = Vec::with_capacity(l);
    let mut pooled = Vec::with_capacity(l);
    let mut levels = Vec::with_capacity(l);
    let mut f = Tensor::from_image(u);
    for i in 0..l {
        let pre = ae.enc_convs[i].forward(&f);
        let act = silu(&pre);
        let p = pool2(&act);
        levels.push(ae.enc_heads[i].forward(&p));
        conv_in.push(f);
        act_in.push(pre);
        f = p.clone();
        pooled.push(p);
    }
    Ok((
        LatentCode {
            levels,
            weights: ae.desc.level_weights(),
        },
        EncodeTrace {
            conv_in,
            act_in,
            pooled,
        },
    ))
}

pub fn encode(ae: &AutoencoderParams, u: &Image) -> Result<LatentCode, NetError> {
    encode_with_trace(ae, u).map(|(code, _)| code)
}

/// Reverse-mode pass of the encoder. Returns the image cotangent and, when
/// `grads` is given, accumulates parameter gradients into it.
pub fn encode_vjp(
    ae: &AutoencoderParams,
    trace: &EncodeTrace,
    cot: &LatentCode,
    mut grads: Option<&mut AutoencoderParams>,
) -> Image {
    let l = ae.desc.scales;
    assert_eq!(cot.levels.len(), l, "cotangent level count mismatch");
    let mut g: Option<Tensor> = None;
    for i in (0..l).rev() {
        // gradient w.r.t. pooled feature at scale i
        let mut g_pool = if let Some(gr) = grads.as_deref_mut() {
            let (gx, gw) = ae.enc_heads[i].backward(&trace.pooled[i], &cot.levels[i]);
            accumulate(&mut gr.enc_heads[i], &gw);
            gx
        } else {
            ae.enc_heads[i].backward_input(&cot.levels[i])
        };
        if let Some(carry) = g.take() {
            g_pool.add_assign(&carry);
        }
        let g_act = pool2_backward(&g_pool);
        let g_pre = silu_backward(&trace.act_in[i], &g_act);
        let g_in = if let Some(gr) = grads.as_deref_mut() {
            let (gx, gw) = ae.enc_convs[i].backward(&trace.conv_in[i], &g_pre);
            accumulate(&mut gr.enc_convs[i], &gw);
            gx
        } else {
            ae.enc_convs[i].backward_input(&g_pre)
        };
        g = Some(g_in);
    }
    g.unwrap().into_image()
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

struct DecodeStep {
    conv_in: Tensor,
    pre_act: Tensor,
}

pub struct DecodeTrace {
    lat_top: Tensor,
    dec_in_pre: Tensor,
    steps: Vec<DecodeStep>,
    out_conv_in: Tensor,
    lat_fine: Vec<Tensor>, // latent inputs for the injection convs, l = L-1..1
}

pub fn decode_with_trace(
    ae: &AutoencoderParams,
    code: &LatentCode,
) -> Result<(Image, DecodeTrace), NetError> {
    let l = ae.desc.scales;
    if code.levels.len() != l {
        return Err(NetError::Shape(format!(
            "latent has {} levels, descriptor wants {l}",
            code.levels.len()
        )));
    }
    for (i, t) in code.levels.iter().enumerate() {
        if t.c != ae.desc.latent_channels(i + 1) {
            return Err(NetError::Shape(format!(
                "latent level {} has {} channels, expected {}",
                i + 1,
                t.c,
                ae.desc.latent_channels(i + 1)
            )));
        }
    }
    let lat_top = code.levels[l - 1].clone();
    let dec_in_pre = ae.dec_in.forward(&lat_top);
    let mut f = silu(&dec_in_pre);
    let mut steps = Vec::with_capacity(l - 1);
    let mut lat_fine = Vec::with_capacity(l - 1);
    for (i, level) in (1..l).rev().enumerate() {
        let up = upsample2(&f);
        let mut pre = ae.dec_convs[i].forward(&up);
        let inject = ae.dec_inject[i].forward(&code.levels[level - 1]);
        pre.add_assign(&inject);
        f = silu(&pre);
        steps.push(DecodeStep { conv_in: up, pre_act: pre });
        lat_fine.push(code.levels[level - 1].clone());
    }
    let out_conv_in = upsample2(&f);
    let out = ae.dec_out.forward(&out_conv_in);
    Ok((
        out.into_image(),
        DecodeTrace {
            lat_top,
            dec_in_pre,
            steps,
            out_conv_in,
            lat_fine,
        },
    ))
}

pub fn decode(ae: &AutoencoderParams, code: &LatentCode) -> Result<Image, NetError> {
    decode_with_trace(ae, code).map(|(img, _)| img)
}

/// Reverse-mode pass of the decoder: returns the latent cotangent and
/// optionally accumulates parameter gradients.
pub fn decode_vjp(
    ae: &AutoencoderParams,
    trace: &DecodeTrace,
    cot: &Image,
    mut grads: Option<&mut AutoencoderParams>,
) -> LatentCode {
    let l = ae.desc.scales;
    let cot_t = Tensor::from_image(cot);
    let mut cot_levels: Vec<Option<Tensor>> = (0..l).map(|_| None).collect();
    let g_up = if let Some(gr) = grads.as_deref_mut() {
        let (gx, gw) = ae.dec_out.backward(&trace.out_conv_in, &cot_t);
        accumulate(&mut gr.dec_out, &gw);
        gx
    } else {
        ae.dec_out
            .backward_input(&cot_t)
    };
    let mut g_f = upsample2_backward(&g_up);
    for (i, level) in (1..l).rev().enumerate().collect::<Vec<_>>().into_iter().rev() {
        let step = &trace.steps[i];
        let g_pre = silu_backward(&step.pre_act, &g_f);
        let lat_in = &trace.lat_fine[i];
        let g_lat = if let Some(gr) = grads.as_deref_mut() {
            let (gx, gw) = ae.dec_inject[i].backward(lat_in, &g_pre);
            accumulate(&mut gr.dec_inject[i], &gw);
            gx
        } else {
            ae.dec_inject[i].backward_input(&g_pre)
        };
        cot_levels[level - 1] = Some(g_lat);
        let g_conv_in = if let Some(gr) = grads.as_deref_mut() {
            let (gx, gw) = ae.dec_convs[i].backward(&step.conv_in, &g_pre);
            accumulate(&mut gr.dec_convs[i], &gw);
            gx
        } else {
            ae.dec_convs[i].backward_input(&g_pre)
        };
        g_f = upsample2_backward(&g_conv_in);
    }
    let g_pre_top = silu_backward(&trace.dec_in_pre, &g_f);
    let g_lat_top = if let Some(gr) = grads.as_deref_mut() {
        let (gx, gw) = ae.dec_in.backward(&trace.lat_top, &g_pre_top);
        accumulate(&mut gr.dec_in, &gw);
        gx
    } else {
        ae.dec_in
            .backward_input(&g_pre_top)
    };
    cot_levels[l - 1] = Some(g_lat_top);
    LatentCode {
        levels: cot_levels.into_iter().map(|t| t.unwrap()).collect(),
        weights: ae.desc.level_weights(),
    }
}

fn accumulate(dst: &mut Conv2d, src: &Conv2d) {
    for (a, b) in dst.weight.iter_mut().zip(&src.weight) {
        *a += b;
    }
    for (a, b) in dst.bias.iter_mut().zip(&src.bias) {
        *a += b;
    }
}

/// N^a(u) = decode(encode(u)); the composition is evaluated literally.
pub fn autoencode(ae: &AutoencoderParams, u: &Image) -> Result<Image, NetError> {
    decode(ae, &encode(ae, u)?)
}

// ---------------------------------------------------------------------------
// Adapter
// ---------------------------------------------------------------------------

pub struct AdaptTrace {
    input: Tensor,
    fine_pre: Tensor,
    coarse_in: Tensor,
    coarse_pre: Tensor,
    up_in: Tensor,
    up_pre: Tensor,
    head_in: Tensor,
}

pub fn adapt_with_trace(ad: &AdapterParams, u: &Image) -> Result<(Image, AdaptTrace), NetError> {
    if u.side() % 2 != 0 {
        return Err(NetError::Shape(format!(
            "adapter needs an even image side, got {}",
            u.side()
        )));
    }
    let input = Tensor::from_image(u);
    let fine_pre = ad.conv_fine.forward(&input);
    let fine_act = silu(&fine_pre);
    let coarse_in = pool2(&fine_act);
    let coarse_pre = ad.conv_coarse.forward(&coarse_in);
    let coarse_act = silu(&coarse_pre);
    let up_in = upsample2(&coarse_act);
    let up_pre = ad.conv_up.forward(&up_in);
    let mut head_in = silu(&up_pre);
    head_in.add_assign(&fine_act);
    let mut out = ad.head.forward(&head_in);
    out.add_assign(&input);
    Ok((
        out.into_image(),
        AdaptTrace {
            input,
            fine_pre,
            coarse_in,
            coarse_pre,
            up_in,
            up_pre,
            head_in,
        },
    ))
}

pub fn adapt(ad: &AdapterParams, u: &Image) -> Result<Image, NetError> {
    adapt_with_trace(ad, u).map(|(img, _)| img)
}

pub fn adapt_vjp(
    ad: &AdapterParams,
    trace: &AdaptTrace,
    cot: &Image,
    mut grads: Option<&mut AdapterParams>,
) -> Image {
    let cot_t = Tensor::from_image(cot);
    let g_head_in = if let Some(gr) = grads.as_deref_mut() {
        let (gx, gw) = ad.head.backward(&trace.head_in, &cot_t);
        accumulate(&mut gr.head, &gw);
        gx
    } else {
        ad.head
            .backward_input(&cot_t)
    };
    // skip connection: head_in = silu(up_pre) + fine_act
    let mut g_fine_act = g_head_in.clone();
    let g_up_pre = silu_backward(&trace.up_pre, &g_head_in);
    let g_up_in = if let Some(gr) = grads.as_deref_mut() {
        let (gx, gw) = ad.conv_up.backward(&trace.up_in, &g_up_pre);
        accumulate(&mut gr.conv_up, &gw);
        gx
    } else {
        ad.conv_up
            .backward_input(&g_up_pre)
    };
    let g_coarse_act = upsample2_backward(&g_up_in);
    let g_coarse_pre = silu_backward(&trace.coarse_pre, &g_coarse_act);
    let g_coarse_in = if let Some(gr) = grads.as_deref_mut() {
        let (gx, gw) = ad.conv_coarse.backward(&trace.coarse_in, &g_coarse_pre);
        accumulate(&mut gr.conv_coarse, &gw);
        gx
    } else {
        ad.conv_coarse
            .backward_input(&g_coarse_pre)
    };
    g_fine_act.add_assign(&pool2_backward(&g_coarse_in));
    let g_fine_pre = silu_backward(&trace.fine_pre, &g_fine_act);
    let mut g_input = if let Some(gr) = grads.as_deref_mut() {
        let (gx, gw) = ad.conv_fine.backward(&trace.input, &g_fine_pre);
        accumulate(&mut gr.conv_fine, &gw);
        gx
    } else {
        ad.conv_fine
            .backward_input(&g_fine_pre)
    };
    // residual path
    g_input.add_assign(&cot_t);
    g_input.into_image()
}

// ---------------------------------------------------------------------------
// Model abstraction shared by the regularizer and the solver
// ---------------------------------------------------------------------------

/// The pieces of N and E the variational solver needs: forward evaluation of
/// the encoder and of the full network, and their input vector-Jacobian
/// products.
pub trait Model {
    fn encode(&self, u: &Image) -> LatentCode;
    fn encode_vjp(&self, u: &Image, cot: &LatentCode) -> Image;
    /// N(u): the full network (adapter composed with the autoencoder when
    /// an adapter is present).
    fn apply(&self, u: &Image) -> Image;
    fn apply_vjp(&self, u: &Image, cot: &Image) -> Image;
}

/// Trained networks: N = U o N^a, or N = N^a when no adapter is loaded.
pub struct TrainedModel {
    pub ae: AutoencoderParams,
    pub adapter: Option<AdapterParams>,
}

impl Model for TrainedModel {
    fn encode(&self, u: &Image) -> LatentCode {
        encode(&self.ae, u).expect("image side incompatible with descriptor")
    }

    fn encode_vjp(&self, u: &Image, cot: &LatentCode) -> Image {
        let (_, trace) = encode_with_trace(&self.ae, u).expect("encode failed");
        encode_vjp(&self.ae, &trace, cot, None)
    }

    fn apply(&self, u: &Image) -> Image {
        let mid = autoencode(&self.ae, u).expect("autoencode failed");
        match &self.adapter {
            Some(ad) => adapt(ad, &mid).expect("adapt failed"),
            None => mid,
        }
    }

    fn apply_vjp(&self, u: &Image, cot: &Image) -> Image {
        let (code, enc_trace) = encode_with_trace(&self.ae, u).expect("encode failed");
        let (mid, dec_trace) = decode_with_trace(&self.ae, &code).expect("decode failed");
        let cot_mid = match &self.adapter {
            Some(ad) => {
                let (_, ad_trace) = adapt_with_trace(ad, &mid).expect("adapt failed");
                adapt_vjp(ad, &ad_trace, cot, None)
            }
            None => cot.clone(),
        };
        let cot_code = decode_vjp(&self.ae, &dec_trace, &cot_mid, None);
        encode_vjp(&self.ae, &enc_trace, &cot_code, None)
    }
}

/// K = E = N = identity test fixture: the latent is the image itself with
/// unit weight. Used by the closed-form soft-threshold oracle.
pub struct IdentityModel;

impl Model for IdentityModel {
    fn encode(&self, u: &Image) -> LatentCode {
        LatentCode {
            levels: vec![Tensor::from_image(u)],
            weights: vec![1.0],
        }
    }
    fn encode_vjp(&self, _u: &Image, cot: &LatentCode) -> Image {
        cot.levels[0].clone().into_image()
    }
    fn apply(&self, u: &Image) -> Image {
        u.clone()
    }
    fn apply_vjp(&self, _u: &Image, cot: &Image) -> Image {
        cot.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{l2_norm, Grid};
    use rand::Rng;

    fn random_image(n: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_values(n, (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn encode_is_deterministic_and_has_expected_shapes() {
        let ae = AutoencoderParams::init(Descriptor::default(), 1);
        let u = random_image(16, 2);
        let c1 = encode(&ae, &u).unwrap();
        let c2 = encode(&ae, &u).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(c1.levels.len(), 3);
        assert_eq!(c1.levels[0].shape(), (2, 8, 8));
        assert_eq!(c1.levels[1].shape(), (2, 4, 4));
        assert_eq!(c1.levels[2].shape(), (4, 2, 2));
        assert_eq!(c1.weights, vec![0.5, 0.25, 0.125]);
        assert!(c1.min_weight() > 0.0);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_code_and_back() {
        let mut ae = AutoencoderParams::init(Descriptor::default(), 3);
        ae.zero_biases();
        let code = encode(&ae, &Image::zeros(16)).unwrap();
        assert!(code.levels.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
        let img = decode(&ae, &code.zeros_like()).unwrap();
        assert!(img.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn autoencode_is_decode_of_encode_bit_exactly() {
        let ae = AutoencoderParams::init(Descriptor::default(), 4);
        let u = random_image(16, 5);
        let direct = autoencode(&ae, &u).unwrap();
        let composed = decode(&ae, &encode(&ae, &u).unwrap()).unwrap();
        assert_eq!(direct.values(), composed.values());
    }

    #[test]
    fn adapter_with_zero_head_is_identity() {
        let ad = AdapterParams::init(Descriptor::default(), 6);
        let u = random_image(16, 7);
        let out = adapt(&ad, &u).unwrap();
        assert_eq!(out.values(), u.values());
    }

    #[test]
    fn encoder_lipschitz_probe() {
        let ae = AutoencoderParams::init(Descriptor::default(), 8);
        let u = random_image(16, 9);
        let base = encode(&ae, &u).unwrap();
        // estimate the local constant once with a moderate perturbation
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dir: Vec<f64> = (0..16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dir_norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let probe = |eps: f64| {
            let mut up = u.clone();
            for (v, d) in up.values_mut().iter_mut().zip(&dir) {
                *v += eps * d / dir_norm;
            }
            encode(&ae, &up).unwrap().sub(&base).norm()
        };
        let c = probe(1e-3) / 1e-3;
        let d = probe(1e-6);
        assert!(d <= 2.0 * c * 1e-6, "d={d}, C={c}");
    }

    #[test]
    fn zero_cotangents_give_zero_vjps() {
        let ae = AutoencoderParams::init(Descriptor::default(), 11);
        let u = random_image(16, 12);
        let (code, trace) = encode_with_trace(&ae, &u).unwrap();
        let gx = encode_vjp(&ae, &trace, &code.zeros_like(), None);
        assert!(gx.values().iter().all(|&v| v == 0.0));
        let mut grads = ae.zeros_like();
        let (_, dtrace) = decode_with_trace(&ae, &code).unwrap();
        let glat = decode_vjp(&ae, &dtrace, &Image::zeros(16), Some(&mut grads));
        assert!(glat.levels.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
        assert!(grads.to_flat().iter().all(|&v| v == 0.0));
    }

    /// Directional derivative check of full-model input vjps:
    /// <vjp(cot), v> == <cot, (f(u+hv) - f(u-hv)) / 2h>.
    fn check_model_vjp(model: &impl Model, u: &Image, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = u.side();
        let v: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fu = model.apply(u);
        let cot_vals: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cot = Image::from_values(n, cot_vals).unwrap();
        let g = model.apply_vjp(u, &cot);
        let lhs: f64 = g.values().iter().zip(&v).map(|(a, b)| a * b).sum();
        let h = 1e-4;
        let mut up = u.clone();
        let mut um = u.clone();
        for ((p, m), d) in up
            .values_mut()
            .iter_mut()
            .zip(um.values_mut().iter_mut())
            .zip(&v)
        {
            *p += h * d;
            *m -= h * d;
        }
        let fp = model.apply(&up);
        let fm = model.apply(&um);
        let rhs: f64 = cot
            .values()
            .iter()
            .zip(fp.values().iter().zip(fm.values()))
            .map(|(c, (a, b))| c * (a - b) / (2.0 * h))
            .sum();
        let scale = lhs.abs().max(rhs.abs()).max(l2_norm(&fu) * 1e-6).max(1e-9);
        assert!((lhs - rhs).abs() <= 1e-4 * scale, "{lhs} vs {rhs}");
    }

    #[test]
    fn full_model_vjp_matches_finite_differences() {
        let ae = AutoencoderParams::init(Descriptor::default(), 13);
        let ad = AdapterParams::init(Descriptor::default(), 14);
        let u = random_image(16, 15);
        check_model_vjp(
            &TrainedModel {
                ae: ae.clone(),
                adapter: None,
            },
            &u,
            16,
        );
        check_model_vjp(
            &TrainedModel {
                ae,
                adapter: Some(ad),
            },
            &u,
            17,
        );
        check_model_vjp(&IdentityModel, &u, 18);
    }

    #[test]
    fn descriptor_header_roundtrip() {
        let d = Descriptor::default();
        let parsed = Descriptor::parse_header(&d.encode_header()).unwrap();
        assert_eq!(d, parsed);
        assert!(Descriptor::parse_header("scales=2 channels=4").is_err());
    }

    #[test]
    fn flat_roundtrip_preserves_params() {
        let ae = AutoencoderParams::init(Descriptor::default(), 19);
        let flat = ae.to_flat();
        let mut other = AutoencoderParams::init(Descriptor::default(), 20);
        other.set_from_flat(&flat);
        assert_eq!(ae, other);
    }

    #[test]
    fn side_not_divisible_is_an_error() {
        let ae = AutoencoderParams::init(Descriptor::default(), 21);
        // side 12 is not divisible by 8
        let u = Image::zeros(12);
        assert!(matches!(encode(&ae, &u), Err(NetError::Shape(_))));
    }
}
