//! Mean-scale hyperprior transforms and the rate-distortion objective.

use std::sync::{Arc, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::entropy::{bits_of, gaussian_likelihood, scale_floor_grad, EntropyBottleneck, WindowTable};
use crate::nn::{
    leaky_relu, leaky_relu_backward, Conv2d, ConvCtx, ConvTranspose2d, Gdn, GdnCtx, Module, Param, Tensor,
};

/// Spatial downsampling of the analysis transform.
pub const MAIN_FACTOR: usize = 16;
/// Additional downsampling of the hyper-analysis transform.
pub const HYPER_FACTOR: usize = 2;
/// Inputs are padded to a multiple of this.
pub const PAD_MULTIPLE: usize = MAIN_FACTOR * HYPER_FACTOR;

const LEAK: f32 = 0.01;

/// Channel widths of the transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Width of the intermediate analysis/synthesis layers.
    pub channels: usize,
    /// Latent channels.
    pub latent: usize,
    /// Hyper-latent channels.
    pub hyper: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { channels: 64, latent: 128, hyper: 96 }
    }
}

/// Rate-distortion summary for a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RdReport {
    /// Expected code length per image in bits, `-log2 p(z_hat) - log2 p(y_hat | z_hat)`.
    pub rate_bits: f64,
    /// `rate_bits` divided by the pixel count of the (padded) input.
    pub bpp: f64,
    /// Mean squared error in unit-interval pixel space.
    pub distortion: f64,
    /// `bpp + lambda * distortion`.
    pub loss: f64,
}

/// Which quantisation proxy a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantization {
    /// Additive uniform noise on `[-0.5, 0.5)`.
    Noise,
    /// Hard rounding.
    Round,
}

struct AnalysisCtx {
    convs: Vec<ConvCtx>,
    gdns: Vec<GdnCtx>,
}

struct SynthesisCtx {
    convs: Vec<ConvCtx>,
    gdns: Vec<GdnCtx>,
}

struct HyperCtx {
    convs: Vec<ConvCtx>,
    acts: Vec<Tensor>,
}

/// Encoder, decoder and entropy-model parameters with frozen-part bookkeeping.
#[derive(Clone, Debug)]
pub struct CodecModel {
    pub arch: ArchConfig,
    pub lambda: f32,
    pub(crate) frozen: bool,
    pub(crate) ga: Vec<Conv2d>,
    pub(crate) ga_gdn: Vec<Gdn>,
    pub(crate) gs: Vec<ConvTranspose2d>,
    pub(crate) gs_igdn: Vec<Gdn>,
    pub(crate) ha: Vec<Conv2d>,
    pub(crate) hs_up: ConvTranspose2d,
    pub(crate) hs: Vec<Conv2d>,
    pub(crate) bottleneck: EntropyBottleneck,
    /// Digest and hyper coding tables, filled lazily once frozen.
    cache: FrozenCache,
}

#[derive(Clone, Debug, Default)]
struct FrozenCache {
    digest: OnceLock<u64>,
    tables: OnceLock<Arc<Vec<WindowTable>>>,
}

impl CodecModel {
    pub fn new<R: Rng>(rng: &mut R, arch: ArchConfig, lambda: f32) -> Self {
        let ArchConfig { channels: n, latent: m, hyper: h } = arch;
        let ga = vec![
            Conv2d::new(rng, "ga.0", 3, n, 5, 2, 2, true, 1.0),
            Conv2d::new(rng, "ga.1", n, n, 5, 2, 2, true, 1.0),
            Conv2d::new(rng, "ga.2", n, n, 5, 2, 2, true, 1.0),
            Conv2d::new(rng, "ga.3", n, m, 5, 2, 2, true, 1.0),
        ];
        let ga_gdn = (0..3).map(|i| Gdn::new(&format!("ga.gdn{i}"), n, false)).collect();
        let gs = vec![
            ConvTranspose2d::new(rng, "gs.0", m, n, 5, 2, 2, 1.0),
            ConvTranspose2d::new(rng, "gs.1", n, n, 5, 2, 2, 1.0),
            ConvTranspose2d::new(rng, "gs.2", n, n, 5, 2, 2, 1.0),
            ConvTranspose2d::new(rng, "gs.3", n, 3, 5, 2, 2, 1.0),
        ];
        let gs_igdn = (0..3).map(|i| Gdn::new(&format!("gs.igdn{i}"), n, true)).collect();
        let gain = 2f32.sqrt();
        let ha = vec![
            Conv2d::new(rng, "ha.0", m, h, 3, 1, 1, true, gain),
            Conv2d::new(rng, "ha.1", h, h, 5, 2, 2, true, gain),
            Conv2d::new(rng, "ha.2", h, h, 3, 1, 1, true, 1.0),
        ];
        let mid = h * 3 / 2;
        let hs_up = ConvTranspose2d::new(rng, "hs.0", h, h, 5, 2, 2, gain);
        let hs = vec![
            Conv2d::new(rng, "hs.1", h, mid, 3, 1, 1, true, gain),
            Conv2d::new(rng, "hs.2", mid, 2 * m, 3, 1, 1, true, 1.0),
        ];
        let bottleneck = EntropyBottleneck::new(rng, "eb", h);
        Self {
            arch,
            lambda,
            frozen: false,
            ga,
            ga_gdn,
            gs,
            gs_igdn,
            ha,
            hs_up,
            hs,
            bottleneck,
            cache: FrozenCache::default(),
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the synthesis side and both entropy models immutable.
    pub fn freeze_decoder_side(&mut self) {
        self.frozen = true;
        self.cache = FrozenCache::default();
    }

    /// 64-bit digest of the frozen parameter set (see [`super::checkpoint`]).
    pub fn frozen_digest(&self) -> u64 {
        if self.frozen {
            *self.cache.digest.get_or_init(|| super::checkpoint::frozen_digest(self))
        } else {
            super::checkpoint::frozen_digest(self)
        }
    }

    /// Per-channel coding tables of the factorized hyper prior.
    pub fn hyper_tables(&self) -> Arc<Vec<WindowTable>> {
        if self.frozen {
            self.cache.tables.get_or_init(|| Arc::new(self.bottleneck.coding_tables())).clone()
        } else {
            Arc::new(self.bottleneck.coding_tables())
        }
    }

    /// Parameters of the analysis and hyper-analysis transforms.
    pub fn encoder_params_mut(&mut self) -> Vec<&mut Param> {
        self.split_params_mut().0
    }

    pub fn encoder_params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        self.ga.iter().for_each(|c| out.extend(c.params()));
        self.ga_gdn.iter().for_each(|g| out.extend(g.params()));
        self.ha.iter().for_each(|c| out.extend(c.params()));
        out
    }

    /// Synthesis, hyper-synthesis and factorized-prior parameters: the set
    /// that is frozen after the first phase.
    pub fn frozen_set_params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        self.gs.iter().for_each(|c| out.extend(c.params()));
        self.gs_igdn.iter().for_each(|g| out.extend(g.params()));
        out.extend(self.hs_up.params());
        self.hs.iter().for_each(|c| out.extend(c.params()));
        out.extend(self.bottleneck.params());
        out
    }

    /// `(encoder side, frozen set)` as disjoint mutable borrows.
    fn split_params_mut(&mut self) -> (Vec<&mut Param>, Vec<&mut Param>) {
        let mut enc: Vec<&mut Param> = Vec::new();
        self.ga.iter_mut().for_each(|c| enc.extend(c.params_mut()));
        self.ga_gdn.iter_mut().for_each(|g| enc.extend(g.params_mut()));
        self.ha.iter_mut().for_each(|c| enc.extend(c.params_mut()));
        let mut dec: Vec<&mut Param> = Vec::new();
        self.gs.iter_mut().for_each(|c| dec.extend(c.params_mut()));
        self.gs_igdn.iter_mut().for_each(|g| dec.extend(g.params_mut()));
        dec.extend(self.hs_up.params_mut());
        self.hs.iter_mut().for_each(|c| dec.extend(c.params_mut()));
        dec.extend(self.bottleneck.params_mut());
        (enc, dec)
    }

    /// Parameters an optimizer may update in the current state.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        let frozen = self.frozen;
        let (mut enc, dec) = self.split_params_mut();
        if !frozen {
            enc.extend(dec);
        }
        enc
    }

    pub fn all_params(&self) -> Vec<&Param> {
        let mut out = self.encoder_params();
        out.extend(self.frozen_set_params());
        out
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let (mut enc, dec) = self.split_params_mut();
        enc.extend(dec);
        enc
    }

    pub fn zero_grad(&mut self) {
        let (enc, dec) = self.split_params_mut();
        enc.into_iter().chain(dec).for_each(|p| p.zero_grad());
    }

    /// Keeps GDN parameters in their valid range after an optimizer step.
    pub(crate) fn project(&mut self) {
        self.ga_gdn.iter_mut().for_each(Gdn::project);
        if !self.frozen {
            self.gs_igdn.iter_mut().for_each(Gdn::project);
        }
    }

    fn analysis_fwd(&self, x: &Tensor) -> (Tensor, AnalysisCtx) {
        let mut ctx = AnalysisCtx { convs: Vec::new(), gdns: Vec::new() };
        let mut h = x.clone();
        for (i, conv) in self.ga.iter().enumerate() {
            let (o, c) = conv.forward(&h);
            ctx.convs.push(c);
            h = o;
            if i < self.ga_gdn.len() {
                let (o, g) = self.ga_gdn[i].forward(&h);
                ctx.gdns.push(g);
                h = o;
            }
        }
        (h, ctx)
    }

    fn analysis_bwd(&mut self, mut ctx: AnalysisCtx, dy: Tensor) {
        let mut d = dy;
        for i in (0..self.ga.len()).rev() {
            if i < self.ga_gdn.len() {
                d = self.ga_gdn[i].backward(ctx.gdns.pop().unwrap(), &d);
            }
            match self.ga[i].backward(ctx.convs.pop().unwrap(), &d, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    fn synthesis_fwd(&self, y: &Tensor) -> (Tensor, SynthesisCtx) {
        let mut ctx = SynthesisCtx { convs: Vec::new(), gdns: Vec::new() };
        let mut h = y.clone();
        for (i, conv) in self.gs.iter().enumerate() {
            let (o, c) = conv.forward(&h);
            ctx.convs.push(c);
            h = o;
            if i < self.gs_igdn.len() {
                let (o, g) = self.gs_igdn[i].forward(&h);
                ctx.gdns.push(g);
                h = o;
            }
        }
        (h, ctx)
    }

    fn synthesis_bwd(&mut self, mut ctx: SynthesisCtx, dx: Tensor) -> Tensor {
        let mut d = dx;
        for i in (0..self.gs.len()).rev() {
            if i < self.gs_igdn.len() {
                d = self.gs_igdn[i].backward(ctx.gdns.pop().unwrap(), &d);
            }
            d = self.gs[i].backward(ctx.convs.pop().unwrap(), &d, true).unwrap();
        }
        d
    }

    fn hyper_analysis_fwd(&self, y: &Tensor) -> (Tensor, HyperCtx) {
        let mut ctx = HyperCtx { convs: Vec::new(), acts: Vec::new() };
        let mut h = y.clone();
        for (i, conv) in self.ha.iter().enumerate() {
            let (mut o, c) = conv.forward(&h);
            ctx.convs.push(c);
            if i + 1 < self.ha.len() {
                leaky_relu(&mut o, LEAK);
                ctx.acts.push(o.clone());
            }
            h = o;
        }
        (h, ctx)
    }

    fn hyper_analysis_bwd(&mut self, mut ctx: HyperCtx, dz: Tensor) -> Tensor {
        let mut d = dz;
        for i in (0..self.ha.len()).rev() {
            if i + 1 < self.ha.len() {
                leaky_relu_backward(&ctx.acts.pop().unwrap(), &mut d, LEAK);
            }
            d = self.ha[i].backward(ctx.convs.pop().unwrap(), &d, true).unwrap();
        }
        d
    }

    fn hyper_synthesis_fwd(&self, z: &Tensor) -> (Tensor, HyperCtx) {
        let mut ctx = HyperCtx { convs: Vec::new(), acts: Vec::new() };
        let (mut h, c) = self.hs_up.forward(z);
        ctx.convs.push(c);
        leaky_relu(&mut h, LEAK);
        ctx.acts.push(h.clone());
        for (i, conv) in self.hs.iter().enumerate() {
            let (mut o, c) = conv.forward(&h);
            ctx.convs.push(c);
            if i + 1 < self.hs.len() {
                leaky_relu(&mut o, LEAK);
                ctx.acts.push(o.clone());
            }
            h = o;
        }
        (h, ctx)
    }

    fn hyper_synthesis_bwd(&mut self, mut ctx: HyperCtx, dp: Tensor) -> Tensor {
        let mut d = dp;
        for i in (0..self.hs.len()).rev() {
            if i + 1 < self.hs.len() {
                leaky_relu_backward(&ctx.acts.pop().unwrap(), &mut d, LEAK);
            }
            d = self.hs[i].backward(ctx.convs.pop().unwrap(), &d, true).unwrap();
        }
        leaky_relu_backward(&ctx.acts.pop().unwrap(), &mut d, LEAK);
        self.hs_up.backward(ctx.convs.pop().unwrap(), &d, true).unwrap()
    }

    /// Analysis transform `x -> y` (inference).
    pub fn analysis(&self, x: &Tensor) -> Tensor {
        self.analysis_fwd(x).0
    }

    /// Hyper-analysis `y -> z` (inference).
    pub fn hyper_analysis(&self, y: &Tensor) -> Tensor {
        self.hyper_analysis_fwd(y).0
    }

    /// Hyper-synthesis `z_hat -> (scales, means)`, each with `latent` channels.
    pub fn hyper_synthesis(&self, z_hat: &Tensor) -> (Tensor, Tensor) {
        self.hyper_synthesis_fwd(z_hat).0.split_channels(self.arch.latent)
    }

    /// Synthesis transform `y_hat -> x_hat` (inference, unclamped).
    pub fn synthesis(&self, y_hat: &Tensor) -> Tensor {
        self.synthesis_fwd(y_hat).0
    }

    /// Total bits of `-log2 p(z_hat)` under the factorized prior.
    pub fn hyper_rate_bits(&self, z_hat: &Tensor) -> f64 {
        let c = self.arch.hyper;
        z_hat
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| bits_of(self.bottleneck.likelihood(i % c, v)).0 as f64)
            .sum()
    }

    /// Total bits of `-log2 p(y_hat | scales, means)`.
    pub fn latent_rate_bits(y_hat: &Tensor, scales: &Tensor, means: &Tensor) -> f64 {
        y_hat
            .data
            .iter()
            .zip(&scales.data)
            .zip(&means.data)
            .map(|((&v, &s), &m)| bits_of(gaussian_likelihood(v, m, s).p).0 as f64)
            .sum()
    }

    /// One rate-distortion evaluation on a batch `x` in `[0, 1]` whose sides are
    /// multiples of [`PAD_MULTIPLE`]. With `backward`, parameter gradients of
    /// `bpp + lambda * mse` are accumulated.
    pub fn rd_pass<R: Rng>(&mut self, x: &Tensor, quant: Quantization, rng: &mut R, backward: bool) -> RdReport {
        assert!(x.h.is_multiple_of(PAD_MULTIPLE) && x.w.is_multiple_of(PAD_MULTIPLE), "input must be padded");
        let pixels = (x.n * x.h * x.w) as f32;
        let (y, a_ctx) = self.analysis_fwd(x);
        let (z, ha_ctx) = self.hyper_analysis_fwd(&y);
        let mut quantize = |t: &Tensor| -> Tensor {
            let data = match quant {
                Quantization::Noise => t.data.iter().map(|v| v + rng.gen_range(-0.5f32..0.5)).collect(),
                Quantization::Round => t.data.iter().map(|v| v.round()).collect(),
            };
            Tensor::from_vec(t.n, t.h, t.w, t.c, data)
        };
        let z_t = quantize(&z);
        let y_t = quantize(&y);
        let (params, hs_ctx) = self.hyper_synthesis_fwd(&z_t);
        let (scales, means) = params.split_channels(self.arch.latent);
        let (x_hat, gs_ctx) = self.synthesis_fwd(&y_t);

        let rate_scale = 1.0 / pixels;
        let mut bits_y = 0.0f64;
        let mut dy_rate = vec![0.0f32; y.len()];
        let mut dscale = vec![0.0f32; y.len()];
        let mut dmean = vec![0.0f32; y.len()];
        for i in 0..y.len() {
            let t = gaussian_likelihood(y_t.data[i], means.data[i], scales.data[i]);
            let (b, db_dp) = bits_of(t.p);
            bits_y += b as f64;
            let g = db_dp * rate_scale;
            dy_rate[i] = g * t.d_value;
            dmean[i] = g * t.d_mean;
            dscale[i] = scale_floor_grad(scales.data[i], g * t.d_scale);
        }
        let c = self.arch.hyper;
        let mut bits_z = 0.0f64;
        let mut dz_rate = vec![0.0f32; z.len()];
        for (i, &v) in z_t.data.iter().enumerate() {
            if backward {
                let p = self.bottleneck.likelihood(i % c, v);
                let (b, db_dp) = bits_of(p);
                bits_z += b as f64;
                let (_, dx) = self.bottleneck.likelihood_backward(i % c, v, db_dp * rate_scale);
                dz_rate[i] = dx;
            } else {
                bits_z += bits_of(self.bottleneck.likelihood(i % c, v)).0 as f64;
            }
        }
        let count = x.len() as f32;
        let mut sse = 0.0f64;
        let mut dxhat = vec![0.0f32; x.len()];
        for i in 0..x.len() {
            let d = x_hat.data[i] - x.data[i];
            sse += (d as f64) * (d as f64);
            dxhat[i] = self.lambda * 2.0 * d / count;
        }
        let bits = bits_y + bits_z;
        let distortion = sse / count as f64;
        let bpp = bits / pixels as f64;
        let report = RdReport {
            rate_bits: bits / x.n as f64,
            bpp,
            distortion,
            loss: bpp + self.lambda as f64 * distortion,
        };
        if backward {
            let dxhat = Tensor::from_vec(x_hat.n, x_hat.h, x_hat.w, x_hat.c, dxhat);
            let mut dy = self.synthesis_bwd(gs_ctx, dxhat);
            for (a, b) in dy.data.iter_mut().zip(&dy_rate) {
                *a += *b;
            }
            let dparams = Tensor::concat_channels(
                &Tensor::from_vec(y.n, y.h, y.w, y.c, dscale),
                &Tensor::from_vec(y.n, y.h, y.w, y.c, dmean),
            );
            let mut dz = self.hyper_synthesis_bwd(hs_ctx, dparams);
            for (a, b) in dz.data.iter_mut().zip(&dz_rate) {
                *a += *b;
            }
            let dy_hyper = self.hyper_analysis_bwd(ha_ctx, dz);
            dy.add_assign(&dy_hyper);
            self.analysis_bwd(a_ctx, dy);
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ArchConfig {
        ArchConfig { channels: 4, latent: 5, hyper: 3 }
    }

    #[test]
    fn latent_shapes_follow_downsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = CodecModel::new(&mut rng, tiny(), 1.0);
        let x = Tensor::zeros(2, 64, 32, 3);
        let y = m.analysis(&x);
        assert_eq!(y.shape(), [2, 4, 2, 5]);
        let z = m.hyper_analysis(&y);
        assert_eq!(z.shape(), [2, 2, 1, 3]);
        let (s, mu) = m.hyper_synthesis(&z);
        assert_eq!(s.shape(), y.shape());
        assert_eq!(mu.shape(), y.shape());
        assert_eq!(m.synthesis(&y).shape(), x.shape());
    }

    /// Central differences of the noisy-quantisation loss agree with the
    /// accumulated gradients on the largest entry of several parameters.
    #[test]
    fn rd_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = CodecModel::new(&mut rng, tiny(), 50.0);
        // Keep every scale above the floor, where the lower bound's
        // straight-through gradient coincides with the true one.
        m.hs[1].bias.as_mut().unwrap().value[..5].iter_mut().for_each(|b| *b = 3.0);
        let x = Tensor::from_vec(1, 32, 32, 3, (0..32 * 32 * 3).map(|i| ((i * 7919) % 255) as f32 / 255.0).collect());
        // Fixed noise: reseed the pass RNG identically for every evaluation.
        let eval = |m: &mut CodecModel| m.rd_pass(&x, Quantization::Noise, &mut ChaCha8Rng::seed_from_u64(5), false).loss;
        m.zero_grad();
        m.rd_pass(&x, Quantization::Noise, &mut ChaCha8Rng::seed_from_u64(5), true);
        let names = ["ga.1.weight", "gs.2.weight", "ha.1.weight", "hs.2.bias", "eb.bias2", "ha.2.weight", "ha.2.bias", "hs.0.weight", "hs.1.weight", "hs.0.bias", "eb.matrix0", "hs.2.weight", "ga.0.weight", "ga.3.weight", "gs.0.weight"];
        for name in names {
            let (idx, grad) = {
                let all = m.all_params();
                let p = all.iter().find(|p| p.name == name).unwrap();
                let idx = p.grad.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
                (idx, p.grad[idx] as f64)
            };
            let shifted = |delta: f32| {
                let mut probe = m.clone();
                for p in probe.trainable_params_mut() {
                    if p.name == name {
                        p.value[idx] += delta;
                    }
                }
                eval(&mut probe)
            };
            let eps = 1e-3f32;
            let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps as f64);
            assert!((fd - grad).abs() < 0.02 * grad.abs().max(1e-2), "{name}: fd {fd} vs analytic {grad}");
        }
    }
}
