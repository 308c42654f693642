//! Entropy models: the conditional Gaussian for the latent and the
//! non-parametric factorized density for the hyper-latent, plus the
//! frequency tables the range coder uses for both.

use std::sync::OnceLock;

use rand::Rng;

use super::rangecoder::FreqTable;
use crate::nn::{Module, Param};

/// Smallest scale the Gaussian likelihood will use.
pub const SCALE_FLOOR: f32 = 0.04;
/// Likelihoods are clamped here before taking logs.
pub const LIKELIHOOD_FLOOR: f32 = 1e-9;

const LN2: f32 = std::f32::consts::LN_2;
const FRAC_1_SQRT_2PI: f32 = 0.398_942_3;

fn std_normal_cdf(t: f32) -> f32 {
    0.5 * libm::erfcf(-t * std::f32::consts::FRAC_1_SQRT_2)
}

fn std_normal_pdf(t: f32) -> f32 {
    FRAC_1_SQRT_2PI * (-0.5 * t * t).exp()
}

fn std_normal_cdf64(t: f64) -> f64 {
    0.5 * libm::erfc(-t * std::f64::consts::FRAC_1_SQRT_2)
}

/// Gaussian likelihood of `value` discretised to unit bins, with gradients.
///
/// Returns `(p, dp/dvalue, dp/dmean, dp/dscale_raw)` where the scale is
/// `max(scale_raw, SCALE_FLOOR)`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianTerm {
    pub p: f32,
    pub d_value: f32,
    pub d_mean: f32,
    pub d_scale: f32,
}

pub fn gaussian_likelihood(value: f32, mean: f32, scale_raw: f32) -> GaussianTerm {
    let scale = scale_raw.max(SCALE_FLOOR);
    let v = value - mean;
    let a = v.abs();
    let tu = (0.5 - a) / scale;
    let tl = (-0.5 - a) / scale;
    let p = std_normal_cdf(tu) - std_normal_cdf(tl);
    let (pu, pl) = (std_normal_pdf(tu), std_normal_pdf(tl));
    let dp_da = (pl - pu) / scale;
    let dp_dscale = (-tu * pu + tl * pl) / scale;
    let sign = if v >= 0.0 { 1.0 } else { -1.0 };
    GaussianTerm {
        p,
        d_value: dp_da * sign,
        d_mean: -dp_da * sign,
        d_scale: dp_dscale,
    }
}

/// `-log2(max(p, floor))` and its derivative with respect to `p`.
pub fn bits_of(p: f32) -> (f32, f32) {
    let q = p.max(LIKELIHOOD_FLOOR);
    (-q.log2(), -1.0 / (q * LN2))
}

/// Gradient reaching the raw scale through `max(raw, floor)`: passes above
/// the floor, and below it only when it would raise the scale.
pub fn scale_floor_grad(scale_raw: f32, grad: f32) -> f32 {
    if scale_raw >= SCALE_FLOOR || grad < 0.0 {
        grad
    } else {
        0.0
    }
}

/// Number of entries in the log-spaced scale table used for coding.
pub const SCALE_LEVELS: usize = 64;
const SCALE_MAX: f64 = 256.0;
/// Mean offsets are coded on a grid of `1 / MEAN_STEPS`.
pub const MEAN_STEPS: i64 = 32;
const TAIL_SIGMAS: f64 = 4.5;

// libm keeps table construction identical across platforms.
fn scale_table_value(idx: usize) -> f64 {
    let lo = libm::log(SCALE_FLOOR as f64);
    let hi = libm::log(SCALE_MAX);
    libm::exp(lo + (hi - lo) * idx as f64 / (SCALE_LEVELS - 1) as f64)
}

/// Nearest scale-table index in the log domain.
pub fn scale_index(scale_raw: f32) -> usize {
    let s = libm::log(scale_raw.max(SCALE_FLOOR) as f64);
    let lo = libm::log(SCALE_FLOOR as f64);
    let hi = libm::log(SCALE_MAX);
    let t = ((s - lo) / (hi - lo) * (SCALE_LEVELS - 1) as f64).round();
    t.clamp(0.0, (SCALE_LEVELS - 1) as f64) as usize
}

/// Split a mean into an integer centre and a grid offset in `[-16, 15]`.
pub fn mean_split(mean: f32) -> (i64, usize) {
    let q = (mean as f64 * MEAN_STEPS as f64).round() as i64;
    let centre = (q + MEAN_STEPS / 2).div_euclid(MEAN_STEPS);
    let offset = q - centre * MEAN_STEPS;
    (centre, (offset + MEAN_STEPS / 2) as usize)
}

/// A coding table over `[lo, lo + len)` plus a trailing escape symbol.
#[derive(Clone, Debug)]
pub struct WindowTable {
    pub lo: i64,
    pub table: FreqTable,
}

impl WindowTable {
    fn from_pmf(lo: i64, pmf: &[f64]) -> Self {
        let mass: f64 = pmf.iter().sum();
        let mut probs = pmf.to_vec();
        probs.push((1.0 - mass).max(0.0));
        Self { lo, table: FreqTable::from_probs(&probs) }
    }

    pub fn window_len(&self) -> usize {
        self.table.len() - 1
    }

    pub fn escape(&self) -> usize {
        self.window_len()
    }
}

/// Gaussian tables indexed by `scale_idx * MEAN_STEPS + offset_idx`, with
/// windows relative to the integer centre.
pub fn gaussian_tables() -> &'static [WindowTable] {
    static TABLES: OnceLock<Vec<WindowTable>> = OnceLock::new();
    TABLES.get_or_init(|| {
        let mut out = Vec::with_capacity(SCALE_LEVELS * MEAN_STEPS as usize);
        for si in 0..SCALE_LEVELS {
            let s = scale_table_value(si);
            let half = (TAIL_SIGMAS * s + 1.0).ceil() as i64;
            for oi in 0..MEAN_STEPS {
                let off = (oi - MEAN_STEPS / 2) as f64 / MEAN_STEPS as f64;
                let pmf: Vec<f64> = (-half..=half)
                    .map(|k| {
                        let a = (k as f64 - off).abs();
                        std_normal_cdf64((0.5 - a) / s) - std_normal_cdf64((-0.5 - a) / s)
                    })
                    .collect();
                out.push(WindowTable::from_pmf(-half, &pmf));
            }
        }
        out
    })
}

/// Per-channel (layer-wise) shape of the factorized density network.
const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
const EB_INIT_SCALE: f64 = 10.0;

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Non-parametric factorized density (one small monotone network per channel).
#[derive(Clone, Debug)]
pub struct EntropyBottleneck {
    pub channels: usize,
    /// `matrices[i]`: `[channels, FILTERS[i+1], FILTERS[i]]` (pre-softplus).
    pub matrices: Vec<Param>,
    pub biases: Vec<Param>,
    /// Gate factors for all but the last layer (pre-tanh).
    pub factors: Vec<Param>,
}

/// Forward trace of one cumulative-logit evaluation.
struct Trace {
    inputs: Vec<Vec<f32>>,
    pre: Vec<Vec<f32>>,
}

impl EntropyBottleneck {
    pub fn new<R: Rng>(rng: &mut R, name: &str, channels: usize) -> Self {
        let layers = FILTERS.len() - 1;
        let scale = EB_INIT_SCALE.powf(1.0 / layers as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for i in 0..layers {
            let (fin, fout) = (FILTERS[i], FILTERS[i + 1]);
            let init = (1.0 / scale / fout as f64).exp_m1().ln() as f32;
            matrices.push(Param::new(
                format!("{name}.matrix{i}"),
                vec![channels, fout, fin],
                vec![init; channels * fout * fin],
            ));
            biases.push(Param::new(
                format!("{name}.bias{i}"),
                vec![channels, fout],
                (0..channels * fout).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            ));
            if i + 1 < layers {
                factors.push(Param::new(format!("{name}.factor{i}"), vec![channels, fout], vec![0.0; channels * fout]));
            }
        }
        Self { channels, matrices, biases, factors }
    }

    fn layers(&self) -> usize {
        FILTERS.len() - 1
    }

    fn logits_cumulative(&self, ch: usize, x: f32) -> (f32, Trace) {
        let mut h = vec![x];
        let mut trace = Trace { inputs: Vec::new(), pre: Vec::new() };
        for i in 0..self.layers() {
            let (fin, fout) = (FILTERS[i], FILTERS[i + 1]);
            let m = &self.matrices[i].value[ch * fout * fin..(ch + 1) * fout * fin];
            let b = &self.biases[i].value[ch * fout..(ch + 1) * fout];
            let pre: Vec<f32> = (0..fout)
                .map(|r| b[r] + (0..fin).map(|c| softplus(m[r * fin + c]) * h[c]).sum::<f32>())
                .collect();
            let mut post = pre.clone();
            if i + 1 < self.layers() {
                let f = &self.factors[i].value[ch * fout..(ch + 1) * fout];
                for r in 0..fout {
                    post[r] += f[r].tanh() * pre[r].tanh();
                }
            }
            trace.inputs.push(h);
            trace.pre.push(pre);
            h = post;
        }
        (h[0], trace)
    }

    /// Accumulate parameter gradients for `d(out)/d(...) * g`; returns `d(out)/dx * g`.
    fn backprop(&mut self, ch: usize, trace: &Trace, g: f32) -> f32 {
        let mut grad = vec![g];
        for i in (0..self.layers()).rev() {
            let (fin, fout) = (FILTERS[i], FILTERS[i + 1]);
            let pre = &trace.pre[i];
            let input = &trace.inputs[i];
            let mut dpre = grad.clone();
            if i + 1 < self.layers() {
                let fo = ch * fout;
                for r in 0..fout {
                    let tf = self.factors[i].value[fo + r].tanh();
                    let tp = pre[r].tanh();
                    dpre[r] = grad[r] * (1.0 + tf * (1.0 - tp * tp));
                    self.factors[i].grad[fo + r] += grad[r] * tp * (1.0 - tf * tf);
                }
            }
            let mo = ch * fout * fin;
            let mut dinput = vec![0.0; fin];
            for r in 0..fout {
                self.biases[i].grad[ch * fout + r] += dpre[r];
                for c in 0..fin {
                    let raw = self.matrices[i].value[mo + r * fin + c];
                    self.matrices[i].grad[mo + r * fin + c] += dpre[r] * input[c] * sigmoid(raw);
                    dinput[c] += softplus(raw) * dpre[r];
                }
            }
            grad = dinput;
        }
        grad[0]
    }

    fn bin_probability(&self, ch: usize, x: f32) -> (f32, f32, f32, f32, Trace, Trace) {
        let (lower, tl) = self.logits_cumulative(ch, x - 0.5);
        let (upper, tu) = self.logits_cumulative(ch, x + 0.5);
        let sign = if lower + upper > 0.0 { -1.0 } else { 1.0 };
        let (su, sl) = (sigmoid(sign * upper), sigmoid(sign * lower));
        let diff = su - sl;
        let sg = if diff >= 0.0 { 1.0 } else { -1.0 };
        let dp_du = sg * sign * su * (1.0 - su);
        let dp_dl = -sg * sign * sl * (1.0 - sl);
        (diff.abs(), dp_du, dp_dl, sign, tu, tl)
    }

    /// Likelihood of `x` in channel `ch`.
    pub fn likelihood(&self, ch: usize, x: f32) -> f32 {
        self.bin_probability(ch, x).0
    }

    /// Likelihood plus backprop of `dloss/dp = g`; returns `(p, dloss/dx)`.
    pub fn likelihood_backward(&mut self, ch: usize, x: f32, g: f32) -> (f32, f32) {
        let (p, dp_du, dp_dl, _, tu, tl) = self.bin_probability(ch, x);
        let dx = self.backprop(ch, &tu, g * dp_du) + self.backprop(ch, &tl, g * dp_dl);
        (p, dx)
    }

    fn cdf64(&self, ch: usize, x: f32) -> f64 {
        let (l, _) = self.logits_cumulative(ch, x);
        1.0 / (1.0 + libm::exp(-(l as f64)))
    }

    /// Coding tables, one per channel, centred on each channel's median.
    pub fn coding_tables(&self) -> Vec<WindowTable> {
        const TAIL: f64 = 1.0 / (1u64 << 20) as f64;
        const MAX_HALF: i64 = 512;
        (0..self.channels)
            .map(|ch| {
                let (mut lo, mut hi) = (-1.0e4f32, 1.0e4f32);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf64(ch, mid) < 0.5 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let centre = (0.5 * (lo + hi)).round() as i64;
                let mut a = 0;
                while a < MAX_HALF && self.cdf64(ch, (centre - a) as f32 - 0.5) > TAIL {
                    a += 1;
                }
                let mut b = 0;
                while b < MAX_HALF && 1.0 - self.cdf64(ch, (centre + b) as f32 + 0.5) > TAIL {
                    b += 1;
                }
                let pmf: Vec<f64> =
                    (centre - a..=centre + b).map(|k| self.likelihood(ch, k as f32) as f64).collect();
                WindowTable::from_pmf(centre - a, &pmf)
            })
            .collect()
    }
}

impl Module for EntropyBottleneck {
    fn params(&self) -> Vec<&Param> {
        self.matrices.iter().chain(&self.biases).chain(&self.factors).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.matrices.iter_mut().chain(self.biases.iter_mut()).chain(self.factors.iter_mut()).collect()
    }
}
