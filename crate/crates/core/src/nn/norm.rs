use super::gemm::gemm;
use super::tensor::{Param, Tensor};
use super::Module;

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

/// Per-channel batch normalisation with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

pub struct BnCtx {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(name: &str, c: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), vec![c], vec![1.0; c]),
            beta: Param::new(format!("{name}.beta"), vec![c], vec![0.0; c]),
            running_mean: Param::buffer(format!("{name}.running_mean"), vec![c], vec![0.0; c]),
            running_var: Param::buffer(format!("{name}.running_var"), vec![c], vec![1.0; c]),
        }
    }

    fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalises in place. In training mode batch statistics are used and
    /// the running averages updated.
    pub fn forward(&mut self, x: &mut Tensor, train: bool) -> BnCtx {
        let c = self.channels();
        assert_eq!(x.c, c);
        let m = x.positions();
        let (mean, var) = if train {
            let mut mean = vec![0.0f64; c];
            for row in x.data.chunks_exact(c) {
                for (a, v) in mean.iter_mut().zip(row) {
                    *a += *v as f64;
                }
            }
            mean.iter_mut().for_each(|a| *a /= m as f64);
            let mut var = vec![0.0f64; c];
            for row in x.data.chunks_exact(c) {
                for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    let d = *v as f64 - mu;
                    *a += d * d;
                }
            }
            var.iter_mut().for_each(|a| *a /= m as f64);
            let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            for i in 0..c {
                self.running_mean.value[i] =
                    (1.0 - BN_MOMENTUM) * self.running_mean.value[i] + BN_MOMENTUM * mean[i] as f32;
                self.running_var.value[i] =
                    (1.0 - BN_MOMENTUM) * self.running_var.value[i] + BN_MOMENTUM * (var[i] * unbias) as f32;
            }
            (mean.iter().map(|v| *v as f32).collect(), var.iter().map(|v| *v as f32).collect())
        } else {
            (self.running_mean.value.clone(), self.running_var.value.clone())
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = if train { Vec::with_capacity(x.len()) } else { Vec::new() };
        for row in x.data.chunks_exact_mut(c) {
            for i in 0..c {
                let h = (row[i] - mean[i]) * inv_std[i];
                if train {
                    xhat.push(h);
                }
                row[i] = self.gamma.value[i] * h + self.beta.value[i];
            }
        }
        BnCtx { xhat, inv_std, train }
    }

    /// Inference-mode normalisation with running statistics.
    pub fn forward_eval(&self, x: &mut Tensor) {
        let c = self.channels();
        assert_eq!(x.c, c);
        let scale: Vec<f32> = (0..c)
            .map(|i| self.gamma.value[i] / (self.running_var.value[i] + BN_EPS).sqrt())
            .collect();
        for row in x.data.chunks_exact_mut(c) {
            for i in 0..c {
                row[i] = (row[i] - self.running_mean.value[i]) * scale[i] + self.beta.value[i];
            }
        }
    }

    pub fn backward(&mut self, ctx: BnCtx, dy: &mut Tensor) {
        assert!(ctx.train, "batch norm backward requires a training-mode forward");
        let c = self.channels();
        let m = dy.positions() as f32;
        let mut sum_dy = vec![0.0f32; c];
        let mut sum_dy_xhat = vec![0.0f32; c];
        for (g, h) in dy.data.chunks_exact(c).zip(ctx.xhat.chunks_exact(c)) {
            for i in 0..c {
                sum_dy[i] += g[i];
                sum_dy_xhat[i] += g[i] * h[i];
            }
        }
        for i in 0..c {
            self.gamma.grad[i] += sum_dy_xhat[i];
            self.beta.grad[i] += sum_dy[i];
        }
        for (g, h) in dy.data.chunks_exact_mut(c).zip(ctx.xhat.chunks_exact(c)) {
            for i in 0..c {
                let k = self.gamma.value[i] * ctx.inv_std[i] / m;
                g[i] = k * (m * g[i] - sum_dy[i] - h[i] * sum_dy_xhat[i]);
            }
        }
    }
}

impl Module for BatchNorm2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta, &mut self.running_mean, &mut self.running_var]
    }
}

const GDN_BETA_MIN: f32 = 1e-6;

/// Generalised divisive normalisation (or its inverse).
///
/// Forward: `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`; the inverse
/// multiplies instead of dividing. `gamma` is stored as `[c_out(i), c_in(j)]`.
/// Non-negativity of `beta` and `gamma` is kept by projection in
/// [`Gdn::project`], which callers run after every optimizer step.
#[derive(Clone, Debug)]
pub struct Gdn {
    pub beta: Param,
    pub gamma: Param,
    pub inverse: bool,
    c: usize,
}

pub struct GdnCtx {
    x: Vec<f32>,
    x2: Vec<f32>,
    s: Vec<f32>,
}

impl Gdn {
    pub fn new(name: &str, c: usize, inverse: bool) -> Self {
        let mut gamma = vec![0.0; c * c];
        for i in 0..c {
            gamma[i * c + i] = 0.1;
        }
        Self {
            beta: Param::new(format!("{name}.beta"), vec![c], vec![1.0; c]),
            gamma: Param::new(format!("{name}.gamma"), vec![c, c], gamma),
            inverse,
            c,
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, GdnCtx) {
        assert_eq!(x.c, self.c);
        let m = x.positions();
        let c = self.c;
        let x2: Vec<f32> = x.data.iter().map(|v| v * v).collect();
        let mut s = vec![0.0f32; m * c];
        for row in s.chunks_exact_mut(c) {
            row.copy_from_slice(&self.beta.value);
        }
        // s[m, i] += sum_j x2[m, j] * gamma[i, j]
        gemm(m, c, c, 1.0, &x2, false, &self.gamma.value, true, 1.0, &mut s);
        let y: Vec<f32> = if self.inverse {
            x.data.iter().zip(&s).map(|(v, s)| v * s.sqrt()).collect()
        } else {
            x.data.iter().zip(&s).map(|(v, s)| v / s.sqrt()).collect()
        };
        (
            Tensor::from_vec(x.n, x.h, x.w, c, y),
            GdnCtx { x: x.data.clone(), x2, s },
        )
    }

    pub fn backward(&mut self, ctx: GdnCtx, dy: &Tensor) -> Tensor {
        let c = self.c;
        let m = dy.positions();
        // u = dL/ds (per element), dx = direct term + 2 x (u . gamma)
        let (direct, u): (Vec<f32>, Vec<f32>) = if self.inverse {
            dy.data
                .iter()
                .zip(&ctx.x)
                .zip(&ctx.s)
                .map(|((g, x), s)| {
                    let r = s.sqrt();
                    (g * r, 0.5 * g * x / r)
                })
                .unzip()
        } else {
            dy.data
                .iter()
                .zip(&ctx.x)
                .zip(&ctx.s)
                .map(|((g, x), s)| {
                    let r = 1.0 / s.sqrt();
                    (g * r, -0.5 * g * x * r / s)
                })
                .unzip()
        };
        for row in u.chunks_exact(c) {
            for (b, v) in self.beta.grad.iter_mut().zip(row) {
                *b += *v;
            }
        }
        // dgamma[i, j] += sum_m u[m, i] * x2[m, j]
        gemm(c, m, c, 1.0, &u, true, &ctx.x2, false, 1.0, &mut self.gamma.grad);
        let mut ug = vec![0.0f32; m * c];
        gemm(m, c, c, 1.0, &u, false, &self.gamma.value, false, 0.0, &mut ug);
        let dx: Vec<f32> = direct
            .iter()
            .zip(&ctx.x)
            .zip(&ug)
            .map(|((d, x), t)| d + 2.0 * x * t)
            .collect();
        Tensor::from_vec(dy.n, dy.h, dy.w, c, dx)
    }

    /// Clamp parameters back into the valid region.
    pub fn project(&mut self) {
        self.beta.value.iter_mut().for_each(|b| *b = b.max(GDN_BETA_MIN));
        self.gamma.value.iter_mut().for_each(|g| *g = g.max(0.0));
    }
}

impl Module for Gdn {
    fn params(&self) -> Vec<&Param> {
        vec![&self.beta, &self.gamma]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.beta, &mut self.gamma]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
    }

    #[test]
    fn gdn_input_and_param_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for inverse in [false, true] {
            let mut gdn = Gdn::new("g", 3, inverse);
            gdn.gamma.value = uniform_init(&mut rng, 9, 0.3).into_iter().map(f32::abs).collect();
            let x = Tensor::from_vec(2, 2, 1, 3, uniform_init(&mut rng, 12, 2.0));
            let dy = Tensor::from_vec(2, 2, 1, 3, uniform_init(&mut rng, 12, 1.0));
            let (_, ctx) = gdn.forward(&x);
            let dx = gdn.backward(ctx, &dy);
            let eps = 1e-3;
            for i in 0..x.len() {
                let mut p = x.clone();
                p.data[i] += eps;
                let mut q = x.clone();
                q.data[i] -= eps;
                let fd = (dot(&gdn.forward(&p).0.data, &dy.data) - dot(&gdn.forward(&q).0.data, &dy.data))
                    / (2.0 * eps as f64);
                assert!((fd as f32 - dx.data[i]).abs() < 1e-2, "inverse={inverse} x[{i}]: {fd} vs {}", dx.data[i]);
            }
            for i in 0..9 {
                let mut g2 = gdn.clone();
                g2.gamma.value[i] += eps;
                let mut g3 = gdn.clone();
                g3.gamma.value[i] -= eps;
                let fd = (dot(&g2.forward(&x).0.data, &dy.data) - dot(&g3.forward(&x).0.data, &dy.data))
                    / (2.0 * eps as f64);
                assert!((fd as f32 - gdn.gamma.grad[i]).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::from_vec(3, 2, 2, 2, uniform_init(&mut rng, 24, 2.0));
        let dy = Tensor::from_vec(3, 2, 2, 2, uniform_init(&mut rng, 24, 1.0));
        let mut bn = BatchNorm2d::new("bn", 2);
        bn.gamma.value = vec![1.5, 0.7];
        let mut y = x.clone();
        let ctx = bn.forward(&mut y, true);
        let mut dx = dy.clone();
        bn.backward(ctx, &mut dx);
        let f = |t: &Tensor| {
            let mut probe = bn.clone();
            let mut y = t.clone();
            probe.forward(&mut y, true);
            dot(&y.data, &dy.data)
        };
        let eps = 1e-3;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data[i] += eps;
            let mut q = x.clone();
            q.data[i] -= eps;
            let fd = (f(&p) - f(&q)) / (2.0 * eps as f64);
            assert!((fd as f32 - dx.data[i]).abs() < 1e-2, "{fd} vs {}", dx.data[i]);
        }
    }
}
