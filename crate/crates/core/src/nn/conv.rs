use rand::Rng;

use super::gemm::gemm;
use super::tensor::{Param, Tensor};
use super::{uniform_init, Module};

/// Geometry of a strided convolution from a "large" grid onto a "small" one.
///
/// A forward convolution reads the large grid and writes the small one; a
/// transposed convolution runs the same mapping in reverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub oh: usize,
    pub ow: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl Geom {
    pub fn conv(h: usize, w: usize, c: usize, k: usize, s: usize, p: usize) -> Self {
        assert!(h + 2 * p >= k && w + 2 * p >= k, "kernel larger than padded input");
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        Self { h, w, c, oh, ow, k, s, p }
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.c
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }

    /// Unfold `x` (`n x h x w x c`) into rows of `k*k*c` patch values.
    pub fn im2col(&self, x: &[f32], n: usize) -> Vec<f32> {
        let patch = self.patch();
        let mut col = vec![0.0f32; n * self.oh * self.ow * patch];
        let c = self.c;
        let mut row = 0;
        for b in 0..n {
            let img = &x[b * self.h * self.w * c..(b + 1) * self.h * self.w * c];
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let dst = &mut col[row * patch..(row + 1) * patch];
                    row += 1;
                    for ky in 0..self.k {
                        let iy = (oy * self.s + ky) as isize - self.p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for kx in 0..self.k {
                            let ix = (ox * self.s + kx) as isize - self.p as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (iy * self.w + ix as usize) * c;
                            let d = (ky * self.k + kx) * c;
                            dst[d..d + c].copy_from_slice(&img[src..src + c]);
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`Geom::im2col`]: scatter-add patch rows back onto the grid.
    pub fn col2im(&self, col: &[f32], n: usize) -> Vec<f32> {
        let patch = self.patch();
        let c = self.c;
        let mut x = vec![0.0f32; n * self.h * self.w * c];
        let mut row = 0;
        for b in 0..n {
            let img = &mut x[b * self.h * self.w * c..(b + 1) * self.h * self.w * c];
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let src = &col[row * patch..(row + 1) * patch];
                    row += 1;
                    for ky in 0..self.k {
                        let iy = (oy * self.s + ky) as isize - self.p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for kx in 0..self.k {
                            let ix = (ox * self.s + kx) as isize - self.p as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let dst = (iy * self.w + ix as usize) * c;
                            let s0 = (ky * self.k + kx) * c;
                            for (d, v) in img[dst..dst + c].iter_mut().zip(&src[s0..s0 + c]) {
                                *d += *v;
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn add_bias(y: &mut [f32], bias: &[f32]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

fn accumulate_bias_grad(dy: &[f32], grad: &mut [f32]) {
    for row in dy.chunks_exact(grad.len()) {
        for (g, v) in grad.iter_mut().zip(row) {
            *g += *v;
        }
    }
}

/// Saved state for a convolution backward pass.
pub struct ConvCtx {
    geom: Geom,
    n: usize,
    /// Unfolded input for [`Conv2d`], raw input for [`ConvTranspose2d`].
    saved: Vec<f32>,
}

/// 2-D convolution with square kernel, weight stored as `[k*k*cin, cout]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-uniform initialisation scaled by `gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        gain: f32,
    ) -> Self {
        let fan_in = (k * k * cin) as f32;
        let bound = gain * (3.0 / fan_in).sqrt();
        let weight = Param::new(
            format!("{name}.weight"),
            vec![k * k * cin, cout],
            uniform_init(rng, k * k * cin * cout, bound),
        );
        let bias = bias.then(|| {
            let b = 1.0 / fan_in.sqrt();
            Param::new(format!("{name}.bias"), vec![cout], uniform_init(rng, cout, b))
        });
        Self { weight, bias, cin, cout, k, stride, pad }
    }

    pub fn geom(&self, x: &Tensor) -> Geom {
        assert_eq!(x.c, self.cin, "conv input channels");
        Geom::conv(x.h, x.w, x.c, self.k, self.stride, self.pad)
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCtx) {
        let g = self.geom(x);
        let col = if g.is_pointwise() { x.data.clone() } else { g.im2col(&x.data, x.n) };
        let m = x.n * g.oh * g.ow;
        let mut y = vec![0.0f32; m * self.cout];
        gemm(m, g.patch(), self.cout, 1.0, &col, false, &self.weight.value, false, 0.0, &mut y);
        if let Some(b) = &self.bias {
            add_bias(&mut y, &b.value);
        }
        (Tensor::from_vec(x.n, g.oh, g.ow, self.cout, y), ConvCtx { geom: g, n: x.n, saved: col })
    }

    /// Accumulates parameter gradients; returns the input gradient when `need_dx`.
    pub fn backward(&mut self, ctx: ConvCtx, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let g = ctx.geom;
        let m = ctx.n * g.oh * g.ow;
        let patch = g.patch();
        gemm(patch, m, self.cout, 1.0, &ctx.saved, true, &dy.data, false, 1.0, &mut self.weight.grad);
        if let Some(b) = &mut self.bias {
            accumulate_bias_grad(&dy.data, &mut b.grad);
        }
        if !need_dx {
            return None;
        }
        let mut dcol = vec![0.0f32; m * patch];
        gemm(m, self.cout, patch, 1.0, &dy.data, false, &self.weight.value, true, 0.0, &mut dcol);
        let dx = if g.is_pointwise() { dcol } else { g.col2im(&dcol, ctx.n) };
        Some(Tensor::from_vec(ctx.n, g.h, g.w, g.c, dx))
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Transposed convolution, weight stored as `[cin, k*k*cout]`.
///
/// With `k = 5, stride = 2, pad = 2` the output is exactly twice the input
/// size in each spatial dimension (output padding of one).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f32,
    ) -> Self {
        // Each output receives about k*k*cin/stride^2 contributions.
        let fan_in = ((k * k * cin) as f32 / (stride * stride) as f32).max(1.0);
        let bound = gain * (3.0 / fan_in).sqrt();
        let weight = Param::new(
            format!("{name}.weight"),
            vec![cin, k * k * cout],
            uniform_init(rng, cin * k * k * cout, bound),
        );
        let bias = Param::new(format!("{name}.bias"), vec![cout], vec![0.0; cout]);
        Self { weight, bias, cin, cout, k, stride, pad }
    }

    pub fn geom(&self, x: &Tensor) -> Geom {
        assert_eq!(x.c, self.cin, "transposed conv input channels");
        let h = x.h * self.stride;
        let w = x.w * self.stride;
        let g = Geom::conv(h, w, self.cout, self.k, self.stride, self.pad);
        assert_eq!((g.oh, g.ow), (x.h, x.w), "transposed conv geometry is not invertible");
        g
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCtx) {
        let g = self.geom(x);
        let m = x.positions();
        let patch = g.patch();
        let mut col = vec![0.0f32; m * patch];
        gemm(m, self.cin, patch, 1.0, &x.data, false, &self.weight.value, false, 0.0, &mut col);
        let mut y = if g.is_pointwise() { col } else { g.col2im(&col, x.n) };
        add_bias(&mut y, &self.bias.value);
        (
            Tensor::from_vec(x.n, g.h, g.w, self.cout, y),
            ConvCtx { geom: g, n: x.n, saved: x.data.clone() },
        )
    }

    pub fn backward(&mut self, ctx: ConvCtx, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let g = ctx.geom;
        let m = ctx.n * g.oh * g.ow;
        let patch = g.patch();
        accumulate_bias_grad(&dy.data, &mut self.bias.grad);
        let dcol = if g.is_pointwise() { dy.data.clone() } else { g.im2col(&dy.data, ctx.n) };
        gemm(self.cin, m, patch, 1.0, &ctx.saved, true, &dcol, false, 1.0, &mut self.weight.grad);
        if !need_dx {
            return None;
        }
        let mut dx = vec![0.0f32; m * self.cin];
        gemm(m, patch, self.cin, 1.0, &dcol, false, &self.weight.value, true, 0.0, &mut dx);
        Some(Tensor::from_vec(ctx.n, g.oh, g.ow, self.cin, dx))
    }
}

impl Module for ConvTranspose2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
