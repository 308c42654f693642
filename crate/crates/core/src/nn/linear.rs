use rand::Rng;

use super::gemm::gemm;
use super::tensor::{Param, Tensor};
use super::{uniform_init, Module};

/// Fully connected layer, weight stored as `[cin, cout]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        let bound = 1.0 / (cin as f32).sqrt();
        Self {
            weight: Param::new(format!("{name}.weight"), vec![cin, cout], uniform_init(rng, cin * cout, bound)),
            bias: Param::new(format!("{name}.bias"), vec![cout], uniform_init(rng, cout, bound)),
            cin,
            cout,
        }
    }

    /// Input is `[n, cin]` (as an `n x 1 x 1 x cin` tensor).
    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c * x.h * x.w, self.cin);
        let mut y = vec![0.0; x.n * self.cout];
        for row in y.chunks_exact_mut(self.cout) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(x.n, self.cin, self.cout, 1.0, &x.data, false, &self.weight.value, false, 1.0, &mut y);
        Tensor::matrix(x.n, self.cout, y)
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        gemm(self.cin, x.n, self.cout, 1.0, &x.data, true, &dy.data, false, 1.0, &mut self.weight.grad);
        for row in dy.data.chunks_exact(self.cout) {
            for (g, v) in self.bias.grad.iter_mut().zip(row) {
                *g += *v;
            }
        }
        let mut dx = vec![0.0; x.n * self.cin];
        gemm(x.n, self.cout, self.cin, 1.0, &dy.data, false, &self.weight.value, true, 0.0, &mut dx);
        Tensor::matrix(x.n, self.cin, dx)
    }

    /// Append `extra` output units, keeping the existing ones untouched.
    pub fn grow<R: Rng>(&mut self, rng: &mut R, extra: usize) {
        let new_out = self.cout + extra;
        let bound = 1.0 / (self.cin as f32).sqrt();
        let mut w = Vec::with_capacity(self.cin * new_out);
        for row in self.weight.value.chunks_exact(self.cout) {
            w.extend_from_slice(row);
            w.extend(uniform_init(rng, extra, bound));
        }
        let mut b = self.bias.value.clone();
        b.extend(uniform_init(rng, extra, bound));
        self.weight = Param::new(self.weight.name.clone(), vec![self.cin, new_out], w);
        self.bias = Param::new(self.bias.name.clone(), vec![new_out], b);
        self.cout = new_out;
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Mean over the spatial axes: `[n, h, w, c] -> [n, c]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let hw = x.h * x.w;
    let mut y = vec![0.0; x.n * x.c];
    for b in 0..x.n {
        let out = &mut y[b * x.c..(b + 1) * x.c];
        for px in x.data[b * hw * x.c..(b + 1) * hw * x.c].chunks_exact(x.c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += *v;
            }
        }
        out.iter_mut().for_each(|o| *o /= hw as f32);
    }
    Tensor::matrix(x.n, x.c, y)
}

pub fn global_avg_pool_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let c = dy.c;
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Vec::with_capacity(dy.n * h * w * c);
    for row in dy.data.chunks_exact(c) {
        for _ in 0..h * w {
            dx.extend(row.iter().map(|g| g * scale));
        }
    }
    Tensor::from_vec(dy.n, h, w, c, dx)
}
