//! Small residual CNN with a global-average-pooled linear head.
//!
//! The final feature map feeds both the head and class activation maps, and
//! the pooled features double as herding features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, BatchNorm2d, BnCtx, Conv2d,
    ConvCtx, Linear, Module, Param, Tensor,
};

/// Backbone widths and strides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_width: usize,
    pub stem_stride: usize,
    /// `(width, stride)` per residual block.
    pub blocks: Vec<(usize, usize)>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { stem_width: 16, stem_stride: 1, blocks: vec![(16, 2), (32, 2), (64, 1)] }
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

struct ConvBnCtx {
    conv: ConvCtx,
    bn: BnCtx,
}

impl ConvBn {
    fn new<R: Rng>(rng: &mut R, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            conv: Conv2d::new(rng, &format!("{name}.conv"), cin, cout, k, stride, k / 2, false, 2f32.sqrt()),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> (Tensor, ConvBnCtx) {
        let (mut y, conv) = self.conv.forward(x);
        let bn = self.bn.forward(&mut y, train);
        (y, ConvBnCtx { conv, bn })
    }

    fn eval(&self, x: &Tensor) -> Tensor {
        let (mut y, _) = self.conv.forward(x);
        self.bn.forward_eval(&mut y);
        y
    }

    fn backward(&mut self, ctx: ConvBnCtx, mut dy: Tensor, need_dx: bool) -> Option<Tensor> {
        self.bn.backward(ctx.bn, &mut dy);
        self.conv.backward(ctx.conv, &dy, need_dx)
    }

    fn params_into<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.extend(self.conv.params());
        out.extend(self.bn.params());
    }

    fn params_mut_into<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.extend(self.conv.params_mut());
        out.extend(self.bn.params_mut());
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    a: ConvBn,
    b: ConvBn,
    shortcut: Option<ConvBn>,
}

struct BlockCtx {
    a: ConvBnCtx,
    a_out: Tensor,
    b: ConvBnCtx,
    shortcut: Option<ConvBnCtx>,
    out: Tensor,
}

impl BasicBlock {
    fn new<R: Rng>(rng: &mut R, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (cin != cout || stride != 1).then(|| ConvBn::new(rng, &format!("{name}.short"), cin, cout, 1, stride));
        let mut b = ConvBn::new(rng, &format!("{name}.b"), cout, cout, 3, 1);
        // Residual branches start close to identity.
        b.bn.gamma.value.iter_mut().for_each(|g| *g = 0.5);
        Self { a: ConvBn::new(rng, &format!("{name}.a"), cin, cout, 3, stride), b, shortcut }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> (Tensor, BlockCtx) {
        let (mut a_out, a) = self.a.forward(x, train);
        relu(&mut a_out);
        let (mut out, b) = self.b.forward(&a_out, train);
        let shortcut = match &mut self.shortcut {
            Some(s) => {
                let (sx, ctx) = s.forward(x, train);
                out.add_assign(&sx);
                Some(ctx)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        relu(&mut out);
        let ret = out.clone();
        (ret, BlockCtx { a, a_out, b, shortcut, out })
    }

    fn eval(&self, x: &Tensor) -> Tensor {
        let mut a = self.a.eval(x);
        relu(&mut a);
        let mut out = self.b.eval(&a);
        match &self.shortcut {
            Some(s) => out.add_assign(&s.eval(x)),
            None => out.add_assign(x),
        }
        relu(&mut out);
        out
    }

    fn backward(&mut self, ctx: BlockCtx, mut dy: Tensor, need_dx: bool) -> Option<Tensor> {
        relu_backward(&ctx.out, &mut dy);
        let skip = match (&mut self.shortcut, ctx.shortcut) {
            (Some(s), Some(c)) => s.backward(c, dy.clone(), need_dx),
            _ => need_dx.then(|| dy.clone()),
        };
        let mut da = self.b.backward(ctx.b, dy, true).expect("inner gradient");
        relu_backward(&ctx.a_out, &mut da);
        let dx = self.a.backward(ctx.a, da, need_dx);
        match (dx, skip) {
            (Some(mut d), Some(s)) => {
                d.add_assign(&s);
                Some(d)
            }
            _ => None,
        }
    }

    fn params_into<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.a.params_into(out);
        self.b.params_into(out);
        if let Some(s) = &self.shortcut {
            s.params_into(out);
        }
    }

    fn params_mut_into<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.a.params_mut_into(out);
        self.b.params_mut_into(out);
        if let Some(s) = &mut self.shortcut {
            s.params_mut_into(out);
        }
    }
}

/// Output of a classifier forward pass.
pub struct ClassifierOutput {
    /// Final convolutional feature map (input to pooling).
    pub feature_map: Tensor,
    /// Pooled penultimate features, `[n, feature_dim]`.
    pub features: Tensor,
    pub logits: Tensor,
}

/// Saved activations for [`ClassifierModel::backward`].
pub struct ClassifierTape {
    stem: ConvBnCtx,
    stem_out: Tensor,
    blocks: Vec<BlockCtx>,
    map_hw: (usize, usize),
    features: Tensor,
}

/// Residual CNN classifier with an expandable linear head.
#[derive(Clone, Debug)]
pub struct ClassifierModel {
    pub config: BackboneConfig,
    stem: ConvBn,
    blocks: Vec<BasicBlock>,
    pub head: Linear,
}

impl ClassifierModel {
    pub fn new<R: Rng>(rng: &mut R, config: BackboneConfig, num_classes: usize) -> Self {
        let stem = ConvBn::new(rng, "stem", 3, config.stem_width, 3, config.stem_stride);
        let mut cin = config.stem_width;
        let blocks = config
            .blocks
            .iter()
            .enumerate()
            .map(|(i, &(w, s))| {
                let b = BasicBlock::new(rng, &format!("block{i}"), cin, w, s);
                cin = w;
                b
            })
            .collect();
        let head = Linear::new(rng, "head", cin, num_classes);
        Self { config, stem, blocks, head }
    }

    pub fn num_classes(&self) -> usize {
        self.head.cout
    }

    pub fn feature_dim(&self) -> usize {
        self.head.cin
    }

    /// Adds `extra` freshly initialised outputs to the head.
    pub fn expand_head<R: Rng>(&mut self, rng: &mut R, extra: usize) {
        self.head.grow(rng, extra);
    }

    fn trunk(&mut self, x: &Tensor) -> (Tensor, ConvBnCtx, Tensor, Vec<BlockCtx>) {
        let train = true;
        let (mut h, stem) = self.stem.forward(x, train);
        relu(&mut h);
        let stem_out = h.clone();
        let mut ctxs = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (o, c) = b.forward(&h, train);
            ctxs.push(c);
            h = o;
        }
        (h, stem, stem_out, ctxs)
    }

    /// Inference pass (batch-norm running statistics, no tape).
    pub fn infer(&self, x: &Tensor) -> ClassifierOutput {
        let mut map = self.stem.eval(x);
        relu(&mut map);
        for b in &self.blocks {
            map = b.eval(&map);
        }
        let features = global_avg_pool(&map);
        let logits = self.head.forward(&features);
        ClassifierOutput { feature_map: map, features, logits }
    }

    /// Training-mode pass returning logits and the tape for backward.
    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, ClassifierTape) {
        let (map, stem, stem_out, blocks) = self.trunk(x);
        let features = global_avg_pool(&map);
        let logits = self.head.forward(&features);
        let tape = ClassifierTape { stem, stem_out, blocks, map_hw: (map.h, map.w), features };
        (logits, tape)
    }

    pub fn backward(&mut self, tape: ClassifierTape, dlogits: &Tensor) {
        let dfeat = self.head.backward(&tape.features, dlogits);
        let mut d = global_avg_pool_backward(&dfeat, tape.map_hw.0, tape.map_hw.1);
        for (b, c) in self.blocks.iter_mut().zip(tape.blocks).rev() {
            d = b.backward(c, d, true).expect("block input gradient");
        }
        relu_backward(&tape.stem_out, &mut d);
        self.stem.backward(tape.stem, d, false);
    }
}

impl Module for ClassifierModel {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.stem.params_into(&mut out);
        for b in &self.blocks {
            b.params_into(&mut out);
        }
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.stem.params_mut_into(&mut out);
        for b in &mut self.blocks {
            b.params_mut_into(&mut out);
        }
        out.extend(self.head.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{cross_entropy, Sgd};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_head_growth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ClassifierModel::new(&mut rng, BackboneConfig::default(), 2);
        let x = Tensor::zeros(3, 32, 32, 3);
        let out = m.infer(&x);
        assert_eq!(out.feature_map.shape(), [3, 8, 8, 64]);
        assert_eq!(out.logits.shape(), [3, 1, 1, 2]);
        m.expand_head(&mut rng, 3);
        assert_eq!(m.infer(&x).logits.c, 5);
    }

    #[test]
    fn input_gradient_flows_through_residual_trunk() {
        // A few SGD steps on a fixed batch must reduce its loss.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BackboneConfig { stem_width: 4, stem_stride: 1, blocks: vec![(4, 1), (8, 2)] };
        let mut m = ClassifierModel::new(&mut rng, cfg, 3);
        let x = Tensor::from_vec(6, 8, 8, 3, crate::nn::uniform_init(&mut rng, 6 * 64 * 3, 1.0));
        let labels = [0, 1, 2, 0, 1, 2];
        let mut opt = Sgd::new(0.05, 0.9, 0.0);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..30 {
            m.zero_grad();
            let (logits, tape) = m.forward_train(&x);
            let (loss, d) = cross_entropy(&logits, &labels);
            m.backward(tape, &d);
            opt.step(m.params_mut());
            first.get_or_insert(loss);
            last = loss;
        }
        assert!(last < 0.5 * first.unwrap(), "{first:?} -> {last}");
    }
}
