/// Dense NHWC activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c, data: vec![0.0; n * h * w * c] }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * h * w * c, "tensor data length does not match shape");
        Self { n, h, w, c, data }
    }

    /// Rank-2 tensor stored as `[n, 1, 1, c]`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        Self::from_vec(rows, 1, 1, cols, data)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    /// Number of spatial positions across the batch (`n * h * w`).
    pub fn positions(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    /// Elementwise in-place add.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Copy of samples `idx` (in order) from the batch.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let per = self.h * self.w * self.c;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor::from_vec(idx.len(), self.h, self.w, self.c, data)
    }

    /// Split the channel axis at `at`, returning `(first, second)`.
    pub fn split_channels(&self, at: usize) -> (Tensor, Tensor) {
        assert!(at <= self.c);
        let m = self.positions();
        let (c1, c2) = (at, self.c - at);
        let mut a = Vec::with_capacity(m * c1);
        let mut b = Vec::with_capacity(m * c2);
        for row in self.data.chunks_exact(self.c) {
            a.extend_from_slice(&row[..at]);
            b.extend_from_slice(&row[at..]);
        }
        (
            Tensor::from_vec(self.n, self.h, self.w, c1, a),
            Tensor::from_vec(self.n, self.h, self.w, c2, b),
        )
    }

    /// Inverse of [`Tensor::split_channels`].
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.positions(), b.positions());
        let c = a.c + b.c;
        let mut data = Vec::with_capacity(a.positions() * c);
        for (ra, rb) in a.data.chunks_exact(a.c.max(1)).zip(b.data.chunks_exact(b.c.max(1))) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        Tensor::from_vec(a.n, a.h, a.w, c, data)
    }
}

/// A named learnable (or buffer) array with its gradient and optimizer slots.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Optimizer state; allocated lazily.
    pub(crate) slot_a: Vec<f32>,
    pub(crate) slot_b: Vec<f32>,
    /// Buffers such as running statistics are serialized but never stepped.
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape mismatch");
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
            slot_a: Vec::new(),
            slot_b: Vec::new(),
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        let mut p = Self::new(name, shape, value);
        p.trainable = false;
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Drop optimizer state, e.g. when switching optimizers between phases.
    pub fn reset_slots(&mut self) {
        self.slot_a.clear();
        self.slot_b.clear();
    }
}
