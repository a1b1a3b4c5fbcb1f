use rand::Rng;

use crate::nn::{
    sigmoid, BatchNorm, Buffer, Conv, Linear, MaxPool, Mode, Param, Parameterized, Relu, Tensor,
};

/// Filters of the three convolutional blocks.
pub const CONV_CHANNELS: [usize; 3] = [32, 64, 128];
pub const KERNEL: usize = 3;

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv,
    bn: BatchNorm,
    relu: Relu,
    pool: MaxPool,
}

/// Three conv → batch-norm → ReLU → max-pool blocks. 1-D stacks take
/// `[n, c, 1, len]` inputs and pool by 2 along the length; 2-D stacks pool
/// 2×2.
#[derive(Debug, Clone)]
pub struct ConvStack {
    blocks: Vec<ConvBlock>,
    input: (usize, usize, usize),
    output: (usize, usize, usize),
}

impl ConvStack {
    pub fn new_1d<R: Rng>(name: &str, channels: usize, len: usize, rng: &mut R) -> Self {
        Self::build(name, (channels, 1, len), false, rng)
    }

    pub fn new_2d<R: Rng>(name: &str, channels: usize, side: usize, rng: &mut R) -> Self {
        Self::build(name, (channels, side, side), true, rng)
    }

    fn build<R: Rng>(name: &str, input: (usize, usize, usize), two_d: bool, rng: &mut R) -> Self {
        let mut blocks = Vec::new();
        let (mut c, mut h, mut w) = input;
        for (i, &out) in CONV_CHANNELS.iter().enumerate() {
            let prefix = format!("{name}.conv{}", i + 1);
            let (conv, pool) = if two_d {
                (
                    Conv::new_2d(&prefix, c, out, KERNEL, rng),
                    MaxPool::new(2, 2),
                )
            } else {
                (
                    Conv::new_1d(&prefix, c, out, KERNEL, rng),
                    MaxPool::new(1, 2),
                )
            };
            let (nh, nw) = pool.out_dims(h, w);
            assert!(nh > 0 && nw > 0, "input too small for three pooling stages");
            blocks.push(ConvBlock {
                conv,
                bn: BatchNorm::new(&format!("{name}.bn{}", i + 1), out),
                relu: Relu::default(),
                pool,
            });
            (c, h, w) = (out, nh, nw);
        }
        ConvStack {
            blocks,
            input,
            output: (c, h, w),
        }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        self.output
    }

    /// Flattened output length.
    pub fn flat_len(&self) -> usize {
        self.output.0 * self.output.1 * self.output.2
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        assert_eq!((x.c, x.h, x.w), self.input, "conv stack input shape");
        let mut a = x.clone();
        for b in &mut self.blocks {
            let y = b.conv.forward(&a);
            let y = b.bn.forward(&y, mode);
            let y = b.relu.forward(y);
            a = b.pool.forward(&y);
        }
        a
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut d = dy.clone();
        for b in self.blocks.iter_mut().rev() {
            let g = b.pool.backward(&d);
            let g = b.relu.backward(g);
            let g = b.bn.backward(&g);
            d = b.conv.backward(&g);
        }
        d
    }
}

impl Parameterized for ConvStack {
    fn params(&self) -> Vec<&Param> {
        self.blocks
            .iter()
            .flat_map(|b| b.conv.params().into_iter().chain(b.bn.params()))
            .collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.conv.params_mut().into_iter().chain(b.bn.params_mut()))
            .collect()
    }
    fn buffers(&self) -> Vec<&Buffer> {
        self.blocks.iter().flat_map(|b| b.bn.buffers()).collect()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.bn.buffers_mut())
            .collect()
    }
}

/// Linear → batch-norm → ReLU.
#[derive(Debug, Clone)]
pub struct FcBlock {
    pub linear: Linear,
    pub bn: BatchNorm,
    relu: Relu,
}

impl FcBlock {
    pub fn new<R: Rng>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        FcBlock {
            linear: Linear::new(&format!("{name}.fc"), inputs, outputs, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), outputs),
            relu: Relu::default(),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let y = self.linear.forward(x);
        let y = self.bn.forward(&y, mode);
        self.relu.forward(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let g = self.relu.backward(dy.clone());
        let g = self.bn.backward(&g);
        self.linear.backward(&g)
    }
}

impl Parameterized for FcBlock {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.linear.params();
        v.extend(self.bn.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.linear.params_mut();
        v.extend(self.bn.params_mut());
        v
    }
    fn buffers(&self) -> Vec<&Buffer> {
        self.bn.buffers()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        self.bn.buffers_mut()
    }
}

/// Conv stack followed by two fully-connected blocks; the embedding is the
/// second block's ReLU output.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub stack: ConvStack,
    pub fc1: FcBlock,
    pub fc2: FcBlock,
}

impl Encoder {
    pub fn time_series<R: Rng>(
        name: &str,
        steps: usize,
        hidden: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let stack = ConvStack::new_1d(&format!("{name}.stack"), 3, steps, rng);
        Self::with_stack(name, stack, hidden, dim, rng)
    }

    pub fn image<R: Rng>(name: &str, side: usize, hidden: usize, dim: usize, rng: &mut R) -> Self {
        let stack = ConvStack::new_2d(&format!("{name}.stack"), 1, side, rng);
        Self::with_stack(name, stack, hidden, dim, rng)
    }

    fn with_stack<R: Rng>(
        name: &str,
        stack: ConvStack,
        hidden: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let flat = stack.flat_len();
        Encoder {
            fc1: FcBlock::new(&format!("{name}.fc1"), flat, hidden, rng),
            fc2: FcBlock::new(&format!("{name}.fc2"), hidden, dim, rng),
            stack,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.fc2.linear.outputs()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let h = self.stack.forward(x, mode).flatten();
        let h = self.fc1.forward(&h, mode);
        self.fc2.forward(&h, mode)
    }

    pub fn backward(&mut self, df: &Tensor) -> Tensor {
        let g = self.fc2.backward(df);
        let g = self.fc1.backward(&g);
        let (c, h, w) = self.stack.output_shape();
        self.stack.backward(&g.reshape(c, h, w))
    }
}

impl Parameterized for Encoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.stack.params();
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stack.params_mut();
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
    fn buffers(&self) -> Vec<&Buffer> {
        let mut v = self.stack.buffers();
        v.extend(self.fc1.buffers());
        v.extend(self.fc2.buffers());
        v
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        let mut v = self.stack.buffers_mut();
        v.extend(self.fc1.buffers_mut());
        v.extend(self.fc2.buffers_mut());
        v
    }
}

/// Produces one gate value per sample from both raw inputs: separate conv
/// stems, flattened outputs concatenated (image first), two FC blocks and a
/// logistic unit.
#[derive(Debug, Clone)]
pub struct GatingNet {
    pub stem_img: ConvStack,
    pub stem_ts: ConvStack,
    pub fc1: FcBlock,
    pub fc2: FcBlock,
    pub head: Linear,
    alpha: Vec<f32>,
}

impl GatingNet {
    pub fn new<R: Rng>(name: &str, steps: usize, side: usize, hidden: usize, rng: &mut R) -> Self {
        let stem_img = ConvStack::new_2d(&format!("{name}.stem_img"), 1, side, rng);
        let stem_ts = ConvStack::new_1d(&format!("{name}.stem_ts"), 3, steps, rng);
        let fused = stem_img.flat_len() + stem_ts.flat_len();
        GatingNet {
            fc1: FcBlock::new(&format!("{name}.fc1"), fused, hidden, rng),
            fc2: FcBlock::new(&format!("{name}.fc2"), hidden, hidden, rng),
            head: Linear::new(&format!("{name}.head"), hidden, 1, rng),
            stem_img,
            stem_ts,
            alpha: Vec::new(),
        }
    }

    pub fn fused_width(&self) -> usize {
        self.stem_img.flat_len() + self.stem_ts.flat_len()
    }

    /// Gate values in `[0, 1]`, one per sample.
    pub fn forward(&mut self, img: &Tensor, ts: &Tensor, mode: Mode) -> Vec<f32> {
        let a = self.stem_img.forward(img, mode).flatten();
        let b = self.stem_ts.forward(ts, mode).flatten();
        let h = Tensor::concat_features(&a, &b);
        let h = self.fc1.forward(&h, mode);
        let h = self.fc2.forward(&h, mode);
        let logits = self.head.forward(&h);
        self.alpha = logits.data.iter().map(|&z| sigmoid(z)).collect();
        self.alpha.clone()
    }

    /// Backpropagates `dL/dalpha`.
    pub fn backward(&mut self, dalpha: &[f32]) {
        assert_eq!(dalpha.len(), self.alpha.len());
        let dz: Vec<f32> = dalpha
            .iter()
            .zip(&self.alpha)
            .map(|(g, a)| g * a * (1.0 - a))
            .collect();
        let g = self.head.backward(&Tensor::matrix(dz.len(), 1, dz));
        let g = self.fc2.backward(&g);
        let g = self.fc1.backward(&g);
        let (gi, gt) = g.split_features(self.stem_img.flat_len());
        let (c, h, w) = self.stem_img.output_shape();
        self.stem_img.backward(&gi.reshape(c, h, w));
        let (c, h, w) = self.stem_ts.output_shape();
        self.stem_ts.backward(&gt.reshape(c, h, w));
    }
}

impl Parameterized for GatingNet {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.stem_img.params();
        v.extend(self.stem_ts.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stem_img.params_mut();
        v.extend(self.stem_ts.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v.extend(self.head.params_mut());
        v
    }
    fn buffers(&self) -> Vec<&Buffer> {
        let mut v = self.stem_img.buffers();
        v.extend(self.stem_ts.buffers());
        v.extend(self.fc1.buffers());
        v.extend(self.fc2.buffers());
        v
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        let mut v = self.stem_img.buffers_mut();
        v.extend(self.stem_ts.buffers_mut());
        v.extend(self.fc1.buffers_mut());
        v.extend(self.fc2.buffers_mut());
        v
    }
}

/// FC block to `hidden`, then a linear layer to class logits.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub fc: FcBlock,
    pub out: Linear,
}

impl Classifier {
    pub fn new<R: Rng>(
        name: &str,
        inputs: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        Classifier {
            fc: FcBlock::new(&format!("{name}.fc1"), inputs, hidden, rng),
            out: Linear::new(&format!("{name}.out"), hidden, classes, rng),
        }
    }

    pub fn input_width(&self) -> usize {
        self.fc.linear.inputs()
    }

    pub fn classes(&self) -> usize {
        self.out.outputs()
    }

    /// Raw logits `[n, classes]`.
    pub fn forward(&mut self, f: &Tensor, mode: Mode) -> Tensor {
        let h = self.fc.forward(f, mode);
        self.out.forward(&h)
    }

    pub fn backward(&mut self, dlogits: &Tensor) -> Tensor {
        let g = self.out.backward(dlogits);
        self.fc.backward(&g)
    }
}

impl Parameterized for Classifier {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.fc.params();
        v.extend(self.out.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.fc.params_mut();
        v.extend(self.out.params_mut());
        v
    }
    fn buffers(&self) -> Vec<&Buffer> {
        self.fc.buffers()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        self.fc.buffers_mut()
    }
}

/// Conditional modality discriminator. Input is the embedding concatenated
/// with the class one-hot; output logit of "self-augmented".
#[derive(Debug, Clone)]
pub struct Cmd {
    pub fc1: FcBlock,
    pub fc2: FcBlock,
    pub head: Linear,
    embedding_dim: usize,
}

impl Cmd {
    pub fn new<R: Rng>(name: &str, dim: usize, classes: usize, hidden: usize, rng: &mut R) -> Self {
        Cmd {
            fc1: FcBlock::new(&format!("{name}.fc1"), dim + classes, hidden, rng),
            fc2: FcBlock::new(&format!("{name}.fc2"), hidden, hidden, rng),
            head: Linear::new(&format!("{name}.head"), hidden, 1, rng),
            embedding_dim: dim,
        }
    }

    pub fn input_width(&self) -> usize {
        self.fc1.linear.inputs()
    }

    /// Logits, one per sample.
    pub fn forward_logits(&mut self, f: &Tensor, onehot: &Tensor, mode: Mode) -> Vec<f32> {
        let x = Tensor::concat_features(f, onehot);
        let h = self.fc1.forward(&x, mode);
        let h = self.fc2.forward(&h, mode);
        self.head.forward(&h).data
    }

    /// Probabilities `d_hat` that each embedding is self-augmented.
    pub fn forward(&mut self, f: &Tensor, onehot: &Tensor, mode: Mode) -> Vec<f32> {
        self.forward_logits(f, onehot, mode)
            .into_iter()
            .map(sigmoid)
            .collect()
    }

    /// Backpropagates `dL/dlogit`; returns the gradient w.r.t. the embedding.
    pub fn backward(&mut self, dlogits: &[f32]) -> Tensor {
        let g = self
            .head
            .backward(&Tensor::matrix(dlogits.len(), 1, dlogits.to_vec()));
        let g = self.fc2.backward(&g);
        let g = self.fc1.backward(&g);
        g.split_features(self.embedding_dim).0
    }
}

impl Parameterized for Cmd {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v.extend(self.head.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v.extend(self.head.params_mut());
        v
    }
    fn buffers(&self) -> Vec<&Buffer> {
        let mut v = self.fc1.buffers();
        v.extend(self.fc2.buffers());
        v
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        let mut v = self.fc1.buffers_mut();
        v.extend(self.fc2.buffers_mut());
        v
    }
}
