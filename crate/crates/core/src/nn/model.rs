use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    batchnorm_backward, batchnorm_eval, batchnorm_train, conv_out, conv_relu_backward,
    conv_relu_forward, linear_backward, linear_forward, relu, relu_backward, Act, BnCache,
    ConvCache, BN_MOMENTUM,
};
use crate::augment::Image;
use crate::error::{Result, TincError};
use crate::linalg::Matrix;
use crate::rng::{stream, tag};

/// Fixed input standardisation applied to [0,1] pixels.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Strided 3×3 convolutions with ReLU and global average pooling.
    SmallCnn,
    /// Flattened pixels through one hidden ReLU layer.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Network input (height, width); images are resized to this upstream.
    pub input_size: (usize, usize),
    pub cnn_channels: Vec<usize>,
    pub mlp_hidden: usize,
    pub representation_dim: usize,
    /// Hidden, hidden, ..., output widths; the last one is the embedding d.
    pub projector_dims: Vec<usize>,
    /// Hidden width of the time-difference head, when present.
    pub time_head_hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::SmallCnn,
            input_size: (64, 64),
            cnn_channels: vec![16, 32, 64, 64],
            mlp_hidden: 256,
            representation_dim: 64,
            projector_dims: vec![64, 64, 32],
            time_head_hidden: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TincError::invalid(m));
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return bad("input_size must be positive".into());
        }
        if self.representation_dim == 0 || self.projector_dims.is_empty() || self.projector_dims.contains(&0) {
            return bad("representation_dim and projector_dims must be positive".into());
        }
        match self.encoder {
            EncoderKind::SmallCnn => {
                if self.cnn_channels.is_empty() || self.cnn_channels.contains(&0) {
                    return bad("cnn_channels must be non-empty and positive".into());
                }
                if self.cnn_channels.last() != Some(&self.representation_dim) {
                    return bad(format!(
                        "last cnn channel count {} must equal representation_dim {}",
                        self.cnn_channels.last().unwrap(),
                        self.representation_dim
                    ));
                }
            }
            EncoderKind::Mlp => {
                if self.mlp_hidden == 0 {
                    return bad("mlp_hidden must be positive".into());
                }
            }
        }
        if self.time_head_hidden == Some(0) {
            return bad("time_head_hidden must be positive".into());
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.projector_dims.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in the projector normalisation.
    Train,
    /// Running statistics; outputs do not depend on the rest of the batch.
    Eval,
}

/// Gradient buffers aligned with [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= s);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    /// Weight index of each encoder layer (bias follows).
    encoder: Vec<usize>,
    /// Weight index of each projector linear layer.
    proj_linear: Vec<usize>,
    /// Gamma index of each projector normalisation (beta follows).
    proj_bn: Vec<usize>,
    head: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    pub params: Vec<Vec<f64>>,
    /// Running mean and variance per projector normalisation, interleaved.
    pub running: Vec<Vec<f64>>,
    layout: Layout,
}

pub enum EncoderCache {
    Cnn { convs: Vec<ConvCache> },
    Mlp { x: Matrix, hidden: Matrix, y: Matrix },
}

impl EncoderCache {
    /// ReLU activity flags, for finite-difference exclusion.
    pub fn relu_pattern(&self) -> Vec<bool> {
        match self {
            EncoderCache::Cnn { convs } => convs.iter().flat_map(|c| c.out.data.iter().map(|v| *v > 0.0)).collect(),
            EncoderCache::Mlp { hidden, y, .. } => hidden.as_slice().iter().chain(y.as_slice()).map(|v| *v > 0.0).collect(),
        }
    }
}

pub struct ProjectorCache {
    /// Input of each linear layer.
    inputs: Vec<Matrix>,
    bn: Vec<BnCache>,
}

impl ProjectorCache {
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.inputs[1..].iter().flat_map(|m| m.as_slice().iter().map(|v| *v > 0.0)).collect()
    }
}

pub struct TimeHeadCache {
    input: Matrix,
    hidden: Matrix,
}

impl TimeHeadCache {
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.hidden.as_slice().iter().map(|v| *v > 0.0).collect()
    }
}

struct Builder {
    rng: crate::rng::StreamRng,
    specs: Vec<ParamSpec>,
    params: Vec<Vec<f64>>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, values: Vec<f64>) -> usize {
        self.specs.push(ParamSpec { name, shape });
        self.params.push(values);
        self.params.len() - 1
    }

    fn random(&mut self, name: String, shape: Vec<usize>, bound: f64) -> usize {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.push(name, shape, values)
    }

    fn constant(&mut self, name: String, len: usize, value: f64) -> usize {
        self.push(name, vec![len], vec![value; len])
    }

    /// Weight then bias; returns the weight index.
    fn linear(&mut self, name: &str, fin: usize, fout: usize, relu_after: bool) -> usize {
        let bound = if relu_after {
            (6.0 / fin as f64).sqrt()
        } else {
            1.0 / (fin as f64).sqrt()
        };
        let w = self.random(format!("{name}.weight"), vec![fout, fin], bound);
        self.random(format!("{name}.bias"), vec![fout], 1.0 / (fin as f64).sqrt());
        w
    }
}

impl Model {
    /// Fresh weights drawn from the seed. Layers feeding a ReLU use He-uniform
    /// weights; output layers use the 1/√fan_in bound. Biases use 1/√fan_in.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: stream(seed, &[tag::INIT]),
            specs: Vec::new(),
            params: Vec::new(),
        };
        let mut layout = Layout {
            encoder: Vec::new(),
            proj_linear: Vec::new(),
            proj_bn: Vec::new(),
            head: Vec::new(),
        };
        match config.encoder {
            EncoderKind::SmallCnn => {
                let mut cin = 1;
                for (i, &c) in config.cnn_channels.iter().enumerate() {
                    let fin = cin * 9;
                    let w = b.random(format!("encoder.conv{i}.weight"), vec![c, cin, 3, 3], (6.0 / fin as f64).sqrt());
                    b.random(format!("encoder.conv{i}.bias"), vec![c], 1.0 / (fin as f64).sqrt());
                    layout.encoder.push(w);
                    cin = c;
                }
            }
            EncoderKind::Mlp => {
                let fin = config.input_size.0 * config.input_size.1;
                layout.encoder.push(b.linear("encoder.fc0", fin, config.mlp_hidden, true));
                layout.encoder.push(b.linear("encoder.fc1", config.mlp_hidden, config.representation_dim, true));
            }
        }
        let mut fin = config.representation_dim;
        let last = config.projector_dims.len() - 1;
        for (i, &fout) in config.projector_dims.iter().enumerate() {
            layout.proj_linear.push(b.linear(&format!("projector.fc{i}"), fin, fout, i < last));
            if i < last {
                let g = b.constant(format!("projector.bn{i}.weight"), fout, 1.0);
                b.constant(format!("projector.bn{i}.bias"), fout, 0.0);
                layout.proj_bn.push(g);
            }
            fin = fout;
        }
        if let Some(hidden) = config.time_head_hidden {
            let d = config.embedding_dim();
            layout.head.push(b.linear("time_head.fc0", 2 * d, hidden, true));
            layout.head.push(b.linear("time_head.fc1", hidden, 1, false));
        }
        let running = config.projector_dims[..last]
            .iter()
            .flat_map(|&f| [vec![0.0; f], vec![1.0; f]])
            .collect();
        Ok(Model {
            config,
            specs: b.specs,
            params: b.params,
            running,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.len()]).collect())
    }

    /// Names and shapes of the running-statistics buffers.
    pub fn running_specs(&self) -> Vec<ParamSpec> {
        self.config.projector_dims[..self.config.projector_dims.len() - 1]
            .iter()
            .enumerate()
            .flat_map(|(i, &f)| {
                [
                    ParamSpec {
                        name: format!("projector.bn{i}.running_mean"),
                        shape: vec![f],
                    },
                    ParamSpec {
                        name: format!("projector.bn{i}.running_var"),
                        shape: vec![f],
                    },
                ]
            })
            .collect()
    }

    /// Indices of the encoder parameters in [`Model::params`].
    pub fn encoder_param_range(&self) -> std::ops::Range<usize> {
        0..self.layout.proj_linear[0]
    }

    fn input_act(&self, images: &[Image]) -> Result<Act> {
        let (h, w) = self.config.input_size;
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.size() != (h, w) {
                return Err(TincError::ShapeMismatch {
                    left: format!("network input {h}x{w}"),
                    right: format!("image {}x{}", img.height(), img.width()),
                });
            }
            data.extend(img.pixels().iter().map(|p| (p - INPUT_MEAN) / INPUT_STD));
        }
        Ok(Act {
            c: 1,
            n: images.len(),
            h,
            w,
            data,
        })
    }

    /// Representations `Y` (n × r) and the cache for [`Model::encode_backward`].
    pub fn encode(&self, images: &[Image]) -> Result<(Matrix, EncoderCache)> {
        if images.is_empty() {
            return Err(TincError::invalid("empty image batch"));
        }
        let x = self.input_act(images)?;
        let n = images.len();
        match self.config.encoder {
            EncoderKind::SmallCnn => {
                let mut convs: Vec<ConvCache> = Vec::with_capacity(self.layout.encoder.len());
                for (i, &wi) in self.layout.encoder.iter().enumerate() {
                    let input = if i == 0 { &x } else { &convs[i - 1].out };
                    let c = self.specs[wi].shape[0];
                    let cache = conv_relu_forward(input, &self.params[wi], &self.params[wi + 1], c);
                    convs.push(cache);
                }
                let last = &convs.last().expect("at least one conv").out;
                let s = last.h * last.w;
                let y = Matrix::from_fn(n, last.c, |i, c| {
                    last.data[(c * n + i) * s..][..s].iter().sum::<f64>() / s as f64
                });
                Ok((y, EncoderCache::Cnn { convs }))
            }
            EncoderKind::Mlp => {
                let xm = Matrix::from_vec(n, x.h * x.w, x.data)?;
                let (w0, w1) = (self.layout.encoder[0], self.layout.encoder[1]);
                let mut hidden = linear_forward(&xm, &self.params[w0], &self.params[w0 + 1]);
                relu(&mut hidden);
                let mut y = linear_forward(&hidden, &self.params[w1], &self.params[w1 + 1]);
                relu(&mut y);
                Ok((y.clone(), EncoderCache::Mlp { x: xm, hidden, y }))
            }
        }
    }

    /// Representations without keeping caches, processed in chunks.
    pub fn encode_eval(&self, images: &[Image]) -> Result<Matrix> {
        const CHUNK: usize = 256;
        let mut data = Vec::with_capacity(images.len() * self.config.representation_dim);
        for chunk in images.chunks(CHUNK) {
            let (y, _) = self.encode(chunk)?;
            data.extend(y.into_vec());
        }
        Matrix::from_vec(images.len(), self.config.representation_dim, data)
    }

    /// Accumulates encoder parameter gradients from `dy` (n × r).
    pub fn encode_backward(&self, cache: &EncoderCache, dy: &Matrix, grads: &mut Grads) {
        match cache {
            EncoderCache::Cnn { convs } => {
                let last = &convs.last().expect("at least one conv").out;
                let n = last.n;
                let s = last.h * last.w;
                let mut d = vec![0.0; last.data.len()];
                for c in 0..last.c {
                    for i in 0..n {
                        let g = dy.get(i, c) / s as f64;
                        d[(c * n + i) * s..][..s].fill(g);
                    }
                }
                for (i, &wi) in self.layout.encoder.iter().enumerate().rev() {
                    let (gw, rest) = grads.0[wi..].split_at_mut(1);
                    let next = conv_relu_backward(&convs[i], &d, &self.params[wi], &mut gw[0], &mut rest[0], i > 0);
                    if let Some(nd) = next {
                        d = nd;
                    }
                }
            }
            EncoderCache::Mlp { x, hidden, y } => {
                let (w0, w1) = (self.layout.encoder[0], self.layout.encoder[1]);
                let mut dpre = dy.clone();
                relu_backward(y, &mut dpre);
                let mut dh = {
                    let (gw, rest) = grads.0[w1..].split_at_mut(1);
                    linear_backward(hidden, &dpre, &self.params[w1], &mut gw[0], &mut rest[0], true).expect("requested")
                };
                relu_backward(hidden, &mut dh);
                let (gw, rest) = grads.0[w0..].split_at_mut(1);
                linear_backward(x, &dh, &self.params[w0], &mut gw[0], &mut rest[0], false);
            }
        }
    }

    /// Embeddings `Z` (n × d).
    pub fn project(&self, y: &Matrix, mode: Mode) -> Result<(Matrix, ProjectorCache)> {
        if mode == Mode::Train && y.rows() < 2 {
            return Err(TincError::BatchTooSmall {
                term: "projector batch normalisation",
                rows: y.rows(),
            });
        }
        let mut h = y.clone();
        let mut inputs = Vec::with_capacity(self.layout.proj_linear.len());
        let mut bn = Vec::new();
        let last = self.layout.proj_linear.len() - 1;
        for (i, &wi) in self.layout.proj_linear.iter().enumerate() {
            let a = linear_forward(&h, &self.params[wi], &self.params[wi + 1]);
            inputs.push(h);
            if i == last {
                return Ok((a, ProjectorCache { inputs, bn }));
            }
            let gi = self.layout.proj_bn[i];
            let (gamma, beta) = (&self.params[gi], &self.params[gi + 1]);
            let mut b = match mode {
                Mode::Train => {
                    let (b, cache) = batchnorm_train(&a, gamma, beta);
                    bn.push(cache);
                    b
                }
                Mode::Eval => batchnorm_eval(&a, gamma, beta, &self.running[2 * i], &self.running[2 * i + 1]),
            };
            relu(&mut b);
            h = b;
        }
        unreachable!("projector has at least one layer")
    }

    /// Accumulates projector gradients and returns dL/dY. Only valid for
    /// caches produced in train mode.
    pub fn project_backward(&self, cache: &ProjectorCache, dz: &Matrix, grads: &mut Grads) -> Matrix {
        let mut d = dz.clone();
        for (i, &wi) in self.layout.proj_linear.iter().enumerate().rev() {
            let (gw, rest) = grads.0[wi..].split_at_mut(1);
            let dx = linear_backward(&cache.inputs[i], &d, &self.params[wi], &mut gw[0], &mut rest[0], true).expect("requested");
            if i == 0 {
                return dx;
            }
            let mut dpre = dx;
            relu_backward(&cache.inputs[i], &mut dpre);
            let gi = self.layout.proj_bn[i - 1];
            let (gg, rest) = grads.0[gi..].split_at_mut(1);
            d = batchnorm_backward(&cache.bn[i - 1], &dpre, &self.params[gi], &mut gg[0], &mut rest[0]);
        }
        unreachable!("projector has at least one layer")
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// averages.
    pub fn update_running_stats(&mut self, cache: &ProjectorCache) {
        for (i, bn) in cache.bn.iter().enumerate() {
            for (r, m) in self.running[2 * i].iter_mut().zip(&bn.batch_mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            for (r, v) in self.running[2 * i + 1].iter_mut().zip(&bn.batch_var_unbiased) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }

    pub fn has_time_head(&self) -> bool {
        !self.layout.head.is_empty()
    }

    /// Predicted signed time gap from the concatenated embeddings.
    pub fn time_head(&self, z1: &Matrix, z2: &Matrix) -> Result<(Vec<f64>, TimeHeadCache)> {
        if !self.has_time_head() {
            return Err(TincError::invalid("model has no time head"));
        }
        if z1.shape() != z2.shape() {
            return Err(TincError::ShapeMismatch {
                left: z1.shape_str(),
                right: z2.shape_str(),
            });
        }
        let (n, d) = z1.shape();
        let input = Matrix::from_fn(n, 2 * d, |r, c| if c < d { z1.get(r, c) } else { z2.get(r, c - d) });
        let (h0, h1) = (self.layout.head[0], self.layout.head[1]);
        let mut hidden = linear_forward(&input, &self.params[h0], &self.params[h0 + 1]);
        relu(&mut hidden);
        let out = linear_forward(&hidden, &self.params[h1], &self.params[h1 + 1]);
        Ok((out.into_vec(), TimeHeadCache { input, hidden }))
    }

    /// Accumulates head gradients and returns (dL/dZ1, dL/dZ2).
    pub fn time_head_backward(&self, cache: &TimeHeadCache, dpred: &[f64], grads: &mut Grads) -> (Matrix, Matrix) {
        let (h0, h1) = (self.layout.head[0], self.layout.head[1]);
        let n = dpred.len();
        let dout = Matrix::from_vec(n, 1, dpred.to_vec()).expect("one column");
        let mut dh = {
            let (gw, rest) = grads.0[h1..].split_at_mut(1);
            linear_backward(&cache.hidden, &dout, &self.params[h1], &mut gw[0], &mut rest[0], true).expect("requested")
        };
        relu_backward(&cache.hidden, &mut dh);
        let (gw, rest) = grads.0[h0..].split_at_mut(1);
        let dx = linear_backward(&cache.input, &dh, &self.params[h0], &mut gw[0], &mut rest[0], true).expect("requested");
        let d = dx.cols() / 2;
        (
            Matrix::from_fn(n, d, |r, c| dx.get(r, c)),
            Matrix::from_fn(n, d, |r, c| dx.get(r, c + d)),
        )
    }

    /// Encoder then projector.
    pub fn forward(&self, images: &[Image], mode: Mode) -> Result<(Matrix, Matrix)> {
        let (y, _) = self.encode(images)?;
        let (z, _) = self.project(&y, mode)?;
        Ok((y, z))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Output side lengths after the convolutional stack.
    pub fn feature_map_size(&self) -> (usize, usize) {
        let (mut h, mut w) = self.config.input_size;
        for _ in &self.config.cnn_channels {
            h = conv_out(h);
            w = conv_out(w);
        }
        (h, w)
    }
}
