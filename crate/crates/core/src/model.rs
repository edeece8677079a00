//! Shared-trunk multitask MLP with three linear heads.
//!
//! All parameters live in one contiguous `Vec<f64>` so the optimizer,
//! checkpointing and gradient checks can treat the network as a flat vector.
//! Each layer stores its weight matrix row-major as `out x in`, followed by
//! its bias. Trunk layers come first, then the AU, expression and VA heads.
//!
//! `forward` takes `&self` and returns the activation cache to the caller,
//! so a frozen teacher can be shared across threads.

use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Output width of the AU head.
pub const AU_DIM: usize = 8;
/// Output width of the expression head.
pub const EXPR_DIM: usize = 7;
/// Output width of the valence/arousal head (20 valence + 20 arousal bins).
pub const VA_DIM: usize = 40;
/// Width of one VA block.
pub const VA_BLOCK: usize = VA_DIM / 2;

pub const HEAD_DIMS: [usize; 3] = [AU_DIM, EXPR_DIM, VA_DIM];

/// Checkpoint magic, followed by a little-endian `u32` version.
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MTDNET\r\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden_dims: vec![64, 64],
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidConfig("input_dim must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(ModelError::InvalidConfig(
                "at least one hidden layer is required".into(),
            ));
        }
        if self.hidden_dims.contains(&0) {
            return Err(ModelError::InvalidConfig("hidden layer widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// One of the three tasks, and the output head that serves it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Au = 0,
    Expr = 1,
    Va = 2,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Au, Task::Expr, Task::Va];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn dim(self) -> usize {
        HEAD_DIMS[self.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    /// offset of the weight block in the flat parameter vector
    pub offset: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Raw linear outputs of the three heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub au_logits: [f64; AU_DIM],
    pub expr_logits: [f64; EXPR_DIM],
    pub va_logits: [f64; VA_DIM],
}

impl Default for ModelOutput {
    fn default() -> Self {
        Self::zeros()
    }
}

impl ModelOutput {
    pub fn zeros() -> Self {
        Self {
            au_logits: [0.0; AU_DIM],
            expr_logits: [0.0; EXPR_DIM],
            va_logits: [0.0; VA_DIM],
        }
    }

    pub fn valence_logits(&self) -> &[f64] {
        &self.va_logits[..VA_BLOCK]
    }

    pub fn arousal_logits(&self) -> &[f64] {
        &self.va_logits[VA_BLOCK..]
    }

    pub fn head(&self, task: Task) -> &[f64] {
        match task {
            Task::Au => &self.au_logits,
            Task::Expr => &self.expr_logits,
            Task::Va => &self.va_logits,
        }
    }

    pub fn head_mut(&mut self, task: Task) -> &mut [f64] {
        match task {
            Task::Au => &mut self.au_logits,
            Task::Expr => &mut self.expr_logits,
            Task::Va => &mut self.va_logits,
        }
    }

    pub fn is_finite(&self) -> bool {
        Task::ALL.iter().all(|&h| self.head(h).iter().all(|v| v.is_finite()))
    }
}

/// Gradient of a loss with respect to the three heads' logits.
pub type OutputGrads = ModelOutput;

/// Activations recorded by [`MultitaskNet::forward_cached`] for backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    /// post-ReLU output of every trunk layer
    hidden: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn trunk_output(&self) -> &[f64] {
        self.hidden.last().expect("trunk has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskNet {
    config: NetConfig,
    trunk: Vec<LayerShape>,
    heads: [LayerShape; 3],
    params: Vec<f64>,
    grads: Vec<f64>,
}

fn layout(config: &NetConfig) -> (Vec<LayerShape>, [LayerShape; 3], usize) {
    let mut offset = 0;
    let mut fan_in = config.input_dim;
    let mut trunk = Vec::with_capacity(config.hidden_dims.len());
    for &fan_out in &config.hidden_dims {
        let l = LayerShape {
            fan_in,
            fan_out,
            offset,
        };
        offset += l.len();
        trunk.push(l);
        fan_in = fan_out;
    }
    let mut head = |fan_out: usize| {
        let l = LayerShape {
            fan_in,
            fan_out,
            offset,
        };
        offset += l.len();
        l
    };
    let heads = [head(AU_DIM), head(EXPR_DIM), head(VA_DIM)];
    (trunk, heads, offset)
}

impl MultitaskNet {
    /// Glorot-uniform weights, zero biases, deterministic in `config.seed`.
    pub fn new(config: NetConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (trunk, heads, total) = layout(&config);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for l in trunk.iter().chain(heads.iter()) {
            let limit = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            for w in &mut params[l.offset..l.bias_offset()] {
                *w = rng.gen_range(-limit..=limit);
            }
        }
        Ok(Self {
            config,
            trunk,
            heads,
            grads: vec![0.0; total],
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    /// Splits into (params, grads) so an optimizer can read one while
    /// writing the other.
    pub fn params_and_grads_mut(&mut self) -> (&mut [f64], &[f64]) {
        (&mut self.params, &self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(0.0);
    }

    pub fn trunk_layers(&self) -> &[LayerShape] {
        &self.trunk
    }

    pub fn head_layer(&self, task: Task) -> LayerShape {
        self.heads[task.index()]
    }

    /// Gradient slice of one head's weights and bias.
    pub fn head_grads(&self, task: Task) -> &[f64] {
        &self.grads[self.heads[task.index()].range()]
    }

    pub fn forward(&self, x: &[f64]) -> ModelOutput {
        self.forward_cached(x).0
    }

    /// Forward pass that also returns the activations needed by `backward`.
    pub fn forward_cached(&self, x: &[f64]) -> (ModelOutput, ForwardCache) {
        assert_eq!(
            x.len(),
            self.config.input_dim,
            "forward: input has {} features, network expects {}",
            x.len(),
            self.config.input_dim
        );
        let mut hidden = Vec::with_capacity(self.trunk.len());
        let mut current: &[f64] = x;
        for l in &self.trunk {
            let mut out = vec![0.0; l.fan_out];
            affine(&self.params, l, current, &mut out);
            for v in &mut out {
                *v = v.max(0.0);
            }
            hidden.push(out);
            current = hidden.last().unwrap();
        }
        let mut output = ModelOutput::zeros();
        for head in Task::ALL {
            affine(&self.params, &self.heads[head.index()], current, output.head_mut(head));
        }
        let cache = ForwardCache {
            input: x.to_vec(),
            hidden,
        };
        (output, cache)
    }

    /// Smallest |pre-activation| over all trunk units for input `x`: the
    /// distance to the nearest ReLU kink. Central differences with a step
    /// that moves a pre-activation further than this are not meaningful.
    pub fn relu_margin(&self, x: &[f64]) -> f64 {
        let mut current = x.to_vec();
        let mut margin = f64::INFINITY;
        for l in &self.trunk {
            let mut out = vec![0.0; l.fan_out];
            affine(&self.params, l, &current, &mut out);
            for v in &mut out {
                margin = margin.min(v.abs());
                *v = v.max(0.0);
            }
            current = out;
        }
        margin
    }

    /// Accumulates parameter gradients for one instance into the grad buffer.
    pub fn backward(&mut self, cache: &ForwardCache, output_grads: &OutputGrads) {
        assert_eq!(
            cache.hidden.len(),
            self.trunk.len(),
            "backward: cache does not belong to this network"
        );
        let top = cache.trunk_output();
        let mut delta = vec![0.0; top.len()];
        for head in Task::ALL {
            let g = output_grads.head(head);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let l = self.heads[head.index()];
            affine_backward(&self.params, &mut self.grads, &l, top, g, Some(&mut delta));
        }
        for i in (0..self.trunk.len()).rev() {
            let l = self.trunk[i];
            let out = &cache.hidden[i];
            for (d, &o) in delta.iter_mut().zip(out) {
                if o <= 0.0 {
                    *d = 0.0;
                }
            }
            let input: &[f64] = if i == 0 { &cache.input } else { &cache.hidden[i - 1] };
            if i == 0 {
                affine_backward(&self.params, &mut self.grads, &l, input, &delta, None);
            } else {
                let mut below = vec![0.0; l.fan_in];
                affine_backward(&self.params, &mut self.grads, &l, input, &delta, Some(&mut below));
                delta = below;
            }
        }
    }

    /// Serializes config and parameters. Gradient buffers are not stored.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.input_dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.config.hidden_dims.len() as u64).to_le_bytes());
        for &h in &self.config.hidden_dims {
            out.extend_from_slice(&(h as u64).to_le_bytes());
        }
        out.push(match self.config.activation {
            Activation::Relu => 0,
        });
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = ByteReader { buf: bytes };
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = u32::from_le_bytes(r.array("version")?);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let input_dim = r.len_u64("input_dim")?;
        let depth = r.len_u64("hidden layer count")?;
        if depth > 1024 {
            return Err(ModelError::Corrupt(format!("{depth} hidden layers")));
        }
        let hidden_dims = (0..depth)
            .map(|_| r.len_u64("hidden width"))
            .collect::<Result<Vec<_>, _>>()?;
        let activation = match r.take(1, "activation")?[0] {
            0 => Activation::Relu,
            other => return Err(ModelError::Corrupt(format!("activation tag {other}"))),
        };
        let seed = u64::from_le_bytes(r.array("seed")?);
        let config = NetConfig {
            input_dim,
            hidden_dims,
            activation,
            seed,
        };
        config.validate().map_err(|e| ModelError::Corrupt(e.to_string()))?;
        let (trunk, heads, total) = layout(&config);
        let count = r.len_u64("parameter count")?;
        if count != total {
            return Err(ModelError::Corrupt(format!(
                "parameter count {count} does not match config ({total})"
            )));
        }
        let raw = r.take(8 * total, "parameters")?;
        let params: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !r.buf.is_empty() {
            return Err(ModelError::Corrupt(format!("{} trailing bytes", r.buf.len())));
        }
        Ok(Self {
            config,
            trunk,
            heads,
            grads: vec![0.0; total],
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ModelError> {
        if self.buf.len() < n {
            return Err(ModelError::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], ModelError> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    fn len_u64(&mut self, what: &'static str) -> Result<usize, ModelError> {
        let v = u64::from_le_bytes(self.array(what)?);
        usize::try_from(v).map_err(|_| ModelError::Corrupt(format!("{what} = {v}")))
    }
}

fn affine(params: &[f64], l: &LayerShape, input: &[f64], out: &mut [f64]) {
    let w = &params[l.offset..l.bias_offset()];
    let b = &params[l.bias_offset()..l.bias_offset() + l.fan_out];
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * l.fan_in..(j + 1) * l.fan_in];
        *o = b[j] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>();
    }
}

/// Accumulates dW, db for one layer and optionally adds `W^T g` into `below`.
fn affine_backward(
    params: &[f64],
    grads: &mut [f64],
    l: &LayerShape,
    input: &[f64],
    g: &[f64],
    below: Option<&mut [f64]>,
) {
    let (gw, gb) = grads[l.offset..l.offset + l.len()].split_at_mut(l.weight_len());
    for (j, &gj) in g.iter().enumerate() {
        if gj == 0.0 {
            continue;
        }
        gb[j] += gj;
        let row = &mut gw[j * l.fan_in..(j + 1) * l.fan_in];
        for (r, &x) in row.iter_mut().zip(input) {
            *r += gj * x;
        }
    }
    if let Some(below) = below {
        let w = &params[l.offset..l.bias_offset()];
        for (j, &gj) in g.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            let row = &w[j * l.fan_in..(j + 1) * l.fan_in];
            for (b, &wij) in below.iter_mut().zip(row) {
                *b += gj * wij;
            }
        }
    }
}
