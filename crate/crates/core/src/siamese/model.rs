use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    bce_with_logits, global_avg_pool, global_avg_pool_backward, im2col, col2im, maxpool2, maxpool2_backward,
    relu_backward, relu_inplace, sigmoid, ConvShape, Dense,
};
use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 512;
pub const CONV_LAYERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 2x2 max-pool after the activation.
    pub pool: bool,
}

/// Branch and head layout. Every layer but the last head layer is followed by
/// a ReLU; the last feeds a sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub conv_layers: Vec<ConvSpec>,
    pub embedding_dim: usize,
    /// Head widths after concatenating both embeddings; must end in 1.
    pub fc_layers: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::with_filters([64, 128, 256, 256, 256], 256)
    }
}

impl ModelSpec {
    /// The default kernel/stride/pool stack with custom filter counts.
    pub fn with_filters(filters: [usize; CONV_LAYERS], head_width: usize) -> Self {
        let kernels = [7, 5, 3, 3, 3];
        let pools = [true, true, false, false, true];
        Self {
            in_channels: 1,
            conv_layers: (0..CONV_LAYERS)
                .map(|i| ConvSpec {
                    filters: filters[i],
                    kernel: kernels[i],
                    stride: if i == 0 { 2 } else { 1 },
                    pool: pools[i],
                })
                .collect(),
            embedding_dim: EMBEDDING_DIM,
            fc_layers: vec![head_width, 1],
            init_seed: 0,
        }
    }

    /// A narrower stack for CPU-scale experiments; same depth and embedding size.
    pub fn compact() -> Self {
        Self::with_filters([16, 32, 64, 64, 64], 128)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.conv_layers.len() != CONV_LAYERS {
            return bad(format!("branch needs exactly {CONV_LAYERS} conv layers, got {}", self.conv_layers.len()));
        }
        if self.embedding_dim != EMBEDDING_DIM {
            return bad(format!("embedding_dim must be {EMBEDDING_DIM}"));
        }
        if self.fc_layers.last() != Some(&1) {
            return bad("fc_layers must end in 1".into());
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return bad("in_channels must be 1 or 3".into());
        }
        if self
            .conv_layers
            .iter()
            .any(|c| c.filters == 0 || c.kernel == 0 || c.stride == 0)
            || self.fc_layers.contains(&0)
        {
            return bad("layer sizes must be positive".into());
        }
        Ok(())
    }
}

/// Weights of the shared branch and the classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub convs: Vec<Dense>,
    pub embed: Dense,
    pub head: Vec<Dense>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self.convs.iter().map(Dense::zeros_like).collect(),
            embed: self.embed.zeros_like(),
            head: self.head.iter().map(Dense::zeros_like).collect(),
        }
    }

    /// Every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<&Vec<f32>> {
        self.layers().flat_map(|d| [&d.weight, &d.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        self.convs
            .iter_mut()
            .chain(std::iter::once(&mut self.embed))
            .chain(self.head.iter_mut())
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.convs.iter().chain(std::iter::once(&self.embed)).chain(self.head.iter())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Two weight-sharing convolutional branches whose embeddings are
/// concatenated and classified as similar/different.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseNet {
    pub spec: ModelSpec,
    pub patch_size: (usize, usize),
    pub params: Params,
    shapes: Vec<ConvShape>,
}

struct BranchCache {
    /// Input of each conv layer.
    inputs: Vec<Vec<f32>>,
    /// Post-ReLU conv outputs (pre-pool).
    activations: Vec<Vec<f32>>,
    pool_args: Vec<Option<Vec<u32>>>,
    pooled: Vec<f32>,
    embedding: Vec<f32>,
}

fn conv_shapes(spec: &ModelSpec, (h, w): (usize, usize)) -> Result<Vec<ConvShape>> {
    let mut shapes = Vec::with_capacity(spec.conv_layers.len());
    let (mut h, mut w, mut cin) = (h, w, spec.in_channels);
    for (i, c) in spec.conv_layers.iter().enumerate() {
        let pad = c.kernel / 2;
        let too_small = |layer: String| Error::PatchTooSmall {
            layer,
            height: h,
            width: w,
        };
        if h + 2 * pad < c.kernel || w + 2 * pad < c.kernel {
            return Err(too_small(format!("conv{}", i + 1)));
        }
        let shape = ConvShape {
            cin,
            cout: c.filters,
            kernel: c.kernel,
            stride: c.stride,
            pad,
            h,
            w,
            ho: (h + 2 * pad - c.kernel) / c.stride + 1,
            wo: (w + 2 * pad - c.kernel) / c.stride + 1,
            pool: c.pool,
        };
        let (oh, ow) = shape.out_hw();
        if oh == 0 || ow == 0 {
            return Err(too_small(format!("pool after conv{}", i + 1)));
        }
        shapes.push(shape);
        (h, w, cin) = (oh, ow, c.filters);
    }
    Ok(shapes)
}

impl SiameseNet {
    pub fn new(spec: &ModelSpec, patch_size: (usize, usize)) -> Result<Self> {
        spec.validate()?;
        let shapes = conv_shapes(spec, patch_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let convs = shapes
            .iter()
            .map(|s| Dense::init(s.cout, s.patch_len(), &mut rng))
            .collect();
        let last_filters = spec.conv_layers.last().expect("validated").filters;
        let embed = Dense::init(spec.embedding_dim, last_filters, &mut rng);
        let mut head = Vec::new();
        let mut width = 2 * spec.embedding_dim;
        for &out in &spec.fc_layers {
            head.push(Dense::init(out, width, &mut rng));
            width = out;
        }
        Ok(Self {
            spec: spec.clone(),
            patch_size,
            params: Params { convs, embed, head },
            shapes,
        })
    }

    pub fn with_params(spec: &ModelSpec, patch_size: (usize, usize), params: Params) -> Result<Self> {
        let mut net = Self::new(spec, patch_size)?;
        let fits = net
            .params
            .tensors()
            .iter()
            .zip(params.tensors())
            .all(|(a, b)| a.len() == b.len())
            && net.params.tensors().len() == params.tensors().len();
        if !fits {
            return Err(Error::InvalidConfig("weights do not match the model spec".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    /// Pack patches into a `[C, B, H, W]` tensor with ink = 1, paper = 0.
    pub fn pack(&self, patches: &[&Array2<u8>]) -> Result<Vec<f32>> {
        let (h, w) = self.patch_size;
        let mut plane = Vec::with_capacity(patches.len() * h * w);
        for (i, p) in patches.iter().enumerate() {
            if p.dim() != (h, w) {
                return Err(Error::SizeMismatch {
                    expected: (h, w),
                    actual: p.dim(),
                    index: Some(i),
                });
            }
            plane.extend(p.iter().map(|&v| (255 - v) as f32 / 255.0));
        }
        Ok(plane.repeat(self.spec.in_channels))
    }

    fn branch_forward(&self, x: Vec<f32>, batch: usize, keep: bool) -> (Vec<f32>, Option<BranchCache>) {
        let mut cache = keep.then(|| BranchCache {
            inputs: Vec::new(),
            activations: Vec::new(),
            pool_args: Vec::new(),
            pooled: Vec::new(),
            embedding: Vec::new(),
        });
        let mut x = x;
        for (layer, s) in self.params.convs.iter().zip(&self.shapes) {
            let cols = im2col(&x, s, batch);
            let mut y = layer.forward(&cols, batch * s.ho * s.wo);
            relu_inplace(&mut y);
            let (next, arg) = if s.pool {
                let (p, a) = maxpool2(&y, s.cout * batch, s.ho, s.wo);
                (p, Some(a))
            } else {
                (y.clone(), None)
            };
            if let Some(c) = cache.as_mut() {
                c.inputs.push(std::mem::take(&mut x));
                c.activations.push(y);
                c.pool_args.push(arg);
            }
            x = next;
        }
        let last = self.shapes.last().expect("validated");
        let (oh, ow) = last.out_hw();
        let pooled = global_avg_pool(&x, last.cout * batch, oh * ow);
        let mut emb = self.params.embed.forward(&pooled, batch);
        relu_inplace(&mut emb);
        if let Some(c) = cache.as_mut() {
            c.pooled = pooled;
            c.embedding = emb.clone();
        }
        (emb, cache)
    }

    fn branch_backward(&self, cache: BranchCache, d_emb: Vec<f32>, batch: usize, grad: &mut Params) {
        let mut d = d_emb;
        relu_backward(&cache.embedding, &mut d);
        let mut d = self
            .params
            .embed
            .backward(&cache.pooled, &d, batch, &mut grad.embed, true)
            .expect("dx requested");
        let last = self.shapes.last().expect("validated");
        let (oh, ow) = last.out_hw();
        d = global_avg_pool_backward(&d, oh * ow);

        for i in (0..self.shapes.len()).rev() {
            let s = &self.shapes[i];
            if let Some(arg) = &cache.pool_args[i] {
                d = maxpool2_backward(&d, arg, cache.activations[i].len());
            }
            relu_backward(&cache.activations[i], &mut d);
            let cols = im2col(&cache.inputs[i], s, batch);
            let need_dx = i > 0;
            let dcols = self.params.convs[i].backward(&cols, &d, batch * s.ho * s.wo, &mut grad.convs[i], need_dx);
            if let Some(dcols) = dcols {
                d = col2im(&dcols, s, batch);
            }
        }
    }

    /// Embeddings `[embedding_dim, B]` for a packed batch.
    pub fn embed_packed(&self, x: Vec<f32>, batch: usize) -> Vec<f32> {
        self.branch_forward(x, batch, false).0
    }

    /// One embedding vector per patch, in input order.
    pub fn embed(&self, patches: &[&Array2<u8>]) -> Result<Vec<Vec<f32>>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let batch = patches.len();
        let emb = self.embed_packed(self.pack(patches)?, batch);
        Ok(transpose_columns(&emb, self.embedding_dim(), batch))
    }

    fn head_forward(&self, concat: Vec<f32>, batch: usize) -> (Vec<f32>, Vec<Vec<f32>>) {
        let mut acts = vec![concat];
        let n = self.params.head.len();
        for (i, layer) in self.params.head.iter().enumerate() {
            let mut y = layer.forward(acts.last().expect("non-empty"), batch);
            if i + 1 < n {
                relu_inplace(&mut y);
            }
            acts.push(y);
        }
        let logits = acts.pop().expect("head has layers");
        (logits, acts)
    }

    fn concat(&self, emb: &[f32], batch: usize) -> Vec<f32> {
        // emb is [D, 2B]: columns 0..B are left patches, B..2B right patches.
        let d = self.embedding_dim();
        let mut out = Vec::with_capacity(2 * d * batch);
        for row in emb.chunks_exact(2 * batch) {
            out.extend_from_slice(&row[..batch]);
        }
        for row in emb.chunks_exact(2 * batch) {
            out.extend_from_slice(&row[batch..]);
        }
        out
    }

    /// Similarity logits for a batch of pairs, given as left and right packed
    /// tensors stacked along the batch axis.
    fn pair_logits(&self, left: &[&Array2<u8>], right: &[&Array2<u8>]) -> Result<Vec<f32>> {
        let batch = left.len();
        let all: Vec<&Array2<u8>> = left.iter().chain(right).copied().collect();
        let emb = self.embed_packed(self.pack(&all)?, 2 * batch);
        Ok(self.head_forward(self.concat(&emb, batch), batch).0)
    }

    /// Probability that each (left, right) pair is similar.
    pub fn classify(&self, left: &[&Array2<u8>], right: &[&Array2<u8>]) -> Result<Vec<f64>> {
        assert_eq!(left.len(), right.len());
        if left.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.pair_logits(left, right)?.iter().map(|&z| sigmoid(z as f64)).collect())
    }

    /// Mean binary cross-entropy over a batch without touching gradients.
    pub fn loss(&self, left: &[&Array2<u8>], right: &[&Array2<u8>], targets: &[f32]) -> Result<f64> {
        Ok(bce_with_logits(&self.pair_logits(left, right)?, targets).0)
    }

    /// Loss and parameter gradients for one batch of pairs.
    pub fn loss_and_grad(&self, left: &[&Array2<u8>], right: &[&Array2<u8>], targets: &[f32]) -> Result<(f64, Params)> {
        let batch = left.len();
        let all: Vec<&Array2<u8>> = left.iter().chain(right).copied().collect();
        let (emb, cache) = self.branch_forward(self.pack(&all)?, 2 * batch, true);
        let (logits, acts) = self.head_forward(self.concat(&emb, batch), batch);
        let (loss, dlogits) = bce_with_logits(&logits, targets);

        let mut grad = self.params.zeros_like();
        let mut d = dlogits;
        for i in (0..self.params.head.len()).rev() {
            if i + 1 < self.params.head.len() {
                relu_backward(&acts[i + 1], &mut d);
            }
            d = self.params.head[i]
                .backward(&acts[i], &d, batch, &mut grad.head[i], true)
                .expect("dx requested");
        }
        // Split the concatenated gradient back into [D, 2B].
        let dim = self.embedding_dim();
        let (dl, dr) = d.split_at(dim * batch);
        let mut d_emb = Vec::with_capacity(2 * dim * batch);
        for (l, r) in dl.chunks_exact(batch).zip(dr.chunks_exact(batch)) {
            d_emb.extend_from_slice(l);
            d_emb.extend_from_slice(r);
        }
        self.branch_backward(cache.expect("cache kept"), d_emb, 2 * batch, &mut grad);
        Ok((loss, grad))
    }
}

/// `[D, B]` column-major data to one `Vec` per column.
pub(crate) fn transpose_columns(data: &[f32], dim: usize, batch: usize) -> Vec<Vec<f32>> {
    (0..batch)
        .map(|b| (0..dim).map(|d| data[d * batch + b]).collect())
        .collect()
}
