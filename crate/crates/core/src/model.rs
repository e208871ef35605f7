//! Transformer over n-dimensional numeric sequences.
//!
//! Each timestep's n-vector is projected by a linear layer (`h = W x + b`), a
//! learned absolute position row is added, and a stack of pre-norm blocks
//! (bidirectional or causal self-attention, GELU feed-forward) produces the
//! hidden sequence `H`. In pretraining mode `n` independent linear heads map
//! `H` to `k` bin logits per input dimension; in downstream mode they are
//! replaced by one pooled classification head.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, SoftmaxMask, Var, LAYER_NORM_EPS};
use crate::params::{Bound, ParamSet};
use crate::preprocess::SequenceBatch;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attention {
    Bidirectional,
    Causal,
}

impl Arch {
    pub fn attention(self) -> Attention {
        match self {
            Arch::Encoder => Attention::Bidirectional,
            Arch::Decoder => Attention::Causal,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
    FirstPosition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input dimensions per timestep.
    pub n_dims: usize,
    pub d_model: usize,
    pub max_len: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Bin count, which is also the output width of every parallel head.
    pub bins: usize,
    pub arch: Arch,
    pub dropout: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_dims: 3,
            d_model: 64,
            max_len: 300,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            bins: 100,
            arch: Arch::Encoder,
            dropout: 0.0,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_dims == 0 || self.d_model == 0 || self.max_len == 0 || self.ff_mult == 0 {
            return fail("n_dims, d_model, max_len and ff_mult must be positive".into());
        }
        if self.layers == 0 {
            return fail("at least one layer is required".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.bins < 2 {
            return fail(format!("bin count must be at least 2, got {}", self.bins));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ff_width(&self) -> usize {
        self.ff_mult * self.d_model
    }
}

/// Which output layer a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OutputHead {
    /// One bin classifier per input dimension.
    Parallel,
    Classifier { num_classes: usize, pooling: Pooling },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn body_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, ff) = (c.d_model, c.ff_width());
    let mut v = vec![
        ("embed.weight".to_string(), vec![d, c.n_dims], Init::Normal),
        ("embed.bias".to_string(), vec![d], Init::Zeros),
        ("position".to_string(), vec![c.max_len, d], Init::Normal),
    ];
    for l in 0..c.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        v.push((p("ln1.gain"), vec![d], Init::Ones));
        v.push((p("ln1.bias"), vec![d], Init::Zeros));
        for proj in ["query", "key", "value", "out"] {
            v.push((p(&format!("attn.{proj}.weight")), vec![d, d], Init::Normal));
            v.push((p(&format!("attn.{proj}.bias")), vec![d], Init::Zeros));
        }
        v.push((p("ln2.gain"), vec![d], Init::Ones));
        v.push((p("ln2.bias"), vec![d], Init::Zeros));
        v.push((p("ffn.up.weight"), vec![ff, d], Init::Normal));
        v.push((p("ffn.up.bias"), vec![ff], Init::Zeros));
        v.push((p("ffn.down.weight"), vec![d, ff], Init::Normal));
        v.push((p("ffn.down.bias"), vec![d], Init::Zeros));
    }
    v.push(("final_ln.gain".to_string(), vec![d], Init::Ones));
    v.push(("final_ln.bias".to_string(), vec![d], Init::Zeros));
    v
}

fn head_shapes(c: &ModelConfig, head: OutputHead) -> Vec<(String, Vec<usize>, Init)> {
    match head {
        OutputHead::Parallel => (0..c.n_dims)
            .flat_map(|i| {
                [
                    (format!("heads.{i}.weight"), vec![c.bins, c.d_model], Init::Normal),
                    (format!("heads.{i}.bias"), vec![c.bins], Init::Zeros),
                ]
            })
            .collect(),
        OutputHead::Classifier { num_classes, .. } => vec![
            ("classifier.weight".to_string(), vec![num_classes, c.d_model], Init::Normal),
            ("classifier.bias".to_string(), vec![num_classes], Init::Zeros),
        ],
    }
}

/// Name and shape of every parameter a model with this configuration and head carries,
/// in canonical order.
pub fn parameter_layout(config: &ModelConfig, head: OutputHead) -> Vec<(String, Vec<usize>)> {
    body_shapes(config)
        .into_iter()
        .chain(head_shapes(config, head))
        .map(|(n, s, _)| (n, s))
        .collect()
}

fn is_head_param(name: &str) -> bool {
    name.starts_with("heads.") || name.starts_with("classifier.")
}

fn fill<S: Scalar>(
    params: &mut ParamSet<S>,
    shapes: Vec<(String, Vec<usize>, Init)>,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    for (name, shape, init) in shapes {
        let t = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, S::one()),
            Init::Normal => {
                let n = shape.iter().product();
                let data = (0..n).map(|_| S::from_f64_lossy(normal.sample(rng))).collect();
                Tensor::new(shape, data)?
            }
        };
        params.insert(name, t);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub head: OutputHead,
    pub params: ParamSet<S>,
}

/// Fresh pretraining-mode model: weights ~ N(0, init_std^2), biases 0, layer-norm gains 1.
pub fn init_model<S: Scalar>(config: &ModelConfig) -> Result<Model<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamSet::new();
    fill(&mut params, body_shapes(config), config.init_std, &mut rng)?;
    fill(&mut params, head_shapes(config, OutputHead::Parallel), config.init_std, &mut rng)?;
    Ok(Model { config: config.clone(), head: OutputHead::Parallel, params })
}

/// Total number of trainable scalars.
pub fn count_parameters<S: Scalar>(params: &ParamSet<S>) -> usize {
    params.iter().filter(|(_, t)| t.requires_grad).map(|(_, t)| t.len()).sum()
}

/// Drops the parallel bin heads and attaches a freshly initialized classifier. All body
/// parameters are carried over unchanged.
pub fn swap_pretrain_head_for_classifier<S: Scalar>(
    model: &Model<S>,
    num_classes: usize,
    pooling: Pooling,
    seed: u64,
) -> Result<Model<S>> {
    if model.head != OutputHead::Parallel {
        return Err(Error::Mode("head swap expects a pretraining-mode model".into()));
    }
    if num_classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut params = ParamSet::new();
    for (name, t) in model.params.iter() {
        if !is_head_param(name) {
            params.insert(name, t.clone());
        }
    }
    let head = OutputHead::Classifier { num_classes, pooling };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fill(&mut params, head_shapes(&model.config, head), model.config.init_std, &mut rng)?;
    Ok(Model { config: model.config.clone(), head, params })
}

/// Fresh downstream-mode model, the "no pretraining" baseline.
pub fn init_classifier_model<S: Scalar>(
    config: &ModelConfig,
    num_classes: usize,
    pooling: Pooling,
) -> Result<Model<S>> {
    let pre = init_model(config)?;
    swap_pretrain_head_for_classifier(&pre, num_classes, pooling, config.seed.wrapping_add(1))
}

/// Optional dropout randomness for a training-mode forward pass.
pub type DropoutRng<'a> = Option<&'a mut dyn RngCore>;

impl<S: Scalar> Model<S> {
    pub fn num_classes(&self) -> Option<usize> {
        match self.head {
            OutputHead::Classifier { num_classes, .. } => Some(num_classes),
            OutputHead::Parallel => None,
        }
    }

    /// `hidden[b, t] = W x[b, t] + b + P[t]`, shape `[batch, len, d_model]`.
    pub fn embed_sequence(&self, g: &mut Graph<S>, p: &Bound, batch: &SequenceBatch<S>) -> Result<Var> {
        let c = &self.config;
        if batch.dims() != c.n_dims {
            return Err(Error::shape(format!(
                "model expects {} input dimensions, batch has {}",
                c.n_dims,
                batch.dims()
            )));
        }
        if batch.len() > c.max_len {
            return Err(Error::shape(format!(
                "sequence length {} exceeds the model's {}",
                batch.len(),
                c.max_len
            )));
        }
        let x = g.constant(Tensor::new(vec![batch.batch(), batch.len(), c.n_dims], batch.data().to_vec())?)?;
        let h = g.matmul_nt(x, p.get("embed.weight")?)?;
        let h = g.add(h, p.get("embed.bias")?)?;
        g.add_positions(h, p.get("position")?)
    }

    fn linear(&self, g: &mut Graph<S>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let y = g.matmul_nt(x, p.get(&format!("{prefix}.weight"))?)?;
        g.add(y, p.get(&format!("{prefix}.bias"))?)
    }

    fn layer_norm(&self, g: &mut Graph<S>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let gain = p.get(&format!("{prefix}.gain"))?;
        let bias = p.get(&format!("{prefix}.bias"))?;
        g.layer_norm(x, gain, bias, S::from_f64_lossy(LAYER_NORM_EPS))
    }

    fn maybe_dropout(&self, g: &mut Graph<S>, x: Var, rng: &mut DropoutRng<'_>) -> Result<Var> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => g.dropout(x, self.config.dropout, r),
            _ => Ok(x),
        }
    }

    fn self_attention(&self, g: &mut Graph<S>, p: &Bound, x: Var, layer: usize, mask: SoftmaxMask) -> Result<Var> {
        let c = &self.config;
        let shape = g.shape(x).to_vec();
        let (b, l) = (shape[0], shape[1]);
        let (h, dh) = (c.heads, c.head_dim());
        let mut split = |name: &str| -> Result<Var> {
            let y = self.linear(g, p, x, &format!("layers.{layer}.attn.{name}"))?;
            let y = g.reshape(y, &[b, l, h, dh])?;
            g.swap_axes_12(y)
        };
        let q = split("query")?;
        let k = split("key")?;
        let v = split("value")?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, S::from_usize_lossy(dh).sqrt().recip())?;
        let probs = g.softmax(scores, mask)?;
        let ctx = g.matmul(probs, v)?;
        let ctx = g.swap_axes_12(ctx)?;
        let ctx = g.reshape(ctx, &[b, l, c.d_model])?;
        self.linear(g, p, ctx, &format!("layers.{layer}.attn.out"))
    }

    /// Runs the block stack and the final layer norm over an embedded sequence.
    pub fn encoder_forward(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        hidden: Var,
        attention: Attention,
        mut rng: DropoutRng<'_>,
    ) -> Result<Var> {
        let mask = match attention {
            Attention::Bidirectional => SoftmaxMask::None,
            Attention::Causal => SoftmaxMask::Causal,
        };
        let mut x = hidden;
        for layer in 0..self.config.layers {
            let pre = format!("layers.{layer}");
            let a = self.layer_norm(g, p, x, &format!("{pre}.ln1"))?;
            let a = self.self_attention(g, p, a, layer, mask)?;
            let a = self.maybe_dropout(g, a, &mut rng)?;
            x = g.add(x, a)?;

            let f = self.layer_norm(g, p, x, &format!("{pre}.ln2"))?;
            let f = self.linear(g, p, f, &format!("{pre}.ffn.up"))?;
            let f = g.gelu(f)?;
            let f = self.linear(g, p, f, &format!("{pre}.ffn.down"))?;
            let f = self.maybe_dropout(g, f, &mut rng)?;
            x = g.add(x, f)?;

            if !g.value(x).all_finite() {
                return Err(Error::Numeric(format!("non-finite activations after layer {layer}")));
            }
        }
        self.layer_norm(g, p, x, "final_ln")
    }

    /// Embedding plus encoder with the attention pattern implied by the architecture.
    pub fn hidden_states(&self, g: &mut Graph<S>, p: &Bound, batch: &SequenceBatch<S>, rng: DropoutRng<'_>) -> Result<Var> {
        let h = self.embed_sequence(g, p, batch)?;
        self.encoder_forward(g, p, h, self.config.arch.attention(), rng)
    }

    /// One `[batch, len, bins]` logit tensor per input dimension.
    pub fn parallel_heads_forward(&self, g: &mut Graph<S>, p: &Bound, hidden: Var) -> Result<Vec<Var>> {
        if self.head != OutputHead::Parallel {
            return Err(Error::Mode("parallel bin heads are only present in pretraining mode".into()));
        }
        (0..self.config.n_dims).map(|i| self.linear(g, p, hidden, &format!("heads.{i}"))).collect()
    }

    /// Pooled class logits, `[batch, num_classes]`.
    pub fn classification_forward(&self, g: &mut Graph<S>, p: &Bound, hidden: Var) -> Result<Var> {
        let OutputHead::Classifier { pooling, .. } = self.head else {
            return Err(Error::Mode("classification head is only present in downstream mode".into()));
        };
        let pooled = match pooling {
            Pooling::Mean => g.mean_axis1(hidden)?,
            Pooling::FirstPosition => g.select_axis1(hidden, 0)?,
        };
        self.linear(g, p, pooled, "classifier")
    }

    /// Inference-mode class logits for a batch, `[batch, num_classes]` row-major.
    pub fn class_logits(&self, batch: &SequenceBatch<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let h = self.hidden_states(&mut g, &p, batch, None)?;
        let logits = self.classification_forward(&mut g, &p, h)?;
        Ok(g.value(logits).clone())
    }

    /// Inference-mode bin logits per dimension.
    pub fn bin_logits(&self, batch: &SequenceBatch<S>) -> Result<Vec<Tensor<S>>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g)?;
        let h = self.hidden_states(&mut g, &p, batch, None)?;
        let heads = self.parallel_heads_forward(&mut g, &p, h)?;
        Ok(heads.into_iter().map(|v| g.value(v).clone()).collect())
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model { config: self.config.clone(), head: self.head, params: self.params.cast() }
    }

    pub fn is_body_param(name: &str) -> bool {
        !is_head_param(name)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    use super::*;

    fn tiny(arch: Arch) -> ModelConfig {
        ModelConfig { n_dims: 3, d_model: 8, max_len: 8, layers: 1, heads: 2, bins: 5, arch, ..Default::default() }
    }

    // Closed-form count, summed by hand from the block layout.
    fn closed_form(c: &ModelConfig, head: OutputHead) -> usize {
        let (n, d, l, ff) = (c.n_dims, c.d_model, c.max_len, c.ff_width());
        let per_layer = 4 * (d * d + d) + (ff * d + ff) + (d * ff + d) + 4 * d;
        let heads = match head {
            OutputHead::Parallel => n * (c.bins * d + c.bins),
            OutputHead::Classifier { num_classes, .. } => num_classes * (d + 1),
        };
        n * d + d + l * d + c.layers * per_layer + 2 * d + heads
    }

    fn random_batch(b: usize, l: usize, n: usize, seed: u64) -> SequenceBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SequenceBatch::new((0..b * l * n).map(|_| rng.random::<f64>()).collect(), b, l, n).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let c = tiny(Arch::Encoder);
        let a = init_model::<f32>(&c).unwrap();
        let b = init_model::<f32>(&c).unwrap();
        assert_eq!(a, b);
        let other = init_model::<f32>(&ModelConfig { seed: 9, ..c }).unwrap();
        assert_ne!(a.params, other.params);
    }

    #[test]
    fn config_guards() {
        let bad = ModelConfig { d_model: 8, heads: 3, ..Default::default() };
        assert!(matches!(init_model::<f32>(&bad), Err(Error::Config(_))));
        let bad = ModelConfig { layers: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for c in [tiny(Arch::Encoder), ModelConfig::default(), ModelConfig { layers: 3, ff_mult: 2, ..tiny(Arch::Decoder) }] {
            let m = init_model::<f32>(&c).unwrap();
            assert_eq!(count_parameters(&m.params), closed_form(&c, OutputHead::Parallel));
            let layout: usize = parameter_layout(&c, m.head).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
            assert_eq!(layout, count_parameters(&m.params));
        }
    }

    #[test]
    fn head_only_count() {
        let c = ModelConfig { n_dims: 3, d_model: 4, heads: 1, bins: 5, ..Default::default() };
        let m = init_model::<f32>(&c).unwrap();
        let heads: usize = m.params.iter().filter(|(n, _)| n.starts_with("heads.")).map(|(_, t)| t.len()).sum();
        assert_eq!(heads, 75);
    }

    #[test]
    fn head_swap_preserves_body_and_counts() {
        let c = tiny(Arch::Encoder);
        let pre = init_model::<f32>(&c).unwrap();
        let down = swap_pretrain_head_for_classifier(&pre, 4, Pooling::Mean, 7).unwrap();
        for (name, t) in pre.params.iter().filter(|(n, _)| Model::<f32>::is_body_param(n)) {
            assert_eq!(down.params.get(name).unwrap().data(), t.data(), "{name}");
        }
        let (n, d, k) = (c.n_dims, c.d_model, c.bins);
        assert_eq!(
            count_parameters(&down.params) as i64 - count_parameters(&pre.params) as i64,
            (4 * (d + 1)) as i64 - (n * (k * d + k)) as i64
        );
        assert!(count_parameters(&down.params) < count_parameters(&pre.params));

        let mut g = Graph::new();
        let p = down.params.bind(&mut g).unwrap();
        let x = random_batch(1, 4, 3, 1).cast::<f32>();
        let h = down.hidden_states(&mut g, &p, &x, None).unwrap();
        assert!(matches!(down.parallel_heads_forward(&mut g, &p, h), Err(Error::Mode(_))));
        assert!(matches!(swap_pretrain_head_for_classifier(&down, 3, Pooling::Mean, 0), Err(Error::Mode(_))));
        assert!(matches!(swap_pretrain_head_for_classifier(&pre, 1, Pooling::Mean, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_embedding_gives_zero_hidden() {
        let c = tiny(Arch::Encoder);
        let mut m = init_model::<f64>(&c).unwrap();
        for name in ["embed.weight", "embed.bias", "position"] {
            m.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = m.params.bind(&mut g).unwrap();
        let h = m.embed_sequence(&mut g, &p, &random_batch(2, 5, 3, 3)).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_embedding_channel() {
        let c = ModelConfig { n_dims: 1, ..tiny(Arch::Encoder) };
        let mut m = init_model::<f64>(&c).unwrap();
        let w = m.params.get_mut("embed.weight").unwrap().data_mut();
        w.iter_mut().enumerate().for_each(|(i, v)| *v = if i == 0 { 1.0 } else { 0.0 });
        m.params.get_mut("position").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = random_batch(2, 6, 1, 4);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g).unwrap();
        let h = m.embed_sequence(&mut g, &p, &x).unwrap();
        let hv = g.value(h).data();
        for (i, &xv) in x.data().iter().enumerate() {
            assert_eq!(hv[i * c.d_model], xv);
        }
    }

    #[test]
    fn embedding_matches_dense_oracle() {
        let c = tiny(Arch::Encoder);
        let mut m = init_model::<f64>(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (_, t) in m.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let x = random_batch(2, 7, 3, 5);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g).unwrap();
        let h = m.embed_sequence(&mut g, &p, &x).unwrap();
        let (w, b, pos) = (
            m.params.get("embed.weight").unwrap().data(),
            m.params.get("embed.bias").unwrap().data(),
            m.params.get("position").unwrap().data(),
        );
        let d = c.d_model;
        for bi in 0..2 {
            for t in 0..7 {
                for j in 0..d {
                    let mut acc = b[j] + pos[t * d + j];
                    for i in 0..3 {
                        acc += w[j * 3 + i] * x.get(bi, t, i);
                    }
                    assert_abs_diff_eq!(g.value(h).data()[(bi * 7 + t) * d + j], acc, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn embedding_rejects_wrong_width_or_length() {
        let m = init_model::<f64>(&tiny(Arch::Encoder)).unwrap();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g).unwrap();
        assert!(matches!(m.embed_sequence(&mut g, &p, &random_batch(1, 4, 2, 0)), Err(Error::Shape(_))));
        assert!(matches!(m.embed_sequence(&mut g, &p, &random_batch(1, 9, 3, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_heads_emit_their_bias() {
        let c = tiny(Arch::Encoder);
        let mut m = init_model::<f64>(&c).unwrap();
        m.params.get_mut("heads.1.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let bias: Vec<f64> = (0..c.bins).map(|i| i as f64 * 0.5 - 1.0).collect();
        m.params.get_mut("heads.1.bias").unwrap().data_mut().copy_from_slice(&bias);
        let out = m.bin_logits(&random_batch(2, 4, 3, 8)).unwrap();
        for row in out[1].data().chunks(c.bins) {
            assert_eq!(row, &bias[..]);
        }
    }

    #[test]
    fn zeroing_one_head_leaves_the_others() {
        let c = tiny(Arch::Encoder);
        let m = init_model::<f64>(&c).unwrap();
        let x = random_batch(2, 4, 3, 8);
        let before = m.bin_logits(&x).unwrap();
        let mut m2 = m.clone();
        m2.params.get_mut("heads.0.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let after = m2.bin_logits(&x).unwrap();
        assert_ne!(before[0], after[0]);
        assert_eq!(before[1], after[1]);
        assert_eq!(before[2], after[2]);
    }

    #[test]
    fn heads_match_matmul_oracle() {
        let c = tiny(Arch::Encoder);
        let m = init_model::<f64>(&c).unwrap();
        let x = random_batch(1, 3, 3, 2);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g).unwrap();
        let h = m.hidden_states(&mut g, &p, &x, None).unwrap();
        let heads = m.parallel_heads_forward(&mut g, &p, h).unwrap();
        let hv = g.value(h).data().to_vec();
        for (i, &hvar) in heads.iter().enumerate() {
            let w = m.params.get(&format!("heads.{i}.weight")).unwrap().data();
            let out = g.value(hvar).data();
            for pos in 0..3 {
                for k in 0..c.bins {
                    let acc: f64 = (0..c.d_model).map(|j| w[k * c.d_model + j] * hv[pos * c.d_model + j]).sum();
                    assert_abs_diff_eq!(out[pos * c.bins + k], acc, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn classifier_pooling_properties() {
        let c = tiny(Arch::Encoder);
        let m = init_classifier_model::<f64>(&c, 3, Pooling::Mean).unwrap();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g).unwrap();

        // constant hidden rows: pooling returns that row
        let row: Vec<f64> = (0..c.d_model).map(|j| j as f64 * 0.1).collect();
        let constant: Vec<f64> = row.iter().copied().cycle().take(5 * c.d_model).collect();
        let h = g.constant(Tensor::new(vec![1, 5, c.d_model], constant).unwrap()).unwrap();
        let logits = m.classification_forward(&mut g, &p, h).unwrap();
        let w = m.params.get("classifier.weight").unwrap().data();
        for k in 0..3 {
            let acc: f64 = (0..c.d_model).map(|j| w[k * c.d_model + j] * row[j]).sum();
            assert_abs_diff_eq!(g.value(logits).data()[k], acc, epsilon = 1e-12);
        }

        // permuting positions does not change mean-pooled logits
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..4 * c.d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut perm = vals.clone();
        perm.rotate_left(c.d_model);
        let a = g.constant(Tensor::new(vec![1, 4, c.d_model], vals).unwrap()).unwrap();
        let b = g.constant(Tensor::new(vec![1, 4, c.d_model], perm).unwrap()).unwrap();
        let la = m.classification_forward(&mut g, &p, a).unwrap();
        let lb = m.classification_forward(&mut g, &p, b).unwrap();
        for (x, y) in g.value(la).data().iter().zip(g.value(lb).data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }

        let pre = init_model::<f64>(&c).unwrap();
        let mut g2 = Graph::new();
        let p2 = pre.params.bind(&mut g2).unwrap();
        let h2 = pre.hidden_states(&mut g2, &p2, &random_batch(1, 3, 3, 0), None).unwrap();
        assert!(matches!(pre.classification_forward(&mut g2, &p2, h2), Err(Error::Mode(_))));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let m = init_model::<f32>(&tiny(Arch::Decoder)).unwrap();
        let x = random_batch(2, 8, 3, 1).cast::<f32>();
        assert_eq!(m.bin_logits(&x).unwrap(), m.bin_logits(&x).unwrap());
    }
}
