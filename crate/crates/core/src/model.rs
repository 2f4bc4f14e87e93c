//! The one-stage pose model: shared-conv subgroup patch embedding, a
//! transformer encoder and a query-based pose decoder.

use rftensor::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};
use crate::layers::{positional_rows, Builder, DecoderBlock, EncoderBlock, LayerNorm, Linear};
use crate::params::{kaiming_uniform, Bound, Component, ParamId, ParamStore};
use crate::seed::{self, streams};
use crate::sim::{RfFrame, NUM_CHANNELS, NUM_JOINTS, NUM_SAMPLES};
use crate::ssl::{SslConfig, SslDecoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPosEmbedding {
    Fixed,
    Learnable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub samples: usize,
    pub subgroup_channels: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub embed_dim: usize,
    pub encoder_blocks: usize,
    pub heads: usize,
    pub decoder_blocks: usize,
    pub num_queries: usize,
    pub keypoints: usize,
    pub encoder_ffn_dim: usize,
    pub decoder_ffn_dim: usize,
    pub query_pos_embedding: QueryPosEmbedding,
    /// Multiplies every input sample before embedding.
    pub input_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: NUM_CHANNELS,
            samples: NUM_SAMPLES,
            subgroup_channels: 16,
            conv_kernel: 16,
            conv_stride: 8,
            embed_dim: 128,
            encoder_blocks: 4,
            heads: 4,
            decoder_blocks: 2,
            num_queries: 15,
            keypoints: NUM_JOINTS,
            encoder_ffn_dim: 512,
            decoder_ffn_dim: 128,
            query_pos_embedding: QueryPosEmbedding::Fixed,
            input_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PoseError::Config(m));
        if self.subgroup_channels == 0 || !self.channels.is_multiple_of(self.subgroup_channels) {
            return fail(format!(
                "channels ({}) must be divisible by subgroup_channels ({})",
                self.channels, self.subgroup_channels
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim ({}) must be divisible by heads ({})",
                self.embed_dim, self.heads
            ));
        }
        if self.conv_kernel == 0 || self.conv_stride == 0 || self.samples < self.conv_kernel {
            return fail(format!(
                "conv kernel {} / stride {} do not fit {} samples",
                self.conv_kernel, self.conv_stride, self.samples
            ));
        }
        if self.num_queries == 0 {
            return fail("num_queries must be positive".into());
        }
        let positive = [
            ("embed_dim", self.embed_dim),
            ("keypoints", self.keypoints),
            ("encoder_ffn_dim", self.encoder_ffn_dim),
            ("decoder_ffn_dim", self.decoder_ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return fail("input_scale must be positive".into());
        }
        Ok(())
    }

    /// Number of channel subgroups `G`.
    pub fn subgroups(&self) -> usize {
        self.channels / self.subgroup_channels
    }

    /// Patches per subgroup `P`.
    pub fn patches_per_subgroup(&self) -> usize {
        (self.samples - self.conv_kernel) / self.conv_stride + 1
    }

    pub fn tokens(&self) -> usize {
        self.subgroups() * self.patches_per_subgroup()
    }

    /// Values in one raw patch window (`c * kernel`).
    pub fn patch_values(&self) -> usize {
        self.subgroup_channels * self.conv_kernel
    }

    /// Checks a subgroup selection and returns it sorted and deduplicated.
    pub fn normalize_subgroups(&self, subgroups: &[usize]) -> Result<Vec<usize>> {
        let mut s = subgroups.to_vec();
        s.sort_unstable();
        s.dedup();
        if s.is_empty() {
            return Err(PoseError::InvalidInput(
                "at least one subgroup is required".into(),
            ));
        }
        if let Some(&bad) = s.iter().find(|&&i| i >= self.subgroups()) {
            return Err(PoseError::InvalidInput(format!(
                "subgroup {bad} out of range (model has {} subgroups)",
                self.subgroups()
            )));
        }
        Ok(s)
    }

    pub fn all_subgroups(&self) -> Vec<usize> {
        (0..self.subgroups()).collect()
    }
}

/// Token bookkeeping for an embedded frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub position_ids: Vec<usize>,
    pub subgroup_ids: Vec<usize>,
}

impl PatchLayout {
    pub fn new(subgroups: &[usize], patches: usize) -> Self {
        let mut position_ids = Vec::with_capacity(subgroups.len() * patches);
        let mut subgroup_ids = Vec::with_capacity(subgroups.len() * patches);
        for &g in subgroups {
            for p in 0..patches {
                position_ids.push(p);
                subgroup_ids.push(g);
            }
        }
        Self {
            position_ids,
            subgroup_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.position_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_ids.is_empty()
    }
}

/// Embedding conv, encoder blocks and final norm.
#[derive(Clone, Debug)]
pub struct RfEncoder {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

/// Decoder blocks, person queries and the class / keypoint heads.
#[derive(Clone, Debug)]
pub struct PoseEstimator {
    pub queries: ParamId,
    pub query_pos: Option<ParamId>,
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    pub class_head: Linear,
    pub pose_mlp: [Linear; 3],
}

/// Graph outputs of the pose decoder.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// `(N')`
    pub class_prob: Var,
    /// `(N', 2K)`, `[x0, y0, x1, y1, ...]` per query.
    pub keypoints: Var,
}

/// Decoded model output for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_prob: Vec<f64>,
    /// `N'` rows of `K` `(x, y)` pairs.
    pub keypoints: Vec<Vec<[f64; 2]>>,
}

impl Prediction {
    pub fn from_graph<T: Real>(g: &Graph<T>, vars: PredictionVars) -> Self {
        let probs = g.value(vars.class_prob).data();
        let kp = g.value(vars.keypoints);
        let width = kp.shape()[1];
        let class_prob = probs.iter().map(|v| v.to_f64_lossy()).collect();
        let keypoints = (0..probs.len())
            .map(|q| {
                kp.data()[q * width..(q + 1) * width]
                    .chunks_exact(2)
                    .map(|xy| [xy[0].to_f64_lossy(), xy[1].to_f64_lossy()])
                    .collect()
            })
            .collect();
        Self {
            class_prob,
            keypoints,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.class_prob.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub conv: usize,
    pub encoder_blocks: usize,
    pub rf_encoder: usize,
    pub decoder_blocks: usize,
    pub pose_estimator: usize,
    pub ssl_decoder: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: RfEncoder,
    pub pose: Option<PoseEstimator>,
    pub ssl: Option<SslDecoder>,
}

fn build_encoder<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> RfEncoder {
    let mut rng = seed::rng(seed, streams::INIT, 0);
    let d = cfg.embed_dim;
    let fan_in = cfg.subgroup_channels * cfg.conv_kernel;
    let w = kaiming_uniform(
        &mut rng,
        &[d, cfg.subgroup_channels, cfg.conv_kernel],
        fan_in,
    );
    let mut b = Builder {
        store,
        rng: &mut rng,
        component: Component::RfEncoder,
    };
    let conv_w = b.add("encoder.embed.weight", w);
    let conv_b = b.zeros("encoder.embed.bias", &[d]);
    let blocks = (0..cfg.encoder_blocks)
        .map(|i| {
            EncoderBlock::new(
                &mut b,
                &format!("encoder.blocks.{i}"),
                d,
                cfg.heads,
                cfg.encoder_ffn_dim,
            )
        })
        .collect();
    let norm = LayerNorm::new(&mut b, "encoder.norm", d);
    RfEncoder {
        conv_w,
        conv_b,
        blocks,
        norm,
    }
}

fn build_pose<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> PoseEstimator {
    let mut rng = seed::rng(seed, streams::INIT, 1);
    let d = cfg.embed_dim;
    let mut b = Builder {
        store,
        rng: &mut rng,
        component: Component::PoseEstimator,
    };
    let queries = b.normal("decoder.queries", &[cfg.num_queries, d]);
    let query_pos = match cfg.query_pos_embedding {
        QueryPosEmbedding::Fixed => None,
        QueryPosEmbedding::Learnable => Some(b.normal("decoder.query_pos", &[cfg.num_queries, d])),
    };
    let blocks = (0..cfg.decoder_blocks)
        .map(|i| {
            DecoderBlock::new(
                &mut b,
                &format!("decoder.blocks.{i}"),
                d,
                cfg.heads,
                cfg.decoder_ffn_dim,
            )
        })
        .collect();
    let norm = LayerNorm::new(&mut b, "decoder.norm", d);
    let class_head = Linear::new(&mut b, "decoder.class_head", d, 1);
    let pose_mlp = [
        Linear::new(&mut b, "decoder.pose_head.0", d, d),
        Linear::new(&mut b, "decoder.pose_head.1", d, d),
        Linear::new(&mut b, "decoder.pose_head.2", d, 2 * cfg.keypoints),
    ];
    PoseEstimator {
        queries,
        query_pos,
        blocks,
        norm,
        class_head,
        pose_mlp,
    }
}

impl<T: Real> Model<T> {
    /// Encoder plus pose estimator, initialized from `seed`.
    pub fn new_os(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_components(
            config,
            &[Component::RfEncoder, Component::PoseEstimator],
            None,
            seed,
        )
    }

    /// Encoder plus reconstruction decoder for self-supervised pretraining.
    pub fn new_pretrain(config: ModelConfig, ssl: &SslConfig, seed: u64) -> Result<Self> {
        Self::with_components(
            config,
            &[Component::RfEncoder, Component::SslDecoder],
            Some(ssl),
            seed,
        )
    }

    /// The encoder is always present. Each component draws its initial
    /// values from its own stream, so the set of components does not change
    /// any individual component's initialization.
    pub fn with_components(
        config: ModelConfig,
        components: &[Component],
        ssl: Option<&SslConfig>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = build_encoder(&config, &mut store, seed);
        let pose = components
            .contains(&Component::PoseEstimator)
            .then(|| build_pose(&config, &mut store, seed));
        let ssl = if components.contains(&Component::SslDecoder) {
            let ssl_cfg = ssl.ok_or_else(|| {
                PoseError::Config("an SSL decoder needs the ssl configuration".into())
            })?;
            ssl_cfg.validate()?;
            Some(SslDecoder::build(&config, ssl_cfg, &mut store, seed))
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            encoder,
            pose,
            ssl,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            pose: self.pose.clone(),
            ssl: self.ssl.clone(),
        }
    }

    pub fn parameter_counts(&self) -> ParameterCounts {
        let conv = self.store.get(self.encoder.conv_w).value.len()
            + self.store.get(self.encoder.conv_b).value.len();
        let rf_encoder = self.store.count(Component::RfEncoder);
        let norm = 2 * self.config.embed_dim;
        let decoder_blocks = self
            .store
            .iter()
            .filter(|p| p.name.starts_with("decoder.blocks."))
            .map(|p| p.value.len())
            .sum();
        ParameterCounts {
            conv,
            encoder_blocks: rf_encoder - conv - norm,
            rf_encoder,
            decoder_blocks,
            pose_estimator: self.store.count(Component::PoseEstimator),
            ssl_decoder: self.store.count(Component::SslDecoder),
            total: self.store.total_count(),
        }
    }

    fn pose(&self) -> Result<&PoseEstimator> {
        self.pose
            .as_ref()
            .ok_or_else(|| PoseError::Config("model has no pose estimator".into()))
    }

    /// Conv outputs of the selected subgroups before positional embedding,
    /// `(len(subgroups) * P, D)`, subgroup-major then patch-major.
    pub fn patch_tokens(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: &Tensor<T>,
        subgroups: &[usize],
    ) -> Result<Var> {
        let cfg = &self.config;
        if input.shape() != [cfg.channels, cfg.samples] {
            return Err(PoseError::InvalidInput(format!(
                "input shape {:?}, model expects [{}, {}]",
                input.shape(),
                cfg.channels,
                cfg.samples
            )));
        }
        let c = cfg.subgroup_channels;
        let block = c * cfg.samples;
        let scale = T::from_f64_lossy(cfg.input_scale);
        let mut data = Vec::with_capacity(subgroups.len() * block);
        for &s in subgroups {
            if s >= cfg.subgroups() {
                return Err(PoseError::InvalidInput(format!(
                    "subgroup {s} out of range"
                )));
            }
            data.extend(
                input.data()[s * block..(s + 1) * block]
                    .iter()
                    .map(|&v| v * scale),
            );
        }
        let x = g.constant(Tensor::new(&[subgroups.len(), c, cfg.samples], data)?)?;
        let conv = g.conv1d(
            x,
            p.var(self.encoder.conv_w),
            p.var(self.encoder.conv_b),
            cfg.conv_stride,
        )?;
        let tokens = g.permute(conv, &[0, 2, 1])?;
        Ok(g.reshape(
            tokens,
            &[subgroups.len() * cfg.patches_per_subgroup(), cfg.embed_dim],
        )?)
    }

    /// Patch tokens plus the fixed sinusoidal embedding of each token's
    /// subgroup-local position.
    pub fn embed(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: &Tensor<T>,
        subgroups: &[usize],
    ) -> Result<(Var, PatchLayout)> {
        let tokens = self.patch_tokens(g, p, input, subgroups)?;
        let layout = PatchLayout::new(subgroups, self.config.patches_per_subgroup());
        let pe = g.constant(positional_rows(&layout.position_ids, self.config.embed_dim))?;
        Ok((g.add(tokens, pe)?, layout))
    }

    /// Encoder blocks and final norm over `(T, D)` tokens.
    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, tokens: Var) -> Result<Var> {
        let d = g.shape(tokens).to_vec();
        if d.len() != 2 || d[1] != self.config.embed_dim {
            return Err(PoseError::InvalidInput(format!(
                "encoder input shape {d:?}, expected (tokens, {})",
                self.config.embed_dim
            )));
        }
        let mut x = tokens;
        for block in &self.encoder.blocks {
            x = block.forward(g, p, x)?;
        }
        self.encoder.norm.forward(g, p, x)
    }

    /// Person queries attend to `features` and become class / keypoint outputs.
    pub fn decode(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<PredictionVars> {
        let pose = self.pose()?;
        let cfg = &self.config;
        let pos = match pose.query_pos {
            Some(id) => p.var(id),
            None => {
                let ids: Vec<usize> = (0..cfg.num_queries).collect();
                g.constant(positional_rows(&ids, cfg.embed_dim))?
            }
        };
        let mut x = p.var(pose.queries);
        for block in &pose.blocks {
            x = block.forward(g, p, x, features, Some(pos))?;
        }
        let x = pose.norm.forward(g, p, x)?;
        let logits = pose.class_head.forward(g, p, x)?;
        let probs = g.sigmoid(logits)?;
        let class_prob = g.reshape(probs, &[cfg.num_queries])?;
        let h = pose.pose_mlp[0].forward(g, p, x)?;
        let h = g.relu(h)?;
        let h = pose.pose_mlp[1].forward(g, p, h)?;
        let h = g.relu(h)?;
        let h = pose.pose_mlp[2].forward(g, p, h)?;
        let keypoints = g.sigmoid(h)?;
        Ok(PredictionVars {
            class_prob,
            keypoints,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: &Tensor<T>,
        subgroups: &[usize],
    ) -> Result<PredictionVars> {
        let (tokens, _) = self.embed(g, p, input, subgroups)?;
        let features = self.encode(g, p, tokens)?;
        self.decode(g, p, features)
    }

    /// Inference on the given subgroups (sorted, deduplicated).
    pub fn predict_input(&self, input: &Tensor<T>, subgroups: &[usize]) -> Result<Prediction> {
        let subgroups = self.config.normalize_subgroups(subgroups)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g)?;
        let vars = self.forward(&mut g, &p, input, &subgroups)?;
        Ok(Prediction::from_graph(&g, vars))
    }

    pub fn predict(&self, frame: &RfFrame, subgroups: &[usize]) -> Result<Prediction> {
        self.predict_input(&frame_tensor(frame), subgroups)
    }
}

/// An RF frame as a `(64, 768)` tensor.
pub fn frame_tensor<T: Real>(frame: &RfFrame) -> Tensor<T> {
    let data = frame
        .samples()
        .iter()
        .map(|&v| T::from_f64_lossy(v as f64))
        .collect();
    Tensor::new(&[NUM_CHANNELS, NUM_SAMPLES], data).expect("frame shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts_match_closed_form() {
        let m = Model::<f32>::new_os(ModelConfig::default(), 0).unwrap();
        let c = m.parameter_counts();
        assert_eq!(c.conv, 32_896);
        assert_eq!(c.encoder_blocks, 793_088);
        assert_eq!(c.rf_encoder, 826_240);
        assert_eq!(c.decoder_blocks, 331_776);
        assert_eq!(c.pose_estimator, 369_169);
        assert_eq!(c.total, 1_195_409);
    }

    #[test]
    fn token_counts_per_subgroup_size() {
        for (c, g) in [(4, 16), (16, 4), (64, 1)] {
            let cfg = ModelConfig {
                subgroup_channels: c,
                ..ModelConfig::default()
            };
            assert_eq!(cfg.subgroups(), g);
            assert_eq!(cfg.patches_per_subgroup(), 95);
            assert_eq!(cfg.tokens(), g * 95);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ModelConfig {
                subgroup_channels: 24,
                ..ModelConfig::default()
            },
            ModelConfig {
                heads: 3,
                ..ModelConfig::default()
            },
            ModelConfig {
                num_queries: 0,
                ..ModelConfig::default()
            },
        ];
        for cfg in bad {
            assert!(
                matches!(cfg.validate(), Err(PoseError::Config(_))),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn subgroup_selection_is_normalized() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.normalize_subgroups(&[3, 0, 3]).unwrap(), vec![0, 3]);
        assert!(cfg.normalize_subgroups(&[4]).is_err());
        assert!(cfg.normalize_subgroups(&[]).is_err());
    }
}
