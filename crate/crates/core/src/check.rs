//! End-to-end gradient checks of both training objectives on a tiny model.
//!
//! Hungarian matching and the latent reconstruction targets are piecewise
//! constant or stop-gradient terms, so both are computed once at the
//! unperturbed parameters and held fixed while differencing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rftensor::{check_catalog, gradcheck, GradcheckConfig, GradcheckReport, Graph, Tensor};
use serde::Serialize;

use crate::error::Result;
use crate::matching::{bce_class_loss, cost_matrix, hungarian, mse_pose_loss, LossWeights};
use crate::model::{Model, ModelConfig, Prediction};
use crate::params::{Bound, Component};
use crate::sim::FrameLabel;
use crate::ssl::{make_mask, ssl_loss, SslConfig};

/// `D = 16`, one encoder and one decoder block, three queries, two
/// keypoints, over an 8 x 40 input split into two subgroups.
pub fn tiny_config() -> (ModelConfig, SslConfig) {
    let model = ModelConfig {
        channels: 8,
        samples: 40,
        subgroup_channels: 4,
        conv_kernel: 8,
        conv_stride: 4,
        embed_dim: 16,
        encoder_blocks: 1,
        heads: 2,
        decoder_blocks: 1,
        num_queries: 3,
        keypoints: 2,
        encoder_ffn_dim: 32,
        decoder_ffn_dim: 16,
        ..ModelConfig::default()
    };
    let ssl = SslConfig {
        decoder_blocks: 1,
        ..SslConfig::default()
    };
    (model, ssl)
}

/// Settings for model-level checks. Differencing a loss of magnitude `L`
/// carries rounding noise near `1e-16 * L / step`, so gradients below
/// `1e-5` are compared absolutely. The pose head uses ReLU, so failing
/// coordinates are retried with smaller steps.
pub fn model_gradcheck_config(seed: u64) -> GradcheckConfig {
    GradcheckConfig {
        step: 1e-4,
        tolerance: 1e-4,
        coordinates: 2048,
        seed,
        absolute_floor: 1e-5,
        refinements: 3,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub max_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub refined: usize,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl CheckLine {
    pub fn new(name: &str, r: &GradcheckReport) -> Self {
        Self {
            name: name.to_string(),
            max_error: r.max_error,
            checked: r.checked,
            tolerance: r.tolerance,
            refined: r.refined,
            passed: r.passed(),
            failure: r.failure.clone(),
        }
    }
}

/// Per-op checks in the order of the catalog.
pub fn op_checks(seed: u64) -> Vec<CheckLine> {
    let cfg = GradcheckConfig {
        seed,
        ..GradcheckConfig::default()
    };
    check_catalog(&cfg)
        .iter()
        .map(|c| CheckLine::new(c.op, &c.report))
        .collect()
}

fn tiny_label() -> FrameLabel {
    FrameLabel {
        persons: vec![
            vec![[0.2, 0.3], [0.25, 0.5]],
            vec![[0.7, 0.35], [0.68, 0.6]],
        ],
    }
}

/// Gradient checks of the set loss and of the reconstruction loss through
/// every parameter of a tiny model.
pub fn tiny_model_gradchecks(
    seed: u64,
    cfg: &GradcheckConfig,
) -> Result<(GradcheckReport, GradcheckReport)> {
    let (config, ssl) = tiny_config();
    let model = Model::<f64>::with_components(
        config.clone(),
        &[
            Component::RfEncoder,
            Component::PoseEstimator,
            Component::SslDecoder,
        ],
        Some(&ssl),
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let input = Tensor::from_fn(&[config.channels, config.samples], |_| {
        normal.sample(&mut rng)
    });
    let params: Vec<Tensor<f64>> = model.store.iter().map(|p| p.value.clone()).collect();
    let subgroups = config.all_subgroups();
    let label = tiny_label();
    let weights = LossWeights::default();

    let assignment = {
        let pred = model.predict_input(&input, &subgroups)?;
        hungarian(&cost_matrix(&pred, &label, &weights)?)?
    };
    let set = gradcheck(
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let pred = model
                .forward(g, &p, &input, &subgroups)
                .map_err(into_tensor_error)?;
            let cls = bce_class_loss(g, pred.class_prob, &assignment).map_err(into_tensor_error)?;
            let pose =
                mse_pose_loss(g, pred.keypoints, &label, &assignment).map_err(into_tensor_error)?;
            let wc = g.scale(cls, weights.lambda_cls)?;
            let wp = g.scale(pose, weights.lambda_pose)?;
            g.add(wc, wp)
        },
        &params,
        cfg,
    );

    let plan = make_mask(seed, 0, &config, ssl.mask_ratio)?;
    let targets = {
        let mut g = Graph::new();
        let p = model.store.bind_frozen(&mut g)?;
        let (tokens, _) = model.embed(&mut g, &p, &input, &subgroups)?;
        let (t, _) = model.ssl_targets(&mut g, &p, &input, tokens, &plan)?;
        g.value(t).clone()
    };
    let recon = gradcheck(
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let (tokens, _) = model
                .embed(g, &p, &input, &subgroups)
                .map_err(into_tensor_error)?;
            let (sf1, sf2) = model
                .encode_siamese(g, &p, tokens, &plan)
                .map_err(into_tensor_error)?;
            let pred = model
                .decode_reconstruct(g, &p, sf1, sf2, &plan)
                .map_err(into_tensor_error)?;
            let t = g.constant(targets.clone())?;
            ssl_loss(g, pred, t).map_err(into_tensor_error)
        },
        &params,
        cfg,
    );
    Ok((set, recon))
}

/// The gradient checker works in tensor errors; model errors are carried as
/// their message.
fn into_tensor_error(e: crate::error::PoseError) -> rftensor::TensorError {
    match e {
        crate::error::PoseError::Tensor(t) => t,
        other => rftensor::TensorError::External(other.to_string()),
    }
}

/// Class probabilities and keypoints of a prediction, flattened, for tests
/// that compare predictions bitwise.
pub fn prediction_bits(p: &Prediction) -> Vec<u64> {
    p.class_prob
        .iter()
        .chain(p.keypoints.iter().flatten().flatten())
        .map(|v| v.to_bits())
        .collect()
}
