//! Masked latent reconstruction: one unmasked context subgroup is encoded as
//! memory, the visible patches of the other subgroups are encoded with the
//! same encoder, and a cross-attention decoder predicts the masked patches.

use rand::seq::index::sample;
use rand::Rng;
use rftensor::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};
use crate::layers::{positional_rows, Builder, DecoderBlock, EncoderBlock, Linear};
use crate::model::{Model, ModelConfig};
use crate::params::{Bound, Component, ParamId, ParamStore};
use crate::seed::{self, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Encoder features of the unmasked frame at the masked positions.
    Latent,
    /// The raw samples under each masked patch's conv window.
    Raw,
}

impl std::str::FromStr for TargetMode {
    type Err = PoseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(TargetMode::Latent),
            "raw" => Ok(TargetMode::Raw),
            other => Err(PoseError::Config(format!("unknown target mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslConfig {
    pub mask_ratio: f64,
    pub target_mode: TargetMode,
    /// Standardize each target row before the loss.
    pub normalize_targets: bool,
    /// Re-add positional embeddings to the queries of every decoder block
    /// instead of only once at the decoder input.
    pub pos_every_block: bool,
    pub decoder_blocks: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            target_mode: TargetMode::Latent,
            normalize_targets: false,
            pos_every_block: false,
            decoder_blocks: 2,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(PoseError::Config(format!(
                "mask_ratio must be in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self, model: &ModelConfig) -> usize {
        match self.target_mode {
            TargetMode::Latent => model.embed_dim,
            TargetMode::Raw => model.patch_values(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SslDecoder {
    pub mask_token: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub self_block: EncoderBlock,
    pub head: Linear,
    pub target_mode: TargetMode,
    pub normalize_targets: bool,
    pub pos_every_block: bool,
}

impl SslDecoder {
    pub(crate) fn build<T: Real>(
        cfg: &ModelConfig,
        ssl: &SslConfig,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Self {
        let mut rng = seed::rng(seed, streams::INIT, 2);
        let d = cfg.embed_dim;
        let mut b = Builder {
            store,
            rng: &mut rng,
            component: Component::SslDecoder,
        };
        let mask_token = b.normal("ssl.mask_token", &[1, d]);
        let blocks = (0..ssl.decoder_blocks)
            .map(|i| {
                DecoderBlock::new(
                    &mut b,
                    &format!("ssl.blocks.{i}"),
                    d,
                    cfg.heads,
                    cfg.decoder_ffn_dim,
                )
            })
            .collect();
        let self_block =
            EncoderBlock::new(&mut b, "ssl.self_block", d, cfg.heads, cfg.decoder_ffn_dim);
        let head = Linear::new(&mut b, "ssl.head", d, ssl.output_dim(cfg));
        Self {
            mask_token,
            blocks,
            self_block,
            head,
            target_mode: ssl.target_mode,
            normalize_targets: ssl.normalize_targets,
            pos_every_block: ssl.pos_every_block,
        }
    }
}

/// Which subgroup is the context and which patches of every other subgroup
/// are hidden.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub context_subgroup: usize,
    /// Sorted masked patch indices per subgroup; empty for the context.
    pub masked: Vec<Vec<usize>>,
    pub patches: usize,
}

impl MaskPlan {
    pub fn sample_with<R: Rng>(
        rng: &mut R,
        subgroups: usize,
        patches: usize,
        ratio: f64,
    ) -> Result<Self> {
        if subgroups < 2 {
            return Err(PoseError::Config(
                "self-supervised pretraining needs at least two subgroups".into(),
            ));
        }
        if !(0.0..1.0).contains(&ratio) {
            return Err(PoseError::Config(format!(
                "mask ratio must be in [0, 1), got {ratio}"
            )));
        }
        let per_group = (ratio * patches as f64).floor() as usize;
        let context_subgroup = rng.gen_range(0..subgroups);
        let masked = (0..subgroups)
            .map(|g| {
                if g == context_subgroup {
                    Vec::new()
                } else {
                    let mut m = sample(rng, patches, per_group).into_vec();
                    m.sort_unstable();
                    m
                }
            })
            .collect();
        Ok(Self {
            context_subgroup,
            masked,
            patches,
        })
    }

    pub fn subgroups(&self) -> usize {
        self.masked.len()
    }

    /// Total masked patch count `T`.
    pub fn masked_count(&self) -> usize {
        self.masked.iter().map(Vec::len).sum()
    }

    pub fn is_masked(&self, group: usize, patch: usize) -> bool {
        self.masked[group].binary_search(&patch).is_ok()
    }

    /// `(subgroup, patch)` for every non-context patch, subgroup-major.
    pub fn query_sequence(&self) -> Vec<(usize, usize)> {
        (0..self.subgroups())
            .filter(|&g| g != self.context_subgroup)
            .flat_map(|g| (0..self.patches).map(move |p| (g, p)))
            .collect()
    }

    /// Global token rows (`g * P + p`) of the context subgroup.
    pub fn context_rows(&self) -> Vec<usize> {
        let base = self.context_subgroup * self.patches;
        (base..base + self.patches).collect()
    }

    pub fn visible_rows(&self) -> Vec<usize> {
        self.query_sequence()
            .into_iter()
            .filter(|&(g, p)| !self.is_masked(g, p))
            .map(|(g, p)| g * self.patches + p)
            .collect()
    }

    pub fn masked_rows(&self) -> Vec<usize> {
        self.query_sequence()
            .into_iter()
            .filter(|&(g, p)| self.is_masked(g, p))
            .map(|(g, p)| g * self.patches + p)
            .collect()
    }
}

/// Mask plan for `(seed, index)`; the same pair always gives the same plan.
pub fn make_mask(seed: u64, index: u64, cfg: &ModelConfig, ratio: f64) -> Result<MaskPlan> {
    let mut rng = seed::rng(seed, streams::MASK, index);
    MaskPlan::sample_with(&mut rng, cfg.subgroups(), cfg.patches_per_subgroup(), ratio)
}

/// Graph handles of one reconstruction pass.
#[derive(Clone, Copy, Debug)]
pub struct SslOutputs {
    /// Context features, `(P, D)`.
    pub sf1: Var,
    /// Visible-patch features, `((G-1)P - T, D)`.
    pub sf2: Var,
    pub predictions: Var,
    /// Detached targets, `(T, D_out)`.
    pub targets: Var,
    /// Target-pass encoder output before the stop-gradient (latent mode).
    pub target_source: Option<Var>,
    pub loss: Var,
    pub masked_count: usize,
}

impl<T: Real> Model<T> {
    fn ssl_decoder(&self) -> Result<&SslDecoder> {
        self.ssl
            .as_ref()
            .ok_or_else(|| PoseError::Config("model has no SSL decoder".into()))
    }

    /// Two passes of the shared encoder: the context subgroup alone, then the
    /// visible patches of all other subgroups. `tokens` are the embedded
    /// `(G * P, D)` tokens of the whole frame.
    pub fn encode_siamese(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: Var,
        plan: &MaskPlan,
    ) -> Result<(Var, Var)> {
        let context = g.gather_rows(tokens, &plan.context_rows())?;
        let sf1 = self.encode(g, p, context)?;
        let visible = g.gather_rows(tokens, &plan.visible_rows())?;
        let sf2 = self.encode(g, p, visible)?;
        Ok((sf1, sf2))
    }

    /// Interleaves SF2 with mask tokens, decodes against SF1 and returns the
    /// head outputs at the masked positions, `(T, D_out)`.
    pub fn decode_reconstruct(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        sf1: Var,
        sf2: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let dec = self.ssl_decoder()?;
        let visible = g.shape(sf2)[0];
        let t = plan.masked_count();
        let mask = g.gather_rows(p.var(dec.mask_token), &vec![0; t])?;
        let pool = g.concat(&[sf2, mask], 0)?;
        let sequence = plan.query_sequence();
        let (mut next_visible, mut next_masked) = (0, visible);
        let mut order = Vec::with_capacity(sequence.len());
        let mut masked_slots = Vec::with_capacity(t);
        for (slot, &(grp, patch)) in sequence.iter().enumerate() {
            if plan.is_masked(grp, patch) {
                order.push(next_masked);
                next_masked += 1;
                masked_slots.push(slot);
            } else {
                order.push(next_visible);
                next_visible += 1;
            }
        }
        if next_visible != visible {
            return Err(PoseError::InvalidInput(format!(
                "SF2 has {visible} rows but the mask plan leaves {next_visible} patches visible"
            )));
        }
        let x = g.gather_rows(pool, &order)?;
        let positions: Vec<usize> = sequence.iter().map(|&(_, patch)| patch).collect();
        let pe = g.constant(positional_rows(&positions, self.config.embed_dim))?;
        let mut x = g.add(x, pe)?;
        let block_pos = dec.pos_every_block.then_some(pe);
        for block in &dec.blocks {
            x = block.forward(g, p, x, sf1, block_pos)?;
        }
        let x = dec.self_block.forward(g, p, x)?;
        let out = dec.head.forward(g, p, x)?;
        Ok(g.gather_rows(out, &masked_slots)?)
    }

    /// Reconstruction targets for the masked patches, behind a stop-gradient.
    /// Returns the targets and, in latent mode, the undetached encoder output.
    pub fn ssl_targets(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: &Tensor<T>,
        tokens: Var,
        plan: &MaskPlan,
    ) -> Result<(Var, Option<Var>)> {
        let dec = self.ssl_decoder()?;
        let rows = plan.masked_rows();
        let (targets, source) = match dec.target_mode {
            TargetMode::Latent => {
                let full = self.encode(g, p, tokens)?;
                let picked = g.gather_rows(full, &rows)?;
                (g.detach(picked)?, Some(full))
            }
            TargetMode::Raw => (g.constant(raw_windows(&self.config, input, &rows)?)?, None),
        };
        if dec.normalize_targets {
            let width = g.shape(targets)[1];
            let ones = g.constant(Tensor::ones(&[width]))?;
            let zeros = g.constant(Tensor::zeros(&[width]))?;
            let normed = g.layer_norm(targets, ones, zeros, 1e-6)?;
            return Ok((g.detach(normed)?, source));
        }
        Ok((targets, source))
    }

    /// Full pretraining objective on one frame.
    pub fn ssl_forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: &Tensor<T>,
        plan: &MaskPlan,
    ) -> Result<SslOutputs> {
        let all = self.config.all_subgroups();
        if plan.subgroups() != all.len() || plan.patches != self.config.patches_per_subgroup() {
            return Err(PoseError::InvalidInput(
                "mask plan does not match the model configuration".into(),
            ));
        }
        let (tokens, _) = self.embed(g, p, input, &all)?;
        let (sf1, sf2) = self.encode_siamese(g, p, tokens, plan)?;
        let predictions = self.decode_reconstruct(g, p, sf1, sf2, plan)?;
        let (targets, target_source) = self.ssl_targets(g, p, input, tokens, plan)?;
        let loss = ssl_loss(g, predictions, targets)?;
        Ok(SslOutputs {
            sf1,
            sf2,
            predictions,
            targets,
            target_source,
            loss,
            masked_count: plan.masked_count(),
        })
    }
}

/// Raw conv windows (`c` channels x `kernel` samples, channel-major) for the
/// given global token rows.
pub fn raw_windows<T: Real>(
    cfg: &ModelConfig,
    input: &Tensor<T>,
    rows: &[usize],
) -> Result<Tensor<T>> {
    let (p, c, k) = (
        cfg.patches_per_subgroup(),
        cfg.subgroup_channels,
        cfg.conv_kernel,
    );
    let scale = T::from_f64_lossy(cfg.input_scale);
    let mut data = Vec::with_capacity(rows.len() * c * k);
    for &row in rows {
        let (grp, patch) = (row / p, row % p);
        let start = patch * cfg.conv_stride;
        for ch in grp * c..(grp + 1) * c {
            let line = &input.data()[ch * cfg.samples..(ch + 1) * cfg.samples];
            data.extend(line[start..start + k].iter().map(|&v| v * scale));
        }
    }
    Ok(Tensor::new(&[rows.len(), c * k], data)?)
}

/// Mean over patches of the per-patch summed squared error.
pub fn ssl_loss<T: Real>(g: &mut Graph<T>, predictions: Var, targets: Var) -> Result<Var> {
    let (sp, st) = (g.shape(predictions).to_vec(), g.shape(targets).to_vec());
    if sp != st || sp.len() != 2 {
        return Err(PoseError::InvalidInput(format!(
            "predictions {sp:?} and targets {st:?} must be equal (T, D) shapes"
        )));
    }
    if sp[0] == 0 {
        return Err(PoseError::InvalidInput(
            "no masked patches to reconstruct".into(),
        ));
    }
    let diff = g.sub(predictions, targets)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    Ok(g.scale(total, T::one() / T::from_usize(sp[0]).unwrap())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_masks_213_patches() {
        let cfg = ModelConfig::default();
        let plan = make_mask(1, 0, &cfg, 0.75).unwrap();
        assert_eq!(plan.masked_count(), 213);
        assert!(plan.masked[plan.context_subgroup].is_empty());
        assert_eq!(plan.visible_rows().len(), 72);
        assert_eq!(plan.query_sequence().len(), 285);
        for (g, m) in plan.masked.iter().enumerate() {
            if g != plan.context_subgroup {
                assert_eq!(m.len(), 71);
                assert!(m.windows(2).all(|w| w[0] < w[1]) && m.iter().all(|&i| i < 95));
            }
        }
    }

    #[test]
    fn plans_are_deterministic_per_seed() {
        let cfg = ModelConfig::default();
        assert_eq!(
            make_mask(3, 5, &cfg, 0.75).unwrap(),
            make_mask(3, 5, &cfg, 0.75).unwrap()
        );
        assert_ne!(
            make_mask(3, 5, &cfg, 0.75).unwrap(),
            make_mask(4, 5, &cfg, 0.75).unwrap()
        );
    }

    #[test]
    fn single_subgroup_is_rejected() {
        let cfg = ModelConfig {
            subgroup_channels: 64,
            ..ModelConfig::default()
        };
        assert!(make_mask(0, 0, &cfg, 0.75).is_err());
    }

    #[test]
    fn zero_ratio_plan_leaves_everything_visible() {
        let cfg = ModelConfig::default();
        let plan = make_mask(0, 0, &cfg, 0.0).unwrap();
        assert_eq!(plan.masked_count(), 0);
        assert_eq!(plan.visible_rows().len(), 285);
    }

    #[test]
    fn config_rejects_degenerate_ratios() {
        for r in [0.0, 1.0, -0.1] {
            let c = SslConfig {
                mask_ratio: r,
                ..SslConfig::default()
            };
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn loss_of_known_pair() {
        let mut g = Graph::<f64>::new();
        let p = g
            .constant(Tensor::new(&[1, 2], vec![0.3, 0.4]).unwrap())
            .unwrap();
        let t = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        let l = ssl_loss(&mut g, p, t).unwrap();
        assert!((g.value(l).item() - 0.25).abs() < 1e-15);
    }
}
