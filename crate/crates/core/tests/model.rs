mod common;

use common::rng;
use rand_distr::{Distribution, Normal};
use rfpose::check::prediction_bits;
use rfpose::model::{Model, ModelConfig};
use rfpose::params::ParamStore;
use rftensor::{Graph, Tensor};

fn random_input(seed: u64, cfg: &ModelConfig) -> Tensor<f32> {
    let mut r = rng(seed);
    let n = Normal::new(0.0f32, 0.05).unwrap();
    Tensor::from_fn(&[cfg.channels, cfg.samples], |_| n.sample(&mut r))
}

fn small_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 32,
        encoder_blocks: 1,
        decoder_blocks: 1,
        encoder_ffn_dim: 64,
        decoder_ffn_dim: 32,
        ..ModelConfig::default()
    }
}

fn tokens(
    model: &Model<f32>,
    input: &Tensor<f32>,
    subgroups: &[usize],
    with_position: bool,
) -> Tensor<f32> {
    let mut g = Graph::new();
    let p = model.store.bind_frozen(&mut g).unwrap();
    let v = if with_position {
        model.embed(&mut g, &p, input, subgroups).unwrap().0
    } else {
        model.patch_tokens(&mut g, &p, input, subgroups).unwrap()
    };
    g.value(v).clone()
}

#[test]
fn token_count_follows_subgroup_size() {
    for (c, groups) in [(4, 16), (16, 4), (64, 1)] {
        let cfg = ModelConfig {
            subgroup_channels: c,
            ..small_config()
        };
        assert_eq!(cfg.subgroups(), groups);
        assert_eq!(cfg.patches_per_subgroup(), 95);
        assert_eq!(cfg.tokens(), groups * 95);
        let model = Model::<f32>::new_os(cfg.clone(), 0).unwrap();
        let t = tokens(&model, &random_input(1, &cfg), &cfg.all_subgroups(), true);
        assert_eq!(t.shape(), [groups * 95, cfg.embed_dim]);
    }
}

#[test]
fn swapping_subgroups_swaps_their_conv_outputs() {
    let cfg = small_config();
    let model = Model::<f32>::new_os(cfg.clone(), 2).unwrap();
    let input = random_input(3, &cfg);
    let block = cfg.subgroup_channels * cfg.samples;
    let mut swapped = input.clone();
    {
        let d = swapped.data_mut();
        let (a, rest) = d.split_at_mut(2 * block);
        a[..block].swap_with_slice(&mut rest[..block]);
    }
    let all = cfg.all_subgroups();
    let t = tokens(&model, &input, &all, false);
    let s = tokens(&model, &swapped, &all, false);
    let rows = 95 * cfg.embed_dim;
    let blk = |t: &Tensor<f32>, g: usize| t.data()[g * rows..(g + 1) * rows].to_vec();
    assert_eq!(blk(&t, 0), blk(&s, 2));
    assert_eq!(blk(&t, 2), blk(&s, 0));
    assert_eq!(blk(&t, 1), blk(&s, 1));
    assert_eq!(blk(&t, 3), blk(&s, 3));
}

#[test]
fn one_conv_serves_every_subgroup() {
    let cfg = small_config();
    let model = Model::<f32>::new_os(cfg.clone(), 4).unwrap();
    let conv_params: Vec<_> = model
        .store
        .iter()
        .filter(|p| p.name.starts_with("encoder.embed."))
        .collect();
    assert_eq!(conv_params.len(), 2, "one shared weight and bias");

    let input = random_input(5, &cfg);
    let all = cfg.all_subgroups();
    let before = tokens(&model, &input, &all, false);
    let mut perturbed = model.clone();
    let id = perturbed.store.id("encoder.embed.weight").unwrap();
    perturbed.store.value_mut(id).data_mut()[7] += 0.5;
    let after = tokens(&perturbed, &input, &all, false);
    let rows = 95 * cfg.embed_dim;
    for g in 0..cfg.subgroups() {
        let changed = (g * rows..(g + 1) * rows).any(|i| before.data()[i] != after.data()[i]);
        assert!(changed, "subgroup {g} unaffected by the shared conv");
    }
}

#[test]
fn subsets_keep_local_positions() {
    let cfg = small_config();
    let model = Model::<f32>::new_os(cfg.clone(), 6).unwrap();
    let input = random_input(7, &cfg);
    let full = tokens(&model, &input, &cfg.all_subgroups(), true);
    let width = 95 * cfg.embed_dim;
    for g in 0..cfg.subgroups() {
        let single = tokens(&model, &input, &[g], true);
        assert_eq!(single.data(), &full.data()[g * width..(g + 1) * width]);
    }
}

#[test]
fn predictions_have_fixed_shapes_and_open_unit_range() {
    let cfg = ModelConfig::default();
    let model = Model::<f32>::new_os(cfg.clone(), 8).unwrap();
    let input = random_input(9, &cfg);
    for subset in [vec![0], vec![1, 3], vec![0, 1, 2, 3]] {
        let p = model.predict_input(&input, &subset).unwrap();
        assert_eq!(p.class_prob.len(), 15);
        assert_eq!(p.keypoints.len(), 15);
        assert!(p.keypoints.iter().all(|k| k.len() == 8));
        let values = p
            .class_prob
            .iter()
            .chain(p.keypoints.iter().flatten().flatten());
        for &v in values {
            assert!(v > 0.0 && v < 1.0, "{v}");
        }
    }
}

#[test]
fn inference_is_deterministic_and_subset_order_free() {
    let cfg = small_config();
    let model = Model::<f32>::new_os(cfg.clone(), 10).unwrap();
    let input = random_input(11, &cfg);
    let a = model.predict_input(&input, &[0, 1, 2, 3]).unwrap();
    let b = model.predict_input(&input, &[0, 1, 2, 3]).unwrap();
    let c = model.predict_input(&input, &[3, 1, 2, 0]).unwrap();
    assert_eq!(prediction_bits(&a), prediction_bits(&b));
    assert_eq!(prediction_bits(&a), prediction_bits(&c));
    assert!(model.predict_input(&input, &[]).is_err());
    assert!(model.predict_input(&input, &[4]).is_err());
}

#[test]
fn decoder_ignores_the_order_of_encoder_features() {
    let cfg = small_config();
    let model = Model::<f64>::new_os(cfg.clone(), 12).unwrap();
    let mut r = rng(13);
    let n = Normal::new(0.0, 1.0).unwrap();
    let rows = 40;
    let features = Tensor::from_fn(&[rows, cfg.embed_dim], |_| n.sample(&mut r));
    let perm: Vec<usize> = (0..rows).map(|i| (i * 17 + 5) % rows).collect();
    let run = |order: &[usize]| {
        let mut g = Graph::new();
        let p = model.store.bind_frozen(&mut g).unwrap();
        let f = g.constant(features.clone()).unwrap();
        let f = g.gather_rows(f, order).unwrap();
        let out = model.decode(&mut g, &p, f).unwrap();
        rfpose::model::Prediction::from_graph(&g, out)
    };
    let identity: Vec<usize> = (0..rows).collect();
    let a = run(&identity);
    let b = run(&perm);
    let flat = |p: &rfpose::model::Prediction| -> Vec<f64> {
        p.class_prob
            .iter()
            .copied()
            .chain(p.keypoints.iter().flatten().flatten().copied())
            .collect()
    };
    for (x, y) in flat(&a).iter().zip(flat(&b)) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn empty_blocks_reduce_the_encoder_to_its_final_norm() {
    let cfg = small_config();
    let mut model = Model::<f64>::new_os(cfg.clone(), 14).unwrap();
    let zeroed: Vec<String> = model
        .store
        .iter()
        .filter(|p| {
            p.name.starts_with("encoder.blocks.")
                && (p.name.contains(".attn.") || p.name.contains(".ffn."))
        })
        .map(|p| p.name.clone())
        .collect();
    assert!(!zeroed.is_empty());
    for name in zeroed {
        let id = model.store.id(&name).unwrap();
        model
            .store
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let mut r = rng(15);
    let n = Normal::new(0.0, 1.0).unwrap();
    let x = Tensor::from_fn(&[20, cfg.embed_dim], |_| n.sample(&mut r));
    let mut g = Graph::new();
    let p = model.store.bind_frozen(&mut g).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let out = model.encode(&mut g, &p, xv).unwrap();
    let out = g.value(out);
    let d = cfg.embed_dim;
    for row in 0..20 {
        let v = &x.data()[row * d..(row + 1) * d];
        let mean = v.iter().sum::<f64>() / d as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64;
        for k in 0..d {
            let expected = (v[k] - mean) / (var + 1e-5).sqrt();
            assert!((out.data()[row * d + k] - expected).abs() < 1e-9);
        }
    }
}

#[test]
fn default_parameter_counts() {
    let m = Model::<f32>::new_os(ModelConfig::default(), 0).unwrap();
    let c = m.parameter_counts();
    assert_eq!(c.encoder_blocks, 793_088);
    assert_eq!(c.conv, 32_896);
    assert_eq!(c.rf_encoder, 826_240);
    assert_eq!(c.decoder_blocks, 331_776);
    assert_eq!(c.total, c.rf_encoder + c.pose_estimator);
    let summed: usize = m.store.iter().map(|p| p.value.len()).sum();
    assert_eq!(summed, c.total);
}

#[test]
fn doubling_width_quadruples_square_weights() {
    let count = |d: usize| {
        let cfg = ModelConfig {
            embed_dim: d,
            ..small_config()
        };
        let m = Model::<f32>::new_os(cfg, 0).unwrap();
        let square: Vec<usize> = m
            .store
            .iter()
            .filter(|p| p.value.rank() == 2 && p.value.shape()[0] == d && p.value.shape()[1] == d)
            .map(|p| p.value.len())
            .collect();
        (square.len(), square.iter().sum::<usize>())
    };
    let (n1, s1) = count(32);
    let (n2, s2) = count(64);
    assert_eq!(n1, n2);
    assert!(n1 > 0);
    assert_eq!(s2, 4 * s1);
}

#[test]
fn models_are_reproducible_from_their_seed() {
    let a = Model::<f32>::new_os(small_config(), 21).unwrap();
    let b = Model::<f32>::new_os(small_config(), 21).unwrap();
    let c = Model::<f32>::new_os(small_config(), 22).unwrap();
    let bits = |s: &ParamStore<f32>| -> Vec<u32> {
        s.iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a.store), bits(&b.store));
    assert_ne!(bits(&a.store), bits(&c.store));
}
