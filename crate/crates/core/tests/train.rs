mod common;

use proptest::prelude::*;
use rfpose::dataset::{read_dataset, write_dataset};
use rfpose::model::{Model, ModelConfig};
use rfpose::params::{Component, ParamStore};
use rfpose::sim::{generate_scenes, SimConfig};
use rfpose::train::{lr_at, train_supervised, AdamW, Regime, TrainConfig};
use rftensor::Tensor;

fn store(values: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add(
        "w",
        Component::RfEncoder,
        Tensor::new(&[values.len()], values.to_vec()).unwrap(),
    );
    s
}

fn values(s: &ParamStore<f64>) -> Vec<f64> {
    s.iter().next().unwrap().value.data().to_vec()
}

#[test]
fn schedule_landmarks() {
    let cfg = TrainConfig::for_regime(Regime::Supervised);
    assert_eq!(lr_at(0.0, &cfg), 0.0);
    assert!((lr_at(5.0, &cfg) - 2e-4).abs() < 1e-18);
    assert_eq!(lr_at(10.0, &cfg), 4e-4);
    assert!(lr_at(30.0, &cfg) <= 1e-12);
    let below = lr_at(10.0 - 1e-9, &cfg);
    let above = lr_at(10.0 + 1e-9, &cfg);
    assert!((below - 4e-4).abs() < 1e-12 && (above - 4e-4).abs() < 1e-12);
    for regime in [Regime::Pretrain, Regime::Finetune] {
        let c = TrainConfig::for_regime(regime);
        assert_eq!(lr_at(10.0, &c), c.base_lr);
        assert!(lr_at(c.total_epochs as f64, &c) <= 1e-12);
    }
}

#[test]
fn zero_gradient_without_decay_is_a_fixed_point() {
    let mut s = store(&[0.5, -1.25, 3.0]);
    let before = values(&s);
    let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.0);
    for _ in 0..5 {
        opt.update(&mut s, &[Tensor::zeros(&[3])], 0.1).unwrap();
    }
    assert_eq!(values(&s), before);
}

#[test]
fn first_step_moves_by_the_learning_rate() {
    let mut s = store(&[0.0]);
    let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.0);
    opt.update(&mut s, &[Tensor::ones(&[1])], 0.1).unwrap();
    assert!((values(&s)[0] + 0.1).abs() < 1e-8);
}

#[test]
fn decay_without_gradient_is_geometric() {
    let (lr, wd) = (0.1, 0.05);
    let mut s = store(&[2.0, -0.75]);
    let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, wd);
    let mut expected = values(&s);
    for _ in 0..10 {
        opt.update(&mut s, &[Tensor::zeros(&[2])], lr).unwrap();
        expected.iter_mut().for_each(|v| *v *= 1.0 - lr * wd);
        assert_eq!(values(&s), expected);
    }
}

#[test]
fn non_finite_gradients_name_the_parameter() {
    let mut s = store(&[1.0]);
    let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.0);
    let err = opt
        .update(&mut s, &[Tensor::new(&[1], vec![f64::NAN]).unwrap()], 0.1)
        .unwrap_err();
    assert!(err.to_string().contains('w'));
    assert_eq!(err.exit_code(), 3);
}

proptest! {
    #[test]
    fn first_step_direction_ignores_loss_scale(
        grads in prop::collection::vec(-10.0f64..10.0, 1..20),
        k in 0.01f64..100.0,
    ) {
        let n = grads.len();
        let step = |scale: f64| {
            let mut s = store(&vec![0.0; n]);
            let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.0);
            let g: Vec<f64> = grads.iter().map(|x| x * scale).collect();
            opt.update(&mut s, &[Tensor::new(&[n], g).unwrap()], 1e-3).unwrap();
            values(&s)
        };
        for (a, b) in step(1.0).iter().zip(step(k)) {
            prop_assert_eq!(a.signum(), b.signum());
        }
    }

    #[test]
    fn cosine_phase_never_increases(a in 10.0f64..30.0, b in 10.0f64..30.0) {
        let cfg = TrainConfig::for_regime(Regime::Supervised);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(lr_at(hi, &cfg) <= lr_at(lo, &cfg));
    }
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        encoder_blocks: 1,
        heads: 2,
        decoder_blocks: 1,
        encoder_ffn_dim: 32,
        decoder_ffn_dim: 16,
        ..ModelConfig::default()
    }
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let dir = common::tempdir();
    let sim = SimConfig::default();
    write_dataset(&generate_scenes(5, 6, &sim).unwrap(), &sim, dir.path()).unwrap();
    let data = read_dataset(dir.path()).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        total_epochs: 3,
        warmup_epochs: 1,
        ..TrainConfig::for_regime(Regime::Supervised)
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let mut model = Model::<f32>::new_os(tiny_model_config(), 3).unwrap();
            let all = model.config.all_subgroups();
            let out = train_supervised(&mut model, &data, &cfg, &all, |_| {}).unwrap();
            let bits: Vec<u32> = model
                .store
                .iter()
                .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
                .collect();
            (out.epochs, bits)
        })
    };
    let (serial_log, serial_bits) = run(1);
    let (again_log, again_bits) = run(1);
    let (par_log, par_bits) = run(3);
    assert_eq!(serial_log, again_log);
    assert_eq!(serial_bits, again_bits);
    assert_eq!(serial_log, par_log);
    assert_eq!(serial_bits, par_bits);
}

#[test]
fn empty_training_set_is_rejected() {
    let dir = common::tempdir();
    let sim = SimConfig::default();
    write_dataset(&[], &sim, dir.path()).unwrap();
    let data = read_dataset(dir.path()).unwrap();
    let mut model = Model::<f32>::new_os(tiny_model_config(), 0).unwrap();
    let cfg = TrainConfig::for_regime(Regime::Supervised);
    assert!(train_supervised(&mut model, &data, &cfg, &[0, 1, 2, 3], |_| {}).is_err());
}
