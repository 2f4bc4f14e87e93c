mod common;

use std::fs;

use rfpose::checkpoint::{self, load_checkpoint_subset, TrainingMeta};
use rfpose::config::RunConfig;
use rfpose::dataset::{f32s_to_le_bytes, le_bytes_to_f32s, read_dataset, write_dataset};
use rfpose::model::{Model, ModelConfig};
use rfpose::params::{Component, ParamStore};
use rfpose::sim::{generate_scenes, SimConfig};
use rfpose::ssl::SslConfig;
use rfpose::train::Regime;

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

fn meta(regime: Regime, ssl: Option<SslConfig>) -> TrainingMeta {
    TrainingMeta {
        regime,
        epoch: 3,
        seed: 9,
        ssl,
    }
}

fn bits(store: &ParamStore<f32>) -> Vec<(String, Vec<u32>)> {
    store
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                p.value.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let dir = common::tempdir();
    let sim = SimConfig::default();
    let scenes = generate_scenes(12, 5, &sim).unwrap();
    let manifest = write_dataset(&scenes, &sim, dir.path()).unwrap();
    assert_eq!(manifest.version, 1);
    assert_eq!(manifest.frame_count, 5);
    let size = fs::metadata(dir.path().join(&manifest.frames_file))
        .unwrap()
        .len();
    assert_eq!(size, 5 * 64 * 768 * 4);

    let data = read_dataset(dir.path()).unwrap();
    assert_eq!(data.manifest, manifest);
    let raw = fs::read(dir.path().join(&manifest.frames_file)).unwrap();
    let reread: Vec<u8> = data
        .frames
        .iter()
        .flat_map(|f| f32s_to_le_bytes(f.samples()))
        .collect();
    assert_eq!(raw, reread);

    let other = common::tempdir();
    write_dataset(&scenes, &sim, other.path()).unwrap();
    for name in ["manifest.json", "frames.bin", "labels.json"] {
        assert_eq!(
            fs::read(dir.path().join(name)).unwrap(),
            fs::read(other.path().join(name)).unwrap()
        );
    }
}

#[test]
fn empty_dataset_is_valid() {
    let dir = common::tempdir();
    let sim = SimConfig::default();
    let manifest = write_dataset(&[], &sim, dir.path()).unwrap();
    assert_eq!(manifest.frame_count, 0);
    assert!(read_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn malformed_datasets_are_rejected() {
    let dir = common::tempdir();
    let sim = SimConfig::default();
    write_dataset(&generate_scenes(1, 2, &sim).unwrap(), &sim, dir.path()).unwrap();
    let frames = dir.path().join("frames.bin");
    let bytes = fs::read(&frames).unwrap();
    fs::write(&frames, &bytes[..bytes.len() - 4]).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    fs::write(&frames, &bytes).unwrap();

    let manifest = dir.path().join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replacen('{', "{\"extra\": 1,", 1)).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap_err().exit_code(), 2);
}

#[test]
fn little_endian_encoding() {
    assert_eq!(f32s_to_le_bytes(&[1.0]), vec![0x00, 0x00, 0x80, 0x3f]);
    let values = [0.1f32, -2.5e-30, f32::MAX, -0.0];
    let back = le_bytes_to_f32s(&f32s_to_le_bytes(&values));
    assert_eq!(
        back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = common::tempdir();
    let ssl = SslConfig::default();
    let model = Model::<f32>::with_components(
        small_config(),
        &[
            Component::RfEncoder,
            Component::PoseEstimator,
            Component::SslDecoder,
        ],
        Some(&ssl),
        1,
    )
    .unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &model, &meta(Regime::Pretrain, Some(ssl))).unwrap();
    let ckpt = checkpoint::load(&path).unwrap();
    assert_eq!(bits(&ckpt.params), bits(&model.store));
    assert_eq!(ckpt.header.model_config, model.config);
    assert_eq!(ckpt.header.training_meta.epoch, 3);
    assert_eq!(bits(&ckpt.to_model().unwrap().store), bits(&model.store));

    let mut end = 0;
    for (entry, p) in ckpt.header.tensors.iter().zip(model.store.iter()) {
        assert_eq!(entry.name, p.name);
        assert_eq!(entry.component, p.component);
        assert!(entry.byte_offset >= end);
        end = entry.byte_offset + 4 * p.value.len() as u64;
    }
    assert_eq!(ckpt.header.tensors.len(), model.store.len());

    let again = dir.path().join("n.ckpt");
    checkpoint::save(
        &again,
        &model,
        &meta(Regime::Pretrain, Some(SslConfig::default())),
    )
    .unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn subset_loading() {
    let dir = common::tempdir();
    let ssl = SslConfig::default();
    let pretrained = Model::<f32>::new_pretrain(small_config(), &ssl, 2).unwrap();
    let path = dir.path().join("p.ckpt");
    checkpoint::save(
        &path,
        &pretrained,
        &meta(Regime::Pretrain, Some(ssl.clone())),
    )
    .unwrap();
    let ckpt = checkpoint::load(&path).unwrap();

    let mut target = Model::<f32>::new_pretrain(small_config(), &ssl, 3).unwrap();
    let fresh = target.clone();
    load_checkpoint_subset(&ckpt, &[Component::RfEncoder], &mut target).unwrap();
    for ((t, p), f) in target
        .store
        .iter()
        .zip(pretrained.store.iter())
        .zip(fresh.store.iter())
    {
        let expected = if t.component == Component::RfEncoder {
            p
        } else {
            f
        };
        assert_eq!(t.value.data(), expected.value.data(), "{}", t.name);
    }

    let mut full = Model::<f32>::new_pretrain(small_config(), &ssl, 4).unwrap();
    load_checkpoint_subset(
        &ckpt,
        &[Component::RfEncoder, Component::SslDecoder],
        &mut full,
    )
    .unwrap();
    assert_eq!(bits(&full.store), bits(&ckpt.to_model().unwrap().store));
}

#[test]
fn mismatched_width_lists_every_tensor() {
    let dir = common::tempdir();
    let source = Model::<f32>::new_os(small_config(), 5).unwrap();
    let path = dir.path().join("s.ckpt");
    checkpoint::save(&path, &source, &meta(Regime::Supervised, None)).unwrap();
    let ckpt = checkpoint::load(&path).unwrap();
    let mut wide = Model::<f32>::new_os(
        ModelConfig {
            embed_dim: 64,
            ..small_config()
        },
        5,
    )
    .unwrap();
    let err = load_checkpoint_subset(&ckpt, &[Component::RfEncoder], &mut wide).unwrap_err();
    let msg = err.to_string();
    let mismatched: Vec<&str> = source
        .store
        .iter()
        .zip(wide.store.iter())
        .filter(|(a, b)| a.component == Component::RfEncoder && a.value.shape() != b.value.shape())
        .map(|(a, _)| a.name.as_str())
        .collect();
    assert!(mismatched.len() > 10);
    for name in mismatched {
        assert!(msg.contains(name), "{name} missing from: {msg}");
    }
    assert!(msg.contains("[32]") && msg.contains("[64]"));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = common::tempdir();
    let model = Model::<f32>::new_os(small_config(), 6).unwrap();
    let path = dir.path().join("t.ckpt");
    checkpoint::save(&path, &model, &meta(Regime::Supervised, None)).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap_err().exit_code(), 2);
}

#[test]
fn configs_serialize_to_a_fixed_point() {
    for regime in [Regime::Supervised, Regime::Pretrain, Regime::Finetune] {
        let cfg = RunConfig::defaults(regime);
        let once = cfg.to_json();
        let parsed = RunConfig::parse(&once, regime).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.to_json(), once);
    }
}
