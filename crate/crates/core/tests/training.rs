use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use texturegan::datagen::{make_training_example, ExampleConfig};
use texturegan::nets::TinyExtractorConfig;
use texturegan::procedural::{pattern_textures, synthetic_products, PatternKind};
use texturegan::train::{
    checkpoint_path, read_metrics, run_with_data, Checkpoint, Datasets, ExtractorConfig, IterationKind, RunOptions,
    Stage, TrainConfig, METRICS_FILE,
};
use texturegan::Error;

fn tiny_config(out: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::for_resolution(32);
    cfg.batch_size = 2;
    cfg.iterations = 4;
    cfg.checkpoint_every = 2;
    cfg.generator.base_width = 8;
    cfg.generator.n_down = 2;
    cfg.generator.n_res = 1;
    cfg.discriminator.base_width = 8;
    cfg.local_discriminator.base_width = 8;
    cfg.local_discriminator.hidden = 16;
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn data() -> Datasets {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ecfg = ExampleConfig::for_resolution(32);
    let examples = synthetic_products(3, &mut rng, 32)
        .iter()
        .enumerate()
        .map(|(i, (_, p))| make_training_example(p, i as u64, &ecfg).unwrap())
        .collect();
    let textures = pattern_textures(&PatternKind::ALL, 3, 48, &mut rng).unwrap();
    Datasets { examples, textures }
}

fn finetune(cfg: &mut TrainConfig) {
    cfg.stage = Stage::Finetune;
    cfg.textures = Some(PathBuf::from("textures"));
}

fn assert_same_tensors(a: &Path, b: &Path) {
    let (a, _) = Checkpoint::load(a).unwrap();
    let (b, _) = Checkpoint::load(b).unwrap();
    assert_eq!(a.meta.iteration, b.meta.iteration);
    assert_eq!(a.meta.rng, b.meta.rng);
    assert_eq!(a.meta.optimizer_steps, b.meta.optimizer_steps);
    assert_eq!(a.tensors.keys().collect::<Vec<_>>(), b.tensors.keys().collect::<Vec<_>>());
    for (k, t) in &a.tensors {
        let x: Vec<f32> = t.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let y: Vec<f32> = b.tensors[k].to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()), "{k} differs");
    }
}

fn losses(dir: &Path) -> Vec<(u64, IterationKind, f64)> {
    read_metrics(dir.join(METRICS_FILE))
        .unwrap()
        .iter()
        .map(|m| (m.iteration, m.kind, m.losses.total))
        .collect()
}

#[test]
fn same_seed_same_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data();
    let a = tiny_config(&tmp.path().join("a"));
    let b = tiny_config(&tmp.path().join("b"));
    let la = run_with_data(&a, &data, &RunOptions::default()).unwrap();
    let lb = run_with_data(&b, &data, &RunOptions::default()).unwrap();
    assert_same_tensors(&la, &lb);
    assert_eq!(losses(&a.out_dir), losses(&b.out_dir));
    assert_eq!(losses(&a.out_dir).len(), 4);
}

#[test]
fn resume_is_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data();
    let mut straight = tiny_config(&tmp.path().join("straight"));
    finetune(&mut straight);
    let end = run_with_data(&straight, &data, &RunOptions::default()).unwrap();

    let mut split = tiny_config(&tmp.path().join("split"));
    finetune(&mut split);
    let halfway = run_with_data(&split, &data, &RunOptions { stop_at: Some(2), ..RunOptions::default() }).unwrap();
    assert_eq!(halfway, checkpoint_path(&split.out_dir, 2));
    let resumed = run_with_data(&split, &data, &RunOptions { resume: Some(halfway), ..RunOptions::default() }).unwrap();
    assert_same_tensors(&end, &resumed);
    assert_eq!(losses(&straight.out_dir), losses(&split.out_dir));
}

#[test]
fn extractor_is_frozen_across_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    run_with_data(&cfg, &data(), &RunOptions::default()).unwrap();
    let prints: Vec<String> = [0, 2, 4]
        .iter()
        .map(|i| Checkpoint::load(checkpoint_path(tmp.path(), *i)).unwrap().0.meta.extractor.fingerprint)
        .collect();
    assert!(prints.iter().all(|p| *p == prints[0]));
}

#[test]
fn resuming_with_another_extractor_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = data();
    let cfg = tiny_config(&tmp.path().join("a"));
    let last = run_with_data(&cfg, &data, &RunOptions { stop_at: Some(2), ..RunOptions::default() }).unwrap();

    let mut other = tiny_config(&tmp.path().join("b"));
    other.extractor = ExtractorConfig::Tiny(TinyExtractorConfig {
        seed: 999,
        ..TinyExtractorConfig::default()
    });
    let mut ft = other.clone();
    finetune(&mut ft);
    let err = run_with_data(&ft, &data, &RunOptions { init: Some(last.clone()), ..RunOptions::default() }).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");

    // a resumed run rebuilds the extractor from the checkpoint's own config
    let (mut ckpt, _) = Checkpoint::load(&last).unwrap();
    ckpt.meta.extractor.fingerprint = "0".repeat(64);
    let forged = tmp.path().join("forged.tgan");
    ckpt.save(&forged).unwrap();
    let err = run_with_data(&cfg, &data, &RunOptions { resume: Some(forged), ..RunOptions::default() }).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn finetuning_alternates_iteration_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path());
    finetune(&mut cfg);
    cfg.iterations = 6;
    cfg.checkpoint_every = 0;
    run_with_data(&cfg, &data(), &RunOptions::default()).unwrap();
    let kinds: Vec<IterationKind> = losses(tmp.path()).iter().map(|l| l.1).collect();
    assert_eq!(kinds.len(), 6);
    for pair in kinds.chunks(2) {
        assert_ne!(pair[0], pair[1]);
    }
    assert_eq!(kinds.iter().filter(|k| **k == IterationKind::GroundTruth).count(), 3);
}
