mod common;

use std::collections::BTreeMap;

use common::*;
use vidanim::checkpoint::{decode, load_checkpoint, save_checkpoint};
use vidanim::dataset::{generate_corpus, Corpus, CorpusSpec};
use vidanim::pipeline::schedule_for;
use vidanim::schedule::training_loss;
use vidanim::trainer::*;
use vidanim::Error;

fn corpus(dir: &std::path::Path) -> Corpus {
    let cfg = tiny_config();
    generate_corpus(&CorpusSpec { n_clips: 3, seed: 2, size: cfg.image_size, frames: cfg.native_frames }, dir).unwrap();
    Corpus::load(dir).unwrap()
}

fn snapshot(state: &ModelState) -> BTreeMap<String, Vec<f64>> {
    state.params.entries().into_iter().map(|(n, v)| (n, to_vec(v.as_tensor()))).collect()
}

fn state_at(stage: Stage) -> ModelState {
    let mut s = ModelState::new(tiny_config()).unwrap();
    s.advance(stage).unwrap();
    s
}

#[test]
fn identical_inputs_give_identical_steps() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let cfg = tiny_config();
    let sched = schedule_for(&cfg).unwrap();
    let tc = TrainConfig::for_stage(&cfg, Stage::VideoFinetune);
    let batch = draw_batch(&corpus, &tc, 0, 0).unwrap();
    let (mut a, mut b) = (state_at(Stage::VideoFinetune), state_at(Stage::VideoFinetune));
    let la = train_step(&mut a, &batch, &sched, &tc).unwrap();
    let lb = train_step(&mut b, &batch, &sched, &tc).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn image_adapter_updates_only_its_subset() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let cfg = tiny_config();
    let sched = schedule_for(&cfg).unwrap();
    let mut tc = TrainConfig::for_stage(&cfg, Stage::ImageAdapter);
    tc.cond_drop_prob = 0.0;
    let mut state = state_at(Stage::ImageAdapter);
    let before = snapshot(&state);
    let trainer = StageTrainer::new(&state).unwrap();
    for step in 0..2 {
        let batch = draw_batch(&corpus, &tc, step, 0).unwrap();
        trainer.step(&mut state, &[batch], &sched, &tc).unwrap();
    }
    let after = snapshot(&state);
    let mut changed = 0;
    for (name, v) in &before {
        let trainable = name.starts_with("text.")
            || name.starts_with("image.")
            || name.starts_with("proj.")
            || name.ends_with("img_k.weight")
            || name.ends_with("img_v.weight");
        if trainable {
            changed += usize::from(v != &after[name]);
        } else {
            assert_eq!(v, &after[name], "{name} changed");
        }
    }
    assert!(changed > 10);
    assert!(before.iter().any(|(n, v)| n.starts_with("proj.") && v != &after[n]));
}

#[test]
fn image_value_moves_first_then_image_key() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let cfg = tiny_config();
    let sched = schedule_for(&cfg).unwrap();
    let mut tc = TrainConfig::for_stage(&cfg, Stage::ImageAdapter);
    tc.cond_drop_prob = 0.0;
    let mut state = state_at(Stage::ImageAdapter);
    let pick = |s: &ModelState, suffix: &str| -> Vec<f64> {
        snapshot(s).into_iter().filter(|(n, _)| n.ends_with(suffix)).flat_map(|(_, v)| v).collect()
    };
    let (k0, v0) = (pick(&state, "img_k.weight"), pick(&state, "img_v.weight"));
    assert!(v0.iter().all(|x| *x == 0.0));
    let trainer = StageTrainer::new(&state).unwrap();
    let b0 = draw_batch(&corpus, &tc, 0, 0).unwrap();
    trainer.step(&mut state, &[b0], &sched, &tc).unwrap();
    let (k1, v1) = (pick(&state, "img_k.weight"), pick(&state, "img_v.weight"));
    assert!(v1.iter().any(|x| *x != 0.0));
    assert_eq!(k0, k1);
    let b1 = draw_batch(&corpus, &tc, 1, 0).unwrap();
    trainer.step(&mut state, &[b1], &sched, &tc).unwrap();
    assert_ne!(k1, pick(&state, "img_k.weight"));
}

#[test]
fn wrong_stage_batches_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let cfg = tiny_config();
    let sched = schedule_for(&cfg).unwrap();
    let video = TrainConfig::for_stage(&cfg, Stage::VideoFinetune);
    let image = TrainConfig::for_stage(&cfg, Stage::ImageAdapter);
    let clips = draw_batch(&corpus, &video, 0, 0).unwrap();
    let frames = draw_batch(&corpus, &image, 0, 0).unwrap();
    let mut s = state_at(Stage::ImageAdapter);
    assert!(matches!(train_step(&mut s, &clips, &sched, &image), Err(Error::InvalidArgument(_))));
    let mut s = state_at(Stage::VideoFinetune);
    assert!(train_step(&mut s, &frames, &sched, &video).is_err());
    assert!(train_step(&mut s, &clips, &sched, &image).is_err());
    assert!(s.advance(Stage::Codec).is_err());
}

#[test]
fn non_finite_loss_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let cfg = tiny_config();
    let sched = schedule_for(&cfg).unwrap();
    let tc = TrainConfig::for_stage(&cfg, Stage::VideoFinetune);
    let mut s = state_at(Stage::VideoFinetune);
    let w = s.params.var("unet.conv_out.bias").unwrap();
    w.set(&(w.as_tensor() * f64::NAN).unwrap()).unwrap();
    let batch = draw_batch(&corpus, &tc, 0, 0).unwrap();
    assert!(matches!(train_step(&mut s, &batch, &sched, &tc), Err(Error::Diverged { .. })));
    assert_eq!(s.step, 0);
}

#[test]
fn oracle_noise_prediction_has_zero_loss() {
    let eps = randn(&[2, 3, 2, 4, 4], 1);
    assert_eq!(training_loss(&eps, &eps).unwrap(), 0.0);
    assert!(training_loss(&eps, &(&eps * 2.0).unwrap()).unwrap() > 0.0);
}

#[test]
fn accumulation_averages_micro_batches() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let cfg = tiny_config();
    let sched = schedule_for(&cfg).unwrap();
    let tc = TrainConfig::for_stage(&cfg, Stage::Codec);
    let b0 = draw_batch(&corpus, &tc, 0, 0).unwrap();
    let b1 = draw_batch(&corpus, &tc, 0, 1).unwrap();
    let mut s0 = state_at(Stage::Codec);
    let l0 = train_step(&mut s0, &b0, &sched, &tc).unwrap();
    let mut s1 = state_at(Stage::Codec);
    let l1 = train_step(&mut s1, &b1, &sched, &tc).unwrap();
    let mut both = state_at(Stage::Codec);
    let l = StageTrainer::new(&both).unwrap().step(&mut both, &[b0, b1], &sched, &tc).unwrap();
    assert!((l - (l0 + l1) / 2.0).abs() < 1e-6);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path().join("data").as_path());
    let cfg = tiny_config();
    let sched = schedule_for(&cfg).unwrap();
    let tc = TrainConfig::for_stage(&cfg, Stage::VideoFinetune);
    let mut s = state_at(Stage::VideoFinetune);
    s.normalization = 0.731;
    train_step(&mut s, &draw_batch(&corpus, &tc, 0, 0).unwrap(), &sched, &tc).unwrap();
    let ck = dir.path().join("ck");
    save_checkpoint(&s, &ck).unwrap();
    let back = load_checkpoint(&ck).unwrap();
    assert_eq!(snapshot(&s), snapshot(&back));
    assert_eq!((back.stage, back.step, back.normalization), (s.stage, s.step, s.normalization));
    assert_eq!(back.config, s.config);
    assert_eq!(back.optimizer.len(), s.optimizer.len());
    for (name, m) in &s.optimizer {
        assert_eq!(to_vec(&m.m), to_vec(&back.optimizer[name].m));
        assert_eq!(to_vec(&m.v), to_vec(&back.optimizer[name].v));
    }
}

#[test]
fn damaged_checkpoints_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let s = ModelState::new(tiny_config()).unwrap();
    save_checkpoint(&s, dir.path()).unwrap();
    let manifest = std::fs::read(dir.path().join("manifest.json")).unwrap();
    let params = std::fs::read(dir.path().join("params.bin")).unwrap();

    let truncated = params[..params.len() - 7].to_vec();
    let err = decode(&manifest, &mut |_| Ok(truncated.clone())).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");

    std::fs::write(dir.path().join("params.bin"), &params[..100]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    std::fs::remove_file(dir.path().join("params.bin")).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::MissingFile(_))));

    assert!(decode(b"{", &mut |_| Ok(params.clone())).is_err());
    let text = String::from_utf8(manifest.clone()).unwrap();
    let escaped = text.replacen("\"params.bin\"", "\"../params.bin\"", 1);
    assert!(decode(escaped.as_bytes(), &mut |_| Ok(params.clone())).is_err());
    let renamed = text.replacen("unet.conv_out.bias", "unet.conv_out.nope", 1);
    assert!(decode(renamed.as_bytes(), &mut |_| Ok(params.clone())).is_err());
    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
}

#[test]
fn resume_reproduces_losses() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path().join("data").as_path());
    let cfg = tiny_config();
    let mut tc = TrainConfig::for_stage(&cfg, Stage::VideoFinetune);
    tc.steps = 4;
    let mut straight = state_at(Stage::VideoFinetune);
    let full = run_stage(&mut straight, &corpus, &tc, &RunOptions::default()).unwrap();

    let out = dir.path().join("run");
    let mut first = state_at(Stage::VideoFinetune);
    let head = run_stage(&mut first, &corpus, &tc, &RunOptions { out_dir: Some(&out), max_steps: Some(2) }).unwrap();
    drop(first);
    let mut resumed = load_checkpoint(&out.join("checkpoint")).unwrap();
    assert_eq!(resumed.step, 2);
    let tail = run_stage(&mut resumed, &corpus, &tc, &RunOptions { out_dir: Some(&out), max_steps: None }).unwrap();
    let joined: Vec<u64> = head.iter().chain(&tail).map(|l| l.to_bits()).collect();
    assert_eq!(joined, full.iter().map(|l| l.to_bits()).collect::<Vec<_>>());
    assert_eq!(snapshot(&resumed), snapshot(&straight));

    let metrics = std::fs::read_to_string(out.join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step\tstage\tloss");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("4\tvideo_finetune\t"));
}

#[test]
fn codec_stage_calibrates_normalization() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let cfg = tiny_config();
    let mut tc = TrainConfig::for_stage(&cfg, Stage::Codec);
    tc.steps = 3;
    let mut s = ModelState::new(cfg).unwrap();
    run_stage(&mut s, &corpus, &tc, &RunOptions::default()).unwrap();
    let model = s.model().unwrap();
    let mut all = Vec::new();
    for f in &corpus.frames {
        all.extend(to_vec(&model.codec.encode_raw(f).unwrap()));
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((s.normalization - std).abs() < 1e-4 * std, "{} vs {std}", s.normalization);
}
