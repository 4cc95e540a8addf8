mod common;

use candle_core::Device;
use common::{tiny, tiny_data};
use jepaflow::adapter::AdapterConfig;
use jepaflow::metrics::{evaluate_predictions, PSNR_CAP_DB};
use jepaflow::nn::Precision;
use jepaflow::rollout::{rollout, FramePredictor};
use jepaflow::train::{checkpoint_step, evaluate, load_checkpoint, Pipeline, Trainer};

fn log_lines(trainer: &mut Trainer, steps: u64) -> String {
    let mut buf = Vec::new();
    trainer.run(steps, Some(&mut buf), None).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn identical_seeds_give_identical_logs() {
    let cfg = tiny();
    let dev = Device::Cpu;
    let mut a = Trainer::new(&cfg, tiny_data(&cfg), &dev).unwrap();
    let mut b = Trainer::new(&cfg, tiny_data(&cfg), &dev).unwrap();
    let (la, lb) = (log_lines(&mut a, 3), log_lines(&mut b, 3));
    assert_eq!(la.lines().count(), 3);
    assert_eq!(la, lb);

    let mut other = cfg.clone();
    other.seed = cfg.seed + 1;
    let mut c = Trainer::new(&other, tiny_data(&cfg), &dev).unwrap();
    assert_ne!(la, log_lines(&mut c, 3));
}

#[test]
fn resumed_run_continues_bit_for_bit() {
    let cfg = tiny();
    let dev = Device::Cpu;
    let mut straight = Trainer::new(&cfg, tiny_data(&cfg), &dev).unwrap();
    let reference = straight.run(3, None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.safetensors");
    let mut first = Trainer::new(&cfg, tiny_data(&cfg), &dev).unwrap();
    first.run(2, None, None).unwrap();
    first.save_checkpoint(&path).unwrap();
    assert_eq!(checkpoint_step(&load_checkpoint(&path, &dev).unwrap()).unwrap(), 2);

    let mut resumed = Trainer::from_checkpoint(&cfg, tiny_data(&cfg), &path, &dev).unwrap();
    assert_eq!(resumed.step_index(), 2);
    assert_eq!(resumed.peek_loss().unwrap(), first.peek_loss().unwrap());
    let next = resumed.step().unwrap();
    assert_eq!(next, reference[2]);
}

#[test]
fn evaluation_is_deterministic_and_counts_samples() {
    let cfg = tiny();
    let dev = Device::Cpu;
    let data = tiny_data(&cfg);
    let trainer = Trainer::new(&cfg, data.clone(), &dev).unwrap();
    let a = evaluate(&trainer.model, &data, &cfg.sampler, 11).unwrap();
    let b = evaluate(&trainer.model, &data, &cfg.sampler, 11).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.model.sample_count, data.len());
    assert_eq!(a.persistence.sample_count, data.len());
    assert!(a.table().contains("Ours") && a.table().contains("Default"));
}

#[test]
fn identity_predictions_score_perfectly() {
    let cfg = tiny();
    let pairs: Vec<_> = tiny_data(&cfg)
        .iter()
        .map(|s| (s.frame_t1.clone(), s.frame_t1.clone()))
        .collect();
    let r = evaluate_predictions(&pairs, None, None).unwrap();
    assert_eq!(r.l1, 0.0);
    assert_eq!(r.ssim, 1.0);
    assert_eq!(r.gssim, 1.0);
    assert_eq!(r.psnr, PSNR_CAP_DB);
}

#[test]
fn one_step_rollout_is_a_single_prediction() {
    let cfg = tiny();
    let dev = Device::Cpu;
    let data = tiny_data(&cfg);
    let trainer = Trainer::new(&cfg, data.clone(), &dev).unwrap();
    let pipeline = Pipeline {
        model: &trainer.model,
        sampler: cfg.sampler.clone(),
    };
    let frame = &data.get(0).unwrap().frame_t;
    let trace = rollout(&pipeline, frame, 1, 40, &[]).unwrap();
    let direct = pipeline.predict(frame, 40 ^ 1).unwrap();
    assert_eq!(trace.frames.len(), 2);
    assert_eq!(trace.frames[1], direct);
    assert!(direct.in_unit_range());
}

#[test]
fn reduced_precision_trains() {
    let mut cfg = tiny();
    cfg.precision = Precision::Reduced;
    let mut trainer = Trainer::new(&cfg, tiny_data(&cfg), &Device::Cpu).unwrap();
    let records = trainer.run(2, None, None).unwrap();
    assert!(records
        .iter()
        .all(|r| r.total.is_finite() && r.alpha > 0.0 && r.alpha < 1.0));
}

#[test]
fn jepa_only_training_leaves_the_generator_alone() {
    let cfg = tiny();
    let dev = Device::Cpu;
    let mut trainer = Trainer::jepa_only(&cfg, tiny_data(&cfg), cfg.loss.clone(), &dev).unwrap();
    let lora_before: Vec<_> = trainer
        .model
        .named_tensors()
        .into_iter()
        .filter(|(k, _)| k.starts_with("online.lora.") || k.starts_with("online.adapter."))
        .map(|(k, v)| (k, v.flatten_all().unwrap().to_vec1::<f32>().unwrap()))
        .collect();
    let records = trainer.run(2, None, None).unwrap();
    assert!(records.iter().all(|r| r.diffusion.is_none()));
    for (k, v) in lora_before {
        let now = trainer.model.named_tensors()[&k]
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(now, v, "{k} moved");
    }
}

#[test]
fn full_adapter_size() {
    assert_eq!(AdapterConfig::default().parameter_count(), 15_017_985);
}
