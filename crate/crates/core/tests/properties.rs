use candle_core::{Device, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use jepaflow::flow::{sigma_schedule, FlowSample};
use jepaflow::jepa::{sample_mask, MaskConfig};
use jepaflow::metrics::fid;
use jepaflow::train::{Schedule, TrainConfig};

fn features(seed: u64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..d)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * (1.0 + j as f64 * 0.3) + shift
                })
                .collect()
        })
        .collect()
}

fn rotate(rows: &[Vec<f64>], q: &DMatrix<f64>) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let v = q * nalgebra::DVector::from_column_slice(r);
            v.iter().copied().collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fid_ignores_a_shared_rotation(seed in 0u64..1000, shift in -2.0f64..2.0) {
        let d = 4;
        let a = features(seed, 200, d, 0.0);
        let b = features(seed + 1, 200, d, shift);
        let m = DMatrix::from_fn(d, d, |i, j| ((i * 7 + j * 3 + seed as usize) % 11) as f64 - 5.0);
        let q = m.qr().q();
        let plain = fid(&a, &b).unwrap();
        let turned = fid(&rotate(&a, &q), &rotate(&b, &q)).unwrap();
        prop_assert!((plain - turned).abs() <= 1e-8 * plain.max(1.0));
        prop_assert!(fid(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn masks_respect_their_bounds(seed in any::<u64>(), grid in prop::sample::select(vec![8usize, 10, 12, 16])) {
        let cfg = MaskConfig::default();
        let n = grid * grid;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = sample_mask(&mut rng, n, &cfg).unwrap();
        let (clo, chi) = MaskConfig::count_bounds(cfg.encoder_scale, n);
        let (tlo, thi) = MaskConfig::count_bounds(cfg.predictor_scale, n);
        prop_assert!((clo..=chi).contains(&m.context.len()));
        prop_assert!((tlo..=thi).contains(&m.target.len()));
        prop_assert!(m.context.len() >= cfg.min_keep && m.target.len() >= cfg.min_keep);
        for block in [m.context_block, m.target_block] {
            prop_assert!(block.top + block.height <= grid && block.left + block.width <= grid);
            prop_assert!((cfg.aspect_ratio.0..=cfg.aspect_ratio.1).contains(&block.aspect()));
        }
        prop_assert!(m.context.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(m.target.iter().all(|&i| i < n));
    }

    #[test]
    fn flow_sample_algebra(values in prop::collection::vec(-3.0f32..3.0, 16), noise in prop::collection::vec(-3.0f32..3.0, 16), sigma in 0.0f32..=1.0) {
        let dev = Device::Cpu;
        let x0 = Tensor::from_vec(values.clone(), (1, 1, 4, 4), &dev).unwrap();
        let eps = Tensor::from_vec(noise.clone(), (1, 1, 4, 4), &dev).unwrap();
        let fs = FlowSample::from_parts(&x0, &eps, &[sigma]).unwrap();
        let xs: Vec<f32> = fs.x_sigma.flatten_all().unwrap().to_vec1().unwrap();
        for i in 0..16 {
            prop_assert_eq!(xs[i].to_bits(), ((1.0 - sigma) * values[i] + sigma * noise[i]).to_bits());
        }
        let back: Vec<f32> = fs.one_step_estimate(&fs.v_star).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (b, v) in back.iter().zip(&values) {
            prop_assert!((b - v).abs() < 1e-5);
        }
    }

    #[test]
    fn sigma_grid_is_a_descending_partition(start in 0.01f64..=1.0, steps in 1usize..64) {
        let g = sigma_schedule(start, steps);
        prop_assert_eq!(g.len(), steps + 1);
        prop_assert_eq!(g[0], start);
        prop_assert_eq!(g[steps], 0.0);
        prop_assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn learning_rate_stays_in_range(spe in 1u64..200, step in 0u64..40_000) {
        let cfg = TrainConfig::full();
        let s = Schedule::new(&cfg, spe);
        let lr = s.lr_at(step);
        prop_assert!(lr >= cfg.final_lr && lr <= cfg.base_lr);
        let wd = s.weight_decay_at(step);
        prop_assert!(wd >= cfg.weight_decay.0 && wd <= cfg.weight_decay.1);
        if step >= s.warmup_steps && step < s.total_steps {
            prop_assert!(s.lr_at(step + 1) <= lr);
        }
    }
}
