use mmprecode::channel::dft_codebook;
use mmprecode::experiment::{noise_var_from_snr, snr_db_from_noise_var, ExperimentConfig};
use mmprecode::linalg::{complex_gaussian_vector, fro_sqr, stack_columns, CMatrix, CVector};
use mmprecode::pilots::{
    build_pilot_matrix, dequantize_feedback, ls_estimate, quantize_feedback, transmit_downlink,
    QuantizerConfig,
};
use mmprecode::precode::{mf_precoder, sum_rate, wmmse_precoder, zf_precoder};
use mmprecode::rng::{derive, rng_from};
use mmprecode::scene::{
    corrupt_snapshot, generate_scene, sample_snapshot, CorruptionConfig, Scene, SceneConfig,
    SensorFlags,
};
use proptest::prelude::*;

fn random_channel(n: usize, k: usize, seed: u64) -> CMatrix {
    let mut rng = rng_from(seed);
    let cols: Vec<CVector> = (0..k)
        .map(|_| complex_gaussian_vector(&mut rng, n, 1.0))
        .collect();
    stack_columns(&cols)
}

fn random_vector(n: usize, seed: u64) -> CVector {
    complex_gaussian_vector(&mut rng_from(seed), n, 1.0)
}

proptest! {
    #[test]
    fn quantizer_error_is_half_a_step(bits in 1u32..12, clip in 0.01f64..10.0, u in -1.0f64..1.0) {
        let q = QuantizerConfig::new(bits, clip).unwrap();
        let x = u * clip;
        prop_assert!((q.round_trip(x) - x).abs() <= q.step() / 2.0 + 1e-12 * clip);
        prop_assert!(q.round_trip(x).abs() < clip);
    }

    #[test]
    fn quantizer_saturates_outside_the_clip(bits in 1u32..12, clip in 0.01f64..10.0, over in 1.0f64..100.0) {
        let q = QuantizerConfig::new(bits, clip).unwrap();
        prop_assert_eq!(q.index(clip * over), q.levels() - 1);
        prop_assert_eq!(q.index(-clip * over), 0);
    }

    #[test]
    fn feedback_bits_round_trip(n in 1usize..20, bits in 1u32..10, seed in any::<u64>()) {
        let q = QuantizerConfig::with_default_clip(bits, n, 1.0).unwrap();
        let v = random_vector(n, seed) * mmprecode::C64::from((1.0 / (2.0 * n as f64)).sqrt());
        let payload = quantize_feedback(&v, &q);
        prop_assert_eq!(payload.len(), q.payload_bits(n));
        let back = dequantize_feedback(&payload, n, &q).unwrap();
        for (a, b) in v.iter().zip(back.iter()) {
            prop_assert_eq!(q.round_trip(a.re), b.re);
            prop_assert_eq!(q.round_trip(a.im), b.im);
        }
        // Requantizing the reconstruction reproduces the same bits.
        prop_assert_eq!(quantize_feedback(&back, &q), payload);
    }

    #[test]
    fn snr_conversion_round_trips(power in 0.01f64..100.0, snr in -30.0f64..50.0) {
        let nv = noise_var_from_snr(power, snr);
        prop_assert!((snr_db_from_noise_var(power, nv) - snr).abs() < 1e-9);
    }

    #[test]
    fn zf_nulls_interference_and_spends_the_budget(
        n in 2usize..12, k_frac in 0.0f64..1.0, power in 0.1f64..10.0, seed in any::<u64>()
    ) {
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let h = random_channel(n, k, seed);
        let zf = zf_precoder(&h, power).unwrap();
        prop_assert!((zf.power() - power).abs() < 1e-9 * power);
        let g = h.ad_mul(&zf.v);
        let signal = (0..k).map(|u| g[(u, u)].norm_sqr()).fold(f64::INFINITY, f64::min);
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    prop_assert!(g[(i, j)].norm_sqr() < 1e-18 * signal.max(1.0));
                }
            }
        }
    }

    #[test]
    fn wmmse_never_loses_to_zf(
        n in 2usize..8, k_frac in 0.0f64..1.0, snr in -5.0f64..30.0, seed in any::<u64>()
    ) {
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let h = random_channel(n, k, seed);
        let nv = noise_var_from_snr(1.0, snr);
        let zf = sum_rate(&h, &zf_precoder(&h, 1.0).unwrap().v, nv).unwrap().total;
        let w = wmmse_precoder(&h, 1.0, nv, 50, 1e-8).unwrap();
        let rate = sum_rate(&h, &w.precoder.v, nv).unwrap().total;
        prop_assert!(rate >= zf);
        prop_assert!(w.precoder.power() <= 1.0 + 1e-9);
    }

    #[test]
    fn rates_are_nonnegative_and_grow_with_snr(n in 1usize..8, k in 1usize..5, seed in any::<u64>()) {
        let h = random_channel(n, k, seed);
        let v = mf_precoder(&h, 1.0).v;
        let low = sum_rate(&h, &v, 1.0).unwrap();
        let high = sum_rate(&h, &v, 0.1).unwrap();
        prop_assert!(low.per_user.iter().all(|r| *r >= 0.0));
        prop_assert!(high.total >= low.total);
        prop_assert!((fro_sqr(&v) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn noiseless_ls_recovers_the_in_span_channel(n in 2usize..16, m_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let m = 1 + ((n - 1) as f64 * m_frac) as usize;
        let idx: Vec<usize> = (0..m).collect();
        let p = build_pilot_matrix(&idx, &dft_codebook(n), 2.0).unwrap();
        let h = random_vector(n, seed);
        let y = transmit_downlink(&h, &p.s, 0.0, 0).unwrap();
        let est = ls_estimate(&y, &p.s).unwrap();
        let projected = &p.s * p.s.ad_mul(&h) / mmprecode::C64::from(2.0);
        prop_assert!((est - projected).norm() < 1e-9 * h.norm());
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct(seed in any::<u64>(), i in 0u64..1000) {
        prop_assert_eq!(derive(seed, i), derive(seed, i));
        prop_assert_ne!(derive(seed, i), derive(seed, i + 1));
    }
}

fn small_scene(seed: u64) -> Scene {
    let cfg = SceneConfig {
        building_count: 4,
        vehicles: vec![
            SensorFlags::new(true, true, true),
            SensorFlags::new(true, false, false),
        ],
        ..SceneConfig::default()
    };
    generate_scene(&cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scene_binary_and_json_round_trip(seed in any::<u64>()) {
        let scene = small_scene(seed);
        let back = Scene::read_binary(scene.to_bytes().as_slice()).unwrap();
        prop_assert_eq!(&back, &scene);
        prop_assert_eq!(Scene::from_json(&scene.to_json()).unwrap(), scene);
    }

    #[test]
    fn zero_corruption_leaves_snapshots_untouched(seed in any::<u64>()) {
        let scene = small_scene(seed);
        let none = CorruptionConfig::level("none").unwrap();
        for v in 0..scene.num_vehicles() {
            let snap = sample_snapshot(&scene, v, derive(seed, v as u64)).unwrap();
            prop_assert_eq!(corrupt_snapshot(&snap, &none, seed).unwrap(), snap);
        }
    }

    #[test]
    fn occlusion_only_removes_points(seed in any::<u64>(), deg in 0.0f64..360.0) {
        let scene = small_scene(seed);
        let snap = sample_snapshot(&scene, 0, seed).unwrap();
        let out = corrupt_snapshot(&snap, &CorruptionConfig::new(0.0, deg), seed).unwrap();
        let (before, after) = (snap.point_cloud.unwrap(), out.point_cloud.unwrap());
        prop_assert!(after.len() <= before.len());
        prop_assert!(after.iter().all(|p| before.contains(p)));
    }

    #[test]
    fn config_toml_round_trips(
        seed in any::<u64>(), snr in -10.0f64..40.0, lr in 1e-5f64..1e-1, epochs in 1usize..500
    ) {
        let mut cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
        cfg.system.snr_db = Some(snr);
        cfg.training.lr = lr;
        cfg.training.epochs = epochs;
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn zf_reports_collinear_users() {
    let h = random_channel(4, 1, 7);
    let dup = stack_columns(&[
        h.column(0).into_owned(),
        h.column(0) * mmprecode::C64::from(2.0),
    ]);
    let err = zf_precoder(&dup, 1.0).unwrap_err();
    assert!(matches!(err, mmprecode::Error::Numerical(_)));
}

#[test]
fn bad_corruption_level_is_a_config_error() {
    assert!(matches!(
        CorruptionConfig::level("severe"),
        Err(mmprecode::Error::Config(_))
    ));
}
