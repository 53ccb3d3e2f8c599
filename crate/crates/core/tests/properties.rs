use approx::assert_relative_eq;
use hashvfl::adversary::{dcor, kld_hist, ssim, total_variation};
use hashvfl::codebook::{hamming, Codebook};
use hashvfl::defense::{detect_abnormal, flip_count_pmf, DetectionPolicy};
use hashvfl::hash::{bn_forward_train, sign_forward, BatchNormState};
use hashvfl::Matrix;
use proptest::prelude::*;

fn pm1(bits: &[bool]) -> Vec<f64> {
    bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect()
}

proptest! {
    #[test]
    fn kld_of_identical_arrays_is_zero(x in prop::collection::vec(0.0f64..1.0, 1..200), bins in 2usize..32) {
        prop_assert_eq!(kld_hist(&x, &x, bins).unwrap(), 0.0);
    }

    #[test]
    fn kld_is_non_negative(
        x in prop::collection::vec(0.0f64..1.0, 1..100),
        y in prop::collection::vec(0.0f64..1.0, 1..100),
    ) {
        prop_assert!(kld_hist(&x, &y, 10).unwrap() >= 0.0);
    }

    #[test]
    fn ssim_of_an_image_with_itself_is_one(x in prop::collection::vec(0.0f64..1.0, 2..100)) {
        assert_relative_eq!(ssim(&x, &x).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_is_bounded(
        x in prop::collection::vec(0.0f64..1.0, 20),
        y in prop::collection::vec(0.0f64..1.0, 20),
    ) {
        let s = ssim(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn dcor_is_symmetric_and_bounded(
        x in prop::collection::vec(-5.0f64..5.0, 24),
        y in prop::collection::vec(-5.0f64..5.0, 24),
    ) {
        let a = Matrix::new(12, 2, x).unwrap();
        let b = Matrix::new(12, 2, y).unwrap();
        let ab = dcor(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        assert_relative_eq!(ab, dcor(&b, &a).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn tv_is_non_negative_and_translation_invariant(
        x in prop::collection::vec(0.0f64..1.0, 12),
        shift in -3.0f64..3.0,
    ) {
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let a = total_variation(&x, 3, 4).unwrap();
        prop_assert!(a >= 0.0);
        assert_relative_eq!(a, total_variation(&shifted, 3, 4).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn batch_norm_balances_every_column(
        data in prop::collection::vec(-100.0f64..100.0, 16 * 3),
    ) {
        let x = Matrix::new(16, 3, data).unwrap();
        let (out, _) = bn_forward_train(&x, &mut BatchNormState::new(3)).unwrap();
        let codes = sign_forward(&out);
        for c in 0..3 {
            prop_assert!(out.column(c).iter().sum::<f64>().abs() <= 1e-6 * 16.0);
            let col = x.column(c);
            if col.iter().any(|&v| v != col[0]) {
                let signs = codes.column(c);
                prop_assert!(signs.contains(&1.0) && signs.contains(&-1.0));
            }
        }
    }

    #[test]
    fn detection_ignores_party_order(
        a in prop::collection::vec(prop::bool::ANY, 8),
        b in prop::collection::vec(prop::bool::ANY, 8),
        c in prop::collection::vec(prop::bool::ANY, 8),
    ) {
        let (a, b, c) = (pm1(&a), pm1(&b), pm1(&c));
        let policy = DetectionPolicy::new(8).unwrap();
        let one = detect_abnormal(&[&a, &b, &c], &policy).unwrap();
        let two = detect_abnormal(&[&c, &b, &a], &policy).unwrap();
        prop_assert_eq!(one, two);
        prop_assert_eq!(one.flagged, one.max_distance > 4);
    }

    #[test]
    fn flip_count_pmf_normalizes(n in 1usize..40, eps in 0.01f64..20.0) {
        let total: f64 = (0..=n).map(|k| flip_count_pmf(n, k, eps).unwrap()).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn generated_codebooks_are_distinct_and_binary(classes in 2usize..20, extra in 0usize..6, seed in any::<u64>()) {
        let bits = hashvfl::codebook::code_length(classes).unwrap() + extra;
        let cb = Codebook::generate(classes, bits, seed).unwrap();
        for i in 0..classes {
            prop_assert!(cb.codes()[i].iter().all(|&v| v == 1 || v == -1));
            for j in i + 1..classes {
                prop_assert!(hamming(&cb.code(i), &cb.code(j)).unwrap() > 0);
            }
        }
    }
}
