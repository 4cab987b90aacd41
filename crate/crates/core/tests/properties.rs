//! Property tests over randomly generated inputs.

use dspo_core::degrade::{degrade, DegradationConfig};
use dspo_core::eval::{wilson_interval, win_rate_from_rounds, TrialCounts, Z95};
use dspo_core::image::RasterImage;
use dspo_core::losses::{dspo_instance_loss, ErrorReduction, NoisePredictionBatch};
use dspo_core::metrics::{psnr, ssim, MetricVector};
use dspo_core::partition::{enforce_partition, instance_weights, resample_partition, top_k_largest, InstancePartition, RawMask};
use dspo_core::preference::{normalize_aggregate, select_best_worst};
use dspo_core::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(w: usize, h: usize, seed: u64) -> RasterImage<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::<f64>::randn(3, h, w, &mut rng);
    RasterImage::from_fn(w, h, |x, y| std::array::from_fn(|c| (0.5 + 0.2 * t.at(c, y, x)).clamp(0.0, 1.0)))
}

fn rect_masks(w: usize, h: usize, rects: &[(usize, usize, usize, usize)]) -> Vec<RawMask> {
    rects
        .iter()
        .map(|&(x0, y0, rw, rh)| RawMask::from_fn(w, h, |x, y| x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh))
        .collect()
}

fn random_partition(w: usize, h: usize, rects: &[(usize, usize, usize, usize)]) -> InstancePartition {
    enforce_partition(&rect_masks(w, h, rects), w, h).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn degraded_images_stay_in_unit_range(
        blur in 0.0f64..3.0, noise in 0.0f64..0.5, quality in 1u8..=100, second in any::<bool>(), seed in any::<u64>()
    ) {
        let cfg = DegradationConfig { blur_sigma: blur, noise_sigma: noise, downscale: 2, compression_quality: quality, second_order: second, seed };
        let lq = degrade(&image(16, 16, seed), &cfg).unwrap();
        prop_assert_eq!(lq.dims(), (8, 8));
        prop_assert!(lq.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn partitions_cover_every_pixel_once_with_simplex_weights(
        rects in prop::collection::vec((0usize..20, 0usize..20, 1usize..12, 1usize..12), 1..8), k in 1usize..6
    ) {
        let p = random_partition(20, 20, &rects);
        let masks = p.masks();
        for px in 0..400 {
            prop_assert_eq!(masks.iter().filter(|m| m[px]).count(), 1);
        }
        prop_assert!(p.areas().iter().all(|&a| a > 0));
        prop_assert!(instance_weights::<f64>(&p).is_on_simplex(1e-9));

        let top = top_k_largest(&p, k).unwrap();
        prop_assert_eq!(top.areas().iter().sum::<usize>(), 400);
        prop_assert!(top.num_instances() <= k + 1);
        prop_assert!(instance_weights::<f64>(&top).is_on_simplex(1e-9));

        let small = resample_partition(&p, 7, 9).unwrap();
        let source: std::collections::BTreeSet<u32> = p.labels().iter().copied().collect();
        prop_assert!(small.labels().iter().all(|l| source.contains(l)));
        prop_assert!(instance_weights::<f64>(&small).is_on_simplex(1e-9));
    }

    #[test]
    fn swapping_winner_and_loser_negates_every_argument(seed in any::<u64>(), beta in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = || Tensor::<f64>::randn(3, 6, 6, &mut rng);
        let p = random_partition(6, 6, &[(0, 0, 3, 6), (3, 0, 3, 3)]);
        let batch = NoisePredictionBatch {
            eps_true: t(), eps_theta_w: t(), eps_ref_w: t(), eps_theta_l: t(), eps_ref_l: t(),
            masks: p.masks(), weights: instance_weights(&p), t: 3, gamma: 1.0, beta, t_max: 10, reduction: ErrorReduction::Sum,
        };
        let a = dspo_instance_loss(&batch).unwrap();
        let b = dspo_instance_loss(&batch.swapped()).unwrap();
        for (za, zb) in a.inner_argument.iter().zip(&b.inner_argument) {
            prop_assert!((za + zb).abs() <= 1e-9 * za.abs().max(1.0));
        }
        // positive in exact arithmetic; large arguments underflow to 0.0
        prop_assert!(a.total >= 0.0 && a.total.is_finite());
    }

    #[test]
    fn selection_is_invariant_to_positive_affine_metric_maps(
        raw in prop::collection::vec(prop::array::uniform8(-5.0f64..5.0), 4),
        scales in prop::array::uniform8(0.01f64..100.0),
        shifts in prop::array::uniform8(-100.0f64..100.0),
    ) {
        let vs: Vec<MetricVector<f64>> = raw.iter().map(|v| MetricVector { values: *v }).collect();
        let mapped: Vec<MetricVector<f64>> =
            raw.iter().map(|v| MetricVector { values: std::array::from_fn(|j| scales[j] * v[j] + shifts[j]) }).collect();
        let a = select_best_worst(&normalize_aggregate(&vs).unwrap());
        let b = select_best_worst(&normalize_aggregate(&mapped).unwrap());
        prop_assert_eq!(a.ok(), b.ok());
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (image(12, 12, s1), image(12, 12, s2));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ssim(&a, &b).unwrap() <= ssim(&a, &a).unwrap() + 1e-12);
    }

    #[test]
    fn win_rate_is_antisymmetric_and_inside_its_interval(
        rounds in prop::collection::vec((0usize..20, 0usize..20, 0usize..5), 1..4)
    ) {
        let counts: Vec<TrialCounts> = rounds.iter().map(|&(wins, losses, ties)| TrialCounts { wins, losses, ties }).collect();
        let swapped: Vec<TrialCounts> = counts.iter().map(|c| TrialCounts { wins: c.losses, losses: c.wins, ties: c.ties }).collect();
        match (win_rate_from_rounds(&counts), win_rate_from_rounds(&swapped)) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a.rate + b.rate - 1.0).abs() < 1e-12);
                prop_assert_eq!(a.ties, b.ties);
                prop_assert!(a.ci95.0 <= a.rate && a.rate <= a.ci95.1);
                let (lo, hi) = wilson_interval(a.wins, a.wins + a.losses, Z95).unwrap();
                prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
            }
            (Err(_), Err(_)) => prop_assert!(counts.iter().all(|c| c.wins + c.losses == 0)),
            _ => prop_assert!(false, "antisymmetric inputs disagree on decidability"),
        }
    }
}
