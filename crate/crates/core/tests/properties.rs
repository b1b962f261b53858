use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use logocaf::data::{cut_tiles, normalize, plan_tiles, stitch, LabelMap, Raster};
use logocaf::fifm::{departition_regions, partition_regions};
use logocaf::run::RunConfig;
use logocaf::tensor::{top_k_rows, Tape};
use logocaf::train::{compute_metrics, MetricsReport};
use logocaf::Tensor;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tiles_cover_every_pixel_and_stay_inside(h in 1usize..200, w in 1usize..200, t in 1usize..64, ov in 0.0f64..0.9) {
        prop_assume!(t <= h.min(w));
        let plan = plan_tiles(h, w, t, ov).unwrap();
        let mut hits = vec![0u32; h * w];
        for &(r, c) in &plan.origins {
            prop_assert!(r + t <= h && c + t <= w);
            for i in r..r + t {
                for j in c..c + t {
                    hits[i * w + j] += 1;
                }
            }
        }
        prop_assert!(hits.iter().all(|&n| n > 0));
        let mut sorted = plan.origins.clone();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), plan.origins.len());
    }

    #[test]
    fn stitching_cut_tiles_restores_constant_fields(h in 4usize..40, w in 4usize..40, t in 2usize..16, v in -5.0f64..5.0) {
        prop_assume!(t <= h.min(w));
        let plan = plan_tiles(h, w, t, 0.5).unwrap();
        let field = Tensor::full(&[h, w, 2], v);
        let back = stitch(&cut_tiles(&field, &plan).unwrap(), h, w).unwrap();
        prop_assert_eq!(back, field);
    }

    #[test]
    fn normalize_is_idempotent_and_bounded(h in 1usize..8, w in 1usize..8, b in 1usize..5, seed in any::<u64>()) {
        let data: Vec<f32> = randn(&[h * w * b], seed).data().iter().map(|&v| (3.0 * v + 1.0) as f32).collect();
        let r = Raster::new(h, w, b, data).unwrap();
        let once = normalize(&r);
        prop_assert!(once.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let twice = normalize(&once);
        for (a, b) in once.data.iter().zip(&twice.data) {
            prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn region_partition_round_trips(s in 1usize..4, a in 1usize..4, b in 1usize..4, c in 1usize..5, seed in any::<u64>()) {
        let (h, w) = (s * a, s * b);
        let f = randn(&[h, w, c], seed);
        let r = partition_regions(&f, s).unwrap();
        prop_assert_eq!(r.shape(), &[s * s, a * b, c][..]);
        prop_assert_eq!(departition_regions(&r, h, w, s).unwrap(), f);
    }

    #[test]
    fn metrics_match_direct_formulas(k in 1usize..7, cells in proptest::collection::vec(0u64..300, 49)) {
        let m: Vec<Vec<u64>> = (0..k).map(|i| cells[i * 7..i * 7 + k].to_vec()).collect();
        prop_assume!(m.iter().flatten().sum::<u64>() > 0);
        let r = MetricsReport::from_confusion(m.clone()).unwrap();
        let n: f64 = m.iter().flatten().sum::<u64>() as f64;
        let oa = (0..k).map(|i| m[i][i] as f64).sum::<f64>() / n;
        prop_assert!((r.oa - oa).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&r.kappa));
        prop_assert!(r.aa >= 0.0 && r.aa <= 1.0);
    }

    #[test]
    fn metrics_from_labels_count_every_scored_pixel(labels in proptest::collection::vec((-1i64..4, 0i64..4), 1..200)) {
        let (gt, pred): (Vec<i64>, Vec<i64>) = labels.into_iter().unzip();
        let scored = gt.iter().filter(|&&g| g != -1).count() as u64;
        match compute_metrics(&pred, &gt, 4, -1) {
            Ok(r) => prop_assert_eq!(r.confusion.iter().flatten().sum::<u64>(), scored),
            Err(_) => prop_assert_eq!(scored, 0),
        }
    }

    #[test]
    fn top_k_rows_are_descending_and_distinct(m in 1usize..5, n in 1usize..9, k in 1usize..9, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let s = randn(&[m, n], seed);
        let idx = top_k_rows(&s, k).unwrap();
        for i in 0..m {
            let row = idx.row(i);
            let vals: Vec<f64> = row.iter().map(|&j| s.data()[i * n + j]).collect();
            prop_assert!(vals.windows(2).all(|p| p[0] >= p[1]));
            let mut u = row.to_vec();
            u.sort_unstable();
            u.dedup();
            prop_assert_eq!(u.len(), k);
            // Nothing outside the selection beats the smallest selected score.
            let floor = vals[k - 1];
            prop_assert!((0..n).filter(|j| !row.contains(j)).all(|j| s.data()[i * n + j] <= floor));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[rows, cols], seed).map(|v| 10.0 * v + shift));
        let y = tape.softmax(x, 1).unwrap();
        for r in tape.value(y).data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn label_maps_round_trip_through_rasters(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let data: Vec<i64> = randn(&[h * w], seed).data().iter().map(|v| (v * 3.0).round() as i64).collect();
        let l = LabelMap::new(h, w, data).unwrap();
        prop_assert_eq!(LabelMap::from_raster(&l.to_raster()).unwrap(), l);
    }

    #[test]
    fn run_config_text_round_trips(lr in 1e-6f64..1.0, batch in 1usize..16, frac in 0.05f64..1.0, seed in any::<u64>()) {
        let mut c = RunConfig::default();
        c.train.lr = lr;
        c.train.batch_size = batch;
        c.train.train_fraction = frac;
        c.set_seed(seed);
        let back = RunConfig::parse(&c.to_text(), std::path::Path::new(".")).unwrap();
        prop_assert_eq!(back, c);
    }
}
