//! Property tests for the invariants each module promises.

use anc_core::autodiff::ops;
use anc_core::conv4d::{conv4d_naive, Correlation4D, Kernel4D, SWAP_5D};
use anc_core::eval::{pck, PckConfig, Reference};
use anc_core::features::{correlation_map, l2_normalize, synth_pair, FeatureMap, SynthSpec, Transform};
use anc_core::losses::{bilinear_weights, gt_probability_map, LossConfig};
use anc_core::matching::{argmax_match, mutual_nn_filter, softmax_probabilities, Direction};
use anc_core::rng::Rng;
use anc_core::self_similarity::self_sim_base;
use anc_core::tensor::DenseTensor;
use anc_core::training::epoch_order;
use proptest::prelude::*;

const STRIDE: usize = 16;

fn unit_map(seed: u64, h: usize, w: usize, d: usize) -> FeatureMap {
    let t = Rng::new(seed).normal(&[h, w, d], 0.0, 1.0).unwrap();
    l2_normalize(&FeatureMap::new(t, STRIDE).unwrap()).unwrap()
}

fn volume(seed: u64, d: [usize; 4], scale: f64) -> Correlation4D {
    Correlation4D::new(Rng::new(seed).normal(&[1, d[0], d[1], d[2], d[3]], 0.0, scale).unwrap()).unwrap()
}

fn extent() -> impl Strategy<Value = usize> {
    1usize..=5
}

fn dims4() -> impl Strategy<Value = [usize; 4]> {
    [extent(), extent(), extent(), extent()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_cells_are_unit_or_zero(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, d in 1usize..9) {
        let mut data = Rng::new(seed).normal(&[h, w, d], 0.0, 3.0).unwrap().into_data();
        // zero out the first cell so the zero policy is exercised
        data[..d].iter_mut().for_each(|v| *v = 0.0);
        let f = l2_normalize(&FeatureMap::new(DenseTensor::new(&[h, w, d], data).unwrap(), STRIDE).unwrap()).unwrap();
        for cell in f.values().data().chunks(d) {
            let n = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-12, "norm {n}");
        }
    }

    #[test]
    fn correlation_is_bounded_and_swaps_exactly(seed in any::<u64>(), hs in 1usize..5, ws in 1usize..5, ht in 1usize..5, wt in 1usize..5, d in 1usize..9) {
        let a = unit_map(seed, hs, ws, d);
        let b = unit_map(seed ^ 0x5555, ht, wt, d);
        let ab = correlation_map(&a, &b).unwrap();
        let ba = correlation_map(&b, &a).unwrap();
        prop_assert_eq!(ab.values(), &ba.values().permute(&SWAP_5D).unwrap());
        prop_assert!(ab.values().data().iter().all(|c| c.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn noise_free_correlation_recovers_the_transform(seed in any::<u64>(), pick in 0usize..4, dx in -3i64..=3, dy in -3i64..=3) {
        let transform = [Transform::Translate { dx, dy }, Transform::FlipH, Transform::FlipV, Transform::ScaleUp][pick];
        let (h, w) = (7, 6);
        let spec = SynthSpec { height: h, width: w, depth: 32, stride: STRIDE, transform, n_keypoints: 1, noise_std: 0.0 };
        let Ok(p) = synth_pair(&mut Rng::new(seed), &spec) else { return Ok(()) };
        let v = softmax_probabilities(&correlation_map(&p.source, &p.target).unwrap(), Direction::SourceToTarget).unwrap();
        for i in 0..h {
            for j in 0..w {
                let (r, c) = transform.apply_grid(i as f64, j as f64, h, w);
                if r < 0.0 || c < 0.0 || r > (h - 1) as f64 || c > (w - 1) as f64 {
                    continue;
                }
                // a magnified cell covers several target cells; any of them
                // is a correct match
                let (k, l) = argmax_match(&v, i, j).unwrap();
                prop_assert!((k as f64 - r).abs() <= 0.5 && (l as f64 - c).abs() <= 0.5, "{transform}: ({i},{j}) -> ({k},{l}), want ({r},{c})");
            }
        }
    }

    #[test]
    fn synthetic_keypoints_follow_the_transform(seed in any::<u64>(), dx in -3i64..=3, dy in -3i64..=3, n in 1usize..20) {
        let transform = Transform::Translate { dx, dy };
        let spec = SynthSpec { height: 6, width: 8, depth: 4, stride: STRIDE, transform, n_keypoints: n, noise_std: 0.5 };
        let p = synth_pair(&mut Rng::new(seed), &spec).unwrap();
        let (wp, hp) = ((8 * STRIDE) as f64, (6 * STRIDE) as f64);
        for k in &p.keypoints {
            prop_assert_eq!(k.target, [k.source[0] + (dx * STRIDE as i64) as f64, k.source[1] + (dy * STRIDE as i64) as f64]);
            for q in [k.source, k.target] {
                prop_assert!(q[0] >= 0.0 && q[0] < wp && q[1] >= 0.0 && q[1] < hp);
            }
        }
    }

    #[test]
    fn self_similarity_is_bounded_and_local(seed in any::<u64>(), h in 3usize..7, w in 3usize..7, d in 1usize..6) {
        let f = unit_map(seed, h, w, d);
        let s = self_sim_base(&f, 3).unwrap();
        prop_assert!(s.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        // centre channel is each cell's similarity with itself
        for cell in s.data().chunks(9) {
            prop_assert!((cell[4] - 1.0).abs() <= 1e-12);
        }
        // dropping the top row leaves cells two rows down unchanged
        let cropped = FeatureMap::new(DenseTensor::new(&[h - 1, w, d], f.values().data()[w * d..].to_vec()).unwrap(), STRIDE).unwrap();
        let sc = self_sim_base(&cropped, 3).unwrap();
        for i in 1..h - 1 {
            for j in 0..w {
                prop_assert_eq!(&sc.data()[(i * w + j) * 9..][..9], &s.data()[((i + 1) * w + j) * 9..][..9]);
            }
        }
    }

    #[test]
    fn conv4d_is_linear(seed in any::<u64>(), vol in dims4(), shape in prop::sample::select(vec![[3, 3, 3, 3], [3, 3, 5, 5], [1, 1, 3, 3]]), a in -3.0f64..3.0) {
        let taps: usize = shape.iter().product();
        let mut rng = Rng::new(seed);
        let w = rng.normal(&[2, shape[0], shape[1], shape[2], shape[3]], 0.0, 1.0).unwrap();
        let k = Kernel4D::new(1, 2, shape, w, DenseTensor::zeros(&[2]).unwrap()).unwrap();
        let x = rng.normal(&[1, vol[0], vol[1], vol[2], vol[3]], 0.0, 1.0).unwrap();
        let y = rng.normal(&[1, vol[0], vol[1], vol[2], vol[3]], 0.0, 1.0).unwrap();
        let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + q).collect();
        let conv = |t: DenseTensor| conv4d_naive(&Correlation4D::new(t).unwrap(), &k).unwrap().into_values().into_data();
        let lhs = conv(DenseTensor::new(x.dims(), mix).unwrap());
        let (cx, cy) = (conv(x), conv(y));
        for (n, l) in lhs.iter().enumerate() {
            prop_assert!((l - (a * cx[n] + cy[n])).abs() <= 1e-10 * taps as f64);
        }
    }

    #[test]
    fn softmax_is_normalized_and_shift_invariant(seed in any::<u64>(), d in dims4(), scale in 0.1f64..500.0, shift in -50.0f64..50.0) {
        let c = volume(seed, d, scale);
        for dir in [Direction::SourceToTarget, Direction::TargetToSource] {
            let v = softmax_probabilities(&c, dir).unwrap();
            prop_assert!(v.values().data().iter().all(|p| (0.0..=1.0).contains(p)));
            let (qh, qw) = v.query_grid();
            for a in 0..qh {
                for b in 0..qw {
                    prop_assert!((v.slice(a, b).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
        }
        let cols = d[2] * d[3];
        let x = c.values().data();
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let (p, q) = (ops::softmax_rows(x, cols), ops::softmax_rows(&shifted, cols));
        for (u, v) in p.iter().zip(&q) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn mutual_filter_shrinks_nonnegative_scores(seed in any::<u64>(), d in dims4()) {
        let c = Correlation4D::new(Rng::new(seed).uniform(&[1, d[0], d[1], d[2], d[3]], 0.0, 1.0).unwrap()).unwrap();
        let f = mutual_nn_filter(&c).unwrap();
        let (x, y) = (c.values().data(), f.values().data());
        for (a, b) in x.iter().zip(y) {
            prop_assert!(*b >= 0.0 && *b <= *a);
        }
        // the global maximum is mutual, so it survives unchanged
        let top = (0..x.len()).max_by(|&i, &j| x[i].total_cmp(&x[j])).unwrap();
        prop_assert_eq!(y[top], x[top]);
    }

    #[test]
    fn argmax_matches_raw_scores_at_any_temperature(seed in any::<u64>(), d in dims4(), t in 0.1f64..10.0) {
        let c = volume(seed, d, 1.0);
        let hot = Correlation4D::new(c.values().map(|v| v * t)).unwrap();
        let (v, w) = (
            softmax_probabilities(&c, Direction::SourceToTarget).unwrap(),
            softmax_probabilities(&hot, Direction::SourceToTarget).unwrap(),
        );
        for a in 0..d[0] {
            for b in 0..d[1] {
                let row = &c.values().data()[(a * d[1] + b) * d[2] * d[3]..][..d[2] * d[3]];
                let best = (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j]).then(j.cmp(&i))).unwrap();
                let want = (best / d[3], best % d[3]);
                prop_assert_eq!(argmax_match(&v, a, b).unwrap(), want);
                prop_assert_eq!(argmax_match(&w, a, b).unwrap(), want);
            }
        }
    }

    #[test]
    fn ground_truth_maps_are_unit_and_exact(x in 0.0f64..160.0, y in 0.0f64..112.0, h in 1usize..8, w in 1usize..11, kernel in prop::sample::select(vec![0usize, 3, 5, 7])) {
        let g = gt_probability_map([x, y], h, w, STRIDE, &LossConfig::with_kernel(0.001, kernel)).unwrap();
        prop_assert!(g.data().iter().all(|v| *v >= 0.0));
        prop_assert!((g.data().iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12);
        let grid = |p: f64| anc_core::features::grid_coord(p, STRIDE);
        let weights = bilinear_weights(grid(y), grid(x), h, w);
        prop_assert!(weights.iter().all(|(_, t)| *t >= 0.0));
        prop_assert_eq!(weights.iter().map(|(_, t)| t).sum::<f64>(), 1.0);
        let mut map = vec![0.0; h * w];
        for ((r, c), t) in weights {
            map[r * w + c] += t;
        }
        prop_assert_eq!(map.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn pck_is_scale_consistent_and_monotone(seed in any::<u64>(), n in 1usize..20, k in -3i32..4, a1 in 0.01f64..0.5, a2 in 0.01f64..0.5) {
        let mut rng = Rng::new(seed);
        let pts = |rng: &mut Rng| -> Vec<[f64; 2]> { (0..n).map(|_| [rng.next_f64() * 100.0, rng.next_f64() * 80.0]).collect() };
        let (pred, gt) = (pts(&mut rng), pts(&mut rng));
        let extent = [100.0, 80.0];
        let cfg = |alpha| PckConfig { alpha, reference: Reference::Image };
        let base = pck(&pred, &gt, extent, &cfg(a1)).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        // powers of two scale every distance and threshold exactly
        let s = 2f64.powi(k);
        let scaled = |v: &[[f64; 2]]| v.iter().map(|p| [p[0] * s, p[1] * s]).collect::<Vec<_>>();
        prop_assert_eq!(pck(&scaled(&pred), &scaled(&gt), [extent[0] * s, extent[1] * s], &cfg(a1)).unwrap(), base);
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        prop_assert!(pck(&pred, &gt, extent, &cfg(lo)).unwrap() <= pck(&pred, &gt, extent, &cfg(hi)).unwrap());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation(seed in any::<u64>(), epoch in 0usize..50, n in 1usize..100) {
        let order = epoch_order(seed, epoch, n);
        prop_assert_eq!(&order, &epoch_order(seed, epoch, n));
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }
}
