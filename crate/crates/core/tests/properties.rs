//! Property tests over the core invariants.

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use proteus_core::autodiff::Tape;
use proteus_core::data::{epoch_batches, DatasetContainer};
use proteus_core::distill::{mask_count, sample_mask};
use proteus_core::eval::{fit_logreg, pca_rgb, symmetric_eigen, FeatureMatrix};
use proteus_core::optim::{lr_at, Schedule};
use proteus_core::vit::{patchify, read_checkpoint, select_layers, unpatchify, write_checkpoint, Checkpoint, ViTConfig};
use proteus_core::{ParamSet, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn container() -> impl Strategy<Value = DatasetContainer> {
    (1usize..4, 1usize..6, 1usize..6, 1usize..5, any::<bool>(), 1u16..7, any::<u64>()).prop_map(
        |(c, h, w, n, labelled, k, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pixels: Vec<u8> = (0..n * c * h * w).map(|_| rand::Rng::random(&mut rng)).collect();
            let labels = labelled.then(|| (0..n).map(|i| (i as u16 * 7 + seed as u16) % k).collect());
            DatasetContainer::new(c, h, w, pixels, labels, k, "prop").unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pxds_round_trip_is_bitwise(ds in container()) {
        let bytes = ds.to_bytes();
        let back = DatasetContainer::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.pixels(), ds.pixels());
        prop_assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn prtc_round_trip_is_bitwise(bits in prop::collection::vec(any::<u32>(), 2..40), split in 1usize..40) {
        // Any finite f32 bit pattern, including subnormals and negative zero.
        let vals: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).map(|v| if v.is_finite() { v } else { -0.0 }).collect();
        let cut = split.min(vals.len() - 1);
        let mut params = ParamSet::new();
        params.insert("a", Tensor::new(vec![cut], vals[..cut].to_vec()).unwrap());
        params.insert("b.weight", Tensor::new(vec![1, vals.len() - cut], vals[cut..].to_vec()).unwrap());
        let ck = Checkpoint { config: ViTConfig::new(8, 4, 1, 16, 2, 2), params, opt_state: None };
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ck).unwrap();
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        for (name, t) in ck.params.iter() {
            let got: Vec<u32> = back.params.get(name).unwrap().data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn mask_counts_respect_bounds(
        batch in 1usize..20,
        n in 2usize..65,
        lo in 0.01f64..0.9,
        width in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let hi = (lo + width).min(0.99);
        let m = sample_mask(batch, n, [lo, hi], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (min_k, max_k) = ((lo * n as f64).ceil() as usize, (hi * n as f64).floor() as usize);
        for b in 0..batch {
            let k = m.count(b);
            prop_assert!(k >= 1 && k < n);
            if min_k <= max_k && min_k >= 1 && max_k < n {
                prop_assert!(k >= min_k && k <= max_k, "k={} not in [{}, {}]", k, min_k, max_k);
            }
        }
    }

    #[test]
    fn mask_count_is_clamped(r in 0.0f64..1.0, n in 2usize..200) {
        let k = mask_count(r, n, [0.1, 0.5]);
        prop_assert!(k >= 1 && k < n);
    }

    #[test]
    fn layer_selection_is_increasing_and_keeps_ends(t in 1usize..24, s_frac in 0.0f64..1.0) {
        let s = ((t as f64 * s_frac).ceil() as usize).clamp(1, t);
        let l = select_layers(t, s);
        prop_assert_eq!(l.len(), s);
        prop_assert!(l.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(l.iter().all(|&i| i < t));
        if s >= 2 {
            prop_assert_eq!(l[0], 0);
            prop_assert_eq!(l[s - 1], t - 1);
        }
    }

    #[test]
    fn epochs_partition_the_indices(n in 1usize..300, bs in 1usize..64, seed in any::<u64>(), epoch in 0u64..5) {
        let b = epoch_batches(n, bs, seed, epoch);
        prop_assert!(b.iter().all(|x| !x.is_empty() && x.len() <= bs));
        let mut all = b.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn schedule_stays_between_zero_and_base(warm in 0u64..50, extra in 1u64..500, step_frac in 0.0f64..=1.0) {
        let s = Schedule { warmup_steps: warm, total_steps: warm + extra, ..Schedule::default() };
        let step = (step_frac * s.total_steps as f64) as u64;
        let lr = lr_at(step, &s).unwrap();
        prop_assert!((0.0..=s.base_lr).contains(&lr));
        if step >= warm {
            prop_assert!(lr >= s.min_lr);
            if step + 1 <= s.total_steps {
                prop_assert!(lr_at(step + 1, &s).unwrap() <= lr + 1e-15);
            }
        }
    }

    #[test]
    fn patchify_inverts(b in 1usize..3, c in 1usize..4, grid in 1usize..4, p in 1usize..5, seed in any::<u64>()) {
        let s = grid * p;
        let x = Tensor::<f64>::randn(&[b, c, s, s], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let y = patchify(&x, p).unwrap();
        prop_assert_eq!(y.shape(), &[b, grid * grid, c * p * p]);
        prop_assert_eq!(unpatchify(&y, p, c).unwrap(), x);
    }

    #[test]
    fn jacobi_matches_a_dense_eigensolver(n in 1usize..12, seed in any::<u64>()) {
        let r = Tensor::<f64>::randn(&[n, n], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let a: Vec<f64> = (0..n * n).map(|k| { let (i, j) = (k / n, k % n); r.data()[i * n + j] + r.data()[j * n + i] }).collect();
        let (vals, vecs) = symmetric_eigen(&a, n);
        let mut want: Vec<f64> = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &a)).eigenvalues.iter().copied().collect();
        want.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (g, w) in vals.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-9, "{} vs {}", g, w);
        }
        // A v = λ v for every returned pair.
        for (lam, v) in vals.iter().zip(&vecs) {
            for i in 0..n {
                let av: f64 = (0..n).map(|j| a[i * n + j] * v[j]).sum();
                prop_assert!((av - lam * v[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let z = Tensor::<f64>::randn(&[rows, cols], 5.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut tape = Tape::no_grad();
        let v = tape.constant(z);
        let p = tape.softmax(v).unwrap();
        for r in tape.value(p).data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&x| x >= 0.0));
        }
    }
}

fn features(rows: usize, dims: usize, classes: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Tensor::<f64>::randn(&[rows, dims], 1.0, &mut rng);
    let labels: Vec<usize> = (0..rows).map(|i| i % classes).collect();
    let data = noise
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + if i % dims == labels[i / dims] % dims { 1.5 } else { 0.0 })
        .collect();
    FeatureMatrix::new(rows, dims, data, labels, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn probe_fit_ignores_row_order(seed in any::<u64>(), l2_exp in -4i32..1) {
        let fm = features(40, 5, 3, seed);
        let mut perm: Vec<usize> = (0..fm.rows).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let l2 = 10f64.powi(l2_exp);
        let a = fit_logreg(&fm, 3, l2, 500).unwrap();
        let b = fit_logreg(&fm.select(&perm), 3, l2, 500).unwrap();
        for (x, y) in a.model.weight.iter().chain(&a.model.bias).zip(b.model.weight.iter().chain(&b.model.bias)) {
            prop_assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
        }
    }

    #[test]
    fn pca_variance_ignores_shift_and_row_order(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let (n, d) = (24, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        let data: Vec<f64> = base.data().iter().enumerate().map(|(i, v)| v * (1.0 + (i % d) as f64)).collect();
        let x = Tensor::new(vec![n, d], data.clone()).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let moved: Vec<f64> = perm.iter().flat_map(|&r| data[r * d..(r + 1) * d].iter().map(|v| v + shift)).collect();
        let y = Tensor::new(vec![n, d], moved).unwrap();
        let (a, b) = (pca_rgb(&x).unwrap(), pca_rgb(&y).unwrap());
        for i in 0..3 {
            prop_assert!((a.explained_variance[i] - b.explained_variance[i]).abs() < 1e-8 * a.explained_variance[0]);
            let dot: f64 = a.components[i].iter().zip(&b.components[i]).map(|(p, q)| p * q).sum();
            prop_assert!((dot.abs() - 1.0).abs() < 1e-6);
        }
        // Same colours, permuted with the rows.
        for (j, &r) in perm.iter().enumerate() {
            prop_assert_eq!(a.rgb[r], b.rgb[j]);
        }
    }
}
