use memdgm::analysis::{class_correlations, encode_pgm, image_grid, read_pgm, slot_preferences};
use memdgm::autodiff::{ops, Distribution, Graph, RngStream, Tensor};
use memdgm::checkpoint::Checkpoint;
use memdgm::data::{binarize, encode_idx_images, parse_idx_images, split, Dataset, IdxImages, SplitSpec};
use memdgm::evaluation::{make_mask, MaskKind};
use memdgm::layers::{AttentionKind, Mode};
use memdgm::model::{decode, ArchConfig};
use memdgm::training::{init_model, lr_at, TrainConfig};
use proptest::prelude::*;

fn small_arch(attention: AttentionKind) -> ArchConfig {
    ArchConfig { input_dim: 12, widths: vec![7, 5], latent_dim: 3, slots: vec![4, 3], lambda: vec![0.1, 0.1], attention, ..ArchConfig::mnist_mem() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logsumexp_is_shift_invariant(xs in prop::collection::vec(-50.0f64..50.0, 1..20), shift in -500.0f64..500.0) {
        let a = Tensor::<f64>::new(&[1, xs.len()], xs.clone()).unwrap();
        let b = a.map(|v| v + shift);
        let la = ops::logsumexp(&a, 1).unwrap().item();
        let lb = ops::logsumexp(&b, 1).unwrap().item();
        prop_assert!((lb - la - shift).abs() <= 1e-9 * (1.0 + shift.abs()));
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(la >= max - 1e-12 && la <= max + (xs.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let x: Tensor<f64> = RngStream::new(seed, "x").draw(Distribution::Gaussian, &[rows, cols]).unwrap();
        let s = ops::softmax(&x.map(|v| v * 30.0), 1).unwrap();
        for r in 0..rows {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rect_and_half_masks_have_exact_counts(side in 1usize..=28, h in 1usize..=30, w in 1usize..=30, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "mask");
        let half = make_mask(MaskKind::Half, h, w, &mut rng).unwrap();
        prop_assert_eq!(half.count(), h * (w / 2));
        let rect = make_mask(MaskKind::Rect(side), h, w, &mut rng);
        if side <= h.min(w) {
            prop_assert_eq!(rect.unwrap().count(), side * side);
        } else {
            prop_assert!(rect.is_err());
        }
    }

    #[test]
    fn idx_round_trip(count in 1usize..5, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "idx");
        let pixels: Vec<u8> = (0..count * rows * cols).map(|_| rng.below(256) as u8).collect();
        let img = IdxImages { count, rows, cols, pixels };
        let bytes = encode_idx_images(&img);
        let back = parse_idx_images(&bytes).unwrap();
        prop_assert_eq!(&encode_idx_images(&back), &bytes);
        prop_assert!(parse_idx_images(&encode_idx_images(&img)[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn pgm_round_trip(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, "pgm");
        let px: Vec<u8> = (0..w * h).map(|_| rng.below(256) as u8).collect();
        let (rw, rh, rp) = read_pgm(&encode_pgm(w, h, &px)).unwrap();
        prop_assert_eq!((rw, rh), (w, h));
        prop_assert_eq!(rp, px);
    }

    #[test]
    fn grid_dimensions(rows in 1usize..5, cols in 1usize..5, n in 0usize..20) {
        let n = n.min(rows * cols);
        let images = vec![vec![0.5; 6]; n];
        let (w, h, _) = read_pgm(&image_grid(&images, rows, cols, 2, 3).unwrap()).unwrap();
        prop_assert_eq!((w, h), (cols * 3 + cols - 1, rows * 2 + rows - 1));
    }

    #[test]
    fn binarize_is_binary_and_respects_extremes(seed in any::<u64>(), n in 1usize..200) {
        let mut rng = RngStream::new(seed, "p");
        let p: Tensor<f32> = Tensor::from_fn(&[1, n], |i| match i % 3 { 0 => 0.0, 1 => 1.0, _ => rng.uniform01() as f32 });
        let b = binarize(&p, &mut RngStream::new(seed, "b")).unwrap();
        for (pi, bi) in p.data().iter().zip(b.data()) {
            prop_assert!(*bi == 0.0 || *bi == 1.0);
            if *pi == 0.0 { prop_assert_eq!(*bi, 0.0); }
            if *pi == 1.0 { prop_assert_eq!(*bi, 1.0); }
        }
    }

    #[test]
    fn split_is_disjoint_and_stable(n in 3usize..60, seed in any::<u64>()) {
        let images = Tensor::<f32>::from_fn(&[n, 1], |i| i as f32 / n as f32);
        let data = Dataset::new("d", images, None, 1, 1).unwrap();
        let spec = SplitSpec::new(&[("a", n / 3), ("b", n / 3), ("c", n - 2 * (n / 3))], seed);
        let parts = split(&data, &spec).unwrap();
        let mut seen: Vec<u32> = parts.iter().flat_map(|p| p.images.data().iter().map(|v| (v * n as f32).round() as u32)).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n as u32).collect::<Vec<_>>());
        let again = split(&data, &spec).unwrap();
        for (x, y) in parts.iter().zip(&again) {
            prop_assert_eq!(x.images.data(), y.images.data());
        }
    }

    #[test]
    fn learning_rate_is_non_increasing(e in 0usize..2998) {
        let cfg = TrainConfig::new(ArchConfig::mnist_vae());
        prop_assert!(lr_at(e + 1, &cfg).unwrap() <= lr_at(e, &cfg).unwrap());
    }

    #[test]
    fn attention_weights_are_in_range(seed in 0u64..1000, softmax in any::<bool>()) {
        let kind = if softmax { AttentionKind::Softmax } else { AttentionKind::Sigmoid };
        let nets = init_model::<f64>(&small_arch(kind), seed).unwrap();
        let z: Tensor<f64> = RngStream::new(seed, "z").draw(Distribution::Gaussian, &[4, 3]).unwrap();
        let mut g = Graph::new(&nets.params);
        let zv = g.input(z.map(|v| v * 3.0));
        let dec = decode(&mut g, &nets.model, zv, Mode::Eval, &[]).unwrap();
        for a in dec.attention.iter().flatten() {
            let t = g.value(*a);
            prop_assert!(t.data().iter().all(|&p| p > 0.0 && p < 1.0));
            if softmax {
                for r in 0..t.rows() {
                    prop_assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in 0u64..1000) {
        let nets = init_model::<f32>(&small_arch(AttentionKind::Sigmoid), seed).unwrap();
        let bytes = Checkpoint::from_nets(nets).to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn preference_rows_and_correlations() {
    let nets = init_model::<f64>(&small_arch(AttentionKind::Sigmoid), 3).unwrap();
    let x: Tensor<f64> = RngStream::new(0, "x").draw(Distribution::Uniform01, &[40, 12]).unwrap();
    let labels: Vec<u8> = (0..40).map(|i| (i % 4) as u8).collect();
    let prefs = slot_preferences(&nets, &x.map(|v| v.round()), &labels, &mut RngStream::new(0, "p")).unwrap();
    assert_eq!(prefs.len(), 2);
    for p in &prefs {
        for c in 0..p.classes {
            assert!((p.row(c).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let corr = class_correlations(p).unwrap();
        for i in 0..p.classes {
            assert!((corr.get(i, i) - 1.0).abs() < 1e-9);
            for j in 0..p.classes {
                assert_eq!(corr.get(i, j), corr.get(j, i));
            }
        }
    }
}
