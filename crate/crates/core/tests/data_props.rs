use hypercae::data::*;
use hypercae::tensor::{Dims4, Tensor4};
use proptest::prelude::*;

fn dataset(n: usize) -> LabeledDataset {
    let images = vec![Tensor4::zeros(Dims4::new(1, 1, 1, 1)).unwrap(); n];
    LabeledDataset::new(images, (0..n).map(|i| i % 2).collect(), class_names()).unwrap()
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

proptest! {
    #[test]
    fn folds_partition_with_spread_one(n in 6usize..400, seed in any::<u64>()) {
        let ds = split_folds(&dataset(n), seed);
        let sizes = ds.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let parts: usize = [Role::Train, Role::Val, Role::Test].iter().map(|&r| select(&ds, r).len()).sum();
        prop_assert_eq!(parts, n);
        for i in 0..n {
            let hits = [Role::Train, Role::Val, Role::Test].iter().filter(|r| r.contains(ds.fold[i])).count();
            prop_assert_eq!(hits, 1);
        }
    }

    #[test]
    fn grouped_folds_keep_groups_together(singles in 24usize..200, quads in 0usize..12, seed in any::<u64>()) {
        let mut ds = dataset(singles + 4 * quads);
        for q in 0..quads {
            for k in 0..4 {
                ds.group[singles + 4 * q + k] = singles + q;
            }
        }
        let ds = split_folds(&ds, seed);
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                if ds.group[i] == ds.group[j] {
                    prop_assert_eq!(ds.fold[i], ds.fold[j]);
                }
            }
        }
        let sizes = ds.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn normalize_is_affine_and_monotone(raw in prop::collection::vec(0.0f64..=255.0, 1..50)) {
        let t = normalize(&raw, 1, raw.len()).unwrap();
        for (a, &r) in t.data().iter().zip(&raw) {
            prop_assert!((a - (r / 127.5 - 1.0)).abs() < 1e-15);
        }
        for i in 0..raw.len() {
            for j in 0..raw.len() {
                if raw[i] < raw[j] {
                    prop_assert!(t.data()[i] < t.data()[j]);
                }
            }
        }
    }

    #[test]
    fn rotations_permute_pixels(n in 1usize..9, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor4::from_vec(Dims4::new(1, 1, n, n), (0..n * n).map(|_| rng.gen()).collect()).unwrap();
        let rots = rotate4(&img).unwrap();
        prop_assert_eq!(&rots[0], &img);
        for r in &rots {
            prop_assert_eq!(sorted(r.data()), sorted(img.data()));
        }
        prop_assert_eq!(rotate90(&rots[3]).unwrap(), img);
    }

    #[test]
    fn generator_keeps_its_disc_promise(seed in 0u64..1000, cmin in 1usize..3) {
        let spec = SynthSpec {
            image_size: 16,
            n_normal: 3,
            n_abnormal: 3,
            vacuole_count: (cmin, 3),
            seed,
            ..SynthSpec::default()
        };
        let (ds, layouts) = generate_synthetic_with_discs(&spec).unwrap();
        for (i, discs) in layouts.iter().enumerate() {
            if ds.labels[i] == 1 {
                prop_assert!(discs.len() >= cmin);
                for d in discs {
                    prop_assert_eq!(ds.images[i].get(0, 0, d.row, d.col), spec.vacuole_intensity);
                }
            }
        }
        prop_assert_eq!(ds, generate_synthetic(&spec).unwrap());
    }
}

#[test]
fn null_spec_gives_identical_class_statistics() {
    let spec = SynthSpec {
        n_normal: 200,
        n_abnormal: 50,
        vacuole_count: (0, 0),
        ..SynthSpec::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    let mean = |label| {
        let imgs: Vec<&Tensor4> = ds.images.iter().zip(&ds.labels).filter(|(_, &y)| y == label).map(|(t, _)| t).collect();
        imgs.iter().map(|t| t.data().iter().sum::<f64>()).sum::<f64>() / (imgs.len() * 32 * 32) as f64
    };
    assert!((mean(0) - mean(1)).abs() < 0.05);
}

#[test]
fn paper_ratio_counts() {
    let spec = SynthSpec::default();
    assert!((spec.n_normal as f64 / spec.n_abnormal as f64 - 8.49).abs() < 0.05);
    let ds = generate_synthetic(&spec).unwrap();
    assert_eq!(ds.len(), spec.n_normal + 4 * spec.n_abnormal);
}
