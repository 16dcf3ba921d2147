use proptest::prelude::*;

use super::*;
use crate::rng::stream;

fn noise_image(h: usize, w: usize, seed: u64) -> Image {
    use rand::Rng;
    let mut rng = stream(seed, Purpose::Synth, 0);
    let mut im = Image::new(h, w);
    im.data.iter_mut().for_each(|v| *v = rng.gen());
    im
}

fn names(n: usize) -> Vec<String> {
    BEHAVIORS[..n].iter().map(|s| s.to_string()).collect()
}

// ---------------------------------------------------------------- loading

#[test]
fn directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let split = DatasetSplit {
        class_names: names(9),
        samples: (0..90)
            .map(|i| Sample {
                image: noise_image(5, 7, i),
                label: i as usize / 10,
                source: "x".into(),
            })
            .collect(),
    };
    export_split(&split, dir.path()).unwrap();
    std::fs::write(dir.path().join("lying").join("notes.txt"), "ignored").unwrap();
    let a = load_directory_dataset(dir.path(), &names(9), "disk").unwrap();
    assert_eq!(a.len(), 90);
    assert_eq!(a.class_counts(), vec![10; 9]);
    assert_eq!(a.samples.iter().map(|s| s.label).max(), Some(8));
    // 8-bit storage quantizes pixels to multiples of 1/255.
    for (got, want) in a.samples.iter().zip(&split.samples) {
        assert_eq!((got.image.height, got.image.width), (5, 7));
        for (x, y) in got.image.data.iter().zip(&want.image.data) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
    let b = load_directory_dataset(dir.path(), &names(9), "disk").unwrap();
    assert_eq!(a, b);
}

#[test]
fn loader_errors_name_the_culprit() {
    let dir = tempfile::tempdir().unwrap();
    let classes = names(2);
    std::fs::create_dir_all(dir.path().join(&classes[0])).unwrap();
    match load_directory_dataset(dir.path(), &classes, "d") {
        Err(Error::Data(m)) => assert!(m.contains(&classes[0])),
        other => panic!("{other:?}"),
    }
    write_png(&dir.path().join(&classes[0]).join("a.png"), &noise_image(2, 2, 0)).unwrap();
    match load_directory_dataset(dir.path(), &classes, "d") {
        Err(Error::Io { path, .. }) => assert!(path.ends_with(&classes[1])),
        other => panic!("{other:?}"),
    }
    std::fs::create_dir_all(dir.path().join(&classes[1])).unwrap();
    let bad = dir.path().join(&classes[1]).join("b.png");
    std::fs::write(&bad, b"not a png").unwrap();
    match load_directory_dataset(dir.path(), &classes, "d") {
        Err(Error::Image { path, .. }) => assert_eq!(path, bad),
        other => panic!("{other:?}"),
    }
}

#[test]
fn ppm_formats() {
    let dir = tempfile::tempdir().unwrap();
    let im = noise_image(3, 4, 1);
    let p8 = dir.path().join("a.ppm");
    write_ppm(&p8, &im).unwrap();
    let back = read_image(&p8).unwrap();
    assert!(back.data.iter().zip(&im.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));

    let p16 = dir.path().join("b.ppm");
    let mut bytes = b"P6\n# comment\n1 1\n65535\n".to_vec();
    bytes.extend_from_slice(&[0xFF, 0xFF, 0x00, 0x00, 0x80, 0x00]);
    std::fs::write(&p16, bytes).unwrap();
    let px = read_image(&p16).unwrap().get(0, 0);
    assert_eq!(px[0], 1.0);
    assert_eq!(px[1], 0.0);
    assert!((px[2] - 32768.0 / 65535.0).abs() < 1e-6);

    let p3 = dir.path().join("c.ppm");
    std::fs::write(&p3, b"P3\n1 1\n255\n0 0 0\n").unwrap();
    assert!(matches!(read_image(&p3), Err(Error::Image { .. })));
    let short = dir.path().join("d.ppm");
    std::fs::write(&short, b"P6\n2 2\n255\n\x00\x01").unwrap();
    assert!(matches!(read_image(&short), Err(Error::Image { .. })));
}

#[test]
fn grayscale_png_is_replicated() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.png");
    let file = std::fs::File::create(&path).unwrap();
    let mut enc = png::Encoder::new(file, 2, 1);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header().unwrap().write_image_data(&[0, 255]).unwrap();
    let im = read_image(&path).unwrap();
    assert_eq!(im.get(0, 0), [0.0; 3]);
    assert_eq!(im.get(0, 1), [1.0; 3]);
}

// ---------------------------------------------------------- normalization

#[test]
fn normalization_constants() {
    let im = Image::filled(2, 3, [0.485, 0.2, 0.9]);
    let t: Tensor<f64> = normalize(&im, IMAGENET_MEAN, IMAGENET_STD).unwrap();
    assert_eq!(t.shape(), &[3, 2, 3]);
    // f32 storage of 0.485 differs from the f64 constant by < 1e-8.
    assert!(t.data()[..6].iter().all(|v| v.abs() < 1e-7));
    let exact = Image::filled(1, 1, [0.5, 0.5, 0.5]);
    let t: Tensor<f64> = normalize(&exact, [0.5; 3], [0.25; 3]).unwrap();
    assert_eq!(t.data(), &[0.0, 0.0, 0.0]);
    assert!(matches!(normalize::<f64>(&im, IMAGENET_MEAN, [0.2, 0.0, 0.2]), Err(Error::Config(_))));
}

#[test]
fn denormalize_inverts_normalize() {
    let im = noise_image(4, 4, 2);
    let t: Tensor<f64> = normalize(&im, IMAGENET_MEAN, IMAGENET_STD).unwrap();
    let back = denormalize(&t, IMAGENET_MEAN, IMAGENET_STD).unwrap();
    for (a, b) in back.data.iter().zip(&im.data) {
        assert!((a - b).abs() <= 1e-7);
    }
}

// ------------------------------------------------------------ image ops

#[test]
fn colour_space_round_trip() {
    for seed in 0..50 {
        let im = noise_image(1, 1, seed);
        let p = im.get(0, 0);
        let q = hsv_to_rgb(rgb_to_hsv(p));
        assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-5), "{p:?} {q:?}");
    }
    assert_eq!(rgb_to_hsv([1.0, 0.0, 0.0]), [0.0, 1.0, 1.0]);
    assert_eq!(rgb_to_hsv([0.0, 0.0, 1.0])[0], 240.0);
}

#[test]
fn kernels_are_normalised() {
    for k in [3, 5] {
        let g = gaussian_kernel(k);
        assert!((g.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(g[k * k / 2] >= *g.iter().max_by(|a, b| a.total_cmp(b)).unwrap());
    }
    let m = motion_kernel(5, 0.0);
    assert!((m.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    assert_eq!(m[10..15], [0.2; 5]);
}

#[test]
fn identity_warps() {
    let im = noise_image(6, 5, 3);
    let same = im.affine(0.0, 1.0, 0.0, 0.0);
    assert!(same.data.iter().zip(&im.data).all(|(a, b)| (a - b).abs() < 1e-6));
    let quad = [(0.0, 0.0), (4.0, 0.0), (4.0, 5.0), (0.0, 5.0)];
    let same = im.perspective(quad);
    assert!(same.data.iter().zip(&im.data).all(|(a, b)| (a - b).abs() < 1e-5));
    assert_eq!(im.resize(6, 5), im);
    let flat = Image::filled(3, 3, [0.3, 0.6, 0.9]);
    assert!(flat.convolve(&gaussian_kernel(3), 3).data.iter().zip(&flat.data).all(|(a, b)| (a - b).abs() < 1e-6));
}

#[test]
fn resize_preserves_constant_images() {
    let im = Image::filled(10, 10, [0.25, 0.5, 0.75]);
    let r = im.resize(4, 7);
    assert_eq!((r.height, r.width), (4, 7));
    assert!(r.data.chunks(3).all(|p| p == [0.25, 0.5, 0.75]));
}

// ----------------------------------------------------------- augmentation

#[test]
fn zero_probabilities_leave_only_resize() {
    let im = noise_image(12, 12, 4);
    let cfg = AugmentConfig::resize_only(8);
    let mut rng = stream(0, Purpose::Augment, 0);
    assert_eq!(augment(&im, &cfg, &mut rng), im.resize(8, 8));
}

#[test]
fn hflip_is_an_involution() {
    let im = noise_image(6, 6, 5);
    assert_eq!(im.hflip().hflip(), im);
    assert_ne!(im.hflip(), im);
    let cfg = AugmentConfig {
        hflip_p: 1.0,
        ..AugmentConfig::resize_only(6)
    };
    let mut rng = stream(0, Purpose::Augment, 0);
    let once = augment(&augment(&im, &cfg, &mut rng), &cfg, &mut rng);
    assert_eq!(once.data.len(), im.data.len());
    assert_eq!(once, im);
}

#[test]
fn every_transform_changes_the_image() {
    let im = noise_image(16, 16, 6);
    let base = AugmentConfig::resize_only(16);
    let variants = [
        AugmentConfig { hflip_p: 1.0, ..base.clone() },
        AugmentConfig { rotate_p: 1.0, ..base.clone() },
        AugmentConfig { shift_scale_rotate_p: 1.0, ..base.clone() },
        AugmentConfig { perspective_p: 1.0, ..base.clone() },
        AugmentConfig { color_p: 1.0, ..base.clone() },
        AugmentConfig { noise_p: 1.0, ..base.clone() },
        AugmentConfig { dropout_p: 1.0, ..base.clone() },
    ];
    for (i, cfg) in variants.iter().enumerate() {
        for seed in 0..6 {
            let out = augment(&im, cfg, &mut stream(seed, Purpose::Augment, i as u64));
            assert_ne!(out, im, "transform {i}, seed {seed}");
            assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn default_pipeline_matches_reference_table() {
    let c = AugmentConfig::default();
    assert_eq!((c.hflip_p, c.rotate_p, c.shift_scale_rotate_p, c.perspective_p), (0.5, 0.5, 0.5, 0.3));
    assert_eq!((c.color_p, c.noise_p, c.dropout_p), (0.8, 0.3, 0.2));
    assert_eq!((c.rotate_limit, c.shift_limit, c.scale_range), (15.0, 0.1, (0.8, 1.2)));
    assert_eq!(c.perspective_scale, (0.05, 0.10));
    assert_eq!((c.hsv_shift, c.jitter), ((10.0, 20.0, 20.0), (0.2, 0.2, 0.2, 0.1)));
    assert_eq!((c.noise_var, c.blur_kernel, c.motion_kernel), ((10.0, 50.0), (3, 5), 5));
    assert_eq!((c.max_holes, c.max_hole_frac, c.resize), (8, 0.1, 224));
    assert_eq!((c.mean, c.std), (IMAGENET_MEAN, IMAGENET_STD));
    c.validate().unwrap();
    let bad = AugmentConfig { color_p: 1.5, ..c };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn augmented_pixels_stay_in_unit_range(seed in any::<u64>(), size in 6usize..20) {
        let im = noise_image(size, size + 3, seed);
        let cfg = AugmentConfig::with_resize(12);
        let out = augment(&im, &cfg, &mut stream(seed, Purpose::Augment, 1));
        prop_assert_eq!((out.height, out.width), (12, 12));
        prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

// -------------------------------------------------------------- expansion

fn tiny_split(n: usize) -> DatasetSplit {
    DatasetSplit {
        class_names: names(9),
        samples: (0..n)
            .map(|i| Sample {
                image: noise_image(8, 8, i as u64),
                label: i % 9,
                source: "s".into(),
            })
            .collect(),
    }
}

#[test]
fn expansion_count_identity() {
    let split = tiny_split(2160);
    let cfg = AugmentConfig::with_resize(8);
    let out = expand_training_set(&split, &cfg, 3, &SeedTree::new(42)).unwrap();
    assert_eq!(out.len(), 6480);
    for (k, s) in out.samples.iter().enumerate() {
        assert_eq!(s.label, split.samples[k / 3].label);
    }
    let single = expand_training_set(&split, &cfg, 1, &SeedTree::new(42)).unwrap();
    assert_eq!(single.len(), 2160);
    assert!(matches!(expand_training_set(&split, &cfg, 0, &SeedTree::new(42)), Err(Error::Config(_))));
}

#[test]
fn expansion_is_deterministic_across_thread_counts() {
    let split = tiny_split(40);
    let cfg = AugmentConfig::with_resize(8);
    let seeds = SeedTree::new(9);
    let parallel = expand_training_set(&split, &cfg, 3, &seeds).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let serial = pool.install(|| expand_training_set(&split, &cfg, 3, &seeds).unwrap());
    assert_eq!(parallel, serial);
    // Each variant can be rebuilt on its own from its key.
    let mut rng = seeds.stream2(Purpose::Augment, 7, 2);
    assert_eq!(augment(&split.samples[7].image, &cfg, &mut rng), parallel.samples[7 * 3 + 2].image);
    let other = expand_training_set(&split, &cfg, 3, &SeedTree::new(10)).unwrap();
    assert_ne!(parallel, other);
}

// -------------------------------------------------------------- synthetic

#[test]
fn synthetic_default_counts() {
    let spec = SyntheticSpec::default();
    let ds = synthesize_dataset(&spec, 42).unwrap();
    assert_eq!(ds.train.len(), 432);
    assert_eq!(ds.val.len(), 108);
    assert_eq!(ds.train.class_counts(), vec![48; 9]);
    let test = ds.test.class_counts();
    let total: usize = test.iter().sum();
    assert!(total >= 10_800, "{total}");
    let (max, min) = (*test.iter().max().unwrap(), *test.iter().min().unwrap());
    assert!(max as f64 / min as f64 >= 20.0, "{max}:{min}");
    assert!(total as f64 / ds.train.len() as f64 >= 25.0);
    assert!(ds.test.samples.iter().all(|s| s.source == if s.label < 6 { "synthA" } else { "synthB" }));
}

#[test]
fn synthetic_is_deterministic_and_varied() {
    let spec = SyntheticSpec::default().scaled_test(50);
    let a = synthesize_dataset(&spec, 1).unwrap();
    let b = synthesize_dataset(&spec, 1).unwrap();
    let c = synthesize_dataset(&spec, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.train, c.train);
    for class in 0..9 {
        let imgs: Vec<&Image> = a.train.samples.iter().filter(|s| s.label == class).map(|s| &s.image).collect();
        assert!(imgs.windows(2).any(|w| w[0] != w[1]), "class {class}");
        assert!(imgs.iter().all(|im| im.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }
}

#[test]
fn synthetic_spec_validation() {
    let bad = SyntheticSpec {
        test_counts: vec![1; 3],
        ..SyntheticSpec::default()
    };
    assert!(matches!(synthesize_dataset(&bad, 0), Err(Error::Config(_))));
    let too_many = SyntheticSpec {
        num_classes: 10,
        ..SyntheticSpec::default()
    };
    assert!(too_many.validate().is_err());
}

#[test]
fn tensor_sets_batch_in_order() {
    let split = tiny_split(5);
    let set: TensorSet<f64> = TensorSet::from_split(&split, 4, IMAGENET_MEAN, IMAGENET_STD).unwrap();
    assert_eq!(set.images.shape(), &[5, 3, 4, 4]);
    let b = set.gather(&[3, 1]).unwrap();
    assert_eq!(b.shape(), &[2, 3, 4, 4]);
    assert_eq!(&b.data()[..48], &set.images.data()[3 * 48..4 * 48]);
    assert_eq!(set.labels_of(&[3, 1]), vec![3, 1]);
    assert!(matches!(set.gather(&[5]), Err(Error::Index(_))));
}
