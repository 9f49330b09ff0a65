//! Dataset ingestion, control sets, energy tables and filter images.

mod common;

use lrrn::datasets::{
    energy_table, energy_table_with_controls, fit_gaussian_sampler, load_idx, load_split, mirror, ControlRow, Dataset,
    Provenance, GAUSSIAN_COLUMN, MIRRORED_COLUMN,
};
use lrrn::pgm::{encode_pgm, filter_grid};
use lrrn::training::{init_params, InitConfig};
use lrrn::{ConstraintKind, InferenceConfig, LrrnError, Matrix};

#[test]
fn mnist_training_file_header() {
    let d = load_split(&common::data_dir("mnist"), "train", None).unwrap();
    assert_eq!(d.len(), 60_000);
    assert_eq!(d.shape, (28, 28));
    assert_eq!(d.dim(), 784);
    assert_eq!(d.labels.as_ref().unwrap().len(), 60_000);
}

#[test]
fn loaded_pixels_and_labels_are_in_range() {
    for name in ["mnist", "fashion"] {
        for split in ["train", "t10k"] {
            let d = load_split(&common::data_dir(name), split, None).unwrap();
            assert!(d.images.iter().flatten().all(|p| (0.0..=1.0).contains(p)), "{name}/{split}");
            assert!(d.labels.as_ref().unwrap().iter().all(|&l| l <= 9), "{name}/{split}");
            assert_eq!(d.num_classes(), 10);
        }
    }
}

#[test]
fn label_file_passed_as_images_is_wrong_magic() {
    let dir = common::data_dir("mnist");
    let labels = dir.join("t10k-labels-idx1-ubyte");
    let err = load_idx(&labels, Some(&labels)).unwrap_err();
    assert!(matches!(err, LrrnError::WrongMagic { expected: 0x803, found: 0x801 }), "{err}");
    let images = dir.join("t10k-images-idx3-ubyte");
    let err = load_idx(&images, Some(&images)).unwrap_err();
    assert!(matches!(err, LrrnError::WrongMagic { expected: 0x801, found: 0x803 }), "{err}");
}

#[test]
fn lit_pixel_moves_to_mirrored_column() {
    let mut img = vec![0.0; 784];
    img[5 * 28 + 3] = 1.0;
    let d = Dataset::new(vec![img], Some(vec![7]), (28, 28), Provenance::Original("one".into())).unwrap();
    let m = mirror(&d);
    assert_eq!(m.images[0][5 * 28 + 24], 1.0);
    assert_eq!(m.images[0].iter().sum::<f64>(), 1.0);
    assert_eq!(m.labels, Some(vec![7]));
    assert_eq!(m.provenance, Provenance::Mirrored("one".into()));
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E[clamp(X, 0, 1)]` for `X ~ N(mu, s²)`.
fn clamped_normal_mean(mu: f64, s: f64) -> f64 {
    if s == 0.0 {
        return mu.clamp(0.0, 1.0);
    }
    let (a, b) = (-mu / s, (1.0 - mu) / s);
    mu * (normal_cdf(b) - normal_cdf(a)) + s * (normal_pdf(a) - normal_pdf(b)) + (1.0 - normal_cdf(b))
}

#[test]
fn gaussian_sample_mean_matches_clamped_normal_mean() {
    // 16 pixels with means spread over the interval, including ones where
    // clamping shifts the mean noticeably.
    let images: Vec<Vec<f64>> = (0..400)
        .map(|i| {
            (0..16)
                .map(|j| {
                    let centre = j as f64 / 15.0;
                    let wiggle = (((i * 7 + j * 13) % 11) as f64 - 5.0) / 5.0;
                    (centre + 0.15 * wiggle).clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect();
    let d = Dataset::new(images, None, (4, 4), Provenance::Original("grid".into())).unwrap();
    let mut sampler = fit_gaussian_sampler(&d, 42).unwrap();
    let draws = sampler.sample_dataset(10_000);
    assert_eq!(draws.provenance, Provenance::GaussianFit("grid".into()));
    for j in 0..16 {
        let xs: Vec<f64> = draws.images.iter().map(|im| im[j]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let expected = clamped_normal_mean(sampler.mean[j], sampler.std[j]);
        assert!((mean - expected).abs() <= 3.0 * se, "pixel {j}: {mean} vs {expected} (se {se})");
        assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

#[test]
fn gaussian_fit_uses_population_moments() {
    let d =
        Dataset::new(vec![vec![0.0, 1.0], vec![1.0, 1.0]], None, (1, 2), Provenance::Original("two".into())).unwrap();
    let s = fit_gaussian_sampler(&d, 0).unwrap();
    assert_eq!(s.mean, vec![0.5, 1.0]);
    assert_eq!(s.std, vec![0.5, 0.0]);
}

fn tiny_set(name: &str, level: f64) -> Dataset {
    let images = (0..6).map(|i| (0..16).map(|j| (level + 0.05 * ((i + j) % 3) as f64).min(1.0)).collect()).collect();
    Dataset::new(images, Some(vec![0; 6]), (4, 4), Provenance::Original(name.into())).unwrap()
}

#[test]
fn energy_table_shape_determinism_and_empty_sets() {
    let relu = ConstraintKind::NonNeg;
    let m1 = init_params(&[16, 4, 3], &[1.0, 1.0], &[relu, relu], 0.125, &InitConfig::default(), 1).unwrap();
    let m2 = init_params(&[16, 4, 3], &[1.0, 1.0], &[relu, relu], 0.125, &InitConfig::default(), 2).unwrap();
    let (a, b) = (tiny_set("A", 0.1), tiny_set("B", 0.6));
    let sets = vec![("A".to_string(), &a), ("B".to_string(), &b)];
    let cfg = InferenceConfig::evaluation();
    let models = vec![("m1".to_string(), &m1), ("m2".to_string(), &m2)];

    let t1 = energy_table(&models, &sets, &cfg).unwrap();
    let t2 = energy_table(&models, &sets, &cfg).unwrap();
    assert_eq!(t1, t2);
    assert_eq!((t1.cells.len(), t1.cells[0].len()), (2, 2));

    let single = energy_table(&models[..1], &sets[..1], &cfg).unwrap();
    assert_eq!((single.cells.len(), single.cells[0].len()), (1, 1));
    assert_eq!(single.cells[0][0], t1.cells[0][0]);

    let empty = Dataset { images: vec![], labels: None, shape: (4, 4), provenance: Provenance::Original("E".into()) };
    let err = energy_table(&models, &[("E".to_string(), &empty)], &cfg).unwrap_err();
    assert!(matches!(err, LrrnError::EmptyDataset));
    assert_eq!(err.to_string(), "empty dataset");

    let gauss = fit_gaussian_sampler(&a, 3).unwrap().sample_dataset(6);
    let rows = [
        ControlRow { name: "m1", model: &m1, own_test: &a, gaussian: &gauss },
        ControlRow { name: "m2", model: &m2, own_test: &b, gaussian: &gauss },
    ];
    let full = energy_table_with_controls(&rows, &sets, &cfg).unwrap();
    assert_eq!(full.columns, vec!["A", "B", MIRRORED_COLUMN, GAUSSIAN_COLUMN]);
    assert_eq!(full.cells[0][..2], t1.cells[0][..]);
    assert!(full.render_text().lines().count() == 3);
    assert_eq!(full.render_csv().lines().count(), 1 + 2 * 4);
}

#[test]
fn exported_filter_grid_reparses_as_pgm() {
    let w = Matrix::from_fn(32, 784, |i, j| ((i * 31 + j * 17) % 97) as f64 / 97.0 - 0.5);
    let img = filter_grid(&w, None).unwrap();
    let bytes = encode_pgm(&img);
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm).unwrap().into_luma8();
    assert_eq!(decoded.dimensions(), (6 * 28 + 5, 6 * 28 + 5));
    assert_eq!(decoded.as_raw(), &img.pixels);
    // Each tile spans the full range after per-filter normalization.
    let tile: Vec<u8> = (0..28).flat_map(|r| decoded.as_raw()[r * 173..r * 173 + 28].to_vec()).collect();
    assert_eq!((tile.iter().min(), tile.iter().max()), (Some(&0), Some(&255)));
}
