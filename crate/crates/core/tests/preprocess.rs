use proptest::prelude::*;
use prospectr::preprocess::{
    gaussian_kernel, idw_impute, quantile_sorted, run_pipeline, smooth, standardize, tukey_filter, Band,
    PreprocessConfig,
};
use prospectr::raster::{GeoTransform, MultiBandRaster};
use prospectr::Error;

const NAN: f64 = f64::NAN;

fn band(rows: usize, cols: usize, v: Vec<f64>) -> Band {
    Band::new("b", rows, cols, v).unwrap()
}

fn missing(b: &Band) -> Vec<usize> {
    b.values.iter().enumerate().filter(|(_, v)| v.is_nan()).map(|(i, _)| i).collect()
}

#[test]
fn tukey_quartiles_by_hand() {
    let sorted = [1.0, 2.0, 3.0, 100.0];
    assert_eq!(quantile_sorted(&sorted, 0.25), 1.75);
    assert_eq!(quantile_sorted(&sorted, 0.75), 27.25);
    let (out, removed) = tukey_filter(&band(1, 4, vec![3.0, 100.0, 1.0, 2.0]), 1.5).unwrap();
    assert_eq!(removed, 1);
    assert_eq!(missing(&out), vec![1]);
}

#[test]
fn tukey_keeps_constant_and_symmetric_bands() {
    for v in [vec![4.0; 6], vec![-1.0, 0.0, 1.0]] {
        let n = v.len();
        let (out, removed) = tukey_filter(&band(1, n, v.clone()), 1.5).unwrap();
        assert_eq!(removed, 0);
        assert_eq!(out.values, v);
    }
}

#[test]
fn tukey_on_all_missing_band_is_empty_band_error() {
    assert!(matches!(tukey_filter(&band(1, 3, vec![NAN; 3]), 1.5), Err(Error::EmptyBand(_))));
}

#[test]
fn idw_of_four_equidistant_neighbours_is_their_mean() {
    let b = band(3, 3, vec![NAN, 1.0, NAN, 2.0, NAN, 3.0, NAN, 4.0, NAN]);
    // Radius 1 sees only the four edge-adjacent pixels of the centre.
    let (out, imputed) = idw_impute(&b, 2.0, 1).unwrap();
    assert_eq!(out.values[4], 2.5);
    assert!(imputed[4] && !imputed[1]);
}

#[test]
fn idw_with_single_neighbour_copies_it() {
    let b = band(1, 3, vec![NAN, 6.5, NAN]);
    let (out, _) = idw_impute(&b, 2.0, 1).unwrap();
    assert_eq!(out.values, vec![6.5, 6.5, 6.5]);
}

#[test]
fn idw_weights_by_inverse_squared_distance() {
    // Neighbours 0 at distance 1 and 3 at distance 2.
    let b = band(1, 4, vec![3.0, NAN, NAN, 0.0]);
    let (out, _) = idw_impute(&b, 2.0, 2).unwrap();
    // Pixel 2: 0 at d=1, 3 at d=2 -> (0 * 1 + 3 * 0.25) / 1.25.
    assert!((out.values[2] - 0.6).abs() < 1e-15);
}

#[test]
fn idw_falls_back_to_median_outside_radius() {
    let mut v = vec![NAN; 25];
    v[0] = 1.0;
    v[1] = 2.0;
    v[5] = 10.0;
    let (out, _) = idw_impute(&band(5, 5, v), 2.0, 1).unwrap();
    assert_eq!(out.values[24], 2.0);
    assert!(matches!(idw_impute(&band(1, 2, vec![NAN, NAN]), 2.0, 1), Err(Error::EmptyBand(_))));
}

#[test]
fn smoothing_examples() {
    let b = band(3, 4, (0..12).map(|i| (i * i) as f64).collect());
    assert_eq!(smooth(&b, 0.0, None), b);
    let c = band(4, 4, vec![2.5; 16]);
    assert!(smooth(&c, 1.0, None).values.iter().all(|v| (v - 2.5).abs() < 1e-12));

    let mut impulse = vec![0.0; 81];
    impulse[40] = 1.0;
    let out = smooth(&band(9, 9, impulse), 1.0, None);
    // 7-tap kernel fits entirely inside the 9x9 grid around the centre.
    let taps: Vec<f64> = (-3..=3).map(|d: i32| (-0.5 * (d * d) as f64).exp()).collect();
    let z: f64 = taps.iter().sum();
    let centre = (taps[3] / z).powi(2);
    assert!((out.values[40] - centre).abs() < 1e-15);
    assert_eq!(gaussian_kernel(1.0).len(), 7);
}

#[test]
fn standardize_examples() {
    let out = standardize(&band(1, 2, vec![0.0, 2.0])).unwrap();
    assert_eq!(out.values, vec![-1.0, 1.0]);
    let z = standardize(&band(1, 5, vec![1.0, 5.0, 2.0, 8.0, -3.0])).unwrap();
    let again = standardize(&z).unwrap();
    assert!(z.values.iter().zip(&again.values).all(|(a, b)| (a - b).abs() < 1e-6));
    assert!(matches!(standardize(&band(1, 3, vec![7.0; 3])), Err(Error::ConstantBand(_))));
}

fn raster_of(rows: usize, cols: usize, bands: Vec<Vec<f32>>) -> MultiBandRaster {
    let names = (0..bands.len()).map(|b| format!("b{b}")).collect();
    MultiBandRaster::new(rows, cols, names, bands.concat(), None, GeoTransform::default()).unwrap()
}

#[test]
fn clean_standardized_input_passes_through() {
    // A standardized ramp has no Tukey outliers and no missing values.
    let v: Vec<f64> = (0..36).map(|i| i as f64).collect();
    let z = standardize(&band(6, 6, v)).unwrap();
    let r = raster_of(6, 6, vec![z.values.iter().map(|&v| v as f32).collect()]);
    let (out, report) = run_pipeline(&r, &PreprocessConfig::default()).unwrap();
    assert_eq!(report.bands[0].outliers, 0);
    assert_eq!(report.bands[0].imputed, 0);
    assert!(out.data().iter().zip(r.data()).all(|(a, b)| (a - b).abs() < 1e-6));
}

#[test]
fn single_outlier_is_fenced_imputed_and_standardized() {
    let mut v: Vec<f64> = (0..25).map(|i| ((i * 7) % 11) as f64).collect();
    v[12] = 500.0;
    let r = raster_of(5, 5, vec![v.iter().map(|&x| x as f32).collect()]);
    let cfg = PreprocessConfig { smooth_sigma: 0.0, ..PreprocessConfig::default() };
    let (out, report) = run_pipeline(&r, &cfg).unwrap();
    assert_eq!(report.bands[0].outliers, 1);
    assert_eq!(report.bands[0].imputed, 1);

    // Oracle: inverse-square weights over every other pixel (radius 5
    // covers the whole 5x5 grid from the centre), then population z-scores.
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..25 {
        if i == 12 {
            continue;
        }
        let (dy, dx) = ((i / 5) as f64 - 2.0, (i % 5) as f64 - 2.0);
        let w = 1.0 / (dy * dy + dx * dx);
        num += w * v[i];
        den += w;
    }
    let mut filled = v.clone();
    filled[12] = num / den;
    let mean = filled.iter().sum::<f64>() / 25.0;
    let sd = (filled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 25.0).sqrt();
    for (o, f) in out.data().iter().zip(&filled) {
        assert!((*o as f64 - (f - mean) / sd).abs() < 1e-6);
    }
}

#[test]
fn constant_band_is_dropped() {
    let r = raster_of(3, 3, vec![(0..9).map(|i| i as f32).collect(), vec![2.0; 9], (0..9).map(|i| (i * i) as f32).collect()]);
    let (out, report) = run_pipeline(&r, &PreprocessConfig::default()).unwrap();
    assert_eq!(out.bands(), 2);
    assert_eq!(report.dropped, vec!["b1".to_string()]);
    assert_eq!(out.band_names(), &["b0".to_string(), "b2".to_string()]);
}

#[test]
fn config_is_validated() {
    let bad = [
        PreprocessConfig { tukey_k: 0.0, ..PreprocessConfig::default() },
        PreprocessConfig { idw_power: -1.0, ..PreprocessConfig::default() },
        PreprocessConfig { idw_radius: 0, ..PreprocessConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn nodata_pixels_stay_masked() {
    let mut data: Vec<f32> = (0..16).map(|i| (i as f32).sqrt()).collect();
    data[5] = f32::NAN;
    let mut mask = vec![false; 16];
    mask[5] = true;
    mask[10] = true;
    let r = MultiBandRaster::new(4, 4, vec!["a".into()], data, Some(mask.clone()), GeoTransform::default()).unwrap();
    let (out, report) = run_pipeline(&r, &PreprocessConfig::default()).unwrap();
    assert_eq!(report.bands[0].imputed, 0);
    for (i, v) in out.data().iter().enumerate() {
        assert_eq!(v.is_nan(), mask[i]);
    }
}

fn grid_with_gaps() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..8, 2usize..8).prop_flat_map(|(r, c)| {
        let cell = prop_oneof![4 => -50.0f64..50.0, 1 => Just(NAN), 1 => prop_oneof![Just(1e4), Just(-1e4)]];
        (Just(r), Just(c), proptest::collection::vec(cell, r * c))
    })
}

proptest! {
    #[test]
    fn pipeline_output_is_finite((r, c, v) in grid_with_gaps()) {
        prop_assume!(v.iter().filter(|x| x.is_finite()).count() >= 4);
        let raster = raster_of(r, c, vec![v.iter().map(|&x| x as f32).collect()]);
        match run_pipeline(&raster, &PreprocessConfig::default()) {
            Ok((out, _)) => prop_assert!(out.data().iter().all(|x| x.is_finite())),
            Err(e) => prop_assert!(matches!(e, Error::Contract(_)), "{e}"),
        }
    }

    #[test]
    fn idw_leaves_finite_pixels_untouched((r, c, v) in grid_with_gaps()) {
        prop_assume!(v.iter().any(|x| x.is_finite()));
        let b = band(r, c, v.clone());
        let (out, imputed) = idw_impute(&b, 2.0, 3).unwrap();
        for i in 0..v.len() {
            if v[i].is_finite() {
                prop_assert_eq!(out.values[i].to_bits(), v[i].to_bits());
                prop_assert!(!imputed[i]);
            } else {
                prop_assert!(out.values[i].is_finite() && imputed[i]);
            }
        }
    }

    #[test]
    fn standardize_is_idempotent_and_exact(v in proptest::collection::vec(-1e3f64..1e3, 2..40)) {
        prop_assume!(v.iter().any(|&x| (x - v[0]).abs() > 1e-3));
        let z = standardize(&band(1, v.len(), v)).unwrap();
        let n = z.values.len() as f64;
        let mean = z.values.iter().sum::<f64>() / n;
        let sd = (z.values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6);
        let again = standardize(&z).unwrap();
        prop_assert!(z.values.iter().zip(&again.values).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn tukey_never_removes_when_iqr_is_zero(base in -10.0f64..10.0, n in 12usize..24, odd in proptest::collection::vec(-100.0f64..100.0, 1..3)) {
        // Fewer than a quarter of the values differ, so Q1 = Q3 = base.
        let mut v = vec![base; n];
        for (x, o) in v.iter_mut().zip(&odd) {
            *x = *o;
        }
        let (out, removed) = tukey_filter(&band(1, n, v.clone()), 1.5).unwrap();
        prop_assert_eq!(removed, 0);
        prop_assert_eq!(out.values, v);
    }
}
