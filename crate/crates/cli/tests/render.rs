use proptest::prelude::*;
use prospectr_cli::render::{render, render_png, Image, Style, GREEN, HEAT_HIGH, HEAT_LOW, NODATA, PURPLE, QUANTILE_COLORS, WHITE};
use prospectr_cli::CliError;

fn ramp(n: usize) -> Vec<f32> {
    (0..n).map(|i| (i as f32 * 0.37).sin() * 3.0).collect()
}

fn decode(bytes: &[u8]) -> (u32, u32, Vec<u8>) {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().unwrap();
    let mut buf = vec![0; dec.output_buffer_size().unwrap()];
    let info = dec.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}

fn argmin_max(v: &[f32]) -> (usize, usize) {
    let lo = (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let hi = (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    (lo, hi)
}

#[test]
fn style_names_parse_and_unknown_is_a_config_error() {
    assert_eq!("heat_over_gray".parse::<Style>().unwrap(), Style::HeatOverGray);
    assert_eq!("signed_green".parse::<Style>().unwrap(), Style::SignedGreen);
    assert_eq!("quantile5".parse::<Style>().unwrap(), Style::Quantile5);
    let err = "viridis".parse::<Style>().unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn constant_input_under_quantile5_is_one_color() {
    let img = render(Style::Quantile5, &[&[1.5f32; 30]], 5, 6).unwrap();
    let first = img.pixel(0, 0);
    assert!((0..5).all(|r| (0..6).all(|c| img.pixel(r, c) == first)));
}

#[test]
fn extremes_map_to_colormap_endpoints() {
    let v = ramp(48);
    let (lo, hi) = argmin_max(&v);
    let at = |img: &Image, i: usize| img.pixel(i / 8, i % 8);

    let q = render(Style::Quantile5, &[&v], 6, 8).unwrap();
    assert_eq!(at(&q, lo), QUANTILE_COLORS[0]);
    assert_eq!(at(&q, hi), QUANTILE_COLORS[4]);

    // Equal uncertainty everywhere: the gray underlay stays off.
    let flat = vec![0.1f32; 48];
    let h = render(Style::HeatOverGray, &[&v, &flat], 6, 8).unwrap();
    assert_eq!(at(&h, lo), HEAT_LOW);
    assert_eq!(at(&h, hi), HEAT_HIGH);

    // The largest magnitude reaches the full color of its sign.
    for plane in [v.clone(), v.iter().map(|x| -x).collect()] {
        let s = render(Style::SignedGreen, &[&plane], 6, 8).unwrap();
        let top = (0..48).max_by(|&a, &b| plane[a].abs().total_cmp(&plane[b].abs())).unwrap();
        assert_eq!(at(&s, top), if plane[top] > 0.0 { GREEN } else { PURPLE });
    }
}

#[test]
fn signed_green_zero_is_white_and_nan_is_nodata() {
    let img = render(Style::SignedGreen, &[&[0.0, 2.0, -2.0, f32::NAN]], 1, 4).unwrap();
    assert_eq!(img.pixel(0, 0), WHITE);
    assert_eq!(img.pixel(0, 1), GREEN);
    assert_eq!(img.pixel(0, 2), PURPLE);
    assert_eq!(img.pixel(0, 3), NODATA);
}

#[test]
fn higher_uncertainty_is_grayer() {
    let mean = [0.5f32, 0.5];
    let std = [0.0f32, 0.2];
    let img = render(Style::HeatOverGray, &[&mean, &std], 1, 2).unwrap();
    let spread = |p: [u8; 3]| p.iter().max().unwrap() - p.iter().min().unwrap();
    assert!(spread(img.pixel(0, 1)) < spread(img.pixel(0, 0)));
}

#[test]
fn plane_count_and_length_are_checked() {
    assert!(matches!(render(Style::HeatOverGray, &[&[0.0f32; 4]], 2, 2), Err(CliError::Config(_))));
    assert!(render(Style::Quantile5, &[&[0.0f32; 3]], 2, 2).is_err());
}

#[test]
fn written_png_decodes_to_the_rendered_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let v = ramp(12);
    let path = dir.path().join("a.png");
    render_png(&path, Style::Quantile5, &[&v], 3, 4, 2).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let (w, h, rgb) = decode(&bytes);
    let want = render(Style::Quantile5, &[&v], 3, 4).unwrap().scaled(2);
    assert_eq!((w as usize, h as usize), (want.width, want.height));
    assert_eq!(rgb, want.rgb);
}

proptest! {
    #[test]
    fn output_bytes_are_deterministic(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..12) {
        let v: Vec<f32> = (0..rows * cols).map(|i| ((seed as f64 + i as f64) * 0.913).sin() as f32).collect();
        let u: Vec<f32> = v.iter().map(|x| x.abs() * 0.1).collect();
        for (style, planes) in [(Style::HeatOverGray, vec![&v[..], &u[..]]), (Style::SignedGreen, vec![&v[..]]), (Style::Quantile5, vec![&v[..]])] {
            let a = render(style, &planes, rows, cols).unwrap().encode().unwrap();
            let b = render(style, &planes, rows, cols).unwrap().encode().unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn quantile5_bins_are_monotone_in_value(seed in any::<u64>()) {
        let v: Vec<f32> = (0..40).map(|i| ((seed % 1000) as f32 + i as f32 * 1.7).sin()).collect();
        let img = render(Style::Quantile5, &[&v], 5, 8).unwrap();
        let bin = |i: usize| QUANTILE_COLORS.iter().position(|&c| c == img.pixel(i / 8, i % 8)).unwrap();
        for a in 0..40 {
            for b in 0..40 {
                if v[a] < v[b] {
                    prop_assert!(bin(a) <= bin(b));
                }
            }
        }
    }
}
