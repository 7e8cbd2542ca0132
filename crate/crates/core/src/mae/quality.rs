//! Reconstruction quality monitors on `[m, h, w]` images.

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const SIGMA: f64 = 1.5;
const RADIUS: usize = 5;

/// Normalized 11-tap Gaussian (sigma 1.5).
fn gaussian_taps() -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * RADIUS)
        .map(|i| {
            let d = i as f64 - RADIUS as f64;
            (-0.5 * d * d / (SIGMA * SIGMA)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian filter, `valid` region only. When the image is smaller
/// than the window the window is cropped to the image and renormalized.
fn filter(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let full = gaussian_taps();
    let crop = |n: usize| -> Vec<f64> {
        let k = full.len().min(if n % 2 == 1 { n } else { n - 1 }.max(1));
        let off = (full.len() - k) / 2;
        let t = &full[off..off + k];
        let s: f64 = t.iter().sum();
        t.iter().map(|v| v / s).collect()
    };
    let (ty, tx) = (crop(h), crop(w));
    let (oh, ow) = (h + 1 - ty.len(), w + 1 - tx.len());
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = tx.iter().enumerate().map(|(k, t)| t * img[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = ty.iter().enumerate().map(|(k, t)| t * tmp[(r + k) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let (mu_a, _, _) = filter(a, h, w);
    let (mu_b, _, _) = filter(b, h, w);
    let (aa, _, _) = filter(&sq(a, a), h, w);
    let (bb, _, _) = filter(&sq(b, b), h, w);
    let (ab, _, _) = filter(&sq(a, b), h, w);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Mean SSIM over bands of two `[bands, h, w]` images with data range `peak`.
pub fn ssim(a: &[f64], b: &[f64], bands: usize, h: usize, w: usize, peak: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "ssim inputs differ in size");
    assert_eq!(a.len(), bands * h * w, "ssim shape mismatch");
    let n = h * w;
    (0..bands)
        .map(|j| ssim_plane(&a[j * n..(j + 1) * n], &b[j * n..(j + 1) * n], h, w, peak))
        .sum::<f64>()
        / bands as f64
}

pub const PSNR_CAP: f64 = 100.0;

/// `10 log10(peak^2 / MSE)`, capped at 100 dB when `MSE < peak^2 * 1e-10`.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr inputs differ in size");
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse < peak * peak * 1e-10 {
        PSNR_CAP
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}
