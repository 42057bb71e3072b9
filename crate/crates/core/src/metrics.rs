//! Fusion quality metrics over `[0, 1]` images: histogram divergence,
//! mutual information and gradient-based edge preservation.

use crate::data::Image;
use crate::error::{Error, Result};

pub const BINS: usize = 256;
/// Added to every histogram bin before normalizing.
pub const SMOOTHING: f64 = 1e-12;

// Edge-preservation sigmoid constants (Xydeas and Petrović).
const GAMMA_G: f64 = 0.9994;
const KAPPA_G: f64 = -15.0;
const SIGMA_G: f64 = 0.5;
const GAMMA_A: f64 = 0.9879;
const KAPPA_A: f64 = -22.0;
const SIGMA_A: f64 = 0.8;
/// Exponent on source edge strength in the weighting.
const EDGE_WEIGHT_EXP: i32 = 1;

fn bin(v: f64) -> usize {
    ((v * BINS as f64).floor().max(0.0) as usize).min(BINS - 1)
}

/// 256-bin count histogram of intensities in `[0, 1]`.
pub fn histogram(img: &Image) -> Vec<u64> {
    let mut h = vec![0u64; BINS];
    for &v in &img.data {
        h[bin(v)] += 1;
    }
    h
}

fn joint_histogram(a: &Image, b: &Image) -> Vec<u64> {
    let mut h = vec![0u64; BINS * BINS];
    for (&x, &y) in a.data.iter().zip(&b.data) {
        h[bin(x) * BINS + bin(y)] += 1;
    }
    h
}

fn probabilities(counts: &[u64]) -> Vec<f64> {
    let n: u64 = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

/// Shannon entropy (nats) of an image's 256-bin histogram.
pub fn entropy(img: &Image) -> f64 {
    probabilities(&histogram(img))
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Mutual information (nats) from the joint histogram.
pub fn mutual_information(a: &Image, b: &Image) -> Result<f64> {
    same_shape(&[a, b])?;
    let joint = probabilities(&joint_histogram(a, b));
    let mut pa = vec![0.0; BINS];
    let mut pb = vec![0.0; BINS];
    for i in 0..BINS {
        for j in 0..BINS {
            let p = joint[i * BINS + j];
            pa[i] += p;
            pb[j] += p;
        }
    }
    let mut mi = 0.0;
    for i in 0..BINS {
        for j in 0..BINS {
            let p = joint[i * BINS + j];
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Kullback–Leibler divergence `D(p || q)` between smoothed count histograms.
pub fn kl_divergence(p: &[u64], q: &[u64]) -> f64 {
    let smooth = |c: &[u64]| {
        let total: f64 = c.iter().map(|&v| v as f64 + SMOOTHING).sum();
        c.iter().map(|&v| (v as f64 + SMOOTHING) / total).collect::<Vec<_>>()
    };
    let (p, q) = (smooth(p), smooth(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn same_shape(imgs: &[&Image]) -> Result<()> {
    let (h, w) = (imgs[0].h, imgs[0].w);
    if imgs.iter().any(|i| (i.h, i.w) != (h, w)) {
        return Err(Error::dim("metric inputs differ in size"));
    }
    Ok(())
}

/// Sum of MI between the fused image and each source.
pub fn q_mi(fused: &Image, ir: &Image, vis: &Image) -> Result<f64> {
    same_shape(&[fused, ir, vis])?;
    Ok(mutual_information(fused, ir)? + mutual_information(fused, vis)?)
}

/// Mean KL divergence from each source histogram to the fused one (lower is better).
pub fn q_ce(fused: &Image, ir: &Image, vis: &Image) -> Result<f64> {
    same_shape(&[fused, ir, vis])?;
    let hf = histogram(fused);
    Ok(0.5 * (kl_divergence(&histogram(ir), &hf) + kl_divergence(&histogram(vis), &hf)))
}

/// Sobel responses with reflect padding.
fn sobel(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (img.h as isize, img.w as isize);
    let r = |i: isize, n: isize| {
        if i < 0 {
            -i
        } else if i >= n {
            2 * n - 2 - i
        } else {
            i
        }
    };
    let a = |y: isize, x: isize| img.data[(r(y, h) * w + r(x, w)) as usize];
    let mut gx = Vec::with_capacity(img.data.len());
    let mut gy = Vec::with_capacity(img.data.len());
    for y in 0..h {
        for x in 0..w {
            gx.push(
                (a(y - 1, x + 1) - a(y - 1, x - 1))
                    + 2.0 * (a(y, x + 1) - a(y, x - 1))
                    + (a(y + 1, x + 1) - a(y + 1, x - 1)),
            );
            gy.push(
                (a(y + 1, x - 1) - a(y - 1, x - 1))
                    + 2.0 * (a(y + 1, x) - a(y - 1, x))
                    + (a(y + 1, x + 1) - a(y - 1, x + 1)),
            );
        }
    }
    (gx, gy)
}

fn strength_orientation(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (gx, gy) = sobel(img);
    let g = gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).collect();
    let a = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| {
            if x == 0.0 {
                if y == 0.0 {
                    0.0
                } else {
                    std::f64::consts::FRAC_PI_2
                }
            } else {
                (y / x).atan()
            }
        })
        .collect();
    (g, a)
}

fn q_g(g: f64) -> f64 {
    GAMMA_G / (1.0 + (KAPPA_G * (g - SIGMA_G)).exp())
}

fn q_a(a: f64) -> f64 {
    GAMMA_A / (1.0 + (KAPPA_A * (a - SIGMA_A)).exp())
}

/// Per-pixel preservation of source edges in the fused image, scaled so that
/// an exact copy scores 1.
fn preservation(gs: &[f64], as_: &[f64], gf: &[f64], af: &[f64]) -> Vec<f64> {
    let perfect = q_g(1.0) * q_a(1.0);
    gs.iter()
        .zip(as_)
        .zip(gf.iter().zip(af))
        .map(|((&ga, &aa), (&gff, &aff))| {
            let g = if ga == gff {
                1.0
            } else if ga > gff {
                gff / ga
            } else {
                ga / gff
            };
            let a = 1.0 - (aa - aff).abs() / std::f64::consts::FRAC_PI_2;
            (q_g(g) * q_a(a) / perfect).clamp(0.0, 1.0)
        })
        .collect()
}

/// Edge-preservation score in `[0, 1]`; 0 when neither source has edges.
pub fn q_abf(fused: &Image, ir: &Image, vis: &Image) -> Result<f64> {
    same_shape(&[fused, ir, vis])?;
    if fused.h < 3 || fused.w < 3 {
        return Err(Error::dim("edge preservation needs at least 3x3 images"));
    }
    let (gf, af) = strength_orientation(fused);
    let (ga, aa) = strength_orientation(ir);
    let (gb, ab) = strength_orientation(vis);
    let qa = preservation(&ga, &aa, &gf, &af);
    let qb = preservation(&gb, &ab, &gf, &af);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..gf.len() {
        let wa = ga[i].powi(EDGE_WEIGHT_EXP);
        let wb = gb[i].powi(EDGE_WEIGHT_EXP);
        num += qa[i] * wa + qb[i] * wb;
        den += wa + wb;
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

/// All three fusion metrics for one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionScores {
    pub q_ce: f64,
    pub q_mi: f64,
    pub q_abf: f64,
}

pub fn fusion_scores(fused: &Image, ir: &Image, vis: &Image) -> Result<FusionScores> {
    Ok(FusionScores {
        q_ce: q_ce(fused, ir, vis)?,
        q_mi: q_mi(fused, ir, vis)?,
        q_abf: q_abf(fused, ir, vis)?,
    })
}

/// The fixed image pair used for edge-preservation sanity checks: a bright
/// square on the left source and a vertical step on the right source.
pub fn edge_test_pair() -> (Image, Image) {
    let n = 32;
    let mut a = Image::filled(n, n, 0.2);
    let mut b = Image::filled(n, n, 0.3);
    for y in 0..n {
        for x in 0..n {
            if (8..20).contains(&y) && (6..18).contains(&x) {
                a.data[y * n + x] = 0.9;
            }
            if x >= 20 {
                b.data[y * n + x] = 0.7;
            }
        }
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, n: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(n, n, (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn self_mi_is_twice_entropy() {
        let x = noise(1, 32);
        let v = q_mi(&x, &x, &x).unwrap();
        assert!((v - 2.0 * entropy(&x)).abs() < 1e-9);
        let c = Image::filled(8, 8, 0.4);
        assert_eq!(q_mi(&c, &c, &c).unwrap(), 0.0);
    }

    #[test]
    fn independent_noise_has_small_mi() {
        // few intensity levels keep the plug-in estimator's upward bias negligible
        let levels = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..256 * 256).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
            Image::new(256, 256, data).unwrap()
        };
        let v = mutual_information(&levels(1), &levels(2)).unwrap();
        assert!(v < 0.05, "{v}");
        // with all 256 levels the estimate sits near its bias, (bins-1)^2 / 2N
        let v = mutual_information(&noise(1, 256), &noise(2, 256)).unwrap();
        assert!((v - 255.0 * 255.0 / (2.0 * 65536.0)).abs() < 0.1, "{v}");
    }

    #[test]
    fn kl_hand_value() {
        // p = (.75, .25), q = (.5, .5) as counts
        let d = kl_divergence(&[3, 1], &[2, 2]);
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((d - want).abs() < 1e-9, "{d} {want}");
    }

    #[test]
    fn q_ce_identity_and_symmetry() {
        let x = noise(3, 16);
        assert!(q_ce(&x, &x, &x).unwrap().abs() < 1e-9);
        let (a, b, f) = (noise(4, 16), noise(5, 16), noise(6, 16));
        assert_eq!(q_ce(&f, &a, &b).unwrap(), q_ce(&f, &b, &a).unwrap());
    }

    #[test]
    fn q_abf_oracles() {
        let (a, b) = edge_test_pair();
        assert!(q_abf(&a, &a, &a).unwrap() >= 0.99);
        let flat = Image::filled(32, 32, 0.5);
        assert!(q_abf(&flat, &a, &b).unwrap() < 0.05);
        assert_eq!(q_abf(&a, &flat, &flat).unwrap(), 0.0);
        let max = Image::pixelwise_max(&a, &b).unwrap();
        let v = q_abf(&max, &a, &b).unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn q_abf_rises_from_noise_towards_sources() {
        let (a, b) = edge_test_pair();
        let target = Image::pixelwise_max(&a, &b).unwrap();
        let n = noise(9, 32);
        let mut last = -1.0;
        for k in 0..=4 {
            let t = k as f64 / 4.0;
            let f = Image::new(
                32,
                32,
                n.data.iter().zip(&target.data).map(|(x, y)| (1.0 - t) * x + t * y).collect(),
            )
            .unwrap();
            let v = q_abf(&f, &a, &b).unwrap();
            assert!(v >= last - 1e-12, "step {k}: {v} < {last}");
            last = v;
        }
    }
}
