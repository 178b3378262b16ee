//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use cacps::raster::BinaryMask;
use num_complex::Complex64;

/// Direct 2-D DFT summation of a real `h × w` plane, DC at index 0.
pub fn dft(plane: &[f64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    let src: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft_complex(&src, h, w, inverse)
}

pub fn dft_complex(src: &[Complex64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut s = Complex64::new(0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = sign * 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    s += src[y * w + x] * Complex64::from_polar(1.0, ang);
                }
            }
            out[u * w + v] = if inverse { s / (h * w) as f64 } else { s };
        }
    }
    out
}

/// Signed frequency of bin `k` on an axis of length `n`.
fn freq(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Amplitude mixing from scratch: DFT summation, a low-frequency box of
/// signed frequencies |f| ≤ ⌊αn⌋ on each axis, phase of `x`, inverse
/// summation, clip to [0, 1].
pub fn augment_reference(x: &[f64], xp: &[f64], h: usize, w: usize, lambda: f64, alpha: f64, strict: bool) -> Vec<f64> {
    let fx = dft(x, h, w, false);
    let fp = dft(xp, h, w, false);
    let inside = |k: usize, n: usize| {
        let half = (alpha * n as f64).floor() as i64;
        if half == 0 {
            return false;
        }
        freq(k, n).abs() <= half
    };
    let mixed: Vec<Complex64> = (0..h * w)
        .map(|i| {
            let (u, v) = (i / w, i % w);
            let (a, ap) = (fx[i].norm(), fp[i].norm());
            let m = if inside(u, h) && inside(v, w) { 1.0 } else { 0.0 };
            let amp = if strict {
                (1.0 - lambda) * a * (1.0 - m) + lambda * ap * m
            } else {
                a * (1.0 - m) + ((1.0 - lambda) * a + lambda * ap) * m
            };
            let phase = if fx[i].norm() == 0.0 { 0.0 } else { fx[i].arg() };
            Complex64::from_polar(amp, phase)
        })
        .collect();
    dft_complex(&mixed, h, w, true)
        .iter()
        .map(|z| z.re.clamp(0.0, 1.0))
        .collect()
}

pub fn dice_reference(p: &BinaryMask, g: &BinaryMask) -> f64 {
    let mut both = 0.0;
    let mut np = 0.0;
    let mut ng = 0.0;
    for y in 0..p.height() {
        for x in 0..p.width() {
            if p.get(y, x) {
                np += 1.0;
            }
            if g.get(y, x) {
                ng += 1.0;
            }
            if p.get(y, x) && g.get(y, x) {
                both += 1.0;
            }
        }
    }
    if np + ng == 0.0 {
        1.0
    } else {
        2.0 * both / (np + ng)
    }
}

/// Mask minus its 4-neighbour erosion (outside the image counts as background).
fn boundary(m: &BinaryMask) -> Vec<(f64, f64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let at = |y: i64, x: i64| (0..h).contains(&y) && (0..w).contains(&x) && m.get(y as usize, x as usize);
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let eroded = at(y, x) && at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1);
            if at(y, x) && !eroded {
                pts.push((y as f64, x as f64));
            }
        }
    }
    pts
}

fn directed(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    a.iter()
        .map(|p| b.iter().map(|q| (p.0 - q.0).hypot(p.1 - q.1)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

pub fn hausdorff_reference(p: &BinaryMask, g: &BinaryMask) -> Option<f64> {
    match (p.count(), g.count()) {
        (0, 0) => Some(0.0),
        (0, _) | (_, 0) => None,
        _ => {
            let (bp, bg) = (boundary(p), boundary(g));
            Some(directed(&bp, &bg).max(directed(&bg, &bp)))
        }
    }
}

/// Every mask of the given size, in bit order.
pub fn all_masks(h: usize, w: usize) -> Vec<BinaryMask> {
    (0u32..1 << (h * w))
        .map(|bits| BinaryMask::from_fn(h, w, |y, x| bits >> (y * w + x) & 1 == 1))
        .collect()
}

/// `Σ_c p(c)·ln(p(c)/q(c))` with the same clamping as the library.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.max(1e-12).ln() - b.max(1e-12).ln()))
        .sum()
}
