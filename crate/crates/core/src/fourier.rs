//! Amplitude-spectrum mixing between two images.
//!
//! An image is transformed to a centered 2-D spectrum and split into
//! amplitude and phase. The amplitude inside a central low-frequency
//! rectangle is blended with the amplitude of a partner image, and the
//! result is recombined with the untouched phase of the first image.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::raster::Image;

/// How the mask-weighted blend treats the region outside the mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MixMode {
    /// `A_new = (1-λ)·A·(1-M) + λ·A'·M`, taken literally.
    Strict,
    /// `A_new = A·(1-M) + ((1-λ)·A + λ·A')·M`; amplitude outside the mask is kept.
    #[default]
    Rectified,
}

impl fmt::Display for MixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixMode::Strict => "strict",
            MixMode::Rectified => "rectified",
        })
    }
}

impl FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(MixMode::Strict),
            "rectified" => Ok(MixMode::Rectified),
            other => Err(Error::invalid(format!(
                "unknown mix mode `{other}` (expected strict or rectified)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixConfig {
    /// Blend weight of the partner amplitude, in `[0, 1]`.
    pub lambda: f64,
    /// Half-extent of the mask as a fraction of each side, in `[0, 0.5]`.
    pub alpha: f64,
    pub mode: MixMode,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.1,
            mode: MixMode::Rectified,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        check_alpha(self.alpha)
    }

    /// True when [`augment`] returns its first argument unchanged for any partner.
    pub fn is_identity(&self) -> bool {
        self.mode == MixMode::Rectified && (self.lambda == 0.0 || self.alpha < f64::EPSILON)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=0.5).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha {alpha} outside [0, 0.5]")))
    }
}

/// A `[C, H, W]` complex array.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl ComplexImage {
    fn plane_mut(&mut self, c: usize) -> &mut [Complex64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// The real part, with the largest discarded imaginary magnitude.
    pub fn real_part(&self) -> (Image, f64) {
        let residue = self.data.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
        let data = self.data.iter().map(|z| z.re).collect();
        let img = Image::new(self.channels, self.height, self.width, data)
            .expect("dimensions carried over");
        (img, residue)
    }
}

/// Amplitude and phase of a centered spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Non-negative moduli.
    pub amplitude: Vec<f64>,
    /// Arguments in `(-π, π]`; zero where the modulus is zero.
    pub phase: Vec<f64>,
}

impl Spectrum {
    pub fn recompose(&self) -> ComplexImage {
        recompose(self, &self.amplitude)
    }
}

/// Combines `amplitude` with the phase of `spectrum`.
pub fn recompose(spectrum: &Spectrum, amplitude: &[f64]) -> ComplexImage {
    let data = amplitude
        .iter()
        .zip(&spectrum.phase)
        .map(|(&a, &p)| Complex64::from_polar(a, p))
        .collect();
    ComplexImage {
        channels: spectrum.channels,
        height: spectrum.height,
        width: spectrum.width,
        data,
    }
}

fn transform(
    data: &mut [Complex64],
    channels: usize,
    height: usize,
    width: usize,
    direction: FftDirection,
) {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft(width, direction);
    let col_fft = planner.plan_fft(height, direction);
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for c in 0..channels {
        let plane = &mut data[c * height * width..(c + 1) * height * width];
        for row in plane.chunks_exact_mut(width) {
            row_fft.process(row);
        }
        for x in 0..width {
            for (y, slot) in column.iter_mut().enumerate() {
                *slot = plane[y * width + x];
            }
            col_fft.process(&mut column);
            for (y, v) in column.iter().enumerate() {
                plane[y * width + x] = *v;
            }
        }
    }
}

/// Moves the zero-frequency bin to `(⌊H/2⌋, ⌊W/2⌋)`.
fn shift(src: &[Complex64], height: usize, width: usize, inverse: bool) -> Vec<Complex64> {
    let (sh, sw) = (height / 2, width / 2);
    let mut out = vec![Complex64::new(0.0, 0.0); src.len()];
    for y in 0..height {
        for x in 0..width {
            let (ty, tx) = ((y + sh) % height, (x + sw) % width);
            if inverse {
                out[y * width + x] = src[ty * width + tx];
            } else {
                out[ty * width + tx] = src[y * width + x];
            }
        }
    }
    out
}

/// Per-channel 2-D DFT with the DC bin moved to the centre.
pub fn fft2d(image: &Image) -> Result<ComplexImage> {
    let (c, h, w) = image.dims();
    if c == 0 || h < 2 || w < 2 {
        return Err(Error::invalid(format!(
            "fft2d needs at least a 2x2 image, got {c}x{h}x{w}"
        )));
    }
    let mut data: Vec<Complex64> = image.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut data, c, h, w, FftDirection::Forward);
    let mut out = ComplexImage {
        channels: c,
        height: h,
        width: w,
        data,
    };
    for ch in 0..c {
        let shifted = shift(out.plane_mut(ch), h, w, false);
        out.plane_mut(ch).copy_from_slice(&shifted);
    }
    Ok(out)
}

/// Inverse of [`fft2d`]: takes a centered spectrum, returns spatial values.
pub fn ifft2d(spectrum: &ComplexImage) -> Result<ComplexImage> {
    let ComplexImage {
        channels: c,
        height: h,
        width: w,
        ..
    } = *spectrum;
    if c == 0 || h < 2 || w < 2 {
        return Err(Error::invalid("ifft2d needs at least a 2x2 spectrum"));
    }
    let mut out = spectrum.clone();
    for ch in 0..c {
        let unshifted = shift(out.plane_mut(ch), h, w, true);
        out.plane_mut(ch).copy_from_slice(&unshifted);
    }
    transform(&mut out.data, c, h, w, FftDirection::Inverse);
    let norm = 1.0 / (h * w) as f64;
    out.data.iter_mut().for_each(|z| *z *= norm);
    Ok(out)
}

pub fn decompose(spectrum: &ComplexImage) -> Spectrum {
    let amplitude = spectrum.data.iter().map(|z| z.norm()).collect();
    let phase = spectrum
        .data
        .iter()
        .map(|z| if *z == Complex64::new(0.0, 0.0) { 0.0 } else { z.arg() })
        .collect();
    Spectrum {
        channels: spectrum.channels,
        height: spectrum.height,
        width: spectrum.width,
        amplitude,
        phase,
    }
}

/// Rows (or columns) covered by the mask along one axis of length `len`:
/// `[c - half, c - half + span)` with `c = ⌊len/2⌋` and `half = ⌊alpha·len⌋`.
/// Odd lengths get one extra index so the window stays centred on DC.
fn mask_window(alpha: f64, len: usize) -> (usize, usize) {
    let half = ((alpha * len as f64).floor() as usize).min(len / 2);
    if half == 0 {
        return (0, 0);
    }
    let span = (2 * half + len % 2).min(len);
    (len / 2 - half, span)
}

/// Binary `[H, W]` mask that is one on the centred low-frequency rectangle.
pub fn build_mask(alpha: f64, height: usize, width: usize) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let (y0, hs) = mask_window(alpha, height);
    let (x0, ws) = mask_window(alpha, width);
    let mut m = vec![0.0; height * width];
    for y in y0..y0 + hs {
        m[y * width + x0..y * width + x0 + ws].fill(1.0);
    }
    Ok(m)
}

/// The mask of [`build_mask`] with each axis window closed under frequency
/// negation, so that blending preserves the conjugate symmetry of real
/// images' spectra. Differs from [`build_mask`] only on even-length axes,
/// where it gains the one row or column mirroring the lowest masked index.
pub fn build_symmetric_mask(alpha: f64, height: usize, width: usize) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let axis = |len: usize| -> Vec<bool> {
        let (start, span) = mask_window(alpha, len);
        let centre = len / 2;
        let mut inside = vec![false; len];
        for pos in start..start + span {
            inside[pos] = true;
            inside[(2 * centre + len - pos) % len] = true;
        }
        inside
    };
    let (rows, cols) = (axis(height), axis(width));
    let mut m = vec![0.0; height * width];
    for (y, &ry) in rows.iter().enumerate() {
        for (x, &cx) in cols.iter().enumerate() {
            if ry && cx {
                m[y * width + x] = 1.0;
            }
        }
    }
    Ok(m)
}

/// Blends the amplitudes of `a` and `a_prime` under `mask` (one `[H, W]`
/// plane applied to every channel).
pub fn mix_amplitudes(
    a: &Spectrum,
    a_prime: &Spectrum,
    mask: &[f64],
    cfg: &MixConfig,
) -> Result<Vec<f64>> {
    let dims = (a.channels, a.height, a.width);
    let dims_p = (a_prime.channels, a_prime.height, a_prime.width);
    if dims != dims_p {
        return Err(Error::shape(
            "mix_amplitudes",
            &[dims.0, dims.1, dims.2],
            &[dims_p.0, dims_p.1, dims_p.2],
        ));
    }
    if mask.len() != a.height * a.width {
        return Err(Error::shape("mix_amplitudes mask", &[mask.len()], &[a.height, a.width]));
    }
    cfg.validate()?;
    let lam = cfg.lambda;
    let plane = a.height * a.width;
    Ok(a
        .amplitude
        .iter()
        .zip(&a_prime.amplitude)
        .enumerate()
        .map(|(i, (&x, &xp))| {
            let m = mask[i % plane];
            match cfg.mode {
                MixMode::Strict => (1.0 - lam) * x * (1.0 - m) + lam * xp * m,
                MixMode::Rectified => x * (1.0 - m) + ((1.0 - lam) * x + lam * xp) * m,
            }
        })
        .collect())
}

/// Result of [`augment`] with the diagnostics of the inverse transform.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub image: Image,
    /// Largest imaginary magnitude discarded after the inverse transform.
    pub imag_residue: f64,
    pub mixed_amplitude: Vec<f64>,
    pub source: Spectrum,
    pub partner: Spectrum,
}

/// Replaces low-frequency amplitude of `x` with a blend towards `x_prime`,
/// keeping the phase of `x`. Output is clipped to `[0, 1]`.
pub fn augment(x: &Image, x_prime: &Image, cfg: &MixConfig) -> Result<Image> {
    augment_detailed(x, x_prime, cfg).map(|a| a.image)
}

pub fn augment_detailed(x: &Image, x_prime: &Image, cfg: &MixConfig) -> Result<Augmented> {
    if x.dims() != x_prime.dims() {
        let (a, b) = (x.dims(), x_prime.dims());
        return Err(Error::shape("augment", &[a.0, a.1, a.2], &[b.0, b.1, b.2]));
    }
    if !x.data().iter().chain(x_prime.data()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "augment" });
    }
    cfg.validate()?;
    let source = decompose(&fft2d(x)?);
    let partner = decompose(&fft2d(x_prime)?);
    let mask = build_symmetric_mask(cfg.alpha, x.height(), x.width())?;
    let mixed_amplitude = mix_amplitudes(&source, &partner, &mask, cfg)?;
    let (raw, imag_residue) = ifft2d(&recompose(&source, &mixed_amplitude))?.real_part();
    let mut image = raw;
    image.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Augmented {
        image,
        imag_residue,
        mixed_amplitude,
        source,
        partner,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(1, h, w, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Direct DFT summation, DC at index 0.
    fn dft_brute(img: &Image) -> Vec<Complex64> {
        let (h, w) = (img.height(), img.width());
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut s = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0
                            * std::f64::consts::PI
                            * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        s += Complex64::from_polar(img.get(0, y, x), ang);
                    }
                }
                out[u * w + v] = s;
            }
        }
        out
    }

    #[test]
    fn constant_image_has_only_dc() {
        let img = Image::new(1, 6, 8, vec![0.3; 48]).unwrap();
        let f = fft2d(&img).unwrap();
        for (i, z) in f.data.iter().enumerate() {
            if i == 3 * 8 + 4 {
                assert!((z.norm() - 0.3 * 48.0).abs() < 1e-9);
            } else {
                assert!(z.norm() < 1e-9);
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        for (h, w) in [(8, 8), (5, 7), (16, 12)] {
            let img = random_image(h, w, 11);
            let (back, residue) = ifft2d(&fft2d(&img).unwrap()).unwrap().real_part();
            assert!(back.max_abs_diff(&img) < 1e-8);
            assert!(residue < 1e-8);
        }
    }

    #[test]
    fn single_cosine_has_two_symmetric_bins() {
        let w = 8;
        let img = Image::from_fn(8, w, |_, x| (2.0 * std::f64::consts::PI * x as f64 / w as f64).cos());
        let brute = dft_brute(&img);
        let f = fft2d(&img).unwrap();
        let nonzero: Vec<usize> = (0..64).filter(|&i| f.data[i].norm() > 1e-9).collect();
        // unshifted bins (0,1) and (0,7) land at (4,5) and (4,3)
        assert_eq!(nonzero, vec![4 * 8 + 3, 4 * 8 + 5]);
        for u in 0..8 {
            for v in 0..8 {
                let shifted = f.data[((u + 4) % 8) * 8 + (v + 4) % 8];
                assert!((shifted - brute[u * 8 + v]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn decompose_conventions() {
        let z = ComplexImage {
            channels: 1,
            height: 1,
            width: 2,
            data: vec![Complex64::new(3.0, 4.0), Complex64::new(0.0, 0.0)],
        };
        let s = decompose(&z);
        assert_eq!(s.amplitude, vec![5.0, 0.0]);
        assert_eq!(s.phase, vec![4f64.atan2(3.0), 0.0]);
        let back = s.recompose();
        assert!((back.data[0] - z.data[0]).norm() < 1e-10);
    }

    #[test]
    fn mask_extremes_and_quarter() {
        assert!(build_mask(0.0, 8, 8).unwrap().iter().all(|&v| v == 0.0));
        assert!(build_mask(0.5, 8, 8).unwrap().iter().all(|&v| v == 1.0));
        assert!(build_mask(0.5, 7, 9).unwrap().iter().all(|&v| v == 1.0));
        let m = build_mask(0.25, 8, 8).unwrap();
        let ones: Vec<(usize, usize)> = (0..64)
            .filter(|&i| m[i] == 1.0)
            .map(|i| (i / 8, i % 8))
            .collect();
        let expect: Vec<(usize, usize)> = (0..8)
            .flat_map(|y| (0..8).map(move |x| (y, x)))
            .filter(|&(y, x)| (2..6).contains(&y) && (2..6).contains(&x))
            .collect();
        assert_eq!(ones, expect);
        assert!(build_mask(0.6, 8, 8).is_err());
        assert!(build_mask(-0.1, 8, 8).is_err());
    }

    #[test]
    fn symmetrized_mask_is_closed_under_negation() {
        let m = build_symmetric_mask(0.25, 8, 8).unwrap();
        assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 25);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m[y * 8 + x], m[((8 - y) % 8) * 8 + (8 - x) % 8]);
            }
        }
    }

    fn constant_spectrum(v: f64) -> Spectrum {
        Spectrum {
            channels: 1,
            height: 8,
            width: 8,
            amplitude: vec![v; 64],
            phase: vec![0.0; 64],
        }
    }

    #[test]
    fn strict_mix_literal_arithmetic() {
        let cfg = MixConfig {
            lambda: 0.5,
            alpha: 0.25,
            mode: MixMode::Strict,
        };
        let mask = build_mask(0.25, 8, 8).unwrap();
        let out = mix_amplitudes(&constant_spectrum(2.0), &constant_spectrum(4.0), &mask, &cfg).unwrap();
        for (o, m) in out.iter().zip(&mask) {
            assert_eq!(*o, if *m == 1.0 { 2.0 } else { 1.0 });
        }
    }

    #[test]
    fn strict_full_swap_and_rectified_identity() {
        let a = decompose(&fft2d(&random_image(8, 8, 1)).unwrap());
        let b = decompose(&fft2d(&random_image(8, 8, 2)).unwrap());
        let full = build_mask(0.5, 8, 8).unwrap();
        let swap = mix_amplitudes(
            &a,
            &b,
            &full,
            &MixConfig {
                lambda: 1.0,
                alpha: 0.5,
                mode: MixMode::Strict,
            },
        )
        .unwrap();
        assert_eq!(swap, b.amplitude);
        let id = mix_amplitudes(
            &a,
            &b,
            &full,
            &MixConfig {
                lambda: 0.0,
                alpha: 0.5,
                mode: MixMode::Rectified,
            },
        )
        .unwrap();
        assert_eq!(id, a.amplitude);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let cfg = MixConfig::default();
        assert!(augment(&random_image(8, 8, 1), &random_image(8, 16, 2), &cfg).is_err());
        let mut bad = random_image(8, 8, 3);
        bad.data_mut()[5] = f64::NAN;
        assert!(matches!(
            augment(&bad, &random_image(8, 8, 4), &cfg),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn rectified_zero_lambda_and_self_mixing_are_identities() {
        let x = random_image(16, 16, 5);
        let xp = random_image(16, 16, 6);
        for alpha in [0.0, 0.1, 0.3, 0.5] {
            let cfg = MixConfig {
                lambda: 0.0,
                alpha,
                mode: MixMode::Rectified,
            };
            assert!(augment(&x, &xp, &cfg).unwrap().max_abs_diff(&x) < 1e-6);
        }
        for lambda in [0.2, 0.8, 1.0] {
            let cfg = MixConfig {
                lambda,
                alpha: 0.2,
                mode: MixMode::Rectified,
            };
            assert!(augment(&x, &x, &cfg).unwrap().max_abs_diff(&x) < 1e-6);
        }
    }

    #[test]
    fn phase_is_untouched_and_output_real() {
        let x = random_image(16, 16, 7);
        let xp = random_image(16, 16, 8);
        for mode in [MixMode::Strict, MixMode::Rectified] {
            let cfg = MixConfig {
                lambda: 0.7,
                alpha: 0.2,
                mode,
            };
            let a = augment_detailed(&x, &xp, &cfg).unwrap();
            let original = decompose(&fft2d(&x).unwrap());
            assert_eq!(a.source.phase, original.phase);
            assert!(a.imag_residue < 1e-8, "{mode}: {}", a.imag_residue);
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
