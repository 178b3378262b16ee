use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{DomainTag, Sample};
use crate::error::{Error, Result};
use crate::raster::{Image, LabelMap};

/// Appearance model of one acquisition domain.
///
/// Rendering applies, in order: `v^gamma`, an additive plane-wave texture,
/// the intensity bias, Gaussian noise, and clipping to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: DomainTag,
    pub intensity_bias: f64,
    pub contrast_gamma: f64,
    /// Cycles per image width of the texture wave.
    pub texture_frequency: f64,
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
}

impl DomainSpec {
    /// No appearance change: rendering returns the clean scene.
    pub fn identity(id: &str) -> Self {
        Self {
            id: DomainTag::new(id),
            intensity_bias: 0.0,
            contrast_gamma: 1.0,
            texture_frequency: 0.0,
            texture_amplitude: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.contrast_gamma > 0.0) {
            return Err(Error::invalid(format!(
                "domain {}: contrast_gamma must be positive",
                self.id
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "domain {}: noise_sigma must be non-negative",
                self.id
            )));
        }
        Ok(())
    }
}

/// Preset domains `(name, bias, gamma, texture frequency, texture amplitude, noise)`.
///
/// Domain A is the outlier: bright, compressed contrast and strong
/// low-frequency shading. B-D are closer to each other.
pub const PRESETS: [(&str, f64, f64, f64, f64, f64); 4] = [
    ("A", 0.15, 0.6, 1.5, 0.12, 0.03),
    ("B", 0.00, 1.0, 6.0, 0.03, 0.02),
    ("C", -0.05, 1.4, 9.0, 0.02, 0.04),
    ("D", 0.05, 0.85, 4.0, 0.04, 0.03),
];

pub fn preset_domains() -> Vec<DomainSpec> {
    PRESETS
        .iter()
        .map(|&(name, bias, gamma, freq, amp, noise)| DomainSpec {
            id: DomainTag::new(name),
            intensity_bias: bias,
            contrast_gamma: gamma,
            texture_frequency: freq,
            texture_amplitude: amp,
            noise_sigma: noise,
        })
        .collect()
}

/// Scene layout of one subject: nested ellipses plus background distractors.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub size: usize,
    pub classes: usize,
    /// One ellipse per foreground class, outermost first:
    /// `(centre_y, centre_x, semi_axis_y, semi_axis_x)`.
    pub ellipses: Vec<(f64, f64, f64, f64)>,
    pub rotation: f64,
    /// `(centre_y, centre_x, radius)` of background blobs.
    pub distractors: Vec<(f64, f64, f64)>,
}

impl Geometry {
    pub fn random(rng: &mut impl Rng, size: usize, classes: usize) -> Self {
        let s = size as f64;
        let cy = s / 2.0 + rng.random_range(-0.08..0.08) * s;
        let cx = s / 2.0 + rng.random_range(-0.08..0.08) * s;
        let ay = rng.random_range(0.2..0.3) * s;
        let ax = rng.random_range(0.2..0.3) * s;
        let rotation = rng.random_range(0.0..std::f64::consts::PI);
        let mut ellipses = vec![(cy, cx, ay, ax)];
        let mut scale = 1.0;
        for _ in 2..classes {
            scale *= rng.random_range(0.5..0.68);
            let oy = rng.random_range(-0.08..0.08) * ay;
            let ox = rng.random_range(-0.08..0.08) * ax;
            ellipses.push((cy + oy, cx + ox, ay * scale, ax * scale));
        }
        let mut distractors = Vec::new();
        while distractors.len() < 2 {
            let (y, x) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            let r = rng.random_range(0.03..0.06) * s;
            let dy = (y - cy) / (ay + r + 2.0);
            let dx = (x - cx) / (ax + r + 2.0);
            if dy * dy + dx * dx > 1.3 {
                distractors.push((y, x, r));
            }
        }
        Self {
            size,
            classes,
            ellipses,
            rotation,
            distractors,
        }
    }

    fn inside(&self, e: (f64, f64, f64, f64), y: f64, x: f64) -> bool {
        let (sin, cos) = self.rotation.sin_cos();
        let (dy, dx) = (y - e.0, x - e.1);
        let u = dy * cos - dx * sin;
        let v = dy * sin + dx * cos;
        (u / e.2).powi(2) + (v / e.3).powi(2) <= 1.0
    }

    /// Class at a continuous position.
    fn label_at(&self, y: f64, x: f64) -> u8 {
        self.ellipses
            .iter()
            .rposition(|&e| self.inside(e, y, x))
            .map_or(0, |i| i as u8 + 1)
    }

    fn in_distractor(&self, y: f64, x: f64) -> bool {
        self.distractors
            .iter()
            .any(|&(dy, dx, r)| (y - dy).powi(2) + (x - dx).powi(2) <= r * r)
    }

    pub fn mask(&self) -> LabelMap {
        let n = self.size;
        let mut data = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                data.push(self.label_at(y as f64 + 0.5, x as f64 + 0.5));
            }
        }
        LabelMap::new(n, n, data).expect("square map")
    }
}

/// Intensity of class `k` in the clean rendering.
pub fn class_level(k: u8, classes: usize) -> f64 {
    0.15 + 0.65 * f64::from(k) / (classes - 1).max(1) as f64
}

/// Noise-free rendering with 2×2 supersampling.
pub fn render_clean(geom: &Geometry) -> Image {
    let distractor_level = class_level(1, geom.classes);
    Image::from_fn(geom.size, geom.size, |y, x| {
        let mut acc = 0.0;
        for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
            let (py, px) = (y as f64 + oy, x as f64 + ox);
            let k = geom.label_at(py, px);
            acc += if k == 0 && geom.in_distractor(py, px) {
                distractor_level
            } else {
                class_level(k, geom.classes)
            };
        }
        acc / 4.0
    })
}

/// Applies a domain's appearance transform to a clean rendering.
pub fn apply_domain(clean: &Image, spec: &DomainSpec, rng: &mut impl Rng) -> Image {
    let n = clean.width() as f64;
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let offset = rng.random_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = angle.sin_cos();
    let normal = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("sigma validated");
    let mut out = clean.clone();
    let w = clean.width();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let mut t = v.max(0.0).powf(spec.contrast_gamma);
        if spec.texture_amplitude != 0.0 {
            let phase = std::f64::consts::TAU * spec.texture_frequency * (x * cos + y * sin) / n;
            t += spec.texture_amplitude * (phase + offset).sin();
        }
        t += spec.intensity_bias;
        if spec.noise_sigma > 0.0 {
            t += normal.sample(rng);
        }
        *v = t.clamp(0.0, 1.0);
    }
    out
}

fn subject_rng(seed: u64, subject: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(subject);
    rng
}

fn domain_salt(id: &DomainTag) -> u64 {
    id.as_str()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Renders `n_subjects` single-slice subjects. Scene geometry depends only
/// on `(seed, subject index)`, so every domain sees the same anatomy for
/// the same seed; appearance randomness is additionally keyed by domain.
pub fn generate_domain(
    spec: &DomainSpec,
    n_subjects: usize,
    size: usize,
    classes: usize,
    seed: u64,
    first_subject_id: u32,
) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n_subjects == 0 {
        return Err(Error::invalid("n_subjects must be at least 1"));
    }
    if size < 8 {
        return Err(Error::invalid(format!("image size {size} is too small")));
    }
    if !(2..=255).contains(&classes) {
        return Err(Error::invalid(format!("class count {classes} unsupported")));
    }
    let salt = domain_salt(&spec.id);
    Ok((0..n_subjects)
        .into_par_iter()
        .map(|i| {
            let mut geo_rng = subject_rng(seed, i as u64, 1);
            let geom = Geometry::random(&mut geo_rng, size, classes);
            let mut app_rng = subject_rng(seed, i as u64, salt);
            let image = apply_domain(&render_clean(&geom), spec, &mut app_rng);
            Sample::new(image, Some(geom.mask()), first_subject_id + i as u32, spec.id.clone())
        })
        .collect())
}

/// All preset domains, `n_subjects` each, with pool-wide unique subject ids.
/// Seed of the `index`-th domain of a benchmark generated with `seed`.
pub fn domain_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(1_000_003 * index as u64)
}

pub fn generate_benchmark(
    domains: &[DomainSpec],
    n_subjects: usize,
    size: usize,
    classes: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(domains.len() * n_subjects);
    for (d, spec) in domains.iter().enumerate() {
        // distinct geometry per domain: subjects are different people
        out.extend(generate_domain(
            spec,
            n_subjects,
            size,
            classes,
            domain_seed(seed, d),
            (d * n_subjects) as u32,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_domain_reproduces_clean_rendering() {
        let spec = DomainSpec::identity("clean");
        let samples = generate_domain(&spec, 3, 32, 3, 9, 0).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let mut rng = subject_rng(9, i as u64, 1);
            let geom = Geometry::random(&mut rng, 32, 3);
            assert_eq!(s.image, render_clean(&geom));
            assert_eq!(s.mask.as_ref().unwrap(), &geom.mask());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = preset_domains().remove(1);
        let a = generate_domain(&spec, 4, 32, 3, 5, 0).unwrap();
        let b = generate_domain(&spec, 4, 32, 3, 5, 0).unwrap();
        assert_eq!(a, b);
        let c = generate_domain(&spec, 4, 32, 3, 6, 0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn masks_do_not_depend_on_domain() {
        let domains = preset_domains();
        let a = generate_domain(&domains[0], 5, 32, 3, 3, 0).unwrap();
        let b = generate_domain(&domains[2], 5, 32, 3, 3, 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mask, y.mask);
            assert_ne!(x.image, y.image);
        }
    }

    #[test]
    fn scenes_contain_every_class_and_stay_in_range() {
        for s in generate_benchmark(&preset_domains(), 6, 64, 3, 1).unwrap() {
            let m = s.mask.as_ref().unwrap();
            for c in 0..3 {
                assert!(m.data().contains(&c), "class {c} missing");
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mean_intensity_follows_bias_order() {
        let mut means: Vec<(f64, f64)> = preset_domains()
            .iter()
            .map(|d| {
                let s = generate_domain(d, 50, 32, 3, 21, 0).unwrap();
                let total: f64 = s.iter().flat_map(|x| x.image.data()).sum();
                (d.intensity_bias, total / (50.0 * 32.0 * 32.0))
            })
            .collect();
        means.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(means.windows(2).all(|w| w[0].1 < w[1].1), "{means:?}");
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mut spec = DomainSpec::identity("x");
        assert!(generate_domain(&spec, 0, 32, 3, 0, 0).is_err());
        assert!(generate_domain(&spec, 1, 4, 3, 0, 0).is_err());
        spec.contrast_gamma = 0.0;
        assert!(generate_domain(&spec, 1, 32, 3, 0, 0).is_err());
    }
}
