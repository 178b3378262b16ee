//! On-disk corpus: `root/<domain>/<subject>/{image_XXX.png, mask_XXX.png}`.
//!
//! Images are 8- or 16-bit grayscale PNGs scaled to `[0, 1]`; masks are
//! 8-bit PNGs whose values are class indices. A slice without a mask file is
//! unlabeled. Subject directories are named by their numeric id.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};

use super::{DomainTag, Sample};
use crate::error::{Error, Result};
use crate::raster::{Image, LabelMap};

fn corpus_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Corpus {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path)? {
        let p = entry?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> &str {
    p.file_name().and_then(|s| s.to_str()).unwrap_or("")
}

/// Reads an 8- or 16-bit grayscale PNG scaled to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect(),
        other => {
            return Err(corpus_err(
                path,
                format!("expected 8- or 16-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    Image::new(1, h, w, data)
}

fn read_mask(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let img = image::open(path)?;
    let DynamicImage::ImageLuma8(b) = img else {
        return Err(corpus_err(path, "masks must be 8-bit grayscale"));
    };
    let (w, h) = (b.width() as usize, b.height() as usize);
    let data = b.into_raw();
    if let Some(&bad) = data.iter().find(|&&v| usize::from(v) >= num_classes) {
        return Err(corpus_err(
            path,
            format!("label {bad} outside 0..{num_classes}"),
        ));
    }
    LabelMap::new(h, w, data)
}

/// Loads every slice under `root`. Domains and subjects are visited in
/// lexical order, slices in index order.
pub fn load_corpus(root: &Path, num_classes: usize) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(corpus_err(root, "corpus root is not a directory"));
    }
    let mut out = Vec::new();
    let mut seen: BTreeMap<u32, PathBuf> = BTreeMap::new();
    for domain_dir in sorted_dirs(root)? {
        let domain = DomainTag::new(file_name(&domain_dir));
        for subject_dir in sorted_dirs(&domain_dir)? {
            let id: u32 = file_name(&subject_dir)
                .parse()
                .map_err(|_| corpus_err(&subject_dir, "subject directory name must be a number"))?;
            if let Some(prev) = seen.insert(id, subject_dir.clone()) {
                return Err(corpus_err(
                    &subject_dir,
                    format!("subject id {id} already used by {}", prev.display()),
                ));
            }
            let mut images: Vec<PathBuf> = fs::read_dir(&subject_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| file_name(p).starts_with("image_") && file_name(p).ends_with(".png"))
                .collect();
            images.sort();
            if images.is_empty() {
                return Err(corpus_err(&subject_dir, "no image_XXX.png slices"));
            }
            for image_path in images {
                let image = read_image(&image_path)?;
                let mask_path = subject_dir.join(file_name(&image_path).replacen("image_", "mask_", 1));
                let mask = if mask_path.exists() {
                    let m = read_mask(&mask_path, num_classes)?;
                    if (m.height(), m.width()) != (image.height(), image.width()) {
                        return Err(corpus_err(&mask_path, "mask size differs from its image"));
                    }
                    Some(m)
                } else {
                    None
                };
                out.push(Sample::new(image, mask, id, domain.clone()));
            }
        }
    }
    if out.is_empty() {
        log::warn!("corpus {} contains no subjects", root.display());
    }
    Ok(out)
}

/// Writes a single-channel image as a 16-bit PNG, clamping to `[0, 1]`.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    if image.channels() != 1 {
        return Err(Error::invalid("only single-channel images can be written"));
    }
    let (h, w) = (image.height() as u32, image.width() as u32);
    let pixels: Vec<u16> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w, h, pixels).expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Writes samples in the corpus layout: 16-bit images, 8-bit masks.
pub fn write_corpus(root: &Path, samples: &[Sample]) -> Result<()> {
    let mut slice_index: BTreeMap<(DomainTag, u32), usize> = BTreeMap::new();
    for s in samples {
        if s.image.channels() != 1 {
            return Err(Error::invalid("only single-channel images can be written"));
        }
        let dir = root.join(s.domain().as_str()).join(s.subject_id.to_string());
        fs::create_dir_all(&dir)?;
        let idx = slice_index.entry((s.domain().clone(), s.subject_id)).or_insert(0);
        let (h, w) = (s.image.height() as u32, s.image.width() as u32);
        write_image(&dir.join(format!("image_{idx:03}.png")), &s.image)?;
        if let Some(m) = &s.mask {
            let buf = GrayImage::from_raw(w, h, m.data().to_vec()).expect("mask matches dimensions");
            buf.save(dir.join(format!("mask_{idx:03}.png")))?;
        }
        *idx += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_benchmark, preset_domains};

    #[test]
    fn round_trip_preserves_masks_and_quantized_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = generate_benchmark(&preset_domains()[..2], 3, 16, 3, 2).unwrap();
        samples[1].mask = None;
        write_corpus(dir.path(), &samples).unwrap();
        let loaded = load_corpus(dir.path(), 3).unwrap();
        assert_eq!(loaded.len(), samples.len());
        let mut by_id: Vec<&Sample> = samples.iter().collect();
        by_id.sort_by_key(|s| (s.domain().clone(), s.subject_id.to_string()));
        for (a, b) in by_id.iter().zip(&loaded) {
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(a.domain(), b.domain());
            assert_eq!(a.mask, b.mask);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn eight_bit_images_are_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("X").join("4");
        fs::create_dir_all(&sub).unwrap();
        GrayImage::from_raw(2, 1, vec![0, 255]).unwrap().save(sub.join("image_000.png")).unwrap();
        let s = load_corpus(dir.path(), 2).unwrap();
        assert_eq!(s[0].image.data(), &[0.0, 1.0]);
        assert!(s[0].mask.is_none());
    }

    #[test]
    fn empty_directory_gives_no_samples() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_corpus(dir.path(), 3).unwrap().is_empty());
    }

    #[test]
    fn malformed_corpora_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_corpus(&dir.path().join("missing"), 3).is_err());
        let sub = dir.path().join("X").join("1");
        fs::create_dir_all(&sub).unwrap();
        GrayImage::from_raw(2, 1, vec![0, 255]).unwrap().save(sub.join("image_000.png")).unwrap();
        GrayImage::from_raw(2, 1, vec![0, 5]).unwrap().save(sub.join("mask_000.png")).unwrap();
        assert!(load_corpus(dir.path(), 3).is_err());
        let bad = dir.path().join("X").join("subject");
        fs::create_dir_all(&bad).unwrap();
        assert!(load_corpus(dir.path(), 8).is_err());
    }
}
