use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainSample;
use crate::error::{Error, Result};
use crate::raster::{Image, LabelMap};
use crate::tensor::Tensor;

/// Spatial augmentations applied when sampling a training view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    pub rotation: bool,
    pub scaling: bool,
    /// Random crop position instead of the centre.
    pub crop: bool,
    pub flip: bool,
}

impl AugmentFlags {
    pub const ALL: Self = Self {
        rotation: true,
        scaling: true,
        crop: true,
        flip: true,
    };
    pub const NONE: Self = Self {
        rotation: false,
        scaling: false,
        crop: false,
        flip: false,
    };
}

const MAX_ROTATION: f64 = std::f64::consts::PI / 12.0;
const SCALE_RANGE: (f64, f64) = (0.9, 1.1);

/// Resamples image and mask under `y' = R·S·(y - c) + c`, bilinear for the
/// image and nearest for the mask, zero outside.
fn warp(image: &Image, mask: Option<&LabelMap>, angle: f64, scale: f64) -> (Image, Option<LabelMap>) {
    let (ch, h, w) = image.dims();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let source = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        (
            (cos * dy + sin * dx) / scale + cy,
            (-sin * dy + cos * dx) / scale + cx,
        )
    };
    let mut out = Image::zeros(ch, h, w);
    {
        let data = out.data_mut();
        for c in 0..ch {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = source(y, x);
                    if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                        continue;
                    }
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    let v = image.get(c, y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + image.get(c, y0, x1) * (1.0 - fy) * fx
                        + image.get(c, y1, x0) * fy * (1.0 - fx)
                        + image.get(c, y1, x1) * fy * fx;
                    data[(c * h + y) * w + x] = v;
                }
            }
        }
    }
    let mask = mask.map(|m| {
        let mut labels = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = source(y, x);
                let (ry, rx) = (sy.round(), sx.round());
                if ry >= 0.0 && rx >= 0.0 && ry < h as f64 && rx < w as f64 {
                    labels[y * w + x] = m.get(ry as usize, rx as usize);
                }
            }
        }
        LabelMap::new(h, w, labels).expect("same size")
    });
    (out, mask)
}

fn flip_image(image: &Image) -> Image {
    let (c, h, w) = image.dims();
    let mut out = image.clone();
    let src = image.data();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let x = i % w;
        *v = src[i - x + (w - 1 - x)];
    }
    debug_assert_eq!(out.dims(), (c, h, w));
    out
}

fn flip_mask(mask: &LabelMap) -> LabelMap {
    let w = mask.width();
    let src = mask.data();
    let data = (0..src.len()).map(|i| src[i - i % w + (w - 1 - i % w)]).collect();
    LabelMap::new(mask.height(), w, data).expect("same size")
}

/// One augmented `size × size` view of a sample. With every flag off this is
/// the centre crop.
pub fn sample_view(
    sample: &TrainSample,
    size: usize,
    flags: AugmentFlags,
    rng: &mut impl Rng,
) -> Result<(Image, Option<LabelMap>)> {
    let (_, h, w) = sample.image.dims();
    if h < size || w < size {
        return Err(Error::invalid(format!(
            "subject {}: image {h}x{w} is smaller than crop {size}",
            sample.subject_id
        )));
    }
    let angle = if flags.rotation {
        rng.random_range(-MAX_ROTATION..MAX_ROTATION)
    } else {
        0.0
    };
    let scale = if flags.scaling {
        rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1)
    } else {
        1.0
    };
    let (top, left) = if flags.crop {
        (rng.random_range(0..=h - size), rng.random_range(0..=w - size))
    } else {
        ((h - size) / 2, (w - size) / 2)
    };
    let flip = flags.flip && rng.random_bool(0.5);

    let (image, mask) = if angle != 0.0 || scale != 1.0 {
        warp(&sample.image, sample.mask.as_ref(), angle, scale)
    } else {
        (sample.image.clone(), sample.mask.clone())
    };
    let mut image = image.crop(top, left, size, size)?;
    let mut mask = mask.map(|m| m.crop(top, left, size, size)).transpose()?;
    if flip {
        image = flip_image(&image);
        mask = mask.map(|m| flip_mask(&m));
    }
    Ok((image, mask))
}

/// A mini-batch. `masks[i]` is `Some` exactly for labeled items.
#[derive(Clone, Debug, PartialEq)]
pub struct SegBatch {
    /// `[N, 1, S, S]`.
    pub images: Tensor,
    pub masks: Vec<Option<LabelMap>>,
    pub subject_ids: Vec<u32>,
}

impl SegBatch {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn labeled_items(&self) -> Vec<usize> {
        (0..self.masks.len()).filter(|&i| self.masks[i].is_some()).collect()
    }

    /// One-hot `[L, C, S, S]` targets for the labeled items, in order.
    pub fn labeled_targets(&self, classes: usize) -> Result<Option<Tensor>> {
        let masks: Vec<&LabelMap> = self.masks.iter().flatten().collect();
        let Some(first) = masks.first() else {
            return Ok(None);
        };
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(masks.len() * classes * h * w);
        for m in &masks {
            if usize::from(m.max_class()) >= classes {
                return Err(Error::invalid(format!(
                    "label {} outside 0..{classes}",
                    m.max_class()
                )));
            }
            data.extend(m.one_hot(classes));
        }
        Tensor::new(vec![masks.len(), classes, h, w], data).map(Some)
    }
}

/// A shuffled visiting order in which labeled items are spread as evenly
/// as possible over the consecutive `batch_size` chunks.
fn stratified_order(samples: &[TrainSample], batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = samples.len();
    let (mut labeled, mut unlabeled): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| samples[i].labeled());
    labeled.shuffle(rng);
    unlabeled.shuffle(rng);
    let batches = n.div_ceil(batch_size);
    let capacity = |b: usize| if b + 1 == batches { n - batch_size * b } else { batch_size };
    let mut slots: Vec<Vec<usize>> = (0..batches).map(|b| Vec::with_capacity(capacity(b))).collect();
    let mut b = 0;
    for i in labeled {
        while slots[b].len() == capacity(b) {
            b = (b + 1) % batches;
        }
        slots[b].push(i);
        b = (b + 1) % batches;
    }
    let mut rest = unlabeled.into_iter();
    for (b, slot) in slots.iter_mut().enumerate() {
        slot.extend(rest.by_ref().take(capacity(b) - slot.len()));
        slot.shuffle(rng);
    }
    slots.into_iter().flatten().collect()
}

/// Epoch-wise shuffled mini-batches, labeled items spread evenly over them. The order and every augmentation
/// depend only on `(seed, epoch)`.
pub struct BatchStream<'a> {
    samples: &'a [TrainSample],
    order: Vec<usize>,
    batch_size: usize,
    size: usize,
    flags: AugmentFlags,
    rng: ChaCha8Rng,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        samples: &'a [TrainSample],
        batch_size: usize,
        size: usize,
        flags: AugmentFlags,
        seed: u64,
        epoch: u64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("training pool is empty"));
        }
        if batch_size == 0 || size == 0 {
            return Err(Error::invalid("batch size and crop size must be positive"));
        }
        if let Some(s) = samples
            .iter()
            .find(|s| s.image.height() < size || s.image.width() < size)
        {
            return Err(Error::invalid(format!(
                "subject {} is smaller than crop {size}",
                s.subject_id
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let order = stratified_order(samples, batch_size, &mut rng);
        Ok(Self {
            samples,
            order,
            batch_size,
            size,
            flags,
            rng,
            cursor: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchStream<'_> {
    type Item = SegBatch;

    fn next(&mut self) -> Option<SegBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let mut images = Vec::with_capacity(end - self.cursor);
        let mut masks = Vec::with_capacity(end - self.cursor);
        let mut subject_ids = Vec::with_capacity(end - self.cursor);
        for &i in &self.order[self.cursor..end] {
            let s = &self.samples[i];
            let (img, mask) =
                sample_view(s, self.size, self.flags, &mut self.rng).expect("sizes checked in new");
            images.push(img);
            masks.push(mask);
            subject_ids.push(s.subject_id);
        }
        self.cursor = end;
        let refs: Vec<&Image> = images.iter().collect();
        Some(SegBatch {
            images: Image::stack(&refs).expect("equal crops"),
            masks,
            subject_ids,
        })
    }
}
