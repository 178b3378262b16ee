//! Overlap and boundary-distance metrics with per-class aggregation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::raster::BinaryMask;

fn check_shapes(op: &'static str, a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height(), a.width()) == (b.height(), b.width()) {
        Ok(())
    } else {
        Err(Error::shape(op, &[a.height(), a.width()], &[b.height(), b.width()]))
    }
}

/// `2·|P∩G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes("dice_score", pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p && g);
        total += usize::from(p) + usize::from(g);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Which pixels of each mask take part in the distance computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PointSet {
    /// Mask pixels with at least one 4-neighbour outside the mask (or the image).
    #[default]
    Boundary,
    /// Every mask pixel.
    Region,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HausdorffOptions {
    pub points: PointSet,
    /// `None` for the classic maximum; `Some(q)` for the `q`-th percentile
    /// (e.g. 95) of the pooled directed distances.
    pub percentile: Option<f64>,
}

impl Default for HausdorffOptions {
    fn default() -> Self {
        Self {
            points: PointSet::Boundary,
            percentile: None,
        }
    }
}

fn points(mask: &BinaryMask, set: PointSet) -> Vec<(i64, i64)> {
    let (h, w) = (mask.height(), mask.width());
    let inside = |y: i64, x: i64| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize)
    };
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !inside(y, x) {
                continue;
            }
            let keep = match set {
                PointSet::Region => true,
                PointSet::Boundary => {
                    !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1))
                }
            };
            if keep {
                out.push((y, x));
            }
        }
    }
    out
}

fn nearest(from: &[(i64, i64)], to: &[(i64, i64)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(ty, tx)| ((y - ty).pow(2) + (x - tx).pow(2)) as f64)
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Symmetric Hausdorff distance in pixels.
///
/// `Ok(None)` when exactly one mask is empty; two empty masks give `0`.
pub fn hausdorff_with(pred: &BinaryMask, gt: &BinaryMask, opts: HausdorffOptions) -> Result<Option<f64>> {
    check_shapes("hausdorff", pred, gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let (pp, gp) = (points(pred, opts.points), points(gt, opts.points));
    let mut d = nearest(&pp, &gp);
    d.extend(nearest(&gp, &pp));
    Ok(Some(match opts.percentile {
        None => d.iter().copied().fold(0.0, f64::max),
        Some(q) => percentile(&mut d, q),
    }))
}

pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    hausdorff_with(pred, gt, HausdorffOptions::default())
}

/// Nearest-rank percentile.
fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub subject_id: u32,
    pub class_id: u8,
    pub dice: f64,
    /// `None` when exactly one of the two masks is empty.
    pub hausdorff: Option<f64>,
}

impl MetricRow {
    pub const CSV_HEADER: &'static str = "subject_id,class_id,dice,hausdorff";

    pub fn to_csv(&self) -> String {
        let hd = self.hausdorff.map_or_else(|| "nan".to_string(), |v| v.to_string());
        format!("{},{},{},{}", self.subject_id, self.class_id, self.dice, hd)
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed metric row `{line}`"));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let hd: f64 = f[3].parse().map_err(|_| bad())?;
        Ok(Self {
            subject_id: f[0].parse().map_err(|_| bad())?,
            class_id: f[1].parse().map_err(|_| bad())?,
            dice: f[2].parse().map_err(|_| bad())?,
            hausdorff: (!hd.is_nan()).then_some(hd),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSummary {
    pub class_id: u8,
    pub dice: MeanStd,
    /// `None` when no subject had a defined distance for this class.
    pub hausdorff: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub per_class: Vec<ClassSummary>,
    /// Mean over classes of the per-class mean Dice.
    pub mean_dice: f64,
    /// Mean over classes of the per-class mean Hausdorff distance.
    pub mean_hausdorff: Option<f64>,
}

/// Per-class mean and population std across subjects.
pub fn aggregate(rows: &[MetricRow]) -> Result<Summary> {
    if rows.is_empty() {
        return Err(Error::invalid("cannot aggregate zero metric rows"));
    }
    let mut by_class: BTreeMap<u8, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = by_class.entry(r.class_id).or_default();
        e.0.push(r.dice);
        e.1.extend(r.hausdorff);
    }
    // sort within each class so the result does not depend on row order
    let per_class: Vec<ClassSummary> = by_class
        .into_iter()
        .map(|(class_id, (mut d, mut h))| {
            d.sort_by(f64::total_cmp);
            h.sort_by(f64::total_cmp);
            ClassSummary {
                class_id,
                dice: MeanStd::of(&d).expect("class has rows"),
                hausdorff: MeanStd::of(&h),
            }
        })
        .collect();
    let mean_dice = per_class.iter().map(|c| c.dice.mean).sum::<f64>() / per_class.len() as f64;
    let hds: Vec<f64> = per_class
        .iter()
        .filter_map(|c| c.hausdorff.map(|h| h.mean))
        .collect();
    let mean_hausdorff = (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64);
    Ok(Summary {
        per_class,
        mean_dice,
        mean_hausdorff,
    })
}
