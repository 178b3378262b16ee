use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DomainTag, Sample, TrainSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub held_out: DomainTag,
    /// Fraction of each source domain's subjects whose masks are kept.
    pub labeled_fraction: f64,
    pub seed: u64,
}

/// Leave-one-domain-out partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// Source-domain samples, shuffled and stripped of domain identity.
    pub train: Vec<TrainSample>,
    /// Every sample of the held-out domain, masks intact.
    pub test: Vec<Sample>,
}

impl Split {
    pub fn labeled_count(&self) -> usize {
        self.train.iter().filter(|s| s.labeled()).count()
    }
}

/// Holds out one domain for testing and keeps masks for
/// `ceil(labeled_fraction * subjects)` subjects of every source domain.
pub fn make_split(pool: &[Sample], spec: &SplitSpec) -> Result<Split> {
    if !(0.0..=1.0).contains(&spec.labeled_fraction) {
        return Err(Error::invalid(format!(
            "labeled_fraction must lie in [0, 1], got {}",
            spec.labeled_fraction
        )));
    }
    let mut subjects: BTreeMap<&DomainTag, BTreeSet<u32>> = BTreeMap::new();
    for s in pool {
        subjects.entry(s.domain()).or_default().insert(s.subject_id);
    }
    if !subjects.contains_key(&spec.held_out) {
        return Err(Error::invalid(format!(
            "held-out domain `{}` does not occur in the pool",
            spec.held_out
        )));
    }
    if subjects.len() < 2 {
        return Err(Error::invalid("no source domain left after holding one out"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labeled: BTreeSet<(DomainTag, u32)> = BTreeSet::new();
    for (domain, ids) in &subjects {
        if *domain == &spec.held_out {
            continue;
        }
        let with_masks: Vec<u32> = ids
            .iter()
            .copied()
            .filter(|id| {
                pool.iter()
                    .filter(|s| s.domain() == *domain && s.subject_id == *id)
                    .all(|s| s.mask.is_some())
            })
            .collect();
        let want = (spec.labeled_fraction * ids.len() as f64 - 1e-9).ceil().max(0.0) as usize;
        if want > with_masks.len() {
            return Err(Error::invalid(format!(
                "domain `{domain}` needs {want} labeled subjects but only {} have masks",
                with_masks.len()
            )));
        }
        let mut chosen = with_masks;
        chosen.shuffle(&mut rng);
        labeled.extend(chosen.into_iter().take(want).map(|id| ((*domain).clone(), id)));
    }

    if labeled.is_empty() {
        return Err(Error::invalid(format!(
            "labeled_fraction {} leaves every source domain without a labeled subject",
            spec.labeled_fraction
        )));
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in pool {
        if s.domain() == &spec.held_out {
            test.push(s.clone());
            continue;
        }
        let keep = labeled.contains(&(s.domain().clone(), s.subject_id));
        train.push(TrainSample {
            image: s.image.clone(),
            mask: if keep { s.mask.clone() } else { None },
            subject_id: s.subject_id,
        });
    }
    // pool order would otherwise reveal domain grouping
    train.shuffle(&mut rng);
    Ok(Split { train, test })
}
