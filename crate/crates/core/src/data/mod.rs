//! Samples, multi-domain synthetic scenes, leave-one-domain-out splits,
//! corpus ingestion and batch streams.
//!
//! Domain identity lives only on [`Sample`]. The training-facing types
//! ([`TrainSample`], [`SegBatch`]) carry no domain field, so nothing downstream
//! of [`make_split`] can condition on it.

mod batch;
mod corpus;
mod split;
mod synth;

pub use batch::{sample_view, AugmentFlags, BatchStream, SegBatch};
pub use corpus::{load_corpus, read_image, write_corpus, write_image};
pub use split::{make_split, Split, SplitSpec};
pub use synth::{
    apply_domain, class_level, domain_seed, generate_benchmark, generate_domain, preset_domains, render_clean,
    DomainSpec, Geometry, PRESETS,
};

use std::fmt;

use crate::raster::{Image, LabelMap};

/// Opaque identifier of an acquisition domain.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DomainTag(String);

impl DomainTag {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One 2-D slice with its ground truth and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Image,
    pub mask: Option<LabelMap>,
    pub subject_id: u32,
    hidden_domain: DomainTag,
}

impl Sample {
    pub fn new(image: Image, mask: Option<LabelMap>, subject_id: u32, domain: DomainTag) -> Self {
        Self {
            image,
            mask,
            subject_id,
            hidden_domain: domain,
        }
    }

    pub fn domain(&self) -> &DomainTag {
        &self.hidden_domain
    }
}

/// A training sample as the trainer sees it. `mask` is `Some` exactly for
/// labeled samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Image,
    pub mask: Option<LabelMap>,
    pub subject_id: u32,
}

impl TrainSample {
    pub fn labeled(&self) -> bool {
        self.mask.is_some()
    }
}
