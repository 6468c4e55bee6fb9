//! Domain types shared by every part of the index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hints::HintKind;

/// Index keys are 8-byte unsigned integers.
pub type Key = u64;

/// Payloads are 8 bytes as well.
pub type Value = u64;

/// A key-value pair occupying one slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entry {
    pub key: Key,
    pub value: Value,
}

impl Entry {
    pub const fn new(key: Key, value: Value) -> Self {
        Self { key, value }
    }
}

/// Half-open key range `[lo, hi)`. `hi == None` means unbounded on the right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyRange {
    pub lo: Key,
    pub hi: Option<Key>,
}

impl KeyRange {
    pub fn contains(&self, key: Key) -> bool {
        key >= self.lo && self.hi.is_none_or(|hi| key < hi)
    }

    /// Exclusive upper bound widened to 128 bits so that `+inf` is `2^64`.
    pub fn hi_wide(&self) -> u128 {
        self.hi.map_or(1u128 << 64, u128::from)
    }
}

/// Range covered by a node with `pivot` whose right sibling (at the same level)
/// starts at `successor`. The rightmost node at a level passes `None`.
pub fn range_of(pivot: Key, successor: Option<Key>) -> KeyRange {
    KeyRange {
        lo: pivot,
        hi: successor,
    }
}

/// `predict(k) = slope * (k - origin) + intercept`.
///
/// The model is anchored at `origin` (the first key it was fitted on) so that
/// keys near `u64::MAX` with small spacing keep full precision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub slope: f64,
    pub intercept: f64,
    pub origin: Key,
}

impl Default for LinearModel {
    fn default() -> Self {
        Self::ZERO
    }
}

impl LinearModel {
    pub const ZERO: LinearModel = LinearModel {
        slope: 0.0,
        intercept: 0.0,
        origin: 0,
    };

    pub fn new(slope: f64, intercept: f64, origin: Key) -> Self {
        debug_assert!(slope.is_finite() && intercept.is_finite());
        debug_assert!(slope >= 0.0);
        Self {
            slope,
            intercept,
            origin,
        }
    }

    #[inline]
    pub fn predict(&self, key: Key) -> f64 {
        let dx = key as i128 - self.origin as i128;
        self.slope * dx as f64 + self.intercept
    }

    pub fn is_finite(&self) -> bool {
        self.slope.is_finite() && self.intercept.is_finite()
    }
}

/// Every tunable of the index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    /// Slots per D-Bucket.
    pub dbucket_capacity: usize,
    /// Routing entries per S-Bucket (at most 64).
    pub sbucket_capacity: usize,
    /// Fraction of a freshly created bucket that is occupied.
    pub initial_fill_ratio: f64,
    /// Maximum rank error admitted by the segmentation corridor.
    pub corridor_error: f64,
    /// Mean SMO count at which the combined SMO switches from re-segmenting
    /// to merging neighbours.
    pub merge_threshold: u32,
    /// Neighbour segments on each side considered by the merge indicator.
    pub neighbor_window: usize,
    pub hint_kind: HintKind,
    /// Stop an in-bucket probe at the first empty slot.
    pub early_stop_on_empty: bool,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            dbucket_capacity: 256,
            sbucket_capacity: 16,
            initial_fill_ratio: 0.6,
            corridor_error: 32.0,
            merge_threshold: 3,
            neighbor_window: 1,
            hint_kind: HintKind::ClMul,
            early_stop_on_empty: true,
        }
    }
}

/// Hard cap so an S-Bucket's valid mask fits in one word.
pub const MAX_SBUCKET_CAPACITY: usize = 64;

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if self.dbucket_capacity < 2 || self.dbucket_capacity > u32::MAX as usize {
            return bad("dbucket_capacity must be >= 2");
        }
        if self.sbucket_capacity < 2 || self.sbucket_capacity > MAX_SBUCKET_CAPACITY {
            return bad("sbucket_capacity must be in [2, 64]");
        }
        if !(self.initial_fill_ratio > 0.0 && self.initial_fill_ratio <= 1.0) {
            return bad("initial_fill_ratio must be in (0, 1]");
        }
        if !self.corridor_error.is_finite() || self.corridor_error < 1.0 {
            return bad("corridor_error must be >= 1");
        }
        if self.merge_threshold < 1 {
            return bad("merge_threshold must be >= 1");
        }
        if self.neighbor_window < 1 {
            return bad("neighbor_window must be >= 1");
        }
        Ok(())
    }

    /// Pairs placed into each D-Bucket by bulk load: `floor(C_d * f)`, at least 1.
    pub fn dbucket_fill(&self) -> usize {
        ((self.dbucket_capacity as f64 * self.initial_fill_ratio).floor() as usize).max(1)
    }

    /// Target entries per S-Bucket in a freshly built Segment: `f * C_s`.
    pub fn sbucket_fill(&self) -> f64 {
        self.sbucket_capacity as f64 * self.initial_fill_ratio
    }

    /// Number of S-Buckets for a fresh Segment holding `entries` entries:
    /// `ceil(entries / (f * C_s))`, never more than one per entry.
    pub fn sbuckets_for(&self, entries: usize) -> usize {
        if entries == 0 {
            return 1;
        }
        let wanted = (entries as f64 / self.sbucket_fill()).ceil() as usize;
        // `ceil(n / (f C_s))` buckets of at most C_s entries always fit n.
        let min_fit = entries.div_ceil(self.sbucket_capacity);
        wanted.clamp(min_fit.max(1), entries)
    }
}
