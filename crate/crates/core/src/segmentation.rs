//! Greedy piecewise-linear segmentation with a bounded rank error, and the
//! least-squares model fits used by Segments.

use crate::model::{Key, LinearModel};

/// Feasible-slope cone anchored at the first key of the current cut.
///
/// Every admitted key at local rank `r` and distance `dx` from the anchor
/// narrows the slope interval to `[(r - eps) / dx, (r + eps) / dx]`.
#[derive(Clone, Debug)]
#[allow(clippy::len_without_is_empty)]
pub struct Corridor {
    origin_key: Key,
    len: usize,
    lo_slope: f64,
    hi_slope: f64,
    eps: f64,
}

impl Corridor {
    pub fn new(origin_key: Key, eps: f64) -> Self {
        Self {
            origin_key,
            len: 1,
            lo_slope: 0.0,
            hi_slope: f64::INFINITY,
            eps,
        }
    }

    pub fn origin_key(&self) -> Key {
        self.origin_key
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn slopes(&self) -> (f64, f64) {
        (self.lo_slope, self.hi_slope)
    }

    /// Would `key` fit at the next rank? Does not modify the corridor.
    pub fn admits(&self, key: Key) -> bool {
        self.narrowed(key).is_some()
    }

    /// Admit `key` at the next rank if the corridor stays non-empty.
    pub fn push(&mut self, key: Key) -> bool {
        match self.narrowed(key) {
            Some((lo, hi)) => {
                self.lo_slope = lo;
                self.hi_slope = hi;
                self.len += 1;
                true
            }
            None => false,
        }
    }

    fn narrowed(&self, key: Key) -> Option<(f64, f64)> {
        debug_assert!(key > self.origin_key, "keys must be strictly increasing");
        if key <= self.origin_key {
            return None;
        }
        let dx = (key - self.origin_key) as f64;
        let r = self.len as f64;
        let lo = self.lo_slope.max((r - self.eps) / dx);
        let hi = self.hi_slope.min((r + self.eps) / dx);
        (lo <= hi).then_some((lo, hi))
    }

    /// Midpoint slope, or 0 for a single-key corridor.
    pub fn slope(&self) -> f64 {
        if self.hi_slope.is_finite() {
            0.5 * (self.lo_slope + self.hi_slope)
        } else {
            0.0
        }
    }

    /// Model predicting the local rank (0 at the anchor).
    pub fn model(&self) -> LinearModel {
        LinearModel::new(self.slope(), 0.0, self.origin_key)
    }
}

/// One segment of the input: `keys[start..end]` with a local-rank model.
#[derive(Clone, Debug, PartialEq)]
pub struct Cut {
    pub start: usize,
    pub end: usize,
    pub model: LinearModel,
}

impl Cut {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Single pass over strictly increasing `keys`; every emitted cut has maximum
/// rank error at most `eps` under its midpoint slope.
pub fn greedy_corridor(keys: &[Key], eps: f64) -> Vec<Cut> {
    let mut cuts = Vec::new();
    let Some(&first) = keys.first() else {
        return cuts;
    };
    let mut start = 0;
    let mut corridor = Corridor::new(first, eps);
    for (i, &key) in keys.iter().enumerate().skip(1) {
        if !corridor.push(key) {
            cuts.push(Cut {
                start,
                end: i,
                model: corridor.model(),
            });
            start = i;
            corridor = Corridor::new(key, eps);
        }
    }
    cuts.push(Cut {
        start,
        end: keys.len(),
        model: corridor.model(),
    });
    cuts
}

/// Least-squares fit of `bucket_of[i]` against `pivots[i]`, slope clamped to
/// be non-negative. Anchored at the first pivot.
pub fn fit_segment_model(pivots: &[Key], bucket_of: &[usize]) -> LinearModel {
    debug_assert_eq!(pivots.len(), bucket_of.len());
    let Some(&origin) = pivots.first() else {
        return LinearModel::ZERO;
    };
    let n = pivots.len() as f64;
    let xs = pivots.iter().map(|&p| (p - origin) as f64);
    let mean_x = xs.clone().sum::<f64>() / n;
    let mean_y = bucket_of.iter().map(|&b| b as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, &y) in xs.zip(bucket_of) {
        let dx = x - mean_x;
        sxy += dx * (y as f64 - mean_y);
        sxx += dx * dx;
    }
    if sxx == 0.0 {
        return LinearModel::new(0.0, mean_y, origin);
    }
    let slope = sxy / sxx;
    if !slope.is_finite() || slope <= 0.0 {
        return LinearModel::new(0.0, mean_y, origin);
    }
    LinearModel::new(slope, mean_y - slope * mean_x, origin)
}

/// `clamp(floor(a k + b), 0, n - 1)`.
#[inline]
pub fn model_predict_bucket(model: &LinearModel, key: Key, n_buckets: usize) -> usize {
    debug_assert!(n_buckets >= 1);
    let p = model.predict(key);
    if p <= 0.0 || p.is_nan() {
        0
    } else if p >= (n_buckets - 1) as f64 {
        n_buckets - 1
    } else {
        p as usize
    }
}

/// Least-squares key->rank fit over `keys`, then the mean absolute error of
/// the range-prediction model `m(k) / group_size`.
pub fn avg_group_error(keys: &[Key], group_size: usize) -> f64 {
    assert!(group_size >= 1 && !keys.is_empty());
    let ranks: Vec<usize> = (0..keys.len()).collect();
    // Keys are sorted, so the fitted slope is never clamped.
    let m = fit_segment_model(keys, &ranks);
    let total: f64 = keys
        .iter()
        .zip(&ranks)
        .map(|(&k, &r)| (m.predict(k) - r as f64).abs())
        .sum();
    total / keys.len() as f64 / group_size as f64
}

/// `(n, avg_group_error(keys, n))` for group sizes 1, 2, 4, ..., `max_group`.
pub fn error_curve(keys: &[Key], max_group: usize) -> Vec<(usize, f64)> {
    std::iter::successors(Some(1usize), |n| Some(n * 2))
        .take_while(|&n| n <= max_group)
        .map(|n| (n, avg_group_error(keys, n)))
        .collect()
}
