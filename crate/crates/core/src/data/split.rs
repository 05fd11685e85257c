//! Deterministic, optionally stratified train/val/test splitting.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmarcError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
    /// Apportion val/test per class.
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.2,
            split_seed: 42,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, f) in [
            ("train_fraction", self.train_fraction),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                errs.push(format!("{name} {f} outside [0, 1]"));
            }
        }
        let total = self.train_fraction + self.val_fraction + self.test_fraction;
        if (total - 1.0).abs() > 1e-9 {
            errs.push(format!("split fractions sum to {total}, expected 1"));
        }
        errs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = SmarcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(SmarcError::invalid("split", format!("unknown split name {other:?}"))),
        }
    }
}

/// Item indices per split, each list in the order the shuffle produced.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// Split membership of every item, indexed by item.
    pub fn assignment(&self, n: usize) -> Vec<Option<SplitName>> {
        let mut a = vec![None; n];
        for name in [SplitName::Train, SplitName::Val, SplitName::Test] {
            for &i in self.get(name) {
                a[i] = Some(name);
            }
        }
        a
    }
}

/// Distribute `total` units over buckets proportionally to `quotas`
/// (largest remainder, ties to the lower index), never exceeding `caps`.
fn largest_remainder(quotas: &[f64], total: usize, caps: &[usize]) -> Vec<usize> {
    let mut alloc: Vec<usize> = quotas
        .iter()
        .zip(caps)
        .map(|(&q, &cap)| (q.floor() as usize).min(cap))
        .collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(alloc.iter().sum());
    while left > 0 {
        let before = left;
        for &c in &order {
            if left == 0 {
                break;
            }
            if alloc[c] < caps[c] {
                alloc[c] += 1;
                left -= 1;
            }
        }
        if left == before {
            break;
        }
    }
    alloc
}

/// Split items with labels `labels` (classes `0..num_classes`).
///
/// Val and test sizes are `round(N·fraction)` overall; in stratified mode
/// they are apportioned over classes by largest remainder so every class
/// contributes in proportion to its size. Everything left goes to train.
pub fn split(labels: &[usize], num_classes: usize, spec: &SplitSpec) -> Result<Split> {
    let errs = spec.validation_errors();
    if !errs.is_empty() {
        return Err(SmarcError::Config(errs));
    }
    let n = labels.len();
    if n == 0 {
        return Err(SmarcError::Dataset("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.split_seed);
    let n_val = (n as f64 * spec.val_fraction).round() as usize;
    let n_test = ((n as f64 * spec.test_fraction).round() as usize).min(n - n_val);

    if !spec.stratified {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let test = idx.split_off(n - n_test);
        let val = idx.split_off(idx.len() - n_val);
        return Ok(Split { train: idx, val, test });
    }

    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        let bucket = by_class
            .get_mut(l)
            .ok_or_else(|| SmarcError::Dataset(format!("label {l} out of range for {num_classes} classes")))?;
        bucket.push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(SmarcError::Dataset(format!("class {c} has no samples")));
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let val_q: Vec<f64> = counts.iter().map(|&c| c as f64 * spec.val_fraction).collect();
    let val_c = largest_remainder(&val_q, n_val, &counts);
    let room: Vec<usize> = counts.iter().zip(&val_c).map(|(c, v)| c - v).collect();
    let test_q: Vec<f64> = counts.iter().map(|&c| c as f64 * spec.test_fraction).collect();
    let test_c = largest_remainder(&test_q, n_test, &room);

    let mut out = Split::default();
    for (c, members) in by_class.iter().enumerate() {
        let (v, t) = (val_c[c], test_c[c]);
        out.val.extend_from_slice(&members[..v]);
        out.test.extend_from_slice(&members[v..v + t]);
        out.train.extend_from_slice(&members[v + t..]);
    }
    Ok(out)
}
