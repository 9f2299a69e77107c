use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DatasetBundle;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class share of `total` items for `ratio`, plus its fractional remainder.
fn share(ratio: f64, n: usize) -> (usize, f64) {
    let exact = ratio * n as f64;
    (exact.floor() as usize, exact - exact.floor())
}

/// Top up per-class floors to `target` by largest remainder, ties to the
/// lower class index, never taking a class below one remaining test sample.
fn top_up(alloc: &mut [usize], rem: &[f64], headroom: &[usize], target: usize) {
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));
    let mut have: usize = alloc.iter().sum();
    for c in order {
        if have >= target {
            break;
        }
        if headroom[c] > 0 {
            alloc[c] += 1;
            have += 1;
        }
    }
}

/// Stratified split of `bundle` into train/val/test by `ratios`.
pub fn split(mut bundle: DatasetBundle, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetBundle> {
    let (r_train, r_val, r_test) = ratios;
    if [r_train, r_val, r_test].iter().any(|r| !(*r > 0.0)) || (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); bundle.classes];
    for (i, &y) in bundle.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    if let Some((c, members)) = by_class.iter().enumerate().find(|(_, m)| m.len() < 3) {
        return Err(Error::config(format!(
            "class {c} has {} samples; every split needs at least one",
            members.len()
        )));
    }

    let total = bundle.samples();
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let mut train = vec![0; sizes.len()];
    let mut val = vec![0; sizes.len()];
    let mut rem_t = vec![0.0; sizes.len()];
    let mut rem_v = vec![0.0; sizes.len()];
    for (c, &n) in sizes.iter().enumerate() {
        let (t, rt) = share(r_train, n);
        let (v, rv) = share(r_val, n);
        train[c] = t.max(1);
        val[c] = v.max(1);
        while train[c] + val[c] > n - 1 {
            if train[c] > val[c] { train[c] -= 1 } else { val[c] -= 1 }
        }
        rem_t[c] = rt;
        rem_v[c] = rv;
    }
    let headroom = |train: &[usize], val: &[usize]| -> Vec<usize> {
        sizes
            .iter()
            .enumerate()
            .map(|(c, &n)| n - 1 - train[c] - val[c])
            .collect()
    };
    let room = headroom(&train, &val);
    top_up(&mut train, &rem_t, &room, (r_train * total as f64).round() as usize);
    let room = headroom(&train, &val);
    top_up(&mut val, &rem_v, &room, (r_val * total as f64).round() as usize);

    let mut r = rng::stream(seed, "split");
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut r);
        let (t, v) = (train[c], val[c]);
        splits.train.extend_from_slice(&members[..t]);
        splits.val.extend_from_slice(&members[t..t + v]);
        splits.test.extend_from_slice(&members[t + v..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    bundle.splits = Some(splits);
    Ok(bundle)
}
