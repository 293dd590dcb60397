use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Stratified k-fold splits over arbitrary class labels.
///
/// Each class is shuffled with its own stream and dealt round-robin. The
/// starting fold of each class continues where the previous class stopped,
/// so fold sizes differ by at most one as well. Index lists are sorted.
pub fn stratified_kfold<L: Ord + Copy>(labels: &[L], k: usize, seed: u64) -> Result<Vec<Split>> {
    if k < 2 {
        return Err(Error::Stratification(format!("k must be at least 2, got {k}")));
    }
    let mut classes: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    let mut validation = vec![Vec::new(); k];
    let mut next = 0usize;
    for (c, (_, mut members)) in classes.into_iter().enumerate() {
        if members.len() < k {
            return Err(Error::Stratification(format!(
                "class {c} has {} members, fewer than k={k}",
                members.len()
            )));
        }
        members.shuffle(&mut rng_from(seed, &[0xF01D, c as u64]));
        for m in members {
            validation[next % k].push(m);
            next += 1;
        }
    }
    Ok(validation
        .into_iter()
        .map(|mut v| {
            v.sort_unstable();
            let mut in_fold = vec![false; labels.len()];
            for &i in &v {
                in_fold[i] = true;
            }
            Split {
                train: (0..labels.len()).filter(|&i| !in_fold[i]).collect(),
                validation: v,
            }
        })
        .collect())
}
