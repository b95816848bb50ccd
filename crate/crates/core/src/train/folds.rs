//! Case-grouped K-fold assignment stratified by per-slice organ counts.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SliceRecord;

use super::TrainError;

/// Case id → fold index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<u32, usize>,
}

impl FoldAssignment {
    pub fn fold_of_case(&self, case: u32) -> Option<usize> {
        self.folds.get(&case).copied()
    }

    pub fn cases_in(&self, fold: usize) -> Vec<u32> {
        self.folds.iter().filter(|(_, &f)| f == fold).map(|(&c, _)| c).collect()
    }

    /// `(train, valid)` record indices for `fold`.
    pub fn split(&self, records: &[SliceRecord], fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..records.len()).partition(|&i| self.fold_of_case(records[i].id.case) != Some(fold))
    }
}

/// Per-bucket slice counts (0–3 organs present).
pub fn organ_histogram<'a>(records: impl IntoIterator<Item = &'a SliceRecord>) -> [usize; 4] {
    let mut h = [0; 4];
    for r in records {
        h[r.organ_count()] += 1;
    }
    h
}

fn proportions(h: &[usize; 4]) -> [f64; 4] {
    let n: usize = h.iter().sum();
    h.map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
}

/// Cases are visited in a seeded shuffle, larger cases first. Each goes to
/// one of the folds currently holding the fewest cases, choosing the one
/// that leaves the per-fold organ-count proportions closest (squared error)
/// to the global proportions; ties go to the lower fold index.
pub fn stratified_group_kfold(records: &[SliceRecord], k: usize, seed: u64) -> Result<FoldAssignment, TrainError> {
    if k < 2 {
        return Err(TrainError::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut per_case: BTreeMap<u32, [usize; 4]> = BTreeMap::new();
    for r in records {
        per_case.entry(r.id.case).or_default()[r.organ_count()] += 1;
    }
    if per_case.len() < k {
        return Err(TrainError::Config(format!(
            "{} distinct cases cannot fill {k} folds",
            per_case.len()
        )));
    }
    let global = proportions(&organ_histogram(records));
    let mut cases: Vec<(u32, [usize; 4])> = per_case.into_iter().collect();
    cases.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    cases.sort_by_key(|(_, h)| std::cmp::Reverse(h.iter().sum::<usize>()));

    let mut fold_hist = vec![[0usize; 4]; k];
    let mut fold_cases = vec![0usize; k];
    let mut folds = BTreeMap::new();
    let cost = |hists: &[[usize; 4]]| -> f64 {
        hists
            .iter()
            .filter(|h| h.iter().sum::<usize>() > 0)
            .map(|h| {
                let p = proportions(h);
                p.iter().zip(&global).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum()
    };
    for (case, h) in cases {
        let fewest = *fold_cases.iter().min().expect("k >= 2");
        let mut best: Option<(usize, f64)> = None;
        for f in (0..k).filter(|&f| fold_cases[f] == fewest) {
            let mut trial = fold_hist.clone();
            for b in 0..4 {
                trial[f][b] += h[b];
            }
            let c = cost(&trial);
            if best.is_none_or(|(_, bc)| c < bc) {
                best = Some((f, c));
            }
        }
        let (f, _) = best.expect("some fold has the fewest cases");
        for b in 0..4 {
            fold_hist[f][b] += h[b];
        }
        fold_cases[f] += 1;
        folds.insert(case, f);
    }
    Ok(FoldAssignment { k, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SliceId;
    use std::path::PathBuf;

    fn record(case: u32, slice: u32, organs: usize) -> SliceRecord {
        let rle = std::array::from_fn(|i| (i < organs).then(|| "1 1".to_string()));
        SliceRecord {
            id: SliceId { case, day: 1, slice },
            image_path: PathBuf::new(),
            height: 4,
            width: 4,
            rle,
        }
    }

    #[test]
    fn eight_cases_four_folds_two_each() {
        let records: Vec<_> = (1..=8)
            .flat_map(|c| (0..3).map(move |s| record(c, s, (c as usize + s as usize) % 4)))
            .collect();
        let a = stratified_group_kfold(&records, 4, 9).unwrap();
        for f in 0..4 {
            assert_eq!(a.cases_in(f).len(), 2);
        }
        for f in 0..4 {
            let (train, valid) = a.split(&records, f);
            assert_eq!(train.len() + valid.len(), records.len());
            assert!(valid.iter().all(|&i| a.fold_of_case(records[i].id.case) == Some(f)));
        }
        assert_eq!(a, stratified_group_kfold(&records, 4, 9).unwrap());
    }

    #[test]
    fn too_few_cases_is_an_error() {
        let records = vec![record(1, 1, 0), record(2, 1, 1)];
        assert!(stratified_group_kfold(&records, 3, 0).is_err());
    }
}
