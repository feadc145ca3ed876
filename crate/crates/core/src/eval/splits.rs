//! Held-out test split, stratified folds, nested few-shot subsets and the
//! leakage audit.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{fnv1a, rng_for};

const SPLIT_STREAM: u64 = 0x5711;
const FEW_SHOT_STREAM: u64 = 0xFE75;

/// `round(num / den)` with halves rounded up, in exact integer arithmetic.
pub fn round_half_up(num: u64, den: u64) -> u64 {
    (2 * num + den) / (2 * den)
}

/// Held-out test count: `round(0.15 * n)`, halves up.
pub fn test_count(n: usize) -> usize {
    round_half_up(15 * n as u64, 100) as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset: String,
    pub seed: u64,
    pub test_ids: BTreeSet<String>,
    pub folds: Vec<BTreeSet<String>>,
    pub ssl_ids: BTreeSet<String>,
}

impl SplitManifest {
    /// Subjects outside the test set.
    pub fn pool(&self) -> BTreeSet<String> {
        self.folds.iter().flatten().cloned().collect()
    }

    /// Training ids for cross-validation fold `k`: every other fold.
    pub fn train_ids(&self, k: usize) -> BTreeSet<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }

    pub fn val_ids(&self, k: usize) -> &BTreeSet<String> {
        &self.folds[k]
    }

    /// Structural invariants: disjoint folds, folds disjoint from test,
    /// pretraining ids disjoint from test.
    pub fn validate(&self) -> Result<()> {
        for (i, f) in self.folds.iter().enumerate() {
            if let Some(id) = f.intersection(&self.test_ids).next() {
                return Err(Error::LeakageDetected(format!("fold {i} contains test subject {id}")));
            }
            for (j, g) in self.folds.iter().enumerate().skip(i + 1) {
                if let Some(id) = f.intersection(g).next() {
                    return Err(Error::LeakageDetected(format!("subject {id} is in folds {i} and {j}")));
                }
            }
        }
        if let Some(id) = self.ssl_ids.intersection(&self.test_ids).next() {
            return Err(Error::LeakageDetected(format!("test subject {id} is in the pretraining set")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Re-verifies, for one experiment, that neither pretraining, training nor
/// validation subjects touch the test set, and that training and validation
/// are disjoint.
pub fn audit(
    manifest: &SplitManifest,
    train: &BTreeSet<String>,
    val: &BTreeSet<String>,
) -> Result<()> {
    manifest.validate()?;
    for (name, set) in [("training", train), ("validation", val)] {
        if let Some(id) = set.intersection(&manifest.test_ids).next() {
            return Err(Error::LeakageDetected(format!("{name} subject {id} is in the test set")));
        }
    }
    if let Some(id) = train.intersection(val).next() {
        return Err(Error::LeakageDetected(format!("subject {id} is in training and validation")));
    }
    Ok(())
}

fn by_class(subjects: &[(String, usize)]) -> BTreeMap<usize, Vec<String>> {
    let mut m: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (id, label) in subjects {
        m.entry(*label).or_default().push(id.clone());
    }
    for ids in m.values_mut() {
        ids.sort();
    }
    m
}

/// Per-class quotas summing to `total`, proportional to class sizes
/// (largest remainder; ties to the smaller label).
fn proportional(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let mut quota: Vec<usize> = sizes.iter().map(|&s| s * total / n).collect();
    let mut rem: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(i, &s)| (s * total % n, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = total - quota.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(missing) {
        quota[i] += 1;
    }
    quota
}

/// Stratified 15% test hold-out and `n_folds` stratified folds over the rest.
/// Pretraining ids are the non-test pool.
pub fn make_splits(dataset: &str, subjects: &[(String, usize)], seed: u64, n_folds: usize) -> Result<SplitManifest> {
    let ids: BTreeSet<&String> = subjects.iter().map(|(id, _)| id).collect();
    if ids.len() != subjects.len() {
        return Err(Error::InvalidVolume("duplicate subject ids".into()));
    }
    if subjects.len() < 10 {
        return Err(Error::TooFewSubjects(format!("{} subjects, need at least 10", subjects.len())));
    }
    let classes = by_class(subjects);
    if let Some((label, ids)) = classes.iter().find(|(_, ids)| ids.len() < 2) {
        return Err(Error::TooFewSubjects(format!("class {label} has {} subjects, need 2", ids.len())));
    }
    if n_folds < 2 {
        return Err(Error::Config("need at least 2 folds".into()));
    }
    let mut rng = rng_for(&[seed, SPLIT_STREAM, fnv1a(dataset.as_bytes())]);
    let mut shuffled: Vec<Vec<String>> = classes.values().cloned().collect();
    for ids in &mut shuffled {
        ids.shuffle(&mut rng);
    }
    let sizes: Vec<usize> = shuffled.iter().map(Vec::len).collect();
    let quotas = proportional(&sizes, test_count(subjects.len()));

    let mut test_ids = BTreeSet::new();
    let mut folds = vec![BTreeSet::new(); n_folds];
    let mut next = 0;
    for (ids, &q) in shuffled.iter().zip(&quotas) {
        test_ids.extend(ids[..q].iter().cloned());
        for id in &ids[q..] {
            folds[next % n_folds].insert(id.clone());
            next += 1;
        }
    }
    let ssl_ids = folds.iter().flatten().cloned().collect();
    let m = SplitManifest {
        dataset: dataset.to_string(),
        seed,
        test_ids,
        folds,
        ssl_ids,
    };
    m.validate()?;
    Ok(m)
}

/// Nested, class-stratified subsets of `train` for each fraction (ascending
/// fractions give a superset chain). Each class keeps `round(f * n_c)`.
pub fn few_shot_subsets(train: &[(String, usize)], fractions: &[f64], seed: u64) -> Result<Vec<Vec<String>>> {
    let mut rng = rng_for(&[seed, FEW_SHOT_STREAM]);
    let mut classes: Vec<(usize, Vec<String>)> = by_class(train).into_iter().collect();
    for (_, ids) in &mut classes {
        ids.shuffle(&mut rng);
    }
    let mut sorted = fractions.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("few-shot fraction {f} outside (0, 1]")));
        }
        let mut subset = Vec::new();
        for (label, ids) in &classes {
            let k = ((f * ids.len() as f64) + 0.5).floor() as usize;
            if k == 0 {
                return Err(Error::EmptyClassAtFraction { class: *label, fraction: f });
            }
            subset.extend(ids[..k.min(ids.len())].iter().cloned());
        }
        subset.sort();
        out.push(subset);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cohort(n: usize, n_pos: usize) -> Vec<(String, usize)> {
        (0..n).map(|i| (format!("s{i:04}"), (i < n_pos) as usize)).collect()
    }

    #[test]
    fn table_counts() {
        for (n, test) in [(1812, 272), (4134, 620), (382, 57), (152, 23), (346, 52), (1107, 166), (80, 12), (588, 88)] {
            assert_eq!(test_count(n), test, "n = {n}");
        }
        let m = make_splits("nacc", &cohort(1812, 600), 0, 5).unwrap();
        assert_eq!(m.test_ids.len(), 272);
        assert_eq!(m.pool().len(), 1540);
        let m = make_splits("feta", &cohort(80, 40), 0, 5).unwrap();
        assert_eq!((m.test_ids.len(), m.pool().len()), (12, 68));
    }

    #[test]
    fn round_half_up_edges() {
        assert_eq!(round_half_up(5, 10), 1);
        assert_eq!(round_half_up(15, 10), 2);
        assert_eq!(round_half_up(14, 10), 1);
        assert_eq!(test_count(10), 2);
        assert_eq!(test_count(30), 5);
    }

    #[test]
    fn twenty_balanced() {
        let m = make_splits("d", &cohort(20, 10), 3, 5).unwrap();
        assert_eq!(m.test_ids.len(), 3);
        for f in &m.folds {
            let pos = f.iter().filter(|id| id.as_str() < "s0010").count();
            let neg = f.len() - pos;
            assert!((1..=2).contains(&pos) && (1..=2).contains(&neg), "{pos} {neg}");
        }
    }

    #[test]
    fn guards() {
        assert!(matches!(make_splits("d", &cohort(9, 4), 0, 5), Err(Error::TooFewSubjects(_))));
        assert!(matches!(make_splits("d", &cohort(12, 1), 0, 5), Err(Error::TooFewSubjects(_))));
    }

    #[test]
    fn audit_catches_corruption() {
        let m = make_splits("d", &cohort(40, 20), 1, 5).unwrap();
        let train = m.train_ids(0);
        audit(&m, &train, m.val_ids(0)).unwrap();
        let leaked = m.test_ids.iter().next().unwrap().clone();
        let mut bad = m.clone();
        bad.ssl_ids.insert(leaked.clone());
        assert!(matches!(audit(&bad, &train, m.val_ids(0)), Err(Error::LeakageDetected(_))));
        let mut bad = m.clone();
        bad.folds[2].insert(leaked.clone());
        assert!(matches!(bad.validate(), Err(Error::LeakageDetected(_))));
        let mut t2 = train.clone();
        t2.insert(leaked);
        assert!(matches!(audit(&m, &t2, m.val_ids(0)), Err(Error::LeakageDetected(_))));
        let overlap: BTreeSet<String> = [m.val_ids(0).iter().next().unwrap().clone()].into();
        let mut t3 = train;
        t3.extend(overlap.clone());
        assert!(matches!(audit(&m, &t3, &overlap), Err(Error::LeakageDetected(_))));
    }

    #[test]
    fn few_shot_chain() {
        let train = cohort(68, 34);
        let subsets = few_shot_subsets(&train, &[0.1, 0.2, 0.5, 1.0], 2).unwrap();
        for w in subsets.windows(2) {
            let a: BTreeSet<_> = w[0].iter().collect();
            let b: BTreeSet<_> = w[1].iter().collect();
            assert!(a.is_subset(&b));
        }
        assert_eq!(subsets[3].len(), 68);
        assert_eq!(subsets[0].len(), 6);
        let tiny = cohort(12, 2);
        assert!(matches!(
            few_shot_subsets(&tiny, &[0.1], 0),
            Err(Error::EmptyClassAtFraction { class: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn split_invariants(n in 10usize..300, pos_frac in 0.1f64..0.9, seed in any::<u64>()) {
            let n_pos = ((n as f64 * pos_frac) as usize).clamp(2, n - 2);
            let subjects = cohort(n, n_pos);
            let m = make_splits("p", &subjects, seed, 5).unwrap();
            prop_assert_eq!(m.test_ids.len(), test_count(n));
            prop_assert_eq!(m.test_ids.len() + m.pool().len(), n);
            let sizes: Vec<usize> = m.folds.iter().map(BTreeSet::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let pool_pos = m.pool().iter().filter(|id| subjects.iter().any(|(s, l)| s == *id && *l == 1)).count() as f64;
            for f in &m.folds {
                let pos = f.iter().filter(|id| subjects.iter().any(|(s, l)| s == *id && *l == 1)).count() as f64;
                prop_assert!((pos - pool_pos / 5.0).abs() <= 1.0);
            }
            prop_assert_eq!(make_splits("p", &subjects, seed, 5).unwrap(), m);
        }
    }
}
