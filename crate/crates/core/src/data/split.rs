use rand::seq::SliceRandom;

use super::InstanceDataset;
use crate::error::{Error, Result};
use crate::seed;

/// Class-wise random partition into `(validation, rest)`, with `n_val`
/// instances in the validation part.
pub fn split_validation(
    dataset: &InstanceDataset,
    n_val: usize,
    seed_value: u64,
) -> Result<(InstanceDataset, InstanceDataset)> {
    if n_val >= dataset.len() && !(n_val == 0 && dataset.is_empty()) {
        return Err(Error::TooFewInstances {
            requested: n_val,
            available: dataset.len(),
        });
    }
    let mut ids: Vec<&String> = dataset.instances.keys().collect();
    ids.shuffle(&mut seed::stream(seed_value, "split_validation", 0));
    let mut val = InstanceDataset::default();
    let mut rest = InstanceDataset::default();
    for (i, id) in ids.into_iter().enumerate() {
        let target = if i < n_val { &mut val } else { &mut rest };
        target.instances.insert(id.clone(), dataset.instances[id].clone());
    }
    Ok((val, rest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Instance;
    use std::collections::BTreeSet;

    fn dataset(n: usize) -> InstanceDataset {
        let mut ds = InstanceDataset::default();
        for i in 0..n {
            ds.instances.insert(
                format!("i{i:02}"),
                Instance {
                    category: "mug".into(),
                    train: vec![],
                    test: vec![],
                },
            );
        }
        ds
    }

    #[test]
    fn thirty_of_forty() {
        let ds = dataset(40);
        let (val, rest) = split_validation(&ds, 30, 0).unwrap();
        assert_eq!((val.len(), rest.len()), (30, 10));
        let a: BTreeSet<_> = val.ids().collect();
        let b: BTreeSet<_> = rest.ids().collect();
        assert!(a.is_disjoint(&b));
        let all: BTreeSet<_> = a.union(&b).copied().collect();
        assert_eq!(all, ds.ids().collect());
    }

    #[test]
    fn zero_validation() {
        let (val, rest) = split_validation(&dataset(5), 0, 3).unwrap();
        assert!(val.is_empty());
        assert_eq!(rest.len(), 5);
    }

    #[test]
    fn deterministic() {
        let ds = dataset(12);
        let a = split_validation(&ds, 5, 9).unwrap();
        let b = split_validation(&ds, 5, 9).unwrap();
        assert_eq!(a, b);
        let c = split_validation(&ds, 5, 10).unwrap();
        assert_ne!(a.0.ids().collect::<Vec<_>>(), c.0.ids().collect::<Vec<_>>());
    }

    #[test]
    fn too_many_requested() {
        assert!(matches!(
            split_validation(&dataset(3), 3, 0),
            Err(Error::TooFewInstances { .. })
        ));
    }
}
