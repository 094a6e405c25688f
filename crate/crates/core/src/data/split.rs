//! Object-level train/test splitting: all pixels of an object land on the
//! same side.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sample indices of each side of a split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_objects: BTreeSet<u32>,
    pub test_objects: BTreeSet<u32>,
}

/// Number of training objects for a class with `objects` objects.
pub fn train_object_count(objects: usize, fraction: f64) -> usize {
    ((objects as f64 * fraction).round() as usize).clamp(1, objects)
}

/// Draws `fraction` of each class's objects (rounded to nearest, at least
/// one) for training; every other object goes to test.
pub fn object_split(labels: &[usize], objects: &[u32], fraction: f64, seed: u64) -> Result<Split> {
    if labels.len() != objects.len() {
        return Err(Error::Invalid(format!(
            "{} labels but {} object ids",
            labels.len(),
            objects.len()
        )));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("train fraction {fraction} outside (0, 1]")));
    }
    let mut class_of: BTreeMap<u32, usize> = BTreeMap::new();
    for (&label, &object) in labels.iter().zip(objects) {
        if let Some(&other) = class_of.get(&object) {
            if other != label {
                return Err(Error::Invalid(format!(
                    "object {object} has pixels of classes {other} and {label}"
                )));
            }
        }
        class_of.insert(object, label);
    }
    let mut by_class: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (&object, &label) in &class_of {
        by_class.entry(label).or_default().push(object);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_objects = BTreeSet::new();
    for (&class, objs) in &mut by_class {
        if objs.len() < 2 {
            return Err(Error::TooFewObjects {
                class,
                objects: objs.len(),
            });
        }
        objs.shuffle(&mut rng);
        train_objects.extend(&objs[..train_object_count(objs.len(), fraction)]);
    }
    let test_objects = class_of.keys().filter(|&o| !train_objects.contains(o)).copied().collect();
    let (train, test) = (0..labels.len()).partition(|&i| train_objects.contains(&objects[i]));
    Ok(Split {
        train,
        test,
        train_objects,
        test_objects,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn ten_objects_give_three() {
        let objects: Vec<u32> = (0..10).flat_map(|o| [o, o]).collect();
        let labels = vec![0; 20];
        let s = object_split(&labels, &objects, 0.3, 1).unwrap();
        assert_eq!(s.train_objects.len(), 3);
        assert_eq!(s.train.len(), 6);
        assert_eq!(s.test.len(), 14);
    }

    #[test]
    fn rounding_and_minimum() {
        assert_eq!(train_object_count(10, 0.3), 3);
        assert_eq!(train_object_count(2, 0.3), 1);
        assert_eq!(train_object_count(5, 0.3), 2);
        assert_eq!(train_object_count(15, 0.3), 5);
    }

    #[test]
    fn too_few_objects() {
        let err = object_split(&[0, 0, 1, 1], &[1, 1, 2, 3], 0.3, 0).unwrap_err();
        assert!(matches!(err, Error::TooFewObjects { class: 0, objects: 1 }));
    }

    #[test]
    fn mixed_class_object_rejected() {
        assert!(object_split(&[0, 1], &[4, 4], 0.3, 0).is_err());
    }

    #[test]
    fn seeds_change_partition_not_counts() {
        // Five objects of one class: all C(5,2) = 10 partitions are possible.
        let objects: Vec<u32> = (0..5).collect();
        let labels = vec![0; 5];
        let mut seen = BTreeSet::new();
        for seed in 0..40 {
            let s = object_split(&labels, &objects, 0.3, seed).unwrap();
            assert_eq!(s.train_objects.len(), 2);
            seen.insert(s.train_objects.iter().copied().collect::<Vec<_>>());
        }
        assert!(seen.len() > 1);
        let a = object_split(&labels, &objects, 0.3, 7).unwrap();
        assert_eq!(a, object_split(&labels, &objects, 0.3, 7).unwrap());
    }

    proptest! {
        #[test]
        fn split_is_a_disjoint_object_partition(
            sizes in prop::collection::vec(1usize..6, 6..30),
            classes in 1usize..4,
            seed in any::<u64>(),
        ) {
            let mut labels = Vec::new();
            let mut objects = Vec::new();
            for (o, &size) in sizes.iter().enumerate() {
                for _ in 0..size {
                    labels.push(o % classes);
                    objects.push(o as u32);
                }
            }
            let s = object_split(&labels, &objects, 0.3, seed).unwrap();
            prop_assert!(s.train_objects.is_disjoint(&s.test_objects));
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            for &i in &s.train {
                prop_assert!(s.train_objects.contains(&objects[i]));
            }
            for &i in &s.test {
                prop_assert!(s.test_objects.contains(&objects[i]));
            }
            for c in 0..classes {
                let n = (0..sizes.len()).filter(|o| o % classes == c).count();
                let k = s.train_objects.iter().filter(|&&o| o as usize % classes == c).count();
                prop_assert_eq!(k, train_object_count(n, 0.3));
            }
        }
    }
}
