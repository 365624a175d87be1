use std::marker::PhantomData;

use rand::seq::SliceRandom;

use super::{Dataset, DatasetError, Result};
use crate::record::stack_records;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// `[B, classes.len()]` 0/1 matrix for the given records.
pub fn label_matrix<T: Scalar>(ds: &Dataset, indices: &[usize], classes: &[usize]) -> Tensor<T> {
    let data = indices
        .iter()
        .flat_map(|&i| {
            let labels = ds.records()[i].labels;
            classes
                .iter()
                .map(move |&c| if labels.contains(c) { T::one() } else { T::zero() })
        })
        .collect();
    Tensor::new(&[indices.len(), classes.len()], data).expect("shape matches data")
}

/// Seeded mini-batches over one epoch.
pub struct BatchIter<'a, T> {
    ds: &'a Dataset,
    classes: Vec<usize>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _scalar: PhantomData<T>,
}

impl<T> BatchIter<'_, T> {
    /// The epoch's record permutation.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = (Tensor<T>, Tensor<T>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let x = stack_records(idx.iter().map(|&i| &*self.ds.records()[i]))?;
        Some((x, label_matrix(self.ds, idx, &self.classes)))
    }
}

/// Batches of `(voltages [B,12,2500], labels [B,H])` with the label columns
/// taken from `classes`. The permutation depends only on `(seed, epoch)`.
pub fn batch_iterator<'a, T: Scalar>(
    ds: &'a Dataset,
    classes: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIter<'a, T>> {
    if batch_size == 0 {
        return Err(DatasetError::ZeroBatch);
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream(seed, rng::domain::SHUFFLE, epoch));
    Ok(BatchIter {
        ds,
        classes: classes.to_vec(),
        order,
        batch_size,
        pos: 0,
        _scalar: PhantomData,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::testing::tagged;
    use crate::record::LabelSet;

    fn first_samples<T: Scalar>(x: &Tensor<T>) -> Vec<usize> {
        let per = x.len() / x.shape()[0];
        (0..x.shape()[0]).map(|b| x.data()[b * per].as_f64() as usize).collect()
    }

    #[test]
    fn partial_final_batch_kept() {
        let ds = tagged(&[LabelSet::empty(); 10]);
        let sizes: Vec<usize> = batch_iterator::<f32>(&ds, &[0], 3, 1, 0)
            .unwrap()
            .map(|(x, y)| {
                assert_eq!(y.shape(), &[x.shape()[0], 1]);
                x.shape()[0]
            })
            .collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn epochs_permute_differently() {
        let ds = tagged(&[LabelSet::empty(); 20]);
        let seen = |epoch| {
            batch_iterator::<f32>(&ds, &[0], 1, 9, epoch)
                .unwrap()
                .flat_map(|(x, _)| first_samples(&x))
                .collect::<Vec<_>>()
        };
        let (a, b) = (seen(0), seen(1));
        assert_ne!(a, b);
        let (mut sa, mut sb) = (a.clone(), b);
        sa.sort();
        sb.sort();
        assert_eq!(sa, (0..20).collect::<Vec<_>>());
        assert_eq!(sa, sb);
        // batch 1 follows the seeded permutation exactly
        assert_eq!(a, batch_iterator::<f32>(&ds, &[0], 1, 9, 0).unwrap().order());
    }

    #[test]
    fn labels_follow_records() {
        let ds = tagged(&[LabelSet::empty().with(2), LabelSet::empty(), LabelSet::empty().with(0).with(2)]);
        for (x, y) in batch_iterator::<f64>(&ds, &[2, 0], 2, 0, 0).unwrap() {
            for (b, &i) in first_samples(&x).iter().enumerate() {
                let want = [ds.records()[i].labels.contains(2), ds.records()[i].labels.contains(0)];
                assert_eq!(y.data()[b * 2] == 1.0, want[0]);
                assert_eq!(y.data()[b * 2 + 1] == 1.0, want[1]);
            }
        }
    }

    #[test]
    fn empty_and_zero_batch() {
        let ds = tagged(&[]);
        assert_eq!(batch_iterator::<f32>(&ds, &[], 4, 0, 0).unwrap().count(), 0);
        assert!(matches!(batch_iterator::<f32>(&ds, &[], 0, 0, 0), Err(DatasetError::ZeroBatch)));
    }
}
