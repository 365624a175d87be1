//! The 12-lead record and its multi-label set.

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

pub const LEADS: usize = 12;
pub const SAMPLES: usize = 2500;
pub const SAMPLE_RATE_HZ: usize = 250;
pub const RECORD_SECONDS: f64 = SAMPLES as f64 / SAMPLE_RATE_HZ as f64;
/// Width of the on-disk label bitmask in use.
pub const MAX_CLASSES: usize = 24;

/// Bit set over a label vocabulary; bit `i` is class `i`.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet(u32);

impl LabelSet {
    pub const fn empty() -> Self {
        Self(0)
    }

    /// `None` when bits above [`MAX_CLASSES`] are set.
    pub fn from_bits(bits: u32) -> Option<Self> {
        (bits >> MAX_CLASSES == 0).then_some(Self(bits))
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn contains(self, class: usize) -> bool {
        class < MAX_CLASSES && self.0 & (1 << class) != 0
    }

    pub fn insert(&mut self, class: usize) {
        assert!(class < MAX_CLASSES, "class index {class} out of range");
        self.0 |= 1 << class;
    }

    pub fn remove(&mut self, class: usize) {
        if class < MAX_CLASSES {
            self.0 &= !(1 << class);
        }
    }

    pub fn with(mut self, class: usize) -> Self {
        self.insert(class);
        self
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..MAX_CLASSES).filter(move |&i| self.contains(i))
    }
}

impl FromIterator<usize> for LabelSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut s = Self::empty();
        for i in iter {
            s.insert(i);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    voltages: Vec<f32>,
    pub labels: LabelSet,
    pub source_id: String,
}

impl EcgRecord {
    /// `voltages` is lead-major, `LEADS * SAMPLES` millivolt values.
    pub fn new(voltages: Vec<f32>, labels: LabelSet, source_id: impl Into<String>) -> Option<Self> {
        (voltages.len() == LEADS * SAMPLES).then(|| Self {
            voltages,
            labels,
            source_id: source_id.into(),
        })
    }

    pub fn zeros(source_id: impl Into<String>) -> Self {
        Self {
            voltages: vec![0.0; LEADS * SAMPLES],
            labels: LabelSet::empty(),
            source_id: source_id.into(),
        }
    }

    pub fn voltages(&self) -> &[f32] {
        &self.voltages
    }

    pub fn voltages_mut(&mut self) -> &mut [f32] {
        &mut self.voltages
    }

    pub fn lead(&self, lead: usize) -> &[f32] {
        &self.voltages[lead * SAMPLES..(lead + 1) * SAMPLES]
    }

    pub fn sample_rate_hz(&self) -> usize {
        SAMPLE_RATE_HZ
    }
}

/// Stacks records into a `[B, LEADS, SAMPLES]` tensor.
pub fn stack_records<'a, T: Scalar>(records: impl IntoIterator<Item = &'a EcgRecord>) -> Option<Tensor<T>> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in records {
        data.extend(r.voltages.iter().map(|&v| T::from_f64(v as f64)));
        n += 1;
    }
    (n > 0).then(|| Tensor::new(&[n, LEADS, SAMPLES], data).expect("record length is fixed"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_bits() {
        let s: LabelSet = [0, 3, 23].into_iter().collect();
        assert!(s.contains(3) && !s.contains(2));
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![0, 3, 23]);
        assert_eq!(LabelSet::from_bits(1 << 24), None);
        assert_eq!(LabelSet::from_bits(s.bits()), Some(s));
    }

    #[test]
    fn record_shape_enforced() {
        assert!(EcgRecord::new(vec![0.0; 10], LabelSet::empty(), "x").is_none());
        let r = EcgRecord::zeros("z");
        assert_eq!(r.lead(11).len(), SAMPLES);
        let t = stack_records::<f32>([&r, &r]).unwrap();
        assert_eq!(t.shape(), &[2, LEADS, SAMPLES]);
    }
}
