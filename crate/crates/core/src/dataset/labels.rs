use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{DatasetError, Result};
use crate::record::{LabelSet, MAX_CLASSES};

/// Canonical class names of the standard vocabulary.
pub mod class {
    pub const COMPLETE_HEART_BLOCK: &str = "complete_heart_block";
    pub const AVNRT: &str = "avnrt";
    pub const MOBITZ_I: &str = "mobitz_i";
    pub const ATRIAL_FIBRILLATION: &str = "atrial_fibrillation";
    pub const ECTOPIC_ATRIAL_RHYTHM: &str = "ectopic_atrial_rhythm";
    pub const FIRST_DEGREE_AVB: &str = "first_degree_avb";
    pub const SINUS_RHYTHM: &str = "sinus_rhythm";
    pub const ATRIAL_FLUTTER: &str = "atrial_flutter";
    pub const PAC: &str = "pac";
    pub const PVC: &str = "pvc";
    pub const FUSION: &str = "fusion";
    pub const BIGEMINY: &str = "bigeminy";
    pub const BRADYCARDIA: &str = "bradycardia";
    pub const TACHYCARDIA: &str = "tachycardia";
    pub const VENTRICULAR_TACHYCARDIA: &str = "ventricular_tachycardia";
}

/// The twelve reported classes with their display names, rare classes first.
pub const TABLE1_CLASSES: [(&str, &str); 12] = [
    (class::COMPLETE_HEART_BLOCK, "Complete Heart Block"),
    (class::AVNRT, "Atrioventricular Nodal Reentry Tachycardia"),
    (class::MOBITZ_I, "2nd Degree AV Block (Mobitz I)"),
    (class::ATRIAL_FIBRILLATION, "Atrial Fibrillation"),
    (class::ECTOPIC_ATRIAL_RHYTHM, "Ectopic Atrial Rhythm"),
    (class::FIRST_DEGREE_AVB, "1st Degree AV Block"),
    (class::SINUS_RHYTHM, "Sinus Rhythm"),
    (class::ATRIAL_FLUTTER, "Atrial Flutter"),
    (class::PAC, "Premature Atrial Complexes"),
    (class::PVC, "Premature Ventricular Complexes"),
    (class::FUSION, "Fusion Complex"),
    (class::BIGEMINY, "Bigeminy"),
];

pub fn display_name(class: &str) -> &str {
    TABLE1_CLASSES
        .iter()
        .find(|(c, _)| *c == class)
        .map(|(_, d)| *d)
        .unwrap_or(class)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub synonyms: Vec<String>,
}

/// Ordered class names; bit `i` of a [`LabelSet`] is `names()[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassEntry>", into = "Vec<ClassEntry>")]
pub struct LabelVocabulary {
    names: Vec<String>,
    synonyms: Vec<Vec<String>>,
}

impl TryFrom<Vec<ClassEntry>> for LabelVocabulary {
    type Error = DatasetError;

    fn try_from(entries: Vec<ClassEntry>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<LabelVocabulary> for Vec<ClassEntry> {
    fn from(v: LabelVocabulary) -> Self {
        v.names
            .into_iter()
            .zip(v.synonyms)
            .map(|(name, synonyms)| ClassEntry { name, synonyms })
            .collect()
    }
}

impl LabelVocabulary {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.len() > MAX_CLASSES {
            return Err(DatasetError::Vocabulary(format!(
                "{} classes exceed the {MAX_CLASSES}-bit label mask",
                entries.len()
            )));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if e.name.is_empty() || !seen.insert(e.name.clone()) {
                return Err(DatasetError::Vocabulary(format!("duplicate or empty class name {:?}", e.name)));
            }
        }
        let (names, synonyms) = entries
            .into_iter()
            .map(|e| {
                let syn = e
                    .synonyms
                    .into_iter()
                    .map(|s| s.to_lowercase())
                    .filter(|s| !s.is_empty())
                    .collect();
                (e.name, syn)
            })
            .unzip();
        Ok(Self { names, synonyms })
    }

    /// The fifteen classes the generator emits.
    pub fn standard() -> Self {
        let e = |name: &str, syn: &[&str]| ClassEntry {
            name: name.into(),
            synonyms: syn.iter().map(|s| s.to_string()).collect(),
        };
        Self::new(vec![
            e(
                class::COMPLETE_HEART_BLOCK,
                &[
                    "complete heart block",
                    "complete av block",
                    "third degree av block",
                    "3rd degree av block",
                    "third degree atrioventricular block",
                ],
            ),
            e(
                class::AVNRT,
                &[
                    "atrioventricular nodal reentry tachycardia",
                    "av nodal reentrant tachycardia",
                    "av nodal reentry tachycardia",
                    "avnrt",
                ],
            ),
            e(
                class::MOBITZ_I,
                &[
                    "2nd degree av block (mobitz i)",
                    "second degree av block, mobitz i",
                    "mobitz type i",
                    "mobitz i",
                    "wenckebach",
                ],
            ),
            e(class::ATRIAL_FIBRILLATION, &["atrial fibrillation", "afib", "a-fib"]),
            e(class::ECTOPIC_ATRIAL_RHYTHM, &["ectopic atrial rhythm"]),
            e(
                class::FIRST_DEGREE_AVB,
                &[
                    "1st degree av block",
                    "first degree av block",
                    "first degree atrioventricular block",
                    "1st degree atrioventricular block",
                ],
            ),
            e(class::SINUS_RHYTHM, &["sinus rhythm"]),
            e(class::ATRIAL_FLUTTER, &["atrial flutter"]),
            e(class::PAC, &["premature atrial", "atrial premature complex"]),
            e(class::PVC, &["premature ventricular", "ventricular premature complex"]),
            e(class::FUSION, &["fusion complex", "fusion beat"]),
            e(class::BIGEMINY, &["bigeminy", "bigeminal"]),
            e(class::BRADYCARDIA, &["bradycardia"]),
            e(class::TACHYCARDIA, &["tachycardia"]),
            e(class::VENTRICULAR_TACHYCARDIA, &["ventricular tachycardia"]),
        ])
        .expect("standard vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn synonyms(&self, class: usize) -> &[String] {
        &self.synonyms[class]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| DatasetError::UnknownClass(name.to_string()))
    }

    pub fn label_set<S: AsRef<str>>(&self, names: impl IntoIterator<Item = S>) -> Result<LabelSet> {
        names.into_iter().map(|n| self.require(n.as_ref())).collect()
    }

    pub fn names_of(&self, labels: LabelSet) -> Vec<&str> {
        labels
            .iter()
            .filter(|&i| i < self.names.len())
            .map(|i| self.names[i].as_str())
            .collect()
    }

    /// Case-insensitive substring matching of synonyms against free text.
    ///
    /// Longer synonyms are matched first and claim their span of the text;
    /// a shorter synonym only fires on text no longer match already covered.
    pub fn extract_labels(&self, diagnosis_text: &str) -> LabelSet {
        let text = diagnosis_text.to_lowercase();
        let mut candidates: Vec<(&str, usize)> = self
            .synonyms
            .iter()
            .enumerate()
            .flat_map(|(class, syns)| syns.iter().map(move |s| (s.as_str(), class)))
            .collect();
        candidates.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(b.0)).then(a.1.cmp(&b.1)));
        let mut covered = vec![false; text.len()];
        let mut labels = LabelSet::empty();
        for (syn, class) in candidates {
            for (start, m) in text.match_indices(syn) {
                let span = start..start + m.len();
                if covered[span.clone()].iter().any(|&c| c) {
                    continue;
                }
                covered[span].fill(true);
                labels.insert(class);
            }
        }
        labels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &LabelVocabulary, s: LabelSet) -> Vec<&str> {
        v.names_of(s)
    }

    #[test]
    fn extraction_examples() {
        let v = LabelVocabulary::standard();
        assert_eq!(
            names(&v, v.extract_labels("ATRIAL FIBRILLATION with rapid response")),
            vec![class::ATRIAL_FIBRILLATION]
        );
        assert!(v.extract_labels("").is_empty());
        assert_eq!(
            names(&v, v.extract_labels("first degree atrioventricular block")),
            vec![class::FIRST_DEGREE_AVB]
        );
    }

    #[test]
    fn longer_synonym_shadows_contained_one() {
        let v = LabelVocabulary::new(vec![
            ClassEntry {
                name: "second".into(),
                synonyms: vec!["2nd degree av block".into()],
            },
            ClassEntry {
                name: "any".into(),
                synonyms: vec!["av block".into()],
            },
        ])
        .unwrap();
        assert_eq!(names(&v, v.extract_labels("2nd degree AV block")), vec!["second"]);
        assert_eq!(
            names(&v, v.extract_labels("2nd degree av block; later av block")),
            vec!["second", "any"]
        );
    }

    #[test]
    fn vt_text_does_not_also_fire_parent_synonym() {
        let v = LabelVocabulary::standard();
        assert_eq!(
            names(&v, v.extract_labels("Ventricular tachycardia")),
            vec![class::VENTRICULAR_TACHYCARDIA]
        );
        assert_eq!(
            names(&v, v.extract_labels("sinus rhythm with premature ventricular complexes in bigeminy")),
            vec![class::SINUS_RHYTHM, class::PVC, class::BIGEMINY]
        );
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_overflow() {
        let dup = vec![
            ClassEntry {
                name: "a".into(),
                synonyms: vec![],
            };
            2
        ];
        assert!(LabelVocabulary::new(dup).is_err());
        let many = (0..25)
            .map(|i| ClassEntry {
                name: format!("c{i}"),
                synonyms: vec![],
            })
            .collect();
        assert!(LabelVocabulary::new(many).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = LabelVocabulary::standard();
        let json = serde_json::to_string(&v).unwrap();
        let back: LabelVocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
    }
}
