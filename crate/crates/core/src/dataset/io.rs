//! Record file plus JSON manifest sidecar.
//!
//! Record file layout (little-endian): `b"ECGD"`, version u32, record count
//! u32, lead count u32, sample count u32, then per record the lead-major f32
//! voltages followed by a u32 label mask.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, LabelVocabulary, Provenance, Result};
use crate::record::{EcgRecord, LabelSet, LEADS, SAMPLES};

pub const RECORD_MAGIC: [u8; 4] = *b"ECGD";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_BYTES: u64 = 20;
const RECORD_BYTES: u64 = (LEADS * SAMPLES * 4 + 4) as u64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetPaths {
    pub records: PathBuf,
    pub manifest: PathBuf,
}

impl DatasetPaths {
    /// `<base>.ecgd` and `<base>.manifest.json`. A trailing `.ecgd` on `base`
    /// is ignored.
    pub fn from_base(base: impl AsRef<Path>) -> Self {
        let base = base.as_ref();
        let base = if base.extension().is_some_and(|e| e == "ecgd") {
            base.with_extension("")
        } else {
            base.to_path_buf()
        };
        let with = |suffix: &str| {
            let mut s = base.clone().into_os_string();
            s.push(suffix);
            PathBuf::from(s)
        };
        Self {
            records: with(".ecgd"),
            manifest: with(".manifest.json"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub record_count: usize,
    pub vocabulary: LabelVocabulary,
    pub class_counts: BTreeMap<String, usize>,
    pub generator_seed: Option<u64>,
    pub source: String,
    pub record_ids: Vec<String>,
}

impl Manifest {
    pub fn describe(ds: &Dataset) -> Self {
        let counts = ds.class_counts();
        Self {
            format_version: FORMAT_VERSION,
            record_count: ds.len(),
            vocabulary: ds.vocabulary().clone(),
            class_counts: ds.vocabulary().names().iter().cloned().zip(counts).collect(),
            generator_seed: ds.provenance().generator_seed,
            source: ds.provenance().source.clone(),
            record_ids: ds.records().iter().map(|r| r.source_id.clone()).collect(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_dataset(ds: &Dataset, base: impl AsRef<Path>) -> Result<DatasetPaths> {
    let paths = DatasetPaths::from_base(base);
    let rp = &paths.records;
    let mut w = BufWriter::new(File::create(rp).map_err(io_err(rp))?);
    let mut header = Vec::with_capacity(HEADER_BYTES as usize);
    header.extend_from_slice(&RECORD_MAGIC);
    for v in [FORMAT_VERSION, ds.len() as u32, LEADS as u32, SAMPLES as u32] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&header).map_err(io_err(rp))?;
    let mut buf = Vec::with_capacity(RECORD_BYTES as usize);
    for r in ds.records() {
        buf.clear();
        for v in r.voltages() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&r.labels.bits().to_le_bytes());
        w.write_all(&buf).map_err(io_err(rp))?;
    }
    w.flush().map_err(io_err(rp))?;

    let mp = &paths.manifest;
    let json = serde_json::to_string_pretty(&Manifest::describe(ds))?;
    std::fs::write(mp, json).map_err(io_err(mp))?;
    Ok(paths)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn load_dataset(base: impl AsRef<Path>) -> Result<Dataset> {
    let paths = DatasetPaths::from_base(base);
    let mp = &paths.manifest;
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(mp).map_err(io_err(mp))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatasetError::UnsupportedVersion(manifest.format_version));
    }

    let rp = &paths.records;
    let file = File::open(rp).map_err(io_err(rp))?;
    let found = file.metadata().map_err(io_err(rp))?.len();
    let mut r = BufReader::new(file);
    if found < HEADER_BYTES {
        return Err(DatasetError::Truncated {
            needed: HEADER_BYTES,
            found,
        });
    }
    let mut header = [0u8; HEADER_BYTES as usize];
    r.read_exact(&mut header).map_err(io_err(rp))?;
    let magic: [u8; 4] = header[..4].try_into().expect("4 bytes");
    if magic != RECORD_MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    let version = u32_at(&header, 4);
    if version != FORMAT_VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let count = u32_at(&header, 8) as usize;
    let (leads, samples) = (u32_at(&header, 12) as usize, u32_at(&header, 16) as usize);
    if (leads, samples) != (LEADS, SAMPLES) {
        return Err(DatasetError::Integrity(format!(
            "record shape {leads}x{samples}, expected {LEADS}x{SAMPLES}"
        )));
    }
    let needed = HEADER_BYTES + count as u64 * RECORD_BYTES;
    if found < needed {
        return Err(DatasetError::Truncated { needed, found });
    }
    if found > needed {
        return Err(DatasetError::Integrity(format!("{} trailing bytes", found - needed)));
    }
    if manifest.record_count != count || manifest.record_ids.len() != count {
        return Err(DatasetError::Integrity(format!(
            "manifest lists {} records ({} ids), record file holds {count}",
            manifest.record_count,
            manifest.record_ids.len()
        )));
    }

    let vocab = manifest.vocabulary.clone();
    let mut records = Vec::with_capacity(count);
    let mut buf = vec![0u8; RECORD_BYTES as usize];
    for id in &manifest.record_ids {
        r.read_exact(&mut buf).map_err(io_err(rp))?;
        let (volts, mask) = buf.split_at(LEADS * SAMPLES * 4);
        let voltages = volts
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let bits = u32_at(mask, 0);
        let labels = LabelSet::from_bits(bits)
            .filter(|l| l.iter().all(|c| c < vocab.len()))
            .ok_or_else(|| DatasetError::Integrity(format!("label mask {bits:#x} of {id} outside vocabulary")))?;
        let rec = EcgRecord::new(voltages, labels, id.clone()).expect("record length checked");
        records.push(Arc::new(rec));
    }
    let ds = Dataset::new(
        records,
        vocab,
        Provenance {
            source: manifest.source.clone(),
            generator_seed: manifest.generator_seed,
        },
    );
    let recount = Manifest::describe(&ds).class_counts;
    if recount != manifest.class_counts {
        return Err(DatasetError::Integrity(
            "manifest class counts disagree with record labels".into(),
        ));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::testing::tagged;

    fn sample() -> Dataset {
        let mut ds = tagged(&[
            LabelSet::empty().with(0),
            LabelSet::empty().with(3).with(6),
            LabelSet::empty(),
        ]);
        let mut recs: Vec<EcgRecord> = ds.records().iter().map(|r| (**r).clone()).collect();
        for (i, r) in recs.iter_mut().enumerate() {
            for (j, v) in r.voltages_mut().iter_mut().enumerate() {
                *v = ((i * 7919 + j) as f32).sin() * 1.37e-3 + f32::EPSILON * j as f32;
            }
        }
        ds = Dataset::from_records(
            recs,
            ds.vocabulary().clone(),
            Provenance {
                source: "unit".into(),
                generator_seed: Some(5),
            },
        );
        ds
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        let paths = save_dataset(&ds, dir.path().join("d")).unwrap();
        assert!(paths.records.ends_with("d.ecgd"));
        let back = load_dataset(dir.path().join("d.ecgd")).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.records().iter().zip(back.records()) {
            let bits = |r: &EcgRecord| r.voltages().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.source_id, b.source_id);
        }
        assert_eq!(back.vocabulary(), ds.vocabulary());
        assert_eq!(back.provenance(), ds.provenance());
        assert_eq!(Manifest::describe(&back), Manifest::describe(&ds));
    }

    #[test]
    fn distinct_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let paths = save_dataset(&sample(), dir.path().join("d")).unwrap();
        let pristine = std::fs::read(&paths.records).unwrap();
        let manifest = std::fs::read_to_string(&paths.manifest).unwrap();

        let mut bad = pristine.clone();
        bad[0] = b'X';
        std::fs::write(&paths.records, &bad).unwrap();
        assert!(matches!(load_dataset(dir.path().join("d")), Err(DatasetError::BadMagic(_))));

        let mut bad = pristine.clone();
        bad[4] = 9;
        std::fs::write(&paths.records, &bad).unwrap();
        assert!(matches!(load_dataset(dir.path().join("d")), Err(DatasetError::UnsupportedVersion(9))));

        std::fs::write(&paths.records, &pristine[..pristine.len() - 10]).unwrap();
        assert!(matches!(load_dataset(dir.path().join("d")), Err(DatasetError::Truncated { .. })));

        std::fs::write(&paths.records, &pristine).unwrap();
        let mut m: Manifest = serde_json::from_str(&manifest).unwrap();
        *m.class_counts.get_mut("atrial_fibrillation").unwrap() += 1;
        std::fs::write(&paths.manifest, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_dataset(dir.path().join("d")), Err(DatasetError::Integrity(_))));

        std::fs::write(&paths.manifest, &manifest).unwrap();
        assert!(load_dataset(dir.path().join("d")).is_ok());
    }

    #[test]
    fn missing_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path().join("none")), Err(DatasetError::Io { .. })));
    }
}
