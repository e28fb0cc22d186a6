//! CSV dataset manifests, split selection and positive-class upsampling.
//!
//! A manifest is a UTF-8 CSV with a required header. The columns
//! `id,audio_path,label,split,source` are mandatory; `copy_index` is
//! recognised when present and every other column is kept as free-form
//! metadata. Rows are numbered as file lines, so the first data row is row 2.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const SCHEMA_VERSION: u32 = 1;

const REQUIRED_COLUMNS: [&str; 5] = ["id", "audio_path", "label", "split", "source"];
const COPY_INDEX_COLUMN: &str = "copy_index";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Unlabeled,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
            Label::Unlabeled => "unlabeled",
        }
    }

    /// `Some(true)` for positive, `Some(false)` for negative.
    pub fn as_binary(self) -> Option<bool> {
        match self {
            Label::Positive => Some(true),
            Label::Negative => Some(false),
            Label::Unlabeled => None,
        }
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "positive" => Ok(Label::Positive),
            "negative" => Ok(Label::Negative),
            "unlabeled" => Ok(Label::Unlabeled),
            other => Err(format!(
                "unknown label {other:?} (expected positive, negative or unlabeled)"
            )),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split {other:?} (expected train, validation or test)"
            )),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub audio_path: PathBuf,
    pub label: Label,
    pub split: Split,
    pub source: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    /// Distinguishes upsampled duplicates of the same record.
    #[serde(default)]
    pub copy_index: u32,
}

impl DatasetRecord {
    pub fn new(
        id: impl Into<String>,
        audio_path: impl Into<PathBuf>,
        label: Label,
        split: Split,
        source: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            audio_path: audio_path.into(),
            label,
            split,
            source: source.into(),
            metadata: BTreeMap::new(),
            copy_index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<DatasetRecord>,
    pub schema_version: u32,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            schema_version: SCHEMA_VERSION,
        }
    }
}

impl DatasetManifest {
    /// Checks id uniqueness, non-empty paths and the train-only rule for
    /// unlabeled records. Row numbers in errors assume a header line.
    pub fn from_records(records: Vec<DatasetRecord>) -> Result<Self> {
        let mut seen: HashMap<(&str, u32), usize> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            let row = i + 2;
            validate_record(r, row)?;
            if let Some(&first_row) = seen.get(&(r.id.as_str(), r.copy_index)) {
                return Err(Error::DuplicateId {
                    id: r.id.clone(),
                    first_row,
                    second_row: row,
                });
            }
            seen.insert((r.id.as_str(), r.copy_index), row);
        }
        Ok(Self {
            records,
            schema_version: SCHEMA_VERSION,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        write_csv(self, &mut buf)?;
        Ok(String::from_utf8(buf).expect("csv writer emits utf-8"))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_csv(self, std::io::BufWriter::new(file))
    }
}

fn validate_record(r: &DatasetRecord, row: usize) -> Result<()> {
    if r.id.trim().is_empty() {
        return Err(Error::Manifest {
            row,
            message: "empty id".into(),
        });
    }
    if r.audio_path.as_os_str().is_empty() {
        return Err(Error::Manifest {
            row,
            message: "empty audio_path".into(),
        });
    }
    if r.label == Label::Unlabeled && r.split != Split::Train {
        return Err(Error::Manifest {
            row,
            message: format!("unlabeled record {:?} must be in the train split", r.id),
        });
    }
    Ok(())
}

fn write_csv<W: std::io::Write>(manifest: &DatasetManifest, out: W) -> Result<()> {
    let with_copy = manifest.records.iter().any(|r| r.copy_index != 0);
    let meta_keys: Vec<&String> = {
        let mut keys: Vec<&String> = manifest
            .records
            .iter()
            .flat_map(|r| r.metadata.keys())
            .collect();
        keys.sort();
        keys.dedup();
        keys
    };
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    if with_copy {
        header.push(COPY_INDEX_COLUMN);
    }
    header.extend(meta_keys.iter().map(|k| k.as_str()));
    w.write_record(&header)?;
    for r in &manifest.records {
        let path = r.audio_path.to_string_lossy();
        let mut row: Vec<String> = vec![
            r.id.clone(),
            path.into_owned(),
            r.label.to_string(),
            r.split.to_string(),
            r.source.clone(),
        ];
        if with_copy {
            row.push(r.copy_index.to_string());
        }
        for k in &meta_keys {
            row.push(r.metadata.get(*k).cloned().unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<manifest>", e))?;
    Ok(())
}

/// Parse a manifest from any reader; `parse_manifest` wraps this for files.
pub fn parse_manifest_reader<R: std::io::Read>(reader: R) -> Result<DatasetManifest> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = col(name).ok_or_else(|| Error::Manifest {
            row: 1,
            message: format!("missing required column {name:?}"),
        })?;
    }
    let copy_col = col(COPY_INDEX_COLUMN);
    let meta_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !REQUIRED_COLUMNS.contains(h) && *h != COPY_INDEX_COLUMN)
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut seen: HashMap<(String, u32), usize> = HashMap::new();
    for result in rdr.records() {
        let rec = result?;
        let row = rec.position().map_or(records.len() + 2, |p| p.line() as usize);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let manifest_err = |message: String| Error::Manifest { row, message };

        let label: Label = field(idx[2]).parse().map_err(manifest_err)?;
        let split: Split = field(idx[3]).parse().map_err(manifest_err)?;
        let copy_index = match copy_col.map(field) {
            None | Some("") => 0,
            Some(v) => v
                .parse()
                .map_err(|_| manifest_err(format!("invalid copy_index {v:?}")))?,
        };
        let metadata = meta_cols
            .iter()
            .filter_map(|(i, k)| {
                let v = field(*i);
                (!v.is_empty()).then(|| (k.clone(), v.to_string()))
            })
            .collect();
        let record = DatasetRecord {
            id: field(idx[0]).to_string(),
            audio_path: PathBuf::from(field(idx[1])),
            label,
            split,
            source: field(idx[4]).to_string(),
            metadata,
            copy_index,
        };
        validate_record(&record, row)?;
        if let Some(&first_row) = seen.get(&(record.id.clone(), copy_index)) {
            return Err(Error::DuplicateId {
                id: record.id,
                first_row,
                second_row: row,
            });
        }
        seen.insert((record.id.clone(), copy_index), row);
        rows.push(row);
        records.push(record);
    }
    Ok(DatasetManifest {
        records,
        schema_version: SCHEMA_VERSION,
    })
}

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_reader(std::io::BufReader::new(file))
}

/// Resolve a record's audio path against the manifest's directory.
pub fn resolve_audio_path(manifest_path: &Path, record: &DatasetRecord) -> PathBuf {
    if record.audio_path.is_absolute() {
        record.audio_path.clone()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&record.audio_path)
    }
}

pub fn select_split(
    manifest: &DatasetManifest,
    split: Split,
    labeled_only: bool,
) -> Vec<DatasetRecord> {
    manifest
        .records
        .iter()
        .filter(|r| r.split == split && !(labeled_only && r.label == Label::Unlabeled))
        .cloned()
        .collect()
}

/// Index plan for upsampling: each positive index appears `ratio` times with
/// copy indices `0..ratio`, each negative once, in a seeded shuffled order.
pub fn upsample_plan(labels: &[bool], ratio: u32, seed: u64) -> Result<Vec<(usize, u32)>> {
    if ratio == 0 {
        return Err(Error::InvalidArgument("upsampling ratio must be positive".into()));
    }
    let mut plan = Vec::with_capacity(labels.len() * ratio as usize);
    for (i, &positive) in labels.iter().enumerate() {
        let copies = if positive { ratio } else { 1 };
        plan.extend((0..copies).map(|c| (i, c)));
    }
    plan.shuffle(&mut rng::seeded(seed, &[0x0b_a1a2]));
    Ok(plan)
}

pub fn balance_upsample(
    records: &[DatasetRecord],
    ratio: u32,
    rng_seed: u64,
) -> Result<Vec<DatasetRecord>> {
    let labels = records
        .iter()
        .map(|r| {
            r.label.as_binary().ok_or_else(|| {
                Error::InvalidArgument(format!("record {:?} is unlabeled", r.id))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(upsample_plan(&labels, ratio, rng_seed)?
        .into_iter()
        .map(|(i, copy)| DatasetRecord {
            copy_index: copy,
            ..records[i].clone()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "id,audio_path,label,split,source\n";

    fn parse(s: &str) -> Result<DatasetManifest> {
        parse_manifest_reader(s.as_bytes())
    }

    fn rec(id: &str, label: Label, split: Split) -> DatasetRecord {
        DatasetRecord::new(id, format!("{id}.wav"), label, split, "synthetic")
    }

    #[test]
    fn parses_rows_in_order() {
        let m = parse(&format!(
            "{HEADER}a,a.wav,positive,train,x\nb,b.wav,negative,validation,y\nc,c.wav,unlabeled,train,x\n"
        ))
        .unwrap();
        let ids: Vec<_> = m.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(m.records[1].split, Split::Validation);
        assert_eq!(m.schema_version, SCHEMA_VERSION);
    }

    #[test]
    fn duplicate_id_names_both_rows() {
        let err = parse(&format!(
            "{HEADER}a1,1.wav,positive,train,x\nb,2.wav,negative,train,x\nc,3.wav,negative,train,x\na1,4.wav,negative,test,x\n"
        ))
        .unwrap_err();
        match err {
            Error::DuplicateId {
                id,
                first_row,
                second_row,
            } => {
                assert_eq!(id, "a1");
                assert_eq!((first_row, second_row), (2, 5));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_label_is_rejected() {
        let err = parse(&format!("{HEADER}a,a.wav,covid,train,x\n")).unwrap_err();
        assert!(err.to_string().contains("unknown label"), "{err}");
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn missing_column_is_rejected() {
        let err = parse("id,audio_path,label,split\na,a.wav,positive,train\n").unwrap_err();
        assert!(err.to_string().contains("source"), "{err}");
    }

    #[test]
    fn unlabeled_outside_train_is_rejected() {
        assert!(parse(&format!("{HEADER}a,a.wav,unlabeled,test,x\n")).is_err());
    }

    #[test]
    fn empty_audio_path_is_rejected() {
        assert!(parse(&format!("{HEADER}a,,positive,test,x\n")).is_err());
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            parse_manifest("/nonexistent/manifest.csv"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn metadata_and_quoting_round_trip() {
        let text = "id,audio_path,label,split,source,age,notes\na,\"dir, with comma/a.wav\",positive,train,x,34,\"said \"\"hi\"\"\"\nb,b.wav,negative,test,y,,\n".to_string();
        let m = parse(&text).unwrap();
        assert_eq!(m.records[0].metadata["notes"], "said \"hi\"");
        assert!(m.records[1].metadata.is_empty());
        let again = parse(&m.to_csv_string().unwrap()).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn select_split_filters() {
        let m = DatasetManifest::from_records(vec![
            rec("a", Label::Positive, Split::Train),
            rec("b", Label::Unlabeled, Split::Train),
            rec("c", Label::Negative, Split::Train),
            rec("d", Label::Negative, Split::Validation),
        ])
        .unwrap();
        assert_eq!(select_split(&m, Split::Validation, false).len(), 1);
        assert_eq!(select_split(&m, Split::Train, false).len(), 3);
        let labeled = select_split(&m, Split::Train, true);
        assert_eq!(
            labeled.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
            ["a", "c"]
        );
        assert!(select_split(&DatasetManifest::default(), Split::Test, false).is_empty());
    }

    fn count(records: &[DatasetRecord], id: &str) -> usize {
        records.iter().filter(|r| r.id == id).count()
    }

    #[test]
    fn upsample_four_to_one() {
        let mut records: Vec<_> = (0..10)
            .map(|i| rec(&format!("n{i}"), Label::Negative, Split::Train))
            .collect();
        records.push(rec("p0", Label::Positive, Split::Train));
        records.push(rec("p1", Label::Positive, Split::Train));
        let out = balance_upsample(&records, 4, 3).unwrap();
        assert_eq!(out.len(), 18);
        assert_eq!(count(&out, "p0"), 4);
        assert_eq!(count(&out, "p1"), 4);
        assert_eq!(count(&out, "n3"), 1);
        let mut copies: Vec<u32> = out
            .iter()
            .filter(|r| r.id == "p0")
            .map(|r| r.copy_index)
            .collect();
        copies.sort();
        assert_eq!(copies, [0, 1, 2, 3]);
    }

    #[test]
    fn upsample_five_to_one() {
        let records = vec![
            rec("n0", Label::Negative, Split::Train),
            rec("n1", Label::Negative, Split::Train),
            rec("n2", Label::Negative, Split::Train),
            rec("p", Label::Positive, Split::Train),
        ];
        let out = balance_upsample(&records, 5, 0).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(count(&out, "p"), 5);
    }

    #[test]
    fn upsample_errors() {
        let records = vec![rec("u", Label::Unlabeled, Split::Train)];
        assert!(balance_upsample(&records, 2, 0).is_err());
        assert!(balance_upsample(&[rec("n", Label::Negative, Split::Train)], 0, 0).is_err());
    }

    fn arb_manifest() -> impl Strategy<Value = DatasetManifest> {
        prop::collection::vec((0u8..3, 0u8..3), 0..40).prop_map(|rows| {
            let records = rows
                .into_iter()
                .enumerate()
                .map(|(i, (l, s))| {
                    let split = Split::ALL[s as usize];
                    let label = match l {
                        0 => Label::Positive,
                        1 => Label::Negative,
                        _ if split == Split::Train => Label::Unlabeled,
                        _ => Label::Negative,
                    };
                    rec(&format!("r{i}"), label, split)
                })
                .collect();
            DatasetManifest::from_records(records).unwrap()
        })
    }

    proptest! {
        #[test]
        fn splits_partition_the_manifest(m in arb_manifest()) {
            let mut ids: Vec<String> = Split::ALL
                .iter()
                .flat_map(|&s| select_split(&m, s, false))
                .map(|r| r.id)
                .collect();
            ids.sort();
            let mut all: Vec<String> = m.records.iter().map(|r| r.id.clone()).collect();
            all.sort();
            prop_assert_eq!(ids, all);
        }

        #[test]
        fn csv_round_trip(m in arb_manifest()) {
            let again = parse_manifest_reader(m.to_csv_string().unwrap().as_bytes()).unwrap();
            prop_assert_eq!(m, again);
        }

        #[test]
        fn upsample_counts_and_determinism(
            labels in prop::collection::vec(any::<bool>(), 0..50),
            ratio in 1u32..6,
            seed in any::<u64>(),
        ) {
            let records: Vec<_> = labels
                .iter()
                .enumerate()
                .map(|(i, &p)| rec(&format!("r{i}"), if p { Label::Positive } else { Label::Negative }, Split::Train))
                .collect();
            let a = balance_upsample(&records, ratio, seed).unwrap();
            let b = balance_upsample(&records, ratio, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let pos = labels.iter().filter(|&&p| p).count();
            prop_assert_eq!(a.len(), labels.len() - pos + ratio as usize * pos);
            if ratio == 1 {
                let mut x: Vec<_> = a.iter().map(|r| r.id.clone()).collect();
                let mut y: Vec<_> = records.iter().map(|r| r.id.clone()).collect();
                x.sort();
                y.sort();
                prop_assert_eq!(x, y);
            }
        }
    }
}
