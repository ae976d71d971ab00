//! Dataset manifest CSV:
//!
//! ```text
//! # purify-at dataset manifest v1
//! # name=<name>
//! # num_classes=<K>
//! # count=<N>
//! # generator=<compact JSON, optional>
//! sample_id,origin
//! 0,native
//! ```

use std::fs;
use std::path::Path;

use super::{Origin, SampleId};
use crate::error::{Error, Result};

const MAGIC_LINE: &str = "# purify-at dataset manifest v1";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub entries: Vec<(SampleId, Origin)>,
    pub generator: Option<String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_csv(&self) -> Result<String> {
        let breaks = |v: &str| v.contains(['\n', '\r']);
        if breaks(&self.name) || self.generator.as_deref().is_some_and(breaks) {
            return Err(Error::Manifest("manifest header fields may not contain line breaks".into()));
        }
        let mut out = String::new();
        out.push_str(MAGIC_LINE);
        out.push('\n');
        out.push_str(&format!("# name={}\n", self.name));
        out.push_str(&format!("# num_classes={}\n", self.num_classes));
        out.push_str(&format!("# count={}\n", self.entries.len()));
        if let Some(g) = &self.generator {
            out.push_str(&format!("# generator={g}\n"));
        }
        out.push_str("sample_id,origin\n");
        for (id, origin) in &self.entries {
            out.push_str(&format!("{id},{}\n", origin.as_str()));
        }
        Ok(out)
    }

    pub fn from_csv(text: &str, file: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == MAGIC_LINE => {}
            _ => return Err(Error::parse(file, 1, "missing manifest header line")),
        }
        let mut name = None;
        let mut num_classes = None;
        let mut count = None;
        let mut generator = None;
        let mut entries = Vec::new();
        let mut in_body = false;
        for (no, line) in lines {
            if !in_body {
                if line == "sample_id,origin" {
                    in_body = true;
                    continue;
                }
                let kv = line
                    .strip_prefix("# ")
                    .and_then(|l| l.split_once('='))
                    .ok_or_else(|| Error::parse(file, no, format!("expected '# key=value', got {line:?}")))?;
                match kv {
                    ("name", v) => name = Some(v.to_string()),
                    ("num_classes", v) => {
                        num_classes = Some(v.parse().map_err(|_| Error::parse(file, no, "bad num_classes"))?)
                    }
                    ("count", v) => count = Some(v.parse::<usize>().map_err(|_| Error::parse(file, no, "bad count"))?),
                    ("generator", v) => generator = Some(v.to_string()),
                    (k, _) => return Err(Error::parse(file, no, format!("unknown header key {k:?}"))),
                }
                continue;
            }
            let (id, origin) = line
                .split_once(',')
                .ok_or_else(|| Error::parse(file, no, "expected 'sample_id,origin'"))?;
            let id: SampleId = id.parse().map_err(|_| Error::parse(file, no, format!("bad sample id {id:?}")))?;
            let origin = Origin::parse(origin).ok_or_else(|| Error::parse(file, no, format!("bad origin {origin:?}")))?;
            entries.push((id, origin));
        }
        let last = text.lines().count();
        if !in_body {
            return Err(Error::parse(file, last, "missing 'sample_id,origin' column header"));
        }
        let name = name.ok_or_else(|| Error::parse(file, last, "missing name"))?;
        let num_classes = num_classes.ok_or_else(|| Error::parse(file, last, "missing num_classes"))?;
        if count != Some(entries.len()) {
            return Err(Error::parse(
                file,
                last,
                format!("count header {count:?} does not match {} rows", entries.len()),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some((id, _)) = entries.iter().find(|(id, _)| !seen.insert(*id)) {
            return Err(Error::Manifest(format!("duplicate sample id {id} in {file}")));
        }
        Ok(Self {
            name,
            num_classes,
            entries,
            generator,
        })
    }
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::write(path, manifest.to_csv()?)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    DatasetManifest::from_csv(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_manifest_round_trips() {
        let m = DatasetManifest {
            name: "empty".into(),
            num_classes: 10,
            entries: vec![],
            generator: None,
        };
        assert_eq!(DatasetManifest::from_csv(&m.to_csv().unwrap(), "m").unwrap(), m);
    }

    #[test]
    fn all_origin_tags_round_trip() {
        let m = DatasetManifest {
            name: "mixed".into(),
            num_classes: 3,
            entries: vec![(0, Origin::Native), (7, Origin::LabelFlipped), (9, Origin::InjectedOod)],
            generator: Some(r#"{"seed":1}"#.into()),
        };
        assert_eq!(DatasetManifest::from_csv(&m.to_csv().unwrap(), "m").unwrap(), m);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let text = "# purify-at dataset manifest v1\n# name=x\n# num_classes=2\n# count=2\nsample_id,origin\n0,native\n1,alien\n";
        match DatasetManifest::from_csv(text, "f.csv") {
            Err(Error::Parse { line, file, .. }) => {
                assert_eq!(line, 7);
                assert_eq!(file, "f.csv");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let missing = "nonsense\n";
        assert!(matches!(
            DatasetManifest::from_csv(missing, "f"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn count_mismatch_rejected() {
        let text = "# purify-at dataset manifest v1\n# name=x\n# num_classes=2\n# count=3\nsample_id,origin\n0,native\n";
        assert!(matches!(DatasetManifest::from_csv(text, "f"), Err(Error::Parse { .. })));
    }
}
