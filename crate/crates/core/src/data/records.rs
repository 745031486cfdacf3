use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_reader, write_atomic, CsvDoc};

/// One detected cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell_id: u64,
    pub image_id: String,
    pub row: i64,
    pub col: i64,
    /// Ground-truth type, when known, optionally followed by a sub-type
    /// after a colon, e.g. `T cells:CD4`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Label of this cell in the image's segmentation mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_label: Option<u32>,
}

impl CellRecord {
    pub fn new(cell_id: u64, image_id: impl Into<String>, row: i64, col: i64) -> Self {
        Self {
            cell_id,
            image_id: image_id.into(),
            row,
            col,
            label: None,
            mask_label: None,
        }
    }

    /// Ground-truth type without any sub-type suffix.
    pub fn type_label(&self) -> Option<&str> {
        self.label.as_deref().map(|l| l.split(':').next().unwrap_or(l))
    }
}

#[derive(Debug, Deserialize)]
struct CenterRow {
    image_id: String,
    cell_id: u64,
    row: i64,
    col: i64,
    #[serde(default)]
    label: Option<String>,
}

/// Reads a centers CSV with columns `image_id,cell_id,row,col[,label]`.
pub fn read_centers(path: &Path) -> Result<Vec<CellRecord>> {
    let mut reader = csv_reader(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let r: CenterRow = row?;
        out.push(CellRecord {
            label: r.label.filter(|l| !l.is_empty()),
            ..CellRecord::new(r.cell_id, r.image_id, r.row, r.col)
        });
    }
    let mut ids = std::collections::HashSet::new();
    if let Some(dup) = out.iter().find(|r| !ids.insert(r.cell_id)) {
        return Err(Error::Data(format!("{}: duplicate cell_id {}", path.display(), dup.cell_id)));
    }
    Ok(out)
}

pub fn write_centers(path: &Path, records: &[CellRecord]) -> Result<()> {
    let with_label = records.iter().any(|r| r.label.is_some());
    let mut header = vec!["image_id", "cell_id", "row", "col"];
    if with_label {
        header.push("label");
    }
    let mut doc = CsvDoc::new(None, &header)?;
    for r in records {
        let mut fields = vec![r.image_id.clone(), r.cell_id.to_string(), r.row.to_string(), r.col.to_string()];
        if with_label {
            fields.push(r.label.clone().unwrap_or_default());
        }
        doc.row(fields)?;
    }
    doc.save(path)
}

/// One JSON object per line.
pub fn write_jsonl(path: &Path, records: &[CellRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n")?;
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CellRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Corrupt(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records() -> Vec<CellRecord> {
        let mut a = CellRecord::new(0, "img0", 4, 5);
        a.label = Some("T cells:CD8".into());
        a.mask_label = Some(1);
        vec![a, CellRecord::new(7, "img1", -2, 300)]
    }

    #[test]
    fn centers_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_centers(&path, &records()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("image_id,cell_id,row,col,label\n"));
        let back = read_centers(&path).unwrap();
        assert_eq!(back[0].label.as_deref(), Some("T cells:CD8"));
        assert_eq!(back[0].type_label(), Some("T cells"));
        assert_eq!(back[1].label, None);
        let mut m = CellRecord::new(1, "img0", 0, 0);
        m.label = Some("MO/DC/NK".into());
        assert_eq!(m.type_label(), Some("MO/DC/NK"));
        assert_eq!((back[1].row, back[1].col), (-2, 300));
    }

    #[test]
    fn label_column_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "image_id,cell_id,row,col\na,1,2,3\n").unwrap();
        let r = read_centers(&path).unwrap();
        assert_eq!(r, vec![CellRecord::new(1, "a", 2, 3)]);
        std::fs::write(&path, "image_id,cell_id,row,col\na,1,2,3\na,1,4,4\n").unwrap();
        assert!(read_centers(&path).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_jsonl(&path, &records()).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), records());
    }
}
