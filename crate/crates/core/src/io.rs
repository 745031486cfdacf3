use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Data(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Prefix of the comment line that tags CSV artifacts with the run hash.
pub const RUN_HASH_PREFIX: &str = "# run_hash: ";

/// Builds a CSV document in memory, optionally tagged with a run hash.
pub struct CsvDoc {
    writer: csv::Writer<Vec<u8>>,
    preamble: Vec<u8>,
}

impl CsvDoc {
    pub fn new(run_hash: Option<&str>, header: &[&str]) -> Result<Self> {
        let mut preamble = Vec::new();
        if let Some(h) = run_hash {
            preamble.extend_from_slice(format!("{RUN_HASH_PREFIX}{h}\n").as_bytes());
        }
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header)?;
        Ok(Self { writer, preamble })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn into_bytes(self) -> Result<Vec<u8>> {
        let mut out = self.preamble;
        let body = self
            .writer
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))?;
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn save(self, path: &Path) -> Result<()> {
        write_atomic(path, &self.into_bytes()?)
    }
}

/// Reads the run hash tag from the first line of a CSV artifact, if any.
pub fn csv_run_hash(path: &Path) -> Result<Option<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix(RUN_HASH_PREFIX))
        .map(|s| s.trim().to_owned()))
}

pub fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(path)?)
}

/// Run hash embedded in an artifact: the container header, the CSV tag
/// line, the PNG text chunk or the `run_hash` field of a JSON file.
pub fn artifact_run_hash(path: &Path) -> Result<Option<String>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let from_json = |v: &serde_json::Value| v.get("run_hash").and_then(|h| h.as_str()).map(str::to_owned);
    match path.extension().and_then(|e| e.to_str()) {
        Some("nxch") => Ok(from_json(&crate::container::read_header(path)?)),
        Some("png") => crate::report::png_run_hash(path),
        Some("json") => Ok(from_json(&serde_json::from_slice(&std::fs::read(path)?)?)),
        _ => csv_run_hash(path),
    }
}

/// Fails with a staleness error unless `path` was produced by the run
/// with hash `expected`.
pub fn ensure_fresh(path: &Path, expected: &str) -> Result<()> {
    match artifact_run_hash(path)? {
        Some(found) if found == expected => Ok(()),
        found => Err(Error::Stale {
            path: path.to_path_buf(),
            expected: expected.to_owned(),
            found: found.unwrap_or_else(|| "none".into()),
        }),
    }
}

/// Pretty JSON, written atomically with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Shortest round-trip formatting for floats in CSV output.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
