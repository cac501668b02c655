//! Artifact writers and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ivcf_core::{Error, IteEstimate, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FAILED: &str = "FAILED";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::InvalidData(format!("cannot write {}: {e}", path.display()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io(path))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidData(e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_bytes(path, csv_string(rows)?.as_bytes())
}

/// Writes `text` to `path`, or to stdout without one.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_bytes(p, text.as_bytes()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::InvalidData(format!("stdout: {e}")))
        }
    }
}

pub fn emit_json<T: Serialize + ?Sized>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit(path, &text)
}

/// File-system friendly form of a column name.
pub fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct IteRow<'a> {
    pub unit_id: &'a str,
    pub tau_hat: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub sig10: bool,
    pub sig05: bool,
    pub fallback: bool,
    pub variance_floored: bool,
}

pub fn ite_rows<'a>(ids: &'a [String], ite: &[IteEstimate]) -> Vec<IteRow<'a>> {
    ids.iter()
        .zip(ite)
        .map(|(id, e)| IteRow {
            unit_id: id,
            tau_hat: e.tau_hat,
            se: e.se,
            ci_low: e.ci_low,
            ci_high: e.ci_high,
            p_value: e.p_value,
            sig10: e.sig10,
            sig05: e.sig05,
            fallback: e.fallback,
            variance_floored: e.variance_floored,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::InvalidData(format!("cannot read {}: {e}", path.display())))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Hashes the listed files, sorted by path, and writes the manifest.
pub fn write_manifest(dir: &Path, files: &[PathBuf]) -> Result<Manifest> {
    let mut entries = files
        .iter()
        .map(|f| {
            let (sha256, bytes) = sha256_file(&dir.join(f))?;
            Ok(ManifestEntry {
                path: f.to_string_lossy().replace('\\', "/"),
                sha256,
                bytes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest { files: entries };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("any visit/ED"), "any_visit_ED");
        assert_eq!(slug("y-1"), "y-1");
    }

    #[test]
    fn manifest_is_sorted_and_hashes_content() {
        let dir = tempfile::tempdir().unwrap();
        write_bytes(&dir.path().join("b.txt"), b"abc").unwrap();
        write_bytes(&dir.path().join("a.txt"), b"").unwrap();
        let m = write_manifest(dir.path(), &["b.txt".into(), "a.txt".into()]).unwrap();
        assert_eq!(m.files[0].path, "a.txt");
        assert_eq!(m.files[0].sha256, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(m.files[1].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(m.files[1].bytes, 3);
    }
}
