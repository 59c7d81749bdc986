//! CSV emission helpers: one-line header, one row per line, shortest
//! round-trip float formatting so identical inputs produce identical
//! bytes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

pub(crate) fn write_csv<I>(path: &Path, header: &str, rows: I) -> std::io::Result<()>
where
    I: IntoIterator,
    I::Item: AsRef<str>,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{header}")?;
    for row in rows {
        writeln!(out, "{}", row.as_ref())?;
    }
    out.flush()
}

pub(crate) fn pair_rows(rows: &[(f64, f64)]) -> Vec<String> {
    rows.iter().map(|(a, b)| format!("{a},{b}")).collect()
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, crate::Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| crate::Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| crate::Failure::Config(format!("{}: {e}", path.display())))
}
