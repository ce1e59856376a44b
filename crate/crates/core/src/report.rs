// SPDX-License-Identifier: MIT OR Apache-2.0

//! Output plumbing: atomic writes, sorted-key JSON and small CSV tables with
//! `#` comment headers.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Pretty JSON with object keys sorted.
pub fn to_sorted_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    // serde_json's default map is ordered by key
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Shortest round-trip decimal; NaN becomes an empty cell.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

/// CSV text builder with leading `# key=value` comment lines.
#[derive(Debug, Default, Clone)]
pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, line: impl AsRef<str>) -> &mut Self {
        let _ = writeln!(self.buf, "# {}", line.as_ref());
        self
    }

    pub fn header<S: AsRef<str>>(&mut self, cols: &[S]) -> &mut Self {
        let cells: Vec<String> = cols.iter().map(|c| escape(c.as_ref())).collect();
        let _ = writeln!(self.buf, "{}", cells.join(","));
        self
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) -> &mut Self {
        self.header(cells)
    }

    pub fn finish(&self) -> String {
        self.buf.clone()
    }
}

/// Quotes a cell when it holds a comma, quote or line break.
pub fn escape(cell: &str) -> String {
    if cell.contains([',', '"', '\n', '\r']) || cell.starts_with('#') {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}
