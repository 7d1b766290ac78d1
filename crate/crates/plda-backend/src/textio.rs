//! Shared helpers for the text file formats.
//!
//! All formats are UTF-8 text with whitespace-separated tokens. Floats are
//! printed with 17 significant digits so that write/read round-trips are
//! value-exact for f64. Lines starting with `#` are comments (the CLI embeds
//! a provenance header in every file it writes) and are skipped on read.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Format with 17 significant digits (1 before the point, 16 after).
pub(crate) fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Non-comment lines of a text file, paired with 1-based line numbers.
pub(crate) struct LineSource {
    path: PathBuf,
    lines: std::vec::IntoIter<(usize, String)>,
}

impl LineSource {
    pub(crate) fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(path, BufReader::new(file))
    }

    pub(crate) fn from_reader(path: &Path, reader: impl Read) -> Result<Self> {
        let mut lines = Vec::new();
        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let trimmed = line.trim_end_matches(['\r', '\n']);
            if trimmed.trim_start().starts_with('#') {
                continue;
            }
            if trimmed.trim().is_empty() {
                continue;
            }
            lines.push((idx + 1, trimmed.to_string()));
        }
        Ok(LineSource {
            path: path.to_path_buf(),
            lines: lines.into_iter(),
        })
    }

    /// Next content line, or a parse error mentioning what was expected.
    pub(crate) fn expect_line(&mut self, what: &str) -> Result<(usize, String)> {
        self.lines
            .next()
            .ok_or_else(|| Error::parse(&self.path, 0, format!("unexpected end of file, expected {what}")))
    }

    pub(crate) fn next_line(&mut self) -> Option<(usize, String)> {
        self.lines.next()
    }

    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        match self.lines.next() {
            None => Ok(()),
            Some((no, line)) => Err(Error::parse(
                &self.path,
                no,
                format!("trailing content: {:?}", truncate(&line, 40)),
            )),
        }
    }
}

pub(crate) fn parse_f64(path: &Path, line: usize, token: &str) -> Result<f64> {
    token
        .parse::<f64>()
        .map_err(|_| Error::parse(path, line, format!("invalid float {token:?}")))
}

pub(crate) fn parse_usize(path: &Path, line: usize, token: &str) -> Result<usize> {
    token
        .parse::<usize>()
        .map_err(|_| Error::parse(path, line, format!("invalid integer {token:?}")))
}

/// Parse exactly `n` whitespace-separated floats from `tokens`.
pub(crate) fn parse_floats(path: &Path, line: usize, tokens: &[&str], n: usize) -> Result<Vec<f64>> {
    if tokens.len() != n {
        return Err(Error::parse(
            path,
            line,
            format!("expected {n} float(s), found {}", tokens.len()),
        ));
    }
    tokens.iter().map(|t| parse_f64(path, line, t)).collect()
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        s.to_string()
    } else {
        format!("{}...", &s[..max])
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}
