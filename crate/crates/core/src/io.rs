//! Plain-text file formats.
//!
//! * measurements (`.rel`): `n m`, then `m` lines `i j r11 r12 r13 r21 r22 r23 r31 r32 r33`
//! * rotations (`.gt`, `.est`): `n`, then `n` lines `i r11 ... r33`
//! * edge lists (`.outliers`): one `i j` pair per line
//!
//! Indices are 1-based on disk and 0-based in memory. Reals are written with
//! 17 significant digits, which round-trips every `f64` exactly.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Matrix3;
use thiserror::Error;

use crate::so3::{project_to_so3, RotationMatrix};
use crate::sync::{EdgeLabel, RelativeMeasurement, RelativeMeasurementSet};

/// Blocks farther than this from SO(3) are projected on load.
pub const LOAD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

fn malformed<T>(line: usize, message: impl Into<String>) -> Result<T, FormatError> {
    Err(FormatError::Malformed { line, message: message.into() })
}

/// Formats a real with 17 significant digits.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// A parsed file and the number of rotation blocks that had to be projected.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<T> {
    pub value: T,
    pub projected: usize,
}

// Non-blank lines with their 1-based line numbers.
fn content_lines(reader: impl BufRead) -> Result<Vec<(usize, String)>, FormatError> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((k + 1, line));
        }
    }
    Ok(out)
}

fn parse_index(token: &str, line: usize, n: usize) -> Result<usize, FormatError> {
    match token.parse::<usize>() {
        Ok(i) if (1..=n).contains(&i) => Ok(i - 1),
        Ok(i) => malformed(line, format!("index {i} outside 1..={n}")),
        Err(_) => malformed(line, format!("invalid index '{token}'")),
    }
}

fn parse_count(token: Option<&str>, line: usize, what: &str) -> Result<usize, FormatError> {
    match token.map(str::parse::<usize>) {
        Some(Ok(v)) => Ok(v),
        _ => malformed(line, format!("expected {what}")),
    }
}

// Reads nine reals and validates them as a rotation, projecting blocks that
// are only approximately orthonormal.
fn parse_rotation(tokens: &[&str], line: usize, projected: &mut usize) -> Result<RotationMatrix, FormatError> {
    let mut entries = [0.0; 9];
    for (slot, tok) in entries.iter_mut().zip(tokens) {
        *slot = match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ => return malformed(line, format!("invalid real '{tok}'")),
        };
    }
    let m = Matrix3::from_row_slice(&entries);
    if let Ok(r) = RotationMatrix::from_matrix(m, LOAD_TOLERANCE) {
        return Ok(r);
    }
    if m.determinant() <= 0.0 {
        return malformed(line, "block has non-positive determinant");
    }
    match project_to_so3(&m) {
        Ok(r) => {
            *projected += 1;
            Ok(r)
        }
        Err(e) => malformed(line, e.to_string()),
    }
}

fn write_rotation(out: &mut impl Write, r: &RotationMatrix) -> io::Result<()> {
    for x in r.to_row_array() {
        write!(out, " {}", format_real(x))?;
    }
    writeln!(out)
}

pub fn write_measurements(mut out: impl Write, set: &RelativeMeasurementSet) -> io::Result<()> {
    writeln!(out, "{} {}", set.n(), set.len())?;
    for e in set.edges() {
        write!(out, "{} {}", e.i + 1, e.j + 1)?;
        write_rotation(&mut out, &e.rotation)?;
    }
    out.flush()
}

/// Parses a measurement file. Index order, duplicates and connectivity are
/// checked later by assembly; here `i < j` and the record count are enforced.
pub fn read_measurements(reader: impl BufRead) -> Result<Loaded<RelativeMeasurementSet>, FormatError> {
    let lines = content_lines(reader)?;
    let Some((hline, header)) = lines.first() else {
        return malformed(1, "empty file");
    };
    let mut head = header.split_whitespace();
    let n = parse_count(head.next(), *hline, "frame count n")?;
    let m = parse_count(head.next(), *hline, "edge count m")?;
    if head.next().is_some() {
        return malformed(*hline, "header must be 'n m'");
    }
    if n == 0 {
        return malformed(*hline, "n must be positive");
    }
    let records = &lines[1..];
    if records.len() != m {
        return malformed(*hline, format!("header announces {m} records, found {}", records.len()));
    }
    let mut projected = 0;
    let mut edges = Vec::with_capacity(m);
    for (line, text) in records {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() != 11 {
            return malformed(*line, format!("expected 11 fields, found {}", tokens.len()));
        }
        let i = parse_index(tokens[0], *line, n)?;
        let j = parse_index(tokens[1], *line, n)?;
        if i >= j {
            return malformed(*line, "edge indices must satisfy i < j");
        }
        let rotation = parse_rotation(&tokens[2..], *line, &mut projected)?;
        edges.push(RelativeMeasurement { i, j, rotation });
    }
    let set = RelativeMeasurementSet::new(n, edges).expect("indices validated above");
    Ok(Loaded { value: set, projected })
}

pub fn write_rotations(mut out: impl Write, rotations: &[RotationMatrix]) -> io::Result<()> {
    writeln!(out, "{}", rotations.len())?;
    for (k, r) in rotations.iter().enumerate() {
        write!(out, "{}", k + 1)?;
        write_rotation(&mut out, r)?;
    }
    out.flush()
}

/// Parses a rotation file; records may appear in any order but every index
/// `1..=n` must occur exactly once.
pub fn read_rotations(reader: impl BufRead) -> Result<Loaded<Vec<RotationMatrix>>, FormatError> {
    let lines = content_lines(reader)?;
    let Some((hline, header)) = lines.first() else {
        return malformed(1, "empty file");
    };
    let mut head = header.split_whitespace();
    let n = parse_count(head.next(), *hline, "rotation count n")?;
    if head.next().is_some() {
        return malformed(*hline, "header must be 'n'");
    }
    let records = &lines[1..];
    if records.len() != n {
        return malformed(*hline, format!("header announces {n} records, found {}", records.len()));
    }
    let mut projected = 0;
    let mut slots: Vec<Option<RotationMatrix>> = vec![None; n];
    for (line, text) in records {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() != 10 {
            return malformed(*line, format!("expected 10 fields, found {}", tokens.len()));
        }
        let i = parse_index(tokens[0], *line, n)?;
        if slots[i].is_some() {
            return malformed(*line, format!("index {} appears twice", i + 1));
        }
        slots[i] = Some(parse_rotation(&tokens[1..], *line, &mut projected)?);
    }
    let value = slots.into_iter().map(|r| r.expect("n distinct indices fill n slots")).collect();
    Ok(Loaded { value, projected })
}

pub fn write_edge_list(mut out: impl Write, edges: &[(usize, usize)]) -> io::Result<()> {
    for &(i, j) in edges {
        writeln!(out, "{} {}", i + 1, j + 1)?;
    }
    out.flush()
}

/// Parses `i j` lines into 0-based pairs with `i < j`.
pub fn read_edge_list(reader: impl BufRead) -> Result<Vec<(usize, usize)>, FormatError> {
    let mut edges = Vec::new();
    for (line, text) in content_lines(reader)? {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() != 2 {
            return malformed(line, format!("expected 2 fields, found {}", tokens.len()));
        }
        let i = parse_index(tokens[0], line, usize::MAX)?;
        let j = parse_index(tokens[1], line, usize::MAX)?;
        if i >= j {
            return malformed(line, "edge indices must satisfy i < j");
        }
        edges.push((i, j));
    }
    Ok(edges)
}

/// One `i j inlier|outlier` line per measured edge.
pub fn write_labels(mut out: impl Write, edges: &[(usize, usize)], labels: &[EdgeLabel]) -> io::Result<()> {
    for (&(i, j), label) in edges.iter().zip(labels) {
        let tag = match label {
            EdgeLabel::Inlier => "inlier",
            EdgeLabel::Outlier => "outlier",
        };
        writeln!(out, "{} {} {}", i + 1, j + 1, tag)?;
    }
    out.flush()
}

pub fn load_measurements(path: &Path) -> Result<Loaded<RelativeMeasurementSet>, FormatError> {
    read_measurements(BufReader::new(File::open(path)?))
}

pub fn load_rotations(path: &Path) -> Result<Loaded<Vec<RotationMatrix>>, FormatError> {
    read_rotations(BufReader::new(File::open(path)?))
}

pub fn load_edge_list(path: &Path) -> Result<Vec<(usize, usize)>, FormatError> {
    read_edge_list(BufReader::new(File::open(path)?))
}

/// Creates (truncates) `path` for buffered writing.
pub fn create(path: &Path) -> io::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}
