//! Dot annotation text format: a `count N` line, then `N` lines of `x y`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::groundtruth::DotAnnotation;

fn line_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        offset: format!("line {line}"),
        message: message.into(),
    }
}

pub fn format_annotation(a: &DotAnnotation) -> String {
    let mut s = format!("count {}\n", a.len());
    for (x, y) in &a.points {
        // `{}` on f64 prints the shortest exact round-trip form
        writeln!(s, "{x} {y}").expect("string write");
    }
    s
}

/// Parses the text format. An empty file is an empty annotation.
pub fn parse_annotation(text: &str, path: &Path) -> Result<DotAnnotation> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((header_no, header)) = lines.next() else {
        return Ok(DotAnnotation::default());
    };
    let declared: usize = header
        .trim()
        .strip_prefix("count")
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| line_err(path, header_no + 1, format!("expected `count N`, got {header:?}")))?;

    let mut points = Vec::with_capacity(declared);
    for (no, line) in lines {
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| tok.and_then(|t| t.parse::<f64>().ok()).filter(|v| v.is_finite());
        match (parse(it.next()), parse(it.next()), it.next()) {
            (Some(x), Some(y), None) => points.push((x, y)),
            _ => return Err(line_err(path, no + 1, format!("expected `x y`, got {line:?}"))),
        }
    }
    if points.len() != declared {
        return Err(line_err(
            path,
            header_no + 1,
            format!("declared {declared} points, found {}", points.len()),
        ));
    }
    Ok(DotAnnotation::new(points))
}

pub fn read_annotation(path: impl AsRef<Path>) -> Result<DotAnnotation> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| line_err(path, 0, e.to_string()))?;
    parse_annotation(&text, path)
}

pub fn write_annotation(a: &DotAnnotation, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_annotation(a))?;
    Ok(())
}
