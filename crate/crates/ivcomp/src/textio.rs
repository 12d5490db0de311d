//! Shared helpers for the whitespace-separated text formats used by corpus,
//! trial, and model files.
//!
//! Floats are written with `Display`, which emits the shortest decimal string
//! that parses back to the identical `f64`, so every writer/reader pair in
//! this crate round-trips bit-exactly.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Append `values` to `out` separated by single spaces.
pub fn push_floats(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
}

/// Parse a whitespace-separated run of floats. `line_no` is 1-based and only
/// used for error messages.
pub fn parse_floats(fields: &[&str], line_no: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid float {f:?}"),
            })
        })
        .collect()
}

/// Parse a single float field with a descriptive error.
pub fn parse_float(field: &str, line_no: usize, what: &str) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("invalid {what} {field:?}"),
    })
}

/// Parse a single usize field with a descriptive error.
pub fn parse_usize(field: &str, line_no: usize, what: &str) -> Result<usize> {
    field.parse::<usize>().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("invalid {what} {field:?}"),
    })
}
