//! Shared report plumbing: aligned text tables and CSV schema checks.

use crate::error::{Error, Result};

/// What a CSV column must parse as.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Text,
    Int,
    Float,
    Bool,
    /// Float column that may be empty.
    OptFloat,
}

/// Re-parses an emitted CSV against its expected header and column types.
/// Every report writer runs its output through this before handing it over.
pub fn verify_csv(text: &str, header: &str, columns: &[Column]) -> Result<()> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => {}
        other => {
            return Err(Error::Input(format!(
                "csv header mismatch: expected `{header}`, got `{}`",
                other.unwrap_or("<empty file>")
            )))
        }
    }
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Input(format!(
                "csv row {}: expected {} fields, got {}",
                lineno + 2,
                columns.len(),
                fields.len()
            )));
        }
        for (field, col) in fields.iter().zip(columns) {
            let ok = match col {
                Column::Text => !field.is_empty(),
                Column::Int => field.parse::<i64>().is_ok(),
                Column::Float => field.parse::<f64>().map(f64::is_finite).unwrap_or(false),
                Column::Bool => matches!(*field, "true" | "false"),
                Column::OptFloat => {
                    field.is_empty() || field.parse::<f64>().map(f64::is_finite).unwrap_or(false)
                }
            };
            if !ok {
                return Err(Error::Input(format!(
                    "csv row {}: field `{field}` does not parse as {col:?}",
                    lineno + 2
                )));
            }
        }
    }
    Ok(())
}

/// Left-aligns the first column and right-aligns the rest.
pub fn render_aligned(headers: &[String], rows: &[Vec<String>]) -> String {
    let ncols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(String::len).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let mut emit = |cells: &[String]| {
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            if i == 0 {
                out.push_str(&format!("{:<w$}", cell, w = widths[i]));
            } else {
                out.push_str(&format!("{:>w$}", cell, w = widths[i]));
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    emit(headers);
    emit(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    for row in rows {
        debug_assert_eq!(row.len(), ncols);
        emit(row);
    }
    out
}
