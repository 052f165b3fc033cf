//! CSV ingestion with missing-cell markers, and the optional column-group
//! sidecar (JSON).

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FragmentaryDataset;
use crate::error::{Error, Result};

pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub response: String,
    /// Cells equal to this (or empty) are unavailable.
    pub na_marker: String,
    /// Prepend an always-observed column of ones named [`INTERCEPT`].
    pub intercept: bool,
}

impl CsvOptions {
    pub fn new(response: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            na_marker: "NA".into(),
            intercept: true,
        }
    }
}

fn parse_cell(raw: &str, na: &str, line: usize, column: &str) -> Result<Option<f64>> {
    let t = raw.trim();
    if t.is_empty() || t == na {
        return Ok(None);
    }
    t.parse::<f64>().map(Some).map_err(|_| Error::Parse {
        row: line,
        message: format!("column '{column}': cannot parse '{t}' as a number"),
    })
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.kind() {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Parse {
            row: line,
            message: format!("row {line} has {len} fields, header has {expected_len}"),
        },
        _ => Error::Parse {
            row: line,
            message: e.to_string(),
        },
    }
}

/// Raw table: header plus cells parsed as optional reals.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

pub fn read_table<R: Read>(reader: R, na_marker: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let row = rec
            .iter()
            .zip(&header)
            .map(|(cell, col)| parse_cell(cell, na_marker, line, col))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

pub fn read_csv<R: Read>(reader: R, opts: &CsvOptions) -> Result<FragmentaryDataset> {
    let table = read_table(reader, &opts.na_marker)?;
    let resp = table
        .header
        .iter()
        .position(|h| *h == opts.response)
        .ok_or_else(|| Error::InvalidInput(format!("response column '{}' not found", opts.response)))?;
    let mut names: Vec<String> = Vec::new();
    if opts.intercept {
        names.push(INTERCEPT.to_string());
    }
    names.extend(
        table
            .header
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != resp)
            .map(|(_, h)| h.clone()),
    );
    let mut y = Vec::with_capacity(table.rows.len());
    let mut rows = Vec::with_capacity(table.rows.len());
    for (r, row) in table.rows.iter().enumerate() {
        let yi = row[resp].ok_or_else(|| Error::Parse {
            row: r + 2,
            message: format!("response '{}' is missing", opts.response),
        })?;
        y.push(yi);
        let mut cov = Vec::with_capacity(names.len());
        if opts.intercept {
            cov.push(Some(1.0));
        }
        cov.extend(row.iter().enumerate().filter(|(j, _)| *j != resp).map(|(_, v)| *v));
        rows.push(cov);
    }
    FragmentaryDataset::from_rows(y, &rows, names)
}

pub fn read_csv_path(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<FragmentaryDataset> {
    read_csv(File::open(path)?, opts)
}

/// Reads query rows and aligns them to `columns` by name. Columns absent
/// from the file are unavailable; the intercept column is always observed.
pub fn read_query<R: Read>(reader: R, columns: &[String], na_marker: &str) -> Result<Vec<Vec<Option<f64>>>> {
    let table = read_table(reader, na_marker)?;
    let lookup: Vec<Option<usize>> = columns
        .iter()
        .map(|c| table.header.iter().position(|h| h == c))
        .collect();
    Ok(table
        .rows
        .iter()
        .map(|row| {
            columns
                .iter()
                .zip(&lookup)
                .map(|(name, pos)| match pos {
                    Some(j) => row[*j],
                    None if name == INTERCEPT => Some(1.0),
                    None => None,
                })
                .collect()
        })
        .collect())
}

/// Writes the dataset back as CSV with the response first. The intercept
/// column, if present, is skipped.
pub fn write_csv<W: Write>(data: &FragmentaryDataset, writer: W, response: &str, na_marker: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let keep: Vec<usize> = (0..data.p()).filter(|&j| data.column_names()[j] != INTERCEPT).collect();
    let mut header = vec![response.to_string()];
    header.extend(keep.iter().map(|&j| data.column_names()[j].clone()));
    w.write_record(&header)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    for i in 0..data.n() {
        let mut rec = vec![format_num(data.y()[i])];
        rec.extend(keep.iter().map(|&j| match data.value(i, j) {
            Some(v) => format_num(v),
            None => na_marker.to_string(),
        }));
        w.write_record(&rec).map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same f64.
pub fn format_num(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnGroup {
    pub name: String,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupsSidecar {
    pub groups: Vec<ColumnGroup>,
}

pub fn read_groups(path: impl AsRef<Path>) -> Result<Vec<ColumnGroup>> {
    let sidecar: GroupsSidecar = serde_json::from_reader(File::open(path)?)?;
    Ok(sidecar.groups)
}

pub fn write_groups(path: impl AsRef<Path>, groups: &[ColumnGroup]) -> Result<()> {
    let sidecar = GroupsSidecar {
        groups: groups.to_vec(),
    };
    serde_json::to_writer_pretty(File::create(path)?, &sidecar)?;
    Ok(())
}

/// Maps group column names to indices in `data`.
pub fn resolve_groups(data: &FragmentaryDataset, groups: &[ColumnGroup]) -> Result<Vec<Vec<usize>>> {
    groups
        .iter()
        .map(|g| {
            g.columns
                .iter()
                .map(|c| {
                    data.column_index(c)
                        .ok_or_else(|| Error::InvalidInput(format!("group '{}' names unknown column '{c}'", g.name)))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_missing_markers() {
        let csv = "y,a,b\n1,2.5,NA\n0,,3\n1,1,1\n";
        let d = read_csv(csv.as_bytes(), &CsvOptions::new("y")).unwrap();
        assert_eq!(d.p(), 3);
        assert_eq!(d.column_names()[0], INTERCEPT);
        assert_eq!(d.row(0), vec![Some(1.0), Some(2.5), None]);
        assert_eq!(d.row(1), vec![Some(1.0), None, Some(3.0)]);
    }

    #[test]
    fn custom_marker_and_no_intercept() {
        let csv = "a,y\n.,1\n2,0\n";
        let opts = CsvOptions {
            response: "y".into(),
            na_marker: ".".into(),
            intercept: false,
        };
        let err = read_csv(csv.as_bytes(), &opts).unwrap_err();
        assert!(matches!(err, Error::EmptySubject { subject: 0 }));
    }

    #[test]
    fn ragged_row_is_reported() {
        let csv = "y,a,b\n1,2,3\n0,1\n";
        match read_csv(csv.as_bytes(), &CsvOptions::new("y")) {
            Err(Error::Parse { row, message }) => {
                assert_eq!(row, 3);
                assert!(message.contains("row 3"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_number_and_missing_response() {
        let csv = "y,a\n1,abc\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &CsvOptions::new("y")),
            Err(Error::Parse { .. })
        ));
        let csv = "y,a\nNA,1\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &CsvOptions::new("y")),
            Err(Error::Parse { row: 2, .. })
        ));
        let csv = "y,a\n1,1\n";
        assert!(read_csv(csv.as_bytes(), &CsvOptions::new("z")).is_err());
    }

    #[test]
    fn write_then_read_preserves_cells() {
        let csv = "y,a,b\n1,2.5,NA\n0,NA,3\n";
        let d = read_csv(csv.as_bytes(), &CsvOptions::new("y")).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf, "y", "NA").unwrap();
        let back = read_csv(buf.as_slice(), &CsvOptions::new("y")).unwrap();
        for i in 0..d.n() {
            assert_eq!(back.row(i), d.row(i));
        }
    }

    #[test]
    fn query_alignment() {
        let cols: Vec<String> = vec![INTERCEPT.into(), "a".into(), "b".into()];
        let q = read_query("b,a\n1,NA\n".as_bytes(), &cols, "NA").unwrap();
        assert_eq!(q, vec![vec![Some(1.0), None, Some(1.0)]]);
    }
}
