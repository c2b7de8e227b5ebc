//! Small CSV helpers shared by every emitted file.

use std::path::Path;

use crate::error::{io_err, LabError, Result};

/// Shortest representation that parses back to the same bits.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Header followed by rows of already formatted fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        // Writing to memory cannot fail.
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Table> {
        let parse = |e: csv::Error| LabError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let mut r = csv::Reader::from_reader(bytes.as_slice());
        let header = r.headers().map_err(parse)?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(parse)?;
        Ok(Table { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Typed access to the rows of a loaded table.
    pub fn reader<'a>(&'a self, origin: &'a Path) -> RowReader<'a> {
        RowReader { table: self, origin }
    }
}

pub struct RowReader<'a> {
    table: &'a Table,
    origin: &'a Path,
}

impl RowReader<'_> {
    fn err(&self, message: String) -> LabError {
        LabError::Parse {
            path: self.origin.to_path_buf(),
            message,
        }
    }

    pub fn str<'r>(&self, row: &'r [String], col: &str) -> Result<&'r str> {
        let i = self
            .table
            .column(col)
            .ok_or_else(|| self.err(format!("missing column `{col}`")))?;
        Ok(row[i].as_str())
    }

    pub fn f64(&self, row: &[String], col: &str) -> Result<f64> {
        let s = self.str(row, col)?;
        s.parse().map_err(|_| self.err(format!("column `{col}`: bad number `{s}`")))
    }

    pub fn usize(&self, row: &[String], col: &str) -> Result<usize> {
        let s = self.str(row, col)?;
        s.parse().map_err(|_| self.err(format!("column `{col}`: bad integer `{s}`")))
    }

    pub fn u64(&self, row: &[String], col: &str) -> Result<u64> {
        let s = self.str(row, col)?;
        s.parse().map_err(|_| self.err(format!("column `{col}`: bad integer `{s}`")))
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
