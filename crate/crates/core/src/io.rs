//! Delimited-text input for matrices and vectors, and number formatting.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A parsed numeric table with an optional header row.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Option<Vec<String>>,
    pub data: DMatrix<f64>,
}

fn sniff_delimiter(first_line: &str) -> u8 {
    for d in *b",\t;" {
        if first_line.as_bytes().contains(&d) {
            return d;
        }
    }
    b' '
}

/// Parses comma, tab, semicolon or whitespace separated numbers. A first row
/// with any non-numeric field is taken as a header.
pub fn parse_table(text: &str) -> Result<Table> {
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let delim = sniff_delimiter(first);
    let mut rows: Vec<Vec<String>> = Vec::new();
    if delim == b' ' {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            rows.push(line.split_whitespace().map(str::to_string).collect());
        }
    } else {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).delimiter(delim).trim(csv::Trim::All).from_reader(text.as_bytes());
        for rec in rdr.records() {
            let rec = rec?;
            if rec.iter().all(|f| f.is_empty()) {
                continue;
            }
            rows.push(rec.iter().map(str::to_string).collect());
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse("no data rows".into()));
    }
    let header = if rows[0].iter().any(|f| f.parse::<f64>().is_err()) { Some(rows.remove(0)) } else { None };
    if rows.is_empty() {
        return Err(Error::Parse("no data rows after the header".into()));
    }
    let ncols = rows[0].len();
    let mut data = DMatrix::zeros(rows.len(), ncols);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::Parse(format!("row {} has {} fields, expected {ncols}", i + 1, row.len())));
        }
        for (j, f) in row.iter().enumerate() {
            data[(i, j)] = f
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("row {}, column {}: not a number: {f:?}", i + 1, j + 1)))?;
        }
    }
    if let Some(h) = &header {
        if h.len() != ncols {
            return Err(Error::Parse(format!("header has {} names for {ncols} columns", h.len())));
        }
    }
    Ok(Table { header, data })
}

pub fn read_table(path: &Path) -> Result<Table> {
    parse_table(&fs::read_to_string(path)?)
}

/// A single column, or the named column of a table with a header.
pub fn read_vector(path: &Path, column: Option<&str>) -> Result<DVector<f64>> {
    let t = read_table(path)?;
    let j = match column {
        // a header name, else a 1-based index
        Some(name) => t
            .header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .or_else(|| name.parse::<usize>().ok().filter(|&k| k >= 1 && k <= t.data.ncols()).map(|k| k - 1))
            .ok_or_else(|| Error::Parse(format!("no column named {name:?} in {}", path.display())))?,
        None if t.data.ncols() == 1 => 0,
        None => {
            return Err(Error::Parse(format!("{} has {} columns; name one", path.display(), t.data.ncols())));
        }
    };
    Ok(t.data.column(j).into_owned())
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| exact(*v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for x in v.iter() {
        writeln!(f, "{}", exact(*x))?;
    }
    Ok(())
}

/// Shortest decimal that round-trips to the same `f64`.
pub fn exact(x: f64) -> String {
    format!("{x:?}")
}

/// Twelve significant digits, `%g` style.
pub fn sig12(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let s = format!("{x:.11e}");
        let (mant, e) = s.split_once('e').expect("exponent");
        format!("{}e{e}", trim_zeros(mant.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}
