//! CSV datasets: a header row, one response column named `y` (any case) and
//! numeric predictors in file order.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::data::Dataset;
use crate::error::{Error, Result};

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file)
}

/// Parses a dataset from any reader. Rows are numbered from 1, header excluded.
pub fn read_csv(reader: impl std::io::Read) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let y_cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.eq_ignore_ascii_case("y")).map(|(i, _)| i).collect();
    let y_col = match y_cols.as_slice() {
        [c] => *c,
        [] => return Err(Error::Data("no response column named `y`".into())),
        _ => return Err(Error::Data("more than one column named `y`".into())),
    };
    let names: Vec<String> = header.iter().enumerate().filter(|&(i, _)| i != y_col).map(|(_, h)| h.clone()).collect();
    let width = header.len();
    let mut y = Vec::new();
    let mut x = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { len, .. } => {
                Error::Data(format!("row {row} has {len} fields, expected {width}"))
            }
            _ => Error::Csv(e),
        })?;
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Data(format!("row {row}, column \"{}\": `{cell}` is not a finite number", header[c])))?;
            if c == y_col {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(Error::Data("dataset has no rows".into()));
    }
    let n = y.len();
    let x = Array2::from_shape_vec((n, width - 1), x).map_err(|e| Error::Data(e.to_string()))?;
    Dataset::with_names(x, Array1::from(y), names)
}

/// Writes `y` first, then the predictors; values use the shortest
/// representation that parses back to the same `f64`.
pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut file = File::create(path.as_ref())?;
    write_csv(data, &mut file)
}

pub fn write_csv(data: &Dataset, out: &mut impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["y".to_string()];
    header.extend(data.names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![data.y()[i].to_string()];
        rec.extend(data.x().row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
