//! CSV tabular datasets: numeric feature columns plus one label column.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CsvDataset {
    pub name: String,
    pub feature_names: Vec<String>,
    pub label_column: String,
    /// `[rows, features]`.
    pub x: Tensor,
    /// Class indices into `classes`.
    pub y: Vec<usize>,
    /// Label strings in first-appearance order.
    pub classes: Vec<String>,
}

fn parse_cell(path: &Path, row: usize, column: usize, name: &str, cell: &str) -> Result<f64> {
    let at = || format!("{}: row {row}, column {column} (`{name}`)", path.display());
    if cell.is_empty() {
        return Err(Error::Data(format!("{}: missing value", at())));
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(Error::Data(format!("{}: non-finite value `{cell}`", at()))),
        Err(_) => Err(Error::Data(format!("{}: `{cell}` is not a number", at()))),
    }
}

fn reader(path: &Path) -> Result<(csv::Reader<std::fs::File>, Vec<String>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.iter().all(String::is_empty) {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    Ok((rdr, headers))
}

fn dataset_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

impl CsvDataset {
    /// Reads a CSV with a header row. Rows and columns in error messages
    /// are 1-based, counting the header as row 1.
    pub fn load(path: &Path, label_column: &str) -> Result<Self> {
        let (mut rdr, headers) = reader(path)?;
        let label_idx = headers
            .iter()
            .position(|h| h == label_column)
            .ok_or_else(|| Error::Data(format!("{}: no column named `{label_column}`", path.display())))?;
        let feature_names: Vec<String> =
            headers.iter().enumerate().filter(|&(i, _)| i != label_idx).map(|(_, h)| h.clone()).collect();
        let mut data = Vec::new();
        let mut y = Vec::new();
        let mut classes: Vec<String> = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let record = record?;
            let row = r + 2;
            for (c, cell) in record.iter().enumerate() {
                if c == label_idx {
                    if cell.is_empty() {
                        return Err(Error::Data(format!(
                            "{}: row {row}, column {} (`{label_column}`): missing label",
                            path.display(),
                            c + 1
                        )));
                    }
                    let k = match classes.iter().position(|s| s == cell) {
                        Some(k) => k,
                        None => {
                            classes.push(cell.to_string());
                            classes.len() - 1
                        }
                    };
                    y.push(k);
                } else {
                    data.push(parse_cell(path, row, c + 1, &headers[c], cell)?);
                }
            }
        }
        if y.is_empty() {
            return Err(Error::Data(format!("{}: no data rows", path.display())));
        }
        let x = Tensor::new([y.len(), feature_names.len()], data)?;
        Ok(CsvDataset {
            name: dataset_name(path),
            feature_names,
            label_column: label_column.to_string(),
            x,
            y,
            classes,
        })
    }

    /// Reads the named feature columns of a query file; any other column
    /// (a label, an id) is ignored.
    pub fn load_queries(path: &Path, feature_names: &[String]) -> Result<Tensor> {
        let (mut rdr, headers) = reader(path)?;
        let cols: Vec<usize> = feature_names
            .iter()
            .map(|f| {
                headers
                    .iter()
                    .position(|h| h == f)
                    .ok_or_else(|| Error::Data(format!("{}: missing feature column `{f}`", path.display())))
            })
            .collect::<Result<_>>()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for (r, record) in rdr.records().enumerate() {
            let record = record?;
            for &c in &cols {
                data.push(parse_cell(path, r + 2, c + 1, &headers[c], record.get(c).unwrap_or(""))?);
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::Data(format!("{}: no data rows", path.display())));
        }
        Tensor::new([rows, cols.len()], data)
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Features and labels of the given rows, in that order.
    pub fn subset(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let f = self.num_features();
        let mut data = Vec::with_capacity(rows.len() * f);
        let mut y = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.rows() {
                return Err(Error::Data(format!("row {r} out of range for {} rows", self.rows())));
            }
            data.extend_from_slice(self.x.row(r));
            y.push(self.y[r]);
        }
        Ok((Tensor::new([rows.len(), f], data)?, y))
    }

    /// Feature columns first, label last. Loading the result reproduces
    /// `self` exactly.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.feature_names.clone();
        header.push(self.label_column.clone());
        w.write_record(&header)?;
        for (r, &k) in self.y.iter().enumerate() {
            let mut rec: Vec<String> = self.x.row(r).iter().map(|v| v.to_string()).collect();
            rec.push(self.classes[k].clone());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn labels_in_first_appearance_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "iris.csv", "a,label,b\n1,z,2\n3,y,4\n5,z,6\n");
        let d = CsvDataset::load(&p, "label").unwrap();
        assert_eq!(d.name, "iris");
        assert_eq!(d.feature_names, ["a", "b"]);
        assert_eq!(d.classes, ["z", "y"]);
        assert_eq!(d.y, [0, 1, 0]);
        assert_eq!(d.x.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (x, y) = d.subset(&[2, 0]).unwrap();
        assert_eq!((x.data(), y.as_slice()), (&[5.0, 6.0, 1.0, 2.0][..], &[0, 0][..]));
    }

    #[test]
    fn errors_carry_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.csv", "a,b,label\n1,2,x\n3,oops,y\n");
        let err = CsvDataset::load(&p, "label").unwrap_err().to_string();
        assert!(err.contains("row 3, column 2") && err.contains("oops"), "{err}");
        for (text, needle) in [
            ("a,label\nNaN,x\n", "non-finite"),
            ("a,label\ninf,x\n", "non-finite"),
            ("a,label\n,x\n", "missing value"),
            ("a,label\n", "no data rows"),
            ("", "empty file"),
            ("a,b\n1,2\n", "no column named `label`"),
        ] {
            let p = write(dir.path(), "t.csv", text);
            let err = CsvDataset::load(&p, "label").unwrap_err();
            assert_eq!(err.exit_code(), 2);
            assert!(err.to_string().contains(needle), "{text:?}: {err}");
        }
    }

    #[test]
    fn custom_label_column_and_queries() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "target,f1,f2\n0,0.5,1e-3\n1,-2,7\n");
        let d = CsvDataset::load(&p, "target").unwrap();
        assert_eq!(d.classes, ["0", "1"]);
        let q = write(dir.path(), "q.csv", "id,f2,f1\n9,1,2\n");
        let x = CsvDataset::load_queries(&q, &d.feature_names).unwrap();
        assert_eq!(x.data(), &[2.0, 1.0]);
        let q = write(dir.path(), "q2.csv", "f1\n1\n");
        assert!(CsvDataset::load_queries(&q, &d.feature_names).is_err());
    }

    #[test]
    fn write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "r.csv", "label,x\ncat,0.1\ndog,1e-300\ncat,-3.3333333333333335\n");
        let d = CsvDataset::load(&p, "label").unwrap();
        let out = dir.path().join("r.csv");
        d.write(&out).unwrap();
        assert_eq!(CsvDataset::load(&out, "label").unwrap(), d);
    }
}
