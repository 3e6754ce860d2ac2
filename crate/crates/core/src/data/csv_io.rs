use std::collections::BTreeSet;
use std::fs::File;
use std::path::Path;

use super::Dataset;
use crate::numeric::Matrix;
use crate::{Error, Result};

/// Reads a headed CSV: `label_column` holds class labels, every other column
/// must be numeric. Labels map to dense indices in sorted order (numeric order
/// when all labels are integers), recorded in `class_names`.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::data(format!("{}: empty file", path.display())));
    }
    let label_idx = headers.iter().position(|h| h == label_column).ok_or_else(|| {
        Error::data(format!(
            "{}: no label column named '{label_column}'",
            path.display()
        ))
    })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                raw_labels.push(cell.trim().to_string());
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::data(format!(
                    "row {row}, column '{}': non-numeric value '{cell}'",
                    &headers[col]
                ))
            })?;
            if v.is_nan() {
                return Err(Error::data(format!(
                    "row {row}, column '{}': NaN",
                    &headers[col]
                )));
            }
            values.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::data(format!("{}: no data rows", path.display())));
    }

    let class_names = sorted_classes(&raw_labels);
    let y = raw_labels
        .iter()
        .map(|l| class_names.iter().position(|c| c == l).expect("collected above"))
        .collect();
    let x = Matrix::from_vec(raw_labels.len(), feature_names.len(), values)?;
    Dataset::new(x, y, feature_names, class_names)
}

fn sorted_classes(labels: &[String]) -> Vec<String> {
    let unique: BTreeSet<&String> = labels.iter().collect();
    let mut names: Vec<String> = unique.into_iter().cloned().collect();
    if names.iter().all(|n| n.parse::<i64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<i64>().expect("checked"));
    }
    names
}

/// Writes features followed by a `label_column` holding class names.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = dataset.feature_names.iter().map(String::as_str).collect();
    header.push(label_column);
    w.write_record(&header)?;
    for (r, &label) in dataset.y.iter().enumerate() {
        let mut rec: Vec<String> = dataset.x.row(r).iter().map(|v| v.to_string()).collect();
        rec.push(dataset.class_names[label].clone());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Latent export: `sample_index, label, z_0..z_{L−1}`.
pub fn write_latents_csv(
    path: impl AsRef<Path>,
    sample_index: &[usize],
    labels: &[String],
    latents: &Matrix,
) -> Result<()> {
    let path = path.as_ref();
    if sample_index.len() != latents.rows() || labels.len() != latents.rows() {
        return Err(Error::shape("latent export rows disagree"));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_index".to_string(), "label".to_string()];
    header.extend((0..latents.cols()).map(|j| format!("z_{j}")));
    w.write_record(&header)?;
    for (r, (idx, label)) in sample_index.iter().zip(labels).enumerate() {
        let mut rec = vec![idx.to_string(), label.clone()];
        rec.extend(latents.row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_small_file() {
        let f = write_tmp("x1,label,x2\n1.0,a,2\n3,b,4.5\n-1,a,0\n");
        let ds = load_csv(f.path(), "label").unwrap();
        assert_eq!((ds.n_samples(), ds.n_features(), ds.n_classes()), (3, 2, 2));
        assert_eq!(ds.y, vec![0, 1, 0]);
        assert_eq!(ds.feature_names, vec!["x1", "x2"]);
        assert_eq!(ds.x.row(1), &[3.0, 4.5]);
    }

    #[test]
    fn integer_labels_sort_numerically() {
        let f = write_tmp("x,y\n1,10\n2,2\n3,10\n");
        let ds = load_csv(f.path(), "y").unwrap();
        assert_eq!(ds.class_names, vec!["2", "10"]);
        assert_eq!(ds.y, vec![1, 0, 1]);
    }

    #[test]
    fn nan_cell_names_row_and_column() {
        let f = write_tmp("a,b,label\n1,2,x\n3,NaN,y\n");
        let err = load_csv(f.path(), "label").unwrap_err().to_string();
        assert!(err.contains("row 1") && err.contains("'b'"), "{err}");
    }

    #[test]
    fn input_errors() {
        let f = write_tmp("a,b\n1,2\n");
        assert!(load_csv(f.path(), "label").is_err());
        let f = write_tmp("a,label\nfoo,1\n");
        assert!(load_csv(f.path(), "label").unwrap_err().is_data());
        let f = write_tmp("");
        assert!(load_csv(f.path(), "label").is_err());
        let f = write_tmp("a,label\n");
        assert!(load_csv(f.path(), "label").is_err());
    }

    #[test]
    fn write_then_load_preserves_values() {
        let x = Matrix::from_rows(&[[0.1, 1e-17], [3.25, -7.0]]).unwrap();
        let ds = Dataset::new(
            x,
            vec![1, 0],
            vec!["p".into(), "q".into()],
            vec!["neg".into(), "pos".into()],
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, f.path(), "label").unwrap();
        let back = load_csv(f.path(), "label").unwrap();
        assert_eq!(back, ds);
    }
}
