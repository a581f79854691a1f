use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, RawSeries, Result};

/// Reads a headered CSV. Every column except `label_column` must parse as
/// a finite float; the label column holds `0`/`1`.
pub fn load_csv(path: impl AsRef<Path>, label_column: Option<&str>) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, label_column)
}

pub fn read_csv<R: Read>(reader: R, label_column: Option<&str>) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_idx = match label_column {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::MissingLabelColumn(name.to_string()))?,
        ),
        None => None,
    };
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if names.is_empty() {
        return Err(DataError::Empty);
    }

    let mut values = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        // Row numbers are 1-based and count the header as row 1.
        let row = r + 2;
        if record.len() != header.len() {
            return Err(DataError::Ragged {
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if Some(c) == label_idx {
                let flag = match cell {
                    "0" => false,
                    "1" => true,
                    _ => {
                        return Err(DataError::Label {
                            row,
                            value: cell.to_string(),
                        })
                    }
                };
                labels.as_mut().expect("label column present").push(flag);
                continue;
            }
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| DataError::Parse {
                row,
                column: c + 1,
                name: header[c].clone(),
                value: cell.to_string(),
            })?;
            values.push(v);
        }
    }
    RawSeries::with_names(values, names, labels)
}

/// Writes the series with its header; labels, when present, go last as
/// `label_column`.
pub fn write_csv<W: Write>(writer: W, series: &RawSeries, label_column: &str) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = series.names().iter().map(String::as_str).collect();
    if series.labels().is_some() {
        header.push(label_column);
    }
    wtr.write_record(&header)?;
    for t in 0..series.len() {
        let mut record: Vec<String> = series.row(t).iter().map(|v| format!("{v:?}")).collect();
        if let Some(labels) = series.labels() {
            record.push(if labels[t] { "1" } else { "0" }.to_string());
        }
        wtr.write_record(&record)?;
    }
    wtr.flush().map_err(|source| DataError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_plain_matrix() {
        let s = read_csv("a,b\n1,2\n3,4\n5,6\n".as_bytes(), None).unwrap();
        assert_eq!((s.len(), s.n_vars()), (3, 2));
        assert_eq!(s.row(1), &[3.0, 4.0]);
        assert_eq!(s.names(), &["a", "b"]);
        assert!(s.labels().is_none());
    }

    #[test]
    fn extracts_label_column() {
        let s = read_csv("a,label,b\n1,0,2\n3,1,4\n".as_bytes(), Some("label")).unwrap();
        assert_eq!(s.n_vars(), 2);
        assert_eq!(s.row(1), &[3.0, 4.0]);
        assert_eq!(s.labels().unwrap(), &[false, true]);
    }

    #[test]
    fn nan_cell_is_reported_with_coordinates() {
        let err = read_csv("a,b\n1,2\n3,NaN\n".as_bytes(), None).unwrap_err();
        match err {
            DataError::Parse { row, column, ref name, .. } => {
                assert_eq!((row, column, name.as_str()), (3, 2, "b"));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err.to_string().contains("NaN"));
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let err = read_csv("a,b\n1,2\n3\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, DataError::Ragged { row: 3, expected: 2, found: 1 }));
    }

    #[test]
    fn bad_labels_are_rejected() {
        assert!(read_csv("a,label\n1,2\n".as_bytes(), Some("label")).is_err());
        assert!(matches!(
            read_csv("a\n1\n".as_bytes(), Some("label")),
            Err(DataError::MissingLabelColumn(_))
        ));
    }

    #[test]
    fn write_then_read_is_identity() {
        let s = RawSeries::new(vec![0.1, -2.5, 1e-17, 3.0], 2, Some(vec![true, false])).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &s, "label").unwrap();
        let back = read_csv(buf.as_slice(), Some("label")).unwrap();
        assert_eq!(back, s);
    }
}
