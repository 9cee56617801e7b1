//! Long-format CSV: header `subject,time,y,x1,...,xp`, one row per observation.
//!
//! Subjects keep the order in which they first appear; that order is the one
//! the estimator treats as the arrival order of subjects.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use gee_core::matkernel::Mat;
use gee_core::model::{LongitudinalDataset, Subject};

use crate::error::{CliError, CliResult};

struct Pending {
    label: String,
    first_line: u64,
    rows: Vec<(usize, f64, Vec<f64>)>,
}

fn parse_number(field: &str, line: u64, column: &str) -> CliResult<f64> {
    let v: f64 = field.trim().parse().map_err(|_| CliError::Parse {
        line,
        column: column.to_string(),
        message: format!("'{field}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(CliError::Parse {
            line,
            column: column.to_string(),
            message: format!("'{field}' is not finite"),
        });
    }
    Ok(v)
}

pub fn parse_dataset_csv(path: &Path) -> CliResult<LongitudinalDataset> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_dataset_csv(file).map_err(|e| match e {
        CliError::Io { message, .. } => CliError::io(path, message),
        other => other,
    })
}

pub fn read_dataset_csv<R: Read>(reader: R) -> CliResult<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::io("<input>", e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.len() < 4 || header[0] != "subject" || header[1] != "time" || header[2] != "y" {
        return Err(CliError::Schema(format!(
            "header must be subject,time,y,x1,...,xp; got {}",
            header.join(",")
        )));
    }
    let p = header.len() - 3;
    for (k, h) in header[3..].iter().enumerate() {
        if *h != format!("x{}", k + 1) {
            return Err(CliError::Schema(format!(
                "covariate column {} must be named x{}, got '{h}'",
                k + 4,
                k + 1
            )));
        }
    }

    let mut order: Vec<Pending> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| match e.position() {
            Some(pos) => CliError::Schema(format!("line {}: {e}", pos.line())),
            None => CliError::io("<input>", e),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let label = rec[0].trim().to_string();
        if label.is_empty() {
            return Err(CliError::Parse {
                line,
                column: "subject".into(),
                message: "empty subject id".into(),
            });
        }
        let time: usize = rec[1].trim().parse().map_err(|_| CliError::Parse {
            line,
            column: "time".into(),
            message: format!("'{}' is not a positive integer", &rec[1]),
        })?;
        let y = parse_number(&rec[2], line, "y")?;
        let x = (0..p)
            .map(|k| parse_number(&rec[3 + k], line, &header[3 + k]))
            .collect::<CliResult<Vec<_>>>()?;
        let slot = *index.entry(label.clone()).or_insert_with(|| {
            order.push(Pending {
                label: label.clone(),
                first_line: line,
                rows: Vec::new(),
            });
            order.len() - 1
        });
        if order[slot].rows.iter().any(|(t, _, _)| *t == time) {
            return Err(CliError::Schema(format!(
                "duplicate observation for subject {label} at time {time} (line {line})"
            )));
        }
        order[slot].rows.push((time, y, x));
    }
    if order.is_empty() {
        return Err(CliError::Schema("no observations".into()));
    }

    let m = order.iter().map(|s| s.rows.len()).max().unwrap_or(0);
    let mut subjects = Vec::with_capacity(order.len());
    for mut s in order {
        if s.rows.len() != m {
            return Err(CliError::Schema(format!(
                "subject {} has {} rows, expected {m}",
                s.label,
                s.rows.len()
            )));
        }
        s.rows.sort_by_key(|r| r.0);
        for (j, (t, _, _)) in s.rows.iter().enumerate() {
            if *t != j + 1 {
                return Err(CliError::Schema(format!(
                    "subject {} (first seen on line {}) has time values that are not 1..{m}",
                    s.label, s.first_line
                )));
            }
        }
        let y = s.rows.iter().map(|r| r.1).collect();
        let data = s.rows.into_iter().flat_map(|r| r.2).collect();
        subjects.push(Subject {
            x: Mat::new(m, p, data)?,
            y,
        });
    }
    Ok(LongitudinalDataset::new(subjects)?)
}

/// Writes subjects as `1..=n` with shortest round-trip float formatting.
pub fn write_dataset_csv<W: Write>(data: &LongitudinalDataset, writer: W) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject".to_string(), "time".to_string(), "y".to_string()];
    header.extend((1..=data.p()).map(|k| format!("x{k}")));
    let io = |e: csv::Error| CliError::io("<output>", e);
    w.write_record(&header).map_err(io)?;
    for (i, s) in data.subjects().iter().enumerate() {
        for j in 0..data.m() {
            let mut row = vec![(i + 1).to_string(), (j + 1).to_string(), s.y[j].to_string()];
            row.extend(s.x.row(j).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush().map_err(|e| CliError::io("<output>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> CliResult<LongitudinalDataset> {
        read_dataset_csv(text.as_bytes())
    }

    #[test]
    fn well_formed() {
        let d = parse("subject,time,y,x1\na,1,0.5,1\na,2,1.5,2\nb,2,3,4\nb,1,2,3\n").unwrap();
        assert_eq!((d.n(), d.m(), d.p()), (2, 2, 1));
        assert_eq!(d.subjects()[1].y, vec![2.0, 3.0]);
        assert_eq!(d.subjects()[1].x.row(0), &[3.0]);
    }

    #[test]
    fn first_appearance_order() {
        let d = parse("subject,time,y,x1\nz,1,1,0\na,1,2,0\nz,2,3,0\na,2,4,0\n").unwrap();
        assert_eq!(d.subjects()[0].y, vec![1.0, 3.0]);
    }

    #[test]
    fn ragged_subject() {
        let err = parse("subject,time,y,x1\n3,1,0,1\n3,2,0,1\n7,1,0,1\n").unwrap_err();
        assert_eq!(err.kind(), "schema");
        assert_eq!(err.to_string(), "subject 7 has 1 rows, expected 2");
    }

    #[test]
    fn bad_cells() {
        let err = parse("subject,time,y,x1\n1,1,abc,1\n").unwrap_err();
        assert_eq!(err.kind(), "parse");
        assert!(err.to_string().contains("line 2, column y"), "{err}");
        let err = parse("subject,time,y,x1,x2\n1,1,0,1,nan\n").unwrap_err();
        assert!(err.to_string().contains("column x2"));
        let err = parse("subject,time,y,x1\n1,1,0,1\n1,1,0,2\n").unwrap_err();
        assert_eq!(err.kind(), "schema");
        assert!(err.to_string().contains("duplicate"));
        let err = parse("subject,time,y,x1\n1,1,0,1\n1,3,0,2\n").unwrap_err();
        assert_eq!(err.kind(), "schema");
        assert_eq!(parse("subject,t,y,x1\n").unwrap_err().kind(), "schema");
        assert_eq!(parse("subject,time,y,z\n").unwrap_err().kind(), "schema");
        assert_eq!(parse("subject,time,y,x1\n").unwrap_err().kind(), "schema");
    }
}
