//! CSV artifacts.

use std::path::Path;

use evgraph::train::EpochRecord;
use evgraph::{Error, Matrix};

use crate::CliResult;

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let source = match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    };
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `header` and `rows` to `path`.
pub fn write_csv<I, R>(path: &Path, header: &[String], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        let row: Vec<String> = row.into_iter().collect();
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn optional(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `epoch,train_loss,val_accuracy`; the accuracy is empty without
/// validation subjects.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> CliResult<()> {
    let header = ["epoch", "train_loss", "val_accuracy"].map(String::from);
    write_csv(
        path,
        &header,
        history
            .iter()
            .map(|r| [r.epoch.to_string(), r.train_loss.to_string(), optional(r.val_accuracy)]),
    )
}

/// `subject_id,predicted_class,p_0,…,p_{C−1}` and, when given, `entropy`.
pub fn write_probabilities(path: &Path, ids: &[String], probs: &Matrix, entropy: Option<&[f64]>) -> CliResult<()> {
    let classes = probs.cols();
    let mut header = vec!["subject_id".to_string(), "predicted_class".to_string()];
    header.extend((0..classes).map(|c| format!("p_{c}")));
    if entropy.is_some() {
        header.push("entropy".into());
    }
    let predicted = crate::predicted_classes(probs);
    let rows = ids.iter().enumerate().map(|(i, id)| {
        let mut row = vec![id.clone(), predicted[i].to_string()];
        row.extend(probs.row(i).iter().map(f64::to_string));
        if let Some(h) = entropy {
            row.push(h[i].to_string());
        }
        row
    });
    write_csv(path, &header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_rows_round_trip_through_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let history = [
            EpochRecord {
                epoch: 1,
                train_loss: 0.693,
                val_accuracy: Some(0.5),
            },
            EpochRecord {
                epoch: 2,
                train_loss: 0.1 + 0.2,
                val_accuracy: None,
            },
        ];
        write_history(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,train_loss,val_accuracy\n1,0.693,0.5\n2,0.30000000000000004,\n");
    }

    #[test]
    fn probability_file_has_one_row_per_subject() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        let probs = Matrix::from_rows(&[[0.25, 0.75], [0.5, 0.5]]).unwrap();
        let ids = vec!["a".to_string(), "b".to_string()];
        write_probabilities(&path, &ids, &probs, Some(&[0.56, 0.69])).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "subject_id,predicted_class,p_0,p_1,entropy\na,1,0.25,0.75,0.56\nb,0,0.5,0.5,0.69\n");
    }
}
