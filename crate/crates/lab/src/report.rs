//! Merging per-run CSVs into one table with a seed column, plus a mean summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::LabError;

fn run_seed(dir: &Path) -> Result<u64, LabError> {
    let path = dir.join("config.json");
    let text = std::fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    value
        .get("seed")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| LabError::Invalid(format!("{} has no integer seed", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

fn read_csv(path: &Path) -> Result<Table, LabError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| LabError::Invalid(format!("{}: {e}", path.display())))?;
    let header = reader.headers().map_err(|e| LabError::Invalid(format!("{}: {e}", path.display())))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| LabError::Invalid(format!("{}: {e}", path.display())))?;
        rows.push(record.iter().map(String::from).collect());
    }
    Ok(Table { header, rows })
}

/// Concatenates `file` from every run directory, prefixing each row with the run's seed.
pub fn merge(dirs: &[PathBuf], file: &str) -> Result<Table, LabError> {
    if dirs.is_empty() {
        return Err(LabError::Invalid("report needs at least one run directory".into()));
    }
    let mut merged: Option<Table> = None;
    for dir in dirs {
        let seed = run_seed(dir)?;
        let t = read_csv(&dir.join(file))?;
        let m = merged.get_or_insert_with(|| {
            let mut header = vec!["seed".to_string()];
            header.extend(t.header.iter().cloned());
            Table { header, rows: Vec::new() }
        });
        if m.header[1..] != t.header[..] {
            return Err(LabError::Invalid(format!("{} has a different header", dir.join(file).display())));
        }
        for row in t.rows {
            let mut r = vec![seed.to_string()];
            r.extend(row);
            m.rows.push(r);
        }
    }
    Ok(merged.expect("at least one directory"))
}

/// Mean of every numeric column, grouped by the text columns (the seed column is dropped).
pub fn summarize(merged: &Table) -> Table {
    let cols: Vec<usize> = (0..merged.header.len()).filter(|&c| merged.header[c] != "seed").collect();
    let numeric: Vec<bool> = cols.iter().map(|&c| merged.rows.iter().all(|r| r[c].parse::<f64>().is_ok())).collect();
    let mut groups: BTreeMap<Vec<String>, (usize, Vec<f64>)> = BTreeMap::new();
    let mut order: Vec<Vec<String>> = Vec::new();
    for r in &merged.rows {
        let key: Vec<String> = cols.iter().zip(&numeric).filter(|(_, &n)| !n).map(|(&c, _)| r[c].clone()).collect();
        let values: Vec<f64> = cols.iter().zip(&numeric).filter(|(_, &n)| n).map(|(&c, _)| r[c].parse().unwrap_or(0.0)).collect();
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (0, vec![0.0; values.len()])
        });
        entry.0 += 1;
        entry.1.iter_mut().zip(&values).for_each(|(a, v)| *a += v);
    }
    let mut header: Vec<String> = cols.iter().zip(&numeric).filter(|(_, &n)| !n).map(|(&c, _)| merged.header[c].clone()).collect();
    header.push("runs".into());
    header.extend(cols.iter().zip(&numeric).filter(|(_, &n)| n).map(|(&c, _)| format!("mean_{}", merged.header[c])));
    let rows = order
        .into_iter()
        .map(|key| {
            let (count, sums) = &groups[&key];
            let mut row = key;
            row.push(count.to_string());
            for s in sums {
                let mut cell = String::new();
                let _ = write!(cell, "{}", s / *count as f64);
                row.push(cell);
            }
            row
        })
        .collect();
    Table { header, rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_dir(root: &Path, name: &str, seed: u64, acc: &str) -> PathBuf {
        let d = root.join(name);
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(d.join("config.json"), format!("{{\"seed\": {seed}}}")).unwrap();
        std::fs::write(d.join("final_metrics.csv"), format!("stage,split,loss,accuracy\npretrained,train,0.5,{acc}\nfinetuned,train,0.25,1\n")).unwrap();
        d
    }

    #[test]
    fn merges_with_seed_column_and_averages() {
        let root = tempfile::tempdir().unwrap();
        let dirs = vec![run_dir(root.path(), "s0", 0, "0.5"), run_dir(root.path(), "s1", 1, "1")];
        let merged = merge(&dirs, "final_metrics.csv").unwrap();
        assert_eq!(
            merged.to_csv(),
            "seed,stage,split,loss,accuracy\n0,pretrained,train,0.5,0.5\n0,finetuned,train,0.25,1\n1,pretrained,train,0.5,1\n1,finetuned,train,0.25,1\n"
        );
        let summary = summarize(&merged);
        assert_eq!(summary.to_csv(), "stage,split,runs,mean_loss,mean_accuracy\npretrained,train,2,0.5,0.75\nfinetuned,train,2,0.25,1\n");
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let root = tempfile::tempdir().unwrap();
        let a = run_dir(root.path(), "a", 0, "1");
        let b = run_dir(root.path(), "b", 1, "1");
        std::fs::write(b.join("final_metrics.csv"), "stage,loss\nx,1\n").unwrap();
        assert!(merge(&[a, b], "final_metrics.csv").is_err());
    }
}
