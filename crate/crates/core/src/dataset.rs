//! Rectangular numeric data with named columns.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("duplicate column name '{0}'")]
    DuplicateColumn(String),
    #[error("column '{name}' has {found} rows, expected {expected}")]
    Ragged {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("column '{0}' not found")]
    MissingColumn(String),
    #[error("column '{column}' must be 0/1, got {value} at row {row}")]
    NotBinary { column: String, row: usize, value: f64 },
}

/// Named numeric columns of equal length. Missing cells are `NaN`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    nrows: usize,
}

impl Dataset {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self, DatasetError> {
        assert_eq!(names.len(), columns.len(), "one name per column");
        let nrows = columns.first().map_or(0, Vec::len);
        for (j, (name, col)) in names.iter().zip(&columns).enumerate() {
            if names[..j].contains(name) {
                return Err(DatasetError::DuplicateColumn(name.clone()));
            }
            if col.len() != nrows {
                return Err(DatasetError::Ragged {
                    name: name.clone(),
                    expected: nrows,
                    found: col.len(),
                });
            }
        }
        Ok(Self {
            names,
            columns,
            nrows,
        })
    }

    /// Zero-row dataset with the given header.
    pub fn empty(names: Vec<String>) -> Result<Self, DatasetError> {
        let columns = vec![Vec::new(); names.len()];
        Self::new(names, columns)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.index(name).map(|j| self.columns[j].as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64], DatasetError> {
        self.column(name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn rename(&mut self, from: &str, to: &str) -> Result<(), DatasetError> {
        let j = self
            .index(from)
            .ok_or_else(|| DatasetError::MissingColumn(from.to_string()))?;
        if from != to && self.index(to).is_some() {
            return Err(DatasetError::DuplicateColumn(to.to_string()));
        }
        self.names[j] = to.to_string();
        Ok(())
    }

    pub fn push_column(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<(), DatasetError> {
        let name = name.into();
        if self.index(&name).is_some() {
            return Err(DatasetError::DuplicateColumn(name));
        }
        if self.names.is_empty() {
            self.nrows = values.len();
        } else if values.len() != self.nrows {
            return Err(DatasetError::Ragged {
                name,
                expected: self.nrows,
                found: values.len(),
            });
        }
        self.names.push(name);
        self.columns.push(values);
        Ok(())
    }

    /// Rows in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
            nrows: rows.len(),
        }
    }

    /// Keeps only the listed columns, in the listed order.
    pub fn select_columns(&self, names: &[&str]) -> Result<Dataset, DatasetError> {
        let mut cols = Vec::with_capacity(names.len());
        for n in names {
            cols.push(self.require(n)?.to_vec());
        }
        let mut out = Dataset::new(names.iter().map(|s| s.to_string()).collect(), cols)?;
        out.nrows = self.nrows;
        Ok(out)
    }

    /// Drops every row with a missing value in any of `names`.
    pub fn complete_cases(&self, names: &[&str]) -> Result<(Dataset, MissingReport), DatasetError> {
        let mut keep = vec![true; self.nrows];
        let mut missing_by_column = Vec::new();
        for &name in names {
            let col = self.require(name)?;
            let mut count = 0;
            for (k, v) in keep.iter_mut().zip(col) {
                if v.is_nan() {
                    *k = false;
                    count += 1;
                }
            }
            if count > 0 {
                missing_by_column.push(MissingCount {
                    column: name.to_string(),
                    missing: count,
                });
            }
        }
        let rows: Vec<usize> = (0..self.nrows).filter(|&i| keep[i]).collect();
        let report = MissingReport {
            rows_in: self.nrows,
            rows_used: rows.len(),
            missing_by_column,
        };
        Ok((self.select_rows(&rows), report))
    }

    /// Column as 0/1 indicators.
    pub fn binary(&self, name: &str) -> Result<Vec<bool>, DatasetError> {
        self.require(name)?
            .iter()
            .enumerate()
            .map(|(row, &v)| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(DatasetError::NotBinary {
                        column: name.to_string(),
                        row,
                        value: v,
                    })
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingCount {
    pub column: String,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MissingReport {
    pub rows_in: usize,
    pub rows_used: usize,
    pub missing_by_column: Vec<MissingCount>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        Dataset::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, f64::NAN, 3.0], vec![0.0, 1.0, f64::NAN]],
        )
        .unwrap()
    }

    #[test]
    fn rejects_ragged_and_duplicates() {
        assert!(matches!(
            Dataset::new(vec!["a".into(), "b".into()], vec![vec![1.0], vec![]]),
            Err(DatasetError::Ragged { .. })
        ));
        assert!(matches!(
            Dataset::new(vec!["a".into(), "a".into()], vec![vec![1.0], vec![2.0]]),
            Err(DatasetError::DuplicateColumn(_))
        ));
    }

    #[test]
    fn complete_case_counts() {
        let (cc, report) = small().complete_cases(&["a", "b"]).unwrap();
        assert_eq!(cc.nrows(), 1);
        assert_eq!(report.rows_in, 3);
        assert_eq!(report.rows_used, 1);
        assert_eq!(report.missing_by_column.len(), 2);
        let (only_a, _) = small().complete_cases(&["a"]).unwrap();
        assert_eq!(only_a.column("a").unwrap(), &[1.0, 3.0]);
    }

    #[test]
    fn binary_check() {
        let d = small();
        assert!(d.binary("b").is_err());
        let (cc, _) = d.complete_cases(&["b"]).unwrap();
        assert_eq!(cc.binary("b").unwrap(), vec![false, true]);
    }

    #[test]
    fn rename_and_push() {
        let mut d = small();
        d.rename("a", "x").unwrap();
        assert!(d.column("x").is_some());
        assert!(d.rename("x", "b").is_err());
        assert!(d.push_column("c", vec![1.0]).is_err());
        d.push_column("c", vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(d.ncols(), 3);
    }
}
