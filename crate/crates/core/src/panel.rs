//! Two-way clustered panels: cells keyed by (row cluster, column cluster).
//!
//! Cluster labels are arbitrary integers. Each panel keeps its labels sorted
//! and refers to clusters by dense index (position in the sorted label list).
//! Cells are stored in (row, column) dense order, so the order in which the
//! input lists them never affects downstream results.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct CellKey {
    pub i: i64,
    pub j: i64,
}

impl CellKey {
    pub fn new(i: i64, j: i64) -> Self {
        Self { i, j }
    }
}

/// Cluster counts and the finite-sample ratios `C/N`, `C/M` with `C = min(N, M)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PanelDims {
    pub n_rows: usize,
    pub n_cols: usize,
    pub c_bar: usize,
    pub lambda1_hat: f64,
    pub lambda2_hat: f64,
}

impl PanelDims {
    pub fn new(n_rows: usize, n_cols: usize) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::EmptyPanel);
        }
        let c_bar = n_rows.min(n_cols);
        Ok(Self {
            n_rows,
            n_cols,
            c_bar,
            lambda1_hat: c_bar as f64 / n_rows as f64,
            lambda2_hat: c_bar as f64 / n_cols as f64,
        })
    }
}

/// An immutable, possibly unbalanced two-way panel of numeric records.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoWayPanel {
    field_names: Vec<String>,
    row_labels: Vec<i64>,
    col_labels: Vec<i64>,
    rows: Vec<u32>,
    cols: Vec<u32>,
    data: Vec<f64>,
}

impl TwoWayPanel {
    /// Builds a panel from labelled cells in any order.
    pub fn from_cells<I>(field_names: Vec<String>, cells: I) -> Result<Self>
    where
        I: IntoIterator<Item = (CellKey, Vec<f64>)>,
    {
        let width = field_names.len();
        let mut entries: Vec<(CellKey, Vec<f64>)> = cells.into_iter().collect();
        if entries.is_empty() {
            return Err(Error::EmptyPanel);
        }
        for (key, record) in &entries {
            if record.len() != width {
                return Err(Error::DimensionMismatch {
                    expected: format!("{width} fields"),
                    found: format!("{} values at (i={}, j={})", record.len(), key.i, key.j),
                });
            }
            if let Some(pos) = record.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue { field: field_names[pos].clone(), i: key.i, j: key.j });
            }
        }
        entries.sort_by_key(|(key, _)| *key);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateCell { i: w[0].0.i, j: w[0].0.j });
        }

        let mut row_labels: Vec<i64> = entries.iter().map(|(k, _)| k.i).collect();
        row_labels.dedup();
        let mut col_labels: Vec<i64> = entries.iter().map(|(k, _)| k.j).collect();
        col_labels.sort_unstable();
        col_labels.dedup();

        let n = entries.len();
        let mut rows = Vec::with_capacity(n);
        let mut cols = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * width);
        let mut row = 0usize;
        for (key, record) in entries {
            while row_labels[row] != key.i {
                row += 1;
            }
            let col = col_labels.binary_search(&key.j).expect("label collected above");
            rows.push(row as u32);
            cols.push(col as u32);
            data.extend_from_slice(&record);
        }
        Ok(Self { field_names, row_labels, col_labels, rows, cols, data })
    }

    /// Builds a complete `n_rows x n_cols` panel labelled `0..n_rows`, `0..n_cols`.
    ///
    /// `data` holds one record of `field_names.len()` values per cell, in
    /// row-major cell order.
    pub fn balanced(field_names: Vec<String>, n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::EmptyPanel);
        }
        let width = field_names.len();
        if data.len() != n_rows * n_cols * width {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", n_rows * n_cols * width),
                found: format!("{} values", data.len()),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let cell = pos / width.max(1);
            return Err(Error::NonFiniteValue {
                field: field_names[pos % width].clone(),
                i: (cell / n_cols) as i64,
                j: (cell % n_cols) as i64,
            });
        }
        let rows = (0..n_rows).flat_map(|r| std::iter::repeat_n(r as u32, n_cols)).collect();
        let cols = (0..n_rows).flat_map(|_| 0..n_cols as u32).collect();
        Ok(Self {
            field_names,
            row_labels: (0..n_rows as i64).collect(),
            col_labels: (0..n_cols as i64).collect(),
            rows,
            cols,
            data,
        })
    }

    /// Reads a CSV with header `i,j,<field>...`, keeping only the requested fields.
    pub fn from_csv_reader<R: Read>(reader: R, field_names: &[&str]) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let column =
            |name: &str| header.iter().position(|h| h == name).ok_or_else(|| Error::MissingField(name.to_string()));
        let i_col = column("i")?;
        let j_col = column("j")?;
        let field_cols = field_names.iter().map(|f| column(f)).collect::<Result<Vec<_>>>()?;

        let parse_err = |what: &str, line: u64, value: &str| {
            Error::InvalidArgument(format!("line {line}: cannot parse {what} from `{value}`"))
        };
        let mut cells = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let i = record[i_col].parse::<i64>().map_err(|_| parse_err("i", line, &record[i_col]))?;
            let j = record[j_col].parse::<i64>().map_err(|_| parse_err("j", line, &record[j_col]))?;
            let values = field_cols
                .iter()
                .zip(field_names)
                .map(|(&c, name)| record[c].parse::<f64>().map_err(|_| parse_err(name, line, &record[c])))
                .collect::<Result<Vec<_>>>()?;
            cells.push((CellKey::new(i, j), values));
        }
        Self::from_cells(field_names.iter().map(|s| s.to_string()).collect(), cells)
    }

    pub fn field_names(&self) -> &[String] {
        &self.field_names
    }

    pub fn field_index(&self, name: &str) -> Result<usize> {
        self.field_names.iter().position(|f| f == name).ok_or_else(|| Error::MissingField(name.to_string()))
    }

    pub fn width(&self) -> usize {
        self.field_names.len()
    }

    pub fn n_rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn is_balanced(&self) -> bool {
        self.n_obs() == self.n_rows() * self.n_cols()
    }

    pub fn dims(&self) -> PanelDims {
        PanelDims::new(self.n_rows(), self.n_cols()).expect("panels are never empty")
    }

    /// Dense row index of cell `c`.
    #[inline]
    pub fn row(&self, c: usize) -> usize {
        self.rows[c] as usize
    }

    /// Dense column index of cell `c`.
    #[inline]
    pub fn col(&self, c: usize) -> usize {
        self.cols[c] as usize
    }

    #[inline]
    pub fn record(&self, c: usize) -> &[f64] {
        let w = self.width();
        &self.data[c * w..(c + 1) * w]
    }

    pub fn key(&self, c: usize) -> CellKey {
        CellKey::new(self.row_labels[self.row(c)], self.col_labels[self.col(c)])
    }

    pub fn row_labels(&self) -> &[i64] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[i64] {
        &self.col_labels
    }

    /// Index of the cell with the given labels, if present.
    pub fn find(&self, key: CellKey) -> Option<usize> {
        let r = self.row_labels.binary_search(&key.i).ok()? as u32;
        let c = self.col_labels.binary_search(&key.j).ok()? as u32;
        let start = self.rows.partition_point(|&x| x < r);
        let end = self.rows.partition_point(|&x| x <= r);
        self.cols[start..end].binary_search(&c).ok().map(|p| start + p)
    }

    /// Iterates `(key, record)` over all cells in storage order.
    pub fn cells(&self) -> impl Iterator<Item = (CellKey, &[f64])> + '_ {
        (0..self.n_obs()).map(move |c| (self.key(c), self.record(c)))
    }
}

/// Loads the requested fields of a CSV panel from disk.
pub fn load_panel(path: impl AsRef<Path>, field_names: &[&str]) -> Result<TwoWayPanel> {
    let file = std::fs::File::open(path)?;
    TwoWayPanel::from_csv_reader(std::io::BufReader::new(file), field_names)
}

pub fn dims(panel: &TwoWayPanel) -> PanelDims {
    panel.dims()
}

/// Returns the set of distinct keys; mainly useful in tests.
pub fn key_set(panel: &TwoWayPanel) -> HashSet<CellKey> {
    panel.cells().map(|(k, _)| k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_panel(text: &str, fields: &[&str]) -> Result<TwoWayPanel> {
        TwoWayPanel::from_csv_reader(text.as_bytes(), fields)
    }

    #[test]
    fn loads_square_panel() {
        let p = csv_panel("i,j,y\n1,1,1.0\n1,2,2.0\n2,1,3.0\n2,2,4.0\n", &["y"]).unwrap();
        assert_eq!((p.n_rows(), p.n_cols(), p.n_obs()), (2, 2, 4));
        assert!(p.is_balanced());
        assert_eq!(p.record(p.find(CellKey::new(2, 1)).unwrap()), &[3.0]);
    }

    #[test]
    fn duplicate_cell_is_rejected() {
        let err = csv_panel("i,j,y\n1,1,1.0\n1,2,2.0\n1,1,3.0\n", &["y"]).unwrap_err();
        assert!(matches!(err, Error::DuplicateCell { i: 1, j: 1 }));
    }

    #[test]
    fn unbalanced_panel_counts_labels() {
        let p = csv_panel("i,j,y\n1,1,1\n1,2,2\n2,1,3\n", &["y"]).unwrap();
        assert_eq!((p.n_rows(), p.n_cols(), p.n_obs()), (2, 2, 3));
        assert!(!p.is_balanced());
        assert_eq!(p.find(CellKey::new(2, 2)), None);
    }

    #[test]
    fn missing_field_and_non_finite() {
        assert!(matches!(
            csv_panel("i,j,y\n1,1,1\n", &["x"]).unwrap_err(),
            Error::MissingField(f) if f == "x"
        ));
        assert!(matches!(csv_panel("i,j,y\n1,1,NaN\n", &["y"]).unwrap_err(), Error::NonFiniteValue { .. }));
        assert!(matches!(csv_panel("i,j,y\n1,1,inf\n", &["y"]).unwrap_err(), Error::NonFiniteValue { .. }));
        assert!(matches!(csv_panel("i,j,y\n", &["y"]).unwrap_err(), Error::EmptyPanel));
    }

    #[test]
    fn unrequested_fields_may_hold_anything() {
        let p = csv_panel("i,j,y,note\n5,9,1.5,NaN\n", &["y"]).unwrap();
        assert_eq!(p.field_names(), &["y".to_string()]);
        assert_eq!(p.key(0), CellKey::new(5, 9));
    }

    #[test]
    fn file_order_is_irrelevant() {
        let a = csv_panel("i,j,y\n1,1,1\n1,2,2\n2,1,3\n2,2,4\n", &["y"]).unwrap();
        let b = csv_panel("i,j,y\n2,2,4\n1,2,2\n2,1,3\n1,1,1\n", &["y"]).unwrap();
        assert_eq!(a.cells().collect::<Vec<_>>(), b.cells().collect::<Vec<_>>());
    }

    #[test]
    fn arbitrary_labels_map_to_dense_indices() {
        let p = csv_panel("i,j,y\n1000,-7,1\n42,-7,2\n42,99,3\n", &["y"]).unwrap();
        assert_eq!(p.row_labels(), &[42, 1000]);
        assert_eq!(p.col_labels(), &[-7, 99]);
        let c = p.find(CellKey::new(1000, -7)).unwrap();
        assert_eq!((p.row(c), p.col(c)), (1, 0));
    }

    #[test]
    fn dims_examples() {
        let d = PanelDims::new(20, 20).unwrap();
        assert_eq!(d.c_bar, 20);
        assert_eq!((d.lambda1_hat, d.lambda2_hat), (1.0, 1.0));

        let d = PanelDims::new(788, 22299).unwrap();
        assert_eq!(d.c_bar, 788);

        let d = PanelDims::new(4, 8).unwrap();
        assert_eq!((d.lambda1_hat, d.lambda2_hat), (1.0, 0.5));

        assert!(matches!(PanelDims::new(0, 3), Err(Error::EmptyPanel)));
    }

    #[test]
    fn balanced_constructor_matches_cells() {
        let data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let a = TwoWayPanel::balanced(vec!["y".into()], 2, 3, data.clone()).unwrap();
        let cells = (0..6).map(|c| (CellKey::new(c / 3, c % 3), vec![data[c as usize]]));
        let b = TwoWayPanel::from_cells(vec!["y".into()], cells).unwrap();
        assert_eq!(a.cells().collect::<Vec<_>>(), b.cells().collect::<Vec<_>>());
        assert_eq!(a.dims(), b.dims());
    }
}
