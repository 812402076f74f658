//! Cases-by-features tables of bottleneck activations and their CSV form.
//!
//! The CSV layout is `case_id,modality,<feature ids...>` with one row per
//! case. Feature ids are a modality letter followed by the zero-padded flat
//! index into the bottleneck activation, e.g. `C00048`.

use crate::error::{Error, Result};
use crate::volume::Modality;
use std::collections::HashSet;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    case_ids: Vec<String>,
    feature_ids: Vec<String>,
    /// Row-major, `n_cases * n_features`.
    values: Vec<f64>,
    modality: String,
}

pub fn feature_id(modality: Modality, index: usize) -> String {
    format!("{}{index:05}", modality.prefix())
}

impl FeatureMatrix {
    pub fn new(case_ids: Vec<String>, feature_ids: Vec<String>, values: Vec<f64>, modality: impl Into<String>) -> Result<Self> {
        let expected = case_ids.len() * feature_ids.len();
        if values.len() != expected {
            return Err(Error::Length { expected, found: values.len() });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = feature_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Format(format!("duplicate feature id {dup}")));
        }
        Ok(Self { case_ids, feature_ids, values, modality: modality.into() })
    }

    /// One row per case from per-case bottleneck vectors.
    pub fn from_rows(modality: Modality, case_ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::Length { expected: n, found: r.len() });
            }
            values.extend_from_slice(r);
        }
        let ids = (0..n).map(|i| feature_id(modality, i)).collect();
        Self::new(case_ids, ids, values, modality.name())
    }

    pub fn n_cases(&self) -> usize {
        self.case_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn case_ids(&self) -> &[String] {
        &self.case_ids
    }

    pub fn feature_ids(&self) -> &[String] {
        &self.feature_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn get(&self, case: usize, feature: usize) -> f64 {
        self.values[case * self.n_features() + feature]
    }

    pub fn row(&self, case: usize) -> &[f64] {
        let n = self.n_features();
        &self.values[case * n..(case + 1) * n]
    }

    pub fn column(&self, feature: usize) -> Vec<f64> {
        (0..self.n_cases()).map(|c| self.get(c, feature)).collect()
    }

    /// Columns by index, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&j) = idx.iter().find(|&&j| j >= self.n_features()) {
            return Err(Error::Parameter(format!("feature index {j} out of range")));
        }
        let values = (0..self.n_cases()).flat_map(|c| idx.iter().map(move |&j| self.get(c, j))).collect();
        let ids = idx.iter().map(|&j| self.feature_ids[j].clone()).collect();
        Self::new(self.case_ids.clone(), ids, values, self.modality.clone())
    }

    /// Columns by id, in the given order.
    pub fn select_ids(&self, ids: &[String]) -> Result<Self> {
        let idx = ids
            .iter()
            .map(|id| self.feature_ids.iter().position(|f| f == id).ok_or_else(|| Error::MissingFeature(id.clone())))
            .collect::<Result<Vec<_>>>()?;
        self.select_columns(&idx)
    }

    /// Rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&c) = idx.iter().find(|&&c| c >= self.n_cases()) {
            return Err(Error::Parameter(format!("case index {c} out of range")));
        }
        let values = idx.iter().flat_map(|&c| self.row(c).iter().copied()).collect();
        let cases = idx.iter().map(|&c| self.case_ids[c].clone()).collect();
        Self::new(cases, self.feature_ids.clone(), values, self.modality.clone())
    }

    /// Side-by-side join of two matrices over the same cases.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.case_ids != other.case_ids {
            return Err(Error::Parameter("case ids differ between feature matrices".into()));
        }
        let values = (0..self.n_cases()).flat_map(|c| self.row(c).iter().chain(other.row(c)).copied()).collect();
        let ids = self.feature_ids.iter().chain(&other.feature_ids).cloned().collect();
        Self::new(self.case_ids.clone(), ids, values, format!("{}+{}", self.modality, other.modality))
    }

    /// Drop zero-variance columns; returns the reduced matrix and removed ids.
    pub fn remove_constant(&self) -> Result<(Self, Vec<String>)> {
        let mut keep = Vec::new();
        let mut removed = Vec::new();
        for j in 0..self.n_features() {
            let varies = self.n_cases() > 0 && (1..self.n_cases()).any(|c| self.get(c, j) != self.get(0, j));
            if varies {
                keep.push(j);
            } else {
                removed.push(self.feature_ids[j].clone());
            }
        }
        if !removed.is_empty() {
            log::debug!("removed {} constant features: {}", removed.len(), removed.join(","));
        }
        Ok((self.select_columns(&keep)?, removed))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["case_id".to_string(), "modality".to_string()];
        header.extend(self.feature_ids.iter().cloned());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for c in 0..self.n_cases() {
            let mut rec = vec![self.case_ids[c].clone(), self.modality.clone()];
            rec.extend(self.row(c).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
        if header.len() < 2 || &header[0] != "case_id" || &header[1] != "modality" {
            return Err(Error::Format(format!("{}: header must start with case_id,modality", path.display())));
        }
        let feature_ids: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let mut case_ids = Vec::new();
        let mut values = Vec::new();
        let mut modality = String::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            case_ids.push(rec[0].to_string());
            modality = rec[1].to_string();
            for field in rec.iter().skip(2) {
                values.push(field.parse::<f64>().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?);
            }
        }
        Self::new(case_ids, feature_ids, values, modality)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureMatrix {
        FeatureMatrix::from_rows(
            Modality::Ct,
            vec!["a".into(), "b".into(), "c".into()],
            &[vec![1.0, 5.0, 0.1], vec![2.0, 5.0, -0.25], vec![3.0, 5.0, 1e-17]],
        )
        .unwrap()
    }

    #[test]
    fn ids_and_shape() {
        let m = sample();
        assert_eq!(m.feature_ids(), ["C00000", "C00001", "C00002"]);
        assert_eq!(feature_id(Modality::Pet, 39051), "P39051");
        assert_eq!(m.column(2), vec![0.1, -0.25, 1e-17]);
        assert!(FeatureMatrix::new(vec!["a".into()], vec!["x".into(), "x".into()], vec![1.0, 2.0], "ct").is_err());
        assert!(FeatureMatrix::new(vec!["a".into()], vec!["x".into()], vec![1.0, 2.0], "ct").is_err());
    }

    #[test]
    fn constant_columns_are_removed() {
        let (m, removed) = sample().remove_constant().unwrap();
        assert_eq!(removed, ["C00001"]);
        assert_eq!(m.feature_ids(), ["C00000", "C00002"]);
        assert_eq!(m.row(1), [2.0, -0.25]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let m = sample();
        m.write_csv(&p).unwrap();
        assert_eq!(FeatureMatrix::read_csv(&p).unwrap(), m);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("case_id,modality,C00000,C00001,C00002\na,ct,"));
    }

    #[test]
    fn concat_and_select() {
        let ct = sample();
        let pet = FeatureMatrix::from_rows(Modality::Pet, ct.case_ids().to_vec(), &[vec![7.0], vec![8.0], vec![9.0]]).unwrap();
        let both = ct.concat(&pet).unwrap();
        assert_eq!(both.n_features(), 4);
        assert_eq!(both.row(2), [3.0, 5.0, 1e-17, 9.0]);
        assert_eq!(both.modality(), "ct+pet");
        let s = both.select_ids(&["P00000".into(), "C00000".into()]).unwrap();
        assert_eq!(s.row(0), [7.0, 1.0]);
        assert!(matches!(both.select_ids(&["Z1".into()]), Err(Error::MissingFeature(_))));
        assert_eq!(both.select_rows(&[2, 0]).unwrap().case_ids(), ["c", "a"]);
    }
}
