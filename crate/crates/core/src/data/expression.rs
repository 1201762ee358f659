//! Genes × patients expression matrices.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    gene_ids: Vec<String>,
    patient_ids: Vec<String>,
    /// Row-major, one row per gene.
    values: Vec<f64>,
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::input(format!("duplicate {what} id `{id}`")));
        }
    }
    Ok(())
}

/// Median with the even-length convention `(lo + hi) / 2`.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty sample");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl ExpressionMatrix {
    pub fn new(gene_ids: Vec<String>, patient_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        check_unique(&gene_ids, "gene")?;
        check_unique(&patient_ids, "patient")?;
        if values.len() != gene_ids.len() * patient_ids.len() {
            return Err(Error::input(format!(
                "{} values for {} genes × {} patients",
                values.len(),
                gene_ids.len(),
                patient_ids.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::input(format!("expression value {v} is negative or non-finite")));
        }
        Ok(ExpressionMatrix {
            gene_ids,
            patient_ids,
            values,
        })
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn n_patients(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn row(&self, gene: usize) -> &[f64] {
        let n = self.patient_ids.len();
        &self.values[gene * n..(gene + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn patient_index(&self, id: &str) -> Option<usize> {
        self.patient_ids.iter().position(|p| p == id)
    }

    /// One patient's expression vector in gene order.
    pub fn column(&self, patient: usize) -> Vec<f64> {
        (0..self.n_genes()).map(|g| self.row(g)[patient]).collect()
    }

    /// Keep the genes whose across-patient median is strictly positive.
    pub fn filter_median_zero(&self) -> Result<ExpressionMatrix> {
        if self.patient_ids.is_empty() {
            return Err(Error::input("median filter needs at least one patient"));
        }
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (g, id) in self.gene_ids.iter().enumerate() {
            let row = self.row(g);
            if median(row) > 0.0 {
                ids.push(id.clone());
                values.extend_from_slice(row);
            }
        }
        Ok(ExpressionMatrix {
            gene_ids: ids,
            patient_ids: self.patient_ids.clone(),
            values,
        })
    }

    /// Tab-separated text: header `gene_id<TAB>patient...`, one row per gene.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("gene_id");
        for p in &self.patient_ids {
            out.push('\t');
            out.push_str(p);
        }
        out.push('\n');
        for (g, id) in self.gene_ids.iter().enumerate() {
            out.push_str(id);
            for v in self.row(g) {
                out.push('\t');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Parse delimiter-separated text; tab if the header has one, else comma.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(origin, "empty expression file"))?;
        let delim = if header.contains('\t') { '\t' } else { ',' };
        let mut cols = header.split(delim).map(str::trim);
        cols.next();
        let patient_ids: Vec<String> = cols.map(String::from).collect();
        if patient_ids.is_empty() {
            return Err(Error::parse(origin, "header lists no patients"));
        }
        let mut gene_ids = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let mut fields = line.split(delim).map(str::trim);
            let gene = fields.next().unwrap_or_default().to_string();
            let row: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(origin, format!("line {}: {e}", lineno + 2)))?;
            if row.len() != patient_ids.len() {
                return Err(Error::parse(
                    origin,
                    format!(
                        "line {}: {} values for {} patients",
                        lineno + 2,
                        row.len(),
                        patient_ids.len()
                    ),
                ));
            }
            gene_ids.push(gene);
            values.extend(row);
        }
        ExpressionMatrix::new(gene_ids, patient_ids, values).map_err(|e| Error::parse(origin, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_gene(values: &[f64]) -> ExpressionMatrix {
        let pids = (0..values.len()).map(|i| format!("P{i}")).collect();
        ExpressionMatrix::new(vec!["g".into()], pids, values.to_vec()).unwrap()
    }

    #[test]
    fn median_zero_examples() {
        assert_eq!(single_gene(&[0.0, 0.0, 0.0, 9.0]).filter_median_zero().unwrap().n_genes(), 0);
        assert_eq!(single_gene(&[0.0, 2.0, 3.0]).filter_median_zero().unwrap().n_genes(), 1);
        assert_eq!(median(&[0.0, 0.0, 1.0, 2.0]), 0.5);
        assert_eq!(single_gene(&[0.0, 0.0, 1.0, 2.0]).filter_median_zero().unwrap().n_genes(), 1);
    }

    #[test]
    fn tsv_round_trip_and_csv() {
        let m = ExpressionMatrix::new(
            vec!["A".into(), "B".into()],
            vec!["p1".into(), "p2".into()],
            vec![0.1, 2.0, 3.5, 0.0],
        )
        .unwrap();
        let back = ExpressionMatrix::parse(&m.to_tsv(), Path::new("x")).unwrap();
        assert_eq!(back, m);
        let csv = "gene_id,p1,p2\nA,0.1,2\nB,3.5,0\n";
        assert_eq!(ExpressionMatrix::parse(csv, Path::new("x")).unwrap(), m);
    }

    #[test]
    fn rejects_duplicates_and_negatives() {
        assert!(ExpressionMatrix::new(vec!["a".into(), "a".into()], vec!["p".into()], vec![1.0, 1.0]).is_err());
        assert!(ExpressionMatrix::new(vec!["a".into()], vec!["p".into()], vec![-1.0]).is_err());
        assert!(ExpressionMatrix::parse("gene_id\tp1\nA\t1\t2\n", Path::new("x")).is_err());
    }
}
