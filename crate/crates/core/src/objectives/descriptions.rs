use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Label-description vectors, `D` per relation, all of the feature width.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptionSet {
    dim: usize,
    per_relation: Option<usize>,
    vectors: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl DescriptionSet {
    pub fn new(dim: usize) -> Self {
        DescriptionSet {
            dim,
            per_relation: None,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `D`, once any relation is present.
    pub fn per_relation(&self) -> Option<usize> {
        self.per_relation
    }

    pub fn insert(&mut self, relation: usize, vectors: Vec<Vec<f64>>) -> Result<()> {
        if vectors.is_empty() {
            return Err(Error::Config(format!("relation {relation} has no descriptions")));
        }
        if let Some(d) = self.per_relation {
            if d != vectors.len() {
                return Err(Error::Config(format!(
                    "relation {relation} has {} descriptions, others have {d}",
                    vectors.len()
                )));
            }
        }
        for v in &vectors {
            if v.len() != self.dim {
                return Err(Error::dim(format!("description width {} vs {}", v.len(), self.dim)));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("relation {relation} has a non-finite description")));
            }
        }
        self.per_relation = Some(vectors.len());
        self.vectors.insert(relation, vectors);
        Ok(())
    }

    pub fn get(&self, relation: usize) -> Option<&[Vec<f64>]> {
        self.vectors.get(&relation).map(Vec::as_slice)
    }

    pub fn relations(&self) -> impl Iterator<Item = usize> + '_ {
        self.vectors.keys().copied()
    }

    /// CSV with header `relation,index,v0,…`; one row per description.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["relation".to_string(), "index".to_string()];
        header.extend((0..self.dim).map(|i| format!("v{i}")));
        w.write_record(&header)?;
        for (r, vs) in &self.vectors {
            for (i, v) in vs.iter().enumerate() {
                let mut rec = vec![r.to_string(), i.to_string()];
                rec.extend(v.iter().map(|x| format!("{x:?}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let dim = rd.headers()?.len().checked_sub(2).ok_or_else(|| Error::format(path, "missing columns"))?;
        let mut grouped: BTreeMap<usize, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse_u = |i: usize| -> Result<usize> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::format(path, format!("bad integer in column {i}")))
            };
            let (r, i) = (parse_u(0)?, parse_u(1)?);
            let v = (2..rec.len())
                .map(|c| rec[c].trim().parse::<f64>().map_err(|e| Error::format(path, e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if grouped.entry(r).or_default().insert(i, v).is_some() {
                return Err(Error::format(path, format!("duplicate description ({r}, {i})")));
            }
        }
        let mut set = DescriptionSet::new(dim);
        for (r, vs) in grouped {
            set.insert(r, vs.into_values().collect())?;
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_counts() {
        let mut s = DescriptionSet::new(2);
        s.insert(0, vec![vec![1.0, 0.0]]).unwrap();
        assert!(s.insert(1, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).is_err());
        assert!(s.insert(1, vec![]).is_err());
        assert!(s.insert(1, vec![vec![1.0]]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("desc.csv");
        let mut s = DescriptionSet::new(3);
        s.insert(0, vec![vec![0.1, -2.5e-7, 3.0], vec![1.0 / 3.0, 0.0, -1.0]]).unwrap();
        s.insert(4, vec![vec![9.0, 8.0, 7.0], vec![1e300, -0.0, 2.0]]).unwrap();
        s.write_csv(&path).unwrap();
        assert_eq!(DescriptionSet::read_csv(&path).unwrap(), s);
    }
}
