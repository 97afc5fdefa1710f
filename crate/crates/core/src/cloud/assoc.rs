use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Maps every instance at time t to an instance at t-1 or to no-match (`None`).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TemporalAssociation {
    pairs: Vec<Option<usize>>,
}

impl TemporalAssociation {
    /// Fails if two instances map to the same previous instance.
    pub fn new(pairs: Vec<Option<usize>>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (i, p) in pairs.iter().enumerate() {
            if let Some(j) = p {
                if !seen.insert(*j) {
                    return Err(Error::Validation(format!(
                        "association not injective: instance {i} reuses previous instance {j}"
                    )));
                }
            }
        }
        Ok(TemporalAssociation { pairs })
    }

    pub fn all_unmatched(n: usize) -> Self {
        TemporalAssociation { pairs: vec![None; n] }
    }

    pub fn pairs(&self) -> &[Option<usize>] {
        &self.pairs
    }

    pub fn get(&self, i: usize) -> Option<usize> {
        self.pairs[i]
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_matched(&self) -> usize {
        self.pairs.iter().filter(|p| p.is_some()).count()
    }
}

#[derive(Serialize, Deserialize)]
struct Row {
    t_id: usize,
    prev_id: i64,
}

/// Writes `t_id,prev_id` rows; `prev_id = -1` encodes no-match.
pub fn save_association_csv(assoc: &TemporalAssociation, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["t_id", "prev_id"])?;
    for (i, p) in assoc.pairs.iter().enumerate() {
        w.serialize(Row {
            t_id: i,
            prev_id: p.map(|j| j as i64).unwrap_or(-1),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_association_csv(path: impl AsRef<Path>) -> Result<TemporalAssociation> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut rows: Vec<Row> = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    rows.sort_by_key(|r| r.t_id);
    let mut pairs = Vec::with_capacity(rows.len());
    for (k, row) in rows.iter().enumerate() {
        if row.t_id != k {
            return Err(Error::Validation(format!(
                "association ids must be dense 0..n, missing t_id {k}"
            )));
        }
        pairs.push(match row.prev_id {
            -1 => None,
            j if j >= 0 => Some(j as usize),
            j => return Err(Error::Validation(format!("invalid prev_id {j}"))),
        });
    }
    TemporalAssociation::new(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_injective() {
        assert!(TemporalAssociation::new(vec![Some(1), Some(1)]).is_err());
        assert!(TemporalAssociation::new(vec![None, None, Some(0)]).is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let a = TemporalAssociation::new(vec![Some(2), None, Some(0)]).unwrap();
        save_association_csv(&a, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t_id,prev_id\n0,2\n1,-1\n"));
        assert_eq!(load_association_csv(&p).unwrap(), a);

        let empty = TemporalAssociation::all_unmatched(0);
        save_association_csv(&empty, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "t_id,prev_id\n");
        assert!(load_association_csv(&p).unwrap().is_empty());
    }
}
