use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Direction, IntersectionId, Zone};
use crate::error::{dim_err, Result};

/// Identity of one formatted row: the stream (intersection and reference
/// approach) plus its interval start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub intersection: IntersectionId,
    pub approach: Direction,
    pub timestamp: NaiveDateTime,
}

impl RowKey {
    pub fn stream(&self) -> (IntersectionId, Direction) {
        (self.intersection, self.approach)
    }
}

/// Row-major 2-D feature table, rows sorted by stream then time.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub zone: Zone,
    pub columns: Vec<String>,
    pub keys: Vec<RowKey>,
    pub values: Vec<f64>,
}

impl FeatureTable {
    pub fn new(zone: Zone, columns: Vec<String>, keys: Vec<RowKey>, values: Vec<f64>) -> Result<Self> {
        if values.len() != keys.len() * columns.len() {
            return dim_err(format!(
                "{} values for {} rows of width {}",
                values.len(),
                keys.len(),
                columns.len()
            ));
        }
        Ok(Self {
            zone,
            columns,
            keys,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.values[i * self.width() + j]).collect()
    }

    /// Keeps rows where `keep[i]` is true.
    pub fn filter_rows(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.len() {
            return dim_err(format!("{} flags for {} rows", keep.len(), self.len()));
        }
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for (i, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
            keys.push(self.keys[i]);
            values.extend_from_slice(self.row(i));
        }
        Self::new(self.zone, self.columns.clone(), keys, values)
    }

    /// Projects onto the named columns, in the given order.
    pub fn select_columns(&self, names: &[String]) -> Result<Self> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.columns.iter().position(|c| c == n).ok_or_else(|| {
                    crate::Error::Config(format!("unknown feature column `{n}`"))
                })
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(self.len() * idx.len());
        for i in 0..self.len() {
            let row = self.row(i);
            values.extend(idx.iter().map(|&j| row[j]));
        }
        Self::new(self.zone, names.to_vec(), self.keys.clone(), values)
    }

    /// Half-open row ranges of each stream.
    pub fn streams(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.len() {
            if i == self.len() || self.keys[i].stream() != self.keys[start].stream() {
                if i > start {
                    out.push(start..i);
                }
                start = i;
            }
        }
        out
    }
}
