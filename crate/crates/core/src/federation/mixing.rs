use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Symmetric nonnegative weights; a zero entry means no link.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix {
    m: usize,
    entries: Vec<f64>,
}

impl MixingMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(invalid("mixing matrix is empty"));
        }
        if rows.iter().any(|r| r.len() != m) {
            return Err(invalid("mixing matrix must be square"));
        }
        let entries: Vec<f64> = rows.into_iter().flatten().collect();
        let mm = MixingMatrix { m, entries };
        for i in 0..m {
            if !(mm.get(i, i) > 0.0) {
                return Err(invalid(format!("mixing diagonal entry {i} must be positive")));
            }
            for j in 0..m {
                let v = mm.get(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(invalid(format!("mixing entry ({i}, {j}) must be finite and nonnegative")));
                }
                if v != mm.get(j, i) {
                    return Err(invalid(format!("mixing matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(mm)
    }

    fn from_fn(m: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        Self::new((0..m).map(|i| (0..m).map(|j| if i == j || f(i, j) { 1.0 } else { 0.0 }).collect()).collect())
    }

    pub fn full(m: usize) -> Result<Self> {
        Self::from_fn(m, |_, _| true)
    }

    pub fn identity(m: usize) -> Result<Self> {
        Self::from_fn(m, |_, _| false)
    }

    pub fn ring(m: usize) -> Result<Self> {
        Self::from_fn(m, |i, j| (i + 1) % m == j || (j + 1) % m == i)
    }

    pub fn chain(m: usize) -> Result<Self> {
        Self::from_fn(m, |i, j| i + 1 == j || j + 1 == i)
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    /// Linked devices other than `i`, ascending.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.m).filter(|&j| j != i && self.get(i, j) > 0.0).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum MixingSpec {
    #[default]
    Full,
    Identity,
    Ring,
    Chain,
    Explicit {
        entries: Vec<Vec<f64>>,
    },
}

impl MixingSpec {
    pub fn build(&self, m: usize) -> Result<MixingMatrix> {
        match self {
            MixingSpec::Full => MixingMatrix::full(m),
            MixingSpec::Identity => MixingMatrix::identity(m),
            MixingSpec::Ring => MixingMatrix::ring(m),
            MixingSpec::Chain => MixingMatrix::chain(m),
            MixingSpec::Explicit { entries } => {
                let mm = MixingMatrix::new(entries.clone())?;
                if mm.size() != m {
                    return Err(invalid(format!("mixing matrix is {0}x{0} but there are {m} devices", mm.size())));
                }
                Ok(mm)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builders() {
        let r = MixingMatrix::ring(4).unwrap();
        assert_eq!(r.neighbors(0), vec![1, 3]);
        let c = MixingMatrix::chain(4).unwrap();
        assert_eq!(c.neighbors(0), vec![1]);
        assert_eq!(c.neighbors(2), vec![1, 3]);
        assert!(MixingMatrix::identity(3).unwrap().neighbors(1).is_empty());
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(MixingMatrix::new(vec![vec![0.0, 1.0], vec![1.0, 1.0]]).is_err());
        assert!(MixingMatrix::new(vec![vec![1.0, 0.5], vec![0.2, 1.0]]).is_err());
        assert!(MixingMatrix::new(vec![vec![1.0, -1.0], vec![-1.0, 1.0]]).is_err());
        assert!(MixingSpec::Full.build(3).is_ok());
    }
}
