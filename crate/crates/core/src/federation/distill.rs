//! Distillation regularizers for the output-exchange protocols.
//!
//! The logit and Jacobian variants compare per-label batch means with a
//! target table: `R(w) = sum_l (n_l / n) psi(F_l(w), target_l)`. Samples
//! whose label row is absent from the target contribute nothing.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::nn::{self, Batch, LabelTable, ModelSpec, ParamVector};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    #[default]
    Mse,
    CrossEntropy,
}

/// Floor applied to the local probability in the cross-entropy derivative.
const CE_FLOOR: f64 = 1e-12;

fn psi(local: &[f64], global: &[f64], kind: RegKind) -> f64 {
    match kind {
        RegKind::Mse => 0.5 * local.iter().zip(global).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
        RegKind::CrossEntropy => -local.iter().zip(global).map(|(a, b)| b * a.max(CE_FLOOR).ln()).sum::<f64>(),
    }
}

fn dpsi(local: &[f64], global: &[f64], kind: RegKind) -> Vec<f64> {
    match kind {
        RegKind::Mse => local.iter().zip(global).map(|(a, b)| a - b).collect(),
        RegKind::CrossEntropy => local.iter().zip(global).map(|(a, b)| -b / a.max(CE_FLOOR)).collect(),
    }
}

/// Derivative of the regularizer with respect to `local`: `local - global`
/// for mse, `-global / local` for cross-entropy.
pub fn distillation_regularizer(local: &[f64], global: &[f64], kind: RegKind) -> Result<Vec<f64>> {
    check_dim(local.len(), global.len())?;
    if local.iter().chain(global).any(|v| !v.is_finite()) {
        return Err(crate::error::Error::NonFinite("distillation inputs"));
    }
    if local == global && kind == RegKind::Mse {
        return Ok(vec![0.0; local.len()]);
    }
    Ok(dpsi(local, global, kind))
}

/// Per-label running mean of output rows between checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TableAccumulator {
    row_len: usize,
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl TableAccumulator {
    pub fn new(label_count: usize, row_len: usize) -> Self {
        TableAccumulator { row_len, sums: vec![vec![0.0; row_len]; label_count], counts: vec![0; label_count] }
    }

    pub fn add(&mut self, label: usize, row: &[f64]) {
        debug_assert_eq!(row.len(), self.row_len);
        for (s, v) in self.sums[label].iter_mut().zip(row) {
            *s += v;
        }
        self.counts[label] += 1;
    }

    pub fn mean_table(&self) -> LabelTable {
        let rows = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &c)| (c > 0).then(|| s.iter().map(|v| v / c as f64).collect()))
            .collect();
        LabelTable::from_rows(rows, self.row_len).expect("row lengths consistent")
    }

    pub fn reset(&mut self) {
        for s in &mut self.sums {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }
}

/// Mean over devices `j != exclude` of each present row. A row absent at
/// every peer stays absent.
pub fn peer_average(tables: &[LabelTable], exclude: usize) -> Result<LabelTable> {
    let first = tables.first().ok_or(crate::error::Error::Empty("tables"))?;
    let (l, row_len) = (first.label_count(), first.row_len());
    let mut out = LabelTable::empty(l, row_len);
    for label in 0..l {
        let mut sum: Option<Vec<f64>> = None;
        let mut count = 0usize;
        for (j, t) in tables.iter().enumerate() {
            if t.label_count() != l || t.row_len() != row_len {
                return Err(invalid("table shapes differ"));
            }
            if j == exclude {
                continue;
            }
            if let Some(row) = t.row(label) {
                count += 1;
                match &mut sum {
                    Some(s) => s.iter_mut().zip(row).for_each(|(a, b)| *a += b),
                    None => sum = Some(row.to_vec()),
                }
            }
        }
        if let Some(s) = sum {
            out.set_row(label, Some(s.into_iter().map(|v| v / count as f64).collect()))?;
        }
    }
    Ok(out)
}

fn params(spec: &ModelSpec, w: &[f64]) -> Result<ParamVector> {
    ParamVector::new(spec.clone(), w.to_vec())
}

fn label_counts(batch: &Batch, l: usize) -> Vec<usize> {
    let mut c = vec![0; l];
    for &y in batch.labels() {
        c[y] += 1;
    }
    c
}

/// Value and parameter gradient of the per-label output-matching regularizer.
pub fn logit_matching(
    spec: &ModelSpec,
    w: &[f64],
    batch: &Batch,
    target: &LabelTable,
    t: f64,
    kind: RegKind,
) -> Result<(f64, Vec<f64>)> {
    let p = params(spec, w)?;
    let l = spec.output_dim();
    check_dim(l, target.label_count())?;
    check_dim(l, target.row_len())?;
    let probs = nn::softmax_outputs(&p, batch, t)?;
    let local = LabelTable::group_mean(l, l, batch.labels().iter().copied().zip(probs.iter().map(Vec::as_slice)))?;
    let n = batch.len() as f64;
    let counts = label_counts(batch, l);
    let mut value = 0.0;
    let mut row_grads: Vec<Option<Vec<f64>>> = vec![None; l];
    for label in 0..l {
        if let (Some(f), Some(g)) = (local.row(label), target.row(label)) {
            value += counts[label] as f64 / n * psi(f, g, kind);
            if f != g {
                row_grads[label] = Some(dpsi(f, g, kind).into_iter().map(|v| v / n).collect());
            }
        }
    }
    let pbars: Vec<Vec<f64>> = batch
        .labels()
        .iter()
        .map(|&y| row_grads[y].clone().unwrap_or_else(|| vec![0.0; l]))
        .collect();
    Ok((value, nn::backprop_output_grads(&p, batch, t, &pbars)?.into_values()))
}

/// Value and gradient of `(1/n) sum_s psi(F_s(student), F_s(teacher))`.
pub fn teacher_matching(
    spec: &ModelSpec,
    student: &[f64],
    teacher: &[f64],
    batch: &Batch,
    t: f64,
    kind: RegKind,
) -> Result<(f64, Vec<f64>)> {
    let ps = params(spec, student)?;
    let pt = params(spec, teacher)?;
    let fs = nn::softmax_outputs(&ps, batch, t)?;
    let ft = nn::softmax_outputs(&pt, batch, t)?;
    let n = batch.len() as f64;
    let l = spec.output_dim();
    let mut value = 0.0;
    let pbars: Vec<Vec<f64>> = fs
        .iter()
        .zip(&ft)
        .map(|(a, b)| {
            value += psi(a, b, kind) / n;
            if a == b {
                vec![0.0; l]
            } else {
                dpsi(a, b, kind).into_iter().map(|v| v / n).collect()
            }
        })
        .collect();
    Ok((value, nn::backprop_output_grads(&ps, batch, t, &pbars)?.into_values()))
}

/// Value and gradient of the per-label Jacobian-matching regularizer (mse).
pub fn jacobian_matching(
    spec: &ModelSpec,
    w: &[f64],
    batch: &Batch,
    target: &LabelTable,
    t: f64,
) -> Result<(f64, Vec<f64>)> {
    let p = params(spec, w)?;
    let l = spec.output_dim();
    let size = l * spec.input_dim();
    check_dim(l, target.label_count())?;
    check_dim(size, target.row_len())?;
    let jacs = nn::jacobian_outputs(&p, batch, t)?;
    let local = LabelTable::group_mean(l, size, batch.labels().iter().copied().zip(jacs.iter().map(Vec::as_slice)))?;
    let n = batch.len() as f64;
    let counts = label_counts(batch, l);
    let mut value = 0.0;
    let mut row_grads: Vec<Option<Vec<f64>>> = vec![None; l];
    for label in 0..l {
        if let (Some(f), Some(g)) = (local.row(label), target.row(label)) {
            value += counts[label] as f64 / n * psi(f, g, RegKind::Mse);
            if f != g {
                row_grads[label] = Some(f.iter().zip(g).map(|(a, b)| (a - b) / n).collect());
            }
        }
    }
    let ebars: Vec<Vec<f64>> = batch
        .labels()
        .iter()
        .map(|&y| row_grads[y].clone().unwrap_or_else(|| vec![0.0; size]))
        .collect();
    Ok((value, nn::backprop_jacobian_grads(&p, batch, Some(t), &ebars)?.into_values()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng::stream;
    use rand::Rng;

    fn setup(act: Activation) -> (ModelSpec, Vec<f64>, Batch) {
        let spec = ModelSpec::new(vec![2, 4, 3], act).unwrap();
        let mut rng = stream(5, "distill-test");
        let w = ParamVector::glorot(spec.clone(), &mut rng).into_values();
        let rows: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let batch = Batch::from_rows(&rows, vec![0, 1, 2, 0, 1, 0]).unwrap();
        (spec, w, batch)
    }

    fn fd_check(f: impl Fn(&[f64]) -> (f64, Vec<f64>), w: &[f64]) -> f64 {
        let (_, g) = f(w);
        let h = 1e-6;
        let num: Vec<f64> = (0..w.len())
            .map(|i| {
                let mut a = w.to_vec();
                let mut b = w.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a).0 - f(&b).0) / (2.0 * h)
            })
            .collect();
        let diff: f64 = g.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        diff / num.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-10)
    }

    #[test]
    fn regularizer_derivative_examples() {
        assert_eq!(distillation_regularizer(&[1.0], &[0.0], RegKind::Mse).unwrap(), vec![1.0]);
        assert_eq!(distillation_regularizer(&[0.3, 0.7], &[0.3, 0.7], RegKind::Mse).unwrap(), vec![0.0, 0.0]);
        assert_eq!(distillation_regularizer(&[0.5], &[0.25], RegKind::CrossEntropy).unwrap(), vec![-0.5]);
        assert!(distillation_regularizer(&[1.0], &[0.0, 1.0], RegKind::Mse).is_err());
    }

    #[test]
    fn logit_matching_matches_finite_differences() {
        for kind in [RegKind::Mse, RegKind::CrossEntropy] {
            let (spec, w, batch) = setup(Activation::Sigmoid);
            let mut target = LabelTable::empty(3, 3);
            target.set_row(0, Some(vec![0.7, 0.2, 0.1])).unwrap();
            target.set_row(2, Some(vec![0.1, 0.1, 0.8])).unwrap();
            let err = fd_check(|w| logit_matching(&spec, w, &batch, &target, 2.0, kind).unwrap(), &w);
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }

    #[test]
    fn teacher_matching_matches_finite_differences() {
        let (spec, w, batch) = setup(Activation::Sigmoid);
        let teacher: Vec<f64> = w.iter().map(|v| v * 0.5 + 0.1).collect();
        let err = fd_check(|s| teacher_matching(&spec, s, &teacher, &batch, 1.5, RegKind::Mse).unwrap(), &w);
        assert!(err < 1e-4, "{err}");
        let (v, g) = teacher_matching(&spec, &w, &w, &batch, 1.5, RegKind::Mse).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn jacobian_matching_matches_finite_differences() {
        let (spec, w, batch) = setup(Activation::Sigmoid);
        let mut target = LabelTable::empty(3, 6);
        target.set_row(1, Some(vec![0.05, -0.1, 0.0, 0.02, 0.1, -0.03])).unwrap();
        target.set_row(0, Some(vec![0.0; 6])).unwrap();
        let err = fd_check(|w| jacobian_matching(&spec, w, &batch, &target, 1.0).unwrap(), &w);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn peer_average_excludes_self() {
        let mk = |a: f64| LabelTable::from_rows(vec![Some(vec![a, 1.0 - a]), None], 2).unwrap();
        let tables = vec![mk(0.1), mk(0.3), mk(0.8)];
        let avg = peer_average(&tables, 0).unwrap();
        let row = avg.row(0).unwrap();
        assert!((row[0] - 0.55).abs() < 1e-12 && (row[1] - 0.45).abs() < 1e-12);
        assert!(avg.row(1).is_none());
    }

    #[test]
    fn accumulator_running_mean() {
        let mut acc = TableAccumulator::new(2, 2);
        acc.add(0, &[1.0, 0.0]);
        acc.add(0, &[0.0, 1.0]);
        let t = acc.mean_table();
        assert_eq!(t.row(0).unwrap(), &[0.5, 0.5]);
        assert!(t.row(1).is_none());
        acc.reset();
        assert!(acc.is_empty());
    }
}
