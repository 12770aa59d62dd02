use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;

use crate::datagen::Dataset;
use crate::error::{check_dim, invalid, Result};
use crate::nn::{self, Batch, ModelSpec};
use crate::rng::substream;

/// Which samples a device evaluates its loss on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sample {
    MiniBatch { round: usize },
    Full,
}

/// Per-device empirical loss over a flat parameter vector.
pub trait LocalObjective: Sync {
    fn dim(&self) -> usize;
    fn device_count(&self) -> usize;
    fn sample_count(&self, device: usize) -> usize;
    fn loss_grad(&self, device: usize, w: &[f64], sample: Sample) -> (f64, Vec<f64>);

    /// `(A, b)` when the loss is `w'Aw/2 - b'w`.
    fn quadratic(&self, _device: usize) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        None
    }

    fn as_nn(&self) -> Option<&NnTask> {
        None
    }
}

/// Classification task with one data shard per device.
#[derive(Clone, Debug)]
pub struct NnTask {
    spec: ModelSpec,
    data: Arc<Dataset>,
    shards: Vec<Vec<usize>>,
    batch_size: usize,
    seed: u64,
}

impl NnTask {
    /// `batch_size == 0` means full-shard gradients.
    pub fn new(
        spec: ModelSpec,
        data: Arc<Dataset>,
        shards: Vec<Vec<usize>>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        check_dim(spec.input_dim(), data.dim())?;
        if spec.output_dim() < data.label_count() {
            return Err(invalid(format!(
                "model has {} outputs but data has {} labels",
                spec.output_dim(),
                data.label_count()
            )));
        }
        if shards.is_empty() {
            return Err(invalid("need at least one device"));
        }
        if shards.iter().flatten().any(|&i| i >= data.len()) {
            return Err(invalid("shard references samples outside the dataset"));
        }
        Ok(NnTask { spec, data, shards, batch_size, seed })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn shard(&self, device: usize) -> &[usize] {
        &self.shards[device]
    }

    pub fn label_count(&self) -> usize {
        self.spec.output_dim()
    }

    /// `None` for an empty shard.
    pub fn batch(&self, device: usize, sample: Sample) -> Option<Batch> {
        let shard = &self.shards[device];
        if shard.is_empty() {
            return None;
        }
        let indices: Vec<usize> = match sample {
            Sample::MiniBatch { round } if self.batch_size > 0 && self.batch_size < shard.len() => {
                let mut rng = substream(self.seed, "minibatch", &[device as u64, round as u64]);
                let mut picked: Vec<usize> =
                    index::sample(&mut rng, shard.len(), self.batch_size).into_iter().map(|p| shard[p]).collect();
                picked.sort_unstable();
                picked
            }
            _ => shard.clone(),
        };
        Some(self.data.batch(&indices).expect("shard indices validated"))
    }
}

impl LocalObjective for NnTask {
    fn dim(&self) -> usize {
        self.spec.param_count()
    }

    fn device_count(&self) -> usize {
        self.shards.len()
    }

    fn sample_count(&self, device: usize) -> usize {
        self.shards[device].len()
    }

    fn loss_grad(&self, device: usize, w: &[f64], sample: Sample) -> (f64, Vec<f64>) {
        match self.batch(device, sample) {
            Some(b) => nn::loss_grad_raw(&self.spec, w, &b),
            None => (0.0, vec![0.0; w.len()]),
        }
    }

    fn as_nn(&self) -> Option<&NnTask> {
        Some(self)
    }
}

/// Device `i` minimizes `w'A_i w/2 - b_i'w`. Sample choice is ignored.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    a: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
}

impl QuadraticObjective {
    pub fn new(a: Vec<DMatrix<f64>>, b: Vec<DVector<f64>>) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() {
            return Err(invalid("need one (A, b) pair per device"));
        }
        let d = b[0].len();
        for (ai, bi) in a.iter().zip(&b) {
            check_dim(d, bi.len())?;
            if ai.nrows() != d || ai.ncols() != d {
                return Err(invalid("A must be d x d"));
            }
        }
        Ok(QuadraticObjective { a, b })
    }

    /// Scalar losses `c_i (w - m_i)^2 / 2`.
    pub fn scalar(curvatures: &[f64], minimizers: &[f64]) -> Result<Self> {
        check_dim(curvatures.len(), minimizers.len())?;
        let a = curvatures.iter().map(|&c| DMatrix::from_element(1, 1, c)).collect();
        let b = curvatures.iter().zip(minimizers).map(|(&c, &m)| DVector::from_element(1, c * m)).collect();
        Self::new(a, b)
    }

    /// Minimizer of the summed loss.
    pub fn pooled_optimum(&self) -> Option<Vec<f64>> {
        let a = self.a.iter().skip(1).fold(self.a[0].clone(), |acc, x| acc + x);
        let b = self.b.iter().skip(1).fold(self.b[0].clone(), |acc, x| acc + x);
        a.lu().solve(&b).map(|x| x.iter().copied().collect())
    }
}

impl LocalObjective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.b[0].len()
    }

    fn device_count(&self) -> usize {
        self.a.len()
    }

    fn sample_count(&self, _device: usize) -> usize {
        1
    }

    fn loss_grad(&self, device: usize, w: &[f64], _sample: Sample) -> (f64, Vec<f64>) {
        let w = DVector::from_column_slice(w);
        let aw = &self.a[device] * &w;
        let loss = 0.5 * w.dot(&aw) - self.b[device].dot(&w);
        let g = aw - &self.b[device];
        (loss, g.iter().copied().collect())
    }

    fn quadratic(&self, device: usize) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        Some((&self.a[device], &self.b[device]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_blobs, partition_iid};
    use crate::nn::Activation;

    #[test]
    fn minibatch_is_deterministic_and_within_shard() {
        let ds = Arc::new(gen_blobs(3, 20, 2, 4.0, 1).unwrap());
        let plan = partition_iid(&ds, 2, 1).unwrap();
        let spec = ModelSpec::new(vec![2, 4, 3], Activation::Relu).unwrap();
        let task = NnTask::new(spec, ds, plan.assignments.clone(), 5, 9).unwrap();
        let a = task.batch(1, Sample::MiniBatch { round: 3 }).unwrap();
        let b = task.batch(1, Sample::MiniBatch { round: 3 }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let c = task.batch(1, Sample::MiniBatch { round: 4 }).unwrap();
        assert_ne!(a, c);
        assert_eq!(task.batch(1, Sample::Full).unwrap().len(), plan.assignments[1].len());
    }

    #[test]
    fn quadratic_gradient_and_optimum() {
        let q = QuadraticObjective::scalar(&[1.0, 1.0], &[1.0, 3.0]).unwrap();
        let (loss, g) = q.loss_grad(0, &[2.0], Sample::Full);
        assert_eq!(g, vec![1.0]);
        assert_eq!(loss, 2.0 - 2.0);
        assert!((q.pooled_optimum().unwrap()[0] - 2.0).abs() < 1e-12);
    }
}
