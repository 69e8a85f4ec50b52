//! Diagonal Gaussian over weights visited by SGD.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::rng::Stream;

/// Running first and second moments of every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SwagStats {
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub mean: BTreeMap<String, Vec<f64>>,
    pub sq_mean: BTreeMap<String, Vec<f64>>,
    pub n_collected: usize,
}

impl SwagStats {
    /// Empty moments laid out like `params`.
    pub fn new(params: &BTreeMap<String, Tensor>) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
        SwagStats {
            shapes: params.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect(),
            mean: zeros(),
            sq_mean: zeros(),
            n_collected: 0,
        }
    }

    /// Moments of an explicit list of snapshots.
    pub fn from_snapshots(snapshots: &[BTreeMap<String, Tensor>]) -> Result<Self> {
        let first = snapshots.first().ok_or_else(|| Error::InvalidArgument("no snapshots".into()))?;
        let mut stats = SwagStats::new(first);
        for s in snapshots {
            stats.collect(s);
        }
        Ok(stats)
    }

    /// Folds one snapshot into the running moments.
    pub fn collect(&mut self, params: &BTreeMap<String, Tensor>) {
        let n = self.n_collected as f64;
        for (k, t) in params {
            let (Some(m), Some(s)) = (self.mean.get_mut(k), self.sq_mean.get_mut(k)) else { continue };
            for ((mi, si), &v) in m.iter_mut().zip(s.iter_mut()).zip(t.data()) {
                let v = v as f64;
                *mi = (*mi * n + v) / (n + 1.0);
                *si = (*si * n + v * v) / (n + 1.0);
            }
        }
        self.n_collected += 1;
    }

    /// `max(E[theta^2] - E[theta]^2, 0)` per weight.
    pub fn variance(&self, key: &str) -> Option<Vec<f64>> {
        let (m, s) = (self.mean.get(key)?, self.sq_mean.get(key)?);
        Some(m.iter().zip(s).map(|(m, s)| (s - m * m).max(0.0)).collect())
    }

    pub fn mean_params(&self) -> Result<BTreeMap<String, Tensor>> {
        self.mean.iter().map(|(k, m)| Ok((k.clone(), Tensor::new(self.shapes[k].clone(), m.iter().map(|&v| v as f32).collect())?))).collect()
    }

    /// Draws `theta ~ N(mean, scale^2 * diag(variance))`.
    pub fn sample(&self, scale: f32, stream: &mut Stream) -> Result<BTreeMap<String, Tensor>> {
        if self.n_collected < 2 {
            return Err(Error::InvalidArgument(format!("swag needs at least 2 snapshots, has {}", self.n_collected)));
        }
        let mut out = BTreeMap::new();
        for (k, m) in &self.mean {
            let var = self.variance(k).expect("same keys");
            let data = m
                .iter()
                .zip(&var)
                .map(|(&mu, &v)| {
                    let z: f64 = StandardNormal.sample(stream);
                    (mu + scale as f64 * v.sqrt() * z) as f32
                })
                .collect();
            out.insert(k.clone(), Tensor::new(self.shapes[k].clone(), data)?);
        }
        Ok(out)
    }
}
