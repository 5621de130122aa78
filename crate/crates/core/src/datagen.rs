//! Seeded two-class Gaussian mixture.
//!
//! Stream layout per point (frozen): one uniform for the class (`y = 1` when
//! `u < class_prob`), then `ceil(d/2)` polar normal pairs for the features (spare
//! value dropped when `d` is odd), then one uniform for the label flip
//! (`u < flip_prob`).

use serde::{Deserialize, Serialize};

use crate::engine::FederatedDataset;
use crate::losses::DataPoint;
use crate::rng::Stream;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    /// Feature mean of class `y = 0`.
    pub mean0: Vec<f64>,
    /// Feature mean of class `y = 1`.
    pub mean1: Vec<f64>,
    /// Probability of drawing class `y = 1`.
    pub class_prob: f64,
    pub flip_prob: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            mean0: vec![1.0, -1.0],
            mean1: vec![-1.0, 1.0],
            class_prob: 0.5,
            flip_prob: 0.1,
        }
    }
}

impl MixtureSpec {
    /// Default means extended to dimension `d`: `mean0 = (1, -1, 1, ..)`,
    /// `mean1 = -mean0`.
    pub fn with_dimension(d: usize) -> Self {
        let mean0: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let mean1 = mean0.iter().map(|v| -v).collect();
        MixtureSpec {
            mean0,
            mean1,
            ..Default::default()
        }
    }

    pub fn dimension(&self) -> usize {
        self.mean0.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean0.is_empty() || self.mean0.len() != self.mean1.len() {
            return Err(Error::invalid(
                "data.mean1",
                format!(
                    "class means must share a positive dimension ({} vs {})",
                    self.mean0.len(),
                    self.mean1.len()
                ),
            ));
        }
        if self.mean0.iter().chain(&self.mean1).any(|v| !v.is_finite()) {
            return Err(Error::invalid("data.mean0", "non-finite mean entry"));
        }
        for (name, p) in [("data.class_prob", self.class_prob), ("data.flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, format!("{p} not in [0, 1]")));
            }
        }
        Ok(())
    }

    fn draw(&self, stream: &mut Stream, noise: &mut [f64]) -> DataPoint {
        let class_one = stream.unit() < self.class_prob;
        stream.fill_normal(noise);
        let mean = if class_one { &self.mean1 } else { &self.mean0 };
        let x = mean.iter().zip(noise.iter()).map(|(m, e)| m + e).collect();
        let flipped = stream.unit() < self.flip_prob;
        let y = if class_one != flipped { 1.0 } else { 0.0 };
        DataPoint { x, y }
    }
}

/// `count` i.i.d. points from one seeded stream.
pub fn sample(spec: &MixtureSpec, count: usize, seed: u64) -> Vec<DataPoint> {
    let mut stream = Stream::new(seed);
    let mut noise = vec![0.0; spec.dimension()];
    (0..count).map(|_| spec.draw(&mut stream, &mut noise)).collect()
}

/// A single replacement point drawn on its own sub-stream.
pub fn fresh_swap_value(spec: &MixtureSpec, sub_seed: u64) -> DataPoint {
    let mut stream = Stream::new(sub_seed);
    let mut noise = vec![0.0; spec.dimension()];
    spec.draw(&mut stream, &mut noise)
}

/// Row-major fill: agent `j` receives points `j*n .. (j+1)*n`.
pub fn partition(points: Vec<DataPoint>, m: usize, n: usize) -> Result<FederatedDataset> {
    if points.len() != m * n {
        return Err(Error::invalid(
            "points",
            format!("have {} points, need m*n = {}", points.len(), m * n),
        ));
    }
    let mut it = points.into_iter();
    let agents = (0..m).map(|_| it.by_ref().take(n).collect()).collect();
    FederatedDataset::new(agents)
}
