use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A fixed 2-D PCA projection fitted once per period on the scored features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureProjection {
    pub mean: Vec<f64>,
    /// Two unit-norm principal directions, largest eigenvalue first. Each is signed so
    /// that its largest-magnitude entry is positive.
    pub components: [Vec<f64>; 2],
}

impl FeatureProjection {
    pub fn fit(features: &Array2<f64>) -> Self {
        let (n, d) = features.dim();
        let mean: Vec<f64> = (0..d)
            .map(|j| {
                if n == 0 {
                    0.0
                } else {
                    features.column(j).sum() / n as f64
                }
            })
            .collect();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for row in features.rows() {
            for a in 0..d {
                let da = row[a] - mean[a];
                for b in a..d {
                    cov[(a, b)] += da * (row[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                cov[(a, b)] = cov[(b, a)];
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
        let component = |k: usize| -> Vec<f64> {
            let Some(&col) = order.get(k) else {
                return vec![0.0; d];
            };
            let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        };
        Self {
            mean,
            components: [component(0), component(1)],
        }
    }

    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        let dot = |c: &[f64]| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum();
        [dot(&self.components[0]), dot(&self.components[1])]
    }
}
