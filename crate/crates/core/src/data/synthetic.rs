use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{DatasetSchema, ModalityGroup, Sample};
use crate::error::{Error, Result};
use crate::labels::EmotionDistribution;
use crate::numerics::{derived_rng, Matrix, Rng};

/// Knobs of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Inverse temperature of the latent-to-label softmax.
    pub sharpness: f64,
    /// Scale of the per-subject latent mean, relative to the trial spread.
    pub subject_spread: f64,
    /// Standard deviation of the per-subject feature offset.
    pub offset_scale: f64,
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            sharpness: 1.0,
            subject_spread: 0.5,
            offset_scale: 0.3,
            noise: 0.1,
        }
    }
}

/// Generated samples together with the latent emotion vectors behind them.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub samples: Vec<Sample>,
    /// One row per sample.
    pub latents: Matrix,
}

/// Label indices of the strongly correlated cluster (afraid, nervous, scared for the PANAS labels).
pub fn fear_cluster(l: usize) -> Vec<usize> {
    let h = l / 2;
    if l - h >= 4 {
        vec![h, h + 2, h + 3]
    } else {
        Vec::new()
    }
}

/// Planted latent correlation: the first half of the labels are positive
/// affect, the rest negative affect.
///
/// Within positive 0.4, within negative 0.3, across −0.2, and 0.8 inside [`fear_cluster`].
pub fn planted_correlation(l: usize) -> Matrix {
    let h = l / 2;
    let cluster = fear_cluster(l);
    let mut s = Matrix::identity(l);
    for i in 0..l {
        for j in 0..l {
            if i == j {
                continue;
            }
            let v = if cluster.contains(&i) && cluster.contains(&j) {
                0.8
            } else if i < h && j < h {
                0.4
            } else if i >= h && j >= h {
                0.3
            } else {
                -0.2
            };
            s.set(i, j, v);
        }
    }
    s
}

/// Lower-triangular `L` with `L Lᵀ = a`.
fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                let d = a.get(i, i) - s;
                if d <= 0.0 {
                    return Err(Error::Numerical("planted correlation is not positive definite".into()));
                }
                l.set(i, j, d.sqrt());
            } else {
                l.set(i, j, (a.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    Ok(l)
}

fn normal_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn correlated(chol: &Matrix, rng: &mut Rng, scale: f64) -> Vec<f64> {
    let e = normal_vec(rng, chol.rows(), 1.0);
    (0..chol.rows())
        .map(|i| scale * (0..=i).map(|k| chol.get(i, k) * e[k]).sum::<f64>())
        .collect()
}

/// Deterministic synthetic dataset with planted label correlation.
///
/// ```
/// use helo::data::{generate_synthetic, DatasetSchema};
/// let samples = generate_synthetic(&DatasetSchema::dmer(), 2, 3, 7).unwrap();
/// assert_eq!(samples.len(), 6);
/// assert_eq!(samples[0].features["eeg"].len(), 90);
/// ```
pub fn generate_synthetic(schema: &DatasetSchema, n_subjects: usize, trials: usize, seed: u64) -> Result<Vec<Sample>> {
    Ok(generate_synthetic_with(schema, n_subjects, trials, seed, SyntheticConfig::default())?.samples)
}

pub fn generate_synthetic_with(
    schema: &DatasetSchema,
    n_subjects: usize,
    trials: usize,
    seed: u64,
    cfg: SyntheticConfig,
) -> Result<SyntheticData> {
    schema.validate()?;
    if n_subjects == 0 || trials == 0 {
        return Err(Error::Config("subject and trial counts must be positive".into()));
    }
    let l = schema.label_count();
    let chol = cholesky(&planted_correlation(l))?;

    let mut map_rng = derived_rng(seed, 1);
    let maps: Vec<Matrix> = schema
        .modalities
        .iter()
        .map(|m| Matrix::from_vec(m.dim, l, normal_vec(&mut map_rng, m.dim * l, 1.0 / (l as f64).sqrt())).expect("sized"))
        .collect();

    let mut subject_rng = derived_rng(seed, 2);
    let subjects: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..n_subjects)
        .map(|_| {
            let mean = correlated(&chol, &mut subject_rng, cfg.subject_spread);
            let offsets = schema
                .modalities
                .iter()
                .map(|m| normal_vec(&mut subject_rng, m.dim, cfg.offset_scale))
                .collect();
            (mean, offsets)
        })
        .collect();

    let mut rng = derived_rng(seed, 3);
    let mut samples = Vec::with_capacity(n_subjects * trials);
    let mut latents = Matrix::zeros(n_subjects * trials, l);
    for (s, (mean, offsets)) in subjects.iter().enumerate() {
        for t in 0..trials {
            let z: Vec<f64> = correlated(&chol, &mut rng, 1.0).iter().zip(mean).map(|(e, m)| e + m).collect();
            latents.row_mut(samples.len()).copy_from_slice(&z);
            let logits: Vec<f64> = z.iter().map(|v| cfg.sharpness * v).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
            let label = EmotionDistribution::from_weights(&w)?;

            let mut features = BTreeMap::new();
            for ((m, a), off) in schema.modalities.iter().zip(&maps).zip(offsets) {
                let v: Vec<f64> = (0..m.dim)
                    .map(|r| {
                        let x: f64 = a.row(r).iter().zip(&z).map(|(w, z)| w * z).sum();
                        let warped = match m.group {
                            ModalityGroup::Physiological => x.tanh(),
                            ModalityGroup::Behavioral => (2.0 * x).asinh(),
                        };
                        warped + off[r] + cfg.noise * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                features.insert(m.name.clone(), v);
            }
            samples.push(Sample {
                subject: s as u32 + 1,
                trial: t as u32 + 1,
                features,
                label,
            });
        }
    }
    Ok(SyntheticData { samples, latents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{ground_truth_correlation, EmotionDistribution};

    #[test]
    fn deterministic_per_seed() {
        let s = DatasetSchema::dmer();
        assert_eq!(generate_synthetic(&s, 2, 4, 9).unwrap(), generate_synthetic(&s, 2, 4, 9).unwrap());
        assert_ne!(generate_synthetic(&s, 2, 4, 9).unwrap(), generate_synthetic(&s, 2, 4, 10).unwrap());
    }

    #[test]
    fn full_dmer_size() {
        let s = DatasetSchema::dmer();
        let d = generate_synthetic(&s, 73, 32, 0).unwrap();
        assert_eq!(d.len(), 2336);
        for x in &d {
            x.validate(&s).unwrap();
        }
        assert!(generate_synthetic(&s, 0, 3, 0).is_err());
    }

    #[test]
    fn planted_matrix_is_positive_definite() {
        let p = planted_correlation(10);
        assert!(cholesky(&p).is_ok());
        assert_eq!(fear_cluster(10), vec![5, 7, 8]);
        assert_eq!(p, p.transpose());
    }

    #[test]
    fn latent_correlation_is_recovered() {
        let data = generate_synthetic_with(&DatasetSchema::dmer(), 100, 100, 3, SyntheticConfig {
            subject_spread: 0.0,
            ..Default::default()
        })
        .unwrap();
        let z = &data.latents;
        let (n, l) = z.shape();
        let mean: Vec<f64> = (0..l).map(|j| (0..n).map(|i| z.get(i, j)).sum::<f64>() / n as f64).collect();
        let planted = planted_correlation(l);
        let cov = |a: usize, b: usize| (0..n).map(|i| (z.get(i, a) - mean[a]) * (z.get(i, b) - mean[b])).sum::<f64>() / n as f64;
        for a in 0..l {
            for b in 0..l {
                let r = cov(a, b) / (cov(a, a) * cov(b, b)).sqrt();
                assert!((r - planted.get(a, b)).abs() <= 0.1, "({a},{b}) {r}");
            }
        }
    }

    #[test]
    fn label_correlation_shows_the_cluster() {
        let data = generate_synthetic(&DatasetSchema::dmer(), 50, 200, 4).unwrap();
        let labels: Vec<&EmotionDistribution> = data.iter().map(|s| &s.label).collect();
        let m = ground_truth_correlation(&labels).unwrap().matrix;
        let cluster = fear_cluster(10);
        let inter: Vec<f64> = cluster
            .iter()
            .flat_map(|&a| (0..10).filter(|b| !cluster.contains(b)).map(move |b| (a, b)))
            .map(|(a, b)| m.get(a, b))
            .collect();
        let inter_mean = inter.iter().sum::<f64>() / inter.len() as f64;
        for &a in &cluster {
            for &b in &cluster {
                assert!(m.get(a, b) > inter_mean + 0.2, "({a},{b})");
            }
        }
    }
}
