//! Baselines that complete a dataset before classical training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetWithMask;
use crate::density::{conditional, em_fit, sample_completion_with, GmmParams, MissingPoint};
use crate::error::{Error, Result};

/// EM settings used by the gmm-sample baseline.
const EM_MAX_ITER: usize = 200;
const EM_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ImputerKind {
    /// Column means over the observed training entries.
    Mean,
    /// Average of the `k` nearest training rows that observe the feature.
    Knn { k: usize },
    /// Zero the missing inputs and divide the rest by `1 - rate`. `None`
    /// uses the training set's missing fraction.
    Dropout {
        #[serde(default)]
        rate: Option<f64>,
    },
    /// Draw the missing values from a GMM fitted by EM.
    GmmSample { components: usize, seed: u64 },
}

#[derive(Clone, Debug)]
enum State {
    Mean(Vec<f64>),
    Knn {
        k: usize,
        train: DatasetWithMask,
        means: Vec<f64>,
    },
    Dropout(f64),
    Gmm { gmm: GmmParams, seed: u64 },
}

/// A fitted imputer. Its state is frozen at fit time.
#[derive(Clone, Debug)]
pub struct Imputer {
    kind: ImputerKind,
    state: State,
}

/// Result of imputing one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Imputed {
    pub values: Vec<f64>,
    /// Missing features filled with the column mean because no k-nn
    /// candidate shared an observed feature.
    pub fallbacks: usize,
}

/// Summary of a dataset transform.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImputeStats {
    pub imputed_cells: usize,
    pub knn_fallbacks: usize,
}

fn column_means(train: &DatasetWithMask) -> Result<Vec<f64>> {
    train
        .observed_column_means()
        .into_iter()
        .enumerate()
        .map(|(column, m)| m.ok_or(Error::FullyMissingColumn { column }))
        .collect()
}

impl Imputer {
    pub fn fit(kind: ImputerKind, train: &DatasetWithMask) -> Result<Self> {
        if train.n_rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let state = match &kind {
            ImputerKind::Mean => State::Mean(column_means(train)?),
            ImputerKind::Knn { k } => {
                if *k == 0 {
                    return Err(Error::invalid("k-nn needs K >= 1"));
                }
                State::Knn {
                    k: *k,
                    train: train.clone(),
                    means: column_means(train)?,
                }
            }
            ImputerKind::Dropout { rate } => {
                let rate = rate.unwrap_or_else(|| train.missing_fraction());
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
                }
                State::Dropout(rate)
            }
            ImputerKind::GmmSample { components, seed } => {
                column_means(train)?;
                let gmm = em_fit(train, *components, *seed, EM_MAX_ITER, EM_TOL)?.with_gamma(0.0);
                State::Gmm { gmm, seed: *seed }
            }
        };
        Ok(Imputer { kind, state })
    }

    pub fn kind(&self) -> &ImputerKind {
        &self.kind
    }

    /// Stored column means (mean and k-nn imputers).
    pub fn column_means(&self) -> Option<&[f64]> {
        match &self.state {
            State::Mean(m) | State::Knn { means: m, .. } => Some(m),
            _ => None,
        }
    }

    /// The resolved dropout rate.
    pub fn dropout_rate(&self) -> Option<f64> {
        match self.state {
            State::Dropout(r) => Some(r),
            _ => None,
        }
    }

    /// The fitted mixture of the gmm-sample imputer.
    pub fn gmm(&self) -> Option<&GmmParams> {
        match &self.state {
            State::Gmm { gmm, .. } => Some(gmm),
            _ => None,
        }
    }

    fn dim(&self) -> Option<usize> {
        match &self.state {
            State::Mean(m) | State::Knn { means: m, .. } => Some(m.len()),
            State::Gmm { gmm, .. } => Some(gmm.dim()),
            State::Dropout(_) => None,
        }
    }

    /// Completes one point. `index` selects the random stream of the
    /// gmm-sample imputer so results are deterministic per (seed, index).
    pub fn transform_point(&self, point: &MissingPoint, index: u64) -> Result<Imputed> {
        if let Some(d) = self.dim() {
            if point.dim() != d {
                return Err(Error::invalid(format!(
                    "point has dimension {} but the imputer was fitted on {d}",
                    point.dim()
                )));
            }
        }
        let mut values = point.values().to_vec();
        if point.is_complete() {
            return Ok(Imputed { values, fallbacks: 0 });
        }
        let mut fallbacks = 0;
        match &self.state {
            State::Mean(means) => {
                for j in point.missing_indices() {
                    values[j] = means[j];
                }
            }
            State::Knn { k, train, means } => {
                fallbacks = knn_fill(point, train, *k, means, &mut values);
            }
            State::Dropout(rate) => {
                let keep = 1.0 / (1.0 - rate);
                for (j, v) in values.iter_mut().enumerate() {
                    *v = if point.is_missing(j) { 0.0 } else { *v * keep };
                }
            }
            State::Gmm { gmm, seed } => {
                let cond = conditional(gmm, point)?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(index);
                values = sample_completion_with(&cond, point, &mut rng);
            }
        }
        Ok(Imputed { values, fallbacks })
    }

    /// Completes every row; the result has an empty mask and keeps labels
    /// and normalization metadata.
    pub fn transform(&self, data: &DatasetWithMask) -> Result<(DatasetWithMask, ImputeStats)> {
        let mut rows = Vec::with_capacity(data.n_rows());
        let mut stats = ImputeStats::default();
        for i in 0..data.n_rows() {
            let p = data.point(i);
            stats.imputed_cells += p.missing_indices().len();
            let out = self.transform_point(&p, i as u64)?;
            stats.knn_fallbacks += out.fallbacks;
            rows.push(out.values);
        }
        let mask = vec![vec![false; data.n_cols()]; data.n_rows()];
        Ok((data.with_values(rows, mask)?, stats))
    }
}

/// Squared distance over mutually observed features divided by their count;
/// `None` when no feature is shared.
pub fn knn_distance(a: &[f64], a_mask: &[bool], b: &[f64], b_mask: &[bool]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for j in 0..a.len() {
        if !a_mask[j] && !b_mask[j] {
            let d = a[j] - b[j];
            sum += d * d;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn knn_fill(point: &MissingPoint, train: &DatasetWithMask, k: usize, means: &[f64], out: &mut [f64]) -> usize {
    let mut ranked: Vec<(f64, usize)> = (0..train.n_rows())
        .filter_map(|t| {
            knn_distance(point.values(), point.mask(), train.row(t), train.row_mask(t)).map(|d| (d, t))
        })
        .collect();
    // Ties resolve to the lowest training index.
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut fallbacks = 0;
    for j in point.missing_indices() {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &(_, t) in &ranked {
            if !train.is_missing(t, j) {
                sum += train.row(t)[j];
                n += 1;
                if n == k {
                    break;
                }
            }
        }
        out[j] = if n > 0 {
            sum / n as f64
        } else {
            fallbacks += 1;
            means[j]
        };
    }
    fallbacks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> DatasetWithMask {
        DatasetWithMask::new(
            vec![vec![1.0, 10.0], vec![3.0, 0.0], vec![0.0, 20.0]],
            vec![vec![false, false], vec![false, true], vec![true, false]],
            None,
        )
        .unwrap()
    }

    fn mp(values: Vec<f64>, mask: Vec<bool>) -> MissingPoint {
        MissingPoint::new(values, mask).unwrap()
    }

    #[test]
    fn mean_of_observed_entries() {
        let imp = Imputer::fit(ImputerKind::Mean, &table()).unwrap();
        assert_eq!(imp.column_means().unwrap(), &[2.0, 15.0]);
        let out = imp.transform_point(&mp(vec![f64::NAN, 7.0], vec![true, false]), 0).unwrap();
        assert_eq!(out.values, vec![2.0, 7.0]);
    }

    #[test]
    fn fully_missing_column_is_reported() {
        let d = DatasetWithMask::new(vec![vec![1.0, 0.0]; 2], vec![vec![false, true]; 2], None).unwrap();
        for kind in [ImputerKind::Mean, ImputerKind::Knn { k: 1 }, ImputerKind::GmmSample { components: 1, seed: 0 }] {
            assert!(matches!(Imputer::fit(kind, &d), Err(Error::FullyMissingColumn { column: 1 })));
        }
        assert!(Imputer::fit(ImputerKind::Dropout { rate: None }, &d).is_ok());
    }

    #[test]
    fn knn_copies_identical_row() {
        let imp = Imputer::fit(ImputerKind::Knn { k: 1 }, &table()).unwrap();
        let out = imp.transform_point(&mp(vec![1.0, f64::NAN], vec![false, true]), 0).unwrap();
        assert_eq!(out.values, vec![1.0, 10.0]);
    }

    #[test]
    fn knn_falls_back_without_shared_features() {
        let train = DatasetWithMask::new(vec![vec![1.0, 0.0], vec![3.0, 0.0]], vec![vec![false, true], vec![false, true]], None);
        // every column needs an observation, so build a table where the
        // query's observed feature is never observed alongside column 0
        let train = train.unwrap();
        assert!(Imputer::fit(ImputerKind::Knn { k: 1 }, &train).is_err());
        let train = DatasetWithMask::new(
            vec![vec![1.0, 0.0], vec![0.0, 5.0]],
            vec![vec![false, true], vec![true, false]],
            None,
        )
        .unwrap();
        let imp = Imputer::fit(ImputerKind::Knn { k: 2 }, &train).unwrap();
        let out = imp.transform_point(&mp(vec![f64::NAN, 4.0], vec![true, false]), 0).unwrap();
        assert_eq!(out.values, vec![1.0, 4.0]);
        assert_eq!(out.fallbacks, 1);
    }

    #[test]
    fn dropout_scales_observed() {
        let imp = Imputer::fit(ImputerKind::Dropout { rate: Some(0.5) }, &table()).unwrap();
        let out = imp.transform_point(&mp(vec![4.0, f64::NAN], vec![false, true]), 0).unwrap();
        assert_eq!(out.values, vec![8.0, 0.0]);
        let auto = Imputer::fit(ImputerKind::Dropout { rate: None }, &table()).unwrap();
        assert!((auto.dropout_rate().unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert!(Imputer::fit(ImputerKind::Dropout { rate: Some(1.0) }, &table()).is_err());
    }

    #[test]
    fn complete_points_unchanged() {
        let p = mp(vec![0.25, -3.0], vec![false, false]);
        for kind in [
            ImputerKind::Mean,
            ImputerKind::Knn { k: 2 },
            ImputerKind::Dropout { rate: Some(0.3) },
            ImputerKind::GmmSample { components: 1, seed: 4 },
        ] {
            let imp = Imputer::fit(kind, &table()).unwrap();
            assert_eq!(imp.transform_point(&p, 9).unwrap().values, p.values());
        }
    }

    #[test]
    fn gmm_sample_collapses_to_mean() {
        let d = DatasetWithMask::complete(vec![vec![2.0, 5.0]; 10], None).unwrap();
        let imp = Imputer::fit(ImputerKind::GmmSample { components: 1, seed: 1 }, &d).unwrap();
        let out = imp.transform_point(&mp(vec![2.0, f64::NAN], vec![false, true]), 3).unwrap();
        assert!((out.values[1] - 5.0).abs() < 1e-3);
        assert_eq!(imp.gmm().unwrap().gamma(), 0.0);
    }

    #[test]
    fn gmm_sample_is_deterministic_per_index() {
        let imp = Imputer::fit(ImputerKind::GmmSample { components: 2, seed: 7 }, &table()).unwrap();
        let p = mp(vec![f64::NAN, 12.0], vec![true, false]);
        let a = imp.transform_point(&p, 5).unwrap();
        assert_eq!(a, imp.transform_point(&p, 5).unwrap());
        assert_ne!(a, imp.transform_point(&p, 6).unwrap());
    }
}
