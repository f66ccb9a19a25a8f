//! Experiment configs, runners and metric reports.
//!
//! Every runner masks the data once and hands the same masked rows and the
//! same folds to each method, so method comparisons are paired.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_mask, images_to_dataset, kfold_split, load_csv, normalize, read_idx_images, read_idx_labels, CsvOptions,
    DatasetWithMask, MaskKind, MaskPolicy, NormScheme,
};
use crate::density::{em_fit, GmmParams, DEFAULT_GAMMA};
use crate::error::{Error, Result};
use crate::imputers::{Imputer, ImputerKind};
use crate::nn::{
    accuracy, train, Activation, Example, LayerSpec, LossKind, NetworkModel, Target, TrainConfig, TrainReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Autoencoder,
    MlpClassify,
    RbfnClassify,
    ToyDensity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Generalized,
    Mean,
    Knn,
    Dropout,
    GmmSample,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Generalized => "generalized",
            Method::Mean => "mean",
            Method::Knn => "knn",
            Method::Dropout => "dropout",
            Method::GmmSample => "gmm-sample",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        options: CsvOptions,
    },
    /// IDX image file (optionally gzipped) with an optional label file.
    Idx {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
    },
    /// A dataset serialized with [`DatasetWithMask::save_json`].
    Json { path: PathBuf },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<DatasetWithMask> {
        match self {
            DatasetSpec::Csv { path, options } => load_csv(path, options),
            DatasetSpec::Idx { images, labels } => {
                let imgs = read_idx_images(images)?;
                let labels = labels.as_ref().map(read_idx_labels).transpose()?;
                images_to_dataset(&imgs, labels.as_deref())
            }
            DatasetSpec::Json { path } => DatasetWithMask::load_json(path),
        }
    }

    fn paths(&self) -> Vec<&Path> {
        match self {
            DatasetSpec::Csv { path, .. } | DatasetSpec::Json { path } => vec![path],
            DatasetSpec::Idx { images, labels } => {
                let mut v = vec![images.as_path()];
                v.extend(labels.as_deref());
                v
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensitySpec {
    /// Component counts tried by inner cross-validation; the first is used
    /// where no selection happens.
    #[serde(default = "default_k_candidates")]
    pub k_candidates: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_em_iter")]
    pub em_max_iter: usize,
    #[serde(default = "default_em_tol")]
    pub em_tol: f64,
}

fn default_k_candidates() -> Vec<usize> {
    vec![2, 3, 5]
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_em_iter() -> usize {
    100
}
fn default_em_tol() -> f64 {
    1e-6
}

impl Default for DensitySpec {
    fn default() -> Self {
        DensitySpec {
            k_candidates: default_k_candidates(),
            gamma: default_gamma(),
            em_max_iter: default_em_iter(),
            em_tol: default_em_tol(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSpec {
    #[serde(default = "five")]
    pub outer_folds: usize,
    /// Inner folds for hyperparameter selection; below 2 disables selection.
    #[serde(default = "five")]
    pub inner_folds: usize,
    #[serde(default = "yes")]
    pub stratified: bool,
}

fn five() -> usize {
    5
}
fn yes() -> bool {
    true
}

impl Default for CvSpec {
    fn default() -> Self {
        CvSpec {
            outer_folds: 5,
            inner_folds: 5,
            stratified: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeSpec {
    #[serde(default = "ae_train")]
    pub train_size: usize,
    #[serde(default = "ae_test")]
    pub test_size: usize,
    #[serde(default = "sigmoid")]
    pub hidden_activation: Activation,
    #[serde(default = "sigmoid")]
    pub output_activation: Activation,
    /// Directory for PGM reconstructions of the first `pgm_count` test images.
    #[serde(default)]
    pub pgm_dir: Option<PathBuf>,
    #[serde(default = "pgm_count")]
    pub pgm_count: usize,
}

fn ae_train() -> usize {
    10_000
}
fn ae_test() -> usize {
    2_000
}
fn sigmoid() -> Activation {
    Activation::Sigmoid
}
fn pgm_count() -> usize {
    8
}

impl Default for AeSpec {
    fn default() -> Self {
        AeSpec {
            train_size: ae_train(),
            test_size: ae_test(),
            hidden_activation: sigmoid(),
            output_activation: sigmoid(),
            pgm_dir: None,
            pgm_count: pgm_count(),
        }
    }
}

/// Two-class, four-Gaussian toy set; only points with `x₁ < 0` may lose a
/// coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    #[serde(default = "toy_n")]
    pub n_train: usize,
    #[serde(default = "toy_n")]
    pub n_test: usize,
    #[serde(default = "toy_std")]
    pub std: f64,
    /// Probability that a point with `x₁ < 0` loses one random coordinate.
    #[serde(default = "toy_p")]
    pub missing_prob: f64,
    /// `(x₁, x₂, class)` of each Gaussian.
    #[serde(default = "toy_centers")]
    pub centers: Vec<(f64, f64, usize)>,
}

fn toy_n() -> usize {
    1000
}
fn toy_std() -> f64 {
    0.6
}
fn toy_p() -> f64 {
    0.5
}
fn toy_centers() -> Vec<(f64, f64, usize)> {
    vec![(-3.0, 2.0, 0), (1.5, -2.0, 0), (-1.5, -2.0, 1), (3.0, 2.0, 1)]
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            n_train: toy_n(),
            n_test: toy_n(),
            std: toy_std(),
            missing_prob: toy_p(),
            centers: toy_centers(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default = "MaskPolicy::as_is")]
    pub mask: MaskPolicy,
    /// MCAR levels added on top of `mask` for the classification runs; empty
    /// means a single run with `mask` alone.
    #[serde(default)]
    pub missing_levels: Vec<f64>,
    pub methods: Vec<Method>,
    /// Hidden widths. Autoencoder: every hidden layer; MLP: all hidden layers;
    /// toy: the generalized layer then dense ReLU layers.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// RBF unit counts tried by inner cross-validation.
    #[serde(default = "default_units")]
    pub rbf_units: Vec<usize>,
    pub train: TrainConfig,
    #[serde(default)]
    pub density: DensitySpec,
    #[serde(default)]
    pub cv: CvSpec,
    #[serde(default)]
    pub normalization: Option<NormScheme>,
    #[serde(default = "five")]
    pub knn_k: usize,
    /// Dropout baseline rate; `None` uses the training missing fraction.
    #[serde(default)]
    pub dropout_rate: Option<f64>,
    #[serde(default)]
    pub autoencoder: AeSpec,
    #[serde(default)]
    pub toy: ToySpec,
    /// Permute the labels before training (null-model check).
    #[serde(default)]
    pub shuffle_labels: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn default_units() -> Vec<usize> {
    vec![25, 50, 75, 100]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks method/architecture compatibility and that input files exist.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        self.train.validate()?;
        if self.density.k_candidates.is_empty() || self.density.k_candidates.contains(&0) {
            return bad("density.k_candidates must be non-empty and positive");
        }
        if !(self.density.gamma >= 0.0) {
            return bad("density.gamma must be >= 0");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if self.missing_levels.iter().any(|p| !(0.0..1.0).contains(p)) {
            return bad("missing levels must lie in [0, 1)");
        }
        if self.knn_k == 0 {
            return bad("knn_k must be >= 1");
        }
        match self.experiment {
            ExperimentKind::ToyDensity => {
                if self.toy.centers.is_empty() || !(self.toy.std > 0.0) {
                    return bad("toy needs centers and a positive std");
                }
            }
            kind => {
                let Some(ds) = &self.dataset else {
                    return bad("this experiment needs a dataset");
                };
                for p in ds.paths() {
                    if !p.exists() {
                        return Err(Error::Config(format!("dataset file {} does not exist", p.display())));
                    }
                }
                if kind == ExperimentKind::Autoencoder && !matches!(self.mask.kind, MaskKind::Patch { .. } | MaskKind::AsIs)
                {
                    return bad("the autoencoder expects a patch (or as-is) mask on grid data");
                }
                if kind != ExperimentKind::Autoencoder && self.cv.outer_folds < 2 {
                    return bad("cv.outer_folds must be >= 2");
                }
                if kind == ExperimentKind::RbfnClassify && (self.rbf_units.is_empty() || self.rbf_units.contains(&0)) {
                    return bad("rbf_units must be non-empty and positive");
                }
            }
        }
        Ok(())
    }
}

/// Metrics of one fold (or their mean).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mse_total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mse_inside: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mse_outside: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_loss: Option<f64>,
}

impl Metrics {
    fn fields(&self) -> [Option<f64>; 5] {
        [self.accuracy, self.mse_total, self.mse_inside, self.mse_outside, self.train_loss]
    }

    /// Field-wise mean; a field is kept only if every input has it.
    pub fn mean(all: &[Metrics]) -> Metrics {
        let avg = |i: usize| -> Option<f64> {
            let vals: Option<Vec<f64>> = all.iter().map(|m| m.fields()[i]).collect();
            vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        Metrics {
            accuracy: avg(0),
            mse_total: avg(1),
            mse_inside: avg(2),
            mse_outside: avg(3),
            train_loss: avg(4),
        }
    }

    fn all_finite(&self) -> bool {
        self.fields().iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub selected_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub selected_units: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    /// Extra MCAR level of this run, when the config sweeps levels.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub missing_level: Option<f64>,
    pub folds: Vec<FoldMetrics>,
    pub aggregate: Metrics,
}

/// Density snapshots of the toy experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensitySnapshots {
    pub initial: GmmParams,
    pub joint: GmmParams,
    /// Held-out accuracy with the density frozen at its initial value.
    pub frozen_accuracy: f64,
    /// Held-out accuracy of the untrained network.
    pub untrained_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: ExperimentKind,
    pub version: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
    pub config: ExperimentConfig,
    pub results: Vec<MethodResult>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub density: Option<DensitySnapshots>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Result for `method` at `level` (`None` for runs without a level sweep).
    pub fn result(&self, method: Method, level: Option<f64>) -> Option<&MethodResult> {
        self.results
            .iter()
            .find(|r| r.method == method && r.missing_level == level)
    }

    /// Human-readable table of aggregate metrics.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>7} {:>9} {:>10} {:>10} {:>11}",
            "method", "level", "accuracy", "mse_total", "mse_inside", "mse_outside"
        );
        let cell = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |v| format!("{v:.prec$}"));
        for r in &self.results {
            let a = &r.aggregate;
            let _ = writeln!(
                s,
                "{:<12} {:>7} {:>9} {:>10} {:>10} {:>11}",
                r.method.name(),
                cell(r.missing_level, 2),
                cell(a.accuracy, 4),
                cell(a.mse_total, 5),
                cell(a.mse_inside, 5),
                cell(a.mse_outside, 5)
            );
        }
        if let Some(d) = &self.density {
            let _ = writeln!(
                s,
                "frozen-density accuracy {:.4}, untrained accuracy {:.4}",
                d.frozen_accuracy, d.untrained_accuracy
            );
        }
        s
    }
}

/// Writes the report as JSON and prints its table to standard output.
pub fn emit_report(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report.to_json()?).map_err(|e| Error::io(path, e))?;
    print!("{}", report.table());
    Ok(())
}

/// Runs the experiment named by `cfg.experiment`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    match cfg.experiment {
        ExperimentKind::Autoencoder => run_autoencoder(cfg),
        ExperimentKind::MlpClassify => run_mlp_classify(cfg),
        ExperimentKind::RbfnClassify => run_rbfn_classify(cfg),
        ExperimentKind::ToyDensity => run_toy_density(cfg),
    }
}

fn finish(cfg: &ExperimentConfig, start: Instant, results: Vec<MethodResult>, density: Option<DensitySnapshots>) -> Result<MetricsReport> {
    if results.iter().any(|r| !r.aggregate.all_finite() || r.folds.iter().any(|f| !f.metrics.all_finite())) {
        return Err(Error::Internal("non-finite metric in report".into()));
    }
    Ok(MetricsReport {
        experiment: cfg.experiment,
        version: crate::VERSION.to_string(),
        seed: cfg.seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
        results,
        density,
    })
}

fn imputer_kind(cfg: &ExperimentConfig, method: Method, k: usize, seed: u64) -> Option<ImputerKind> {
    match method {
        Method::Generalized => None,
        Method::Mean => Some(ImputerKind::Mean),
        Method::Knn => Some(ImputerKind::Knn { k: cfg.knn_k }),
        Method::Dropout => Some(ImputerKind::Dropout { rate: cfg.dropout_rate }),
        Method::GmmSample => Some(ImputerKind::GmmSample { components: k, seed }),
    }
}

fn fit_density(cfg: &ExperimentConfig, data: &DatasetWithMask, k: usize, seed: u64) -> Result<GmmParams> {
    Ok(em_fit(data, k, seed, cfg.density.em_max_iter, cfg.density.em_tol)?.with_gamma(cfg.density.gamma))
}

/// Inputs for `method`: the masked rows for the generalized network,
/// otherwise the imputed rows fitted on `train`.
fn method_inputs(
    cfg: &ExperimentConfig,
    method: Method,
    train: &DatasetWithMask,
    others: &[&DatasetWithMask],
    k: usize,
    seed: u64,
) -> Result<(DatasetWithMask, Vec<DatasetWithMask>)> {
    match imputer_kind(cfg, method, k, seed) {
        None => Ok((train.clone(), others.iter().map(|d| (*d).clone()).collect())),
        Some(kind) => {
            let imp = Imputer::fit(kind, train)?;
            let t = imp.transform(train)?.0;
            let o = others.iter().map(|d| imp.transform(d).map(|x| x.0)).collect::<Result<_>>()?;
            Ok((t, o))
        }
    }
}

fn seeded_train(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

fn final_loss(r: &TrainReport) -> Option<f64> {
    r.epochs.last().map(|e| e.train_loss)
}

// ---------------------------------------------------------------- autoencoder

/// Reconstruction errors split by region. All three are sums of squared
/// errors divided by the total pixel count, so `total = inside + outside`.
pub fn region_errors(recon: &[Vec<f64>], truth: &DatasetWithMask) -> (f64, f64, f64) {
    let (n, d) = (truth.n_rows(), truth.n_cols());
    let mut inside = 0.0;
    let mut outside = 0.0;
    for (i, r) in recon.iter().enumerate() {
        let row = truth.row(i);
        for j in 0..d {
            let e = r[j] - row[j];
            if truth.is_missing(i, j) {
                inside += e * e;
            } else {
                outside += e * e;
            }
        }
    }
    let cells = (n * d).max(1) as f64;
    ((inside + outside) / cells, inside / cells, outside / cells)
}

/// Writes an 8-bit binary PGM (P5) of intensities in `[0, 1]`.
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != width * height {
        return Err(Error::invalid("PGM pixel count differs from width x height"));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn grid_of(cfg: &ExperimentConfig, d: usize) -> (usize, usize) {
    match cfg.mask.kind {
        MaskKind::Patch { grid_h, grid_w, .. } => (grid_h, grid_w),
        _ => {
            let side = (d as f64).sqrt().round() as usize;
            if side * side == d {
                (side, side)
            } else {
                (1, d)
            }
        }
    }
}

fn ae_layers(cfg: &ExperimentConfig, d: usize, generalized: bool) -> Vec<LayerSpec> {
    let hidden: Vec<usize> = if cfg.hidden.is_empty() {
        vec![256, 128, 64, 128, 256]
    } else {
        cfg.hidden.clone()
    };
    let ae = &cfg.autoencoder;
    let mut specs = vec![if generalized {
        LayerSpec::GeneralizedRelu { width: hidden[0] }
    } else {
        LayerSpec::Dense {
            width: hidden[0],
            activation: Activation::Relu,
        }
    }];
    specs.extend(hidden[1..].iter().map(|&w| LayerSpec::Dense {
        width: w,
        activation: ae.hidden_activation,
    }));
    specs.push(LayerSpec::Dense {
        width: d,
        activation: ae.output_activation,
    });
    specs
}

/// Masked-image reconstruction with a 5-hidden-layer autoencoder. Training
/// only ever sees pixels outside the mask; errors are measured on held-out
/// images against the unmasked ground truth.
pub fn run_autoencoder(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let start = Instant::now();
    let ds = cfg.dataset.as_ref().expect("validated").load()?;
    let ds = match cfg.normalization {
        Some(s) => normalize(&ds, s),
        None => ds,
    };
    let ae = &cfg.autoencoder;
    let need = ae.train_size + ae.test_size;
    if ds.n_rows() < need {
        return Err(Error::Config(format!(
            "autoencoder needs {need} rows, dataset has {}",
            ds.n_rows()
        )));
    }
    let mut order: Vec<usize> = (0..ds.n_rows()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let train_truth = ds.subset(&order[..ae.train_size]);
    let test_truth = ds.subset(&order[ae.train_size..need]);
    let train_masked = apply_mask(&train_truth, &cfg.mask)?;
    let test_policy = MaskPolicy {
        seed: cfg.mask.seed.wrapping_add(1),
        ..cfg.mask.clone()
    };
    let test_masked = apply_mask(&test_truth, &test_policy)?;
    let d = ds.n_cols();
    let (gh, gw) = grid_of(cfg, d);
    if let Some(dir) = &ae.pgm_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for i in 0..ae.pgm_count.min(test_truth.n_rows()) {
            write_pgm(dir.join(format!("{i:03}_original.pgm")), gw, gh, test_truth.row(i))?;
            let shown: Vec<f64> = (0..d)
                .map(|j| if test_masked.is_missing(i, j) { 0.0 } else { test_masked.row(i)[j] })
                .collect();
            write_pgm(dir.join(format!("{i:03}_masked.pgm")), gw, gh, &shown)?;
        }
    }

    let k = cfg.density.k_candidates[0];
    let mut results = Vec::new();
    for &method in &cfg.methods {
        let generalized = method == Method::Generalized;
        let (train_in, test_in) = method_inputs(cfg, method, &train_masked, &[&test_masked], k, cfg.seed)?;
        let density = if generalized {
            Some(fit_density(cfg, &train_masked, k, cfg.seed)?)
        } else {
            None
        };
        let mut model = NetworkModel::new(d, ae_layers(cfg, d, generalized), LossKind::MaskedMse, density, cfg.seed)?;
        let examples: Vec<Example> = (0..train_in.n_rows())
            .map(|i| Example {
                input: train_in.point(i),
                target: Target::Masked(train_masked.point(i)),
            })
            .collect();
        let report = train(&mut model, &examples, None, &seeded_train(cfg, cfg.seed))?;
        let recon: Vec<Vec<f64>> = (0..test_in[0].n_rows())
            .map(|i| model.forward(&test_in[0].point(i)))
            .collect::<Result<_>>()?;
        let (total, inside, outside) = region_errors(&recon, &test_masked);
        if let Some(dir) = &ae.pgm_dir {
            for (i, r) in recon.iter().take(ae.pgm_count).enumerate() {
                write_pgm(dir.join(format!("{i:03}_{}.pgm", method.name())), gw, gh, r)?;
            }
        }
        let metrics = Metrics {
            mse_total: Some(total),
            mse_inside: Some(inside),
            mse_outside: Some(outside),
            train_loss: final_loss(&report),
            ..Default::default()
        };
        results.push(MethodResult {
            method,
            missing_level: None,
            folds: vec![FoldMetrics {
                fold: 0,
                metrics: metrics.clone(),
                selected_k: generalized.then_some(k),
                selected_units: None,
            }],
            aggregate: metrics,
        });
    }
    finish(cfg, start, results, None)
}

// ------------------------------------------------------------- classification

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FirstLayer {
    Relu(usize),
    Rbf(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Hyper {
    k: usize,
    units: Option<usize>,
}

fn classifier_layers(first: FirstLayer, hidden: &[usize], generalized: bool, classes: usize) -> Vec<LayerSpec> {
    let mut specs = vec![match (first, generalized) {
        (FirstLayer::Relu(w), true) => LayerSpec::GeneralizedRelu { width: w },
        (FirstLayer::Relu(w), false) => LayerSpec::Dense {
            width: w,
            activation: Activation::Relu,
        },
        (FirstLayer::Rbf(w), true) => LayerSpec::GeneralizedRbf { width: w },
        (FirstLayer::Rbf(w), false) => LayerSpec::Rbf { width: w },
    }];
    specs.extend(hidden.iter().map(|&w| LayerSpec::Dense {
        width: w,
        activation: Activation::Relu,
    }));
    specs.push(LayerSpec::Dense {
        width: classes,
        activation: Activation::Softmax,
    });
    specs
}

/// Trains one classifier on `train` and returns its accuracy on `test`.
fn fit_and_score(
    cfg: &ExperimentConfig,
    method: Method,
    rbf: bool,
    train_set: &DatasetWithMask,
    test_set: &DatasetWithMask,
    classes: usize,
    hp: Hyper,
    seed: u64,
) -> Result<(f64, Option<f64>)> {
    let generalized = method == Method::Generalized;
    let (train_in, test_in) = method_inputs(cfg, method, train_set, &[test_set], hp.k, seed)?;
    let (first, hidden): (FirstLayer, &[usize]) = if rbf {
        (FirstLayer::Rbf(hp.units.expect("rbf units")), &[])
    } else {
        let h: &[usize] = if cfg.hidden.is_empty() { &[128, 128, 128] } else { &cfg.hidden };
        (FirstLayer::Relu(h[0]), &h[1..])
    };
    let density = if generalized {
        Some(fit_density(cfg, train_set, hp.k, seed)?)
    } else {
        None
    };
    let d = train_set.n_cols();
    let mut model = NetworkModel::new(
        d,
        classifier_layers(first, hidden, generalized, classes),
        LossKind::CrossEntropy,
        density,
        seed,
    )?;
    model.init_rbf_from_data(&train_in, seed.wrapping_add(17))?;
    let examples = class_examples_of(&train_in)?;
    let report = train(&mut model, &examples, None, &seeded_train(cfg, seed))?;
    let acc = accuracy(&model, &class_examples_of(&test_in[0])?)?;
    Ok((acc, final_loss(&report)))
}

fn class_examples_of(data: &DatasetWithMask) -> Result<Vec<Example>> {
    crate::nn::class_examples(data)
}

fn hyper_grid(cfg: &ExperimentConfig, method: Method, rbf: bool) -> Vec<Hyper> {
    let ks: Vec<usize> = match method {
        Method::Generalized | Method::GmmSample => cfg.density.k_candidates.clone(),
        _ => vec![cfg.density.k_candidates[0]],
    };
    let units: Vec<Option<usize>> = if rbf {
        cfg.rbf_units.iter().map(|&u| Some(u)).collect()
    } else {
        vec![None]
    };
    ks.iter()
        .flat_map(|&k| units.iter().map(move |&units| Hyper { k, units }))
        .collect()
}

/// Double cross-validation: outer folds score, inner folds on each outer
/// training part select the hyperparameters.
fn run_classify(cfg: &ExperimentConfig, rbf: bool) -> Result<MetricsReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut ds = cfg.dataset.as_ref().expect("validated").load()?;
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Config("classification needs a label column".into()))?
        .to_vec();
    if cfg.shuffle_labels {
        let mut l = labels.clone();
        l.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a5a));
        ds.set_labels(Some(l))?;
    }
    let classes = ds.n_classes();
    let ds = apply_mask(&ds, &cfg.mask)?;
    let ds = match cfg.normalization {
        Some(s) => normalize(&ds, s),
        None => ds,
    };
    let levels: Vec<Option<f64>> = if cfg.missing_levels.is_empty() {
        vec![None]
    } else {
        cfg.missing_levels.iter().map(|&p| Some(p)).collect()
    };
    let mut results = Vec::new();
    for (li, level) in levels.iter().enumerate() {
        let data = match level {
            Some(p) => apply_mask(&ds, &MaskPolicy::mcar(*p, cfg.seed.wrapping_add(1000 + li as u64)))?,
            None => ds.clone(),
        };
        let folds = kfold_split(data.n_rows(), data.labels(), cfg.cv.outer_folds, cfg.cv.stratified, cfg.seed)?;
        for &method in &cfg.methods {
            let grid = hyper_grid(cfg, method, rbf);
            let mut fold_metrics = Vec::with_capacity(folds.len());
            for (fi, fold) in folds.iter().enumerate() {
                let seed = cfg.seed.wrapping_add(fi as u64);
                let train_set = data.subset(&fold.train);
                let test_set = data.subset(&fold.test);
                let hp = select_hyper(cfg, method, rbf, &train_set, classes, &grid, seed)?;
                let (acc, loss) = fit_and_score(cfg, method, rbf, &train_set, &test_set, classes, hp, seed)?;
                let tuned_k = matches!(method, Method::Generalized | Method::GmmSample);
                fold_metrics.push(FoldMetrics {
                    fold: fi,
                    metrics: Metrics {
                        accuracy: Some(acc),
                        train_loss: loss,
                        ..Default::default()
                    },
                    selected_k: tuned_k.then_some(hp.k),
                    selected_units: hp.units,
                });
            }
            let aggregate = Metrics::mean(&fold_metrics.iter().map(|f| f.metrics.clone()).collect::<Vec<_>>());
            results.push(MethodResult {
                method,
                missing_level: *level,
                folds: fold_metrics,
                aggregate,
            });
        }
    }
    finish(cfg, start, results, None)
}

fn select_hyper(
    cfg: &ExperimentConfig,
    method: Method,
    rbf: bool,
    train_set: &DatasetWithMask,
    classes: usize,
    grid: &[Hyper],
    seed: u64,
) -> Result<Hyper> {
    if grid.len() == 1 || cfg.cv.inner_folds < 2 {
        return Ok(grid[0]);
    }
    let inner = kfold_split(train_set.n_rows(), train_set.labels(), cfg.cv.inner_folds, cfg.cv.stratified, seed ^ 0xf01d)?;
    let mut best = (f64::NEG_INFINITY, grid[0]);
    for &hp in grid {
        let mut sum = 0.0;
        for f in &inner {
            let (acc, _) = fit_and_score(
                cfg,
                method,
                rbf,
                &train_set.subset(&f.train),
                &train_set.subset(&f.test),
                classes,
                hp,
                seed,
            )?;
            sum += acc;
        }
        let mean = sum / inner.len() as f64;
        if mean > best.0 {
            best = (mean, hp);
        }
    }
    Ok(best.1)
}

/// MLP with three ReLU hidden layers (the first generalized for the
/// generalized method); mixture count chosen by inner cross-validation.
pub fn run_mlp_classify(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    run_classify(cfg, false)
}

/// Shallow RBF network with a softmax head; unit count (and mixture count
/// for density-based methods) chosen by inner cross-validation.
pub fn run_rbfn_classify(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    run_classify(cfg, true)
}

// ------------------------------------------------------------------------ toy

/// Draws the toy set: each row picks one of the Gaussians uniformly; rows
/// with `x₁ < 0` lose one uniformly chosen coordinate with probability
/// `missing_prob`. Missing cells keep their true value under the mask.
pub fn toy_dataset(spec: &ToySpec, n: usize, seed: u64) -> Result<DatasetWithMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (cx, cy, class) = spec.centers[rng.gen_range(0..spec.centers.len())];
        let x1 = cx + spec.std * rng.sample::<f64, _>(StandardNormal);
        let x2 = cy + spec.std * rng.sample::<f64, _>(StandardNormal);
        let mut m = vec![false, false];
        if x1 < 0.0 && rng.gen::<f64>() < spec.missing_prob {
            m[rng.gen_range(0..2)] = true;
        }
        rows.push(vec![x1, x2]);
        mask.push(m);
        labels.push(class);
    }
    DatasetWithMask::new(rows, mask, Some(labels))
}

/// Joint density learning on the toy set, compared with the same network
/// trained while the initial EM density stays frozen.
pub fn run_toy_density(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let start = Instant::now();
    let train_set = toy_dataset(&cfg.toy, cfg.toy.n_train, cfg.seed)?;
    let test_set = toy_dataset(&cfg.toy, cfg.toy.n_test, cfg.seed.wrapping_add(1))?;
    let classes = cfg.toy.centers.iter().map(|c| c.2).max().unwrap_or(0) + 1;
    let k = cfg.density.k_candidates[0];
    let initial = fit_density(cfg, &train_set, k, cfg.seed)?;
    let hidden: &[usize] = if cfg.hidden.is_empty() { &[16] } else { &cfg.hidden };
    let base = NetworkModel::new(
        2,
        classifier_layers(FirstLayer::Relu(hidden[0]), &hidden[1..], true, classes),
        LossKind::CrossEntropy,
        Some(initial.clone()),
        cfg.seed,
    )?;
    let train_ex = crate::nn::class_examples(&train_set)?;
    let test_ex = crate::nn::class_examples(&test_set)?;
    let untrained_accuracy = accuracy(&base, &test_ex)?;

    let mut joint = base.clone();
    let joint_report = train(&mut joint, &train_ex, None, &seeded_train(cfg, cfg.seed))?;
    let joint_acc = accuracy(&joint, &test_ex)?;

    let mut frozen = base;
    let frozen_cfg = TrainConfig {
        gmm_lr_scale: 0.0,
        ..seeded_train(cfg, cfg.seed)
    };
    train(&mut frozen, &train_ex, None, &frozen_cfg)?;
    let frozen_accuracy = accuracy(&frozen, &test_ex)?;

    let metrics = Metrics {
        accuracy: Some(joint_acc),
        train_loss: final_loss(&joint_report),
        ..Default::default()
    };
    let results = vec![MethodResult {
        method: Method::Generalized,
        missing_level: None,
        folds: vec![FoldMetrics {
            fold: 0,
            metrics: metrics.clone(),
            selected_k: Some(k),
            selected_units: None,
        }],
        aggregate: metrics,
    }];
    let snapshots = DensitySnapshots {
        initial,
        joint: joint.density.clone().expect("generalized model"),
        frozen_accuracy,
        untrained_accuracy,
    };
    finish(cfg, start, results, Some(snapshots))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_errors_decompose() {
        let truth = DatasetWithMask::new(
            vec![vec![1.0, 0.0, 0.5], vec![0.2, 0.2, 0.2]],
            vec![vec![true, false, false], vec![false, false, true]],
            None,
        )
        .unwrap();
        let recon = vec![vec![0.0, 0.0, 0.5], vec![0.2, 0.4, 0.0]];
        let (t, i, o) = region_errors(&recon, &truth);
        assert!((i - (1.0 + 0.04) / 6.0).abs() < 1e-15);
        assert!((o - 0.04 / 6.0).abs() < 1e-15);
        assert!((t - (i + o)).abs() < 1e-15);
    }

    #[test]
    fn metrics_mean_keeps_common_fields() {
        let a = Metrics { accuracy: Some(0.5), train_loss: Some(1.0), ..Default::default() };
        let b = Metrics { accuracy: Some(1.0), ..Default::default() };
        let m = Metrics::mean(&[a, b]);
        assert_eq!(m.accuracy, Some(0.75));
        assert_eq!(m.train_loss, None);
    }

    #[test]
    fn toy_missingness_only_left() {
        let ds = toy_dataset(&ToySpec::default(), 2000, 3).unwrap();
        let mut missing = 0;
        for i in 0..ds.n_rows() {
            if ds.row_mask(i).iter().any(|&m| m) {
                assert!(ds.row(i)[0] < 0.0);
                missing += 1;
            }
        }
        assert!(missing > 300 && missing < 700, "{missing}");
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = ExperimentConfig::from_json(
            r#"{"experiment":"toy-density","methods":["generalized"],"train":{"batch_size":16,"epochs":2}}"#,
        )
        .unwrap();
        assert_eq!(cfg.density.k_candidates, vec![2, 3, 5]);
        assert_eq!(cfg.cv.outer_folds, 5);
        cfg.validate().unwrap();
        let missing = ExperimentConfig::from_json(
            r#"{"experiment":"mlp-classify","methods":["mean"],"train":{"batch_size":16,"epochs":2},
                "dataset":{"format":"csv","path":"/nonexistent/file.csv"}}"#,
        )
        .unwrap();
        assert!(matches!(missing.validate(), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_json(r#"{"experiment":"nope"}"#).is_err());
    }

    #[test]
    fn pgm_header() {
        let dir = std::env::temp_dir().join(format!("misslayer-pgm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("x.pgm");
        write_pgm(&p, 2, 1, &[0.0, 1.0]).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"P5\n2 1\n255\n\x00\xff");
        std::fs::remove_dir_all(dir).unwrap();
    }
}
