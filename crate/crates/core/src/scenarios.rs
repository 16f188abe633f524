//! Synthetic data and the four client-partitioning scenarios.
//!
//! * S1: equal sizes, same distribution.
//! * S2: sizes proportional to integer ratios.
//! * S3: equal sizes, each client over-sampling its "home" labels.
//! * S4: equal sizes with Gaussian feature noise.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::{Dataset, LearnerError};
use crate::seed;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("need at least {needed} samples, have {available}")]
    InsufficientSamples { needed: usize, available: usize },
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("bad delimited data at record {record}: {message}")]
    Csv { record: usize, message: String },
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    S1,
    S2,
    S3,
    S4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        n_samples: usize,
        n_features: usize,
        n_classes: usize,
        /// Replaced by a derived seed when run as part of an experiment.
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_cluster_std")]
        cluster_std: f64,
    },
    Csv {
        path: PathBuf,
        /// Inferred from the largest label when absent.
        #[serde(default)]
        n_classes: Option<usize>,
    },
}

pub const DEFAULT_CLUSTER_STD: f64 = 0.15;
pub const DEFAULT_SKEW: f64 = 0.8;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

fn default_cluster_std() -> f64 {
    DEFAULT_CLUSTER_STD
}

fn default_clients() -> usize {
    5
}

fn default_skew() -> f64 {
    DEFAULT_SKEW
}

fn default_test_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub scenario: ScenarioKind,
    #[serde(default = "default_clients")]
    pub num_clients: usize,
    /// Relative client sizes (S2).
    #[serde(default)]
    pub ratios: Vec<u32>,
    /// Feature noise for every client (S4).
    #[serde(default)]
    pub noise_sigma: f64,
    /// Per-client noise, overriding `noise_sigma` (S4).
    #[serde(default)]
    pub noise_sigmas: Vec<f64>,
    /// Fraction of each client's samples drawn from its home labels (S3).
    #[serde(default = "default_skew")]
    pub skew: f64,
    pub data: DataSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Seed for splitting, partitioning and noise.
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScenarioError::InvalidSpec(m));
        if self.num_clients == 0 {
            return bad("num_clients must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction {} not in [0, 1)", self.test_fraction));
        }
        if self.scenario == ScenarioKind::S2 {
            if self.ratios.len() != self.num_clients {
                return bad(format!(
                    "S2 needs {} ratios, got {}",
                    self.num_clients,
                    self.ratios.len()
                ));
            }
            if self.ratios.contains(&0) {
                return bad("ratios must be positive".into());
            }
        }
        if !(0.0..=1.0).contains(&self.skew) {
            return bad(format!("skew {} not in [0, 1]", self.skew));
        }
        if self.scenario == ScenarioKind::S4 {
            if self.noise_sigmas.is_empty() {
                if !(self.noise_sigma > 0.0) {
                    return bad("S4 needs noise_sigma > 0".into());
                }
            } else if self.noise_sigmas.len() != self.num_clients
                || self.noise_sigmas.iter().any(|s| !(*s >= 0.0))
                || !self.noise_sigmas.iter().any(|s| *s > 0.0)
            {
                return bad("noise_sigmas needs one non-negative value per client, not all zero".into());
            }
        }
        if let DataSource::Synthetic {
            n_samples,
            n_features,
            n_classes,
            cluster_std,
            ..
        } = self.data
        {
            if n_samples == 0 || n_features == 0 || n_classes == 0 {
                return bad("synthetic data sizes must be positive".into());
            }
            if !(cluster_std >= 0.0) {
                return bad("cluster_std must be non-negative".into());
            }
        }
        Ok(())
    }

    /// Per-client noise levels (all zero outside S4).
    pub fn client_sigmas(&self) -> Vec<f64> {
        if self.scenario != ScenarioKind::S4 {
            vec![0.0; self.num_clients]
        } else if self.noise_sigmas.is_empty() {
            vec![self.noise_sigma; self.num_clients]
        } else {
            self.noise_sigmas.clone()
        }
    }
}

/// Mean of class `c`: the unit vector `e_{c mod d}`, pushed further out for
/// every wrap-around when there are more classes than features.
fn class_mean(c: usize, d: usize) -> (usize, f64) {
    (c % d, 1.0 + (c / d) as f64)
}

/// Gaussian clusters with unit-separation means and the default spread.
pub fn generate_synthetic(n_samples: usize, n_features: usize, n_classes: usize, seed: u64) -> Result<Dataset> {
    generate_synthetic_with_std(n_samples, n_features, n_classes, seed, DEFAULT_CLUSTER_STD)
}

/// Labels cycle through the classes; features are the class mean plus
/// isotropic noise of standard deviation `std`.
pub fn generate_synthetic_with_std(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    seed: u64,
    std: f64,
) -> Result<Dataset> {
    if n_samples == 0 || n_features == 0 || n_classes == 0 {
        return Err(ScenarioError::InvalidSpec(
            "synthetic data sizes must be positive".into(),
        ));
    }
    let normal = Normal::new(0.0, std)
        .map_err(|e| ScenarioError::InvalidSpec(format!("cluster std {std}: {e}")))?;
    let mut rng = seed::rng(seed);
    let mut features = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let c = i % n_classes;
        let (axis, scale) = class_mean(c, n_features);
        for j in 0..n_features {
            let centre = if j == axis && n_classes > 1 { scale } else { 0.0 };
            features.push(centre + normal.sample(&mut rng));
        }
        labels.push(c);
    }
    Ok(Dataset::new(features, labels, n_features, n_classes)?)
}

/// Adds `N(0, sigma^2)` to every feature.  Labels are untouched.
pub fn add_gaussian_noise(data: &Dataset, sigma: f64, seed: u64) -> Result<Dataset> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(ScenarioError::InvalidSpec(format!("sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(data.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut rng = seed::rng(seed);
    let noisy = data
        .features()
        .iter()
        .map(|x| x + normal.sample(&mut rng))
        .collect();
    Ok(data.with_features(noisy)?)
}

/// Reads one sample per line: features, then an integer label.
pub fn load_csv(path: &Path, n_classes: Option<usize>) -> Result<Dataset> {
    let io = |e: &dyn std::fmt::Display| ScenarioError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| io(&e))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let bad = |m: String| ScenarioError::Csv {
            record: i + 1,
            message: m,
        };
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() < 2 {
            return Err(bad("need at least one feature and a label".into()));
        }
        let fields: Vec<&str> = record.iter().collect();
        let (label, feats) = fields.split_last().expect("at least two fields");
        labels.push(label.parse::<usize>().map_err(|e| bad(format!("label `{label}`: {e}")))?);
        rows.push(
            feats
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| bad(format!("feature `{f}`: {e}"))))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    if rows.is_empty() {
        return Err(ScenarioError::InsufficientSamples {
            needed: 1,
            available: 0,
        });
    }
    let k = n_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Ok(Dataset::from_rows(&rows, labels, k)?)
}

/// Client index lists plus held-out test indices into the source dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub clients: Vec<Vec<usize>>,
    pub test: Vec<usize>,
}

impl PartitionPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }
}

/// `total` split equally, remainder to the earliest clients.
pub fn equal_sizes(total: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| total / n + usize::from(i < total % n)).collect()
}

/// Largest-remainder apportionment of `total` by `ratios`; leftover
/// samples go to the largest fractional parts, earlier clients first on
/// ties.
pub fn apportion(total: usize, ratios: &[u32]) -> Vec<usize> {
    let r: u128 = ratios.iter().map(|&x| x as u128).sum();
    if r == 0 {
        return vec![0; ratios.len()];
    }
    let mut sizes: Vec<usize> = Vec::with_capacity(ratios.len());
    let mut rems: Vec<(u128, usize)> = Vec::with_capacity(ratios.len());
    for (i, &x) in ratios.iter().enumerate() {
        let num = total as u128 * x as u128;
        sizes.push((num / r) as usize);
        rems.push((num % r, i));
    }
    let left = total - sizes.iter().sum::<usize>();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take(left) {
        sizes[i] += 1;
    }
    sizes
}

/// Labels a client over-samples under S3.
fn home_labels(client: usize, n_clients: usize, n_classes: usize) -> Vec<usize> {
    if n_classes >= n_clients {
        (0..n_classes).filter(|c| c % n_clients == client).collect()
    } else {
        vec![client % n_classes]
    }
}

/// Splits `data` into a stratified test set and per-client training
/// indices according to the scenario.
pub fn partition(spec: &ScenarioSpec, data: &Dataset) -> Result<PartitionPlan> {
    spec.validate()?;
    let n = spec.num_clients;
    let mut rng = seed::rng(seed::mix(spec.seed, 0x5041_5254));

    // stratified hold-out: each class contributes its share to the test set
    let k = data.n_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..data.len() {
        by_class[data.label(i)].push(i);
    }
    let mut test = Vec::new();
    let mut pool_by_class = Vec::with_capacity(k);
    for mut idx in by_class {
        idx.shuffle(&mut rng);
        let t = (idx.len() as f64 * spec.test_fraction).round() as usize;
        test.extend_from_slice(&idx[..t]);
        pool_by_class.push(idx[t..].to_vec());
    }
    test.sort_unstable();
    let mut pool: Vec<usize> = pool_by_class.iter().flatten().copied().collect();
    pool.shuffle(&mut rng);

    if pool.len() < n {
        return Err(ScenarioError::InsufficientSamples {
            needed: n,
            available: pool.len(),
        });
    }
    let sizes = match spec.scenario {
        ScenarioKind::S2 => apportion(pool.len(), &spec.ratios),
        _ => equal_sizes(pool.len(), n),
    };
    if sizes.contains(&0) {
        let r: u64 = spec.ratios.iter().map(|&x| x as u64).sum();
        let min = *spec.ratios.iter().min().unwrap_or(&1) as u64;
        return Err(ScenarioError::InsufficientSamples {
            needed: r.div_ceil(min) as usize,
            available: pool.len(),
        });
    }

    let clients = if spec.scenario == ScenarioKind::S3 {
        skewed_split(&sizes, pool_by_class, spec.skew, &mut rng)
    } else {
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        for s in &sizes {
            out.push(pool[start..start + s].to_vec());
            start += s;
        }
        out
    };
    Ok(PartitionPlan { clients, test })
}

/// Each client first takes `round(skew * size)` samples from its home
/// labels (as far as they last), then every client is topped up from the
/// leftovers, so the result still covers the pool exactly.
fn skewed_split(
    sizes: &[usize],
    mut pool_by_class: Vec<Vec<usize>>,
    skew: f64,
    rng: &mut impl rand::Rng,
) -> Vec<Vec<usize>> {
    let n = sizes.len();
    let k = pool_by_class.len();
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &size) in sizes.iter().enumerate() {
        let quota = (skew * size as f64).round() as usize;
        let home = home_labels(i, n, k);
        // draw round-robin over the home labels
        let mut exhausted = 0;
        let mut c = 0;
        while clients[i].len() < quota && exhausted < home.len() {
            let class = home[c % home.len()];
            match pool_by_class[class].pop() {
                Some(idx) => {
                    clients[i].push(idx);
                    exhausted = 0;
                }
                None => exhausted += 1,
            }
            c += 1;
        }
    }
    let mut rest: Vec<usize> = pool_by_class.into_iter().flatten().collect();
    rest.shuffle(rng);
    let mut it = rest.into_iter();
    for (client, &size) in clients.iter_mut().zip(sizes) {
        while client.len() < size {
            client.push(it.next().expect("sizes sum to the pool size"));
        }
        client.sort_unstable();
    }
    clients
}

/// Materialized scenario: client datasets (noised under S4) and the clean
/// test set.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioData {
    pub plan: PartitionPlan,
    pub partitions: Vec<Dataset>,
    pub test: Dataset,
}

pub fn load_source(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Synthetic {
            n_samples,
            n_features,
            n_classes,
            seed,
            cluster_std,
        } => generate_synthetic_with_std(*n_samples, *n_features, *n_classes, *seed, *cluster_std),
        DataSource::Csv { path, n_classes } => load_csv(path, *n_classes),
    }
}

pub fn build(spec: &ScenarioSpec) -> Result<ScenarioData> {
    spec.validate()?;
    let data = load_source(&spec.data)?;
    let plan = partition(spec, &data)?;
    let partitions = plan
        .clients
        .iter()
        .zip(spec.client_sigmas())
        .enumerate()
        .map(|(i, (idx, sigma))| {
            add_gaussian_noise(&data.select(idx), sigma, seed::mix(spec.seed, 0x4e4f_0000 + i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let test = data.select(&plan.test);
    Ok(ScenarioData {
        plan,
        partitions,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{self, Hyperparams, ModelParams, ModelShape};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn spec(kind: ScenarioKind, n_samples: usize) -> ScenarioSpec {
        ScenarioSpec {
            scenario: kind,
            num_clients: 5,
            ratios: if kind == ScenarioKind::S2 { vec![3, 3, 2, 1, 1] } else { vec![] },
            noise_sigma: if kind == ScenarioKind::S4 { 0.5 } else { 0.0 },
            noise_sigmas: vec![],
            skew: DEFAULT_SKEW,
            data: DataSource::Synthetic {
                n_samples,
                n_features: 4,
                n_classes: 4,
                seed: 1,
                cluster_std: DEFAULT_CLUSTER_STD,
            },
            test_fraction: 0.0,
            seed: 11,
        }
    }

    fn check_exact_partition(plan: &PartitionPlan, total: usize) {
        let mut seen = BTreeSet::new();
        for idx in plan.clients.iter().chain(std::iter::once(&plan.test)) {
            for &i in idx {
                assert!(seen.insert(i), "index {i} used twice");
            }
        }
        assert_eq!(seen.len(), total);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(200, 5, 3, 9).unwrap();
        let b = generate_synthetic(200, 5, 3, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(200, 5, 3, 10).unwrap());
    }

    #[test]
    fn single_class() {
        let d = generate_synthetic(50, 3, 1, 0).unwrap();
        assert!(d.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn synthetic_is_learnable() {
        let d = generate_synthetic(1000, 5, 5, 3).unwrap();
        let mut s = spec(ScenarioKind::S1, 1000);
        s.num_clients = 1;
        s.test_fraction = 0.2;
        let plan = partition(&s, &d).unwrap();
        let train = d.select(&plan.clients[0]);
        let test = d.select(&plan.test);
        let init = ModelParams::zeros(ModelShape::linear(5, 5)).unwrap();
        let h = Hyperparams {
            learning_rate: 0.5,
            batch_size: 16,
            local_epochs: 10,
            seed: 1,
        };
        let m = learner::local_train(&init, &train, &h).unwrap();
        assert!(learner::utility(&m, &test).unwrap().value() >= 0.9);
    }

    #[test]
    fn s1_sizes() {
        let d = generate_synthetic(100, 4, 4, 1).unwrap();
        let plan = partition(&spec(ScenarioKind::S1, 100), &d).unwrap();
        assert_eq!(plan.sizes(), vec![20; 5]);
        check_exact_partition(&plan, 100);
        assert_eq!(equal_sizes(103, 5), vec![21, 21, 21, 20, 20]);
    }

    #[test]
    fn s2_sizes() {
        let d = generate_synthetic(100, 4, 4, 1).unwrap();
        let plan = partition(&spec(ScenarioKind::S2, 100), &d).unwrap();
        assert_eq!(plan.sizes(), vec![30, 30, 20, 10, 10]);
        assert_eq!(apportion(7, &[1, 1, 1]), vec![3, 2, 2]);
        assert_eq!(apportion(11, &[3, 3, 2, 1, 1]), vec![4, 3, 2, 1, 1]);
    }

    #[test]
    fn s3_extreme_skew() {
        let d = generate_synthetic(100, 2, 2, 1).unwrap();
        let s = ScenarioSpec {
            num_clients: 2,
            skew: 1.0,
            test_fraction: 0.2,
            ..spec(ScenarioKind::S3, 100)
        };
        let plan = partition(&s, &d).unwrap();
        for (i, idx) in plan.clients.iter().enumerate() {
            assert!(idx.iter().all(|&j| d.label(j) == i), "client {i}");
        }
        check_exact_partition(&plan, 100);
    }

    #[test]
    fn s3_skew_concentrates_labels() {
        let d = generate_synthetic(500, 5, 5, 2).unwrap();
        let plan = partition(&spec(ScenarioKind::S3, 500), &d).unwrap();
        for (i, idx) in plan.clients.iter().enumerate() {
            let home = idx.iter().filter(|&&j| d.label(j) == i).count();
            assert!(home as f64 >= 0.8 * idx.len() as f64);
        }
    }

    #[test]
    fn insufficient_samples() {
        let d = generate_synthetic(4, 4, 4, 1).unwrap();
        assert!(matches!(
            partition(&spec(ScenarioKind::S1, 4), &d),
            Err(ScenarioError::InsufficientSamples { .. })
        ));
        let d = generate_synthetic(6, 4, 4, 1).unwrap();
        assert!(matches!(
            partition(&spec(ScenarioKind::S2, 6), &d),
            Err(ScenarioError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn spec_validation() {
        let mut s = spec(ScenarioKind::S2, 100);
        s.ratios.pop();
        assert!(s.validate().is_err());
        let mut s = spec(ScenarioKind::S4, 100);
        s.noise_sigma = 0.0;
        assert!(s.validate().is_err());
        let mut s = spec(ScenarioKind::S3, 100);
        s.skew = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn noise_zero_is_identity() {
        let d = generate_synthetic(20, 3, 2, 1).unwrap();
        assert_eq!(add_gaussian_noise(&d, 0.0, 5).unwrap(), d);
        assert!(add_gaussian_noise(&d, -1.0, 5).is_err());
    }

    #[test]
    fn noise_moments() {
        let d = generate_synthetic(2500, 4, 3, 1).unwrap();
        let sigma = 0.7;
        let n = add_gaussian_noise(&d, sigma, 42).unwrap();
        assert_eq!(n.labels(), d.labels());
        let diffs: Vec<f64> = n.features().iter().zip(d.features()).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn s4_noises_training_data_only() {
        let s = ScenarioSpec {
            test_fraction: 0.2,
            ..spec(ScenarioKind::S4, 200)
        };
        let built = build(&s).unwrap();
        let clean = load_source(&s.data).unwrap();
        assert_eq!(built.test, clean.select(&built.plan.test));
        assert_ne!(built.partitions[0], clean.select(&built.plan.clients[0]));
        assert_eq!(built.partitions[0].labels(), clean.select(&built.plan.clients[0]).labels());
    }

    #[test]
    fn csv_loader() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "0.5, 1.0, 0\n-1, 2, 2\n").unwrap();
        let d = load_csv(&p, None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.n_classes(), 3);
        assert_eq!(d.row(1), &[-1.0, 2.0]);
        std::fs::write(&p, "0.5,x,0\n").unwrap();
        assert!(matches!(load_csv(&p, None), Err(ScenarioError::Csv { record: 1, .. })));
        assert!(matches!(
            load_csv(&dir.path().join("missing.csv"), None),
            Err(ScenarioError::Io { .. })
        ));
    }

    #[test]
    fn spec_parses_from_toml() {
        let text = r#"
            scenario = "S2"
            ratios = [3, 3, 2, 1, 1]
            seed = 4
            [data]
            source = "synthetic"
            n_samples = 300
            n_features = 6
            n_classes = 3
            seed = 2
        "#;
        let s: ScenarioSpec = toml::from_str(text).unwrap();
        assert_eq!(s.num_clients, 5);
        assert_eq!(s.test_fraction, DEFAULT_TEST_FRACTION);
        s.validate().unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn partitions_are_exact(
            kind in prop_oneof![Just(ScenarioKind::S1), Just(ScenarioKind::S2), Just(ScenarioKind::S3), Just(ScenarioKind::S4)],
            n_samples in 60usize..400,
            seed in any::<u64>(),
            skew in 0.0f64..=1.0,
            frac in 0.0f64..0.5,
        ) {
            let d = generate_synthetic(n_samples, 3, 4, seed).unwrap();
            let s = ScenarioSpec { seed, skew, test_fraction: frac, ..spec(kind, n_samples) };
            let plan = partition(&s, &d).unwrap();
            check_exact_partition(&plan, n_samples);
            prop_assert_eq!(&plan, &partition(&s, &d).unwrap());
            if kind == ScenarioKind::S2 {
                let pool: usize = plan.sizes().iter().sum();
                for (size, r) in plan.sizes().iter().zip(&s.ratios) {
                    let share = pool as f64 * *r as f64 / 10.0;
                    prop_assert!((*size as f64 - share).abs() < 1.0);
                }
            }
        }
    }
}
