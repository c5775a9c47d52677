//! Synthetic cross-modal task pairs with planted ground truth, the exact
//! discrete substrate for bound checks, and the regression-label discretizer.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bound::{normalize, DiscreteInstance};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numgrad::Matrix;
use crate::rng::SeedStream;

const BAYES_SAMPLES: usize = 20_000;
const MAX_DISCRETE_POINTS: usize = 8;
const MAX_DISCRETE_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Rotated,
    PermutedLabels,
    GapDial,
    DiscreteExact,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Rotated => "rotated",
            Family::PermutedLabels => "permuted_labels",
            Family::GapDial => "gap_dial",
            Family::DiscreteExact => "discrete_exact",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotated" => Ok(Family::Rotated),
            "permuted_labels" => Ok(Family::PermutedLabels),
            "gap_dial" => Ok(Family::GapDial),
            "discrete_exact" => Ok(Family::DiscreteExact),
            _ => Err(Error::invalid(format!("unknown task family {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub family: Family,
    pub source_dim: usize,
    pub target_dim: usize,
    pub source_classes: usize,
    pub target_classes: usize,
    pub n_source: usize,
    pub n_proxy: usize,
    /// Labeled target samples (kappa).
    pub n_target: usize,
    /// Size of each held-out split.
    pub n_test: usize,
    pub gap_knob: f64,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    /// Standard deviation of the isotropic class noise.
    pub noise: f64,
    /// Support size of the discrete family.
    pub support_points: usize,
    /// Planted target relabeling for `permuted_labels`; drawn when absent.
    pub permutation: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            family: Family::Rotated,
            source_dim: 4,
            target_dim: 6,
            source_classes: 3,
            target_classes: 3,
            n_source: 1000,
            n_proxy: 150,
            n_target: 150,
            n_test: 2000,
            gap_knob: 0.0,
            separation: 2.0,
            noise: 0.8,
            support_points: 5,
            permutation: None,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn new(family: Family, seed: u64) -> Self {
        Self {
            family,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_classes < 2 || self.target_classes < 2 {
            return Err(Error::invalid("classification tasks need at least 2 classes on each side"));
        }
        if self.n_target == 0 || self.n_source == 0 || self.n_proxy == 0 || self.n_test == 0 {
            return Err(Error::invalid("every split needs at least one sample"));
        }
        if !(0.0..=1.0).contains(&self.gap_knob) {
            return Err(Error::invalid(format!("gap_knob must lie in [0, 1], got {}", self.gap_knob)));
        }
        if self.source_dim == 0 || self.target_dim == 0 {
            return Err(Error::invalid("feature dimensions must be positive"));
        }
        if !(self.noise > 0.0) || !(self.separation >= 0.0) {
            return Err(Error::invalid("noise must be positive and separation nonnegative"));
        }
        match self.family {
            Family::Rotated | Family::PermutedLabels | Family::GapDial => {
                if self.source_classes != self.target_classes {
                    return Err(Error::invalid(format!(
                        "{:?} relabels classes one to one and needs equal class counts",
                        self.family
                    )));
                }
                if self.target_dim < self.source_dim {
                    return Err(Error::invalid("the planted isometry needs target_dim >= source_dim"));
                }
            }
            Family::DiscreteExact => {
                if self.support_points == 0 || self.support_points > MAX_DISCRETE_POINTS {
                    return Err(Error::Capability {
                        what: "discrete support",
                        size: self.support_points,
                        limit: MAX_DISCRETE_POINTS,
                    });
                }
                let k = self.source_classes.max(self.target_classes);
                if k > MAX_DISCRETE_CLASSES {
                    return Err(Error::Capability {
                        what: "discrete label space",
                        size: k,
                        limit: MAX_DISCRETE_CLASSES,
                    });
                }
            }
        }
        if let Some(p) = &self.permutation {
            let mut s = p.clone();
            s.sort_unstable();
            if s != (0..self.target_classes).collect::<Vec<_>>() || p.len() != self.source_classes {
                return Err(Error::invalid(format!("{p:?} is not a permutation of the classes")));
            }
        }
        Ok(())
    }
}

/// Planted ground truth recorded next to the generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetadata {
    pub spec: TaskSpec,
    /// Linear map sending source inputs to noise-free target inputs.
    pub planted_map: Option<Vec<Vec<f64>>>,
    /// Target label of each source class.
    pub permutation: Option<Vec<usize>>,
    pub class_means: Option<Vec<Vec<f64>>>,
    pub bayes_error_source: f64,
    pub bayes_error_target: f64,
    /// Held-out source error a pretrained model is expected to reach.
    pub trainability_threshold: f64,
    pub instance: Option<DiscreteInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskBundle {
    pub source: Dataset,
    pub source_test: Dataset,
    pub proxy: Dataset,
    pub proxy_test: Dataset,
    pub target: Dataset,
    pub target_test: Dataset,
    pub metadata: TaskMetadata,
}

const SPLITS: [&str; 6] = ["source", "source_test", "proxy", "proxy_test", "target", "target_test"];

impl TaskBundle {
    fn splits(&self) -> [&Dataset; 6] {
        [
            &self.source,
            &self.source_test,
            &self.proxy,
            &self.proxy_test,
            &self.target,
            &self.target_test,
        ]
    }

    /// Writes one CSV per split and a `task.json` sidecar.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, d) in SPLITS.iter().zip(self.splits()) {
            d.save_csv(&dir.join(format!("{name}.csv")))?;
        }
        let f = std::fs::File::create(dir.join("task.json"))?;
        serde_json::to_writer_pretty(f, &self.metadata)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let metadata: TaskMetadata = serde_json::from_reader(std::fs::File::open(dir.join("task.json"))?)?;
        let (ks, kt) = (metadata.spec.source_classes, metadata.spec.target_classes);
        let load = |name: &str, k: usize| Dataset::load_csv(&dir.join(format!("{name}.csv")), k);
        Ok(Self {
            source: load("source", ks)?,
            source_test: load("source_test", ks)?,
            proxy: load("proxy", ks)?,
            proxy_test: load("proxy_test", ks)?,
            target: load("target", kt)?,
            target_test: load("target_test", kt)?,
            metadata,
        })
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random `rows x cols` matrix with orthonormal columns.
fn random_isometry(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let g = DMatrix::from_fn(rows, rows, |_, _| gaussian(rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    // sign fix makes the draw uniform over the orthogonal group
    Matrix::from_fn(rows, cols, |i, j| q[(i, j)] * r[(j, j)].signum())
}

fn random_permutation(k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..k).collect();
    while k > 1 && p.iter().enumerate().all(|(i, &v)| i == v) {
        p.shuffle(rng);
    }
    p
}

fn class_means(k: usize, dim: usize, separation: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..k)
        .map(|z| {
            if k <= dim {
                (0..dim).map(|j| if j == z { separation } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| separation * x / n).collect()
            }
        })
        .collect()
}

/// Gaussian class-conditional model shared by the continuous families.
struct Mixture {
    means: Vec<Vec<f64>>,
    noise: f64,
}

impl Mixture {
    fn sample(&self, n: usize, rng: &mut impl Rng) -> (Matrix, Vec<usize>) {
        let k = self.means.len();
        let dim = self.means[0].len();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let x = Matrix::from_fn(n, dim, |i, j| self.means[labels[i]][j] + self.noise * gaussian(rng));
        (x, labels)
    }

    /// Nearest-mean classification, optimal under equal priors and shared
    /// isotropic noise.
    fn nearest(&self, x: &[f64], scale: f64) -> usize {
        let d = |m: &[f64]| x.iter().zip(m).map(|(a, b)| (a - scale * b).powi(2)).sum::<f64>();
        (0..self.means.len())
            .min_by(|&a, &b| d(&self.means[a]).total_cmp(&d(&self.means[b])))
            .expect("at least one class")
    }

    fn bayes_error(&self, rng: &mut impl Rng) -> f64 {
        let (x, labels) = self.sample(BAYES_SAMPLES, rng);
        let wrong = (0..x.rows()).filter(|&i| self.nearest(x.row(i), 1.0) != labels[i]).count();
        wrong as f64 / BAYES_SAMPLES as f64
    }

    /// Class posterior at `x` under the unscaled model.
    fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .means
            .iter()
            .map(|m| -x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * self.noise * self.noise))
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        normalize(&mut p);
        p
    }
}

fn apply_map(x: &Matrix, map: &Matrix) -> Matrix {
    x.matmul(&map.transpose()).expect("map width matches the source dimension")
}

fn dataset(x: Matrix, labels: Vec<usize>, classes: usize) -> Dataset {
    Dataset::new(x, labels, classes).expect("generated labels are in range")
}

/// Draws every split of the task described by `spec`.
pub fn generate(spec: &TaskSpec) -> Result<TaskBundle> {
    spec.validate()?;
    match spec.family {
        Family::DiscreteExact => generate_discrete(spec),
        _ => generate_continuous(spec),
    }
}

fn generate_continuous(spec: &TaskSpec) -> Result<TaskBundle> {
    let seeds = SeedStream::new(spec.seed).child("task");
    let mut prng = seeds.rng("planted");
    let mixture = Mixture {
        means: class_means(spec.source_classes, spec.source_dim, spec.separation, &mut prng),
        noise: spec.noise,
    };
    let k = spec.source_classes;
    let (map, perm) = match spec.family {
        Family::Rotated => (random_isometry(spec.target_dim, spec.source_dim, &mut prng), (0..k).collect()),
        Family::PermutedLabels => {
            let m = random_isometry(spec.target_dim, spec.source_dim, &mut prng);
            let p = spec.permutation.clone().unwrap_or_else(|| random_permutation(k, &mut prng));
            (m, p)
        }
        _ => (
            Matrix::from_fn(spec.target_dim, spec.source_dim, |i, j| if i == j { 1.0 } else { 0.0 }),
            (0..k).collect::<Vec<_>>(),
        ),
    };
    let g = if spec.family == Family::GapDial { spec.gap_knob } else { 0.0 };

    let source_split = |label: &str, n: usize| {
        let (x, y) = mixture.sample(n, &mut seeds.rng(label));
        dataset(x, y, k)
    };
    let target_split = |label: &str, n: usize| {
        let mut rng = seeds.rng(label);
        let (x, y) = mixture.sample(n, &mut rng);
        let mut xt = apply_map(&x, &map).scale(1.0 - g);
        let spread = (spec.separation / (k as f64).sqrt()).hypot(spec.noise);
        if g > 0.0 {
            xt = xt.add(&Matrix::from_fn(n, spec.target_dim, |_, _| g * spread * gaussian(&mut rng))).expect("same shape");
        }
        let labels = y
            .iter()
            .map(|&z| if g > 0.0 && rng.random_bool(g) { rng.random_range(0..k) } else { perm[z] })
            .collect();
        dataset(xt, labels, k)
    };

    let bayes_source = mixture.bayes_error(&mut seeds.rng("bayes-source"));
    let bayes_target = if g == 0.0 {
        bayes_source
    } else {
        gap_dial_bayes_error(&mixture, g, spec, &mut seeds.rng("bayes-target"))
    };
    let metadata = TaskMetadata {
        spec: spec.clone(),
        planted_map: Some(map.to_rows()),
        permutation: Some(perm.clone()),
        class_means: Some(mixture.means.clone()),
        bayes_error_source: bayes_source,
        bayes_error_target: bayes_target,
        trainability_threshold: (bayes_source + 0.05).min(1.0),
        instance: None,
    };
    Ok(TaskBundle {
        source: source_split("source", spec.n_source),
        source_test: source_split("source-test", spec.n_test),
        proxy: source_split("proxy", spec.n_proxy),
        proxy_test: source_split("proxy-test", spec.n_test),
        target: target_split("target", spec.n_target),
        target_test: target_split("target-test", spec.n_test),
        metadata,
    })
}

/// Monte-Carlo error of the optimal rule for the blended target: labels are
/// kept with probability `1 - g`, so the rule is the nearest shrunk mean.
fn gap_dial_bayes_error(mixture: &Mixture, g: f64, spec: &TaskSpec, rng: &mut impl Rng) -> f64 {
    let k = spec.source_classes;
    let spread = (spec.separation / (k as f64).sqrt()).hypot(spec.noise);
    let mut wrong = 0;
    for _ in 0..BAYES_SAMPLES {
        let z = rng.random_range(0..k);
        let x: Vec<f64> = mixture.means[z]
            .iter()
            .map(|m| (1.0 - g) * (m + spec.noise * gaussian(rng)) + g * spread * gaussian(rng))
            .collect();
        let zp = if rng.random_bool(g) { rng.random_range(0..k) } else { z };
        if mixture.nearest(&x, 1.0 - g) != zp {
            wrong += 1;
        }
    }
    wrong as f64 / BAYES_SAMPLES as f64
}

/// Discrete analog of the gap dial at the class means: source conditionals
/// are the planted posteriors, target conditionals blend them toward
/// uniform by `gap_knob`.
pub fn gap_dial_instance(spec: &TaskSpec) -> Result<DiscreteInstance> {
    let mut s = spec.clone();
    s.family = Family::GapDial;
    s.validate()?;
    let seeds = SeedStream::new(spec.seed).child("task");
    let mixture = Mixture {
        means: class_means(s.source_classes, s.source_dim, s.separation, &mut seeds.rng("planted")),
        noise: s.noise,
    };
    let k = s.source_classes;
    let g = s.gap_knob;
    let points = Matrix::from_rows(&mixture.means)?;
    let w = Matrix::from_rows(&mixture.means.iter().map(|m| mixture.posterior(m)).collect::<Vec<_>>())?;
    let q = Matrix::from_fn(k, k, |i, j| (1.0 - g) * w.get(i, j) + g / k as f64);
    let inst = DiscreteInstance {
        feature_points: points,
        source_marginal: vec![1.0 / k as f64; k],
        target_marginal: vec![1.0 / k as f64; k],
        source_cond: w.clone(),
        target_cond: q.clone(),
        p_s: w,
        p_tau: q,
    };
    inst.validate()?;
    Ok(inst)
}

fn random_rows(n: usize, k: usize, rng: &mut impl Rng, floor: f64) -> Matrix {
    let mut m = Matrix::from_fn(n, k, |_, _| rng.random_range(floor..1.0));
    for i in 0..n {
        normalize(m.row_mut(i));
    }
    m
}

/// Exact finite instance for the discrete family. With `gap_knob = 0` and
/// equal label spaces the target task equals the source task.
pub fn to_discrete_instance(spec: &TaskSpec) -> Result<DiscreteInstance> {
    if spec.family != Family::DiscreteExact {
        return Err(Error::invalid("to_discrete_instance needs the discrete_exact family"));
    }
    spec.validate()?;
    let mut rng = SeedStream::new(spec.seed).child("task").rng("discrete");
    let (n, k, kp, g) = (spec.support_points, spec.source_classes, spec.target_classes, spec.gap_knob);
    let feature_points = Matrix::from_fn(n, spec.source_dim, |_, _| rng.random_range(-1.0..1.0));
    let mut source_marginal: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    normalize(&mut source_marginal);
    let source_cond = random_rows(n, k, &mut rng, 0.0);
    let p_s = random_rows(n, k, &mut rng, 0.02);
    let other_marginal = {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        normalize(&mut v);
        v
    };
    let other_cond = random_rows(n, kp, &mut rng, 0.0);
    let other_pred = random_rows(n, kp, &mut rng, 0.02);
    let blend = |a: f64, b: f64| (1.0 - g) * a + g * b;
    let same = k == kp;
    let target_marginal: Vec<f64> = (0..n).map(|i| blend(source_marginal[i], other_marginal[i])).collect();
    let (target_cond, p_tau) = if same {
        (
            Matrix::from_fn(n, kp, |i, j| blend(source_cond.get(i, j), other_cond.get(i, j))),
            Matrix::from_fn(n, kp, |i, j| blend(p_s.get(i, j), other_pred.get(i, j))),
        )
    } else {
        (other_cond, other_pred)
    };
    let inst = DiscreteInstance {
        feature_points,
        source_marginal,
        target_marginal,
        source_cond,
        target_cond,
        p_s,
        p_tau,
    };
    inst.validate()?;
    Ok(inst)
}

fn sample_discrete(rng: &mut impl Rng, p: &[f64]) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if r < acc {
            return i;
        }
    }
    p.iter().rposition(|v| *v > 0.0).unwrap_or(0)
}

fn generate_discrete(spec: &TaskSpec) -> Result<TaskBundle> {
    let inst = to_discrete_instance(spec)?;
    let seeds = SeedStream::new(spec.seed).child("task");
    let split = |label: &str, n: usize, marginal: &[f64], cond: &Matrix| {
        let mut rng = seeds.rng(label);
        let idx: Vec<usize> = (0..n).map(|_| sample_discrete(&mut rng, marginal)).collect();
        let labels = idx.iter().map(|&u| sample_discrete(&mut rng, cond.row(u))).collect();
        dataset(inst.feature_points.select_rows(&idx), labels, cond.cols())
    };
    let bayes = |marginal: &[f64], cond: &Matrix| {
        (0..marginal.len())
            .map(|u| marginal[u] * (1.0 - cond.row(u).iter().cloned().fold(0.0, f64::max)))
            .sum::<f64>()
    };
    let src = |l: &str, n: usize| split(l, n, &inst.source_marginal, &inst.source_cond);
    let tgt = |l: &str, n: usize| split(l, n, &inst.target_marginal, &inst.target_cond);
    let bayes_source = bayes(&inst.source_marginal, &inst.source_cond);
    let metadata = TaskMetadata {
        spec: spec.clone(),
        planted_map: None,
        permutation: None,
        class_means: None,
        bayes_error_source: bayes_source,
        bayes_error_target: bayes(&inst.target_marginal, &inst.target_cond),
        trainability_threshold: (bayes_source + 0.05).min(1.0),
        instance: Some(inst.clone()),
    };
    Ok(TaskBundle {
        source: src("source", spec.n_source),
        source_test: src("source-test", spec.n_test),
        proxy: src("proxy", spec.n_proxy),
        proxy_test: src("proxy-test", spec.n_test),
        target: tgt("target", spec.n_target),
        target_test: tgt("target-test", spec.n_test),
        metadata,
    })
}

/// Equal-mass bins over continuous labels, half-open `[e_i, e_{i+1})`
/// except the last, which is closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    pub edges: Vec<f64>,
}

pub const DEFAULT_BINS: usize = 10;

impl Discretizer {
    pub fn fit(values: &[f64], n_bins: usize) -> Result<Self> {
        if values.is_empty() || n_bins == 0 {
            return Err(Error::invalid("discretizer needs labels and at least one bin"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("discretizer labels must be finite"));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let (lo, hi) = (s[0], s[s.len() - 1]);
        if lo == hi {
            return Ok(Self { edges: vec![lo, hi] });
        }
        let mut edges = vec![lo];
        for b in 1..n_bins {
            let e = s[(b * s.len()) / n_bins];
            if e > *edges.last().expect("nonempty") && e < hi {
                edges.push(e);
            }
        }
        edges.push(hi);
        Ok(Self { edges })
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn widest_bin(&self) -> f64 {
        self.edges.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    fn bin(&self, v: f64) -> usize {
        let last = self.n_bins() - 1;
        self.edges[1..self.edges.len() - 1].partition_point(|e| *e <= v).min(last)
    }

    /// Class index per label and the number of labels clamped into a
    /// boundary bin.
    pub fn discretize(&self, labels: &[f64]) -> (Vec<usize>, usize) {
        let (lo, hi) = (self.edges[0], self.edges[self.edges.len() - 1]);
        let mut clamped = 0;
        let idx = labels
            .iter()
            .map(|&v| {
                if v < lo || v > hi {
                    clamped += 1;
                }
                self.bin(v)
            })
            .collect();
        if clamped > 0 {
            log::warn!("{clamped} labels fell outside the fitted range and were clamped");
        }
        (idx, clamped)
    }

    pub fn decode(&self, idx: &[usize]) -> Vec<f64> {
        let c = self.centers();
        idx.iter().map(|&i| c[i.min(c.len() - 1)]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bound::evaluate_bound;
    use crate::distortion::fld_exact;

    #[test]
    fn generation_is_reproducible() {
        for fam in [Family::Rotated, Family::PermutedLabels, Family::GapDial, Family::DiscreteExact] {
            let mut spec = TaskSpec::new(fam, 3);
            spec.gap_knob = 0.5;
            if fam == Family::DiscreteExact {
                spec.source_dim = 2;
            }
            assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        }
    }

    #[test]
    fn zero_gap_dial_copies_the_source() {
        let mut spec = TaskSpec::new(Family::GapDial, 1);
        spec.target_dim = spec.source_dim;
        let b = generate(&spec).unwrap();
        let m = b.metadata.planted_map.unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(b.metadata.permutation.unwrap(), vec![0, 1, 2]);
        assert_eq!(b.metadata.bayes_error_source, b.metadata.bayes_error_target);
    }

    #[test]
    fn permutation_is_recorded() {
        let mut spec = TaskSpec::new(Family::PermutedLabels, 0);
        spec.permutation = Some(vec![2, 0, 1]);
        let b = generate(&spec).unwrap();
        assert_eq!(b.metadata.permutation, Some(vec![2, 0, 1]));
        spec.permutation = Some(vec![0, 0, 1]);
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn rotated_targets_follow_the_isometry() {
        let spec = TaskSpec::new(Family::Rotated, 4);
        let b = generate(&spec).unwrap();
        let m = Matrix::from_rows(&b.metadata.planted_map.clone().unwrap()).unwrap();
        let gram = m.transpose().matmul(&m).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(spec.source_dim)) < 1e-12);
        // target norms follow the source model's norm distribution
        let mean_norm = |d: &Dataset| {
            (0..d.len()).map(|i| d.x.row(i).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / d.len() as f64
        };
        let (a, c) = (mean_norm(&b.source_test), mean_norm(&b.target_test));
        assert!((a - c).abs() / a < 0.15, "{a} vs {c}");
    }

    #[test]
    fn proxy_matches_source_distribution() {
        let spec = TaskSpec {
            n_source: 2000,
            n_proxy: 2000,
            ..TaskSpec::new(Family::Rotated, 5)
        };
        let b = generate(&spec).unwrap();
        assert_ne!(b.source, b.proxy);
        for z in 0..3 {
            let f = |d: &Dataset| d.labels.iter().filter(|&&l| l == z).count() as f64 / d.len() as f64;
            assert!((f(&b.source) - f(&b.proxy)).abs() < 0.05);
        }
        for j in 0..spec.source_dim {
            let m = |d: &Dataset| d.x.col_sums()[j] / d.len() as f64;
            assert!((m(&b.source) - m(&b.proxy)).abs() < 0.15);
        }
    }

    #[test]
    fn bayes_error_is_sane() {
        let b = generate(&TaskSpec::new(Family::Rotated, 0)).unwrap();
        let e = b.metadata.bayes_error_source;
        assert!(e > 0.0 && e < 0.5, "{e}");
        assert!(b.metadata.trainability_threshold > e);
        let mut dial = TaskSpec::new(Family::GapDial, 0);
        dial.gap_knob = 0.5;
        let d = generate(&dial).unwrap();
        assert!(d.metadata.bayes_error_target > e);
    }

    #[test]
    fn gap_dial_fld_is_monotone() {
        for seed in 0..5 {
            let mut last = -1.0;
            for g in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let spec = TaskSpec {
                    gap_knob: g,
                    ..TaskSpec::new(Family::GapDial, seed)
                };
                let inst = gap_dial_instance(&spec).unwrap();
                let fld: f64 = (0..inst.points())
                    .map(|i| {
                        inst.target_marginal[i] * fld_exact(inst.source_cond.row(i), inst.target_cond.row(i)).unwrap().0
                    })
                    .sum();
                assert!(fld >= last - 1e-12, "seed {seed} knob {g}: {fld} < {last}");
                last = fld;
            }
        }
    }

    #[test]
    fn discrete_instances_are_valid() {
        for seed in 0..50 {
            let spec = TaskSpec {
                family: Family::DiscreteExact,
                source_dim: 2,
                source_classes: 2 + (seed as usize % 3),
                target_classes: 2 + (seed as usize / 3 % 3),
                gap_knob: (seed % 5) as f64 / 4.0,
                seed,
                ..Default::default()
            };
            to_discrete_instance(&spec).unwrap().validate().unwrap();
        }
        let spec = TaskSpec {
            family: Family::DiscreteExact,
            support_points: 9,
            ..Default::default()
        };
        assert!(matches!(to_discrete_instance(&spec), Err(Error::Capability { .. })));
    }

    #[test]
    fn identity_discrete_instance_has_only_fld_slack() {
        let spec = TaskSpec {
            family: Family::DiscreteExact,
            source_dim: 2,
            ..Default::default()
        };
        let r = evaluate_bound(&to_discrete_instance(&spec).unwrap()).unwrap();
        assert!(r.fa.abs() < 1e-9, "{}", r.fa);
        assert!((r.err_s - r.err_tau).abs() < 1e-12);
        assert!((r.gap - r.e_fld - r.e_tf - r.fa).abs() < 1e-12);
    }

    #[test]
    fn bundle_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate(&TaskSpec {
            n_test: 20,
            ..TaskSpec::new(Family::PermutedLabels, 2)
        })
        .unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(TaskBundle::load(dir.path()).unwrap(), b);
    }

    #[test]
    fn quantile_bins_have_equal_mass() {
        let mut rng = SeedStream::new(0).rng("bins");
        let fit: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let d = Discretizer::fit(&fit, DEFAULT_BINS).unwrap();
        assert_eq!(d.n_bins(), 10);
        let fresh: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let (idx, _) = d.discretize(&fresh);
        for b in 0..10 {
            let frac = idx.iter().filter(|&&i| i == b).count() as f64 / 1e4;
            assert!((frac - 0.1).abs() <= 0.02, "bin {b}: {frac}");
        }
    }

    #[test]
    fn discretizer_edge_cases() {
        let d = Discretizer::fit(&[3.0; 5], 10).unwrap();
        assert_eq!(d.discretize(&[3.0, 3.0]).0, vec![0, 0]);
        let d = Discretizer {
            edges: vec![0.0, 1.0, 2.0, 3.0],
        };
        assert_eq!(d.discretize(&[1.0, 2.0, 3.0, 0.0]).0, vec![1, 2, 2, 0]);
        let (idx, clamped) = d.discretize(&[-5.0, 7.0]);
        assert_eq!((idx, clamped), (vec![0, 2], 2));
    }

    #[test]
    fn discretizer_round_trip_error_is_bounded() {
        let mut rng = SeedStream::new(1).rng("bins");
        let v: Vec<f64> = (0..500).map(|_| gaussian(&mut rng)).collect();
        let d = Discretizer::fit(&v, DEFAULT_BINS).unwrap();
        let back = d.decode(&d.discretize(&v).0);
        let half = 0.5 * d.widest_bin();
        assert!(v.iter().zip(&back).all(|(a, b)| (a - b).abs() <= half + 1e-12));
        assert!(d.edges.windows(2).all(|w| w[0] < w[1]));
    }
}
