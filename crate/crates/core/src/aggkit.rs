//! Analyses over a set of client models: convex combinations, the search
//! for the best simplex coefficients, random simplex sampling and loss
//! along linear paths.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::nn::{backward, cross_entropy, evaluate, forward, Evaluation, ModelSpec, ModelWeights};
use crate::seed::{derive_rng, Rng};
use crate::{Error, Result};

/// A point of the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub const TOLERANCE: f64 = 1e-12;

    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(Error::InvalidArgument("simplex weights need at least one entry".into()));
        }
        if let Some(v) = lambda.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "simplex entry {v} is negative or non-finite"
            )));
        }
        let sum: f64 = lambda.iter().sum();
        if (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::InvalidArgument(format!("simplex entries sum to {sum}, not 1")));
        }
        Ok(SimplexWeights(lambda))
    }

    pub fn uniform(m: usize) -> Result<Self> {
        Self::normalized((0..m).map(|_| 1.0).collect())
    }

    pub fn one_hot(m: usize, k: usize) -> Result<Self> {
        if k >= m {
            return Err(Error::InvalidArgument(format!("vertex {k} of a {m}-simplex")));
        }
        let mut v = vec![0.0; m];
        v[k] = 1.0;
        Ok(SimplexWeights(v))
    }

    /// `|D_m| / Σ |D|`
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "data-size coefficients need positive sizes".into(),
            ));
        }
        Self::normalized(sizes.iter().map(|&s| s as f64).collect())
    }

    pub fn softmax(u: &[f64]) -> Result<Self> {
        let max = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite {
                context: "softmax logits".into(),
            });
        }
        Self::normalized(u.iter().map(|v| (v - max).exp()).collect())
    }

    fn normalized(v: Vec<f64>) -> Result<Self> {
        let sum: f64 = v.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::InvalidArgument(format!("cannot normalise {v:?}")));
        }
        Self::new(v.into_iter().map(|x| x / sum).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Softmax logits that map back onto this point (zeros become a large
    /// negative gap).
    pub fn logits(&self) -> Vec<f64> {
        self.0.iter().map(|&v| if v > 0.0 { v.ln() } else { -60.0 }).collect()
    }
}

impl TryFrom<Vec<f64>> for SimplexWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        SimplexWeights::new(v)
    }
}

impl From<SimplexWeights> for Vec<f64> {
    fn from(s: SimplexWeights) -> Self {
        s.0
    }
}

pub fn combine(models: &[ModelWeights], lambda: &SimplexWeights) -> Result<ModelWeights> {
    if models.len() != lambda.len() {
        return Err(Error::InvalidArgument(format!(
            "{} models but {} coefficients",
            models.len(),
            lambda.len()
        )));
    }
    let refs: Vec<&ModelWeights> = models.iter().collect();
    ModelWeights::convex_combination(&refs, lambda.as_slice())
}

/// A labelled evaluation set for a fixed architecture.
pub trait Objective: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn evaluate(&self, w: &ModelWeights) -> Result<Evaluation>;

    /// Mean loss over the given items and its parameter gradient.
    fn loss_grad(&self, w: &ModelWeights, indices: &[usize]) -> Result<(f64, ModelWeights)>;
}

/// Cross-entropy of a classifier on a dataset.
pub struct ClassifierObjective<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a LabeledDataset,
}

impl Objective for ClassifierObjective<'_> {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn evaluate(&self, w: &ModelWeights) -> Result<Evaluation> {
        evaluate(self.spec, w, &self.data.images, &self.data.labels)
    }

    fn loss_grad(&self, w: &ModelWeights, indices: &[usize]) -> Result<(f64, ModelWeights)> {
        let (x, y) = self.data.batch(indices);
        let (logits, cache) = forward(self.spec, w, &x)?;
        let ce = cross_entropy(&logits, &y)?;
        Ok((ce.loss, backward(&cache, w, &ce.grad)?.params))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LambdaSearchConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub random_inits: usize,
    /// Also start from every vertex of the simplex.
    pub vertex_inits: bool,
    /// Supplied by the caller; not serialised.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for LambdaSearchConfig {
    fn default() -> Self {
        LambdaSearchConfig {
            lr: 1e-5,
            epochs: 20,
            batch_size: 32,
            random_inits: 3,
            vertex_inits: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub lambda: Vec<f64>,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Restart {
    pub init: String,
    /// Epoch 0 is the starting point, evaluated exactly.
    pub trajectory: Vec<TrajectoryPoint>,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaReport {
    pub restarts: Vec<Restart>,
    /// `(restart, epoch)` of the selected point.
    pub selected: (usize, usize),
    pub accuracy: f64,
    pub loss: f64,
    pub data_size_accuracy: f64,
    pub data_size_loss: f64,
    pub warning: String,
}

#[derive(Clone, Debug)]
pub struct LambdaSearch {
    pub lambda: SimplexWeights,
    pub model: ModelWeights,
    pub report: LambdaReport,
}

fn descend(
    models: &[ModelWeights],
    objective: &dyn Objective,
    start: &SimplexWeights,
    cfg: &LambdaSearchConfig,
    rng: &mut Rng,
) -> Result<Vec<TrajectoryPoint>> {
    let point = |epoch: usize, lambda: &SimplexWeights| -> Result<TrajectoryPoint> {
        let e = objective.evaluate(&combine(models, lambda)?)?;
        Ok(TrajectoryPoint {
            epoch,
            lambda: lambda.as_slice().to_vec(),
            loss: e.loss,
            accuracy: e.accuracy,
        })
    };
    let mut trajectory = vec![point(0, start)?];
    let mut u = start.logits();
    let mut order: Vec<usize> = (0..objective.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let lambda = SimplexWeights::softmax(&u)?;
            let theta = combine(models, &lambda)?;
            let (loss, g) = objective.loss_grad(&theta, batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("λ objective at epoch {epoch}"),
                });
            }
            let gm: Vec<f64> = models.iter().map(|m| g.dot(m)).collect();
            let l = lambda.as_slice();
            let mean: f64 = l.iter().zip(&gm).map(|(a, b)| a * b).sum();
            for ((uj, &lj), &gj) in u.iter_mut().zip(l).zip(&gm) {
                *uj -= cfg.lr * lj * (gj - mean);
            }
        }
        trajectory.push(point(epoch, &SimplexWeights::softmax(&u)?)?);
    }
    Ok(trajectory)
}

/// Searches the simplex for coefficients that maximise accuracy of the
/// combined model, descending on cross-entropy under a softmax
/// parametrisation from several starting points. The data-size point is
/// always a candidate, so the result is never less accurate than it.
pub fn optimal_convex_aggregation(
    models: &[ModelWeights],
    sizes: &[usize],
    objective: &dyn Objective,
    cfg: &LambdaSearchConfig,
) -> Result<LambdaSearch> {
    let m = models.len();
    if m < 2 || sizes.len() != m {
        return Err(Error::InvalidArgument(format!(
            "need ≥ 2 models with one size each, got {m} models and {} sizes",
            sizes.len()
        )));
    }
    if objective.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let mut starts = vec![
        ("data_size".to_string(), SimplexWeights::from_sizes(sizes)?),
        ("uniform".to_string(), SimplexWeights::uniform(m)?),
    ];
    let mut rng = derive_rng(cfg.seed, &[crate::seed::stream::ANALYSIS, 1]);
    for r in 0..cfg.random_inits {
        let u: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        starts.push((format!("random_{r}"), SimplexWeights::softmax(&u)?));
    }
    if cfg.vertex_inits {
        for k in 0..m {
            starts.push((format!("vertex_{k}"), SimplexWeights::one_hot(m, k)?));
        }
    }
    let restarts: Vec<Restart> = starts
        .par_iter()
        .enumerate()
        .map(|(i, (name, start))| {
            let mut rng = derive_rng(cfg.seed, &[crate::seed::stream::ANALYSIS, 2, i as u64]);
            match descend(models, objective, start, cfg, &mut rng) {
                Ok(trajectory) => Ok(Restart {
                    init: name.clone(),
                    trajectory,
                    skipped: None,
                }),
                Err(e @ Error::NonFinite { .. }) => {
                    log::warn!("λ restart {name} skipped: {e}");
                    Ok(Restart {
                        init: name.clone(),
                        trajectory: Vec::new(),
                        skipped: Some(e.to_string()),
                    })
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let data_size = restarts[0]
        .trajectory
        .first()
        .cloned()
        .ok_or_else(|| Error::NonFinite {
            context: "data-size coefficients".into(),
        })?;
    let mut selected = (0, 0);
    let mut best = &data_size;
    for (r, restart) in restarts.iter().enumerate() {
        for (e, p) in restart.trajectory.iter().enumerate() {
            if p.accuracy > best.accuracy || (p.accuracy == best.accuracy && p.loss < best.loss) {
                best = p;
                selected = (r, e);
            }
        }
    }
    let lambda = if selected == (0, 0) {
        starts[0].1.clone()
    } else {
        SimplexWeights::new(best.lambda.clone()).or_else(|_| SimplexWeights::normalized(best.lambda.clone()))?
    };
    let model = combine(models, &lambda)?;
    let report = LambdaReport {
        accuracy: best.accuracy,
        loss: best.loss,
        data_size_accuracy: data_size.accuracy,
        data_size_loss: data_size.loss,
        restarts,
        selected,
        warning: "coefficients are tuned on the evaluation set; treat the result as an oracle analysis".into(),
    };
    Ok(LambdaSearch { lambda, model, report })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSample {
    pub lambda: SimplexWeights,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub samples: Vec<SurfaceSample>,
    pub mean_loss: f64,
    pub mean_accuracy: f64,
    /// Empirical 2.5 % and 97.5 % loss percentiles.
    pub ci95: (f64, f64),
}

/// Uniform draw from the simplex: normalised i.i.d. exponentials.
pub fn sample_simplex(m: usize, rng: &mut Rng) -> Result<SimplexWeights> {
    let e: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = e.iter().sum();
    if !(sum > 0.0) {
        return SimplexWeights::uniform(m);
    }
    let mut lambda: Vec<f64> = e.iter().map(|v| v / sum).collect();
    // Absorb rounding so the entries sum to one as closely as possible.
    let drift: f64 = 1.0 - lambda.iter().sum::<f64>();
    let k = (0..m).fold(0, |b, i| if lambda[i] > lambda[b] { i } else { b });
    lambda[k] += drift;
    SimplexWeights::new(lambda)
}

/// Linear-interpolation percentile of sorted data, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sample_surface(models: &[ModelWeights], n: usize, objective: &dyn Objective, rng: &mut Rng) -> Result<Surface> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument("surface sampling needs ≥ 2 models".into()));
    }
    let draws = (0..n)
        .map(|_| sample_simplex(models.len(), rng))
        .collect::<Result<Vec<_>>>()?;
    let samples = draws
        .into_par_iter()
        .map(|lambda| {
            let e = objective.evaluate(&combine(models, &lambda)?)?;
            Ok(SurfaceSample {
                lambda,
                loss: e.loss,
                accuracy: e.accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut losses: Vec<f64> = samples.iter().map(|s| s.loss).collect();
    losses.sort_by(f64::total_cmp);
    let k = samples.len().max(1) as f64;
    Ok(Surface {
        mean_loss: samples.iter().map(|s| s.loss).sum::<f64>() / k,
        mean_accuracy: samples.iter().map(|s| s.accuracy).sum::<f64>() / k,
        ci95: (percentile(&losses, 0.025), percentile(&losses, 0.975)),
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentPoint {
    pub t: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// Loss along `(1 − t)·w_a + t·w_b` at `steps` evenly spaced `t`.
pub fn segment_loss(
    w_a: &ModelWeights,
    w_b: &ModelWeights,
    steps: usize,
    objective: &dyn Objective,
) -> Result<Vec<SegmentPoint>> {
    if steps < 2 {
        return Err(Error::InvalidArgument("segment needs at least 2 steps".into()));
    }
    let pair = [w_a.clone(), w_b.clone()];
    (0..steps)
        .into_par_iter()
        .map(|i| {
            let t = if i == steps - 1 {
                1.0
            } else {
                i as f64 / (steps - 1) as f64
            };
            let lambda = SimplexWeights::new(vec![1.0 - t, t])?;
            let e = objective.evaluate(&combine(&pair, &lambda)?)?;
            Ok(SegmentPoint {
                t,
                loss: e.loss,
                accuracy: e.accuracy,
            })
        })
        .collect()
}

/// `lambda_1..lambda_M,loss,acc` rows.
pub fn lambda_csv<'a>(m: usize, rows: impl IntoIterator<Item = (&'a [f64], f64, f64)>) -> String {
    let mut out = String::new();
    for k in 1..=m {
        let _ = write!(out, "lambda_{k},");
    }
    out.push_str("loss,acc\n");
    for (lambda, loss, acc) in rows {
        for v in lambda {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{loss},{acc}");
    }
    out
}

pub fn surface_csv(surface: &Surface, m: usize) -> String {
    lambda_csv(
        m,
        surface
            .samples
            .iter()
            .map(|s| (s.lambda.as_slice(), s.loss, s.accuracy)),
    )
}

/// Trajectory of the selected restart.
pub fn trajectory_csv(report: &LambdaReport, m: usize) -> String {
    let restart = &report.restarts[report.selected.0];
    lambda_csv(
        m,
        restart
            .trajectory
            .iter()
            .map(|p| (p.lambda.as_slice(), p.loss, p.accuracy)),
    )
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
