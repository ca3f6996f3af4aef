use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::seed::{self, Rng};
use crate::{Error, Result};

/// Points are discarded for this many steps before recording starts.
pub const BURN_IN: usize = 100;
/// Iteration aborts once a coordinate exceeds this magnitude.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
    pub p: f64,
}

impl AffineMap {
    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.a[0][0] * v[0] + self.a[0][1] * v[1] + self.b[0],
            self.a[1][0] * v[0] + self.a[1][1] * v[1] + self.b[1],
        ]
    }

    pub fn det(&self) -> f64 {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }

    fn is_finite(&self) -> bool {
        self.a.iter().flatten().chain(&self.b).all(|v| v.is_finite()) && self.p.is_finite()
    }
}

/// Singular values `(σ₁, σ₂)`, `σ₁ ≥ σ₂ ≥ 0`, of a 2×2 matrix.
pub fn singular_values(a: &[[f64; 2]; 2]) -> (f64, f64) {
    let s = a.iter().flatten().map(|v| v * v).sum::<f64>();
    let d = (a[0][0] * a[1][1] - a[0][1] * a[1][0]).abs();
    let disc = (s * s - 4.0 * d * d).max(0.0).sqrt();
    let s1 = ((s + disc) / 2.0).sqrt();
    let s2 = if s1 > 0.0 { d / s1 } else { 0.0 };
    (s1, s2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IfsCode {
    pub id: u64,
    pub maps: Vec<AffineMap>,
}

impl IfsCode {
    /// Validates finiteness, non-negative probabilities and `Σ p = 1`.
    pub fn new(id: u64, maps: Vec<AffineMap>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::InvalidArgument("IFS code needs at least one map".into()));
        }
        if maps.iter().any(|m| !m.is_finite() || m.p < 0.0) {
            return Err(Error::InvalidArgument("IFS maps must be finite with p ≥ 0".into()));
        }
        let total: f64 = maps.iter().map(|m| m.p).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("IFS probabilities sum to {total}")));
        }
        Ok(IfsCode { id, maps })
    }

    /// Mean over maps of `σ₁ + σ₂`.
    pub fn contractivity_score(&self) -> f64 {
        self.maps
            .iter()
            .map(|m| {
                let (s1, s2) = singular_values(&m.a);
                s1 + s2
            })
            .sum::<f64>()
            / self.maps.len() as f64
    }

    fn cumulative(&self) -> Vec<f64> {
        self.maps
            .iter()
            .scan(0.0, |acc, m| {
                *acc += m.p;
                Some(*acc)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub min_maps: usize,
    pub max_maps: usize,
    /// Matrix and offset entries are drawn from `U(-r, r)`.
    pub entry_range: f64,
    /// Accepted range of the mean singular-value sum, after jittering.
    pub band: (f64, f64),
    /// Per-code scale factor applied to every matrix before the band test.
    pub jitter: (f64, f64),
    /// Also require `σ₁ < 1` for every map.
    pub require_contractive_maps: bool,
    /// Added to `|det A|` before normalising into probabilities.
    pub probability_floor: f64,
    pub max_rejections: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            min_maps: 2,
            max_maps: 4,
            entry_range: 1.0,
            band: (1.0, 1.3),
            jitter: (0.9, 1.1),
            require_contractive_maps: true,
            probability_floor: 0.01,
            max_rejections: 10_000,
        }
    }
}

impl SamplingConfig {
    pub fn accepts(&self, maps: &[AffineMap]) -> bool {
        let mut total = 0.0;
        for m in maps {
            let (s1, s2) = singular_values(&m.a);
            if self.require_contractive_maps && s1 >= 1.0 {
                return false;
            }
            total += s1 + s2;
        }
        let score = total / maps.len() as f64;
        score >= self.band.0 && score <= self.band.1
    }
}

/// Draws a code by rejection sampling against the contractivity band.
pub fn sample_ifs_code(rng: &mut Rng, config: &SamplingConfig) -> Result<IfsCode> {
    if config.min_maps == 0 || config.min_maps > config.max_maps {
        return Err(Error::InvalidArgument(format!(
            "map count range {}..={} is empty",
            config.min_maps, config.max_maps
        )));
    }
    let k = rng.random_range(config.min_maps..=config.max_maps);
    let r = config.entry_range;
    let mut maps = vec![
        AffineMap {
            a: [[0.0; 2]; 2],
            b: [0.0; 2],
            p: 0.0,
        };
        k
    ];
    for _ in 0..config.max_rejections {
        for m in maps.iter_mut() {
            for v in m.a.iter_mut().flatten() {
                *v = rng.random_range(-r..=r);
            }
            for v in m.b.iter_mut() {
                *v = rng.random_range(-r..=r);
            }
        }
        let scale = rng.random_range(config.jitter.0..=config.jitter.1);
        for m in maps.iter_mut() {
            for v in m.a.iter_mut().flatten() {
                *v *= scale;
            }
        }
        if !config.accepts(&maps) {
            continue;
        }
        let weights: Vec<f64> = maps.iter().map(|m| m.det().abs() + config.probability_floor).collect();
        let total: f64 = weights.iter().sum();
        for (m, w) in maps.iter_mut().zip(&weights) {
            m.p = w / total;
        }
        return IfsCode::new(rng.next_u64(), maps);
    }
    Err(Error::SamplingExhausted {
        attempts: config.max_rejections,
    })
}

/// Runs the chaos game from `start`, discards `burn_in` steps and records
/// the following `n` points (the start point itself is never recorded).
pub fn iterate_from(code: &IfsCode, start: [f64; 2], burn_in: usize, n: usize, rng: &mut Rng) -> Result<Vec<[f64; 2]>> {
    let cumulative = code.cumulative();
    let last = code.maps.len() - 1;
    let mut v = start;
    let mut points = Vec::with_capacity(n);
    for step in 0..burn_in + n {
        let u: f64 = rng.random::<f64>() * cumulative[last];
        let k = cumulative.iter().position(|&c| u < c).unwrap_or(last);
        v = code.maps[k].apply(v);
        let magnitude = v[0].abs().max(v[1].abs());
        if !(magnitude <= DIVERGENCE_LIMIT) {
            return Err(Error::Diverged {
                step: step + 1,
                magnitude,
            });
        }
        if step >= burn_in {
            points.push(v);
        }
    }
    Ok(points)
}

/// `n_iters` points starting from the origin after a [`BURN_IN`]-step burn-in.
pub fn iterate_ifs(code: &IfsCode, n_iters: usize, rng: &mut Rng) -> Result<Vec<[f64; 2]>> {
    if n_iters == 0 {
        return Err(Error::InvalidArgument("n_iters must be at least 1".into()));
    }
    iterate_from(code, [0.0, 0.0], BURN_IN, n_iters, rng)
}

/// A fixed set of pre-sampled codes. Code `i` is drawn from its own stream
/// derived from `(master_seed, i)` and carries id `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodePool {
    pub master_seed: u64,
    pub codes: Vec<IfsCode>,
}

impl CodePool {
    pub fn generate(master_seed: u64, n: usize, config: &SamplingConfig) -> Result<Self> {
        let codes = (0..n)
            .map(|i| {
                let mut rng = seed::derive_rng(master_seed, &[seed::stream::CODES, i as u64]);
                let mut code = sample_ifs_code(&mut rng, config)?;
                code.id = i as u64;
                Ok(code)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CodePool { master_seed, codes })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pool: CodePool = serde_json::from_str(&text)?;
        for code in &pool.codes {
            IfsCode::new(code.id, code.maps.clone())?;
        }
        Ok(pool)
    }
}
