use super::{ModelSpec, Tensor};
use crate::{Error, Result};

/// Ordered named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    entries: Vec<(String, Tensor)>,
}

impl ModelWeights {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        ModelWeights { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Concatenation of all entries in order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (_, t) in &self.entries {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.entries.iter_mut().flat_map(|(_, t)| t.data_mut().iter_mut())
    }

    pub fn zeros_like(&self) -> ModelWeights {
        ModelWeights {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    /// Same names and shapes, in the same order.
    pub fn is_aligned(&self, other: &ModelWeights) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    pub fn ensure_aligned(&self, other: &ModelWeights) -> Result<()> {
        if self.is_aligned(other) {
            Ok(())
        } else {
            Err(Error::Shape("model weights are not element-aligned".into()))
        }
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &ModelWeights, scale: f64) -> Result<()> {
        self.ensure_aligned(other)?;
        for (a, &b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &ModelWeights) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ModelWeights) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// 64-bit FNV-1a digest of names and value bits.
    pub fn fingerprint(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, t) in &self.entries {
            feed(name.as_bytes());
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Replaces every entry that `other` also carries (matched by name).
    pub fn overlay(&mut self, other: &ModelWeights) -> Result<()> {
        for (name, src) in &other.entries {
            let dst = self
                .entries
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Shape(format!("no parameter named {name}")))?;
            if dst.1.shape() != src.shape() {
                return Err(Error::Shape(format!(
                    "{name}: shape {:?} vs {:?}",
                    dst.1.shape(),
                    src.shape()
                )));
            }
            dst.1 = src.clone();
        }
        Ok(())
    }

    /// Keeps only the entries whose names appear in `names`.
    pub fn restrict_to<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut entries = Vec::new();
        for name in names {
            let t = self
                .get(name)
                .ok_or_else(|| Error::Shape(format!("no parameter named {name}")))?;
            entries.push((name.to_string(), t.clone()));
        }
        Ok(ModelWeights { entries })
    }

    /// Convex combination `Σ c_m · w_m` for coefficients summing to one.
    ///
    /// Evaluated as `w_a + Σ_{m≠a} c_m (w_m − w_a)` around the model `a` with
    /// the largest coefficient. With this form a one-hot coefficient vector
    /// returns that model exactly and identical inputs reproduce the input
    /// exactly, whatever the rounding of the coefficients.
    pub fn convex_combination(models: &[&ModelWeights], coeffs: &[f64]) -> Result<ModelWeights> {
        let first = models
            .first()
            .ok_or_else(|| Error::InvalidArgument("no models to combine".into()))?;
        if models.len() != coeffs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} models but {} coefficients",
                models.len(),
                coeffs.len()
            )));
        }
        for m in models {
            first.ensure_aligned(m)?;
        }
        let anchor = coeffs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &c)| if c > coeffs[best] { i } else { best });
        let mut out = models[anchor].clone();
        for (m, (&model, &c)) in models.iter().zip(coeffs).enumerate() {
            if m == anchor || c == 0.0 {
                continue;
            }
            for ((o, &x), &a) in out.values_mut().zip(model.values()).zip(models[anchor].values()) {
                *o += c * (x - a);
            }
        }
        Ok(out)
    }
}

/// Inverse of [`ModelWeights::flatten`] for the given architecture.
pub fn unflatten(spec: &ModelSpec, flat: &[f64]) -> Result<ModelWeights> {
    let expected = spec.param_count();
    if flat.len() != expected {
        return Err(Error::Shape(format!(
            "flat vector has {} values, spec needs {expected}",
            flat.len()
        )));
    }
    let mut offset = 0;
    let mut entries = Vec::new();
    for (name, shape) in spec.param_shapes() {
        let n: usize = shape.iter().product();
        entries.push((name, Tensor::new(shape, flat[offset..offset + n].to_vec())?));
        offset += n;
    }
    Ok(ModelWeights { entries })
}
