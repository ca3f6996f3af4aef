use std::collections::BTreeSet;

use crate::nn::{ModelSpec, ModelWeights, Tensor};
use crate::seed::Rng;
use crate::{Error, Result};

/// Projection head (features → z) and prediction head (z → p).
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorPredictor {
    pub projector: ModelSpec,
    pub predictor: ModelSpec,
}

impl ProjectorPredictor {
    pub fn new(projector: ModelSpec, predictor: ModelSpec) -> Result<Self> {
        let z = projector.output_len();
        if predictor.input_len() != z || predictor.output_len() != z {
            return Err(Error::Shape(format!(
                "predictor must map {z} → {z}, got {} → {}",
                predictor.input_len(),
                predictor.output_len()
            )));
        }
        Ok(ProjectorPredictor { projector, predictor })
    }

    /// Two-layer projector `features → hidden → out` and a bottleneck
    /// predictor `out → bottleneck → out`.
    pub fn mlp(features: usize, hidden: usize, out: usize, bottleneck: usize) -> Result<Self> {
        ProjectorPredictor::new(
            ModelSpec::mlp(features, &[hidden], out)?,
            ModelSpec::mlp(out, &[bottleneck], out)?,
        )
    }
}

/// Encoder plus heads.
#[derive(Clone, Debug, PartialEq)]
pub struct SimSiamModel {
    pub encoder: ModelSpec,
    pub heads: ProjectorPredictor,
}

impl SimSiamModel {
    pub fn new(encoder: ModelSpec, heads: ProjectorPredictor) -> Result<Self> {
        if encoder.output_len() != heads.projector.input_len() {
            return Err(Error::Shape(format!(
                "encoder emits {} features, projector expects {}",
                encoder.output_len(),
                heads.projector.input_len()
            )));
        }
        Ok(SimSiamModel { encoder, heads })
    }

    pub fn init(&self, encoder_rng: &mut Rng, heads_rng: &mut Rng) -> SimSiamWeights {
        SimSiamWeights {
            encoder: self.encoder.init(encoder_rng),
            projector: self.heads.projector.init(heads_rng),
            predictor: self.heads.predictor.init(heads_rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimSiamWeights {
    pub encoder: ModelWeights,
    pub projector: ModelWeights,
    pub predictor: ModelWeights,
}

/// Parameter gradients of a self-supervised loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SslGradients {
    pub encoder: ModelWeights,
    pub projector: ModelWeights,
    pub predictor: ModelWeights,
}

impl SslGradients {
    /// Qualified names of every tensor that received a gradient.
    pub fn names(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for (prefix, w) in [
            ("encoder", &self.encoder),
            ("projector", &self.projector),
            ("predictor", &self.predictor),
        ] {
            for n in w.names() {
                out.insert(format!("{prefix}/{n}"));
            }
        }
        out
    }
}

/// Two views of the same batch of pairs.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub first: Tensor,
    pub second: Tensor,
}

impl PairBatch {
    pub fn new(first: Tensor, second: Tensor) -> Result<Self> {
        if first.shape() != second.shape() {
            return Err(Error::Shape(format!(
                "views have shapes {:?} and {:?}",
                first.shape(),
                second.shape()
            )));
        }
        Ok(PairBatch { first, second })
    }

    pub fn len(&self) -> usize {
        self.first.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn swapped(&self) -> PairBatch {
        PairBatch {
            first: self.second.clone(),
            second: self.first.clone(),
        }
    }
}
