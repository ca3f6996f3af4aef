use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ModelWeights, Tensor};
use crate::seed::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// Fully connected layer; flattens its input.
    Dense {
        out: usize,
    },
    /// 3×3 convolution, stride 1, zero padding 1.
    Conv3x3 {
        out_channels: usize,
    },
    /// 2×2 max pooling with stride 2.
    MaxPool2,
    Relu,
}

/// Network architecture: a per-sample input shape and a layer list.
///
/// Input shapes are `[features]` for vector data or `[channels, height, width]`
/// for images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    input: Vec<usize>,
    layers: Vec<Layer>,
}

impl ModelSpec {
    pub fn new(input: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input.is_empty() || input.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {input:?}")));
        }
        let spec = ModelSpec { input, layers };
        spec.activation_shapes()?;
        Ok(spec)
    }

    /// Multi-layer perceptron with ReLU between dense layers.
    pub fn mlp(input: usize, hidden: &[usize], out: usize) -> Result<Self> {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(Layer::Dense { out: h });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dense { out });
        ModelSpec::new(vec![input], layers)
    }

    /// Two conv blocks followed by two dense layers. The encoder is every
    /// layer except the final classifier (see [`ModelSpec::encoder`]).
    pub fn small_cnn(channels: usize, side: usize, classes: usize) -> Result<Self> {
        ModelSpec::new(
            vec![channels, side, side],
            vec![
                Layer::Conv3x3 { out_channels: 8 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv3x3 { out_channels: 16 },
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Dense { out: 32 },
                Layer::Relu,
                Layer::Dense { out: classes },
            ],
        )
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    /// Per-sample input shape of every layer followed by the output shape.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().unwrap();
            let next = match *layer {
                Layer::Dense { out } => {
                    if out == 0 {
                        return Err(Error::Shape(format!("layer {i}: dense with 0 outputs")));
                    }
                    vec![out]
                }
                Layer::Conv3x3 { out_channels } => {
                    if cur.len() != 3 || out_channels == 0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: conv needs a [c, h, w] input, got {cur:?}"
                        )));
                    }
                    vec![out_channels, cur[1], cur[2]]
                }
                Layer::MaxPool2 => {
                    if cur.len() != 3 || cur[1] % 2 != 0 || cur[2] % 2 != 0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: pooling needs even [c, h, w], got {cur:?}"
                        )));
                    }
                    vec![cur[0], cur[1] / 2, cur[2] / 2]
                }
                Layer::Relu => cur.clone(),
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.activation_shapes()
            .expect("validated at construction")
            .pop()
            .unwrap()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// Number of output classes (the output width).
    pub fn classes(&self) -> usize {
        self.output_len()
    }

    /// Parameter names and shapes in flattening order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let shapes = self.activation_shapes().expect("validated at construction");
        let mut params = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = &shapes[i];
            match *layer {
                Layer::Dense { out } => {
                    let fan_in = input.iter().product();
                    params.push((format!("dense{i}.weight"), vec![out, fan_in]));
                    params.push((format!("dense{i}.bias"), vec![out]));
                }
                Layer::Conv3x3 { out_channels } => {
                    params.push((format!("conv{i}.weight"), vec![out_channels, input[0], 3, 3]));
                    params.push((format!("conv{i}.bias"), vec![out_channels]));
                }
                Layer::MaxPool2 | Layer::Relu => {}
            }
        }
        params
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn zeros(&self) -> ModelWeights {
        ModelWeights::from_entries(
            self.param_shapes()
                .into_iter()
                .map(|(name, shape)| (name, Tensor::zeros(shape)))
                .collect(),
        )
    }

    /// He-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
    pub fn init(&self, rng: &mut Rng) -> ModelWeights {
        let entries = self
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let mut t = Tensor::zeros(shape.clone());
                if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    for v in t.data_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                (name, t)
            })
            .collect();
        ModelWeights::from_entries(entries)
    }

    /// The first `n` layers as a standalone spec. Parameter names keep their
    /// layer indices, so prefix weights overlay onto the full model.
    pub fn prefix(&self, n: usize) -> Result<ModelSpec> {
        if n == 0 || n > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "prefix length {n} out of range 1..={}",
                self.layers.len()
            )));
        }
        ModelSpec::new(self.input.clone(), self.layers[..n].to_vec())
    }

    /// Everything up to (not including) the final dense layer.
    pub fn encoder(&self) -> Result<ModelSpec> {
        let last_dense = self
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Dense { .. }))
            .ok_or_else(|| Error::InvalidArgument("spec has no dense head".into()))?;
        self.prefix(last_dense)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cnn_param_count_matches_hand_count() {
        let spec = ModelSpec::small_cnn(3, 16, 4).unwrap();
        let conv1 = 8 * 3 * 9 + 8;
        let conv2 = 16 * 8 * 9 + 16;
        let dense1 = 32 * (16 * 4 * 4) + 32;
        let dense2 = 4 * 32 + 4;
        assert_eq!(spec.param_count(), conv1 + conv2 + dense1 + dense2);
        assert_eq!(spec.classes(), 4);
    }

    #[test]
    fn mlp_param_count() {
        let spec = ModelSpec::mlp(5, &[7], 3).unwrap();
        assert_eq!(spec.param_count(), 5 * 7 + 7 + 7 * 3 + 3);
    }

    #[test]
    fn incompatible_layers_rejected() {
        assert!(ModelSpec::new(vec![4], vec![Layer::Conv3x3 { out_channels: 2 }]).is_err());
        assert!(ModelSpec::new(vec![1, 3, 3], vec![Layer::MaxPool2]).is_err());
        assert!(ModelSpec::new(vec![0], vec![Layer::Relu]).is_err());
    }

    #[test]
    fn encoder_drops_classifier() {
        let spec = ModelSpec::small_cnn(3, 8, 2).unwrap();
        let enc = spec.encoder().unwrap();
        assert_eq!(enc.layers().len(), spec.layers().len() - 1);
        assert_eq!(enc.output_shape(), vec![32]);
        let full: Vec<_> = spec.param_shapes();
        for p in enc.param_shapes() {
            assert!(full.contains(&p));
        }
    }
}
