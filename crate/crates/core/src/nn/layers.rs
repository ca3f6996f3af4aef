use rayon::prelude::*;

use super::{cross_entropy, Layer, ModelSpec, ModelWeights, Tensor};
use crate::{Error, Result};

/// Activations recorded by [`forward`] for use by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    spec: ModelSpec,
    fingerprint: u64,
    /// Input of each layer, batched.
    inputs: Vec<Tensor>,
    /// For pooling layers, the flat input index that won each output cell.
    argmax: Vec<Vec<usize>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: ModelWeights,
    pub input: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

fn check_weights(spec: &ModelSpec, w: &ModelWeights) -> Result<()> {
    let expected = spec.param_shapes();
    let entries = w.entries();
    if expected.len() != entries.len()
        || expected
            .iter()
            .zip(entries)
            .any(|((n, s), (m, t))| n != m || s.as_slice() != t.shape())
    {
        return Err(Error::Shape("weights do not match the model spec".to_string()));
    }
    Ok(())
}

fn check_batch(spec: &ModelSpec, batch: &Tensor) -> Result<()> {
    if batch.shape().len() < 2 || batch.row_len() != spec.input_len() {
        return Err(Error::Shape(format!(
            "batch shape {:?} does not match input shape {:?}",
            batch.shape(),
            spec.input_shape()
        )));
    }
    Ok(())
}

fn batched(b: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(b);
    s.extend_from_slice(shape);
    s
}

/// Unrolls 3×3 neighbourhoods (zero padded) into a `[c·9, h·w]` matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, o) in out.iter_mut().enumerate() {
                        let sx = xx as isize + kx as isize - 1;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (out, fan_in) = (weight.shape()[0], weight.shape()[1]);
    let b = x.rows();
    let mut y = Tensor::zeros(vec![b, out]);
    for s in 0..b {
        let xs = x.row(s);
        let ys = y.row_mut(s);
        for (o, yo) in ys.iter_mut().enumerate() {
            let wr = &weight.data()[o * fan_in..(o + 1) * fan_in];
            *yo = bias.data()[o] + wr.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    y
}

fn conv_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, in_shape: &[usize]) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let co = weight.shape()[0];
    let k = c * 9;
    let hw = h * w;
    let b = x.rows();
    let mut y = Tensor::zeros(vec![b, co, h, w]);
    let mut cols = vec![0.0; k * hw];
    for s in 0..b {
        im2col(x.row(s), c, h, w, &mut cols);
        let ys = y.row_mut(s);
        for o in 0..co {
            let out = &mut ys[o * hw..(o + 1) * hw];
            out.fill(bias.data()[o]);
            for (ki, &wv) in weight.data()[o * k..(o + 1) * k].iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                for (yv, &cv) in out.iter_mut().zip(&cols[ki * hw..(ki + 1) * hw]) {
                    *yv += wv * cv;
                }
            }
        }
    }
    y
}

fn pool_forward(x: &Tensor, in_shape: &[usize]) -> (Tensor, Vec<usize>) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let b = x.rows();
    let mut y = Tensor::zeros(vec![b, c, oh, ow]);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    let per_sample = c * h * w;
    for s in 0..b {
        let xs = x.row(s);
        let ys = y.row_mut(s);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = ci * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ci * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    ys[ci * oh * ow + oy * ow + ox] = xs[best];
                    argmax.push(s * per_sample + best);
                }
            }
        }
    }
    (y, argmax)
}

fn run_forward(
    spec: &ModelSpec,
    w: &ModelWeights,
    batch: &Tensor,
    keep: bool,
) -> Result<(Tensor, Option<ForwardCache>)> {
    check_weights(spec, w)?;
    check_batch(spec, batch)?;
    let shapes = spec.activation_shapes()?;
    let b = batch.rows();
    let mut x = batch.clone().reshape(batched(b, spec.input_shape()))?;
    let mut inputs = Vec::new();
    let mut argmax = Vec::new();
    let mut params = w.entries().iter();
    for (i, layer) in spec.layers().iter().enumerate() {
        let y = match layer {
            Layer::Dense { .. } => {
                let (_, weight) = params.next().unwrap();
                let (_, bias) = params.next().unwrap();
                dense_forward(&x, weight, bias)
            }
            Layer::Conv3x3 { .. } => {
                let (_, weight) = params.next().unwrap();
                let (_, bias) = params.next().unwrap();
                conv_forward(&x, weight, bias, &shapes[i])
            }
            Layer::MaxPool2 => {
                let (y, idx) = pool_forward(&x, &shapes[i]);
                if keep {
                    argmax.push(idx);
                }
                y
            }
            Layer::Relu => x.map(|v| v.max(0.0)),
        };
        if keep {
            inputs.push(x);
        }
        x = y;
    }
    if !x.all_finite() {
        return Err(Error::NonFinite {
            context: "forward activations".into(),
        });
    }
    let cache = keep.then(|| ForwardCache {
        spec: spec.clone(),
        fingerprint: w.fingerprint(),
        inputs: if spec.layers().is_empty() {
            vec![x.clone()]
        } else {
            inputs
        },
        argmax,
    });
    Ok((x, cache))
}

/// Forward pass recording everything [`backward`] needs.
pub fn forward(spec: &ModelSpec, w: &ModelWeights, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
    let (y, cache) = run_forward(spec, w, batch, true)?;
    Ok((y, cache.unwrap()))
}

/// Forward pass without a cache.
pub fn predict(spec: &ModelSpec, w: &ModelWeights, batch: &Tensor) -> Result<Tensor> {
    Ok(run_forward(spec, w, batch, false)?.0)
}

/// Backpropagates `grad_out` (same shape as the forward output).
///
/// `w` must be the weights the cache was recorded with; anything else is
/// rejected as a stale cache.
pub fn backward(cache: &ForwardCache, w: &ModelWeights, grad_out: &Tensor) -> Result<Gradients> {
    if w.fingerprint() != cache.fingerprint {
        return Err(Error::StaleCache);
    }
    let spec = &cache.spec;
    let shapes = spec.activation_shapes()?;
    let b = cache.batch_size();
    let out_len: usize = shapes.last().unwrap().iter().product();
    if grad_out.rows() != b || grad_out.row_len() != out_len {
        return Err(Error::Shape(format!(
            "gradient shape {:?} does not match output [{b}, {out_len}]",
            grad_out.shape()
        )));
    }
    let mut grads = w.zeros_like();
    let mut param_idx = w.entries().len();
    let mut pool_idx = cache.argmax.len();
    let mut g = grad_out.clone().reshape(batched(b, shapes.last().unwrap()))?;

    for (i, layer) in spec.layers().iter().enumerate().rev() {
        let x = &cache.inputs[i];
        let in_shape = &shapes[i];
        g = match layer {
            Layer::Dense { out } => {
                param_idx -= 2;
                let weight = &w.entries()[param_idx].1;
                let fan_in = weight.shape()[1];
                let entries = grads.entries_mut();
                let (gw_part, gb_part) = entries[param_idx..param_idx + 2].split_at_mut(1);
                let gw = gw_part[0].1.data_mut();
                let gb = gb_part[0].1.data_mut();
                let mut dx = Tensor::zeros(batched(b, in_shape));
                for s in 0..b {
                    let xs = x.row(s);
                    let dys = &g.data()[s * out..(s + 1) * out];
                    let dxs = dx.row_mut(s);
                    for (o, &dy) in dys.iter().enumerate() {
                        if dy == 0.0 {
                            continue;
                        }
                        gb[o] += dy;
                        let wr = &weight.data()[o * fan_in..(o + 1) * fan_in];
                        let gwr = &mut gw[o * fan_in..(o + 1) * fan_in];
                        for ((gv, &xv), (dxv, &wv)) in gwr.iter_mut().zip(xs).zip(dxs.iter_mut().zip(wr)) {
                            *gv += dy * xv;
                            *dxv += dy * wv;
                        }
                    }
                }
                dx
            }
            Layer::Conv3x3 { out_channels } => {
                param_idx -= 2;
                let weight = &w.entries()[param_idx].1;
                let (c, h, wd) = (in_shape[0], in_shape[1], in_shape[2]);
                let co = *out_channels;
                let k = c * 9;
                let hw = h * wd;
                let entries = grads.entries_mut();
                let (gw_part, gb_part) = entries[param_idx..param_idx + 2].split_at_mut(1);
                let gw = gw_part[0].1.data_mut();
                let gb = gb_part[0].1.data_mut();
                let mut dx = Tensor::zeros(batched(b, in_shape));
                let mut cols = vec![0.0; k * hw];
                let mut dcols = vec![0.0; k * hw];
                for s in 0..b {
                    im2col(x.row(s), c, h, wd, &mut cols);
                    dcols.fill(0.0);
                    let dys = &g.data()[s * co * hw..(s + 1) * co * hw];
                    for o in 0..co {
                        let dy = &dys[o * hw..(o + 1) * hw];
                        gb[o] += dy.iter().sum::<f64>();
                        for ki in 0..k {
                            let colr = &cols[ki * hw..(ki + 1) * hw];
                            gw[o * k + ki] += dy.iter().zip(colr).map(|(a, b)| a * b).sum::<f64>();
                            let wv = weight.data()[o * k + ki];
                            if wv != 0.0 {
                                for (dc, &d) in dcols[ki * hw..(ki + 1) * hw].iter_mut().zip(dy) {
                                    *dc += wv * d;
                                }
                            }
                        }
                    }
                    col2im(&dcols, c, h, wd, dx.row_mut(s));
                }
                dx
            }
            Layer::MaxPool2 => {
                pool_idx -= 1;
                let mut dx = Tensor::zeros(batched(b, in_shape));
                for (&src, &dy) in cache.argmax[pool_idx].iter().zip(g.data()) {
                    dx.data_mut()[src] += dy;
                }
                dx
            }
            Layer::Relu => {
                let mut dx = g;
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                dx
            }
        };
    }
    let input = g.reshape(batched(b, spec.input_shape()))?;
    Ok(Gradients { params: grads, input })
}

/// Mean cross-entropy and accuracy over a labelled set, in fixed-size chunks.
pub fn evaluate(spec: &ModelSpec, w: &ModelWeights, images: &Tensor, labels: &[usize]) -> Result<Evaluation> {
    const CHUNK: usize = 256;
    let n = labels.len();
    if n == 0 || images.rows() != n {
        return Err(Error::InvalidArgument(format!(
            "evaluation set has {} images and {n} labels",
            images.rows()
        )));
    }
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let parts = chunks
        .par_iter()
        .map(|&(s, e)| {
            let idx: Vec<usize> = (s..e).collect();
            let logits = predict(spec, w, &images.select_rows(&idx))?;
            let ce = cross_entropy(&logits, &labels[s..e])?;
            Ok((ce.loss * (e - s) as f64, ce.correct))
        })
        .collect::<Result<Vec<_>>>()?;
    let (loss_sum, correct) = parts.iter().fold((0.0, 0), |(l, c), &(pl, pc)| (l + pl, c + pc));
    Ok(Evaluation {
        loss: loss_sum / n as f64,
        accuracy: correct as f64 / n as f64,
        correct,
        total: n,
    })
}
