use super::{PairBatch, SimSiamModel, SimSiamWeights, SslGradients};
use crate::nn::{backward, cross_entropy, forward, Tensor};
use crate::{Error, Result};

/// Batch-mean negative cosine similarity and its gradient with respect to
/// `p`. The second argument is a constant: there is no gradient for it.
#[derive(Clone, Debug)]
pub struct NegativeCosine {
    pub loss: f64,
    pub grad_p: Tensor,
    /// Rows where `p` or `z` has zero norm; they contribute nothing.
    pub degenerate_rows: Vec<usize>,
}

pub fn negative_cosine(p: &Tensor, z: &Tensor) -> Result<NegativeCosine> {
    if p.shape() != z.shape() || p.shape().len() < 2 {
        return Err(Error::Shape(format!(
            "p {:?} and z {:?} must share a batched shape",
            p.shape(),
            z.shape()
        )));
    }
    let b = p.rows();
    let mut grad_p = Tensor::zeros(p.shape().to_vec());
    let mut loss = 0.0;
    let mut degenerate_rows = Vec::new();
    for i in 0..b {
        let (pr, zr) = (p.row(i), z.row(i));
        let np = pr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nz = zr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if np == 0.0 || nz == 0.0 {
            degenerate_rows.push(i);
            continue;
        }
        let dot: f64 = pr.iter().zip(zr).map(|(a, b)| a * b).sum();
        let cos = dot / (np * nz);
        loss -= cos;
        // ∂(−cos)/∂p = −(z/(‖p‖‖z‖) − cos·p/‖p‖²)
        for ((g, &pv), &zv) in grad_p.row_mut(i).iter_mut().zip(pr).zip(zr) {
            *g = -(zv / (np * nz) - cos * pv / (np * np)) / b as f64;
        }
    }
    Ok(NegativeCosine {
        loss: loss / b as f64,
        grad_p,
        degenerate_rows,
    })
}

/// `½ D(p₁, z₂) + ½ D(p₂, z₁)` with gradients for the predictions only.
#[derive(Clone, Debug)]
pub struct SymmetricCosine {
    pub loss: f64,
    pub grad_p1: Tensor,
    pub grad_p2: Tensor,
    pub degenerate_rows: usize,
}

impl SymmetricCosine {
    /// Arguments that received a gradient.
    pub const GRADIENT_ARGUMENTS: [&'static str; 2] = ["p1", "p2"];
}

pub fn simsiam_objective(p1: &Tensor, p2: &Tensor, z1: &Tensor, z2: &Tensor) -> Result<SymmetricCosine> {
    let a = negative_cosine(p1, z2)?;
    let b = negative_cosine(p2, z1)?;
    Ok(SymmetricCosine {
        loss: 0.5 * a.loss + 0.5 * b.loss,
        grad_p1: a.grad_p.map(|g| 0.5 * g),
        grad_p2: b.grad_p.map(|g| 0.5 * g),
        degenerate_rows: a.degenerate_rows.len() + b.degenerate_rows.len(),
    })
}

#[derive(Clone, Debug)]
pub struct SimSiamOutput {
    pub loss: f64,
    pub grads: SslGradients,
    /// Projections of the two views (constants as far as the loss is concerned).
    pub z1: Tensor,
    pub z2: Tensor,
    pub degenerate_rows: usize,
}

/// SimSiam loss over a batch of pairs. Gradients reach the encoder and the
/// projector only through the prediction branch of each view.
pub fn simsiam_loss(batch: &PairBatch, model: &SimSiamModel, w: &SimSiamWeights) -> Result<SimSiamOutput> {
    let heads = &model.heads;
    let (f1, ce1) = forward(&model.encoder, &w.encoder, &batch.first)?;
    let (z1, cz1) = forward(&heads.projector, &w.projector, &f1)?;
    let (p1, cp1) = forward(&heads.predictor, &w.predictor, &z1)?;
    let (f2, ce2) = forward(&model.encoder, &w.encoder, &batch.second)?;
    let (z2, cz2) = forward(&heads.projector, &w.projector, &f2)?;
    let (p2, cp2) = forward(&heads.predictor, &w.predictor, &z2)?;

    let objective = simsiam_objective(&p1, &p2, &z1, &z2)?;

    let mut grads = SslGradients {
        encoder: w.encoder.zeros_like(),
        projector: w.projector.zeros_like(),
        predictor: w.predictor.zeros_like(),
    };
    for (grad_p, cp, cz, ce) in [
        (&objective.grad_p1, &cp1, &cz1, &ce1),
        (&objective.grad_p2, &cp2, &cz2, &ce2),
    ] {
        let gp = backward(cp, &w.predictor, grad_p)?;
        let gz = backward(cz, &w.projector, &gp.input)?;
        let ge = backward(ce, &w.encoder, &gz.input)?;
        grads.predictor.add_scaled(&gp.params, 1.0)?;
        grads.projector.add_scaled(&gz.params, 1.0)?;
        grads.encoder.add_scaled(&ge.params, 1.0)?;
    }
    Ok(SimSiamOutput {
        loss: objective.loss,
        grads,
        z1,
        z2,
        degenerate_rows: objective.degenerate_rows,
    })
}

#[derive(Clone, Debug)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_q: Tensor,
    pub grad_k: Tensor,
}

fn normalize_rows(x: &Tensor, what: &str) -> Result<(Tensor, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::InvalidArgument(format!("{what} row {i} has zero norm")));
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// Gradient through `x̂ = x / ‖x‖`, row by row.
fn unnormalize_grad(g_hat: &Tensor, x_hat: &Tensor, norms: &[f64]) -> Tensor {
    let mut g = g_hat.clone();
    for (i, &n) in norms.iter().enumerate() {
        let proj: f64 = g_hat.row(i).iter().zip(x_hat.row(i)).map(|(a, b)| a * b).sum();
        for (gv, &xv) in g.row_mut(i).iter_mut().zip(x_hat.row(i)) {
            *gv = (*gv - proj * xv) / n;
        }
    }
    g
}

/// InfoNCE with in-batch negatives: row `i` of `k_pos` is the positive key
/// for query `i`, every other row a negative. Rows are ℓ2-normalised first.
pub fn info_nce(q: &Tensor, k_pos: &Tensor, temperature: f64) -> Result<InfoNce> {
    if q.shape() != k_pos.shape() || q.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "q {:?} and k {:?} must be equal [B, D] matrices",
            q.shape(),
            k_pos.shape()
        )));
    }
    let b = q.rows();
    if b < 2 {
        return Err(Error::InvalidArgument(
            "InfoNCE needs at least two rows for in-batch negatives".into(),
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let (qh, qn) = normalize_rows(q, "query")?;
    let (kh, kn) = normalize_rows(k_pos, "key")?;
    let mut logits = Tensor::zeros(vec![b, b]);
    for i in 0..b {
        for j in 0..b {
            let s: f64 = qh.row(i).iter().zip(kh.row(j)).map(|(a, b)| a * b).sum();
            logits.row_mut(i)[j] = s / temperature;
        }
    }
    let labels: Vec<usize> = (0..b).collect();
    let ce = cross_entropy(&logits, &labels)?;
    let d = q.row_len();
    let mut gq_hat = Tensor::zeros(vec![b, d]);
    let mut gk_hat = Tensor::zeros(vec![b, d]);
    for i in 0..b {
        for j in 0..b {
            let g = ce.grad.row(i)[j] / temperature;
            if g == 0.0 {
                continue;
            }
            for t in 0..d {
                gq_hat.row_mut(i)[t] += g * kh.row(j)[t];
                gk_hat.row_mut(j)[t] += g * qh.row(i)[t];
            }
        }
    }
    Ok(InfoNce {
        loss: ce.loss,
        grad_q: unnormalize_grad(&gq_hat, &qh, &qn),
        grad_k: unnormalize_grad(&gk_hat, &kh, &kn),
    })
}

/// `½ InfoNCE(a, b) + ½ InfoNCE(b, a)`; returns gradients for `a` and `b`.
pub fn info_nce_symmetric(a: &Tensor, b: &Tensor, temperature: f64) -> Result<(f64, Tensor, Tensor)> {
    let ab = info_nce(a, b, temperature)?;
    let ba = info_nce(b, a, temperature)?;
    let mut ga = ab.grad_q;
    let mut gb = ab.grad_k;
    for (g, &h) in ga.data_mut().iter_mut().zip(ba.grad_k.data()) {
        *g = 0.5 * (*g + h);
    }
    for (g, &h) in gb.data_mut().iter_mut().zip(ba.grad_q.data()) {
        *g = 0.5 * (*g + h);
    }
    Ok((0.5 * (ab.loss + ba.loss), ga, gb))
}
