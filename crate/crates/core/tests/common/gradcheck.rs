use super::*;
use fedpt::fedsim::proximal_term;
use fedpt::nn::{backward, cross_entropy, forward, Layer, ModelSpec, ModelWeights, Tensor};
use fedpt::seed::rng_from;
use fedpt::ssl::{
    info_nce, negative_cosine, simsiam_loss, PairBatch, ProjectorPredictor, SimSiamModel, SimSiamWeights,
};

/// Cross-entropy through `spec`: worst relative error over parameters and inputs.
fn check_model(spec: &ModelSpec, batch: usize, seed: u64) -> f64 {
    let w = spec.init(&mut rng_from(seed));
    let mut shape = vec![batch];
    shape.extend_from_slice(spec.input_shape());
    let x = random_tensor(shape, seed + 1);
    let labels: Vec<usize> = (0..batch).map(|i| i % spec.classes()).collect();
    let loss = |w: &ModelWeights, x: &Tensor| {
        let (logits, _) = forward(spec, w, x).unwrap();
        cross_entropy(&logits, &labels).unwrap().loss
    };
    let (logits, cache) = forward(spec, &w, &x).unwrap();
    let ce = cross_entropy(&logits, &labels).unwrap();
    let g = backward(&cache, &w, &ce.grad).unwrap();
    let param_err = check_weights(&w, &g.params, |w| loss(w, &x));
    let input_err = check_tensor(&x, &g.input, |x| loss(&w, x));
    param_err.max(input_err)
}

pub fn dense() -> f64 {
    (0..3)
        .map(|seed| check_model(&ModelSpec::mlp(5, &[4], 3).unwrap(), 4, seed * 10))
        .fold(0.0, f64::max)
}

pub fn conv() -> f64 {
    let spec = ModelSpec::new(
        vec![2, 5, 4],
        vec![Layer::Conv3x3 { out_channels: 3 }, Layer::Dense { out: 3 }],
    )
    .unwrap();
    check_model(&spec, 3, 7)
}

pub fn pooling() -> f64 {
    let spec = ModelSpec::new(
        vec![2, 6, 6],
        vec![
            Layer::Conv3x3 { out_channels: 3 },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Dense { out: 4 },
        ],
    )
    .unwrap();
    check_model(&spec, 3, 11)
}

pub fn small_cnn() -> f64 {
    check_model(&ModelSpec::small_cnn(3, 8, 4).unwrap(), 2, 3)
}

pub fn cross_entropy_loss() -> f64 {
    let logits = random_tensor(vec![4, 3], 21).map(|v| 3.0 * v);
    let labels = [0, 2, 1, 2];
    let ce = cross_entropy(&logits, &labels).unwrap();
    check_tensor(&logits, &ce.grad, |l| cross_entropy(l, &labels).unwrap().loss)
}

pub fn negative_cosine_loss() -> f64 {
    let p = random_tensor(vec![4, 8], 31);
    let z = random_tensor(vec![4, 8], 32);
    let nc = negative_cosine(&p, &z).unwrap();
    check_tensor(&p, &nc.grad_p, |p| negative_cosine(p, &z).unwrap().loss)
}

pub fn info_nce_loss() -> f64 {
    let q = random_tensor(vec![5, 4], 41);
    let k = random_tensor(vec![5, 4], 42);
    [0.1, 0.5, 1.0]
        .into_iter()
        .map(|tau| {
            let out = info_nce(&q, &k, tau).unwrap();
            let eq = check_tensor(&q, &out.grad_q, |q| info_nce(q, &k, tau).unwrap().loss);
            let ek = check_tensor(&k, &out.grad_k, |k| info_nce(&q, k, tau).unwrap().loss);
            eq.max(ek)
        })
        .fold(0.0, f64::max)
}

/// Parameter gradients of the SimSiam loss against a loss in which both
/// projections are frozen constants.
pub fn simsiam_detached() -> f64 {
    let enc = ModelSpec::mlp(6, &[5], 4).unwrap();
    let model = SimSiamModel::new(enc, ProjectorPredictor::mlp(4, 6, 5, 3).unwrap()).unwrap();
    let w = model.init(&mut rng_from(1), &mut rng_from(2));
    let batch = PairBatch::new(random_tensor(vec![3, 6], 3), random_tensor(vec![3, 6], 4)).unwrap();
    let out = simsiam_loss(&batch, &model, &w).unwrap();
    let (z1, z2) = (out.z1.clone(), out.z2.clone());
    let detached = |w: &SimSiamWeights| {
        let p = |x: &Tensor| {
            let (f, _) = forward(&model.encoder, &w.encoder, x).unwrap();
            let (z, _) = forward(&model.heads.projector, &w.projector, &f).unwrap();
            forward(&model.heads.predictor, &w.predictor, &z).unwrap().0
        };
        0.5 * negative_cosine(&p(&batch.first), &z2).unwrap().loss
            + 0.5 * negative_cosine(&p(&batch.second), &z1).unwrap().loss
    };
    let e_enc = check_weights(&w.encoder, &out.grads.encoder, |e| {
        detached(&SimSiamWeights {
            encoder: e.clone(),
            ..w.clone()
        })
    });
    let e_proj = check_weights(&w.projector, &out.grads.projector, |p| {
        detached(&SimSiamWeights {
            projector: p.clone(),
            ..w.clone()
        })
    });
    let e_pred = check_weights(&w.predictor, &out.grads.predictor, |p| {
        detached(&SimSiamWeights {
            predictor: p.clone(),
            ..w.clone()
        })
    });
    e_enc.max(e_proj).max(e_pred)
}

pub fn proximal() -> f64 {
    let spec = ModelSpec::mlp(3, &[4], 2).unwrap();
    let w = spec.init(&mut rng_from(5));
    let anchor = spec.init(&mut rng_from(6));
    [0.01, 1.0, 100.0]
        .into_iter()
        .map(|mu| {
            let (_, g) = proximal_term(&w, &anchor, mu).unwrap();
            check_weights(&w, &g, |v| proximal_term(v, &anchor, mu).unwrap().0)
        })
        .fold(0.0, f64::max)
}

pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("dense", dense()),
        ("conv", conv()),
        ("pooling", pooling()),
        ("small cnn", small_cnn()),
        ("cross-entropy", cross_entropy_loss()),
        ("negative cosine", negative_cosine_loss()),
        ("InfoNCE", info_nce_loss()),
        ("SimSiam", simsiam_detached()),
        ("proximal", proximal()),
    ]
}
