use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::image::{hue_to_rgb, RgbImage};
use super::{iterate_ifs, render, CodePool};
use crate::seed::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CodesPerImage {
    Fixed { count: usize },
    Uniform { min: usize, max: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Uniform over positions that keep the fractal fully inside.
    Random,
    /// Always centred.
    Centered,
}

/// Image-level augmentation applied to each composite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    /// Aspect-ratio range of the crop.
    pub crop_ratio: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub flip_prob: f64,
}

impl Augmentation {
    pub fn standard() -> Self {
        Augmentation {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            flip_prob: 0.5,
        }
    }

    pub fn none() -> Self {
        Augmentation {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            flip_prob: 0.0,
        }
    }

    fn apply(&self, img: &RgbImage, rng: &mut Rng) -> RgbImage {
        let (w, h) = (img.width, img.height);
        let area = rng.random_range(self.crop_scale.0..=self.crop_scale.1);
        let log_ratio = rng.random_range(self.crop_ratio.0.ln()..=self.crop_ratio.1.ln());
        let ratio = log_ratio.exp();
        let cw = ((area * ratio).sqrt() * w as f64).round().clamp(1.0, w as f64) as usize;
        let ch = ((area / ratio).sqrt() * h as f64).round().clamp(1.0, h as f64) as usize;
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        let mut out = img.resized_crop(x0, y0, cw, ch);
        if rng.random_bool(self.flip_prob) {
            out.flip_horizontal();
        }
        let jitter = |rng: &mut Rng, s: f64| rng.random_range(1.0 - s..=1.0 + s) as f32;
        let (b, c, s) = (
            jitter(rng, self.brightness),
            jitter(rng, self.contrast),
            jitter(rng, self.saturation),
        );
        out.scale_brightness(b);
        out.scale_contrast(c);
        out.scale_saturation(s);
        out
    }
}

/// Pair synthesis parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpsParams {
    pub width: usize,
    pub height: usize,
    pub n_iters: usize,
    pub codes: CodesPerImage,
    /// Fractal side as a fraction of the canvas side.
    pub scale_range: (f64, f64),
    /// Colour each fractal with a random hue; white otherwise.
    pub random_hue: bool,
    pub fractal_flip_prob: f64,
    pub placement: Placement,
    /// Iterate each code separately for the two sides. When false both
    /// sides reuse one point cloud per code.
    pub independent_realizations: bool,
    pub augment: Augmentation,
}

impl FpsParams {
    /// Square canvas with two codes per image and 1K iterations.
    pub fn square(side: usize) -> Self {
        FpsParams {
            width: side,
            height: side,
            n_iters: 1_000,
            codes: CodesPerImage::Fixed { count: 2 },
            scale_range: (0.5, 1.0),
            random_hue: true,
            fractal_flip_prob: 0.5,
            placement: Placement::Random,
            independent_realizations: true,
            augment: Augmentation::standard(),
        }
    }

    /// 32×32, I = 2, 1K iterations.
    pub fn small_images() -> Self {
        FpsParams::square(32)
    }

    /// 224×224, I ~ U{2..5}, 100K iterations.
    pub fn large_images() -> Self {
        FpsParams {
            n_iters: 100_000,
            codes: CodesPerImage::Uniform { min: 2, max: 5 },
            ..FpsParams::square(224)
        }
    }

    /// Every random transform switched off: both sides come out identical.
    pub fn degenerate(side: usize) -> Self {
        FpsParams {
            scale_range: (1.0, 1.0),
            random_hue: false,
            fractal_flip_prob: 0.0,
            placement: Placement::Centered,
            independent_realizations: false,
            augment: Augmentation::none(),
            ..FpsParams::square(side)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.width == 0 || self.height == 0 || self.n_iters == 0 {
            return bad("FPS canvas and iteration count must be positive");
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("scale range must satisfy 0 < lo ≤ hi ≤ 1");
        }
        let a = &self.augment;
        if !(a.crop_scale.0 > 0.0 && a.crop_scale.0 <= a.crop_scale.1 && a.crop_scale.1 <= 1.0)
            || !(a.crop_ratio.0 > 0.0 && a.crop_ratio.0 <= a.crop_ratio.1)
        {
            return bad("invalid crop parameters");
        }
        if [a.brightness, a.contrast, a.saturation]
            .iter()
            .any(|s| !(0.0..1.0).contains(s))
        {
            return bad("jitter strengths must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&a.flip_prob) || !(0.0..=1.0).contains(&self.fractal_flip_prob) {
            return bad("flip probabilities must lie in [0, 1]");
        }
        match self.codes {
            CodesPerImage::Fixed { count: 0 } => bad("need at least one code per image"),
            CodesPerImage::Uniform { min, max } if min == 0 || min > max => bad("invalid code count range"),
            _ => Ok(()),
        }
    }
}

/// Two composites painted from the same code set.
#[derive(Clone, Debug, PartialEq)]
pub struct FpsPair {
    pub left: RgbImage,
    pub right: RgbImage,
    pub code_ids: Vec<u64>,
}

fn paint(canvas: &mut RgbImage, points: &[[f64; 2]], params: &FpsParams, rng: &mut Rng) -> Result<()> {
    let scale = rng.random_range(params.scale_range.0..=params.scale_range.1);
    let tw = ((scale * params.width as f64).round() as usize).clamp(1, params.width);
    let th = ((scale * params.height as f64).round() as usize).clamp(1, params.height);
    let gray = render(points, tw, th)?;
    let color = if params.random_hue {
        hue_to_rgb(rng.random::<f64>())
    } else {
        [1.0; 3]
    };
    let mut tile = RgbImage::black(tw, th);
    for (px, &v) in tile.data.chunks_exact_mut(3).zip(&gray.values) {
        for c in 0..3 {
            px[c] = color[c] * v as f32;
        }
    }
    if rng.random_bool(params.fractal_flip_prob) {
        tile.flip_horizontal();
    }
    let (x, y) = match params.placement {
        Placement::Random => (
            rng.random_range(0..=params.width - tw),
            rng.random_range(0..=params.height - th),
        ),
        Placement::Centered => ((params.width - tw) / 2, (params.height - th) / 2),
    };
    canvas.paste_max(&tile, x, y);
    Ok(())
}

/// Builds one positive pair from `I` distinct codes drawn from `pool`.
pub fn compose_fps_pair(pool: &CodePool, params: &FpsParams, rng: &mut Rng) -> Result<FpsPair> {
    params.validate()?;
    if pool.is_empty() {
        return Err(Error::InvalidArgument("code pool is empty".into()));
    }
    let count = match params.codes {
        CodesPerImage::Fixed { count } => count,
        CodesPerImage::Uniform { min, max } => rng.random_range(min..=max),
    };
    if count > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "need {count} distinct codes, pool has {}",
            pool.len()
        )));
    }
    let picks = index::sample(rng, pool.len(), count).into_vec();
    let mut sides = [
        RgbImage::black(params.width, params.height),
        RgbImage::black(params.width, params.height),
    ];
    let mut painted: [Vec<u64>; 2] = [Vec::new(), Vec::new()];
    for &pick in &picks {
        let code = &pool.codes[pick];
        let shared = if params.independent_realizations {
            None
        } else {
            Some(iterate_ifs(code, params.n_iters, rng)?)
        };
        for (side, ids) in sides.iter_mut().zip(painted.iter_mut()) {
            let points = match &shared {
                Some(p) => p.clone(),
                None => iterate_ifs(code, params.n_iters, rng)?,
            };
            paint(side, &points, params, rng)?;
            ids.push(code.id);
        }
    }
    if painted[0] != painted[1] {
        return Err(Error::InvalidArgument(
            "pair audit failed: sides painted from different codes".into(),
        ));
    }
    let [left, right] = sides;
    let left = params.augment.apply(&left, rng);
    let right = params.augment.apply(&right, rng);
    let [code_ids, _] = painted;
    Ok(FpsPair { left, right, code_ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ifs::SamplingConfig;
    use crate::seed::rng_from;

    fn pool() -> CodePool {
        CodePool::generate(3, 16, &SamplingConfig::default()).unwrap()
    }

    #[test]
    fn small_image_pair_has_two_codes() {
        let pair = compose_fps_pair(&pool(), &FpsParams::small_images(), &mut rng_from(1)).unwrap();
        assert_eq!(pair.code_ids.len(), 2);
        assert_ne!(pair.code_ids[0], pair.code_ids[1]);
        assert_eq!((pair.left.width, pair.left.height), (32, 32));
        assert_eq!(pair.left.data.len(), pair.right.data.len());
        assert!(pair.left.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(pair.left.data.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn degenerate_params_give_identical_sides() {
        let pool = pool();
        for seed in 0..5 {
            let pair = compose_fps_pair(&pool, &FpsParams::degenerate(24), &mut rng_from(seed)).unwrap();
            assert_eq!(pair.left, pair.right);
        }
    }

    #[test]
    fn default_params_give_different_sides() {
        let pair = compose_fps_pair(&pool(), &FpsParams::square(16), &mut rng_from(2)).unwrap();
        assert_ne!(pair.left, pair.right);
    }

    #[test]
    fn uniform_code_count_range() {
        let params = FpsParams {
            codes: CodesPerImage::Uniform { min: 2, max: 5 },
            n_iters: 200,
            ..FpsParams::square(16)
        };
        let pool = pool();
        let mut rng = rng_from(4);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..60 {
            let p = compose_fps_pair(&pool, &params, &mut rng).unwrap();
            let distinct: std::collections::BTreeSet<_> = p.code_ids.iter().collect();
            assert_eq!(distinct.len(), p.code_ids.len());
            seen.insert(p.code_ids.len());
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![2, 3, 4, 5]);
    }

    #[test]
    fn too_few_codes_rejected() {
        let small = CodePool::generate(1, 1, &SamplingConfig::default()).unwrap();
        assert!(compose_fps_pair(&small, &FpsParams::square(8), &mut rng_from(0)).is_err());
        let empty = CodePool {
            master_seed: 0,
            codes: vec![],
        };
        assert!(compose_fps_pair(&empty, &FpsParams::square(8), &mut rng_from(0)).is_err());
    }
}
