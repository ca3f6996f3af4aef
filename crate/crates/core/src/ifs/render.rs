use crate::{Error, Result};

/// Row-major single-channel canvas with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayCanvas {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl GrayCanvas {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Binary rendering: every visited pixel is set to 1.
pub fn render(points: &[[f64; 2]], width: usize, height: usize) -> Result<GrayCanvas> {
    render_weighted(points, width, height, 1.0)
}

/// Maps the bounding box of `points` onto the central 90% of the canvas and
/// adds `hit` per point, clamping to `[0, 1]`.
///
/// An axis with zero extent is drawn on the centre row/column, so identical
/// points collapse to the single centre pixel.
pub fn render_weighted(points: &[[f64; 2]], width: usize, height: usize, hit: f64) -> Result<GrayCanvas> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("cannot render an empty point set".into()));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("canvas must be non-empty".into()));
    }
    if !(hit > 0.0) {
        return Err(Error::InvalidArgument("hit intensity must be positive".into()));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for d in 0..2 {
            if !p[d].is_finite() {
                return Err(Error::NonFinite {
                    context: "render input".into(),
                });
            }
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let dims = [width, height];
    let to_pixel = |v: f64, d: usize| -> usize {
        let extent = hi[d] - lo[d];
        let size = dims[d];
        if extent <= 0.0 {
            return size / 2;
        }
        let pos = size as f64 * (0.05 + 0.9 * (v - lo[d]) / extent);
        (pos.floor().max(0.0) as usize).min(size - 1)
    };
    let mut values = vec![0.0; width * height];
    for p in points {
        let (x, y) = (to_pixel(p[0], 0), to_pixel(p[1], 1));
        let cell = &mut values[y * width + x];
        *cell = (*cell + hit).min(1.0);
    }
    Ok(GrayCanvas { width, height, values })
}
