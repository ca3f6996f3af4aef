/// Channel-last RGB image, `f32` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

impl RgbImage {
    pub fn black(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * 3;
        &mut self.data[i..i + 3]
    }

    /// Pastes `tile` with its top-left corner at `(x, y)`, keeping the
    /// per-channel maximum. Parts outside the canvas are clipped.
    pub fn paste_max(&mut self, tile: &RgbImage, x: usize, y: usize) {
        for ty in 0..tile.height {
            let cy = y + ty;
            if cy >= self.height {
                break;
            }
            for tx in 0..tile.width {
                let cx = x + tx;
                if cx >= self.width {
                    break;
                }
                let src = tile.pixel(tx, ty);
                for (d, s) in self.pixel_mut(cx, cy).iter_mut().zip(src) {
                    *d = d.max(s);
                }
            }
        }
    }

    pub fn flip_horizontal(&mut self) {
        let w = self.width;
        for y in 0..self.height {
            for x in 0..w / 2 {
                for c in 0..3 {
                    self.data.swap((y * w + x) * 3 + c, (y * w + (w - 1 - x)) * 3 + c);
                }
            }
        }
    }

    /// Bilinear resample of the crop `[x0, x0+cw) × [y0, y0+ch)` back to the
    /// full image size. A full-image crop is returned unchanged.
    pub fn resized_crop(&self, x0: usize, y0: usize, cw: usize, ch: usize) -> RgbImage {
        let (w, h) = (self.width, self.height);
        if x0 == 0 && y0 == 0 && cw == w && ch == h {
            return self.clone();
        }
        let mut out = RgbImage::black(w, h);
        let sx = cw as f64 / w as f64;
        let sy = ch as f64 / h as f64;
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
            let y_lo = fy.floor() as usize;
            let y_hi = (y_lo + 1).min(ch - 1);
            let ty = (fy - y_lo as f64) as f32;
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
                let x_lo = fx.floor() as usize;
                let x_hi = (x_lo + 1).min(cw - 1);
                let tx = (fx - x_lo as f64) as f32;
                let p00 = self.pixel(x0 + x_lo, y0 + y_lo);
                let p01 = self.pixel(x0 + x_hi, y0 + y_lo);
                let p10 = self.pixel(x0 + x_lo, y0 + y_hi);
                let p11 = self.pixel(x0 + x_hi, y0 + y_hi);
                let dst = out.pixel_mut(x, y);
                for c in 0..3 {
                    let top = p00[c] * (1.0 - tx) + p01[c] * tx;
                    let bottom = p10[c] * (1.0 - tx) + p11[c] * tx;
                    dst[c] = top * (1.0 - ty) + bottom * ty;
                }
            }
        }
        out
    }

    pub fn scale_brightness(&mut self, factor: f32) {
        if factor == 1.0 {
            return;
        }
        for v in &mut self.data {
            *v = (*v * factor).clamp(0.0, 1.0);
        }
    }

    /// Blends towards the mean luminance.
    pub fn scale_contrast(&mut self, factor: f32) {
        if factor == 1.0 {
            return;
        }
        let n = (self.width * self.height) as f32;
        let mean = self
            .data
            .chunks_exact(3)
            .map(|p| p[0] * LUMA[0] + p[1] * LUMA[1] + p[2] * LUMA[2])
            .sum::<f32>()
            / n;
        for v in &mut self.data {
            *v = ((*v - mean) * factor + mean).clamp(0.0, 1.0);
        }
    }

    /// Blends each pixel towards its own luminance.
    pub fn scale_saturation(&mut self, factor: f32) {
        if factor == 1.0 {
            return;
        }
        for p in self.data.chunks_exact_mut(3) {
            let gray = p[0] * LUMA[0] + p[1] * LUMA[1] + p[2] * LUMA[2];
            for v in p.iter_mut() {
                *v = ((*v - gray) * factor + gray).clamp(0.0, 1.0);
            }
        }
    }

    /// Channel-first `f64` copy, optionally normalised per channel.
    pub fn to_chw(&self, mean: &[f64; 3], std: &[f64; 3]) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (i, p) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = (p[c] as f64 - mean[c]) / std[c];
            }
        }
        out
    }
}

/// Fully saturated colour with hue `h ∈ [0, 1)`.
pub fn hue_to_rgb(h: f64) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as u32;
    let f = (h6 - h6.floor()) as f32;
    match sector {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}
