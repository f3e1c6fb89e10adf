//! Grayscale image values in [0, 1] with bilinear resampling.

use crate::error::{Error, Result};

/// Row-major grayscale image, values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Copy the inclusive pixel rectangle into a new image.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<GrayImage> {
        if x1 >= self.width || y1 >= self.height || x0 > x1 || y0 > y1 {
            return Err(Error::ShapeMismatch(format!(
                "crop ({x0},{y0})-({x1},{y1}) outside {}x{}",
                self.width, self.height
            )));
        }
        let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
        let mut out = GrayImage::new(w, h);
        for y in 0..h {
            let src = (y0 + y) * self.width + x0;
            out.data[y * w..(y + 1) * w].copy_from_slice(&self.data[src..src + w]);
        }
        Ok(out)
    }
}

/// Bilinear resampling with corner-aligned sampling and no anti-alias
/// prefilter. Sample positions that land exactly on the source grid
/// reproduce source pixels bit-for-bit.
pub fn resize_bilinear(src: &GrayImage, target_w: usize, target_h: usize) -> Result<GrayImage> {
    if target_w == 0 || target_h == 0 || src.width == 0 || src.height == 0 {
        return Err(Error::InvalidConfig("resize to or from zero extent".into()));
    }
    if target_w == src.width && target_h == src.height {
        return Ok(src.clone());
    }
    let mut out = GrayImage::new(target_w, target_h);
    let sx = if target_w > 1 { (src.width - 1) as f64 / (target_w - 1) as f64 } else { 0.0 };
    let sy = if target_h > 1 { (src.height - 1) as f64 / (target_h - 1) as f64 } else { 0.0 };
    for oy in 0..target_h {
        let fy = oy as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src.height - 1);
        let wy = fy - y0 as f64;
        for ox in 0..target_w {
            let fx = ox as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src.width - 1);
            let wx = fx - x0 as f64;
            let v = if wx == 0.0 && wy == 0.0 {
                src.get(x0, y0)
            } else {
                let top = src.get(x0, y0) * (1.0 - wx) + src.get(x1, y0) * wx;
                let bot = src.get(x0, y1) * (1.0 - wx) + src.get(x1, y1) * wx;
                top * (1.0 - wy) + bot * wy
            };
            out.set(ox, oy, v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_extents_are_bit_identical() {
        let img = GrayImage::from_data(3, 2, vec![0.1, 0.5, 0.9, 0.2, 0.4, 0.6]).unwrap();
        let out = resize_bilinear(&img, 3, 2).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = GrayImage::from_data(4, 4, vec![0.37; 16]).unwrap();
        for &(w, h) in &[(2, 2), (7, 5), (9, 9), (1, 3)] {
            let out = resize_bilinear(&img, w, h).unwrap();
            assert!(out.data.iter().all(|&v| (v - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn two_by_two_to_four_by_four_matches_closed_form() {
        // Corner-aligned 2x2 -> 4x4: sample positions are k/3 of the way
        // across, so weights are multiples of 1/3.
        let img = GrayImage::from_data(2, 2, vec![0.0, 3.0, 6.0, 9.0]).unwrap();
        let out = resize_bilinear(&img, 4, 4).unwrap();
        let expected: Vec<f64> = {
            let mut e = Vec::new();
            for oy in 0..4 {
                for ox in 0..4 {
                    let fx = ox as f64 / 3.0;
                    let fy = oy as f64 / 3.0;
                    // bilinear on the 2x2 grid, evaluated by hand:
                    // v = (1-fy)*((1-fx)*0 + fx*3) + fy*((1-fx)*6 + fx*9)
                    e.push((1.0 - fy) * (fx * 3.0) + fy * ((1.0 - fx) * 6.0 + fx * 9.0));
                }
            }
            e
        };
        for (got, want) in out.data.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn downsample_hits_source_grid_points_exactly() {
        // 5 -> 3 puts samples at source columns 0, 2, 4.
        let img = GrayImage::from_data(
            5,
            1,
            vec![0.11, 0.22, 0.33, 0.44, 0.55],
        )
        .unwrap();
        let out = resize_bilinear(&img, 3, 1).unwrap();
        assert_eq!(out.data, vec![0.11, 0.33, 0.55]);
    }

    #[test]
    fn zero_extent_is_rejected() {
        let img = GrayImage::new(2, 2);
        assert!(resize_bilinear(&img, 0, 2).is_err());
    }

    #[test]
    fn crop_extracts_inclusive_rectangle() {
        let img = GrayImage::from_data(4, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        let c = img.crop(1, 1, 2, 2).unwrap();
        assert_eq!((c.width, c.height), (2, 2));
        assert_eq!(c.data, vec![5.0, 6.0, 9.0, 10.0]);
    }
}
