//! Synthetic phantom corpus with exactly known ground truth.
//!
//! Each phantom is a grayscale scene of two blurred lung ellipses on a dark
//! background. Class labels plant lesions inside the lungs (tiny bright dots
//! for the small-lesion class, larger blobs for the rest) except for one
//! designated class whose signal is a background brightening that grows
//! toward the image border, i.e. deliberately outside the lung region.
//! Optional corruptions mirror real-acquisition artifacts: rigid scene
//! misalignment and bright irrelevant objects outside the lungs.

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::labels::{LabelVector, NUM_CLASSES, OUT_OF_LUNG_CLASS, SMALL_LESION_CLASS};
use crate::lrg::{label_components, BinaryMask, BoundingBox};
use crate::rng::{derive_seed, Rng};

/// Lesion diameter range in pixels at the generated extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionRange {
    pub min_px: usize,
    pub max_px: usize,
}

/// Generator configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub extent: usize,
    pub prevalence: [f64; NUM_CLASSES],
    pub lesion_size: [LesionRange; NUM_CLASSES],
    pub misalignment_prob: f64,
    pub object_prob: f64,
    pub noise_level: f64,
    pub patient_count: usize,
    pub images_per_patient: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let mut spec = PhantomSpec {
            extent: 256,
            prevalence: [0.2; NUM_CLASSES],
            lesion_size: [LesionRange { min_px: 20, max_px: 60 }; NUM_CLASSES],
            misalignment_prob: 0.15,
            object_prob: 0.2,
            noise_level: 0.02,
            patient_count: 50,
            images_per_patient: 4,
        };
        spec.lesion_size[SMALL_LESION_CLASS] = LesionRange { min_px: 2, max_px: 5 };
        // The out-of-lung class draws no lesion; the range is unused.
        spec.lesion_size[OUT_OF_LUNG_CLASS] = LesionRange { min_px: 1, max_px: 1 };
        spec.spread_large_lesion_bands(20, 60);
        spec
    }
}

/// Classes that plant sized lesions inside the lungs, in canonical order.
pub fn large_lesion_classes() -> impl Iterator<Item = usize> {
    (0..NUM_CLASSES).filter(|&c| c != SMALL_LESION_CLASS && c != OUT_OF_LUNG_CLASS)
}

impl PhantomSpec {
    /// Assign each large-lesion class its own narrow size band inside
    /// [min_px, max_px]. Classes are only tellable apart by their lesion
    /// signature, so the bands are what makes the corpus learnable.
    pub fn spread_large_lesion_bands(&mut self, min_px: usize, max_px: usize) {
        let count = large_lesion_classes().count();
        let span = max_px.saturating_sub(min_px);
        let width = (span / count).max(2);
        for (j, c) in large_lesion_classes().enumerate() {
            let lo = min_px
                + ((j as f64) * (span.saturating_sub(width)) as f64 / (count - 1) as f64).round()
                    as usize;
            self.lesion_size[c] = LesionRange { min_px: lo, max_px: (lo + width).min(max_px) };
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent < 32 {
            return Err(Error::InvalidConfig("phantom extent must be >= 32".into()));
        }
        for (c, &p) in self.prevalence.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("prevalence[{c}] = {p} outside [0,1]")));
            }
        }
        for (c, r) in self.lesion_size.iter().enumerate() {
            if r.min_px == 0 || r.min_px > r.max_px {
                return Err(Error::InvalidConfig(format!(
                    "lesion_size[{c}] = {}..{} invalid",
                    r.min_px, r.max_px
                )));
            }
        }
        let small_hi = self.lesion_size[SMALL_LESION_CLASS].max_px;
        let large_lo = (0..NUM_CLASSES)
            .filter(|&c| c != SMALL_LESION_CLASS && c != OUT_OF_LUNG_CLASS)
            .map(|c| self.lesion_size[c].min_px)
            .min()
            .unwrap();
        if small_hi >= large_lo {
            return Err(Error::InvalidConfig(format!(
                "small-lesion upper bound {small_hi} must be below large-lesion lower bound {large_lo}"
            )));
        }
        for (name, p) in [
            ("misalignment_prob", self.misalignment_prob),
            ("object_prob", self.object_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} outside [0,1]")));
            }
        }
        if self.noise_level < 0.0 {
            return Err(Error::InvalidConfig("noise_level must be >= 0".into()));
        }
        if self.patient_count == 0 || self.images_per_patient == 0 {
            return Err(Error::InvalidConfig("corpus must contain at least one image".into()));
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        self.patient_count * self.images_per_patient
    }
}

/// Ground-truth box of one planted lesion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionBox {
    pub class: usize,
    pub bbox: BoundingBox,
}

/// One generated phantom with its full ground truth.
#[derive(Clone, Debug)]
pub struct PhantomRecord {
    pub image_id: String,
    pub patient_id: String,
    pub image: GrayImage,
    pub lung_mask: BinaryMask,
    pub labels: LabelVector,
    pub lesion_boxes: Vec<LesionBox>,
    pub misaligned: bool,
    pub has_object: bool,
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (sin, cos) = self.theta.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / self.a) * (u / self.a) + (v / self.b) * (v / self.b) <= 1.0
    }
}

const BACKGROUND: f64 = 0.15;
const LUNG_VALUE: f64 = 0.55;
const OBJECT_VALUE: f64 = 0.92;

/// Class-specific lesion brightness: the small-lesion class stays high so
/// its dots survive resampling; large classes get rising amplitude bands
/// that, together with the size bands, make every class identifiable.
fn lesion_amplitude(class: usize, rng: &mut Rng) -> f64 {
    if class == SMALL_LESION_CLASS {
        rng.range(0.42, 0.5)
    } else {
        let j = large_lesion_classes().position(|c| c == class).unwrap();
        0.26 + 0.012 * j as f64 + rng.range(-0.02, 0.02)
    }
}

fn box_blur_3x3(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width, img.height);
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        s += img.get(nx as usize, ny as usize);
                        n += 1.0;
                    }
                }
            }
            out.set(x, y, s / n);
        }
    }
    out
}

/// Scene geometry for one record: two lung ellipses after any misalignment.
fn sample_lungs(rng: &mut Rng, extent: f64, misaligned: bool) -> ([Ellipse; 2], f64, (f64, f64)) {
    let (theta, shift) = if misaligned {
        let t = rng.range(3.0, 10.0).to_radians() * if rng.chance(0.5) { 1.0 } else { -1.0 };
        let sx = rng.range(0.01, 0.06) * extent * if rng.chance(0.5) { 1.0 } else { -1.0 };
        let sy = rng.range(0.01, 0.06) * extent * if rng.chance(0.5) { 1.0 } else { -1.0 };
        (t, (sx, sy))
    } else {
        (0.0, (0.0, 0.0))
    };
    let (icx, icy) = (extent / 2.0, extent / 2.0);
    let mut lungs = [Ellipse { cx: 0.0, cy: 0.0, a: 0.0, b: 0.0, theta }; 2];
    for (i, base_x) in [(0usize, 0.31), (1usize, 0.69)] {
        let cx0 = (base_x + rng.range(-0.005, 0.005)) * extent;
        let cy0 = (0.48 + rng.range(-0.01, 0.01)) * extent;
        // Rigid transform of the whole scene about the image center.
        let (dx, dy) = (cx0 - icx, cy0 - icy);
        let (sin, cos) = theta.sin_cos();
        lungs[i] = Ellipse {
            cx: icx + dx * cos - dy * sin + shift.0,
            cy: icy + dx * sin + dy * cos + shift.1,
            a: rng.range(0.11, 0.145) * extent,
            b: rng.range(0.20, 0.24) * extent,
            theta,
        };
    }
    (lungs, theta, shift)
}

fn rasterize_mask(lungs: &[Ellipse; 2], extent: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(extent, extent);
    for y in 0..extent {
        for x in 0..extent {
            let (fx, fy) = (x as f64, y as f64);
            if lungs[0].contains(fx, fy) || lungs[1].contains(fx, fy) {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Generate the record at `index` of the corpus defined by (spec, seed).
pub fn gen_record(spec: &PhantomSpec, seed: u64, index: usize) -> PhantomRecord {
    let extent = spec.extent;
    let ext_f = extent as f64;
    let patient = index / spec.images_per_patient;

    // Geometry retries keep the mask at exactly two components.
    let (lungs, mask, mut rng, misaligned) = {
        let mut attempt = 0u64;
        loop {
            let mut rng = Rng::new(derive_seed(seed, (index as u64) << 8 | attempt));
            let misaligned = rng.chance(spec.misalignment_prob);
            let (lungs, _, _) = sample_lungs(&mut rng, ext_f, misaligned);
            let mask = rasterize_mask(&lungs, extent);
            if label_components(&mask).len() == 2 {
                break (lungs, mask, rng, misaligned);
            }
            attempt += 1;
        }
    };

    // Base scene: lungs on background, softened.
    let mut image = GrayImage::new(extent, extent);
    for y in 0..extent {
        for x in 0..extent {
            image.set(x, y, if mask.get(x, y) { LUNG_VALUE } else { BACKGROUND });
        }
    }
    image = box_blur_3x3(&box_blur_3x3(&image));

    // Labels and lesions.
    let mut labels = LabelVector::zeros();
    let mut lesion_boxes = Vec::new();
    for class in 0..NUM_CLASSES {
        if !rng.chance(spec.prevalence[class]) {
            continue;
        }
        labels[class] = 1.0;
        if class == OUT_OF_LUNG_CLASS {
            // Background brightening that ramps up toward the border,
            // leaving the lung interior and the crop region untouched.
            let delta = rng.range(0.16, 0.26);
            let half_diag = ext_f / 2.0 * std::f64::consts::SQRT_2;
            for y in 0..extent {
                for x in 0..extent {
                    if mask.get(x, y) {
                        continue;
                    }
                    let (dx, dy) = (x as f64 - ext_f / 2.0, y as f64 - ext_f / 2.0);
                    let dn = (dx * dx + dy * dy).sqrt() / half_diag;
                    let w = ((dn - 0.62) / 0.38).clamp(0.0, 1.0);
                    if w > 0.0 {
                        let v = image.get(x, y);
                        image.set(x, y, v + delta * w);
                    }
                }
            }
            lesion_boxes.push(LesionBox {
                class,
                bbox: BoundingBox { x0: 0, y0: 0, x1: extent - 1, y1: extent - 1 },
            });
            continue;
        }
        let count =
            if class == SMALL_LESION_CLASS { 2 + rng.below(4) } else { 1 + rng.below(3) };
        for _ in 0..count {
            let range = spec.lesion_size[class];
            let size = range.min_px + rng.below(range.max_px - range.min_px + 1);
            let amp = lesion_amplitude(class, &mut rng);
            let lung = &lungs[rng.below(2)];
            // Shrink until the disk (plus any soft rim) fits fully inside
            // the lung ellipse, then place its center in the shrunken one.
            let rim = if class == SMALL_LESION_CLASS { DOT_RIM } else { 0.0 };
            let mut radius = size as f64 / 2.0;
            radius = radius.min(lung.a.min(lung.b) - 2.0 - rim).max(1.0);
            let margin = radius + rim;
            let (ea, eb) = (lung.a - margin, lung.b - margin);
            let (u, v) = loop {
                let cu = rng.range(-ea, ea);
                let cv = rng.range(-eb, eb);
                if (cu / ea) * (cu / ea) + (cv / eb) * (cv / eb) <= 1.0 {
                    break (cu, cv);
                }
            };
            let (sin, cos) = lung.theta.sin_cos();
            let cx = lung.cx + u * cos - v * sin;
            let cy = lung.cy + u * sin + v * cos;
            draw_lesion(&mut image, cx, cy, radius, amp, class == SMALL_LESION_CLASS);
            let reach = radius + rim;
            let x0 = (cx - reach).floor().max(0.0) as usize;
            let y0 = (cy - reach).floor().max(0.0) as usize;
            let x1 = ((cx + reach).ceil() as usize).min(extent - 1);
            let y1 = ((cy + reach).ceil() as usize).min(extent - 1);
            lesion_boxes.push(LesionBox { class, bbox: BoundingBox { x0, y0, x1, y1 } });
        }
    }

    // Irrelevant object: a bright blob outside the lungs, label-independent.
    let has_object = rng.chance(spec.object_prob);
    if has_object {
        let r = rng.range(0.015, 0.04) * ext_f;
        let (ox, oy) = loop {
            // Near the top corners or along the sides, as devices tend to be.
            let x = if rng.chance(0.5) { rng.range(0.04, 0.16) } else { rng.range(0.84, 0.96) };
            let y = rng.range(0.05, 0.85);
            let (px, py) = (x * ext_f, y * ext_f);
            let clear = !lungs[0].contains(px, py) && !lungs[1].contains(px, py);
            if clear && px > r && py > r && px < ext_f - r && py < ext_f - r {
                break (px, py);
            }
        };
        let y1 = ((oy + r).ceil() as usize).min(extent - 1);
        let x1 = ((ox + r).ceil() as usize).min(extent - 1);
        for y in (oy - r).floor() as usize..=y1 {
            for x in (ox - r).floor() as usize..=x1 {
                let (dx, dy) = (x as f64 - ox, y as f64 - oy);
                if dx * dx + dy * dy <= r * r && !mask.get(x, y) {
                    image.set(x, y, OBJECT_VALUE);
                }
            }
        }
    }

    // Pixel noise, then clamp into range.
    if spec.noise_level > 0.0 {
        for v in &mut image.data {
            *v += spec.noise_level * rng.normal();
        }
    }
    for v in &mut image.data {
        *v = v.clamp(0.0, 1.0);
    }

    PhantomRecord {
        image_id: format!("img_{index:05}"),
        patient_id: format!("pat_{patient:04}"),
        image,
        lung_mask: mask,
        labels,
        lesion_boxes,
        misaligned,
        has_object,
    }
}

/// Soft-rim width of flat-top (small-class) lesions, in pixels.
const DOT_RIM: f64 = 0.5;

fn draw_lesion(image: &mut GrayImage, cx: f64, cy: f64, radius: f64, amp: f64, flat_top: bool) {
    let (w, h) = (image.width, image.height);
    let reach = radius + DOT_RIM;
    let x0 = (cx - reach - 1.0).floor().max(0.0) as usize;
    let y0 = (cy - reach - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + reach + 1.0).ceil() as usize).min(w - 1);
    let y1 = ((cy + reach + 1.0).ceil() as usize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let d = (dx * dx + dy * dy).sqrt();
            let weight = if flat_top {
                // Full amplitude across the whole stated diameter with a
                // one-pixel soft rim; tiny lesions keep their contrast.
                if d <= radius {
                    1.0
                } else if d <= radius + DOT_RIM {
                    (radius + DOT_RIM - d) / DOT_RIM
                } else {
                    0.0
                }
            } else {
                // Parabolic cap: full amplitude at the center, zero rim.
                (1.0 - (d * d) / (radius * radius)).max(0.0)
            };
            if weight > 0.0 {
                let v = image.get(x, y) + amp * weight;
                image.set(x, y, v);
            }
        }
    }
}

/// Deterministic record stream for (spec, seed).
pub fn gen_phantom(
    spec: &PhantomSpec,
    seed: u64,
) -> impl Iterator<Item = PhantomRecord> + '_ {
    (0..spec.total_images()).map(move |i| gen_record(spec, seed, i))
}

// ── Augmentation ────────────────────────────────────────────────────────

/// Sampling ranges for the affine augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Rotation sampled uniformly in [-rotate_deg, rotate_deg].
    pub rotate_deg: f64,
    /// Shift sampled uniformly in [-shift_frac, shift_frac] of the extent,
    /// independently per axis.
    pub shift_frac: f64,
    pub zoom_lo: f64,
    pub zoom_hi: f64,
    /// Horizontal flip probability (classification mode only).
    pub hflip_prob: f64,
}

impl AugmentParams {
    /// Affine ranges for segmentation training.
    pub fn affine_default() -> Self {
        AugmentParams { rotate_deg: 10.0, shift_frac: 0.1, zoom_lo: 0.9, zoom_hi: 1.1, hflip_prob: 0.0 }
    }

    /// Flip-only augmentation for classification training.
    pub fn flip_default() -> Self {
        AugmentParams { rotate_deg: 0.0, shift_frac: 0.0, zoom_lo: 1.0, zoom_hi: 1.0, hflip_prob: 0.5 }
    }

    pub fn identity() -> Self {
        AugmentParams { rotate_deg: 0.0, shift_frac: 0.0, zoom_lo: 1.0, zoom_hi: 1.0, hflip_prob: 0.0 }
    }
}

/// One concrete sampled transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSample {
    pub theta: f64,
    pub shift: (f64, f64),
    pub zoom: f64,
    pub flip: bool,
}

impl AugmentSample {
    pub fn identity() -> Self {
        AugmentSample { theta: 0.0, shift: (0.0, 0.0), zoom: 1.0, flip: false }
    }

    pub fn is_identity(&self) -> bool {
        self.theta == 0.0 && self.shift == (0.0, 0.0) && self.zoom == 1.0 && !self.flip
    }
}

pub fn sample_augment(params: &AugmentParams, rng: &mut Rng, extent: usize) -> AugmentSample {
    let theta = if params.rotate_deg > 0.0 {
        rng.range(-params.rotate_deg, params.rotate_deg).to_radians()
    } else {
        0.0
    };
    let shift = if params.shift_frac > 0.0 {
        let s = params.shift_frac * extent as f64;
        (rng.range(-s, s), rng.range(-s, s))
    } else {
        (0.0, 0.0)
    };
    let zoom =
        if params.zoom_lo < params.zoom_hi { rng.range(params.zoom_lo, params.zoom_hi) } else { params.zoom_lo };
    let flip = params.hflip_prob > 0.0 && rng.chance(params.hflip_prob);
    AugmentSample { theta, shift, zoom, flip }
}

fn inverse_map(sample: &AugmentSample, w: f64, h: f64, x: f64, y: f64) -> (f64, f64) {
    // Forward: p' = R(theta) * zoom * (p - c) + c + shift; invert it.
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let (dx, dy) = (x - cx - sample.shift.0, y - cy - sample.shift.1);
    let (sin, cos) = sample.theta.sin_cos();
    let rx = (dx * cos + dy * sin) / sample.zoom;
    let ry = (-dx * sin + dy * cos) / sample.zoom;
    (rx + cx, ry + cy)
}

/// Apply the sampled transform to an image (bilinear, zero fill) and, when
/// given, the matching mask (nearest neighbor) under the same geometry.
/// The flip component applies to the image only; callers use it in
/// classification mode where labels are flip-invariant.
pub fn augment(
    image: &GrayImage,
    mask: Option<&BinaryMask>,
    sample: &AugmentSample,
) -> (GrayImage, Option<BinaryMask>) {
    let mut img = if sample.is_identity() {
        image.clone()
    } else if sample.theta == 0.0 && sample.shift == (0.0, 0.0) && sample.zoom == 1.0 {
        image.clone()
    } else {
        let (w, h) = (image.width, image.height);
        let mut out = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = inverse_map(sample, w as f64, h as f64, x as f64, y as f64);
                out.set(x, y, bilinear_at(image, sx, sy));
            }
        }
        out
    };
    if sample.flip {
        img = hflip(&img);
    }

    let out_mask = mask.map(|m| {
        if sample.theta == 0.0 && sample.shift == (0.0, 0.0) && sample.zoom == 1.0 {
            m.clone()
        } else {
            let (w, h) = (m.width(), m.height());
            let mut out = BinaryMask::new(w, h);
            for y in 0..h {
                for x in 0..w {
                    let (sx, sy) = inverse_map(sample, w as f64, h as f64, x as f64, y as f64);
                    let (nx, ny) = (sx.round(), sy.round());
                    if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                        out.set(x, y, m.get(nx as usize, ny as usize));
                    }
                }
            }
            out
        }
    });
    (img, out_mask)
}

pub fn hflip(image: &GrayImage) -> GrayImage {
    let (w, h) = (image.width, image.height);
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, image.get(w - 1 - x, y));
        }
    }
    out
}

fn bilinear_at(img: &GrayImage, x: f64, y: f64) -> f64 {
    if x < 0.0 || y < 0.0 || x > (img.width - 1) as f64 || y > (img.height - 1) as f64 {
        return 0.0;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let (wx, wy) = (x - x0 as f64, y - y0 as f64);
    let top = img.get(x0, y0) * (1.0 - wx) + img.get(x1, y0) * wx;
    let bot = img.get(x0, y1) * (1.0 - wx) + img.get(x1, y1) * wx;
    top * (1.0 - wy) + bot * wy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;

    #[test]
    fn same_spec_and_seed_generate_identical_corpora() {
        let spec = PhantomSpec { patient_count: 6, images_per_patient: 2, ..Default::default() };
        let a: Vec<PhantomRecord> = gen_phantom(&spec, 99).collect();
        let b: Vec<PhantomRecord> = gen_phantom(&spec, 99).collect();
        assert_eq!(a.len(), 12);
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.image.data, rb.image.data);
            assert_eq!(ra.lung_mask.bits(), rb.lung_mask.bits());
            assert_eq!(ra.labels, rb.labels);
            assert_eq!(ra.lesion_boxes, rb.lesion_boxes);
        }
        let c: Vec<PhantomRecord> = gen_phantom(&spec, 100).collect();
        assert!(a.iter().zip(&c).any(|(x, y)| x.image.data != y.image.data));
    }

    #[test]
    fn lung_confined_lesions_stay_inside_the_mask() {
        let spec = PhantomSpec { patient_count: 15, images_per_patient: 2, ..Default::default() };
        for record in gen_phantom(&spec, 7) {
            for lesion in &record.lesion_boxes {
                if lesion.class == OUT_OF_LUNG_CLASS {
                    continue;
                }
                // The box center region must be lung; check the box's center
                // pixel and that the box overlaps the mask substantially.
                let b = lesion.bbox;
                let mut inside = 0usize;
                let mut total = 0usize;
                for y in b.y0..=b.y1 {
                    for x in b.x0..=b.x1 {
                        total += 1;
                        inside += usize::from(record.lung_mask.get(x, y));
                    }
                }
                // The disk inscribed in the box lies inside the lung; corners
                // of the bounding square may poke out of the ellipse.
                assert!(
                    inside * 4 >= total * 3,
                    "lesion box {:?} mostly outside lung ({inside}/{total})",
                    b
                );
            }
        }
    }

    #[test]
    fn lesion_pixels_strictly_inside_mask_for_small_class() {
        // Per-pixel check on the small-lesion class: every brightened pixel
        // of an otherwise lesion-free scene is a lung pixel.
        let mut spec = PhantomSpec {
            patient_count: 10,
            images_per_patient: 1,
            noise_level: 0.0,
            object_prob: 0.0,
            misalignment_prob: 0.0,
            prevalence: [0.0; NUM_CLASSES],
            ..Default::default()
        };
        spec.prevalence[SMALL_LESION_CLASS] = 1.0;
        let clean_spec = PhantomSpec { prevalence: [0.0; NUM_CLASSES], ..spec.clone() };
        for i in 0..spec.total_images() {
            let with = gen_record(&spec, 5, i);
            let without = gen_record(&clean_spec, 5, i);
            assert_eq!(with.lung_mask.bits(), without.lung_mask.bits());
            for y in 0..spec.extent {
                for x in 0..spec.extent {
                    if (with.image.get(x, y) - without.image.get(x, y)).abs() > 1e-12 {
                        assert!(with.lung_mask.get(x, y), "lesion pixel ({x},{y}) outside lung");
                    }
                }
            }
        }
    }

    #[test]
    fn label_and_lesion_list_are_consistent() {
        let spec = PhantomSpec { patient_count: 20, images_per_patient: 2, ..Default::default() };
        for record in gen_phantom(&spec, 3) {
            for c in 0..NUM_CLASSES {
                let has_lesion = record.lesion_boxes.iter().any(|l| l.class == c);
                assert_eq!(record.labels[c] == 1.0, has_lesion, "class {c}");
            }
        }
    }

    #[test]
    fn mask_has_exactly_two_components() {
        let spec = PhantomSpec {
            patient_count: 25,
            images_per_patient: 2,
            misalignment_prob: 0.5,
            ..Default::default()
        };
        for record in gen_phantom(&spec, 11) {
            assert_eq!(label_components(&record.lung_mask).len(), 2, "{}", record.image_id);
        }
    }

    #[test]
    fn empirical_prevalence_within_three_sigma() {
        let spec = PhantomSpec {
            patient_count: 500,
            images_per_patient: 4,
            extent: 64, // label machinery is extent-independent; keep it fast
            ..Default::default()
        };
        let n = spec.total_images() as f64;
        let mut counts = [0usize; NUM_CLASSES];
        for record in gen_phantom(&spec, 2025) {
            for c in 0..NUM_CLASSES {
                counts[c] += usize::from(record.labels[c] == 1.0);
            }
        }
        for c in 0..NUM_CLASSES {
            let p = spec.prevalence[c];
            let sigma = (p * (1.0 - p) / n).sqrt();
            let observed = counts[c] as f64 / n;
            assert!(
                (observed - p).abs() <= 3.0 * sigma,
                "class {c}: {observed} vs {p} (3 sigma = {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn identity_augmentation_is_bitwise_identity() {
        let record = gen_record(&PhantomSpec::default(), 1, 0);
        let sample = AugmentSample::identity();
        let (img, mask) = augment(&record.image, Some(&record.lung_mask), &sample);
        assert_eq!(img.data, record.image.data);
        assert_eq!(mask.unwrap().bits(), record.lung_mask.bits());
    }

    #[test]
    fn flip_twice_restores_the_image() {
        let record = gen_record(&PhantomSpec::default(), 2, 1);
        let flipped = hflip(&record.image);
        assert_ne!(flipped.data, record.image.data);
        assert_eq!(hflip(&flipped).data, record.image.data);
    }

    #[test]
    fn rotation_round_trip_keeps_dice_high() {
        let record = gen_record(
            &PhantomSpec { noise_level: 0.0, misalignment_prob: 0.0, ..Default::default() },
            3,
            0,
        );
        let theta = 10.0f64.to_radians();
        let fwd = AugmentSample { theta, shift: (0.0, 0.0), zoom: 1.0, flip: false };
        let back = AugmentSample { theta: -theta, shift: (0.0, 0.0), zoom: 1.0, flip: false };
        let (_, m1) = augment(&record.image, Some(&record.lung_mask), &fwd);
        let rotated = m1.unwrap();
        let (_, m2) = augment(&record.image, Some(&rotated), &back);
        let d = dice(&m2.unwrap(), &record.lung_mask).unwrap();
        assert!(d >= 0.97, "round-trip DSC {d}");
    }

    #[test]
    fn sampled_transforms_respect_ranges_and_seed() {
        let params = AugmentParams::affine_default();
        let mut rng = Rng::new(10);
        for _ in 0..100 {
            let s = sample_augment(&params, &mut rng, 256);
            assert!(s.theta.abs() <= 10f64.to_radians());
            assert!(s.shift.0.abs() <= 25.6 && s.shift.1.abs() <= 25.6);
            assert!((0.9..=1.1).contains(&s.zoom));
            assert!(!s.flip);
        }
        let mut r1 = Rng::new(4);
        let mut r2 = Rng::new(4);
        assert_eq!(sample_augment(&params, &mut r1, 64), sample_augment(&params, &mut r2, 64));
    }

    #[test]
    fn out_of_lung_signal_lives_near_the_border() {
        let mut spec = PhantomSpec {
            patient_count: 1,
            images_per_patient: 1,
            noise_level: 0.0,
            object_prob: 0.0,
            misalignment_prob: 0.0,
            prevalence: [0.0; NUM_CLASSES],
            ..Default::default()
        };
        spec.prevalence[OUT_OF_LUNG_CLASS] = 1.0;
        let clean = PhantomSpec { prevalence: [0.0; NUM_CLASSES], ..spec.clone() };
        let with = gen_record(&spec, 8, 0);
        let without = gen_record(&clean, 8, 0);
        assert_eq!(with.labels[OUT_OF_LUNG_CLASS], 1.0);
        let extent = spec.extent;
        let mut changed = Vec::new();
        for y in 0..extent {
            for x in 0..extent {
                if (with.image.get(x, y) - without.image.get(x, y)).abs() > 1e-9 {
                    assert!(!with.lung_mask.get(x, y), "lung pixel changed at ({x},{y})");
                    changed.push((x, y));
                }
            }
        }
        assert!(!changed.is_empty());
        // Every changed pixel is in the outer band, beyond 0.62 of the
        // half-diagonal from the center.
        let half_diag = extent as f64 / 2.0 * std::f64::consts::SQRT_2;
        for (x, y) in changed {
            let (dx, dy) = (x as f64 - 128.0, y as f64 - 128.0);
            assert!((dx * dx + dy * dy).sqrt() / half_diag > 0.62);
        }
    }

    #[test]
    fn spec_validation_rejects_bad_values() {
        let mut spec = PhantomSpec::default();
        assert!(spec.validate().is_ok());
        spec.prevalence[0] = 1.5;
        assert!(spec.validate().is_err());
        let mut spec = PhantomSpec::default();
        spec.lesion_size[SMALL_LESION_CLASS].max_px = 30;
        assert!(spec.validate().is_err());
        let mut spec = PhantomSpec::default();
        spec.patient_count = 0;
        assert!(spec.validate().is_err());
    }
}
