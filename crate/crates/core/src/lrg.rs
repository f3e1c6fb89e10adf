//! Lung Region Generator: turns a binary segmentation mask into a single
//! bounding box around both lungs, then crops it from the source image.
//!
//! Rules, in order: connected-component labeling, keeping the two most
//! central regions, dropping a region smaller than a third of its partner,
//! bounding (with vertical-centerline mirroring when only one region
//! remains), and margin expansion.

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Row-major boolean image.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "mask {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(BinaryMask { width, height, bits })
    }

    /// Threshold a probability map at 0.5.
    pub fn from_probabilities(img: &GrayImage) -> Self {
        BinaryMask {
            width: img.width,
            height: img.height,
            bits: img.data.iter().map(|&p| p >= 0.5).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.len() == 0
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Integer pixel rectangle, inclusive, in original-image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn is_valid_for(&self, width: usize, height: usize) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 < width && self.y1 < height
    }
}

/// One 4-connected component of a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    /// Scan-order label, 0-based: first region encountered row-major gets 0.
    pub label: usize,
    pub area: usize,
    /// Mean pixel coordinate (x, y).
    pub centroid: (f64, f64),
    pub bbox: BoundingBox,
}

/// 4-connected components in scan order, each with area, centroid, and
/// tight bounding box. An empty mask yields an empty list.
pub fn label_components(mask: &BinaryMask) -> Vec<Region> {
    let (w, h) = (mask.width, mask.height);
    let mut visited = vec![false; w * h];
    let mut regions = Vec::new();
    let mut stack = Vec::new();

    for start in 0..w * h {
        if !mask.bits[start] || visited[start] {
            continue;
        }
        let label = regions.len();
        let mut area = 0usize;
        let (mut sx, mut sy) = (0u64, 0u64);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);

        visited[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % w, idx / w);
            area += 1;
            sx += x as u64;
            sy += y as u64;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);

            if x > 0 && mask.bits[idx - 1] && !visited[idx - 1] {
                visited[idx - 1] = true;
                stack.push(idx - 1);
            }
            if x + 1 < w && mask.bits[idx + 1] && !visited[idx + 1] {
                visited[idx + 1] = true;
                stack.push(idx + 1);
            }
            if y > 0 && mask.bits[idx - w] && !visited[idx - w] {
                visited[idx - w] = true;
                stack.push(idx - w);
            }
            if y + 1 < h && mask.bits[idx + w] && !visited[idx + w] {
                visited[idx + w] = true;
                stack.push(idx + w);
            }
        }

        regions.push(Region {
            label,
            area,
            centroid: (sx as f64 / area as f64, sy as f64 / area as f64),
            bbox: BoundingBox { x0, y0, x1, y1 },
        });
    }
    regions
}

/// Keep the (at most) two regions whose centroids are closest to the image
/// center ((W-1)/2, (H-1)/2). Distance ties prefer the larger area, then the
/// smaller label. Output is in label order.
pub fn select_two_central(
    regions: &[Region],
    image_width: usize,
    image_height: usize,
) -> Vec<Region> {
    if regions.len() <= 2 {
        return regions.to_vec();
    }
    let cx = (image_width as f64 - 1.0) / 2.0;
    let cy = (image_height as f64 - 1.0) / 2.0;
    let mut order: Vec<usize> = (0..regions.len()).collect();
    let dist = |r: &Region| {
        let dx = r.centroid.0 - cx;
        let dy = r.centroid.1 - cy;
        (dx * dx + dy * dy).sqrt()
    };
    order.sort_by(|&a, &b| {
        dist(&regions[a])
            .partial_cmp(&dist(&regions[b]))
            .unwrap()
            .then(regions[b].area.cmp(&regions[a].area))
            .then(regions[a].label.cmp(&regions[b].label))
    });
    let mut keep = vec![regions[order[0]].clone(), regions[order[1]].clone()];
    keep.sort_by_key(|r| r.label);
    keep
}

/// Given exactly two regions, drop the smaller one iff its area is strictly
/// less than one third of the larger. Boundary equality keeps both.
pub fn drop_minor_region(regions: &[Region]) -> Result<Vec<Region>> {
    if regions.len() != 2 {
        return Err(Error::WrongArity(format!(
            "drop_minor_region expects exactly two regions, got {}",
            regions.len()
        )));
    }
    let (a, b) = (&regions[0], &regions[1]);
    let (larger, smaller) = if a.area >= b.area { (a, b) } else { (b, a) };
    if (smaller.area as f64) < larger.area as f64 / 3.0 {
        Ok(vec![larger.clone()])
    } else {
        Ok(regions.to_vec())
    }
}

/// Tight box over the surviving regions. Two regions: union of their boxes.
/// One region: union of its box and its mirror across the vertical
/// centerline (x -> W-1-x). Zero regions signal segmentation failure.
pub fn mirror_bound(regions: &[Region], image_width: usize) -> Result<BoundingBox> {
    match regions {
        [] => Err(Error::WrongArity("mirror_bound on zero regions".into())),
        [single] => {
            let b = single.bbox;
            let mirrored = BoundingBox {
                x0: image_width - 1 - b.x1,
                y0: b.y0,
                x1: image_width - 1 - b.x0,
                y1: b.y1,
            };
            Ok(b.union(&mirrored))
        }
        [a, b] => Ok(a.bbox.union(&b.bbox)),
        more => Err(Error::WrongArity(format!(
            "mirror_bound expects at most two regions, got {}",
            more.len()
        ))),
    }
}

/// Margins at the 1024-pixel reference extent: top, left, right, bottom.
pub const REFERENCE_EXTENT: f64 = 1024.0;
pub const MARGIN_TOP: f64 = 15.0;
pub const MARGIN_LEFT: f64 = 15.0;
pub const MARGIN_RIGHT: f64 = 15.0;
pub const MARGIN_BOTTOM: f64 = 20.0;

/// Margins scaled to the given image extents, rounded to nearest.
pub fn scaled_margins(width: usize, height: usize) -> (usize, usize, usize, usize) {
    let sx = width as f64 / REFERENCE_EXTENT;
    let sy = height as f64 / REFERENCE_EXTENT;
    (
        (MARGIN_TOP * sy).round() as usize,
        (MARGIN_LEFT * sx).round() as usize,
        (MARGIN_RIGHT * sx).round() as usize,
        (MARGIN_BOTTOM * sy).round() as usize,
    )
}

/// Expand a box by (top, left, right, bottom) margins, clamped to the image.
pub fn expand_box(
    bbox: &BoundingBox,
    image_width: usize,
    image_height: usize,
    margins: (usize, usize, usize, usize),
) -> BoundingBox {
    let (top, left, right, bottom) = margins;
    BoundingBox {
        x0: bbox.x0.saturating_sub(left),
        y0: bbox.y0.saturating_sub(top),
        x1: (bbox.x1 + right).min(image_width - 1),
        y1: (bbox.y1 + bottom).min(image_height - 1),
    }
}

/// Which post-processing rules fired for one mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LrgStatus {
    /// More than two components: distant ones were removed.
    pub fp_removed: bool,
    /// A single region was mirrored across the centerline.
    pub mirrored: bool,
    /// Empty mask: the full image was returned instead of a crop.
    pub fallback: bool,
}

impl LrgStatus {
    pub fn clean() -> Self {
        LrgStatus { fp_removed: false, mirrored: false, fallback: false }
    }
}

impl std::fmt::Display for LrgStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.fallback {
            return write!(f, "fallback");
        }
        match (self.fp_removed, self.mirrored) {
            (false, false) => write!(f, "clean"),
            (true, false) => write!(f, "fp-removed"),
            (false, true) => write!(f, "mirrored"),
            (true, true) => write!(f, "fp-removed+mirrored"),
        }
    }
}

impl std::str::FromStr for LrgStatus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(LrgStatus::clean()),
            "fp-removed" => Ok(LrgStatus { fp_removed: true, mirrored: false, fallback: false }),
            "mirrored" => Ok(LrgStatus { fp_removed: false, mirrored: true, fallback: false }),
            "fp-removed+mirrored" => {
                Ok(LrgStatus { fp_removed: true, mirrored: true, fallback: false })
            }
            "fallback" => Ok(LrgStatus { fp_removed: false, mirrored: false, fallback: true }),
            other => Err(Error::Parse {
                path: String::new(),
                offset: 0,
                message: format!("unknown LRG status `{other}`"),
            }),
        }
    }
}

/// Full post-processing pipeline: components -> central pair -> minor-region
/// drop -> (mirrored) bound -> margin expansion -> crop.
///
/// An empty mask falls back to the whole image so poor segmentations never
/// abort a batch.
pub fn generate_lung_region(
    image: &GrayImage,
    mask: &BinaryMask,
) -> Result<(GrayImage, BoundingBox, LrgStatus)> {
    if image.width != mask.width() || image.height != mask.height() {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            image.width,
            image.height,
            mask.width(),
            mask.height()
        )));
    }
    let (w, h) = (image.width, image.height);
    let mut status = LrgStatus::clean();

    let regions = label_components(mask);
    if regions.is_empty() {
        status.fallback = true;
        let full = BoundingBox { x0: 0, y0: 0, x1: w - 1, y1: h - 1 };
        return Ok((image.clone(), full, status));
    }

    let mut kept = if regions.len() > 2 {
        status.fp_removed = true;
        select_two_central(&regions, w, h)
    } else {
        regions
    };
    if kept.len() == 2 {
        kept = drop_minor_region(&kept)?;
    }
    if kept.len() == 1 {
        status.mirrored = true;
    }
    let tight = mirror_bound(&kept, w)?;
    let bbox = expand_box(&tight, w, h, scaled_margins(w, h));
    let crop = image.crop(bbox.x0, bbox.y0, bbox.x1, bbox.y1)?;
    Ok((crop, bbox, status))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_mask(w: usize, h: usize, rects: &[(usize, usize, usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::new(w, h);
        for &(x0, y0, x1, y1) in rects {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    #[test]
    fn empty_mask_has_no_components() {
        assert!(label_components(&BinaryMask::new(16, 16)).is_empty());
    }

    #[test]
    fn two_rectangles_have_exact_area_and_centroid() {
        let m = rect_mask(32, 32, &[(2, 3, 5, 10), (20, 4, 29, 9)]);
        let regions = label_components(&m);
        assert_eq!(regions.len(), 2);
        let a = &regions[0];
        assert_eq!(a.area, 4 * 8);
        assert_eq!(a.centroid, (3.5, 6.5));
        assert_eq!(a.bbox, BoundingBox { x0: 2, y0: 3, x1: 5, y1: 10 });
        let b = &regions[1];
        assert_eq!(b.area, 10 * 6);
        assert_eq!(b.centroid, (24.5, 6.5));
    }

    #[test]
    fn four_connectivity_keeps_diagonal_pixels_apart() {
        let mut m = BinaryMask::new(4, 4);
        m.set(1, 1, true);
        m.set(2, 2, true);
        assert_eq!(label_components(&m).len(), 2);
    }

    #[test]
    fn select_central_drops_far_corner_region() {
        // Centroids (300,500), (700,500), (100,50) in a 1024x1024 image:
        // the corner region is farthest from (511.5, 511.5).
        let m = rect_mask(
            1024,
            1024,
            &[(280, 480, 320, 520), (680, 480, 720, 520), (80, 30, 120, 70)],
        );
        let regions = label_components(&m);
        assert_eq!(regions.len(), 3);
        let kept = select_two_central(&regions, 1024, 1024);
        assert_eq!(kept.len(), 2);
        let centroids: Vec<_> = kept.iter().map(|r| r.centroid).collect();
        assert!(centroids.contains(&(300.0, 500.0)));
        assert!(centroids.contains(&(700.0, 500.0)));
    }

    #[test]
    fn select_central_passes_small_inputs_through() {
        let m = rect_mask(64, 64, &[(10, 10, 20, 30), (40, 12, 50, 28)]);
        let regions = label_components(&m);
        assert_eq!(select_two_central(&regions, 64, 64), regions);
        assert_eq!(select_two_central(&[], 64, 64), vec![]);
    }

    #[test]
    fn one_third_rule_boundaries() {
        let mk = |area_a: usize, area_b: usize| {
            vec![
                Region {
                    label: 0,
                    area: area_a,
                    centroid: (0.0, 0.0),
                    bbox: BoundingBox { x0: 0, y0: 0, x1: 0, y1: 0 },
                },
                Region {
                    label: 1,
                    area: area_b,
                    centroid: (5.0, 0.0),
                    bbox: BoundingBox { x0: 5, y0: 0, x1: 5, y1: 0 },
                },
            ]
        };
        // 1200 < 4000/3 = 1333.3..: smaller removed.
        let kept = drop_minor_region(&mk(4000, 1200)).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].area, 4000);
        // 1500 >= 4000/3: both kept.
        assert_eq!(drop_minor_region(&mk(4000, 1500)).unwrap().len(), 2);
        // Equal areas kept.
        assert_eq!(drop_minor_region(&mk(777, 777)).unwrap().len(), 2);
        // Wrong arity.
        assert!(drop_minor_region(&mk(1, 1)[..1].to_vec()).is_err());
    }

    #[test]
    fn mirror_bound_single_region_matches_symmetry_arithmetic() {
        let r = Region {
            label: 0,
            area: 1,
            centroid: (250.0, 500.0),
            bbox: BoundingBox { x0: 100, y0: 200, x1: 400, y1: 800 },
        };
        let b = mirror_bound(&[r], 1024).unwrap();
        // Mirror of x in [100,400] under x -> 1023-x is [623, 923].
        assert_eq!(b, BoundingBox { x0: 100, y0: 200, x1: 923, y1: 800 });
    }

    #[test]
    fn mirror_bound_two_regions_is_box_union() {
        let a = Region {
            label: 0,
            area: 1,
            centroid: (0.0, 0.0),
            bbox: BoundingBox { x0: 100, y0: 200, x1: 400, y1: 800 },
        };
        let b = Region {
            label: 1,
            area: 1,
            centroid: (0.0, 0.0),
            bbox: BoundingBox { x0: 620, y0: 210, x1: 920, y1: 790 },
        };
        let u = mirror_bound(&[a, b], 1024).unwrap();
        assert_eq!(u, BoundingBox { x0: 100, y0: 200, x1: 920, y1: 800 });
    }

    #[test]
    fn mirror_bound_zero_regions_is_an_error() {
        assert!(mirror_bound(&[], 1024).is_err());
    }

    #[test]
    fn expand_box_reference_margins() {
        let b = BoundingBox { x0: 100, y0: 120, x1: 400, y1: 500 };
        let e = expand_box(&b, 1024, 1024, scaled_margins(1024, 1024));
        assert_eq!(e, BoundingBox { x0: 85, y0: 105, x1: 415, y1: 520 });
    }

    #[test]
    fn expand_box_clamps_at_image_bounds() {
        let b = BoundingBox { x0: 5, y0: 3, x1: 1020, y1: 1015 };
        let e = expand_box(&b, 1024, 1024, scaled_margins(1024, 1024));
        assert_eq!(e, BoundingBox { x0: 0, y0: 0, x1: 1023, y1: 1023 });
    }

    #[test]
    fn margins_scale_proportionally_to_extent() {
        assert_eq!(scaled_margins(1024, 1024), (15, 15, 15, 20));
        assert_eq!(scaled_margins(512, 512), (8, 8, 8, 10));
        assert_eq!(scaled_margins(256, 256), (4, 4, 4, 5));
    }

    #[test]
    fn expansion_is_idempotent_on_full_image_box() {
        let full = BoundingBox { x0: 0, y0: 0, x1: 255, y1: 255 };
        assert_eq!(expand_box(&full, 256, 256, scaled_margins(256, 256)), full);
    }

    #[test]
    fn expansion_always_contains_its_input() {
        let mut rng = crate::rng::Rng::new(515);
        for _ in 0..200 {
            let (w, h) = (32 + rng.below(992), 32 + rng.below(992));
            let x0 = rng.below(w);
            let y0 = rng.below(h);
            let b = BoundingBox {
                x0,
                y0,
                x1: x0 + rng.below(w - x0),
                y1: y0 + rng.below(h - y0),
            };
            let e = expand_box(&b, w, h, scaled_margins(w, h));
            assert!(e.contains(&b), "{e:?} does not contain {b:?}");
            assert!(e.is_valid_for(w, h));
        }
    }

    #[test]
    fn generate_handles_empty_mask_with_fallback() {
        let img = GrayImage::new(64, 64);
        let (crop, bbox, status) = generate_lung_region(&img, &BinaryMask::new(64, 64)).unwrap();
        assert!(status.fallback);
        assert_eq!(bbox, BoundingBox { x0: 0, y0: 0, x1: 63, y1: 63 });
        assert_eq!((crop.width, crop.height), (64, 64));
    }

    #[test]
    fn spurious_corner_blob_does_not_change_the_box() {
        let img = GrayImage::new(256, 256);
        let clean = rect_mask(256, 256, &[(50, 60, 110, 200), (150, 62, 205, 198)]);
        let (_, clean_box, clean_status) = generate_lung_region(&img, &clean).unwrap();
        assert_eq!(clean_status, LrgStatus::clean());

        let mut noisy = clean.clone();
        for y in 2..10 {
            for x in 240..252 {
                noisy.set(x, y, true);
            }
        }
        let (_, noisy_box, noisy_status) = generate_lung_region(&img, &noisy).unwrap();
        assert!(noisy_status.fp_removed);
        assert_eq!(clean_box, noisy_box);
    }

    #[test]
    fn symmetric_mask_gives_symmetric_box() {
        let w = 128;
        let m = rect_mask(w, 128, &[(20, 30, 50, 100), (77, 30, 107, 100)]);
        let regions = label_components(&m);
        let b = mirror_bound(&regions, w).unwrap();
        assert_eq!(b.x0, w - 1 - b.x1);
    }

    #[test]
    fn status_strings_round_trip() {
        for s in ["clean", "fp-removed", "mirrored", "fp-removed+mirrored", "fallback"] {
            let parsed: LrgStatus = s.parse().unwrap();
            assert_eq!(parsed.to_string(), s);
        }
    }
}
