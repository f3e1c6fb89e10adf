//! File formats: binary PGM/PPM images, CSV corpus manifests, and
//! evaluation-report serialization (CSV and JSON).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::labels::{LabelVector, CLASS_NAMES, NUM_CLASSES};
use crate::lrg::{BinaryMask, BoundingBox};
use crate::metrics::EvalReport;
use crate::synth::LesionBox;

// ── PGM / PPM ───────────────────────────────────────────────────────────

/// Write a binary (P5) PGM. `maxval` must be 255 or 65535; 16-bit samples
/// are big-endian per the format.
pub fn write_pgm(path: &Path, image: &GrayImage, maxval: u32) -> Result<()> {
    if maxval != 255 && maxval != 65535 {
        return Err(Error::InvalidConfig(format!("PGM maxval must be 255 or 65535, got {maxval}")));
    }
    let mut buf = Vec::with_capacity(32 + image.data.len() * if maxval == 255 { 1 } else { 2 });
    write!(buf, "P5\n{} {}\n{}\n", image.width, image.height, maxval)?;
    for &v in &image.data {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if maxval == 255 {
            buf.push(q as u8);
        } else {
            buf.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Write a binary (P6) PPM from per-pixel RGB triples.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[(u8, u8, u8)]) -> Result<()> {
    if rgb.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "PPM {width}x{height} needs {} pixels, got {}",
            width * height,
            rgb.len()
        )));
    }
    let mut buf = Vec::with_capacity(32 + rgb.len() * 3);
    write!(buf, "P6\n{width} {height}\n255\n")?;
    for &(r, g, b) in rgb {
        buf.extend_from_slice(&[r, g, b]);
    }
    fs::write(path, buf)?;
    Ok(())
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn token(&mut self) -> Option<(&'a str, usize)> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            None
        } else {
            std::str::from_utf8(&self.bytes[start..self.pos]).ok().map(|s| (s, start))
        }
    }
}

/// Read a binary (P5) PGM with maxval 255 or 65535; samples are normalized
/// to [0, 1]. Parse errors carry the byte offset of the failure.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    let path_str = path.display().to_string();
    let err = |offset: usize, message: String| Error::Parse {
        path: path_str.clone(),
        offset: offset as u64,
        message,
    };

    let mut scanner = HeaderScanner { bytes: &bytes, pos: 0 };
    let (magic, off) =
        scanner.token().ok_or_else(|| err(0, "empty file, expected P5 magic".into()))?;
    if magic != "P5" {
        return Err(err(off, format!("expected magic `P5`, found `{magic}`")));
    }
    let mut field = |name: &str| -> Result<(u64, usize)> {
        let (tok, off) =
            scanner.token().ok_or_else(|| err(bytes.len(), format!("missing {name}")))?;
        let v = tok.parse::<u64>().map_err(|_| err(off, format!("invalid {name} `{tok}`")))?;
        Ok((v, off))
    };
    let (width, woff) = field("width")?;
    let (height, hoff) = field("height")?;
    let (maxval, moff) = field("maxval")?;
    if width == 0 || height == 0 {
        return Err(err(woff.min(hoff), "zero image extent".into()));
    }
    if maxval != 255 && maxval != 65535 {
        return Err(err(moff, format!("unsupported maxval {maxval}, expected 255 or 65535")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if scanner.pos >= bytes.len() || !bytes[scanner.pos].is_ascii_whitespace() {
        return Err(err(scanner.pos, "expected whitespace before raster data".into()));
    }
    let data_start = scanner.pos + 1;

    let (w, h) = (width as usize, height as usize);
    let sample_bytes = if maxval == 255 { 1 } else { 2 };
    let needed = w * h * sample_bytes;
    if bytes.len() - data_start < needed {
        return Err(err(
            bytes.len(),
            format!(
                "truncated raster: need {needed} bytes from offset {data_start}, file has {}",
                bytes.len() - data_start
            ),
        ));
    }
    let raster = &bytes[data_start..data_start + needed];
    let denom = maxval as f64;
    let data: Vec<f64> = if maxval == 255 {
        raster.iter().map(|&b| b as f64 / denom).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / denom)
            .collect()
    };
    GrayImage::from_data(w, h, data)
}

/// Write a mask as a 0/255 PGM.
pub fn write_mask_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let img = GrayImage::from_data(
        mask.width(),
        mask.height(),
        mask.bits().iter().map(|&b| f64::from(b)).collect(),
    )?;
    write_pgm(path, &img, 255)
}

/// Read a 0/255 PGM back into a mask (threshold 0.5).
pub fn read_mask_pgm(path: &Path) -> Result<BinaryMask> {
    Ok(BinaryMask::from_probabilities(&read_pgm(path)?))
}

// ── Corpus manifest ─────────────────────────────────────────────────────

/// One manifest row: paths plus ground-truth labels and lesion boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub image_id: String,
    pub patient_id: String,
    pub image_path: String,
    pub mask_path: String,
    pub labels: LabelVector,
    pub lesion_boxes: Vec<LesionBox>,
}

fn manifest_header() -> String {
    let mut cols = vec!["image_id", "patient_id", "image_path", "mask_path"];
    cols.extend_from_slice(&CLASS_NAMES);
    cols.push("lesion_boxes");
    cols.join(",")
}

fn pack_boxes(boxes: &[LesionBox]) -> String {
    boxes
        .iter()
        .map(|l| {
            format!("{}:{}:{}:{}:{}", l.class, l.bbox.x0, l.bbox.y0, l.bbox.x1, l.bbox.y1)
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn unpack_boxes(field: &str) -> Result<Vec<LesionBox>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            if parts.len() != 5 {
                return Err(Error::Parse {
                    path: String::new(),
                    offset: 0,
                    message: format!("lesion box `{item}` must have 5 fields"),
                });
            }
            let nums: Vec<usize> = parts
                .iter()
                .map(|p| {
                    p.parse::<usize>().map_err(|_| Error::Parse {
                        path: String::new(),
                        offset: 0,
                        message: format!("invalid lesion box number `{p}`"),
                    })
                })
                .collect::<Result<_>>()?;
            Ok(LesionBox {
                class: nums[0],
                bbox: BoundingBox { x0: nums[1], y0: nums[2], x1: nums[3], y1: nums[4] },
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&manifest_header());
    out.push('\n');
    for row in rows {
        let labels: Vec<String> =
            row.labels.as_slice().iter().map(|&v| format!("{}", v as u8)).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.image_id,
            row.patient_id,
            row.image_path,
            row.mask_path,
            labels.join(","),
            pack_boxes(&row.lesion_boxes),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let content = fs::read_to_string(path)?;
    let path_str = path.display().to_string();
    let mut lines = content.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path_str.clone(),
        offset: 0,
        message: "empty manifest".into(),
    })?;
    let expected = manifest_header();
    if header != expected {
        // Name the first offending column for the caller.
        let got: Vec<&str> = header.split(',').collect();
        let want: Vec<&str> = expected.split(',').collect();
        let culprit = want
            .iter()
            .zip(got.iter().chain(std::iter::repeat(&"<missing>")))
            .find(|(w, g)| w != g)
            .map(|(w, g)| format!("expected column `{w}`, found `{g}`"))
            .unwrap_or_else(|| "extra trailing columns".into());
        return Err(Error::Parse { path: path_str, offset: 0, message: culprit });
    }

    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + NUM_CLASSES + 1 {
            return Err(Error::Parse {
                path: path_str,
                offset: lineno as u64,
                message: format!(
                    "line {}: expected {} fields, got {}",
                    lineno + 1,
                    4 + NUM_CLASSES + 1,
                    fields.len()
                ),
            });
        }
        let mut labels = LabelVector::zeros();
        for c in 0..NUM_CLASSES {
            labels[c] = match fields[4 + c] {
                "0" => 0.0,
                "1" => 1.0,
                other => {
                    return Err(Error::Parse {
                        path: path_str,
                        offset: lineno as u64,
                        message: format!(
                            "line {}: label `{}` for {} is not binary",
                            lineno + 1,
                            other,
                            CLASS_NAMES[c]
                        ),
                    })
                }
            };
        }
        rows.push(ManifestRow {
            image_id: fields[0].to_string(),
            patient_id: fields[1].to_string(),
            image_path: fields[2].to_string(),
            mask_path: fields[3].to_string(),
            labels,
            lesion_boxes: unpack_boxes(fields[4 + NUM_CLASSES])?,
        });
    }
    Ok(rows)
}

// ── Evaluation report ───────────────────────────────────────────────────

/// Shortest-round-trip decimal formatting; stable across runs.
fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

/// One row per class in canonical order plus a Mean row; one column per
/// model.
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("pathology");
    for col in &report.columns {
        out.push(',');
        out.push_str(&col.name);
    }
    out.push('\n');
    for c in 0..NUM_CLASSES {
        out.push_str(CLASS_NAMES[c]);
        for col in &report.columns {
            out.push(',');
            out.push_str(&fmt_f64(col.per_class_auc[c]));
        }
        out.push('\n');
    }
    out.push_str("mean");
    for col in &report.columns {
        out.push(',');
        out.push_str(&fmt_f64(col.mean_auc));
    }
    out.push('\n');
    out
}

fn json_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn report_to_json(report: &EvalReport) -> String {
    let mut out = String::from("{\n  \"models\": [\n");
    for (i, col) in report.columns.iter().enumerate() {
        out.push_str("    {\"name\": \"");
        out.push_str(&json_escape(&col.name));
        out.push_str("\", \"per_class_auc\": {");
        for c in 0..NUM_CLASSES {
            if c > 0 {
                out.push_str(", ");
            }
            out.push_str(&format!("\"{}\": {}", CLASS_NAMES[c], fmt_f64(col.per_class_auc[c])));
        }
        out.push_str(&format!("}}, \"mean_auc\": {}}}", fmt_f64(col.mean_auc)));
        out.push_str(if i + 1 < report.columns.len() { ",\n" } else { "\n" });
    }
    out.push_str("  ],\n  \"paired_t_tests\": [\n");
    for (i, cmp) in report.comparisons.iter().enumerate() {
        out.push_str(&format!(
            "    {{\"a\": \"{}\", \"b\": \"{}\", \"t\": {}, \"p_two_tailed\": {}, \"degenerate\": {}}}",
            json_escape(&cmp.a),
            json_escape(&cmp.b),
            fmt_f64(cmp.result.t),
            fmt_f64(cmp.result.p_two_tailed),
            cmp.result.degenerate
        ));
        out.push_str(if i + 1 < report.comparisons.len() { ",\n" } else { "\n" });
    }
    out.push_str("  ],\n  \"fold_assignments\": [\n");
    for (i, (id, fold)) in report.fold_assignments.iter().enumerate() {
        out.push_str(&format!("    {{\"image_id\": \"{}\", \"fold\": {}}}", json_escape(id), fold));
        out.push_str(if i + 1 < report.fold_assignments.len() { ",\n" } else { "\n" });
    }
    out.push_str("  ]\n}\n");
    out
}

/// ROC curve as CSV for external plotting.
pub fn roc_to_csv(curve: &crate::metrics::RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        let t = if p.threshold.is_infinite() { "inf".to_string() } else { fmt_f64(p.threshold) };
        out.push_str(&format!("{t},{},{}\n", fmt_f64(p.fpr), fmt_f64(p.tpr)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Comparison, ModelColumn, TTestResult};
    use crate::rng::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("sdfn-io-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn pgm_8bit_round_trip_is_bitwise() {
        let mut rng = Rng::new(1);
        let data: Vec<f64> = (0..64 * 48).map(|_| (rng.below(256) as f64) / 255.0).collect();
        let img = GrayImage::from_data(64, 48, data).unwrap();
        let path = tmp("roundtrip8.pgm");
        write_pgm(&path, &img, 255).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.width, 64);
        assert_eq!(back.height, 48);
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn pgm_16bit_round_trip_is_bitwise() {
        let mut rng = Rng::new(2);
        let data: Vec<f64> = (0..16 * 16).map(|_| (rng.below(65536) as f64) / 65535.0).collect();
        let img = GrayImage::from_data(16, 16, data).unwrap();
        let path = tmp("roundtrip16.pgm");
        write_pgm(&path, &img, 65535).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn pgm_minimal_header_parses() {
        let path = tmp("minimal.pgm");
        fs::write(&path, b"P5 2 2 255\n\x01\x02\x03\x04").unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert!((img.data[3] - 4.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn pgm_with_comments_parses() {
        let path = tmp("comments.pgm");
        fs::write(&path, b"P5\n# a comment\n2 1\n# another\n255\n\x10\x20").unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
    }

    #[test]
    fn truncated_pgm_reports_byte_offset() {
        let path = tmp("truncated.pgm");
        fs::write(&path, b"P5\n4 4 255\n\x01\x02").unwrap();
        match read_pgm(&path) {
            Err(Error::Parse { offset, message, .. }) => {
                assert_eq!(offset, 13); // file length
                assert!(message.contains("truncated"), "{message}");
                assert!(message.contains("16"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_maxval_are_rejected() {
        let path = tmp("bad_magic.pgm");
        fs::write(&path, b"P6\n2 2 255\n\x01\x02\x03\x04").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::Parse { offset: 0, .. })));

        let path = tmp("bad_maxval.pgm");
        fs::write(&path, b"P5\n2 2 128\n\x01\x02\x03\x04").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    fn sample_rows(n: usize, seed: u64) -> Vec<ManifestRow> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|i| {
                let mut labels = LabelVector::zeros();
                let mut boxes = Vec::new();
                for c in 0..NUM_CLASSES {
                    if rng.chance(0.3) {
                        labels[c] = 1.0;
                        boxes.push(LesionBox {
                            class: c,
                            bbox: BoundingBox {
                                x0: rng.below(100),
                                y0: rng.below(100),
                                x1: 100 + rng.below(100),
                                y1: 100 + rng.below(100),
                            },
                        });
                    }
                }
                ManifestRow {
                    image_id: format!("img_{i:05}"),
                    patient_id: format!("pat_{:04}", i / 4),
                    image_path: format!("images/img_{i:05}.pgm"),
                    mask_path: format!("masks/img_{i:05}.pgm"),
                    labels,
                    lesion_boxes: boxes,
                }
            })
            .collect()
    }

    #[test]
    fn manifest_round_trip_of_100_records() {
        let rows = sample_rows(100, 33);
        let path = tmp("manifest.csv");
        write_manifest(&path, &rows).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn manifest_rejects_wrong_column_order_naming_the_column() {
        let path = tmp("bad_header.csv");
        // cardiomegaly and atelectasis swapped.
        let header = manifest_header().replace("atelectasis,cardiomegaly", "cardiomegaly,atelectasis");
        fs::write(&path, format!("{header}\n")).unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { message, .. }) => {
                assert!(message.contains("atelectasis"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_rejects_non_binary_labels() {
        let path = tmp("bad_labels.csv");
        let mut rows = sample_rows(1, 1);
        rows[0].labels[3] = 1.0;
        write_manifest(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace(",1,", ",0.7,");
        fs::write(&path, text).unwrap();
        match read_manifest(&path) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("not binary")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_patient_split_keeps_patients_whole() {
        let rows = sample_rows(120, 77);
        let path = tmp("split_manifest.csv");
        write_manifest(&path, &rows).unwrap();
        let back = read_manifest(&path).unwrap();
        let groups: Vec<String> = back.iter().map(|r| r.patient_id.clone()).collect();
        let folds = crate::metrics::kfold_split(&groups, 5, 3).unwrap();
        // Membership oracle: a patient's rows all live in exactly one fold.
        for (i, row) in back.iter().enumerate() {
            let homes: Vec<usize> =
                (0..5).filter(|&f| folds[f].contains(&i)).collect();
            assert_eq!(homes.len(), 1);
            for (j, other) in back.iter().enumerate() {
                if other.patient_id == row.patient_id {
                    assert!(folds[homes[0]].contains(&j), "patient {} split", row.patient_id);
                }
            }
        }
    }

    #[test]
    fn report_serializes_to_csv_and_json() {
        let col_a = ModelColumn::new("global", [0.7; NUM_CLASSES]).unwrap();
        let col_b = ModelColumn::new("fused", [0.8; NUM_CLASSES]).unwrap();
        let report = EvalReport {
            columns: vec![col_a, col_b],
            comparisons: vec![Comparison {
                a: "fused".into(),
                b: "global".into(),
                result: TTestResult { t: 3.2, p_two_tailed: 0.004, degenerate: false },
            }],
            fold_assignments: vec![("img_00000".into(), 0), ("img_00001".into(), 3)],
        };
        let csv = report_to_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + NUM_CLASSES + 1);
        assert_eq!(lines[0], "pathology,global,fused");
        assert!(lines[1].starts_with("atelectasis,0.7,0.8"));
        assert!(lines.last().unwrap().starts_with("mean,0.7"));

        let json = report_to_json(&report);
        assert!(json.contains("\"mean_auc\": 0.8"));
        assert!(json.contains("\"p_two_tailed\": 0.004"));
        assert!(json.contains("\"fold\": 3"));
    }

    #[test]
    fn roc_csv_lists_anchors() {
        let (curve, _) =
            crate::metrics::roc_auc(&[0.9, 0.4, 0.4, 0.1], &[true, true, false, false]).unwrap();
        let csv = roc_to_csv(&curve);
        assert!(csv.starts_with("threshold,fpr,tpr\ninf,0.0,0.0\n"));
        assert!(csv.trim_end().ends_with("0.1,1.0,1.0"));
    }
}
