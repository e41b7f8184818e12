//! Traffic-sign dataset loading: semicolon-separated annotation CSVs with
//! ROI columns, images cropped to the ROI and resized to 32x32 RGB.
//!
//! Expected layout: `<dir>/<split>/` holds one or more annotation CSVs
//! (header `Filename;Width;Height;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId`);
//! image paths are relative to the CSV's directory. The official per-class
//! training directories fit this shape directly.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use sha2::{Digest, Sha256};

use super::{Dataset, Manifest};
use crate::error::{Result, ScnError};
use crate::tensor::Tensor;

pub const GTSRB_SIZE: usize = 32;
pub const GTSRB_CLASSES: usize = 43;

pub fn load_gtsrb(dir: &Path, split: &str) -> Result<Dataset> {
    let split_dir = dir.join(split);
    let mut csv_files = Vec::new();
    collect_csvs(&split_dir, &mut csv_files)?;
    csv_files.sort();
    if csv_files.is_empty() {
        return Err(ScnError::Config(format!(
            "no annotation CSVs under {}",
            split_dir.display()
        )));
    }

    let mut pixels: Vec<f64> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut manifest = Manifest::default();
    manifest.push("dataset", "gtsrb");
    manifest.push("split", split);
    manifest.push("resize", format!("{0}x{0}", GTSRB_SIZE));

    for csv_path in &csv_files {
        let text = std::fs::read_to_string(csv_path).map_err(|e| ScnError::io(csv_path, e))?;
        manifest.push("annotations", csv_path.display().to_string());
        manifest.push(
            "annotations_sha256",
            hex::encode(Sha256::digest(text.as_bytes())),
        );
        let base = csv_path.parent().unwrap_or(Path::new("."));
        for (ln, line) in text.lines().enumerate() {
            if ln == 0 || line.trim().is_empty() {
                continue; // header
            }
            let row = parse_row(line, csv_path, ln + 1)?;
            let img_path = base.join(&row.filename);
            let img = image::open(&img_path).map_err(|e| ScnError::Corrupt {
                path: img_path.clone(),
                detail: format!("referenced by {}:{}: {}", csv_path.display(), ln + 1, e),
            })?;
            let rgb = img.to_rgb8();
            let (iw, ih) = (rgb.width(), rgb.height());
            let x1 = row.x1.min(iw.saturating_sub(1));
            let y1 = row.y1.min(ih.saturating_sub(1));
            let x2 = row.x2.clamp(x1 + 1, iw);
            let y2 = row.y2.clamp(y1 + 1, ih);
            let cropped = image::imageops::crop_imm(&rgb, x1, y1, x2 - x1, y2 - y1).to_image();
            let resized = image::imageops::resize(
                &cropped,
                GTSRB_SIZE as u32,
                GTSRB_SIZE as u32,
                FilterType::Triangle,
            );
            // planar [C, H, W]
            for ch in 0..3 {
                for py in 0..GTSRB_SIZE {
                    for px in 0..GTSRB_SIZE {
                        pixels.push(resized.get_pixel(px as u32, py as u32)[ch] as f64 / 255.0);
                    }
                }
            }
            labels.push(row.class_id);
        }
    }

    let n = labels.len();
    Dataset::new(
        format!("gtsrb-{}", split),
        Tensor::new(vec![n, 3, GTSRB_SIZE, GTSRB_SIZE], pixels)?,
        labels,
        GTSRB_CLASSES,
        manifest,
    )
}

fn collect_csvs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| ScnError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| ScnError::io(dir, e))?;
        paths.push(entry.path());
    }
    paths.sort();
    for path in paths {
        if path.is_dir() {
            collect_csvs(&path, out)?;
        } else if path.extension().map(|e| e == "csv").unwrap_or(false) {
            out.push(path);
        }
    }
    Ok(())
}

struct Row {
    filename: String,
    x1: u32,
    y1: u32,
    x2: u32,
    y2: u32,
    class_id: u8,
}

fn parse_row(line: &str, path: &Path, ln: usize) -> Result<Row> {
    let fields: Vec<&str> = line.split(';').collect();
    let err = |detail: String| ScnError::Parse {
        path: PathBuf::from(path),
        offset: ln as u64,
        detail,
    };
    if fields.len() < 8 {
        return Err(err(format!(
            "row has {} fields, annotation rows need 8",
            fields.len()
        )));
    }
    let num = |s: &str, name: &str| -> Result<u32> {
        s.trim()
            .parse()
            .map_err(|_| err(format!("bad {}: {}", name, s)))
    };
    let class: u32 = num(fields[7], "ClassId")?;
    if class as usize >= GTSRB_CLASSES {
        return Err(err(format!("class {} outside 0..{}", class, GTSRB_CLASSES)));
    }
    Ok(Row {
        filename: fields[0].trim().to_string(),
        x1: num(fields[3], "Roi.X1")?,
        y1: num(fields[4], "Roi.Y1")?,
        x2: num(fields[5], "Roi.X2")?,
        y2: num(fields[6], "Roi.Y2")?,
        class_id: class as u8,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_ppm(path: &Path, w: u32, h: u32, rgb: [u8; 3]) {
        let mut bytes = format!("P6\n{} {}\n255\n", w, h).into_bytes();
        for _ in 0..w * h {
            bytes.extend_from_slice(&rgb);
        }
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn loads_synthetic_layout() {
        let dir = tempfile::tempdir().unwrap();
        let split = dir.path().join("train").join("00001");
        std::fs::create_dir_all(&split).unwrap();
        write_ppm(&split.join("a.ppm"), 40, 40, [200, 30, 30]);
        write_ppm(&split.join("b.ppm"), 50, 60, [30, 30, 200]);
        std::fs::write(
            split.join("GT-00001.csv"),
            "Filename;Width;Height;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId\n\
             a.ppm;40;40;2;2;38;38;1\n\
             b.ppm;50;60;0;0;50;60;2\n",
        )
        .unwrap();
        let ds = load_gtsrb(dir.path(), "train").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_dims(), (3, 32, 32));
        assert_eq!(ds.labels, vec![1, 2]);
        // first image red-ish: channel 0 high, channel 2 low
        let img = ds.image_data(0);
        assert!(img[0] > 0.7 && img[2 * 32 * 32] < 0.2);
    }

    #[test]
    fn missing_image_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let split = dir.path().join("test");
        std::fs::create_dir_all(&split).unwrap();
        std::fs::write(
            split.join("GT-final_test.csv"),
            "Filename;Width;Height;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId\n\
             missing.ppm;40;40;0;0;40;40;0\n",
        )
        .unwrap();
        let err = load_gtsrb(dir.path(), "test").unwrap_err();
        assert!(err.to_string().contains("missing.ppm"), "{}", err);
    }

    #[test]
    fn bad_class_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let split = dir.path().join("train");
        std::fs::create_dir_all(&split).unwrap();
        write_ppm(&split.join("a.ppm"), 10, 10, [0, 0, 0]);
        std::fs::write(
            split.join("GT.csv"),
            "Filename;Width;Height;Roi.X1;Roi.Y1;Roi.X2;Roi.Y2;ClassId\n\
             a.ppm;10;10;0;0;10;10;99\n",
        )
        .unwrap();
        assert!(load_gtsrb(dir.path(), "train").is_err());
    }
}
