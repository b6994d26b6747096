//! Write paired samples to disk in the COCO layout that
//! [`load_coco_pairs`](super::load_coco_pairs) reads back.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde_json::json;

use super::synth::PairedSample;
use crate::error::Result;

pub const RGB_DIR: &str = "visible";
pub const IR_DIR: &str = "infrared";

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `visible/<id>.png`, `infrared/<id>.png` under `root` and the
/// annotation file `root/<annotation_name>`; returns the annotation path.
/// IR is stored as 8-bit grey (the first channel).
pub fn write_coco_pairs(samples: &[PairedSample], root: &Path, annotation_name: &str, num_classes: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(root.join(RGB_DIR))?;
    std::fs::create_dir_all(root.join(IR_DIR))?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for s in samples {
        let (h, w, _) = s.image_g.dim();
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([to_u8(s.image_g[[y, x, 0]]), to_u8(s.image_g[[y, x, 1]]), to_u8(s.image_g[[y, x, 2]])])
        });
        let ir = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(s.image_f[[y as usize, x as usize, 0]])]));
        let name = format!("{:010}.png", s.scene_id);
        rgb.save(root.join(RGB_DIR).join(&name))?;
        ir.save(root.join(IR_DIR).join(&name))?;
        images.push(json!({
            "id": s.scene_id,
            "file_name": format!("{RGB_DIR}/{name}"),
            "width": w,
            "height": h,
        }));
        for b in &s.gt.boxes {
            let [x0, y0, x1, y1] = b.xyxy();
            let (bx, by) = (x0 * w as f64, y0 * h as f64);
            let (bw, bh) = ((x1 - x0) * w as f64, (y1 - y0) * h as f64);
            annotations.push(json!({
                "id": annotations.len() + 1,
                "image_id": s.scene_id,
                "category_id": b.class_id + 1,
                "bbox": [bx, by, bw, bh],
                "area": bw * bh,
                "iscrowd": 0,
            }));
        }
    }
    let categories: Vec<_> = (0..num_classes)
        .map(|k| json!({"id": k + 1, "name": format!("class_{k}")}))
        .collect();
    let path = root.join(annotation_name);
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&json!({
            "images": images,
            "annotations": annotations,
            "categories": categories,
        }))?,
    )?;
    Ok(path)
}
