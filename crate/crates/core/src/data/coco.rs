//! Aligned RGB/IR pairs described by a COCO annotation file.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{Image, PairedSample};
use crate::detect::{BoundingBox, DetectionSet};
use crate::error::{MipaError, Result};

/// Maps an RGB file name to its IR counterpart by substring substitution,
/// e.g. `visible` → `infrared`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingRule {
    pub from: String,
    pub to: String,
}

impl PairingRule {
    pub fn counterpart(&self, rgb_name: &str) -> String {
        rgb_name.replace(&self.from, &self.to)
    }
}

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    #[serde(default)]
    width: Option<u32>,
    #[serde(default)]
    height: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    /// `[x, y, w, h]` in absolute pixels.
    bbox: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    #[allow(dead_code)]
    #[serde(default)]
    name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped: usize,
    pub skipped_files: Vec<String>,
}

/// Lazily decodes pairs in annotation order.
pub struct CocoPairStream {
    root: PathBuf,
    rule: PairingRule,
    target: [usize; 2],
    images: std::vec::IntoIter<CocoImage>,
    boxes: HashMap<u64, Vec<(usize, [f64; 4])>>,
    report: LoadReport,
    pub num_classes: usize,
}

impl CocoPairStream {
    pub fn report(&self) -> &LoadReport {
        &self.report
    }

    fn load_pair(&self, img: &CocoImage) -> Result<Option<PairedSample>> {
        let rgb_path = self.root.join(&img.file_name);
        let ir_path = self.root.join(self.rule.counterpart(&img.file_name));
        for p in [&rgb_path, &ir_path] {
            if !p.exists() {
                log::warn!("skipping image {}: missing {}", img.id, p.display());
                return Ok(None);
            }
        }
        let rgb = image::open(&rgb_path)?;
        let ir = image::open(&ir_path)?;
        let orig_w = img.width.unwrap_or(rgb.width()) as f64;
        let orig_h = img.height.unwrap_or(rgb.height()) as f64;
        let [th, tw] = self.target;
        let rgb = rgb
            .resize_exact(tw as u32, th as u32, FilterType::Triangle)
            .to_rgb8();
        let ir = ir
            .resize_exact(tw as u32, th as u32, FilterType::Triangle)
            .to_luma8();
        let image_g: Image = Array3::from_shape_fn((th, tw, 3), |(y, x, c)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        // Single-channel IR replicated over three channels.
        let image_f: Image = Array3::from_shape_fn((th, tw, 3), |(y, x, _)| {
            ir.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
        });
        let (sx, sy) = (tw as f64 / orig_w, th as f64 / orig_h);
        let mut boxes = Vec::new();
        let mut masks = Vec::new();
        for &(class_id, [x, y, w, h]) in self.boxes.get(&img.id).map(|v| v.as_slice()).unwrap_or(&[]) {
            let (ax, ay, aw, ah) = (x * sx, y * sy, w * sx, h * sy);
            let b = BoundingBox::gt(
                ((ax + aw / 2.0) / tw as f64).clamp(0.0, 1.0),
                ((ay + ah / 2.0) / th as f64).clamp(0.0, 1.0),
                (aw / tw as f64).min(1.0),
                (ah / th as f64).min(1.0),
                class_id,
            );
            if !b.is_valid() {
                continue;
            }
            masks.push(Array2::from_shape_fn((th, tw), |(py, px)| {
                let (px, py) = (px as f64 + 0.5, py as f64 + 0.5);
                px >= ax && px < ax + aw && py >= ay && py < ay + ah
            }));
            boxes.push(b);
        }
        Ok(Some(PairedSample {
            image_f,
            image_g,
            requested_objects: boxes.len(),
            gt: DetectionSet::new(img.id, boxes),
            scene_id: img.id,
            object_masks: masks,
        }))
    }
}

impl Iterator for CocoPairStream {
    type Item = Result<PairedSample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let img = self.images.next()?;
            match self.load_pair(&img) {
                Ok(Some(s)) => {
                    self.report.loaded += 1;
                    return Some(Ok(s));
                }
                Ok(None) => {
                    self.report.skipped += 1;
                    self.report.skipped_files.push(img.file_name);
                }
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

/// Parse the annotation file and return a stream of aligned pairs resized
/// to `target = [H, W]`, which must be divisible by `patch_size`.
pub fn load_coco_pairs(
    root_path: &Path,
    annotation_file: &Path,
    pairing_rule: &PairingRule,
    target: [usize; 2],
    patch_size: usize,
) -> Result<CocoPairStream> {
    if patch_size == 0 || target[0] % patch_size != 0 || target[1] % patch_size != 0 {
        return Err(MipaError::Config(format!(
            "target size {}x{} not divisible by patch size {patch_size}",
            target[0], target[1]
        )));
    }
    let text = std::fs::read_to_string(annotation_file)?;
    let ann_err = |msg: String| MipaError::Annotation {
        path: annotation_file.display().to_string(),
        msg,
    };
    let coco: CocoFile = serde_json::from_str(&text)
        .map_err(|e| ann_err(format!("line {} column {}: {e}", e.line(), e.column())))?;
    let cat_index: BTreeMap<u64, usize> = {
        let mut ids: Vec<u64> = coco.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
    };
    let mut boxes: HashMap<u64, Vec<(usize, [f64; 4])>> = HashMap::new();
    for (k, a) in coco.annotations.iter().enumerate() {
        let class = *cat_index
            .get(&a.category_id)
            .ok_or_else(|| ann_err(format!("annotation #{k}: unknown category {}", a.category_id)))?;
        if a.bbox[2] <= 0.0 || a.bbox[3] <= 0.0 {
            return Err(ann_err(format!("annotation #{k}: non-positive box size")));
        }
        boxes.entry(a.image_id).or_default().push((class, a.bbox));
    }
    Ok(CocoPairStream {
        root: root_path.to_path_buf(),
        rule: pairing_rule.clone(),
        target,
        num_classes: cat_index.len(),
        images: coco.images.into_iter().collect::<Vec<_>>().into_iter(),
        boxes,
        report: LoadReport::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn write_png(path: &Path, w: u32, h: u32, grey: bool) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        if grey {
            image::GrayImage::from_fn(w, h, |x, _| image::Luma([(x % 256) as u8])).save(path).unwrap();
        } else {
            image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 7]))
                .save(path)
                .unwrap();
        }
    }

    fn rule() -> PairingRule {
        PairingRule {
            from: "visible".into(),
            to: "infrared".into(),
        }
    }

    #[test]
    fn rescaled_boxes_llvip_geometry() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("visible/a.png"), 1280, 1024, false);
        write_png(&dir.path().join("infrared/a.png"), 1280, 1024, true);
        let ann = dir.path().join("ann.json");
        std::fs::write(
            &ann,
            r#"{"images":[{"id":1,"file_name":"visible/a.png","width":1280,"height":1024}],
                "annotations":[{"image_id":1,"category_id":1,"bbox":[100,100,50,50]}],
                "categories":[{"id":1,"name":"person"}]}"#,
        )
        .unwrap();
        let samples: Vec<PairedSample> = load_coco_pairs(dir.path(), &ann, &rule(), [512, 640], 4)
            .unwrap()
            .map(|s| s.unwrap())
            .collect();
        assert_eq!(samples.len(), 1);
        let b = samples[0].gt.boxes[0];
        assert_abs_diff_eq!(b.cx, 0.0977, epsilon = 1e-4);
        assert_abs_diff_eq!(b.cy, 0.1221, epsilon = 1e-4);
        assert_abs_diff_eq!(b.w, 0.0391, epsilon = 1e-4);
        assert_abs_diff_eq!(b.h, 0.0488, epsilon = 1e-4);
        assert_eq!(samples[0].image_f.dim(), (512, 640, 3));
        let f = &samples[0].image_f;
        assert!((0..3).all(|c| f[[10, 300, c]] == f[[10, 300, 0]]));
    }

    #[test]
    fn missing_counterpart_is_skipped_and_reported() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["x", "y"] {
            write_png(&dir.path().join(format!("visible/{name}.png")), 64, 48, false);
        }
        write_png(&dir.path().join("infrared/x.png"), 64, 48, true);
        write_png(&dir.path().join("infrared/y.png"), 64, 48, true);
        let ann = dir.path().join("ann.json");
        std::fs::write(
            &ann,
            r#"{"images":[{"id":1,"file_name":"visible/x.png"},{"id":2,"file_name":"visible/y.png"},
                          {"id":3,"file_name":"visible/missing.png"}],
                "annotations":[{"image_id":1,"category_id":4,"bbox":[8,8,16,16]}],
                "categories":[{"id":4,"name":"car"},{"id":2,"name":"person"}]}"#,
        )
        .unwrap();
        let mut stream = load_coco_pairs(dir.path(), &ann, &rule(), [32, 32], 4).unwrap();
        let samples: Vec<PairedSample> = stream.by_ref().map(|s| s.unwrap()).collect();
        assert_eq!(samples.len(), 2);
        assert_eq!(stream.report().skipped, 1);
        assert_eq!(stream.report().loaded, 2);
        assert_eq!(stream.num_classes, 2);
        // category 4 sorts after 2
        assert_eq!(samples[0].gt.boxes[0].class_id, 1);
        assert!(samples[1].gt.boxes.is_empty());
    }

    #[test]
    fn malformed_annotation_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let ann = dir.path().join("broken.json");
        std::fs::write(&ann, "{\"images\": [\n  {\"id\": 1,, }\n]}").unwrap();
        let err = load_coco_pairs(dir.path(), &ann, &rule(), [32, 32], 4).err().unwrap().to_string();
        assert!(err.contains("broken.json") && err.contains("line 2"), "{err}");
        assert!(load_coco_pairs(dir.path(), &ann, &rule(), [30, 32], 4).is_err());
    }
}
