//! Dataset schema, annotation ingestion, and split-driven label filtering.
//!
//! The on-disk layout follows the HICO-DET-like convention: one JSON
//! document listing images and pair annotations with pixel-coordinate
//! corner boxes; pixels live in image files next to it. Boxes are
//! normalized to the unit square on load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxN, Corners};
use crate::label_space::{LabelSpace, SplitSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file: String,
}

/// One annotated human-object pair; `verb_ids` may hold several verbs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairAnnotation {
    pub image_id: u64,
    /// Pixel corner box [x1, y1, x2, y2].
    pub h_bbox: [f64; 4],
    pub o_bbox: [f64; 4],
    pub object_id: usize,
    pub verb_ids: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<PairAnnotation>,
}

impl Dataset {
    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Check id ranges and that every (verb, object) pair names a real HOI.
    pub fn validate(&self, space: &LabelSpace) -> Result<()> {
        let ids: std::collections::HashSet<u64> = self.images.iter().map(|i| i.id).collect();
        if ids.len() != self.images.len() {
            return Err(Error::validation("duplicate image ids"));
        }
        for ann in &self.annotations {
            if !ids.contains(&ann.image_id) {
                return Err(Error::validation(format!(
                    "annotation references unknown image {}",
                    ann.image_id
                )));
            }
            if ann.object_id >= space.n_objects() {
                return Err(Error::validation(format!(
                    "object id {} out of range",
                    ann.object_id
                )));
            }
            for &v in &ann.verb_ids {
                if space.hoi_id(v, ann.object_id).is_none() {
                    return Err(Error::validation(format!(
                        "pair (verb {v}, object {}) is not a known HOI",
                        ann.object_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One ground-truth pair with normalized boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtPair {
    pub h_box: BoxN,
    pub o_box: BoxN,
    pub object_id: usize,
    pub verb_ids: Vec<usize>,
}

impl GtPair {
    pub fn hoi_ids(&self, space: &LabelSpace) -> Vec<usize> {
        self.verb_ids
            .iter()
            .filter_map(|&v| space.hoi_id(v, self.object_id))
            .collect()
    }
}

/// An image ready for the pipeline: pixels plus its ground-truth pairs.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: u64,
    /// [3, H, W] in [0, 1].
    pub pixels: Tensor,
    pub gts: Vec<GtPair>,
}

/// Remove unseen-HOI labels from training annotations. A verb survives only
/// if its (verb, object) pair is a seen HOI; a pair annotation whose verbs
/// all vanish is dropped. Images are always retained. Idempotent.
pub fn filter_training_annotations(
    dataset: &Dataset,
    split: &SplitSpec,
    space: &LabelSpace,
) -> Dataset {
    let annotations = dataset
        .annotations
        .iter()
        .filter_map(|ann| {
            let kept: Vec<usize> = ann
                .verb_ids
                .iter()
                .copied()
                .filter(|&v| {
                    space
                        .hoi_id(v, ann.object_id)
                        .map(|h| !split.is_unseen(h))
                        .unwrap_or(false)
                })
                .collect();
            if kept.is_empty() {
                None
            } else {
                Some(PairAnnotation {
                    verb_ids: kept,
                    ..ann.clone()
                })
            }
        })
        .collect();
    Dataset {
        images: dataset.images.clone(),
        annotations,
    }
}

/// Same filtering applied to in-memory samples.
pub fn filter_samples(samples: &[Sample], split: &SplitSpec, space: &LabelSpace) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| {
            let gts = s
                .gts
                .iter()
                .filter_map(|gt| {
                    let kept: Vec<usize> = gt
                        .verb_ids
                        .iter()
                        .copied()
                        .filter(|&v| {
                            space
                                .hoi_id(v, gt.object_id)
                                .map(|h| !split.is_unseen(h))
                                .unwrap_or(false)
                        })
                        .collect();
                    if kept.is_empty() {
                        None
                    } else {
                        Some(GtPair {
                            verb_ids: kept,
                            ..gt.clone()
                        })
                    }
                })
                .collect();
            Sample {
                image_id: s.image_id,
                pixels: s.pixels.clone(),
                gts,
            }
        })
        .collect()
}

/// Per-HOI instance counts across a dataset's annotations.
pub fn label_census(dataset: &Dataset, space: &LabelSpace) -> Vec<u64> {
    let mut counts = vec![0u64; space.n_hois()];
    for ann in &dataset.annotations {
        for &v in &ann.verb_ids {
            if let Some(h) = space.hoi_id(v, ann.object_id) {
                counts[h] += 1;
            }
        }
    }
    counts
}

/// Per-HOI instance counts across in-memory samples.
pub fn sample_census(samples: &[Sample], space: &LabelSpace) -> Vec<u64> {
    let mut counts = vec![0u64; space.n_hois()];
    for s in samples {
        for gt in &s.gts {
            for &v in &gt.verb_ids {
                if let Some(h) = space.hoi_id(v, gt.object_id) {
                    counts[h] += 1;
                }
            }
        }
    }
    counts
}

/// Convert annotations to normalized ground truth grouped by image, in the
/// dataset's image order.
pub fn ground_truth_by_image(dataset: &Dataset) -> Vec<(u64, Vec<GtPair>)> {
    let mut by_image: BTreeMap<u64, Vec<GtPair>> = BTreeMap::new();
    let dims: BTreeMap<u64, (f64, f64)> = dataset
        .images
        .iter()
        .map(|i| (i.id, (i.width as f64, i.height as f64)))
        .collect();
    for img in &dataset.images {
        by_image.insert(img.id, Vec::new());
    }
    for ann in &dataset.annotations {
        let (w, h) = dims[&ann.image_id];
        let norm = |b: [f64; 4]| {
            Corners::new(b[0] / w, b[1] / h, b[2] / w, b[3] / h)
                .to_center()
                .clamped()
        };
        by_image.entry(ann.image_id).or_default().push(GtPair {
            h_box: norm(ann.h_bbox),
            o_box: norm(ann.o_bbox),
            object_id: ann.object_id,
            verb_ids: {
                let mut v = ann.verb_ids.clone();
                v.sort_unstable();
                v.dedup();
                v
            },
        });
    }
    dataset
        .images
        .iter()
        .map(|img| (img.id, by_image.remove(&img.id).unwrap_or_default()))
        .collect()
}

/// Load dataset samples, reading image files relative to the dataset dir.
pub fn load_samples(dataset: &Dataset, dir: &Path) -> Result<Vec<Sample>> {
    let gts = ground_truth_by_image(dataset);
    let mut samples = Vec::with_capacity(dataset.images.len());
    for (img, (id, pairs)) in dataset.images.iter().zip(gts) {
        debug_assert_eq!(img.id, id);
        let pixels = load_image_tensor(&dir.join(&img.file))?;
        samples.push(Sample {
            image_id: img.id,
            pixels,
            gts: pairs,
        });
    }
    Ok(samples)
}

/// Read an RGB image file into a [3, H, W] tensor scaled to [0, 1].
pub fn load_image_tensor(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::runtime(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

/// Write a [3, H, W] tensor in [0, 1] to a PNG file.
pub fn save_image_tensor(pixels: &Tensor, path: &Path) -> Result<()> {
    let s = pixels.shape();
    assert_eq!(s.len(), 3);
    let (h, w) = (s[1], s[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (pixels.data()[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path)
        .map_err(|e| Error::runtime(format!("cannot write image {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_space::{make_split, Setting, SplitParams};

    fn toy_space() -> LabelSpace {
        let mut pairs = Vec::new();
        for v in 0..3 {
            for o in 0..2 {
                pairs.push((v, o));
            }
        }
        LabelSpace::build(
            vec!["above".into(), "below".into(), "near".into()],
            vec!["disk".into(), "block".into()],
            pairs,
            vec![5, 5, 5, 5, 5, 5],
            10,
        )
        .unwrap()
    }

    fn toy_dataset() -> Dataset {
        Dataset {
            images: vec![ImageRecord {
                id: 0,
                width: 100,
                height: 100,
                file: "0.png".into(),
            }],
            annotations: vec![
                PairAnnotation {
                    image_id: 0,
                    h_bbox: [10.0, 10.0, 30.0, 40.0],
                    o_bbox: [50.0, 50.0, 70.0, 90.0],
                    object_id: 0,
                    verb_ids: vec![0, 2],
                },
                PairAnnotation {
                    image_id: 0,
                    h_bbox: [5.0, 5.0, 25.0, 35.0],
                    o_bbox: [40.0, 10.0, 60.0, 30.0],
                    object_id: 1,
                    verb_ids: vec![1],
                },
            ],
        }
    }

    #[test]
    fn full_split_leaves_dataset_unchanged() {
        let space = toy_space();
        let ds = toy_dataset();
        let out = filter_training_annotations(&ds, &SplitSpec::full(), &space);
        assert_eq!(serde_json::to_string(&out).unwrap(), serde_json::to_string(&ds).unwrap());
    }

    #[test]
    fn mixed_annotation_keeps_only_seen_verbs() {
        let space = toy_space();
        let ds = toy_dataset();
        // make (verb 2, object 0) unseen: annotation 0 keeps verb 0 only
        let split = SplitSpec {
            setting: Setting::Uc,
            seed: 0,
            unseen_hoi_ids: vec![space.hoi_id(2, 0).unwrap()],
        };
        let out = filter_training_annotations(&ds, &split, &space);
        assert_eq!(out.annotations[0].verb_ids, vec![0]);
        assert_eq!(out.annotations.len(), 2);
        assert_eq!(out.images.len(), 1);
    }

    #[test]
    fn uv_filter_removes_every_unseen_verb_label_by_census() {
        let space = toy_space();
        let ds = toy_dataset();
        let split = make_split(&space, Setting::Uv, &SplitParams::explicit(vec![1]), 0).unwrap();
        let out = filter_training_annotations(&ds, &split, &space);
        // brute-force label census: no verb-1 labels remain, others intact
        let counts = label_census(&out, &space);
        for h in 0..space.n_hois() {
            let (v, _) = space.hoi(h);
            if v == 1 {
                assert_eq!(counts[h], 0);
            } else {
                assert_eq!(counts[h], label_census(&ds, &space)[h]);
            }
        }
        // annotation with only verb 1 dropped entirely
        assert_eq!(out.annotations.len(), 1);
    }

    #[test]
    fn filter_is_idempotent() {
        let space = toy_space();
        let ds = toy_dataset();
        let split = SplitSpec {
            setting: Setting::Uc,
            seed: 0,
            unseen_hoi_ids: vec![0, 3],
        };
        let once = filter_training_annotations(&ds, &split, &space);
        let twice = filter_training_annotations(&once, &split, &space);
        assert_eq!(serde_json::to_string(&once).unwrap(), serde_json::to_string(&twice).unwrap());
    }

    #[test]
    fn ground_truth_normalizes_pixel_boxes() {
        let ds = toy_dataset();
        let gts = ground_truth_by_image(&ds);
        assert_eq!(gts.len(), 1);
        let pair = &gts[0].1[0];
        let c = pair.h_box.to_corners();
        assert!((c.x1 - 0.1).abs() < 1e-12);
        assert!((c.y2 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn validate_rejects_unknown_pairs() {
        let space = toy_space();
        let mut ds = toy_dataset();
        ds.annotations[0].object_id = 7;
        assert!(ds.validate(&space).is_err());
    }
}
