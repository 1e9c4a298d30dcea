//! COCO person-keypoints annotations (subset: `images`, and per annotation
//! `image_id`, `bbox`, `keypoints`, `num_keypoints`, `iscrowd`).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::losses::Keypoint;
use crate::model::NUM_KEYPOINTS;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct CocoImage {
    pub id: u64,
    pub file_name: String,
    #[serde(default)]
    pub width: Option<u32>,
    #[serde(default)]
    pub height: Option<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct CocoAnnotation {
    #[serde(default)]
    pub id: Option<u64>,
    pub image_id: u64,
    #[serde(default)]
    pub category_id: Option<u64>,
    /// `[x, y, width, height]` of the top-left corner form.
    pub bbox: Vec<f64>,
    pub keypoints: Vec<f64>,
    pub num_keypoints: usize,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
}

/// One annotated person in a still image, in image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointInstance {
    pub image: PathBuf,
    pub bbox: BBox,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Clone, Debug, Default)]
pub struct CocoInstances {
    pub instances: Vec<KeypointInstance>,
    /// Instances dropped because their image file does not exist.
    pub missing_images: usize,
    /// Crowd annotations, which carry no usable keypoints.
    pub crowd: usize,
}

fn malformed(i: usize, what: impl std::fmt::Display) -> Error {
    Error::Data(format!("annotation {i}: {what}"))
}

/// Parses one annotation. Visibility flags 1 (labeled, occluded) and 2
/// (visible) both count as visible.
pub(crate) fn parse_annotation(i: usize, a: &CocoAnnotation) -> Result<(BBox, Vec<Keypoint>)> {
    let [x, y, w, h] = <[f64; 4]>::try_from(a.bbox.as_slice())
        .map_err(|_| malformed(i, format!("bbox has {} values", a.bbox.len())))?;
    let bbox = BBox::from_corners(x, y, x + w, y + h).map_err(|e| malformed(i, e))?;
    if a.keypoints.len() != 3 * NUM_KEYPOINTS {
        return Err(malformed(
            i,
            format!(
                "expected {} keypoint values, got {}",
                3 * NUM_KEYPOINTS,
                a.keypoints.len()
            ),
        ));
    }
    let keypoints: Vec<Keypoint> = a
        .keypoints
        .chunks_exact(3)
        .map(|t| match t[2] as i64 {
            0 => Ok(Keypoint {
                x: t[0],
                y: t[1],
                visible: false,
            }),
            1 | 2 => Ok(Keypoint {
                x: t[0],
                y: t[1],
                visible: true,
            }),
            v => Err(malformed(i, format!("visibility flag {v}"))),
        })
        .collect::<Result<_>>()?;
    let labeled = keypoints.iter().filter(|k| k.visible).count();
    if labeled != a.num_keypoints {
        return Err(malformed(
            i,
            format!("num_keypoints {} but {labeled} labeled", a.num_keypoints),
        ));
    }
    Ok((bbox, keypoints))
}

/// Reads an annotation file; image paths are resolved against `image_root`.
pub fn load_coco_keypoints(annotations: &Path, image_root: &Path) -> Result<CocoInstances> {
    let text = std::fs::read_to_string(annotations).map_err(|e| Error::io(annotations, e))?;
    let file: CocoFile = serde_json::from_str(&text)?;
    let images: HashMap<u64, &CocoImage> = file.images.iter().map(|im| (im.id, im)).collect();
    let mut out = CocoInstances::default();
    for (i, a) in file.annotations.iter().enumerate() {
        if a.iscrowd != 0 {
            out.crowd += 1;
            continue;
        }
        let image = images
            .get(&a.image_id)
            .ok_or_else(|| malformed(i, format!("unknown image id {}", a.image_id)))?;
        let (bbox, keypoints) = parse_annotation(i, a)?;
        let path = image_root.join(&image.file_name);
        if !path.exists() {
            out.missing_images += 1;
            continue;
        }
        out.instances.push(KeypointInstance {
            image: path,
            bbox,
            keypoints,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, json: &str) -> PathBuf {
        let p = dir.join("ann.json");
        std::fs::write(&p, json).unwrap();
        p
    }

    fn kps(flags: &[u8]) -> String {
        let v: Vec<String> = (0..17)
            .map(|k| {
                format!(
                    "{},{},{}",
                    10 + k,
                    20 + k,
                    flags.get(k).copied().unwrap_or(0)
                )
            })
            .collect();
        v.join(",")
    }

    #[test]
    fn parses_instances_and_counts_missing_images() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"").unwrap();
        let json = format!(
            r#"{{"images": [{{"id": 1, "file_name": "a.png", "width": 64, "height": 64, "license": 3}},
                           {{"id": 2, "file_name": "gone.png"}}],
               "annotations": [
                 {{"id": 5, "image_id": 1, "category_id": 1, "bbox": [4, 6, 20, 30], "keypoints": [{}], "num_keypoints": 2, "iscrowd": 0, "area": 1.0}},
                 {{"id": 6, "image_id": 1, "bbox": [4, 6, 20, 30], "keypoints": [{}], "num_keypoints": 0, "iscrowd": 0}},
                 {{"id": 7, "image_id": 2, "bbox": [1, 1, 5, 5], "keypoints": [{}], "num_keypoints": 0, "iscrowd": 0}},
                 {{"id": 8, "image_id": 1, "bbox": [1, 1, 5, 5], "keypoints": [{}], "num_keypoints": 0, "iscrowd": 1}}
               ]}}"#,
            kps(&[2, 1]),
            kps(&[]),
            kps(&[]),
            kps(&[])
        );
        let out = load_coco_keypoints(&write(dir.path(), &json), dir.path()).unwrap();
        assert_eq!(out.instances.len(), 2);
        assert_eq!(out.missing_images, 1);
        assert_eq!(out.crowd, 1);
        let first = &out.instances[0];
        assert_eq!(
            first.bbox,
            BBox::from_corners(4.0, 6.0, 24.0, 36.0).unwrap()
        );
        assert!(
            first.keypoints[0].visible && first.keypoints[1].visible && !first.keypoints[2].visible
        );
        assert_eq!((first.keypoints[1].x, first.keypoints[1].y), (11.0, 21.0));
        // an instance with no labeled keypoints is kept
        assert!(out.instances[1].keypoints.iter().all(|k| !k.visible));
    }

    #[test]
    fn malformed_annotations_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let short = r#"{"images": [{"id": 1, "file_name": "a.png"}],
            "annotations": [{"image_id": 1, "bbox": [0, 0, 5, 5], "keypoints": [1, 2, 2], "num_keypoints": 1}]}"#;
        assert!(load_coco_keypoints(&write(dir.path(), short), dir.path()).is_err());
        let bad_box = format!(
            r#"{{"images": [{{"id": 1, "file_name": "a.png"}}],
            "annotations": [{{"image_id": 1, "bbox": [0, 0, -5, 5], "keypoints": [{}], "num_keypoints": 0}}]}}"#,
            kps(&[])
        );
        assert!(load_coco_keypoints(&write(dir.path(), &bad_box), dir.path()).is_err());
        let bad_count = format!(
            r#"{{"images": [{{"id": 1, "file_name": "a.png"}}],
            "annotations": [{{"image_id": 1, "bbox": [0, 0, 5, 5], "keypoints": [{}], "num_keypoints": 3}}]}}"#,
            kps(&[2])
        );
        assert!(load_coco_keypoints(&write(dir.path(), &bad_count), dir.path()).is_err());
        let unknown = format!(
            r#"{{"images": [],
            "annotations": [{{"image_id": 9, "bbox": [0, 0, 5, 5], "keypoints": [{}], "num_keypoints": 0}}]}}"#,
            kps(&[])
        );
        assert!(load_coco_keypoints(&write(dir.path(), &unknown), dir.path()).is_err());
    }
}
