//! On-disk dataset layout:
//!
//! ```text
//! <root>/annotations.json
//! <root>/images/<scene_id>.png
//! ```
//!
//! The annotation file holds every scene's instances with run-length
//! encoded modal masks and optional amodal masks. Loading is forgiving at
//! scene granularity: a scene with a missing image or malformed annotation
//! is skipped and reported, while the rest of the dataset loads normally.
//! A missing or unparseable annotation file fails the whole load.

use crate::mask::BinaryMask;
use crate::rle::{rle_decode, rle_encode, RleMask};
use crate::synth::{Scene, SceneInstance};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {reason}")]
    ParseError { path: PathBuf, reason: String },
    #[error("scene {scene_id}: image {path} is missing or unreadable: {reason}")]
    MissingImage {
        scene_id: String,
        path: PathBuf,
        reason: String,
    },
    #[error("scene {scene_id}{}: {reason}", fmt_instance(.instance_id))]
    MalformedAnnotation {
        scene_id: String,
        instance_id: Option<u32>,
        reason: String,
    },
    #[error("duplicate scene id {0}")]
    DuplicateSceneId(String),
}

fn fmt_instance(id: &Option<u32>) -> String {
    match id {
        Some(id) => format!(" instance {id}"),
        None => String::new(),
    }
}

/// A scene that failed to load, with the reason.
#[derive(Debug)]
pub struct DatasetIssue {
    pub scene_id: String,
    pub error: DatasetError,
}

/// Result of `load_modal_dataset`: the scenes that loaded plus per-scene
/// failures.
#[derive(Debug)]
pub struct LoadedDataset {
    pub scenes: Vec<Scene>,
    pub issues: Vec<DatasetIssue>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationsFile {
    scenes: Vec<SceneAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct SceneAnnotation {
    scene_id: String,
    image: String,
    instances: Vec<InstanceAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct InstanceAnnotation {
    instance_id: u32,
    category_id: u32,
    // Raw JSON here so one bad mask fails its scene, not the whole file.
    modal_rle: serde_json::Value,
    #[serde(default)]
    amodal_rle: Option<serde_json::Value>,
}

pub fn save_dataset(dir: &Path, scenes: &[Scene]) -> Result<(), DatasetError> {
    let images_dir = dir.join(IMAGES_DIR);
    std::fs::create_dir_all(&images_dir).map_err(|source| DatasetError::Io {
        path: images_dir.clone(),
        source,
    })?;
    let mut seen = HashSet::new();
    let mut annotations = Vec::with_capacity(scenes.len());
    for scene in scenes {
        if !seen.insert(scene.scene_id.clone()) {
            return Err(DatasetError::DuplicateSceneId(scene.scene_id.clone()));
        }
        let image_rel = format!("{IMAGES_DIR}/{}.png", scene.scene_id);
        let image_path = dir.join(&image_rel);
        scene
            .image
            .save(&image_path)
            .map_err(|e| DatasetError::Io {
                path: image_path.clone(),
                source: std::io::Error::other(e),
            })?;
        let instances = scene
            .instances
            .iter()
            .map(|inst| InstanceAnnotation {
                instance_id: inst.instance_id,
                category_id: inst.category_id,
                modal_rle: serde_json::to_value(rle_encode(&inst.modal_mask)).unwrap(),
                amodal_rle: inst
                    .amodal_mask
                    .as_ref()
                    .map(|m| serde_json::to_value(rle_encode(m)).unwrap()),
            })
            .collect();
        annotations.push(SceneAnnotation {
            scene_id: scene.scene_id.clone(),
            image: image_rel,
            instances,
        });
    }
    let path = dir.join(ANNOTATIONS_FILE);
    let file = std::fs::File::create(&path).map_err(|source| DatasetError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::to_writer(
        std::io::BufWriter::new(file),
        &AnnotationsFile {
            scenes: annotations,
        },
    )
    .map_err(|e| DatasetError::ParseError {
        path,
        reason: e.to_string(),
    })?;
    Ok(())
}

pub fn load_modal_dataset(dir: &Path) -> Result<LoadedDataset, DatasetError> {
    let path = dir.join(ANNOTATIONS_FILE);
    let bytes = std::fs::read(&path).map_err(|source| DatasetError::Io {
        path: path.clone(),
        source,
    })?;
    let parsed: AnnotationsFile =
        serde_json::from_slice(&bytes).map_err(|e| DatasetError::ParseError {
            path,
            reason: e.to_string(),
        })?;
    let mut scenes = Vec::with_capacity(parsed.scenes.len());
    let mut issues = Vec::new();
    for ann in &parsed.scenes {
        match load_scene(dir, ann) {
            Ok(scene) => scenes.push(scene),
            Err(error) => issues.push(DatasetIssue {
                scene_id: ann.scene_id.clone(),
                error,
            }),
        }
    }
    Ok(LoadedDataset { scenes, issues })
}

fn load_scene(dir: &Path, ann: &SceneAnnotation) -> Result<Scene, DatasetError> {
    let image_path = dir.join(&ann.image);
    let image = image::open(&image_path)
        .map_err(|e| DatasetError::MissingImage {
            scene_id: ann.scene_id.clone(),
            path: image_path.clone(),
            reason: e.to_string(),
        })?
        .into_rgb8();
    let dims = (image.height() as usize, image.width() as usize);
    let malformed = |instance_id: Option<u32>, reason: String| DatasetError::MalformedAnnotation {
        scene_id: ann.scene_id.clone(),
        instance_id,
        reason,
    };
    let mut ids = HashSet::new();
    let mut instances = Vec::with_capacity(ann.instances.len());
    for inst in &ann.instances {
        let id = inst.instance_id;
        if !ids.insert(id) {
            return Err(malformed(Some(id), "duplicate instance id".into()));
        }
        let modal = decode_mask(&inst.modal_rle)
            .map_err(|reason| malformed(Some(id), format!("modal_rle: {reason}")))?;
        if modal.dims() != dims {
            return Err(malformed(
                Some(id),
                format!(
                    "modal mask is {}x{} but the image is {}x{}",
                    modal.height(),
                    modal.width(),
                    dims.0,
                    dims.1
                ),
            ));
        }
        if modal.is_empty() {
            return Err(malformed(Some(id), "modal mask is empty".into()));
        }
        let amodal = match &inst.amodal_rle {
            None => None,
            Some(v) if v.is_null() => None,
            Some(v) => {
                let amodal = decode_mask(v)
                    .map_err(|reason| malformed(Some(id), format!("amodal_rle: {reason}")))?;
                if amodal.dims() != dims {
                    return Err(malformed(
                        Some(id),
                        format!(
                            "amodal mask is {}x{} but the image is {}x{}",
                            amodal.height(),
                            amodal.width(),
                            dims.0,
                            dims.1
                        ),
                    ));
                }
                if !amodal.is_superset_of(&modal).unwrap() {
                    return Err(malformed(
                        Some(id),
                        "amodal mask does not contain the modal mask".into(),
                    ));
                }
                Some(amodal)
            }
        };
        let instance = SceneInstance::from_masks(&image, id, inst.category_id, modal, amodal)
            .map_err(|e| malformed(Some(id), e.to_string()))?;
        instances.push(instance);
    }
    Ok(Scene {
        scene_id: ann.scene_id.clone(),
        image,
        instances,
    })
}

fn decode_mask(value: &serde_json::Value) -> Result<BinaryMask, String> {
    let rle: RleMask = serde_json::from_value(value.clone()).map_err(|e| e.to_string())?;
    rle_decode(&rle).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_scene, SyntheticSceneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_scenes(n: usize) -> Vec<Scene> {
        let config = SyntheticSceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|i| generate_synthetic_scene(&format!("scene_{i:04}"), &mut rng, &config))
            .collect()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = sample_scenes(3);
        save_dataset(dir.path(), &scenes).unwrap();
        let loaded = load_modal_dataset(dir.path()).unwrap();
        assert!(loaded.issues.is_empty());
        assert_eq!(loaded.scenes.len(), 3);
        for (orig, back) in scenes.iter().zip(&loaded.scenes) {
            assert_eq!(orig.scene_id, back.scene_id);
            assert_eq!(orig.image.as_raw(), back.image.as_raw());
            assert_eq!(orig.instances.len(), back.instances.len());
            for (a, b) in orig.instances.iter().zip(&back.instances) {
                assert_eq!(a.instance_id, b.instance_id);
                assert_eq!(a.category_id, b.category_id);
                assert_eq!(a.modal_mask, b.modal_mask);
                assert_eq!(a.amodal_mask, b.amodal_mask);
                assert_eq!(a.patch_origin, b.patch_origin);
                assert_eq!(a.image_patch.as_raw(), b.image_patch.as_raw());
            }
        }
    }

    #[test]
    fn missing_image_skips_scene_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = sample_scenes(3);
        save_dataset(dir.path(), &scenes).unwrap();
        std::fs::remove_file(dir.path().join("images/scene_0001.png")).unwrap();
        let loaded = load_modal_dataset(dir.path()).unwrap();
        assert_eq!(loaded.scenes.len(), 2);
        assert_eq!(loaded.issues.len(), 1);
        assert_eq!(loaded.issues[0].scene_id, "scene_0001");
        assert!(matches!(
            loaded.issues[0].error,
            DatasetError::MissingImage { .. }
        ));
    }

    #[test]
    fn bad_rle_sum_skips_scene_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = sample_scenes(2);
        save_dataset(dir.path(), &scenes).unwrap();
        let path = dir.path().join(ANNOTATIONS_FILE);
        let mut doc: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        // Break the first run length of scene 0, instance 0.
        let counts = doc["scenes"][0]["instances"][0]["modal_rle"]["counts"]
            .as_array_mut()
            .unwrap();
        let first = counts[0].as_u64().unwrap();
        counts[0] = serde_json::json!(first + 3);
        std::fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
        let loaded = load_modal_dataset(dir.path()).unwrap();
        assert_eq!(loaded.scenes.len(), 1);
        assert_eq!(loaded.issues.len(), 1);
        match &loaded.issues[0].error {
            DatasetError::MalformedAnnotation {
                instance_id: Some(1),
                reason,
                ..
            } => assert!(reason.contains("sum"), "unexpected reason: {reason}"),
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn amodal_smaller_than_modal_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let mut scenes = sample_scenes(1);
        // Swap: make the amodal a strict subset of the modal.
        let inst = &mut scenes[0].instances[0];
        let modal = inst.modal_mask.clone();
        let mut shrunk = modal.clone();
        let b = modal.bbox().unwrap();
        shrunk.set(b.row_min, b.col_min, false);
        // Guarantee the shrunk mask is still non-empty but no longer a
        // superset once roles are flipped.
        inst.amodal_mask = Some(shrunk);
        save_dataset(dir.path(), &scenes).unwrap();
        let loaded = load_modal_dataset(dir.path()).unwrap();
        assert!(loaded.scenes.is_empty());
        assert!(matches!(
            loaded.issues[0].error,
            DatasetError::MalformedAnnotation { .. }
        ));
    }

    #[test]
    fn missing_annotations_file_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_modal_dataset(dir.path()),
            Err(DatasetError::Io { .. })
        ));
    }

    #[test]
    fn unparseable_annotations_file_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(ANNOTATIONS_FILE), b"{not json").unwrap();
        assert!(matches!(
            load_modal_dataset(dir.path()),
            Err(DatasetError::ParseError { .. })
        ));
    }

    #[test]
    fn null_amodal_round_trips_as_none() {
        let dir = tempfile::tempdir().unwrap();
        let mut scenes = sample_scenes(1);
        for inst in &mut scenes[0].instances {
            inst.amodal_mask = None;
        }
        save_dataset(dir.path(), &scenes).unwrap();
        let raw = std::fs::read_to_string(dir.path().join(ANNOTATIONS_FILE)).unwrap();
        assert!(raw.contains(r#""amodal_rle":null"#));
        let loaded = load_modal_dataset(dir.path()).unwrap();
        assert!(loaded.scenes[0]
            .instances
            .iter()
            .all(|i| i.amodal_mask.is_none()));
    }

    #[test]
    fn duplicate_instance_ids_are_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let mut scenes = sample_scenes(1);
        if scenes[0].instances.len() < 2 {
            let extra = scenes[0].instances[0].clone();
            scenes[0].instances.push(extra);
        } else {
            scenes[0].instances[1].instance_id = scenes[0].instances[0].instance_id;
        }
        save_dataset(dir.path(), &scenes).unwrap();
        let loaded = load_modal_dataset(dir.path()).unwrap();
        assert!(loaded.scenes.is_empty());
        match &loaded.issues[0].error {
            DatasetError::MalformedAnnotation { reason, .. } => {
                assert!(reason.contains("duplicate"))
            }
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn annotation_json_uses_expected_keys() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &sample_scenes(1)).unwrap();
        let raw = std::fs::read_to_string(dir.path().join(ANNOTATIONS_FILE)).unwrap();
        for key in [
            r#""scenes""#,
            r#""scene_id""#,
            r#""image""#,
            r#""instances""#,
            r#""instance_id""#,
            r#""category_id""#,
            r#""modal_rle""#,
            r#""size""#,
            r#""counts""#,
        ] {
            assert!(raw.contains(key), "missing key {key}");
        }
        assert!(raw.contains(r#""image":"images/scene_0000.png""#));
    }
}
