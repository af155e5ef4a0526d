//! Inference-side pipeline: complete one instance's amodal mask, recover
//! pairwise occlusion order from completion extents, score predictions
//! against ground truth, and export completions as pseudo ground truth in
//! the dataset format.

use crate::dataset::{save_dataset, DatasetError};
use crate::mask::{adjacent, iou, occlusion_boundary, BinaryMask, MaskError};
use crate::model::{pack_input, ModelError, Segmenter};
use crate::synth::Scene;
use ndarray::Array2;
use serde::Serialize;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("scene {scene_id} has no instance at index {index}")]
    InstanceIndex { scene_id: String, index: usize },
    #[error("scene {scene_id} instance {instance_id} has no amodal ground truth")]
    MissingAmodalGT { scene_id: String, instance_id: u32 },
    #[error("predictions do not line up with scenes: {0}")]
    PredictionMismatch(String),
    #[error("scene {scene_id}: no explicit ordering provided for pair ({j}, {k})")]
    MissingExplicitOrder { scene_id: String, j: u32, k: u32 },
}

/// One instance's completion output.
#[derive(Debug, Clone)]
pub struct InstancePrediction {
    pub instance_id: u32,
    pub modal_mask: BinaryMask,
    /// Thresholded network output united with the modal mask, so it always
    /// contains the modal mask.
    pub amodal_mask: BinaryMask,
    /// |amodal \ modal|.
    pub extension_area: usize,
    pub uncertainty_map: Array2<f32>,
}

/// Pairwise occlusion relation. `value` is +1 when the first instance of
/// `pair` occludes the second, -1 for the reverse, 0 for unordered
/// (non-adjacent, or neither mask was extended).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderingRelation {
    pub pair: (u32, u32),
    pub value: i8,
}

/// Aggregate scores. Serializes to exactly
/// `{"mIoU", "inv_mIoU", "o_acc", "n_instances", "n_pairs"}`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    #[serde(rename = "mIoU")]
    pub miou: f64,
    #[serde(rename = "inv_mIoU")]
    pub inv_miou: f64,
    pub o_acc: f64,
    pub n_instances: usize,
    pub n_pairs: usize,
    /// Instances with a non-empty GT invisible region (the inv_mIoU
    /// population). Not part of the serialized report.
    #[serde(skip)]
    pub n_occluded: usize,
}

/// Where the ground-truth ordering comes from: recovered from the GT masks
/// themselves, or supplied explicitly (synthetic scenes know their true
/// depth order).
#[derive(Debug, Clone, Copy)]
pub enum GtOrdering<'a> {
    FromMasks,
    Explicit(&'a [Vec<OrderingRelation>]),
}

/// Union of this instance's pairwise occlusion boundaries with every other
/// instance in the scene. Non-adjacent pairs contribute nothing.
pub fn instance_boundary(
    scene: &Scene,
    index: usize,
    boundary_radius: usize,
) -> Result<BinaryMask, EvalError> {
    let inst = scene
        .instances
        .get(index)
        .ok_or_else(|| EvalError::InstanceIndex {
            scene_id: scene.scene_id.clone(),
            index,
        })?;
    let mut boundary = BinaryMask::new(scene.height(), scene.width())?;
    for (k, other) in scene.instances.iter().enumerate() {
        if k == index {
            continue;
        }
        let pairwise = occlusion_boundary(&inst.modal_mask, &other.modal_mask, boundary_radius)?;
        boundary = boundary.union(&pairwise)?;
    }
    Ok(boundary)
}

/// Run the segmenter on one instance and binarize: amodal mask =
/// (probability >= threshold) ∪ modal mask.
pub fn complete_instance(
    model: &Segmenter,
    scene: &Scene,
    index: usize,
    threshold: f32,
    boundary_radius: usize,
) -> Result<InstancePrediction, EvalError> {
    let inst = scene
        .instances
        .get(index)
        .ok_or_else(|| EvalError::InstanceIndex {
            scene_id: scene.scene_id.clone(),
            index,
        })?;
    let boundary = instance_boundary(scene, index, boundary_radius)?;
    let input = pack_input(&scene.image, &inst.modal_mask, &boundary);
    let output = model.forward(&input)?;
    let (h, w) = (scene.height(), scene.width());
    let thresholded = BinaryMask::from_fn(h, w, |r, c| output.mask_prob[[r, c]] >= threshold)?;
    let amodal_mask = thresholded.union(&inst.modal_mask)?;
    let extension_area = amodal_mask.area() - inst.modal_mask.area();
    Ok(InstancePrediction {
        instance_id: inst.instance_id,
        modal_mask: inst.modal_mask.clone(),
        amodal_mask,
        extension_area,
        uncertainty_map: output.uncertainty,
    })
}

/// Pairwise ordering from completion extents: the instance whose mask was
/// extended less sits in front. Non-adjacent pairs and pairs where neither
/// mask grew are unordered (0). Equal nonzero extents fall through to -1;
/// the comparison is strict.
pub fn recover_order(
    pred_j: &InstancePrediction,
    pred_k: &InstancePrediction,
    is_adjacent: bool,
) -> OrderingRelation {
    let pair = (pred_j.instance_id, pred_k.instance_id);
    if !is_adjacent {
        return OrderingRelation { pair, value: 0 };
    }
    let (ej, ek) = (pred_j.extension_area, pred_k.extension_area);
    let value = if ej == 0 && ek == 0 {
        0
    } else if ej < ek {
        1
    } else {
        -1
    };
    OrderingRelation { pair, value }
}

/// Score predictions against ground truth.
///
/// mIoU averages amodal IoU over every instance; inv_mIoU averages the
/// IoU of predicted vs GT invisible regions over instances whose GT
/// invisible region is non-empty; o_acc is the fraction of adjacent pairs
/// whose recovered ordering matches the ground-truth ordering. Averages
/// over an empty population report 1.0.
pub fn compute_metrics(
    scenes: &[Scene],
    predictions: &[Vec<InstancePrediction>],
    boundary_radius: usize,
    gt_ordering: GtOrdering,
) -> Result<MetricsReport, EvalError> {
    if scenes.len() != predictions.len() {
        return Err(EvalError::PredictionMismatch(format!(
            "{} scenes but {} prediction groups",
            scenes.len(),
            predictions.len()
        )));
    }
    if let GtOrdering::Explicit(orders) = gt_ordering {
        if orders.len() != scenes.len() {
            return Err(EvalError::PredictionMismatch(format!(
                "{} scenes but {} explicit ordering groups",
                scenes.len(),
                orders.len()
            )));
        }
    }
    let mut iou_sum = 0.0;
    let mut n_instances = 0usize;
    let mut inv_sum = 0.0;
    let mut n_occluded = 0usize;
    let mut matches = 0usize;
    let mut n_pairs = 0usize;
    for (scene_idx, (scene, preds)) in scenes.iter().zip(predictions).enumerate() {
        if scene.instances.len() != preds.len() {
            return Err(EvalError::PredictionMismatch(format!(
                "scene {} has {} instances but {} predictions",
                scene.scene_id,
                scene.instances.len(),
                preds.len()
            )));
        }
        let mut gt_extensions = Vec::with_capacity(scene.instances.len());
        for (inst, pred) in scene.instances.iter().zip(preds) {
            if inst.instance_id != pred.instance_id {
                return Err(EvalError::PredictionMismatch(format!(
                    "scene {}: prediction id {} against instance id {}",
                    scene.scene_id, pred.instance_id, inst.instance_id
                )));
            }
            let gt_amodal =
                inst.amodal_mask
                    .as_ref()
                    .ok_or_else(|| EvalError::MissingAmodalGT {
                        scene_id: scene.scene_id.clone(),
                        instance_id: inst.instance_id,
                    })?;
            iou_sum += iou(&pred.amodal_mask, gt_amodal)?;
            n_instances += 1;
            let gt_inv = gt_amodal.difference(&inst.modal_mask)?;
            gt_extensions.push(gt_inv.area());
            if !gt_inv.is_empty() {
                let pred_inv = pred.amodal_mask.difference(&inst.modal_mask)?;
                inv_sum += iou(&pred_inv, &gt_inv)?;
                n_occluded += 1;
            }
        }
        for j in 0..scene.instances.len() {
            for k in j + 1..scene.instances.len() {
                let adj = adjacent(
                    &scene.instances[j].modal_mask,
                    &scene.instances[k].modal_mask,
                    boundary_radius,
                )?;
                if !adj {
                    continue;
                }
                let predicted = recover_order(&preds[j], &preds[k], true);
                let truth = match gt_ordering {
                    GtOrdering::FromMasks => {
                        gt_relation_from_masks(gt_extensions[j], gt_extensions[k])
                    }
                    GtOrdering::Explicit(orders) => lookup_explicit(
                        &orders[scene_idx],
                        scene.instances[j].instance_id,
                        scene.instances[k].instance_id,
                    )
                    .ok_or_else(|| EvalError::MissingExplicitOrder {
                        scene_id: scene.scene_id.clone(),
                        j: scene.instances[j].instance_id,
                        k: scene.instances[k].instance_id,
                    })?,
                };
                n_pairs += 1;
                if predicted.value == truth {
                    matches += 1;
                }
            }
        }
    }
    let ratio = |num: f64, den: usize| if den == 0 { 1.0 } else { num / den as f64 };
    Ok(MetricsReport {
        miou: ratio(iou_sum, n_instances),
        inv_miou: ratio(inv_sum, n_occluded),
        o_acc: ratio(matches as f64, n_pairs),
        n_instances,
        n_pairs,
        n_occluded,
    })
}

fn gt_relation_from_masks(ext_j: usize, ext_k: usize) -> i8 {
    if ext_j == 0 && ext_k == 0 {
        0
    } else if ext_j < ext_k {
        1
    } else {
        -1
    }
}

fn lookup_explicit(relations: &[OrderingRelation], j: u32, k: u32) -> Option<i8> {
    for rel in relations {
        if rel.pair == (j, k) {
            return Some(rel.value);
        }
        if rel.pair == (k, j) {
            return Some(-rel.value);
        }
    }
    None
}

/// Complete every instance of every scene.
pub fn predict_scenes(
    model: &Segmenter,
    scenes: &[Scene],
    threshold: f32,
    boundary_radius: usize,
) -> Result<Vec<Vec<InstancePrediction>>, EvalError> {
    scenes
        .iter()
        .map(|scene| {
            (0..scene.instances.len())
                .map(|idx| complete_instance(model, scene, idx, threshold, boundary_radius))
                .collect()
        })
        .collect()
}

/// Complete every instance and score the results in one step.
pub fn evaluate_model(
    model: &Segmenter,
    scenes: &[Scene],
    threshold: f32,
    boundary_radius: usize,
    gt_ordering: GtOrdering,
) -> Result<MetricsReport, EvalError> {
    let predictions = predict_scenes(model, scenes, threshold, boundary_radius)?;
    compute_metrics(scenes, &predictions, boundary_radius, gt_ordering)
}

/// Complete every instance of every scene and write the results as a
/// dataset whose amodal annotations are the model's predictions. Returns
/// the number of instances exported.
pub fn export_pseudo_gt(
    model: &Segmenter,
    scenes: &[Scene],
    out_dir: &Path,
    threshold: f32,
    boundary_radius: usize,
) -> Result<usize, EvalError> {
    let mut exported = Vec::with_capacity(scenes.len());
    let mut count = 0usize;
    for scene in scenes {
        let mut annotated = scene.clone();
        for (idx, inst) in annotated.instances.iter_mut().enumerate() {
            let pred = complete_instance(model, scene, idx, threshold, boundary_radius)?;
            inst.amodal_mask = Some(pred.amodal_mask);
            count += 1;
        }
        exported.push(annotated);
    }
    save_dataset(out_dir, &exported)?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, INPUT_CHANNELS};
    use crate::synth::{generate_synthetic_scene, SceneInstance, SyntheticSceneConfig};
    use image::RgbImage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred(id: u32, modal: &BinaryMask, amodal: &BinaryMask) -> InstancePrediction {
        InstancePrediction {
            instance_id: id,
            modal_mask: modal.clone(),
            amodal_mask: amodal.clone(),
            extension_area: amodal.area() - modal.area(),
            uncertainty_map: Array2::zeros(modal.dims()),
        }
    }

    fn dummy_pred(id: u32, n: usize, ext: usize) -> InstancePrediction {
        // Only the extension area matters for ordering tests.
        let modal = BinaryMask::from_fn(n, n, |r, c| r == 0 && c < 3).unwrap();
        let amodal =
            BinaryMask::from_fn(n, n, |r, c| (r == 0 && c < 3) || (r == 1 && c < ext)).unwrap();
        InstancePrediction {
            instance_id: id,
            modal_mask: modal.clone(),
            amodal_mask: amodal.clone(),
            extension_area: ext,
            uncertainty_map: Array2::zeros((n, n)),
        }
    }

    #[test]
    fn recover_order_cases() {
        let a = dummy_pred(1, 8, 0);
        let b = dummy_pred(2, 8, 0);
        assert_eq!(recover_order(&a, &b, true).value, 0);
        let a = dummy_pred(1, 8, 3);
        let b = dummy_pred(2, 8, 6);
        assert_eq!(recover_order(&a, &b, true).value, 1);
        assert_eq!(recover_order(&b, &a, true).value, -1);
        assert_eq!(recover_order(&a, &b, false).value, 0);
        // The occluder needs no completion at all.
        let front = dummy_pred(3, 8, 0);
        let back = dummy_pred(4, 8, 5);
        assert_eq!(recover_order(&front, &back, true).value, 1);
    }

    #[test]
    fn recover_order_equal_nonzero_extents_fall_to_minus_one() {
        let a = dummy_pred(1, 8, 4);
        let b = dummy_pred(2, 8, 4);
        assert_eq!(recover_order(&a, &b, true).value, -1);
        assert_eq!(recover_order(&b, &a, true).value, -1);
    }

    #[test]
    fn recover_order_antisymmetry_and_scale_invariance() {
        for (ej, ek) in [(0usize, 5usize), (7, 2), (1, 9), (4, 0)] {
            let a = dummy_pred(1, 16, ej);
            let b = dummy_pred(2, 16, ek);
            let ab = recover_order(&a, &b, true).value;
            let ba = recover_order(&b, &a, true).value;
            assert_eq!(ab, -ba);
            assert_eq!(ab == 0, ba == 0);
            // Doubling both extents preserves the relation.
            let a2 = dummy_pred(1, 16, ej * 2);
            let b2 = dummy_pred(2, 16, ek * 2);
            assert_eq!(recover_order(&a2, &b2, true).value, ab);
        }
    }

    fn scene_with_gt(seed: u64) -> Scene {
        let config = SyntheticSceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        generate_synthetic_scene(&format!("s{seed}"), &mut rng, &config)
    }

    fn gt_predictions(scene: &Scene) -> Vec<InstancePrediction> {
        scene
            .instances
            .iter()
            .map(|inst| {
                pred(
                    inst.instance_id,
                    &inst.modal_mask,
                    inst.amodal_mask.as_ref().unwrap(),
                )
            })
            .collect()
    }

    fn modal_predictions(scene: &Scene) -> Vec<InstancePrediction> {
        scene
            .instances
            .iter()
            .map(|inst| pred(inst.instance_id, &inst.modal_mask, &inst.modal_mask))
            .collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let scenes: Vec<Scene> = (0..5).map(scene_with_gt).collect();
        let preds: Vec<_> = scenes.iter().map(gt_predictions).collect();
        let report = compute_metrics(&scenes, &preds, 1, GtOrdering::FromMasks).unwrap();
        assert_eq!(report.miou, 1.0);
        assert_eq!(report.inv_miou, 1.0);
        assert_eq!(report.o_acc, 1.0);
        assert!(report.n_instances >= 5);
    }

    #[test]
    fn no_extension_baseline_scores_zero_inv_miou() {
        // Keep only scenes that actually contain occlusion.
        let scenes: Vec<Scene> = (0..20)
            .map(scene_with_gt)
            .filter(|s| {
                s.instances
                    .iter()
                    .any(|i| i.amodal_mask.as_ref().unwrap().area() > i.modal_mask.area())
            })
            .collect();
        assert!(!scenes.is_empty());
        let preds: Vec<_> = scenes.iter().map(modal_predictions).collect();
        let report = compute_metrics(&scenes, &preds, 1, GtOrdering::FromMasks).unwrap();
        assert_eq!(report.inv_miou, 0.0);
        assert!(report.n_occluded > 0);
        assert!(report.miou < 1.0);
    }

    #[test]
    fn metrics_report_json_shape() {
        let scenes = vec![scene_with_gt(3)];
        let preds = vec![gt_predictions(&scenes[0])];
        let report = compute_metrics(&scenes, &preds, 1, GtOrdering::FromMasks).unwrap();
        let text = serde_json::to_string(&report).unwrap();
        let expected = ["\"mIoU\"", "\"inv_mIoU\"", "\"o_acc\"", "\"n_instances\"", "\"n_pairs\""];
        let positions: Vec<usize> = expected
            .iter()
            .map(|k| text.find(k).unwrap_or_else(|| panic!("missing key {k} in {text}")))
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "key order in {text}");
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value.as_object().unwrap().len(), expected.len());
    }

    #[test]
    fn missing_amodal_gt_is_an_error() {
        let mut scene = scene_with_gt(4);
        scene.instances[0].amodal_mask = None;
        let preds = vec![modal_predictions(&scene)];
        let err = compute_metrics(
            std::slice::from_ref(&scene),
            &preds,
            1,
            GtOrdering::FromMasks,
        )
        .unwrap_err();
        assert!(matches!(err, EvalError::MissingAmodalGT { .. }));
    }

    /// Straight re-implementation of the metrics with nothing shared:
    /// explicit double loops over cells, naive dilation, scalar
    /// accumulators.
    fn metrics_oracle(
        scenes: &[Scene],
        predictions: &[Vec<InstancePrediction>],
        radius: usize,
    ) -> (f64, f64, f64, usize, usize) {
        let cell_iou = |a: &BinaryMask, b: &BinaryMask| -> f64 {
            let (mut inter, mut uni) = (0u64, 0u64);
            for r in 0..a.height() {
                for c in 0..a.width() {
                    let (x, y) = (a.get(r, c), b.get(r, c));
                    if x && y {
                        inter += 1;
                    }
                    if x || y {
                        uni += 1;
                    }
                }
            }
            if uni == 0 {
                1.0
            } else {
                inter as f64 / uni as f64
            }
        };
        let near = |m: &BinaryMask, r: usize, c: usize, rad: usize| -> bool {
            for rr in r.saturating_sub(rad)..=(r + rad).min(m.height() - 1) {
                for cc in c.saturating_sub(rad)..=(c + rad).min(m.width() - 1) {
                    if m.get(rr, cc) {
                        return true;
                    }
                }
            }
            false
        };
        let touches = |a: &BinaryMask, b: &BinaryMask| -> bool {
            for r in 0..a.height() {
                for c in 0..a.width() {
                    if near(a, r, c, radius) && near(b, r, c, radius) {
                        return true;
                    }
                }
            }
            false
        };
        let order = |ej: usize, ek: usize| -> i8 {
            if ej == 0 && ek == 0 {
                0
            } else if ej < ek {
                1
            } else {
                -1
            }
        };
        let (mut iou_sum, mut n_inst) = (0.0, 0usize);
        let (mut inv_sum, mut n_occ) = (0.0, 0usize);
        let (mut hits, mut pairs) = (0usize, 0usize);
        for (scene, preds) in scenes.iter().zip(predictions) {
            for (inst, p) in scene.instances.iter().zip(preds) {
                let gt = inst.amodal_mask.as_ref().unwrap();
                iou_sum += cell_iou(&p.amodal_mask, gt);
                n_inst += 1;
                let gt_inv = gt.difference(&inst.modal_mask).unwrap();
                if !gt_inv.is_empty() {
                    let p_inv = p.amodal_mask.difference(&inst.modal_mask).unwrap();
                    inv_sum += cell_iou(&p_inv, &gt_inv);
                    n_occ += 1;
                }
            }
            for j in 0..scene.instances.len() {
                for k in j + 1..scene.instances.len() {
                    if !touches(
                        &scene.instances[j].modal_mask,
                        &scene.instances[k].modal_mask,
                    ) {
                        continue;
                    }
                    let gt_j = scene.instances[j]
                        .amodal_mask
                        .as_ref()
                        .unwrap()
                        .difference(&scene.instances[j].modal_mask)
                        .unwrap()
                        .area();
                    let gt_k = scene.instances[k]
                        .amodal_mask
                        .as_ref()
                        .unwrap()
                        .difference(&scene.instances[k].modal_mask)
                        .unwrap()
                        .area();
                    pairs += 1;
                    if order(preds[j].extension_area, preds[k].extension_area) == order(gt_j, gt_k)
                    {
                        hits += 1;
                    }
                }
            }
        }
        (
            if n_inst == 0 {
                1.0
            } else {
                iou_sum / n_inst as f64
            },
            if n_occ == 0 {
                1.0
            } else {
                inv_sum / n_occ as f64
            },
            if pairs == 0 {
                1.0
            } else {
                hits as f64 / pairs as f64
            },
            n_inst,
            pairs,
        )
    }

    fn random_tiny_scene(
        rng: &mut ChaCha8Rng,
        max_side: usize,
    ) -> (Scene, Vec<InstancePrediction>) {
        let n = rng.gen_range(4..=max_side);
        let image = RgbImage::new(n as u32, n as u32);
        let count = rng.gen_range(1..=3);
        let mut instances = Vec::new();
        let mut preds = Vec::new();
        for id in 1..=count {
            // Random small rectangles; amodal always contains modal.
            loop {
                let h = rng.gen_range(1..=n.div_ceil(2));
                let w = rng.gen_range(1..=n.div_ceil(2));
                let top = rng.gen_range(0..=n - h);
                let left = rng.gen_range(0..=n - w);
                let amodal = BinaryMask::from_fn(n, n, |r, c| {
                    r >= top && r < top + h && c >= left && c < left + w
                })
                .unwrap();
                let modal = BinaryMask::from_fn(n, n, |r, c| {
                    amodal.get(r, c) && (rng.gen_bool(0.8) || (r == top && c == left))
                })
                .unwrap();
                if modal.is_empty() {
                    continue;
                }
                let pred_amodal = BinaryMask::from_fn(n, n, |r, c| {
                    modal.get(r, c) || (amodal.get(r, c) && rng.gen_bool(0.6)) || rng.gen_bool(0.05)
                })
                .unwrap();
                let instance =
                    SceneInstance::from_masks(&image, id, 1, modal.clone(), Some(amodal.clone()))
                        .unwrap();
                instances.push(instance);
                preds.push(pred(id, &modal, &pred_amodal));
                break;
            }
        }
        (
            Scene {
                scene_id: format!("r{n}"),
                image,
                instances,
            },
            preds,
        )
    }

    #[test]
    fn metrics_match_brute_force_oracle_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..300 {
            let (scene, preds) = random_tiny_scene(&mut rng, 16);
            let scenes = vec![scene];
            let predictions = vec![preds];
            let report = compute_metrics(&scenes, &predictions, 1, GtOrdering::FromMasks).unwrap();
            let (miou, inv, oacc, n_inst, n_pairs) = metrics_oracle(&scenes, &predictions, 1);
            assert!((report.miou - miou).abs() < 1e-12);
            assert!((report.inv_miou - inv).abs() < 1e-12);
            assert!((report.o_acc - oacc).abs() < 1e-12);
            assert_eq!(report.n_instances, n_inst);
            assert_eq!(report.n_pairs, n_pairs);
        }
    }

    #[test]
    fn explicit_ordering_path_agrees_with_mask_ordering_on_generated_scenes() {
        // Build explicit relations from the GT masks themselves; the two
        // paths must then agree exactly.
        let scenes: Vec<Scene> = (20..30).map(scene_with_gt).collect();
        let preds: Vec<_> = scenes.iter().map(gt_predictions).collect();
        let mut explicit = Vec::new();
        for scene in &scenes {
            let mut rels = Vec::new();
            for j in 0..scene.instances.len() {
                for k in j + 1..scene.instances.len() {
                    let ej = scene.instances[j].amodal_mask.as_ref().unwrap().area()
                        - scene.instances[j].modal_mask.area();
                    let ek = scene.instances[k].amodal_mask.as_ref().unwrap().area()
                        - scene.instances[k].modal_mask.area();
                    rels.push(OrderingRelation {
                        pair: (
                            scene.instances[j].instance_id,
                            scene.instances[k].instance_id,
                        ),
                        value: gt_relation_from_masks(ej, ek),
                    });
                }
            }
            explicit.push(rels);
        }
        let a = compute_metrics(&scenes, &preds, 1, GtOrdering::FromMasks).unwrap();
        let b = compute_metrics(&scenes, &preds, 1, GtOrdering::Explicit(&explicit)).unwrap();
        assert_eq!(a.o_acc, b.o_acc);
        assert_eq!(a.n_pairs, b.n_pairs);
    }

    fn zeroed_head_model(scene_side: usize, mask_bias: f32) -> Segmenter {
        let mut model = Segmenter::new(ModelConfig {
            input_size: scene_side,
            base_channels: 2,
            depth: 1,
            seed: 0,
        })
        .unwrap();
        for (name, conv) in model.named_convs_mut() {
            if name == "head" {
                conv.weight.fill(0.0);
                conv.bias[0] = mask_bias;
                conv.bias[1] = 0.0;
            }
        }
        model
    }

    #[test]
    fn zero_output_model_completes_to_exactly_the_modal_mask() {
        let scene = scene_with_gt(40);
        let model = zeroed_head_model(64, -50.0);
        for idx in 0..scene.instances.len() {
            let p = complete_instance(&model, &scene, idx, 0.5, 1).unwrap();
            assert_eq!(p.amodal_mask, scene.instances[idx].modal_mask);
            assert_eq!(p.extension_area, 0);
            assert!(p.amodal_mask.is_superset_of(&p.modal_mask).unwrap());
        }
    }

    #[test]
    fn saturated_model_completes_to_full_canvas() {
        let scene = scene_with_gt(41);
        let model = zeroed_head_model(64, 50.0);
        let p = complete_instance(&model, &scene, 0, 0.5, 1).unwrap();
        assert_eq!(p.amodal_mask.area(), 64 * 64);
    }

    #[test]
    fn boundary_without_neighbors_is_empty() {
        let mut scene = scene_with_gt(42);
        scene.instances.truncate(1);
        let b = instance_boundary(&scene, 0, 2).unwrap();
        assert!(b.is_empty());
        let model = zeroed_head_model(64, -50.0);
        let p = complete_instance(&model, &scene, 0, 0.5, 2).unwrap();
        assert!(p.amodal_mask.is_superset_of(&p.modal_mask).unwrap());
    }

    #[test]
    fn pack_input_layout() {
        let scene = scene_with_gt(43);
        let inst = &scene.instances[0];
        let boundary = instance_boundary(&scene, 0, 1).unwrap();
        let input = pack_input(&scene.image, &inst.modal_mask, &boundary);
        assert_eq!(input.dim(), (INPUT_CHANNELS, 64, 64));
        for r in 0..64 {
            for c in 0..64 {
                let px = scene.image.get_pixel(c as u32, r as u32);
                assert_eq!(input[[0, r, c]], px[0] as f32 / 255.0);
                assert_eq!(input[[2, r, c]], px[2] as f32 / 255.0);
                assert_eq!(input[[3, r, c]] == 1.0, inst.modal_mask.get(r, c));
                assert_eq!(input[[4, r, c]] == 1.0, boundary.get(r, c));
            }
        }
    }

    #[test]
    fn export_pseudo_gt_round_trips() {
        let scenes: Vec<Scene> = (50..60).map(scene_with_gt).collect();
        let model = zeroed_head_model(64, -50.0);
        let dir = tempfile::tempdir().unwrap();
        let count = export_pseudo_gt(&model, &scenes, dir.path(), 0.5, 1).unwrap();
        let total: usize = scenes.iter().map(|s| s.instances.len()).sum();
        assert_eq!(count, total);
        let loaded = crate::dataset::load_modal_dataset(dir.path()).unwrap();
        assert!(loaded.issues.is_empty());
        assert_eq!(loaded.scenes.len(), scenes.len());
        for (orig, back) in scenes.iter().zip(&loaded.scenes) {
            assert_eq!(orig.scene_id, back.scene_id);
            assert_eq!(orig.instances.len(), back.instances.len());
            for (a, b) in orig.instances.iter().zip(&back.instances) {
                assert_eq!(a.instance_id, b.instance_id);
                assert_eq!(a.modal_mask, b.modal_mask);
                // Zero-output model: pseudo amodal equals modal.
                assert_eq!(b.amodal_mask.as_ref().unwrap(), &b.modal_mask);
                assert!(b
                    .amodal_mask
                    .as_ref()
                    .unwrap()
                    .is_superset_of(&b.modal_mask)
                    .unwrap());
            }
        }
    }
}
