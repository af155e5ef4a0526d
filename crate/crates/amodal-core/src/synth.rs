//! Synthetic occlusion machinery: sample an occluder/occludee pair from
//! modal-only annotations, paste the occluder over the occludee with a
//! feathered alpha matte, and emit training triplets. Also provides a
//! procedural scene generator (solid shapes with full depth bookkeeping)
//! used for datasets where real imagery is unavailable.

use crate::mask::{occlusion_boundary, BinaryMask, Bounds, MaskError};
use image::{Rgb, RgbImage};
use rand::Rng;
use thiserror::Error;

/// Rejection-sampling cap shared by pair sampling and scene generation.
pub const MAX_SAMPLING_ATTEMPTS: usize = 50;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene has {found} usable instances, need at least {need}")]
    NotEnoughInstances { found: usize, need: usize },
    #[error("no occlusion pair satisfied the overlap window after {attempts} attempts")]
    SamplingExhausted { attempts: usize },
    #[error("instance {0} has an empty modal mask")]
    EmptyInstance(u32),
    #[error("occluder grid {0}x{1} does not match scene grid {2}x{3}")]
    GridMismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// One annotated object in a scene. `image_patch` is the scene image
/// cropped to the modal bounding box, kept alongside the mask so the
/// instance can be pasted elsewhere as a synthetic occluder.
#[derive(Debug, Clone)]
pub struct SceneInstance {
    pub instance_id: u32,
    pub category_id: u32,
    pub modal_mask: BinaryMask,
    /// Full-extent mask when known. Synthetic data always carries it; real
    /// modal-only annotations leave it None.
    pub amodal_mask: Option<BinaryMask>,
    pub image_patch: RgbImage,
    /// Top-left (row, col) of the modal bounding box inside the scene.
    pub patch_origin: (usize, usize),
}

impl SceneInstance {
    /// Build an instance from its masks, cropping the patch out of the
    /// scene image. Fails when the modal mask is empty.
    pub fn from_masks(
        scene_image: &RgbImage,
        instance_id: u32,
        category_id: u32,
        modal_mask: BinaryMask,
        amodal_mask: Option<BinaryMask>,
    ) -> Result<Self, SynthError> {
        let bounds = modal_mask
            .bbox()
            .ok_or(SynthError::EmptyInstance(instance_id))?;
        let image_patch = crop_patch(scene_image, bounds);
        Ok(Self {
            instance_id,
            category_id,
            modal_mask,
            amodal_mask,
            image_patch,
            patch_origin: (bounds.row_min, bounds.col_min),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub scene_id: String,
    pub image: RgbImage,
    pub instances: Vec<SceneInstance>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }
}

/// Which of the two synthetic-supervision roles a triplet plays.
///
/// `Set1`: the occludee under a pasted occluder; the mask head must extend
/// the visible remainder back to the full modal mask.
/// `Set2`: the pasted occluder itself; the mask head must reproduce its
/// modal mask unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetTag {
    Set1,
    Set2,
}

/// A sampled occluder/occludee pairing. `offset` is the (row, col)
/// translation applied to the occluder's masks and patch.
#[derive(Debug, Clone)]
pub struct OcclusionPair {
    pub occludee: SceneInstance,
    pub occluder: SceneInstance,
    pub offset: (isize, isize),
    /// |translated occluder ∩ occludee| / |occludee|.
    pub overlap_fraction: f64,
}

impl OcclusionPair {
    /// Occluder modal mask translated onto a grid of the given dimensions.
    pub fn translated_occluder(&self, height: usize, width: usize) -> BinaryMask {
        translate_onto(&self.occluder.modal_mask, height, width, self.offset)
    }
}

/// One training sample before cropping and channel packing.
#[derive(Debug, Clone)]
pub struct TrainingTriplet {
    pub image: RgbImage,
    pub input_mask: BinaryMask,
    pub target_mask: BinaryMask,
    /// Pixels whose loss is scaled by lambda.
    pub weight_region: BinaryMask,
    pub boundary: BinaryMask,
    pub set_tag: SetTag,
}

/// Translate a mask onto a (possibly different) grid, dropping anything
/// that lands outside.
fn translate_onto(
    mask: &BinaryMask,
    height: usize,
    width: usize,
    offset: (isize, isize),
) -> BinaryMask {
    let mut out = BinaryMask::new(height, width).unwrap();
    for r in 0..mask.height() {
        let nr = r as isize + offset.0;
        if nr < 0 || nr >= height as isize {
            continue;
        }
        for c in 0..mask.width() {
            if !mask.get(r, c) {
                continue;
            }
            let nc = c as isize + offset.1;
            if nc < 0 || nc >= width as isize {
                continue;
            }
            out.set(nr as usize, nc as usize, true);
        }
    }
    out
}

fn crop_patch(image: &RgbImage, bounds: Bounds) -> RgbImage {
    let mut patch = RgbImage::new(bounds.width() as u32, bounds.height() as u32);
    for r in 0..bounds.height() {
        for c in 0..bounds.width() {
            let src = image.get_pixel((bounds.col_min + c) as u32, (bounds.row_min + r) as u32);
            patch.put_pixel(c as u32, r as u32, *src);
        }
    }
    patch
}

/// Draw an occluder/occludee pair from one scene: two distinct instances
/// plus a translation placing the occluder over the occludee so that the
/// covered fraction of the occludee's modal mask lands in
/// [overlap_min, overlap_max].
pub fn sample_occlusion_pair(
    scene: &Scene,
    rng: &mut impl Rng,
    overlap_min: f64,
    overlap_max: f64,
) -> Result<OcclusionPair, SynthError> {
    if scene.instances.len() < 2 {
        return Err(SynthError::NotEnoughInstances {
            found: scene.instances.len(),
            need: 2,
        });
    }
    sample_pair_inner(scene, None, rng, overlap_min, overlap_max)
}

/// Like `sample_occlusion_pair`, but the occluder is drawn from a donor
/// scene pool instead of the occludee's own scene. Donor grids must match
/// the scene grid.
pub fn sample_occlusion_pair_cross(
    scene: &Scene,
    donors: &[Scene],
    rng: &mut impl Rng,
    overlap_min: f64,
    overlap_max: f64,
) -> Result<OcclusionPair, SynthError> {
    if scene.instances.is_empty() {
        return Err(SynthError::NotEnoughInstances { found: 0, need: 1 });
    }
    if donors.is_empty() || donors.iter().all(|d| d.instances.is_empty()) {
        return Err(SynthError::NotEnoughInstances { found: 0, need: 1 });
    }
    sample_pair_inner(scene, Some(donors), rng, overlap_min, overlap_max)
}

fn sample_pair_inner(
    scene: &Scene,
    donors: Option<&[Scene]>,
    rng: &mut impl Rng,
    overlap_min: f64,
    overlap_max: f64,
) -> Result<OcclusionPair, SynthError> {
    let (h, w) = (scene.height(), scene.width());
    for _ in 0..MAX_SAMPLING_ATTEMPTS {
        let occludee_idx = rng.gen_range(0..scene.instances.len());
        let occludee = &scene.instances[occludee_idx];
        let occluder = match donors {
            None => {
                let mut occluder_idx = rng.gen_range(0..scene.instances.len() - 1);
                if occluder_idx >= occludee_idx {
                    occluder_idx += 1;
                }
                &scene.instances[occluder_idx]
            }
            Some(pool) => {
                let donor = &pool[rng.gen_range(0..pool.len())];
                if donor.instances.is_empty() {
                    continue;
                }
                if donor.instances[0].modal_mask.dims() != (h, w) {
                    let (dh, dw) = donor.instances[0].modal_mask.dims();
                    return Err(SynthError::GridMismatch(dh, dw, h, w));
                }
                &donor.instances[rng.gen_range(0..donor.instances.len())]
            }
        };
        let (Some(ee_box), Some(er_box)) = (occludee.modal_mask.bbox(), occluder.modal_mask.bbox())
        else {
            continue;
        };
        let occludee_area = occludee.modal_mask.area();
        if occludee_area == 0 {
            continue;
        }
        // Place the occluder bbox anywhere it at least touches the
        // occludee bbox.
        let r_lo = ee_box.row_min as isize - er_box.height() as isize + 1;
        let r_hi = ee_box.row_max as isize;
        let c_lo = ee_box.col_min as isize - er_box.width() as isize + 1;
        let c_hi = ee_box.col_max as isize;
        let target_r = rng.gen_range(r_lo..=r_hi);
        let target_c = rng.gen_range(c_lo..=c_hi);
        let offset = (
            target_r - er_box.row_min as isize,
            target_c - er_box.col_min as isize,
        );
        let translated = translate_onto(&occluder.modal_mask, h, w, offset);
        if translated.is_empty() {
            continue;
        }
        let covered = translated.intersection(&occludee.modal_mask)?.area();
        let fraction = covered as f64 / occludee_area as f64;
        if fraction < overlap_min || fraction > overlap_max {
            continue;
        }
        return Ok(OcclusionPair {
            occludee: occludee.clone(),
            occluder: occluder.clone(),
            offset,
            overlap_fraction: fraction,
        });
    }
    Err(SynthError::SamplingExhausted {
        attempts: MAX_SAMPLING_ATTEMPTS,
    })
}

/// Paste an occluder patch over an image. The patch corresponds to the
/// bounding box of `occluder_mask`; the mask is translated by `offset` and
/// blended with an alpha matte obtained by box-averaging the translated
/// mask over a (2*feather_radius + 1)^2 window, so edges fade over about
/// `feather_radius` pixels instead of stamping hard ones.
pub fn composite(
    image: &RgbImage,
    occluder_patch: &RgbImage,
    occluder_mask: &BinaryMask,
    offset: (isize, isize),
    feather_radius: usize,
) -> RgbImage {
    let (h, w) = (image.height() as usize, image.width() as usize);
    let Some(bounds) = occluder_mask.bbox() else {
        return image.clone();
    };
    let translated = translate_onto(occluder_mask, h, w, offset);
    let alpha = box_average(&translated, feather_radius);
    let patch_h = occluder_patch.height() as isize;
    let patch_w = occluder_patch.width() as isize;
    let origin_r = bounds.row_min as isize + offset.0;
    let origin_c = bounds.col_min as isize + offset.1;
    let mut out = image.clone();
    for r in 0..h {
        for c in 0..w {
            let a = alpha[r * w + c];
            if a <= 0.0 {
                continue;
            }
            let pr = (r as isize - origin_r).clamp(0, patch_h - 1) as u32;
            let pc = (c as isize - origin_c).clamp(0, patch_w - 1) as u32;
            let fg = occluder_patch.get_pixel(pc, pr);
            let bg = out.get_pixel(c as u32, r as u32);
            let blend = |f: u8, b: u8| -> u8 {
                (a * f as f64 + (1.0 - a) * b as f64)
                    .round()
                    .clamp(0.0, 255.0) as u8
            };
            out.put_pixel(
                c as u32,
                r as u32,
                Rgb([
                    blend(fg[0], bg[0]),
                    blend(fg[1], bg[1]),
                    blend(fg[2], bg[2]),
                ]),
            );
        }
    }
    out
}

/// Fraction of set cells in the (2r+1)^2 window around each cell,
/// zero-padded at the borders so the denominator never shrinks.
fn box_average(mask: &BinaryMask, radius: usize) -> Vec<f64> {
    let (h, w) = mask.dims();
    if radius == 0 {
        return mask
            .as_slice()
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect();
    }
    // Horizontal prefix counts, then vertical.
    let mut horiz = vec![0u32; h * w];
    for r in 0..h {
        let mut count = 0u32;
        for c in 0..radius.min(w) {
            count += mask.get(r, c) as u32;
        }
        for c in 0..w {
            let enter = c + radius;
            if enter < w {
                count += mask.get(r, enter) as u32;
            }
            horiz[r * w + c] = count;
            if c >= radius {
                count -= mask.get(r, c - radius) as u32;
            }
        }
    }
    let window = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let mut out = vec![0f64; h * w];
    for c in 0..w {
        let mut count = 0u32;
        for r in 0..radius.min(h) {
            count += horiz[r * w + c];
        }
        for r in 0..h {
            let enter = r + radius;
            if enter < h {
                count += horiz[enter * w + c];
            }
            out[r * w + c] = count as f64 / window;
            if r >= radius {
                count -= horiz[(r - radius) * w + c];
            }
        }
    }
    out
}

/// Assemble the supervision grids for one sampled pair.
pub fn build_triplet(
    scene: &Scene,
    pair: &OcclusionPair,
    set_tag: SetTag,
    boundary_radius: usize,
    feather_radius: usize,
) -> Result<TrainingTriplet, SynthError> {
    let (h, w) = (scene.height(), scene.width());
    let translated = pair.translated_occluder(h, w);
    let image = composite(
        &scene.image,
        &pair.occluder.image_patch,
        &pair.occluder.modal_mask,
        pair.offset,
        feather_radius,
    );
    let occludee_modal = &pair.occludee.modal_mask;
    let visible_remainder = occludee_modal.difference(&translated)?;
    // The boundary channel must be computable at inference time, where only
    // the visible remainder exists, so it is derived from the remainder and
    // not from the pre-occlusion mask (which would leak the hidden rim).
    let boundary = occlusion_boundary(&visible_remainder, &translated, boundary_radius)?;
    let (input_mask, target_mask, weight_region) = match set_tag {
        SetTag::Set1 => (visible_remainder, occludee_modal.clone(), translated),
        SetTag::Set2 => (translated.clone(), translated, visible_remainder),
    };
    Ok(TrainingTriplet {
        image,
        input_mask,
        target_mask,
        weight_region,
        boundary,
        set_tag,
    })
}

/// Knobs for the procedural scene generator.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSceneConfig {
    pub canvas_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Inclusive range for each shape's bounding-box side length.
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            canvas_size: 64,
            min_shapes: 2,
            max_shapes: 5,
            min_size: 12,
            max_size: 28,
        }
    }
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

struct ShapeDraft {
    kind: ShapeKind,
    amodal: BinaryMask,
    color: Rgb<u8>,
}

/// Generate a scene of solid shapes with exact depth bookkeeping. Instances
/// are ordered front to back: index 0 is nearest the camera and its modal
/// mask equals its amodal mask; deeper instances lose whatever the nearer
/// ones cover. Every returned instance keeps at least a quarter of its
/// amodal area visible (scenes violating that are resampled, then trimmed
/// as a last resort).
pub fn generate_synthetic_scene(
    scene_id: &str,
    rng: &mut impl Rng,
    config: &SyntheticSceneConfig,
) -> Scene {
    assert!(config.min_shapes >= 1 && config.max_shapes >= config.min_shapes);
    assert!(config.min_size >= 3 && config.max_size >= config.min_size);
    assert!(config.canvas_size >= config.max_size);
    let n = config.canvas_size;
    for attempt in 0..MAX_SAMPLING_ATTEMPTS {
        let count = rng.gen_range(config.min_shapes..=config.max_shapes);
        let drafts: Vec<ShapeDraft> = (0..count).map(|_| sample_shape(rng, config)).collect();
        let modals = carve_modals(&drafts, n);
        let visible_enough = drafts.iter().zip(&modals).all(|(d, m)| {
            let amodal_area = d.amodal.area();
            m.area() * 4 >= amodal_area && m.area() >= 4
        });
        if visible_enough || attempt + 1 == MAX_SAMPLING_ATTEMPTS {
            let keep: Vec<usize> = (0..drafts.len())
                .filter(|&i| {
                    modals[i].area() * 4 >= drafts[i].amodal.area() && modals[i].area() >= 4
                })
                .collect();
            if keep.is_empty() {
                continue;
            }
            return assemble_scene(scene_id, rng, &drafts, &modals, &keep, n);
        }
    }
    unreachable!("generator retries always leave at least one visible shape");
}

fn sample_shape(rng: &mut impl Rng, config: &SyntheticSceneConfig) -> ShapeDraft {
    let n = config.canvas_size;
    let kind = match rng.gen_range(0..3) {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Ellipse,
        _ => ShapeKind::Triangle,
    };
    let sh = rng.gen_range(config.min_size..=config.max_size);
    let sw = rng.gen_range(config.min_size..=config.max_size);
    let top = rng.gen_range(0..=n - sh);
    let left = rng.gen_range(0..=n - sw);
    let amodal = rasterize(kind, rng, n, top, left, sh, sw);
    let color = Rgb([
        rng.gen_range(30..=225u8),
        rng.gen_range(30..=225u8),
        rng.gen_range(30..=225u8),
    ]);
    ShapeDraft {
        kind,
        amodal,
        color,
    }
}

fn rasterize(
    kind: ShapeKind,
    rng: &mut impl Rng,
    n: usize,
    top: usize,
    left: usize,
    sh: usize,
    sw: usize,
) -> BinaryMask {
    let mut mask = BinaryMask::new(n, n).unwrap();
    match kind {
        ShapeKind::Rectangle => {
            for r in top..top + sh {
                for c in left..left + sw {
                    mask.set(r, c, true);
                }
            }
        }
        ShapeKind::Ellipse => {
            let cy = top as f64 + sh as f64 / 2.0;
            let cx = left as f64 + sw as f64 / 2.0;
            let ay = sh as f64 / 2.0;
            let ax = sw as f64 / 2.0;
            for r in top..top + sh {
                for c in left..left + sw {
                    let dy = (r as f64 + 0.5 - cy) / ay;
                    let dx = (c as f64 + 0.5 - cx) / ax;
                    if dy * dy + dx * dx <= 1.0 {
                        mask.set(r, c, true);
                    }
                }
            }
        }
        ShapeKind::Triangle => {
            // Three random vertices inside the box, resampled until the
            // triangle is fat enough to rasterize cleanly.
            let min_area = (sh * sw) as f64 * 0.3;
            let mut verts = [(0f64, 0f64); 3];
            for _ in 0..20 {
                for v in verts.iter_mut() {
                    *v = (
                        top as f64 + rng.gen_range(0.0..sh as f64),
                        left as f64 + rng.gen_range(0.0..sw as f64),
                    );
                }
                let area2 = ((verts[1].0 - verts[0].0) * (verts[2].1 - verts[0].1)
                    - (verts[2].0 - verts[0].0) * (verts[1].1 - verts[0].1))
                    .abs();
                if area2 / 2.0 >= min_area {
                    break;
                }
            }
            let side = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| {
                (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
            };
            for r in top..top + sh {
                for c in left..left + sw {
                    let p = (r as f64 + 0.5, c as f64 + 0.5);
                    let d0 = side(verts[0], verts[1], p);
                    let d1 = side(verts[1], verts[2], p);
                    let d2 = side(verts[2], verts[0], p);
                    let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                    let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                    if !(has_neg && has_pos) {
                        mask.set(r, c, true);
                    }
                }
            }
            // Degenerate triangles can still rasterize to nothing; fall
            // back to the full box so the draft stays usable.
            if mask.is_empty() {
                for r in top..top + sh {
                    for c in left..left + sw {
                        mask.set(r, c, true);
                    }
                }
            }
        }
    }
    mask
}

/// Modal mask of each draft: its amodal mask minus everything nearer.
fn carve_modals(drafts: &[ShapeDraft], n: usize) -> Vec<BinaryMask> {
    let mut covered = BinaryMask::new(n, n).unwrap();
    let mut modals = Vec::with_capacity(drafts.len());
    for draft in drafts {
        modals.push(draft.amodal.difference(&covered).unwrap());
        covered = covered.union(&draft.amodal).unwrap();
    }
    modals
}

fn assemble_scene(
    scene_id: &str,
    rng: &mut impl Rng,
    drafts: &[ShapeDraft],
    modals: &[BinaryMask],
    keep: &[usize],
    n: usize,
) -> Scene {
    let mut image = RgbImage::new(n as u32, n as u32);
    for r in 0..n {
        for c in 0..n {
            let g = rng.gen_range(15..=45u8);
            image.put_pixel(c as u32, r as u32, Rgb([g, g, g]));
        }
    }
    // Painter's algorithm: back to front, including dropped shapes so the
    // imagery stays consistent with the kept instances' modal masks.
    for draft in drafts.iter().rev() {
        for r in 0..n {
            for c in 0..n {
                if draft.amodal.get(r, c) {
                    image.put_pixel(c as u32, r as u32, draft.color);
                }
            }
        }
    }
    let mut instances = Vec::with_capacity(keep.len());
    for (new_id, &i) in keep.iter().enumerate() {
        let category_id = match drafts[i].kind {
            ShapeKind::Rectangle => 1,
            ShapeKind::Ellipse => 2,
            ShapeKind::Triangle => 3,
        };
        instances.push(
            SceneInstance::from_masks(
                &image,
                new_id as u32 + 1,
                category_id,
                modals[i].clone(),
                Some(drafts[i].amodal.clone()),
            )
            .expect("kept instances have non-empty modal masks"),
        );
    }
    Scene {
        scene_id: scene_id.to_string(),
        image,
        instances,
    }
}
