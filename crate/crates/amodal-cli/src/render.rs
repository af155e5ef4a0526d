//! Figure panels: five deterministically named PNG files per instance.

use amodal_core::eval::InstancePrediction;
use amodal_core::mask::BinaryMask;
use image::{GrayImage, RgbImage};
use ndarray::Array2;
use std::path::{Path, PathBuf};

/// Write the panel set for one instance:
/// `{scene}_{instance}_1_image.png` (input image),
/// `_2_modal.png`, `_3_boundary.png`, `_4_amodal.png` (binary masks as
/// black/white), `_5_uncertainty.png` (min-max normalized heat map).
/// Returns the written paths.
pub fn render_instance(
    image: &RgbImage,
    boundary: &BinaryMask,
    prediction: &InstancePrediction,
    scene_id: &str,
    out_dir: &Path,
) -> std::io::Result<Vec<PathBuf>> {
    let stem = format!("{scene_id}_{:04}", prediction.instance_id);
    let panels: [(&str, DynPanel); 5] = [
        ("1_image", DynPanel::Rgb(image)),
        ("2_modal", DynPanel::Mask(&prediction.modal_mask)),
        ("3_boundary", DynPanel::Mask(boundary)),
        ("4_amodal", DynPanel::Mask(&prediction.amodal_mask)),
        ("5_uncertainty", DynPanel::Heat(&prediction.uncertainty_map)),
    ];
    let mut written = Vec::with_capacity(panels.len());
    for (suffix, panel) in panels {
        let path = out_dir.join(format!("{stem}_{suffix}.png"));
        let result = match panel {
            DynPanel::Rgb(img) => img.save(&path),
            DynPanel::Mask(mask) => mask_image(mask).save(&path),
            DynPanel::Heat(map) => heat_image(map).save(&path),
        };
        result.map_err(|e| std::io::Error::other(format!("writing {}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}

enum DynPanel<'a> {
    Rgb(&'a RgbImage),
    Mask(&'a BinaryMask),
    Heat(&'a Array2<f32>),
}

/// Pure black/white rendering of a mask.
fn mask_image(mask: &BinaryMask) -> GrayImage {
    let (h, w) = mask.dims();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

/// Min-max normalized grayscale heat map. A constant map (zero range)
/// renders uniformly black rather than dividing by zero.
fn heat_image(map: &Array2<f32>) -> GrayImage {
    let (h, w) = map.dim();
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in map.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = map[[y as usize, x as usize]];
        let norm = if range > 0.0 { (v - lo) / range } else { 0.0 };
        image::Luma([(norm * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_heat_map_is_uniform_black() {
        let img = heat_image(&Array2::zeros((4, 4)));
        assert!(img.pixels().all(|p| p[0] == 0));
    }

    #[test]
    fn heat_map_normalizes_to_full_range() {
        let mut map = Array2::zeros((2, 2));
        map[[0, 0]] = 1.0;
        map[[1, 1]] = 3.0;
        let img = heat_image(&map);
        // min → 0, max → 255, midpoint absent here; 0.0 maps below 1.0.
        assert_eq!(img.get_pixel(0, 0)[0], ((1.0 - 0.0) / 3.0 * 255.0f32).round() as u8);
        assert_eq!(img.get_pixel(1, 1)[0], 255);
        assert_eq!(img.get_pixel(1, 0)[0], 0);
    }

    #[test]
    fn mask_image_is_binary(){
        let mask = BinaryMask::from_fn(3, 3, |r, c| r == c).unwrap();
        let img = mask_image(&mask);
        for (x, y, p) in img.enumerate_pixels() {
            assert_eq!(p[0] == 255, x == y);
            assert!(p[0] == 0 || p[0] == 255);
        }
    }
}
