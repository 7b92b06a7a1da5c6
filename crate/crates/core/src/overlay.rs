//! Heatmap overlays: viridis colouring alpha-blended over an image or a
//! neutral gray canvas.

use std::path::Path;

use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::colormap::VIRIDIS;
use crate::daam::AttributionMap;

/// Canvas value used when no generated image is supplied.
pub const NEUTRAL_GRAY: u8 = 128;

#[derive(Debug, Error)]
pub enum OverlayError {
    #[error("image is {image_w}x{image_h} but map is {map_w}x{map_h}")]
    SizeMismatch { image_w: u32, image_h: u32, map_w: usize, map_h: usize },
    #[error("opacity must be in [0, 1], got {0}")]
    BadOpacity(f64),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Viridis colour for a value in [0, 1].
pub fn viridis(v: f64) -> [u8; 3] {
    let idx = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    VIRIDIS[idx]
}

/// Per-pixel alpha is `opacity * value`, so cold regions leave the
/// background visible.
pub fn render_overlay(
    background: Option<&RgbImage>,
    map: &AttributionMap,
    opacity: f64,
) -> Result<RgbImage, OverlayError> {
    if !(0.0..=1.0).contains(&opacity) {
        return Err(OverlayError::BadOpacity(opacity));
    }
    if let Some(img) = background {
        if (img.width() as usize, img.height() as usize) != (map.width, map.height) {
            return Err(OverlayError::SizeMismatch {
                image_w: img.width(),
                image_h: img.height(),
                map_w: map.width,
                map_h: map.height,
            });
        }
    }
    let out = RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        let base = background.map_or([NEUTRAL_GRAY; 3], |img| img.get_pixel(x, y).0);
        let v = map.get(x as usize, y as usize);
        let colour = viridis(v);
        let alpha = opacity * v.clamp(0.0, 1.0);
        let mut px = [0u8; 3];
        for c in 0..3 {
            let blended = (1.0 - alpha) * base[c] as f64 + alpha * colour[c] as f64;
            px[c] = blended.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    });
    Ok(out)
}

pub fn save_overlay(
    background: Option<&RgbImage>,
    map: &AttributionMap,
    opacity: f64,
    path: impl AsRef<Path>,
) -> Result<(), OverlayError> {
    render_overlay(background, map, opacity)?.save(path)?;
    Ok(())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage, OverlayError> {
    Ok(image::open(path)?.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_match_lut() {
        assert_eq!(viridis(0.0), [68, 1, 84]);
        assert_eq!(viridis(1.0), [253, 231, 37]);
    }

    #[test]
    fn zero_map_leaves_canvas() {
        let map = AttributionMap::from_normalized(3, 2, vec![0.0; 6]).unwrap();
        let out = render_overlay(None, &map, 0.7).unwrap();
        assert!(out.pixels().all(|p| p.0 == [NEUTRAL_GRAY; 3]));
    }

    #[test]
    fn full_opacity_peak_is_pure_colour() {
        let map = AttributionMap::from_normalized(2, 1, vec![1.0, 0.5]).unwrap();
        let out = render_overlay(None, &map, 1.0).unwrap();
        assert_eq!(out.get_pixel(0, 0).0, [253, 231, 37]);
    }

    #[test]
    fn size_mismatch_rejected() {
        let map = AttributionMap::from_normalized(2, 2, vec![0.0; 4]).unwrap();
        let img = RgbImage::new(3, 2);
        assert!(matches!(render_overlay(Some(&img), &map, 0.5), Err(OverlayError::SizeMismatch { .. })));
    }
}
