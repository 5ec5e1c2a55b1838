//! Turning identity maps into viewable images. Colors are a pure function
//! of the global id, so the same track keeps its color across frames, runs,
//! and machines.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::maps::IdentityMap;
use crate::Result;

/// Golden-ratio conjugate; successive ids land on well-separated hues.
const HUE_STEP: f64 = 0.618034;

/// The fixed color for a global id. Id zero (no instance) is black;
/// everything else gets a fully saturated hue.
pub fn id_color(global_id: u32) -> Rgb<u8> {
    if global_id == 0 {
        return Rgb([0, 0, 0]);
    }
    let hue = (global_id as f64 * HUE_STEP).fract();
    hsv_to_rgb(hue)
}

/// Hue in [0, 1) at full saturation and value.
fn hsv_to_rgb(hue: f64) -> Rgb<u8> {
    let h6 = hue * 6.0;
    let sextant = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let q = ((1.0 - f) * 255.0).round() as u8;
    let t = (f * 255.0).round() as u8;
    let (r, g, b) = match sextant {
        0 => (255, t, 0),
        1 => (q, 255, 0),
        2 => (0, 255, t),
        3 => (0, q, 255),
        4 => (t, 0, 255),
        _ => (255, 0, q),
    };
    Rgb([r, g, b])
}

/// Renders an identity map with one fixed color per track.
pub fn render_identity(ids: &IdentityMap) -> RgbImage {
    let mut image = RgbImage::new(ids.width() as u32, ids.height() as u32);
    for (i, &id) in ids.data().iter().enumerate() {
        let x = (i % ids.width()) as u32;
        let y = (i / ids.width()) as u32;
        image.put_pixel(x, y, id_color(id));
    }
    image
}

pub fn save_identity_png(path: &Path, ids: &IdentityMap) -> Result<()> {
    render_identity(ids)
        .save(path)
        .map_err(|e| crate::Error::Io(std::io::Error::other(e)))
}
