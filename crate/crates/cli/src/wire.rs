//! Base64-PNG encoding used on the HTTP boundary.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use painter_core::raster::{decode_png_rgb, encode_png_rgb, BinaryMask, RgbImage};
use painter_core::{PainterError, Result};

fn strip_data_url(s: &str) -> &str {
    match s.find(";base64,") {
        Some(i) if s.starts_with("data:") => &s[i + 8..],
        _ => s,
    }
}

fn decode_b64(s: &str, what: &str) -> Result<Vec<u8>> {
    STANDARD
        .decode(strip_data_url(s.trim()))
        .map_err(|e| PainterError::domain(format!("{what}: invalid base64: {e}")))
}

/// Accepts plain base64 or a `data:image/png;base64,` URL.
pub fn image_from_b64(s: &str) -> Result<RgbImage> {
    decode_png_rgb(&decode_b64(s, "image")?)
}

pub fn mask_from_b64(s: &str) -> Result<BinaryMask> {
    BinaryMask::from_png_bytes(&decode_b64(s, "mask")?)
}

pub fn image_to_b64(img: &RgbImage) -> Result<String> {
    Ok(STANDARD.encode(encode_png_rgb(img)?))
}

pub fn mask_to_b64(m: &BinaryMask) -> Result<String> {
    Ok(STANDARD.encode(m.to_png_bytes()?))
}
