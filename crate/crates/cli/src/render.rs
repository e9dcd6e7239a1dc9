//! Color renders of label maps as binary PPM.

use hfgd::data::hsv_to_rgb;
use hfgd::IGNORE_LABEL;

const BACKGROUND: [u8; 3] = [128, 128, 128];
const IGNORED: [u8; 3] = [0, 0, 0];

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Class 0 is gray; class `c >= 1` has hue `360 c / C`, saturation 0.75,
/// value 0.9. Ignored pixels are black.
pub fn palette(num_classes: usize) -> Vec<[u8; 3]> {
    (0..num_classes)
        .map(|c| {
            if c == 0 {
                BACKGROUND
            } else {
                hsv_to_rgb(360.0 * c as f64 / num_classes as f64, 0.75, 0.9).map(to_byte)
            }
        })
        .collect()
}

/// `P6 W H 255` header followed by RGB bytes, row-major.
pub fn ppm(labels: &[u16], width: usize, height: usize, palette: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6 {width} {height} 255\n").into_bytes();
    out.reserve(3 * labels.len());
    for &l in labels {
        let rgb = if l == IGNORE_LABEL {
            IGNORED
        } else {
            palette.get(l as usize).copied().unwrap_or(IGNORED)
        };
        out.extend_from_slice(&rgb);
    }
    out
}
