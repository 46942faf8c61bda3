//! Raster rendering of interpretation artifacts: electrode x time
//! heatmaps, interpolated scalp topomaps, and band x time maps.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::interpret::montage::Montage;

/// Piecewise-linear approximation of a perceptually uniform colormap.
const ANCHORS: [(f64, [f64; 3]); 9] = [
    (0.000, [68.0, 1.0, 84.0]),
    (0.125, [72.0, 40.0, 120.0]),
    (0.250, [62.0, 74.0, 137.0]),
    (0.375, [49.0, 104.0, 142.0]),
    (0.500, [38.0, 130.0, 142.0]),
    (0.625, [31.0, 158.0, 137.0]),
    (0.750, [53.0, 183.0, 121.0]),
    (0.875, [109.0, 205.0, 89.0]),
    (1.000, [253.0, 231.0, 37.0]),
];

pub fn colormap(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let mut lo = ANCHORS[0];
    let mut hi = ANCHORS[ANCHORS.len() - 1];
    for w in ANCHORS.windows(2) {
        if v >= w[0].0 && v <= w[1].0 {
            lo = w[0];
            hi = w[1];
            break;
        }
    }
    let span = (hi.0 - lo.0).max(1e-12);
    let f = (v - lo.0) / span;
    let mix = |a: f64, b: f64| (a + f * (b - a)).round().clamp(0.0, 255.0) as u8;
    Rgb([
        mix(lo.1[0], hi.1[0]),
        mix(lo.1[1], hi.1[1]),
        mix(lo.1[2], hi.1[2]),
    ])
}

fn normalize_range(values: &Array2<f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() || hi <= lo {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

/// Render a matrix as a heatmap, one cell per pixel block.
pub fn save_heatmap(values: &Array2<f64>, scale: usize, path: impl AsRef<Path>) -> Result<()> {
    let (rows, cols) = (values.shape()[0], values.shape()[1]);
    let s = scale.max(1) as u32;
    let (lo, hi) = normalize_range(values);
    let img = ImageBuffer::from_fn(cols as u32 * s, rows as u32 * s, |x, y| {
        let r = (y / s) as usize;
        let c = (x / s) as usize;
        colormap((values[[r, c]] - lo) / (hi - lo))
    });
    img.save(&path)
        .map_err(|e| Error::Format(format!("cannot write {}: {e}", path.as_ref().display())))
}

/// Inverse-distance-weighted interpolation of per-electrode values onto a
/// unit-disc grid, rendered as a scalp map.
pub fn save_topomap(
    values: &[f64],
    montage: &Montage,
    size: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    montage.check_coverage(values.len())?;
    let coords = montage.coords_in_order();
    let n = size.max(16) as u32;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let img = ImageBuffer::from_fn(n, n, |x, y| {
        let px = 2.0 * (x as f64 + 0.5) / n as f64 - 1.0;
        let py = 1.0 - 2.0 * (y as f64 + 0.5) / n as f64;
        if px * px + py * py > 1.0 {
            return Rgb([255, 255, 255]);
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, (ex, ey)) in coords.iter().enumerate() {
            let d2 = (px - ex) * (px - ex) + (py - ey) * (py - ey);
            if d2 < 1e-12 {
                num = values[i];
                den = 1.0;
                break;
            }
            let w = 1.0 / d2;
            num += w * values[i];
            den += w;
        }
        colormap(((num / den) - lo) / (hi - lo))
    });
    img.save(&path)
        .map_err(|e| Error::Format(format!("cannot write {}: {e}", path.as_ref().display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_and_topomap_write_png() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::from_shape_fn((8, 32), |(r, c)| (r * c) as f64);
        let hpath = dir.path().join("heat.png");
        save_heatmap(&m, 4, &hpath).unwrap();
        assert!(hpath.metadata().unwrap().len() > 0);

        let montage = Montage::ring(8);
        let tpath = dir.path().join("topo.png");
        save_topomap(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], &montage, 48, &tpath).unwrap();
        assert!(tpath.metadata().unwrap().len() > 0);
    }

    #[test]
    fn constant_input_renders_without_panic() {
        let dir = tempfile::tempdir().unwrap();
        let m = Array2::from_elem((4, 4), 2.5);
        save_heatmap(&m, 2, dir.path().join("flat.png")).unwrap();
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), Rgb([68, 1, 84]));
        assert_eq!(colormap(1.0), Rgb([253, 231, 37]));
    }

    #[test]
    fn topomap_requires_matching_montage() {
        let dir = tempfile::tempdir().unwrap();
        let montage = Montage::ring(4);
        let err = save_topomap(&[1.0, 2.0], &montage, 32, dir.path().join("t.png"));
        assert!(err.is_err());
    }
}
