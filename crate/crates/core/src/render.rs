//! Image dumps: orthogonal-view montages (PNG) and per-slice PGM files.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{io_err, Error, Result};
use crate::slice::SliceImage;

/// Background gap between montage panels, in pixels.
pub const PANEL_GAP: usize = 4;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Axial (middle slice), coronal (middle row over depth) and sagittal (middle
/// column over depth) panels side by side, depth running downwards.
pub fn montage(slices: &[SliceImage]) -> Result<GrayImage> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Usage("cannot render an empty volume".into()))?;
    let (h, w, d) = (first.height(), first.width(), slices.len());
    if slices.iter().any(|s| s.height() != h || s.width() != w) {
        return Err(Error::Shape("volume slices differ in size".into()));
    }
    let gray: Vec<Vec<f32>> = slices.iter().map(|s| s.gray()).collect();
    let height = h.max(d);
    let width = 3 * w.max(h) + 2 * PANEL_GAP;
    let mut img = GrayImage::new(width as u32, height as u32);
    let put = |img: &mut GrayImage, x: usize, y: usize, v: f32| img.put_pixel(x as u32, y as u32, Luma([to_u8(v)]));

    let mid = &gray[d / 2];
    for y in 0..h {
        for x in 0..w {
            put(&mut img, x, y, mid[y * w + x]);
        }
    }
    let x0 = w.max(h) + PANEL_GAP;
    let (my, mx) = (h / 2, w / 2);
    for (z, g) in gray.iter().enumerate() {
        for x in 0..w {
            put(&mut img, x0 + x, z, g[my * w + x]);
        }
    }
    let x1 = 2 * (w.max(h) + PANEL_GAP);
    for (z, g) in gray.iter().enumerate() {
        for y in 0..h {
            put(&mut img, x1 + y, z, g[y * w + mx]);
        }
    }
    Ok(img)
}

pub fn save_montage(slices: &[SliceImage], path: &Path) -> Result<(u32, u32)> {
    let img = montage(slices)?;
    img.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(img.dimensions())
}

/// Binary PGM (P5) bytes of a slice's gray values.
pub fn pgm_bytes(slice: &SliceImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", slice.width(), slice.height()).into_bytes();
    out.extend(slice.gray().into_iter().map(to_u8));
    out
}

/// Write `slice_NNNN.pgm` for every slice into `dir`.
pub fn dump_pgm(slices: &[SliceImage], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, s) in slices.iter().enumerate() {
        let path = dir.join(format!("slice_{i:04}.pgm"));
        fs::write(&path, pgm_bytes(s)).map_err(io_err(&path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn montage_layout() {
        let vol: Vec<SliceImage> = (0..40).map(|i| SliceImage::filled(32, 32, i as f32 / 40.0)).collect();
        let m = montage(&vol).unwrap();
        assert_eq!(m.dimensions(), (3 * 32 + 2 * PANEL_GAP as u32, 40));
        // axial panel shows the middle slice
        assert_eq!(m.get_pixel(0, 0)[0], to_u8(20.0 / 40.0));
        // depth runs downwards in the side panels
        assert_eq!(m.get_pixel(40, 39)[0], to_u8(39.0 / 40.0));
        assert!(montage(&[]).is_err());
    }

    #[test]
    fn pgm_header() {
        let b = pgm_bytes(&SliceImage::filled(2, 3, 1.0));
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(b.len(), 11 + 6);
        assert!(b[11..].iter().all(|&v| v == 255));
    }
}
