use hugs_core::raster::{check_dims, BinaryMask, Image, RasterError};

const STATIC_TINT: [f64; 3] = [0.0, 1.0, 0.0];
const TRANSIENT_TINT: [f64; 3] = [1.0, 0.0, 0.0];
const POINT_COLOR: [f64; 3] = [1.0, 1.0, 0.0];
const TINT_ALPHA: f64 = 0.5;

fn blend(a: [f64; 3], b: [f64; 3], alpha: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| (1.0 - alpha) * a[c] + alpha * b[c])
}

/// Static pixels (mask 1) tinted green, transient pixels red.
pub fn mask_overlay(image: &Image, mask: &BinaryMask) -> Result<Image, RasterError> {
    check_dims(image.dims(), mask.dims())?;
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let tint = if mask.get(x, y) { STATIC_TINT } else { TRANSIENT_TINT };
            out.set(x, y, blend(image.get(x, y), tint, TINT_ALPHA));
        }
    }
    Ok(out)
}

/// One marked pixel per point, at the pixel containing it.
pub fn point_overlay(image: &Image, points: &[[f64; 2]]) -> Image {
    let mut out = image.clone();
    for p in points {
        if p[0] < 0.0 || p[1] < 0.0 {
            continue;
        }
        let (x, y) = (p[0].floor() as u32, p[1].floor() as u32);
        if x < image.width() && y < image.height() {
            out.set(x, y, POINT_COLOR);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tint_follows_mask() {
        let img = Image::filled(2, 1, [0.0; 3]);
        let mask = BinaryMask::new(2, 1, vec![true, false]).unwrap();
        let out = mask_overlay(&img, &mask).unwrap();
        assert_eq!(out.get(0, 0), [0.0, 0.5, 0.0]);
        assert_eq!(out.get(1, 0), [0.5, 0.0, 0.0]);
    }

    #[test]
    fn points_land_on_containing_pixel() {
        let img = Image::filled(4, 4, [0.0; 3]);
        let out = point_overlay(&img, &[[2.5, 1.2], [9.0, 0.0]]);
        assert_eq!(out.get(2, 1), POINT_COLOR);
        assert_eq!(out.pixels().iter().filter(|p| **p == POINT_COLOR).count(), 1);
    }
}
