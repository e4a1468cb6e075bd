use crate::error::{Error, Result};
use crate::panels::{Canvas, PanelLayout, PANELS};
use crate::raster::{Image, Mask};
use crate::tensor::{Mat, Real};

/// Visits `(token, channel_base, y, x)` for every pixel of the canvas in
/// token order: panel, then patch row, then patch column; inside a patch,
/// pixel rows then columns.
fn for_each_pixel(layout: &PanelLayout, mut f: impl FnMut(usize, usize, usize, usize)) {
    let p = layout.patch;
    let (gr, gc) = (layout.grid_rows(), layout.grid_cols());
    for panel in 0..PANELS {
        for r in 0..gr {
            for c in 0..gc {
                let token = panel * gr * gc + r * gc + c;
                for dy in 0..p {
                    for dx in 0..p {
                        f(token, dy * p + dx, r * p + dy, panel * layout.width + c * p + dx);
                    }
                }
            }
        }
    }
}

/// Canvas to `3l × (patch² · 3)` token features, G tokens first, then P, then F.
pub fn patchify<T: Real>(canvas: &Canvas, layout: &PanelLayout) -> Result<Mat<T>> {
    let img = canvas.image();
    if img.height() != layout.height || img.width() != layout.canvas_width() {
        return Err(Error::Shape(format!(
            "canvas is {}x{}, layout expects {}x{}",
            img.height(),
            img.width(),
            layout.height,
            layout.canvas_width()
        )));
    }
    let ch = layout.patch_channels();
    let mut out = Mat::zeros(layout.image_tokens(), ch);
    let data = out.as_mut_slice();
    for_each_pixel(layout, |token, k, y, x| {
        let px = img.pixel(y, x);
        for c in 0..3 {
            data[token * ch + k * 3 + c] = T::lit(px[c] as f64);
        }
    });
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(tokens: &Mat<T>, layout: &PanelLayout) -> Result<Canvas> {
    let ch = layout.patch_channels();
    if tokens.rows() != layout.image_tokens() || tokens.cols() != ch {
        return Err(Error::Shape(format!(
            "token matrix is {}x{}, layout expects {}x{ch}",
            tokens.rows(),
            tokens.cols(),
            layout.image_tokens()
        )));
    }
    let mut img = Image::zeros(layout.height, layout.canvas_width());
    let data = tokens.as_slice();
    for_each_pixel(layout, |token, k, y, x| {
        let base = token * ch + k * 3;
        let rgb = [0, 1, 2].map(|c| data[base + c].to_f32().unwrap_or(f32::NAN));
        img.set_pixel(y, x, rgb);
    });
    Canvas::new(img, layout)
}

/// `H × 3W` mask to `3l × patch²` token features.
pub fn patchify_mask<T: Real>(mask: &Mask, layout: &PanelLayout) -> Result<Mat<T>> {
    if mask.height() != layout.height || mask.width() != layout.canvas_width() {
        return Err(Error::Shape(format!(
            "mask is {}x{}, layout expects {}x{}",
            mask.height(),
            mask.width(),
            layout.height,
            layout.canvas_width()
        )));
    }
    let p2 = layout.patch * layout.patch;
    let mut out = Mat::zeros(layout.image_tokens(), p2);
    let data = out.as_mut_slice();
    for_each_pixel(layout, |token, k, y, x| {
        data[token * p2 + k] = T::lit(mask.get(y, x) as f64);
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panels::{build_inpaint_mask, token_ranges};

    fn canvas(layout: &PanelLayout) -> Canvas {
        let data = (0..layout.height * layout.canvas_width() * 3).map(|i| (i % 251) as f32 / 255.0).collect();
        Canvas::new(Image::from_vec(layout.height, layout.canvas_width(), data).unwrap(), layout).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let layout = PanelLayout::default();
        let c = canvas(&layout);
        let tokens: Mat<f32> = patchify(&c, &layout).unwrap();
        assert_eq!(tokens.rows(), 576);
        assert_eq!(tokens.cols(), 48);
        assert_eq!(unpatchify(&tokens, &layout).unwrap(), c);
    }

    #[test]
    fn first_token_is_top_left_patch_of_reference() {
        let layout = PanelLayout::default();
        let c = canvas(&layout);
        let tokens: Mat<f32> = patchify(&c, &layout).unwrap();
        assert_eq!(tokens.get(0, 0), c.image().pixel(0, 0)[0]);
        assert_eq!(tokens.get(0, 5 * 3 + 1), c.image().pixel(1, 1)[1]);
        // Second patch row of the target panel starts at token l + 12.
        assert_eq!(tokens.get(192 + 12, 0), c.image().pixel(4, 48)[0]);
    }

    #[test]
    fn constant_canvas_gives_equal_tokens() {
        let layout = PanelLayout::default();
        let c = Canvas::new(Image::filled(64, 144, [0.2, 0.4, 0.6]), &layout).unwrap();
        let tokens: Mat<f32> = patchify(&c, &layout).unwrap();
        for r in 1..tokens.rows() {
            assert_eq!(tokens.row(r), tokens.row(0));
        }
    }

    #[test]
    fn inpaint_mask_tokens_follow_token_ranges() {
        let layout = PanelLayout::default();
        let m: Mat<f32> = patchify_mask(&build_inpaint_mask(&layout), &layout).unwrap();
        let fit = token_ranges(&layout).fit;
        let l1 = layout.text_tokens;
        for r in 0..m.rows() {
            let want = if fit.contains(&(r + l1)) { 1.0 } else { 0.0 };
            assert!(m.row(r).iter().all(|&v| v == want));
        }
    }

    #[test]
    fn shape_errors() {
        let layout = PanelLayout::default();
        let bad = Mat::<f32>::zeros(10, 48);
        assert!(unpatchify(&bad, &layout).is_err());
        assert!(patchify_mask::<f32>(&Mask::zeros(64, 48), &layout).is_err());
    }
}
