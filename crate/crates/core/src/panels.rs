//! Three-panel conditioning canvas and its token bookkeeping.
//!
//! The canvas is `H × 3W`: reference person (G) on the left, target person
//! (P) in the middle and the panel to synthesise (F) on the right. Image
//! tokens are 4×4 patches taken row-major within each panel, panels in
//! G → P → F order, and the joint attention sequence puts the `l1` text
//! tokens in front. This module is the single source of truth for that
//! ordering; `dit::patchify` follows it.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

pub const PANELS: usize = 3;

/// Which panel of the canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Panel {
    Reference,
    Target,
    Fit,
}

impl Panel {
    pub const ORDER: [Panel; PANELS] = [Panel::Reference, Panel::Target, Panel::Fit];

    pub fn index(self) -> usize {
        match self {
            Panel::Reference => 0,
            Panel::Target => 1,
            Panel::Fit => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Panel::Reference => "reference",
            Panel::Target => "target",
            Panel::Fit => "third",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelLayout {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub text_tokens: usize,
}

impl Default for PanelLayout {
    fn default() -> Self {
        Self { height: 64, width: 48, patch: 4, text_tokens: 8 }
    }
}

impl PanelLayout {
    pub fn new(height: usize, width: usize, patch: usize, text_tokens: usize) -> Result<Self> {
        let layout = Self { height, width, patch, text_tokens };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("panel and patch sizes must be positive".into()));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "panel {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.text_tokens == 0 {
            return Err(Error::Config("at least one text token is required".into()));
        }
        Ok(())
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch
    }

    /// `l`: tokens per panel.
    pub fn tokens_per_panel(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn image_tokens(&self) -> usize {
        PANELS * self.tokens_per_panel()
    }

    /// `L = l1 + 3l`: length of the joint text + image sequence.
    pub fn total_keys(&self) -> usize {
        self.text_tokens + self.image_tokens()
    }

    pub fn canvas_width(&self) -> usize {
        PANELS * self.width
    }

    /// Channels in one flattened RGB patch.
    pub fn patch_channels(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// `H × 3W` RGB canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    image: Image,
}

impl Canvas {
    pub fn new(image: Image, layout: &PanelLayout) -> Result<Self> {
        if image.height() != layout.height || image.width() != layout.canvas_width() {
            return Err(Error::Shape(format!(
                "canvas is {}x{}, expected {}x{}",
                image.height(),
                image.width(),
                layout.height,
                layout.canvas_width()
            )));
        }
        Ok(Self { image })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn into_image(self) -> Image {
        self.image
    }

    pub fn panel_width(&self) -> usize {
        self.image.width() / PANELS
    }

    pub fn panel(&self, which: Panel) -> Image {
        let w = self.panel_width();
        self.image.crop_columns(which.index() * w, w)
    }
}

/// Half-open token index intervals over the joint sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenRanges {
    pub text: Range<usize>,
    pub reference: Range<usize>,
    pub target: Range<usize>,
    pub fit: Range<usize>,
}

impl TokenRanges {
    pub fn panel(&self, which: Panel) -> Range<usize> {
        match which {
            Panel::Reference => self.reference.clone(),
            Panel::Target => self.target.clone(),
            Panel::Fit => self.fit.clone(),
        }
    }
}

pub fn token_ranges(layout: &PanelLayout) -> TokenRanges {
    let l1 = layout.text_tokens;
    let l = layout.tokens_per_panel();
    TokenRanges { text: 0..l1, reference: l1..l1 + l, target: l1 + l..l1 + 2 * l, fit: l1 + 2 * l..l1 + 3 * l }
}

/// Places three `H × W` images side by side.
pub fn concat_panels(reference: &Image, target: &Image, third: &Image) -> Result<Canvas> {
    let dims = |i: &Image| (i.height(), i.width());
    // The odd one out is blamed; with three distinct shapes the reference wins.
    let (h, w) = if dims(reference) != dims(target) && dims(target) == dims(third) {
        dims(target)
    } else {
        dims(reference)
    };
    for (panel, img) in Panel::ORDER.iter().zip([reference, target, third]) {
        if img.height() != h || img.width() != w {
            return Err(Error::Shape(format!(
                "{} panel is {}x{}, expected {h}x{w}",
                panel.name(),
                img.height(),
                img.width()
            )));
        }
    }
    let mut data = Vec::with_capacity(h * w * 3 * PANELS);
    for y in 0..h {
        for img in [reference, target, third] {
            data.extend_from_slice(&img.as_slice()[y * w * 3..(y + 1) * w * 3]);
        }
    }
    Ok(Canvas { image: Image::from_vec(h, w * PANELS, data)? })
}

pub fn split_panels(canvas: &Canvas) -> Result<(Image, Image, Image)> {
    if canvas.image.width() % PANELS != 0 {
        return Err(Error::Shape(format!("canvas width {} is not 3W", canvas.image.width())));
    }
    Ok((canvas.panel(Panel::Reference), canvas.panel(Panel::Target), canvas.panel(Panel::Fit)))
}

/// All-zeros blank panel.
pub fn blank_panel(layout: &PanelLayout) -> Image {
    Image::zeros(layout.height, layout.width)
}

/// `H × 3W` mask, one on the third panel and zero elsewhere.
pub fn build_inpaint_mask(layout: &PanelLayout) -> Mask {
    let (h, w) = (layout.height, layout.width);
    let mut m = Mask::zeros(h, w * PANELS);
    for y in 0..h {
        for x in 2 * w..3 * w {
            m.set(y, x, 1.0);
        }
    }
    m
}

/// `canvas · (1 − mask)`, the mask broadcast over channels.
pub fn apply_mask(canvas: &Canvas, mask: &Mask) -> Result<Canvas> {
    let img = &canvas.image;
    if mask.height() != img.height() || mask.width() != img.width() {
        return Err(Error::Shape(format!(
            "mask is {}x{}, canvas is {}x{}",
            mask.height(),
            mask.width(),
            img.height(),
            img.width()
        )));
    }
    let mut out = img.clone();
    for (px, &m) in out.as_mut_slice().chunks_exact_mut(3).zip(mask.as_slice()) {
        for v in px {
            *v *= 1.0 - m;
        }
    }
    Ok(Canvas { image: out })
}

/// Area-averages a single-panel mask over each patch, row-major over the patch grid.
pub fn mask_to_token_weights(mask: &Mask, layout: &PanelLayout) -> Result<Vec<f64>> {
    if mask.height() != layout.height || mask.width() != layout.width {
        return Err(Error::Shape(format!(
            "mask is {}x{}, panel is {}x{}",
            mask.height(),
            mask.width(),
            layout.height,
            layout.width
        )));
    }
    let p = layout.patch;
    let area = (p * p) as f64;
    let mut weights = Vec::with_capacity(layout.tokens_per_panel());
    for gr in 0..layout.grid_rows() {
        for gc in 0..layout.grid_cols() {
            let mut s = 0.0f64;
            for y in gr * p..(gr + 1) * p {
                for x in gc * p..(gc + 1) * p {
                    s += mask.get(y, x) as f64;
                }
            }
            weights.push(s / area);
        }
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> PanelLayout {
        PanelLayout::default()
    }

    fn ramp(h: usize, w: usize, k: f32) -> Image {
        let data = (0..h * w * 3).map(|i| ((i as f32 * k) % 1.0).abs()).collect();
        Image::from_vec(h, w, data).unwrap()
    }

    #[test]
    fn default_layout_arithmetic() {
        let l = layout();
        assert_eq!(l.tokens_per_panel(), 192);
        assert_eq!(l.total_keys(), 584);
        let r = token_ranges(&l);
        assert_eq!(r.text, 0..8);
        assert_eq!(r.reference, 8..200);
        assert_eq!(r.target, 200..392);
        assert_eq!(r.fit, 392..584);
    }

    #[test]
    fn layout_rejects_bad_geometry() {
        assert!(PanelLayout::new(62, 48, 4, 8).is_err());
        assert!(PanelLayout::new(64, 48, 4, 0).is_err());
        assert!(PanelLayout::new(64, 48, 0, 8).is_err());
    }

    #[test]
    fn concat_places_columns_and_splits_back() {
        let (a, b, c) = (ramp(64, 48, 0.013), ramp(64, 48, 0.029), ramp(64, 48, 0.071));
        let canvas = concat_panels(&a, &b, &c).unwrap();
        assert_eq!(canvas.image().width(), 144);
        assert_eq!(canvas.image().pixel(5, 48 + 7), b.pixel(5, 7));
        assert_eq!(canvas.image().crop_columns(96, 48), c);
        let (a2, b2, c2) = split_panels(&canvas).unwrap();
        assert_eq!((a2, b2, c2), (a.clone(), b.clone(), c.clone()));
        let again = concat_panels(&a, &b, &c).unwrap();
        assert_eq!(again, canvas);
    }

    #[test]
    fn blank_third_panel_is_zero() {
        let a = ramp(64, 48, 0.1);
        let canvas = concat_panels(&a, &a, &blank_panel(&layout())).unwrap();
        assert!(canvas.panel(Panel::Fit).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_panel_is_named() {
        let a = ramp(64, 48, 0.1);
        let short = ramp(60, 48, 0.1);
        let err = concat_panels(&short, &a, &a).unwrap_err().to_string();
        assert!(err.contains("reference"), "{err}");
        let err = concat_panels(&a, &a, &short).unwrap_err().to_string();
        assert!(err.contains("third"), "{err}");
    }

    #[test]
    fn inpaint_mask_covers_third_panel_only() {
        let l = layout();
        let m = build_inpaint_mask(&l);
        assert_eq!(m.sum(), (64 * 48) as f64);
        for y in 0..64 {
            for x in 0..144 {
                assert_eq!(m.get(y, x), if x >= 96 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn apply_mask_cases() {
        let l = layout();
        let (a, b, c) = (ramp(64, 48, 0.013), ramp(64, 48, 0.029), ramp(64, 48, 0.071));
        let canvas = concat_panels(&a, &b, &c).unwrap();
        assert_eq!(apply_mask(&canvas, &Mask::zeros(64, 144)).unwrap(), canvas);
        let cond = apply_mask(&canvas, &build_inpaint_mask(&l)).unwrap();
        assert_eq!(cond.panel(Panel::Reference), a);
        assert_eq!(cond.panel(Panel::Target), b);
        assert!(cond.panel(Panel::Fit).as_slice().iter().all(|&v| v == 0.0));
        let all = apply_mask(&canvas, &Mask::ones(64, 144)).unwrap();
        assert!(all.image().as_slice().iter().all(|&v| v == 0.0));
        assert!(apply_mask(&canvas, &Mask::zeros(64, 48)).is_err());
    }

    #[test]
    fn token_weight_cases() {
        let l = layout();
        assert!(mask_to_token_weights(&Mask::ones(64, 48), &l).unwrap().iter().all(|&w| w == 1.0));

        let mut one_patch = Mask::zeros(64, 48);
        for y in 8..12 {
            for x in 4..8 {
                one_patch.set(y, x, 1.0);
            }
        }
        let w = mask_to_token_weights(&one_patch, &l).unwrap();
        assert_eq!(w[2 * 12 + 1], 1.0);
        assert_eq!(w.iter().filter(|&&v| v != 0.0).count(), 1);

        let mut half = Mask::zeros(64, 48);
        for y in 0..2 {
            for x in 0..4 {
                half.set(y, x, 1.0);
            }
        }
        assert_eq!(mask_to_token_weights(&half, &l).unwrap()[0], 0.5);
        assert!(mask_to_token_weights(&Mask::zeros(64, 144), &l).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_image(h: usize, w: usize) -> impl Strategy<Value = Image> {
            proptest::collection::vec(0u8..=255, h * w * 3)
                .prop_map(move |v| Image::from_rgb8(h, w, &v).unwrap())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn split_concat_round_trip(a in arb_image(8, 4), b in arb_image(8, 4), c in arb_image(8, 4)) {
                let canvas = concat_panels(&a, &b, &c).unwrap();
                let (a2, b2, c2) = split_panels(&canvas).unwrap();
                prop_assert_eq!(&a2, &a);
                prop_assert_eq!(&b2, &b);
                prop_assert_eq!(&c2, &c);
                prop_assert_eq!(concat_panels(&a2, &b2, &c2).unwrap(), canvas);
            }

            #[test]
            fn apply_mask_is_linear(img in arb_image(4, 12), bits in proptest::collection::vec(any::<bool>(), 48), alpha in 0.0f32..4.0) {
                let l = PanelLayout::new(4, 4, 4, 1).unwrap();
                let canvas = Canvas::new(img.clone(), &l).unwrap();
                let mask = Mask::from_vec(4, 12, bits.iter().map(|&b| b as u8 as f32).collect()).unwrap();
                let scaled = Canvas::new(img.map(|v| v * alpha), &l).unwrap();
                let lhs = apply_mask(&scaled, &mask).unwrap();
                let rhs = apply_mask(&canvas, &mask).unwrap().into_image().map(|v| v * alpha);
                prop_assert_eq!(lhs.image(), &rhs);
            }

            #[test]
            fn token_weights_preserve_mass(bits in proptest::collection::vec(any::<bool>(), 16 * 12)) {
                let l = PanelLayout::new(16, 12, 4, 2).unwrap();
                let mask = Mask::from_vec(16, 12, bits.iter().map(|&b| b as u8 as f32).collect()).unwrap();
                let w = mask_to_token_weights(&mask, &l).unwrap();
                let mean_w = w.iter().sum::<f64>() / w.len() as f64;
                prop_assert_eq!(mean_w, mask.mean());
                prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }

            #[test]
            fn token_ranges_partition(h in 1usize..20, w in 1usize..20, l1 in 1usize..16) {
                let l = PanelLayout::new(h * 4, w * 4, 4, l1).unwrap();
                let r = token_ranges(&l);
                prop_assert_eq!(r.text.start, 0);
                prop_assert_eq!(r.text.end, r.reference.start);
                prop_assert_eq!(r.reference.end, r.target.start);
                prop_assert_eq!(r.target.end, r.fit.start);
                prop_assert_eq!(r.fit.end, l.total_keys());
                prop_assert_eq!(r.reference.len(), r.fit.len());
            }
        }
    }
}
