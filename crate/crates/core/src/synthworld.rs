//! Procedural "people", garments and an exact garment-swap compositor.
//!
//! A person is a flat-colour figure: background, head, two arms (the left
//! hand optionally holding a small item), pants and a rectangular torso. The
//! torso rectangle is the garment region, so the garment mask is known
//! exactly and a garment swap is just a re-render with a different
//! [`GarmentSpec`]. That makes [`composite_swap`] a perfect try-on oracle.
//!
//! Garment patterns are anchored to absolute image coordinates: a stripe at
//! row `y` has the same colour wherever the torso sits.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{FileFormat, Image, Mask};
use crate::seeds;

/// Images must tile into patches of this size.
pub const PATCH: usize = 4;
pub const DEFAULT_HEIGHT: usize = 64;
pub const DEFAULT_WIDTH: usize = 48;

/// The twelve palette colours, as 8-bit sRGB.
pub const PALETTE: [[u8; 3]; 12] = [
    BLACK, WHITE, RED, GREEN, BLUE, YELLOW, CYAN, MAGENTA, ORANGE, PURPLE, GRAY, BROWN,
];
pub const BLACK: [u8; 3] = [0, 0, 0];
pub const WHITE: [u8; 3] = [255, 255, 255];
pub const RED: [u8; 3] = [220, 40, 40];
pub const GREEN: [u8; 3] = [40, 170, 70];
pub const BLUE: [u8; 3] = [40, 80, 210];
pub const YELLOW: [u8; 3] = [240, 210, 50];
pub const CYAN: [u8; 3] = [60, 200, 210];
pub const MAGENTA: [u8; 3] = [200, 60, 180];
pub const ORANGE: [u8; 3] = [245, 140, 30];
pub const PURPLE: [u8; 3] = [110, 50, 160];
pub const GRAY: [u8; 3] = [128, 128, 128];
pub const BROWN: [u8; 3] = [120, 75, 40];

pub fn palette_rgb(index: u8) -> [f32; 3] {
    let c = PALETTE[index as usize];
    [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0]
}

/// Normalised torso rectangle (centre and size as fractions of the image).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorsoRect {
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl TorsoRect {
    /// Half-open pixel bounds `(y0, y1, x0, x1)`. Sizes round to the nearest
    /// pixel, then the rectangle is centred and kept inside the image.
    pub fn pixel_bounds(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let axis = |centre: f64, size: f64, n: usize| {
            let len = ((size * n as f64).round() as usize).clamp(1, n);
            let start = (centre * n as f64 - len as f64 / 2.0).round().max(0.0) as usize;
            let start = start.min(n - len);
            (start, start + len)
        };
        let (y0, y1) = axis(self.cy, self.height, height);
        let (x0, x1) = axis(self.cx, self.width, width);
        (y0, y1, x0, x1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub torso: TorsoRect,
    pub head_color: u8,
    pub pants_color: u8,
    pub background_color: u8,
    /// Left and right arm angles in degrees below the horizontal.
    pub arm_angles: [f64; 2],
    pub held_item: bool,
    pub item_color: u8,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    HStripe,
    VStripe,
    Checker,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Solid, Pattern::HStripe, Pattern::VStripe, Pattern::Checker];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GarmentSpec {
    pub pattern: Pattern,
    pub color_a: u8,
    pub color_b: u8,
    /// Full period in pixels (one band of each colour), 4 or 8.
    pub stripe_period: u8,
}

impl GarmentSpec {
    pub fn solid(color: u8) -> Self {
        let color_b = if color == 0 { 1 } else { 0 };
        Self { pattern: Pattern::Solid, color_a: color, color_b, stripe_period: 4 }
    }

    /// Palette index of the garment at absolute pixel `(y, x)`.
    pub fn color_at(&self, y: usize, x: usize) -> u8 {
        let half = (self.stripe_period / 2).max(1) as usize;
        let second = match self.pattern {
            Pattern::Solid => false,
            Pattern::HStripe => (y / half) % 2 == 1,
            Pattern::VStripe => (x / half) % 2 == 1,
            Pattern::Checker => (y / half + x / half) % 2 == 1,
        };
        if second {
            self.color_b
        } else {
            self.color_a
        }
    }

    fn validate(&self) -> Result<()> {
        if self.color_a as usize >= PALETTE.len() || self.color_b as usize >= PALETTE.len() {
            return Err(Error::Invalid("garment colour outside the palette".into()));
        }
        if self.pattern != Pattern::Solid && self.color_a == self.color_b {
            return Err(Error::Invalid("patterned garment needs two distinct colours".into()));
        }
        if !matches!(self.stripe_period, 4 | 8) {
            return Err(Error::Invalid(format!("stripe period {} not in {{4, 8}}", self.stripe_period)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPerson {
    pub image: Image,
    pub garment_mask: Mask,
    pub person_spec: PersonSpec,
    pub garment_spec: GarmentSpec,
}

/// Draws a person and a garment from the stream keyed by `seed`.
pub fn sample_specs(seed: u64) -> (PersonSpec, GarmentSpec) {
    let mut rng = seeds::rng(seed);
    let torso = TorsoRect {
        cx: rng.random_range(0.3..=0.7),
        cy: rng.random_range(0.3..=0.7),
        width: rng.random_range(0.25..=0.45),
        height: rng.random_range(0.3..=0.5),
    };
    let n = PALETTE.len() as u8;
    let background_color = rng.random_range(0..n);
    let head_color = distinct(&mut rng, n, &[background_color]);
    let pants_color = distinct(&mut rng, n, &[background_color]);
    let arm_angles = [rng.random_range(-60.0..=60.0), rng.random_range(-60.0..=60.0)];
    let held_item = rng.random_bool(0.5);
    let item_color = distinct(&mut rng, n, &[background_color]);
    let person = PersonSpec {
        torso,
        head_color,
        pants_color,
        background_color,
        arm_angles,
        held_item,
        item_color,
        seed,
    };

    let pattern = Pattern::ALL[rng.random_range(0..4)];
    let color_a = rng.random_range(0..n);
    let color_b = distinct(&mut rng, n, &[color_a]);
    let stripe_period = if rng.random_bool(0.5) { 4 } else { 8 };
    (person, GarmentSpec { pattern, color_a, color_b, stripe_period })
}

fn distinct(rng: &mut impl Rng, n: u8, avoid: &[u8]) -> u8 {
    loop {
        let c = rng.random_range(0..n);
        if !avoid.contains(&c) {
            return c;
        }
    }
}

fn validate_person(p: &PersonSpec) -> Result<()> {
    let t = &p.torso;
    if !(t.cx - t.width / 2.0 >= 0.0
        && t.cx + t.width / 2.0 <= 1.0
        && t.cy - t.height / 2.0 >= 0.0
        && t.cy + t.height / 2.0 <= 1.0
        && t.width > 0.0
        && t.height > 0.0)
    {
        return Err(Error::Invalid("torso rectangle leaves the image".into()));
    }
    let n = PALETTE.len() as u8;
    if p.head_color >= n || p.pants_color >= n || p.background_color >= n || p.item_color >= n {
        return Err(Error::Invalid("person colour outside the palette".into()));
    }
    Ok(())
}

/// Left-hand endpoint, clamped one pixel inside the image.
fn left_hand(p: &PersonSpec, height: usize, width: usize) -> (usize, usize) {
    let (y0, _, x0, _) = p.torso.pixel_bounds(height, width);
    let (dy, dx) = arm_direction(p.arm_angles[0], -1.0);
    let len = 0.3 * width as f64;
    let ex = (x0 as f64 + dx * len).round().clamp(1.0, width as f64 - 2.0);
    let ey = (y0 as f64 + 1.0 + dy * len).round().clamp(1.0, height as f64 - 2.0);
    (ey as usize, ex as usize)
}

fn arm_direction(angle_deg: f64, side: f64) -> (f64, f64) {
    let a = angle_deg.to_radians();
    (a.sin(), side * a.cos())
}

/// Pixels of the held item (a 3×3 square at the left hand, minus the torso).
pub fn held_item_pixels(p: &PersonSpec, height: usize, width: usize) -> Vec<(usize, usize)> {
    if !p.held_item {
        return Vec::new();
    }
    let (y0, y1, x0, x1) = p.torso.pixel_bounds(height, width);
    let (hy, hx) = left_hand(p, height, width);
    let mut out = Vec::new();
    for y in hy - 1..=hy + 1 {
        for x in hx - 1..=hx + 1 {
            let in_torso = (y0..y1).contains(&y) && (x0..x1).contains(&x);
            if !in_torso {
                out.push((y, x));
            }
        }
    }
    out
}

/// Rasterises a person wearing a garment.
pub fn render(person: &PersonSpec, garment: &GarmentSpec, height: usize, width: usize) -> Result<RenderedPerson> {
    if height == 0 || width == 0 || height % PATCH != 0 || width % PATCH != 0 {
        return Err(Error::Config(format!(
            "image size {height}x{width} is not a positive multiple of the patch size {PATCH}"
        )));
    }
    validate_person(person)?;
    garment.validate()?;

    let mut image = Image::filled(height, width, palette_rgb(person.background_color));
    let (y0, y1, x0, x1) = person.torso.pixel_bounds(height, width);
    let fill = |img: &mut Image, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>, c: u8| {
        for y in ys.start.min(height)..ys.end.min(height) {
            for x in xs.start.min(width)..xs.end.min(width) {
                img.set_pixel(y, x, palette_rgb(c));
            }
        }
    };

    // Legs: two columns under the torso with a one-pixel gap.
    let mid = (x0 + x1) / 2;
    let leg_end = y1 + (0.35 * height as f64).round() as usize;
    fill(&mut image, y1..leg_end, x0 + 1..mid.saturating_sub(1).max(x0 + 1), person.pants_color);
    fill(&mut image, y1..leg_end, mid + 1..x1.saturating_sub(1), person.pants_color);

    // Head: square above the torso.
    let s = ((0.12 * height as f64).round() as usize).max(3);
    let head_top = y0.saturating_sub(s + 1);
    let head_left = ((x0 + x1) / 2).saturating_sub(s / 2);
    fill(&mut image, head_top..y0.saturating_sub(1), head_left..head_left + s, person.head_color);

    // Arms: two-pixel-thick segments from the shoulders, outward.
    let len = 0.3 * width as f64;
    for (side, &angle, sx) in [(-1.0, &person.arm_angles[0], x0 as f64), (1.0, &person.arm_angles[1], x1 as f64 - 1.0)] {
        let (dy, dx) = arm_direction(angle, side);
        let steps = (len * 2.0).ceil() as usize;
        for k in 0..=steps {
            let d = k as f64 * 0.5;
            let y = (y0 as f64 + 1.0 + dy * d).round();
            let x = (sx + dx * d).round();
            for (oy, ox) in [(0.0, 0.0), (1.0, 0.0)] {
                let (yy, xx) = (y + oy, x + ox);
                if yy >= 0.0 && xx >= 0.0 && (yy as usize) < height && (xx as usize) < width {
                    image.set_pixel(yy as usize, xx as usize, palette_rgb(person.head_color));
                }
            }
        }
    }

    for (y, x) in held_item_pixels(person, height, width) {
        image.set_pixel(y, x, palette_rgb(person.item_color));
    }

    let mut garment_mask = Mask::zeros(height, width);
    for y in y0..y1 {
        for x in x0..x1 {
            image.set_pixel(y, x, palette_rgb(garment.color_at(y, x)));
            garment_mask.set(y, x, 1.0);
        }
    }

    Ok(RenderedPerson { image, garment_mask, person_spec: *person, garment_spec: *garment })
}

/// Exact try-on: the target person re-rendered in `garment`.
pub fn composite_swap(target: &RenderedPerson, garment: &GarmentSpec) -> Result<RenderedPerson> {
    render(&target.person_spec, garment, target.image.height(), target.image.width())
}

/// One line of a synthetic dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub spec: RecordSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordSpec {
    pub person: PersonSpec,
    pub garment: GarmentSpec,
    pub height: usize,
    pub width: usize,
}

/// Line-delimited dataset manifest. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<SynthRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialise"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(r);
        }
        Ok(Self { records })
    }

    /// Loads a record back as a rendered person (image and mask from disk).
    pub fn load_person(&self, root: &Path, index: usize) -> Result<RenderedPerson> {
        let r = &self.records[index];
        Ok(RenderedPerson {
            image: Image::load(&root.join(&r.image_path))?,
            garment_mask: Mask::load(&root.join(&r.mask_path))?,
            person_spec: r.spec.person,
            garment_spec: r.spec.garment,
        })
    }
}

/// Seed of record `index` in a dataset generated from `seed`.
pub fn record_seed(seed: u64, index: usize) -> u64 {
    seeds::derive(seed, &[index as u64])
}

/// Renders `n` people into `out_dir/{images,masks}` and writes the manifest.
pub fn generate_dataset(n: usize, seed: u64, out_dir: &Path, format: FileFormat) -> Result<Manifest> {
    generate_dataset_sized(n, seed, out_dir, format, DEFAULT_HEIGHT, DEFAULT_WIDTH)
}

pub fn generate_dataset_sized(
    n: usize,
    seed: u64,
    out_dir: &Path,
    format: FileFormat,
    height: usize,
    width: usize,
) -> Result<Manifest> {
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    for dir in [out_dir, images.as_path(), masks.as_path()] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut manifest = Manifest::default();
    for i in 0..n {
        let (person, garment) = sample_specs(record_seed(seed, i));
        let rendered = render(&person, &garment, height, width)?;
        let id = format!("p{i:06}");
        let image_path = PathBuf::from("images").join(format!("{id}.{}", format.image_extension()));
        let mask_path = PathBuf::from("masks").join(format!("{id}.{}", format.mask_extension()));
        rendered.image.save(&out_dir.join(&image_path), format)?;
        rendered.garment_mask.save(&out_dir.join(&mask_path), format)?;
        manifest.records.push(SynthRecord {
            id,
            image_path,
            mask_path,
            spec: RecordSpec { person, garment, height, width },
        });
    }
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn person(seed: u64) -> RenderedPerson {
        let (p, g) = sample_specs(seed);
        render(&p, &g, DEFAULT_HEIGHT, DEFAULT_WIDTH).unwrap()
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_specs(0), sample_specs(0));
        assert_ne!(sample_specs(0), sample_specs(1));
    }

    #[test]
    fn sampled_specs_satisfy_invariants() {
        let mut patterns = std::collections::HashSet::new();
        for seed in 0..1000 {
            let (p, g) = sample_specs(seed);
            validate_person(&p).unwrap();
            g.validate().unwrap();
            patterns.insert(g.pattern);
        }
        assert!(patterns.len() >= 2);
    }

    #[test]
    fn mask_is_exactly_the_torso_rectangle() {
        for seed in 0..200 {
            let r = person(seed);
            let (y0, y1, x0, x1) = r.person_spec.torso.pixel_bounds(DEFAULT_HEIGHT, DEFAULT_WIDTH);
            for y in 0..DEFAULT_HEIGHT {
                for x in 0..DEFAULT_WIDTH {
                    let inside = (y0..y1).contains(&y) && (x0..x1).contains(&x);
                    assert_eq!(r.garment_mask.get(y, x), if inside { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn solid_red_garment_fills_mask() {
        let (p, _) = sample_specs(3);
        let g = GarmentSpec::solid(2);
        let r = render(&p, &g, DEFAULT_HEIGHT, DEFAULT_WIDTH).unwrap();
        let red = palette_rgb(2);
        for y in 0..DEFAULT_HEIGHT {
            for x in 0..DEFAULT_WIDTH {
                if r.garment_mask.get(y, x) == 1.0 {
                    assert_eq!(r.image.pixel(y, x), red);
                }
            }
        }
    }

    #[test]
    fn held_item_present_and_outside_garment() {
        let mut seen = 0;
        for seed in 0..300 {
            let (p, g) = sample_specs(seed);
            if !p.held_item {
                continue;
            }
            seen += 1;
            let r = render(&p, &g, DEFAULT_HEIGHT, DEFAULT_WIDTH).unwrap();
            let px = held_item_pixels(&p, DEFAULT_HEIGHT, DEFAULT_WIDTH);
            assert!(!px.is_empty(), "seed {seed} has no item pixels");
            for (y, x) in px {
                assert_eq!(r.garment_mask.get(y, x), 0.0);
                assert_eq!(r.image.pixel(y, x), palette_rgb(p.item_color));
            }
        }
        assert!(seen > 50);
    }

    #[test]
    fn rejects_sizes_off_the_patch_grid() {
        let (p, g) = sample_specs(0);
        assert!(matches!(render(&p, &g, 62, 48), Err(Error::Config(_))));
        assert!(matches!(render(&p, &g, 64, 0), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_equal_colours_on_patterns() {
        let (p, _) = sample_specs(0);
        let g = GarmentSpec { pattern: Pattern::Checker, color_a: 3, color_b: 3, stripe_period: 4 };
        assert!(render(&p, &g, 64, 48).is_err());
    }

    #[test]
    fn swap_identity_and_involution() {
        let m = person(10);
        let n = person(11);
        assert_eq!(composite_swap(&m, &m.garment_spec).unwrap(), m);
        let n_in_m = composite_swap(&n, &m.garment_spec).unwrap();
        assert_eq!(n_in_m.garment_mask, n.garment_mask);
        assert_eq!(composite_swap(&n_in_m, &n.garment_spec).unwrap(), n);
    }

    #[test]
    fn dataset_files_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(10, 7, a.path(), FileFormat::Png).unwrap();
        generate_dataset(10, 7, b.path(), FileFormat::Png).unwrap();
        let ma = fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let mb = fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, mb);
        let m = Manifest::read(&a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.records.len(), 10);
        let loaded = m.load_person(a.path(), 4).unwrap();
        let rerendered = render(&m.records[4].spec.person, &m.records[4].spec.garment, 64, 48).unwrap();
        assert_eq!(loaded, rerendered);
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(0, 1, dir.path(), FileFormat::Ppm).unwrap();
        assert!(m.records.is_empty());
        assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), b"");
        assert_eq!(fs::read_dir(dir.path().join("images")).unwrap().count(), 0);
    }

    #[test]
    fn malformed_manifest_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let good = Manifest {
            records: vec![SynthRecord {
                id: "a".into(),
                image_path: "i.png".into(),
                mask_path: "m.png".into(),
                spec: RecordSpec { person: sample_specs(0).0, garment: sample_specs(0).1, height: 64, width: 48 },
            }],
        };
        good.write(&path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        fs::write(&path, text).unwrap();
        match Manifest::read(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn garment_only_changes_masked_pixels(seed in 0u64..10_000, other in 0u64..10_000) {
                let (p, g) = sample_specs(seed);
                let (_, g2) = sample_specs(other);
                let a = render(&p, &g, 64, 48).unwrap();
                let b = render(&p, &g2, 64, 48).unwrap();
                for y in 0..64 {
                    for x in 0..48 {
                        if a.garment_mask.get(y, x) == 0.0 {
                            prop_assert_eq!(a.image.pixel(y, x), b.image.pixel(y, x));
                        }
                    }
                }
            }

            #[test]
            fn mask_area_fraction_in_range(seed in 0u64..100_000) {
                let (p, g) = sample_specs(seed);
                let r = render(&p, &g, 64, 48).unwrap();
                let frac = r.garment_mask.mean();
                // Each side length rounds to the nearest pixel.
                let lo = (0.25 * 48.0 - 0.5) * (0.3 * 64.0 - 0.5) / 3072.0;
                let hi = (0.45 * 48.0 + 0.5) * (0.5 * 64.0 + 0.5) / 3072.0;
                prop_assert!(frac >= lo && frac <= hi, "fraction {}", frac);
                prop_assert!(lo > 0.069 && hi < 0.234);
            }

            #[test]
            fn render_is_pure(seed in 0u64..100_000) {
                let (p, g) = sample_specs(seed);
                prop_assert_eq!(render(&p, &g, 64, 48).unwrap(), render(&p, &g, 64, 48).unwrap());
            }
        }
    }
}
