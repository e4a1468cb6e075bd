//! Try-on inference and attention heatmap export.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataprep::TryOnOracle;
use crate::dit::{euler_sample, forward, patchify, patchify_mask, read_checkpoint, ModelInput, Parameters};
use crate::error::{Error, Result};
use crate::panels::{apply_mask, blank_panel, build_inpaint_mask, concat_panels, Canvas, Panel, PanelLayout};
use crate::raster::{FileFormat, Image, Mask};
use crate::seeds;
use crate::synthworld::{render, GarmentSpec, PersonSpec, RenderedPerson, TorsoRect, GRAY, PALETTE};
use crate::tensor::Mat;

fn check_input(name: &str, img: &Image, layout: &PanelLayout) -> Result<()> {
    if img.height() != layout.height || img.width() != layout.width {
        return Err(Error::Shape(format!(
            "{name} image is {}x{}, the model expects {}x{}",
            img.height(),
            img.width(),
            layout.height,
            layout.width
        )));
    }
    if !img.as_slice().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Invalid(format!("{name} image has values outside [0, 1]")));
    }
    Ok(())
}

/// The masked condition canvas `concat(reference, target, blank)`.
pub fn condition_canvas(reference: &Image, target: &Image, layout: &PanelLayout) -> Result<Canvas> {
    check_input("reference", reference, layout)?;
    check_input("target", target, layout)?;
    let canvas = concat_panels(reference, target, &blank_panel(layout))?;
    apply_mask(&canvas, &build_inpaint_mask(layout))
}

/// Samples the full canvas; the fit panel is the try-on result.
pub fn sample_canvas(params: &Parameters<f32>, reference: &Image, target: &Image, steps: usize, seed: u64) -> Result<Canvas> {
    let layout = params.config().layout;
    let cond = condition_canvas(reference, target, &layout)?;
    euler_sample(params, &cond, &build_inpaint_mask(&layout), steps, seed)
}

/// The target person wearing the reference person's garment.
pub fn try_on(params: &Parameters<f32>, reference: &Image, target: &Image, steps: usize, seed: u64) -> Result<Image> {
    Ok(sample_canvas(params, reference, target, steps, seed)?.panel(Panel::Fit))
}

pub fn try_on_checkpoint(ckpt: &Path, reference: &Image, target: &Image, steps: usize, seed: u64) -> Result<Image> {
    try_on(&read_checkpoint(ckpt)?.params, reference, target, steps, seed)
}

/// Head-wise F→G and F→P attention, averaged over F queries, on the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps {
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    /// Normalised so the largest entry is 1.
    pub to_reference: Vec<f64>,
    pub to_target: Vec<f64>,
    /// Largest over smallest entry before normalisation.
    pub reference_ratio: f64,
    pub target_ratio: f64,
}

/// Attention maps of one layer at the first sampling step (`t = 1`, seeded noise).
pub fn attention_maps(
    params: &Parameters<f32>,
    reference: &Image,
    target: &Image,
    layer: usize,
    seed: u64,
) -> Result<Vec<HeadMaps>> {
    let cfg = *params.config();
    if layer >= cfg.layers {
        return Err(Error::Invalid(format!("layer {layer} out of range (model has {})", cfg.layers)));
    }
    let layout = cfg.layout;
    let cond = patchify::<f32>(&condition_canvas(reference, target, &layout)?, &layout)?;
    let mask = patchify_mask::<f32>(&build_inpaint_mask(&layout), &layout)?;
    let z = Mat::from_vec(cond.rows(), cond.cols(), seeds::normal_vec(seed, cond.rows() * cond.cols()));
    let (_, rec) = forward(params, &ModelInput { tokens: &z, t: 1.0, cond: &cond, mask: &mask }, true)?;
    let rec = rec.expect("recorded");
    let l = layout.tokens_per_panel();
    let average = |head: usize, block| -> Vec<f64> {
        let mut acc = vec![0.0; l];
        for i in 0..l {
            for (a, &v) in acc.iter_mut().zip(rec.block(layer, head, i, block)) {
                *a += v as f64 / l as f64;
            }
        }
        acc
    };
    let normalise = |v: Vec<f64>| -> (Vec<f64>, f64) {
        let max = v.iter().copied().fold(0.0, f64::max);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let ratio = if min > 0.0 { max / min } else { f64::INFINITY };
        (v.into_iter().map(|x| if max > 0.0 { x / max } else { 0.0 }).collect(), ratio)
    };
    use crate::dit::KeyBlock;
    Ok((0..cfg.heads)
        .map(|head| {
            let (to_reference, reference_ratio) = normalise(average(head, KeyBlock::Reference));
            let (to_target, target_ratio) = normalise(average(head, KeyBlock::Target));
            HeadMaps {
                head,
                rows: layout.grid_rows(),
                cols: layout.grid_cols(),
                to_reference,
                to_target,
                reference_ratio,
                target_ratio,
            }
        })
        .collect())
}

/// Writes `layer{L}_head{H}_ref.png` and `layer{L}_head{H}_target.png` grayscale maps.
#[allow(clippy::too_many_arguments)]
pub fn attn_dump(
    params: &Parameters<f32>,
    reference: &Image,
    target: &Image,
    layer: usize,
    seed: u64,
    out_dir: &Path,
    format: FileFormat,
) -> Result<Vec<PathBuf>> {
    let maps = attention_maps(params, reference, target, layer, seed)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for m in &maps {
        for (tag, values) in [("ref", &m.to_reference), ("target", &m.to_target)] {
            let mask = Mask::from_vec(m.rows, m.cols, values.iter().map(|&v| v as f32).collect())?;
            let path = out_dir.join(format!("layer{layer}_head{}_{tag}.{}", m.head, format.mask_extension()));
            mask.save(&path, format)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Person used to display a garment when a trained model acts as the oracle.
pub fn display_person() -> PersonSpec {
    let gray = PALETTE.iter().position(|c| *c == GRAY).expect("gray in palette") as u8;
    PersonSpec {
        torso: TorsoRect { cx: 0.5, cy: 0.5, width: 0.45, height: 0.5 },
        head_color: gray,
        pants_color: gray,
        background_color: gray,
        arm_angles: [30.0, 30.0],
        held_item: false,
        item_color: gray,
        seed: 0,
    }
}

/// A trained model used as a try-on oracle: the garment is shown on a fixed
/// display person and transferred to the target with [`try_on`].
pub struct CheckpointOracle {
    pub path: PathBuf,
    pub params: Parameters<f32>,
    pub steps: usize,
    pub seed: u64,
}

impl CheckpointOracle {
    pub fn load(path: &Path, steps: usize, seed: u64) -> Result<Self> {
        Ok(Self { path: path.to_path_buf(), params: read_checkpoint(path)?.params, steps, seed })
    }
}

impl TryOnOracle for CheckpointOracle {
    fn name(&self) -> String {
        format!("checkpoint:{}", self.path.display())
    }

    fn try_on(&self, person: &RenderedPerson, garment: &GarmentSpec) -> Result<RenderedPerson> {
        let (h, w) = (person.image.height(), person.image.width());
        let reference = render(&display_person(), garment, h, w)?;
        let seed = seeds::derive(self.seed, &[person.person_spec.seed]);
        let image = try_on(&self.params, &reference.image, &person.image, self.steps, seed)?;
        Ok(RenderedPerson {
            image,
            garment_mask: person.garment_mask.clone(),
            person_spec: person.person_spec,
            garment_spec: *garment,
        })
    }
}
