//! Flat parameter storage with a named, ordered layout.
//!
//! All weights live in one contiguous buffer so the optimizer, the
//! checkpoint writer and the gradient checker can treat them uniformly.
//! Linear weights are stored `in × out` (row-major), so a layer is `x · W + b`.

use rand_distr::{Distribution, Normal, Uniform};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::{Real, View};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Indices into the entry list, resolved once per layout.
#[derive(Clone, Debug)]
pub(crate) struct Slots {
    pub patch_w: usize,
    pub patch_b: usize,
    pub panel_embed: usize,
    pub text_tokens: usize,
    pub time_w0: usize,
    pub time_b0: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub blocks: Vec<BlockSlots>,
    pub final_mod_w: usize,
    pub final_mod_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockSlots {
    pub mod_w: usize,
    pub mod_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

pub(crate) fn build_layout(cfg: &ModelConfig) -> (Vec<ParamEntry>, Slots) {
    let d = cfg.d_model;
    let mut entries: Vec<ParamEntry> = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize| {
        let offset = entries.last().map_or(0, |e| e.offset + e.len());
        entries.push(ParamEntry { name, rows, cols, offset });
        entries.len() - 1
    };
    let patch_w = push("patch_embed.weight".into(), cfg.input_channels(), d);
    let patch_b = push("patch_embed.bias".into(), 1, d);
    let panel_embed = push("panel_embed".into(), crate::panels::PANELS, d);
    let text_tokens = push("text_tokens".into(), cfg.layout.text_tokens, d);
    let time_w0 = push("time_mlp.0.weight".into(), cfg.time_dim, d);
    let time_b0 = push("time_mlp.0.bias".into(), 1, d);
    let time_w2 = push("time_mlp.2.weight".into(), d, d);
    let time_b2 = push("time_mlp.2.bias".into(), 1, d);
    let mut blocks = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let p = |s: &str| format!("blocks.{i}.{s}");
        blocks.push(BlockSlots {
            mod_w: push(p("modulation.weight"), d, 6 * d),
            mod_b: push(p("modulation.bias"), 1, 6 * d),
            qkv_w: push(p("attn.qkv.weight"), d, 3 * d),
            qkv_b: push(p("attn.qkv.bias"), 1, 3 * d),
            proj_w: push(p("attn.proj.weight"), d, d),
            proj_b: push(p("attn.proj.bias"), 1, d),
            fc1_w: push(p("mlp.fc1.weight"), d, cfg.hidden()),
            fc1_b: push(p("mlp.fc1.bias"), 1, cfg.hidden()),
            fc2_w: push(p("mlp.fc2.weight"), cfg.hidden(), d),
            fc2_b: push(p("mlp.fc2.bias"), 1, d),
        });
    }
    let final_mod_w = push("final.modulation.weight".into(), d, 2 * d);
    let final_mod_b = push("final.modulation.bias".into(), 1, 2 * d);
    let out_w = push("final.out.weight".into(), d, cfg.layout.patch_channels());
    let out_b = push("final.out.bias".into(), 1, cfg.layout.patch_channels());
    let slots = Slots {
        patch_w,
        patch_b,
        panel_embed,
        text_tokens,
        time_w0,
        time_b0,
        time_w2,
        time_b2,
        blocks,
        final_mod_w,
        final_mod_b,
        out_w,
        out_b,
    };
    (entries, slots)
}

#[derive(Clone, Debug)]
pub struct Parameters<T> {
    config: ModelConfig,
    entries: Vec<ParamEntry>,
    pub(crate) slots: Slots,
    data: Vec<T>,
}

impl<T: Real> Parameters<T> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (entries, slots) = build_layout(&config);
        let len = entries.last().map_or(0, |e| e.offset + e.len());
        Ok(Self { config, entries, slots, data: vec![T::zero(); len] })
    }

    /// Training initialisation: Xavier-uniform linears, small normal
    /// embeddings, zero biases, zero adaLN modulation (each block starts as
    /// the identity) and a zero output head.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = seeds::rng(seeds::derive(seed, &[0x1417]));
        let small = Normal::new(0.0, 0.02).expect("valid normal");
        let s = p.slots.clone();
        let mut xavier = vec![s.patch_w, s.time_w0, s.time_w2];
        for b in &s.blocks {
            xavier.extend([b.qkv_w, b.proj_w, b.fc1_w, b.fc2_w]);
        }
        for idx in xavier {
            let e = p.entries[idx].clone();
            let bound = (6.0 / (e.rows + e.cols) as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
            for v in &mut p.data[e.range()] {
                *v = T::lit(u.sample(&mut rng));
            }
        }
        for idx in [s.panel_embed, s.text_tokens] {
            let e = p.entries[idx].clone();
            for v in &mut p.data[e.range()] {
                *v = T::lit(small.sample(&mut rng));
            }
        }
        Ok(p)
    }

    /// Every entry drawn from `N(0, scale²)`; no zero blocks anywhere.
    pub fn random(config: ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = seeds::rng(seed);
        let n = Normal::new(0.0, scale).expect("valid normal");
        for v in &mut p.data {
            *v = T::lit(n.sample(&mut rng));
        }
        Ok(p)
    }

    pub fn from_data(config: ModelConfig, data: Vec<T>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if data.len() != p.data.len() {
            return Err(Error::Shape(format!(
                "parameter buffer has {} values, config needs {}",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub(crate) fn slice(&self, idx: usize) -> &[T] {
        &self.data[self.entries[idx].range()]
    }

    pub(crate) fn mat(&self, idx: usize) -> View<'_, T> {
        let e = &self.entries[idx];
        View::new(&self.data[e.range()], e.rows, e.cols)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            config: self.config,
            entries: self.entries.clone(),
            slots: self.slots.clone(),
            data: crate::tensor::cast_slice(&self.data),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous_and_named_uniquely() {
        let p = Parameters::<f32>::zeros(ModelConfig::default()).unwrap();
        let mut next = 0;
        let mut names = std::collections::HashSet::new();
        for e in p.entries() {
            assert_eq!(e.offset, next);
            next += e.len();
            assert!(names.insert(e.name.clone()));
        }
        assert_eq!(next, p.len());
        assert_eq!(p.entry("patch_embed.weight").unwrap().rows, 48 + 48 + 16);
        assert_eq!(p.entry("final.out.weight").unwrap().cols, 48);
        assert_eq!(p.entry("text_tokens").unwrap().rows, 8);
    }

    #[test]
    fn init_is_seeded_and_finite() {
        let a = Parameters::<f32>::init(ModelConfig::tiny(), 3).unwrap();
        let b = Parameters::<f32>::init(ModelConfig::tiny(), 3).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert!(a.all_finite());
        let mod_w = a.entry("blocks.0.modulation.weight").unwrap();
        assert!(a.as_slice()[mod_w.range()].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn from_data_checks_length() {
        assert!(Parameters::<f32>::from_data(ModelConfig::tiny(), vec![0.0; 3]).is_err());
    }
}
