//! Attention supervision for the fit panel.
//!
//! For every layer and head, each F query row is penalised for the attention
//! mass it places on non-garment keys of the reference panel and on garment
//! keys of the target panel:
//!
//! ```text
//! loss_{layer,head} = (1/n) Σ_i [ mean_j(G[i,j] · (1 − w_ref[j])) + mean_j(P[i,j] · w_tgt[j]) ]
//! ```
//!
//! The reported loss is the arithmetic mean over all layers and heads.

use crate::dit::{AttentionRecord, FocusTarget, KeyBlock};
use crate::error::{Error, Result};
use crate::panels::{mask_to_token_weights, PanelLayout};
use crate::raster::Mask;
use crate::tensor::Real;

/// Per-token garment coverage of the reference and target panels.
#[derive(Clone, Debug, PartialEq)]
pub struct FocusWeights {
    w_ref: Vec<f64>,
    w_tgt: Vec<f64>,
}

impl FocusWeights {
    pub fn new(w_ref: Vec<f64>, w_tgt: Vec<f64>) -> Result<Self> {
        if w_ref.len() != w_tgt.len() {
            return Err(Error::Shape(format!(
                "reference weights have {} tokens, target weights {}",
                w_ref.len(),
                w_tgt.len()
            )));
        }
        if !w_ref.iter().chain(&w_tgt).all(|w| (0.0..=1.0).contains(w)) {
            return Err(Error::Invalid("token weights must lie in [0, 1]".into()));
        }
        Ok(Self { w_ref, w_tgt })
    }

    /// Weights from the reference garment mask `M_r` and the target garment mask `M_t`.
    pub fn from_masks(reference: &Mask, target: &Mask, layout: &PanelLayout) -> Result<Self> {
        Self::new(mask_to_token_weights(reference, layout)?, mask_to_token_weights(target, layout)?)
    }

    pub fn reference(&self) -> &[f64] {
        &self.w_ref
    }

    pub fn target(&self) -> &[f64] {
        &self.w_tgt
    }

    pub fn len(&self) -> usize {
        self.w_ref.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_ref.is_empty()
    }
}

fn check_widths<T: Real>(record: &AttentionRecord<T>, weights: &FocusWeights) -> Result<()> {
    let l = record.tokens_per_panel();
    if weights.len() != l {
        return Err(Error::Shape(format!("attention blocks are {l} keys wide, weights have {}", weights.len())));
    }
    Ok(())
}

pub fn focus_attention_loss<T: Real>(record: &AttentionRecord<T>, weights: &FocusWeights) -> Result<f64> {
    check_widths(record, weights)?;
    let n = record.tokens_per_panel();
    let l = weights.len() as f64;
    let mut total = 0.0;
    for layer in 0..record.layers() {
        for head in 0..record.heads() {
            let mut acc = 0.0;
            for i in 0..n {
                let g = record.block(layer, head, i, KeyBlock::Reference);
                let p = record.block(layer, head, i, KeyBlock::Target);
                let mut row = 0.0;
                for j in 0..g.len() {
                    let (a, b) = (g[j].as_f64(), p[j].as_f64());
                    if !a.is_finite() || !b.is_finite() {
                        return Err(Error::NonFinite(format!("attention at layer {layer}, head {head}")));
                    }
                    row += a * (1.0 - weights.w_ref[j]) + b * weights.w_tgt[j];
                }
                acc += row / l;
            }
            total += acc / n as f64;
        }
    }
    Ok(total / (record.layers() * record.heads()) as f64)
}

/// `∂(scale · loss)/∂A[i, k]` for any F query `i` of any layer and head.
///
/// The derivative does not depend on the query, so a single length-`L` row
/// covers the whole record: `(1 − w_ref[j]) / (n·l·layers·heads)` on reference
/// keys, `w_tgt[j] / (n·l·layers·heads)` on target keys, zero elsewhere.
pub fn focus_gradient<T: Real>(record: &AttentionRecord<T>, weights: &FocusWeights, scale: f64) -> Result<FocusTarget<T>> {
    check_widths(record, weights)?;
    let n = record.tokens_per_panel() as f64;
    let l = weights.len() as f64;
    let c = scale / (n * l * (record.layers() * record.heads()) as f64);
    let mut key_grad = vec![T::zero(); record.total_keys()];
    let g0 = record.block_range(KeyBlock::Reference).start;
    let p0 = record.block_range(KeyBlock::Target).start;
    for j in 0..weights.len() {
        key_grad[g0 + j] = T::lit(c * (1.0 - weights.w_ref[j]));
        key_grad[p0 + j] = T::lit(c * weights.w_tgt[j]);
    }
    Ok(FocusTarget { key_grad })
}

pub fn total_loss(flow_mse: f64, fa: f64, lambda_fa: f64) -> Result<f64> {
    if !(lambda_fa >= 0.0) {
        return Err(Error::Invalid(format!("lambda_fa must be non-negative, got {lambda_fa}")));
    }
    Ok(flow_mse + lambda_fa * fa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;
    use proptest::prelude::*;

    fn record_from_rows(layers: usize, heads: usize, text: usize, l: usize, row: impl Fn(usize) -> Vec<f64>) -> AttentionRecord<f64> {
        let width = text + 3 * l;
        let maps = (0..layers * heads)
            .map(|_| {
                let mut m = Mat::zeros(l, width);
                for i in 0..l {
                    m.row_mut(i).copy_from_slice(&row(i));
                }
                m
            })
            .collect();
        AttentionRecord::new(layers, heads, text, l, maps).unwrap()
    }

    fn half_weights(l: usize) -> FocusWeights {
        let w: Vec<f64> = (0..l).map(|j| if j % 2 == 0 { 1.0 } else { 0.0 }).collect();
        FocusWeights::new(w.clone(), w).unwrap()
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let rec = record_from_rows(1, 1, 2, 4, |_| vec![1.0 / 14.0; 14]);
        assert!(matches!(focus_attention_loss(&rec, &half_weights(5)), Err(Error::Shape(_))));
        assert!(FocusWeights::new(vec![0.5], vec![0.5, 0.5]).is_err());
        assert!(FocusWeights::new(vec![1.5], vec![0.5]).is_err());
    }

    #[test]
    fn non_finite_attention_is_rejected() {
        let rec = record_from_rows(1, 1, 2, 4, |i| {
            let mut r = vec![1.0 / 14.0; 14];
            if i == 3 {
                r[3] = f64::NAN;
            }
            r
        });
        assert!(matches!(focus_attention_loss(&rec, &half_weights(4)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn total_loss_combines_terms() {
        assert_eq!(total_loss(0.5, 0.2, 0.0).unwrap(), 0.5);
        assert_eq!(total_loss(0.5, 0.0, 0.1).unwrap(), 0.5);
        assert!((total_loss(0.5, 1.0 / 584.0, 0.1).unwrap() - (0.5 + 1.7123e-4)).abs() < 1e-8);
        assert!(total_loss(0.5, 0.1, -0.1).is_err());
        assert!(total_loss(0.5, 0.1, f64::NAN).is_err());
    }

    #[test]
    fn gradient_matches_difference_quotient() {
        let (layers, heads, text, l) = (2, 3, 2, 6);
        let w_ref: Vec<f64> = (0..l).map(|j| j as f64 / 5.0).collect();
        let w_tgt: Vec<f64> = (0..l).map(|j| 1.0 - j as f64 / 7.0).collect();
        let w = FocusWeights::new(w_ref, w_tgt).unwrap();
        let base = |i: usize| (0..text + 3 * l).map(|k| ((i * 7 + k * 3) % 11) as f64 / 100.0).collect::<Vec<_>>();
        let rec = record_from_rows(layers, heads, text, l, base);
        let grad = focus_gradient(&rec, &w, 1.0).unwrap();
        let f0 = focus_attention_loss(&rec, &w).unwrap();
        for k in [0, text, text + 3, text + l + 1, text + 2 * l + 2] {
            // Perturb one entry of one row of one map.
            let mut maps: Vec<Mat<f64>> = (0..layers * heads).map(|i| rec.map(i / heads, i % heads).clone()).collect();
            let h = 1e-3;
            let v = maps[4].get(2, k);
            maps[4].row_mut(2)[k] = v + h;
            let pert = AttentionRecord::new(layers, heads, text, l, maps).unwrap();
            let num = (focus_attention_loss(&pert, &w).unwrap() - f0) / h;
            assert!((num - grad.key_grad[k]).abs() < 1e-12, "key {k}: {num} vs {}", grad.key_grad[k]);
        }
    }

    proptest! {
        #[test]
        fn bounded_and_non_negative(seed in 0u64..1000, l in 1usize..10, text in 1usize..4) {
            let width = text + 3 * l;
            let rows = |i: usize| {
                let raw: Vec<f64> = (0..width).map(|k| ((seed as usize + 13 * i + 7 * k) % 17) as f64 + 0.5).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
            };
            let rec = record_from_rows(2, 2, text, l, rows);
            let w_ref: Vec<f64> = (0..l).map(|j| ((seed as usize + j) % 5) as f64 / 4.0).collect();
            let w_tgt: Vec<f64> = (0..l).map(|j| ((seed as usize * 3 + j) % 3) as f64 / 2.0).collect();
            let loss = focus_attention_loss(&rec, &FocusWeights::new(w_ref, w_tgt).unwrap()).unwrap();
            prop_assert!((0.0..=1.0).contains(&loss));
        }

        #[test]
        fn raising_forbidden_reference_attention_never_lowers_loss(j in 0usize..6, bump in 0.0f64..0.5) {
            let (text, l) = (2, 6);
            let w = FocusWeights::new(vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.0], vec![0.5; 6]).unwrap();
            let rec = record_from_rows(1, 1, text, l, |_| vec![1.0 / 20.0; 20]);
            let before = focus_attention_loss(&rec, &w).unwrap();
            let mut m = rec.map(0, 0).clone();
            m.row_mut(0)[text + j] += bump;
            let after = focus_attention_loss(&AttentionRecord::new(1, 1, text, l, vec![m]).unwrap(), &w).unwrap();
            prop_assert!(after >= before);
        }
    }
}
