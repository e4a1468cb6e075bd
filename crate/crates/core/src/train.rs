//! Full-parameter training on pseudo-triplets with flow-matching MSE plus
//! the focus attention loss, and a finite-difference gradient check.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataprep::{manifest_root, Triplet, TripletManifest};
use crate::dit::{
    backward, forward, forward_train, patchify, patchify_mask, read_checkpoint, write_checkpoint, Checkpoint,
    FlowSample, ModelConfig, ModelInput, OptimizerMoments, Parameters,
};
use crate::error::{Error, Result};
use crate::focus_loss::{focus_attention_loss, focus_gradient, total_loss, FocusWeights};
use crate::panels::{apply_mask, blank_panel, build_inpaint_mask, concat_panels, PanelLayout};
use crate::seeds;
use crate::tensor::{Mat, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_fa: f64,
    pub seed: u64,
    /// Write `step_NNNNNN.ckpt` every this many steps; 0 writes only the final checkpoint.
    pub checkpoint_interval: usize,
    /// Restrict the flow loss to the fit panel instead of the whole canvas.
    pub fit_panel_only: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 16,
            lr: 1e-4,
            lambda_fa: 0.1,
            seed: 0,
            checkpoint_interval: 1000,
            fit_panel_only: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lambda_fa >= 0.0 && self.lambda_fa.is_finite()) {
            return Err(Error::Config(format!("lambda_fa must be non-negative, got {}", self.lambda_fa)));
        }
        self.model.validate()
    }
}

/// Adam with β = (0.9, 0.999), ε = 1e-8 and no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.t += 1;
        let (b1, b2) = (Self::BETA1, Self::BETA2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let m = b1 * self.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * self.v[i] as f64 + (1.0 - b2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let step = lr * (m / c1) / ((v / c2).sqrt() + Self::EPS);
            params[i] = (params[i] as f64 - step) as f32;
        }
    }
}

/// One triplet as model-ready tokens.
#[derive(Clone, Debug)]
pub struct Example<T> {
    /// `concat(reference, target, ground truth)`.
    pub x: Mat<T>,
    /// `concat(reference, target, blank)`.
    pub cond: Mat<T>,
    pub weights: FocusWeights,
}

impl<T: Real> Example<T> {
    /// The target's garment mask only reaches the loss weights, never the model input.
    pub fn from_triplet(t: &Triplet, layout: &PanelLayout) -> Result<Self> {
        let full = concat_panels(&t.reference.image, &t.target.image, &t.ground_truth.image)?;
        let cond = apply_mask(&full, &build_inpaint_mask(layout))?;
        debug_assert_eq!(
            cond,
            concat_panels(&t.reference.image, &t.target.image, &blank_panel(layout))?
        );
        Ok(Self {
            x: patchify(&full, layout)?,
            cond: patchify(&cond, layout)?,
            weights: FocusWeights::from_masks(&t.reference.garment_mask, &t.target.garment_mask, layout)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub flow_mse: f64,
    pub fa_loss: f64,
    pub total: f64,
}

/// Loss and parameter gradient for one example at time `t` with the given noise.
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub flow_mse: f64,
    pub fa_loss: f64,
}

/// Mean squared flow error of one example plus `λ · L_FA`, accumulating
/// `scale · ∂/∂θ` into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss_and_grad<T: Real>(
    params: &Parameters<T>,
    ex: &Example<T>,
    mask_tokens: &Mat<T>,
    noise: Mat<T>,
    t: T,
    lambda_fa: f64,
    fit_panel_only: bool,
    scale: f64,
    grads: Option<&mut [T]>,
) -> Result<SampleLoss> {
    let layout = params.config().layout;
    let flow = FlowSample::from_parts(ex.x.clone(), noise, t)?;
    let input = ModelInput { tokens: &flow.z_t, t, cond: &ex.cond, mask: mask_tokens };
    let rows = if fit_panel_only {
        let l = layout.tokens_per_panel();
        2 * l..3 * l
    } else {
        0..layout.image_tokens()
    };
    let count = (rows.len() * ex.x.cols()) as f64;
    let residual = |v: &Mat<T>| -> (f64, Mat<T>) {
        let mut dv = Mat::zeros(v.rows(), v.cols());
        let mut sq = 0.0;
        for r in rows.clone() {
            for c in 0..v.cols() {
                let d = v.get(r, c).as_f64() - flow.u.get(r, c).as_f64();
                sq += d * d;
                dv.row_mut(r)[c] = T::lit(scale * 2.0 * d / count);
            }
        }
        (sq / count, dv)
    };
    match grads {
        Some(g) => {
            let (v, tape) = forward_train(params, &input)?;
            let (flow_mse, dv) = residual(&v);
            let fa_loss = focus_attention_loss(tape.record(), &ex.weights)?;
            let focus = (lambda_fa > 0.0)
                .then(|| focus_gradient(tape.record(), &ex.weights, scale * lambda_fa))
                .transpose()?;
            backward(params, &tape, &dv, focus.as_ref(), g)?;
            Ok(SampleLoss { flow_mse, fa_loss })
        }
        None => {
            let (v, rec) = forward(params, &input, true)?;
            let (flow_mse, _) = residual(&v);
            let fa_loss = focus_attention_loss(&rec.expect("recorded"), &ex.weights)?;
            Ok(SampleLoss { flow_mse, fa_loss })
        }
    }
}

/// Seed of the noise for sample `index` of step `step`.
pub fn noise_seed(seed: u64, step: u64, index: usize) -> u64 {
    seeds::derive(seed, &[1, step, index as u64])
}

/// Example indices of step `step`: without replacement when the dataset is
/// large enough, otherwise with replacement.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut rng = seeds::rng(seeds::derive(seed, &[0, step]));
    if batch <= n {
        sample(&mut rng, n, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..n)).collect()
    }
}

/// In-memory training state.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: Parameters<f32>,
    pub adam: Adam,
    examples: Vec<Example<f32>>,
    mask_tokens: Mat<f32>,
}

impl Trainer {
    pub fn new(config: TrainConfig, examples: Vec<Example<f32>>) -> Result<Self> {
        let params = Parameters::init(config.model, config.seed)?;
        Self::resume(config, examples, params, None)
    }

    /// Continues from existing parameters and optimizer state.
    pub fn resume(
        config: TrainConfig,
        examples: Vec<Example<f32>>,
        params: Parameters<f32>,
        adam: Option<Adam>,
    ) -> Result<Self> {
        config.validate()?;
        if *params.config() != config.model {
            return Err(Error::Config("checkpoint model config differs from the training config".into()));
        }
        if examples.is_empty() {
            return Err(Error::Invalid("training needs at least one triplet".into()));
        }
        let layout = config.model.layout;
        let mask_tokens = patchify_mask(&build_inpaint_mask(&layout), &layout)?;
        let adam = adam.unwrap_or_else(|| Adam::new(params.len()));
        if adam.m.len() != params.len() || adam.v.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match the parameters".into()));
        }
        Ok(Self { config, params, adam, examples, mask_tokens })
    }

    /// Optimizer steps taken so far.
    pub fn step_index(&self) -> u64 {
        self.adam.t
    }

    /// One optimizer update; the step index is the number of updates already applied.
    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.adam.t;
        let cfg = &self.config;
        let idx = batch_indices(cfg.seed, step, cfg.batch, self.examples.len());
        let scale = 1.0 / idx.len() as f64;
        let shape = (self.examples[0].x.rows(), self.examples[0].x.cols());
        let (params, examples, mask_tokens) = (&self.params, &self.examples, &self.mask_tokens);
        let per_sample = idx
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let ns = noise_seed(cfg.seed, step, k);
                let t: f32 = seeds::rng(ns ^ 0x7157).random();
                let noise = Mat::from_vec(shape.0, shape.1, seeds::normal_vec(ns, shape.0 * shape.1));
                let mut g = vec![0f32; params.len()];
                let s = sample_loss_and_grad(
                    params,
                    &examples[i],
                    mask_tokens,
                    noise,
                    t,
                    cfg.lambda_fa,
                    cfg.fit_panel_only,
                    scale,
                    Some(&mut g),
                )
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
                    other => other,
                })?;
                Ok((s, g))
            })
            .collect::<Result<Vec<_>>>()?;
        // Summed in batch order so the result does not depend on the thread count.
        let mut grads = vec![0f32; self.params.len()];
        let (mut flow, mut fa) = (0.0, 0.0);
        for (s, g) in per_sample {
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += b;
            }
            flow += s.flow_mse * scale;
            fa += s.fa_loss * scale;
        }
        let total = total_loss(flow, fa, cfg.lambda_fa)?;
        if !total.is_finite() || !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite(format!("step {step}: loss or gradient")));
        }
        self.adam.update(self.params.as_mut_slice(), &grads, cfg.lr);
        if !self.params.all_finite() {
            return Err(Error::NonFinite(format!("step {step}: parameters after update")));
        }
        Ok(StepStats { step, flow_mse: flow, fa_loss: fa, total })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            seed: self.config.seed,
            step: self.adam.t,
            params: self.params.clone(),
            moments: Some(OptimizerMoments { m: self.adam.m.clone(), v: self.adam.v.clone() }),
        }
    }
}

pub fn load_examples(manifest: &TripletManifest, root: &Path, layout: &PanelLayout) -> Result<Vec<Example<f32>>> {
    (0..manifest.records.len())
        .map(|i| Example::from_triplet(&manifest.load_triplet(root, i)?, layout))
        .collect()
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub log: Vec<StepStats>,
}

/// Trains on a triplet manifest until `config.steps` updates have been
/// applied, writing periodic checkpoints, `final.ckpt` and `metrics.jsonl`
/// to `ckpt_dir`. With `resume`, training continues from that checkpoint
/// and the metrics log is appended to.
pub fn train_loop(
    manifest_path: &Path,
    config: &TrainConfig,
    ckpt_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest = TripletManifest::load(manifest_path)?;
    let examples = load_examples(&manifest, &manifest_root(manifest_path), &config.model.layout)?;
    let mut trainer = match resume {
        None => Trainer::new(config.clone(), examples)?,
        Some(path) => {
            let ck = read_checkpoint(path)?;
            let adam = ck.moments.map(|m| Adam { m: m.m, v: m.v, t: ck.step });
            let adam = adam.or_else(|| (ck.step == 0).then(|| Adam::new(ck.params.len())));
            let adam = adam.ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                message: "no optimizer state to resume from".into(),
            })?;
            Trainer::resume(config.clone(), examples, ck.params, Some(adam))?
        }
    };
    fs::create_dir_all(ckpt_dir).map_err(|e| Error::io(ckpt_dir, e))?;
    let log_path = ckpt_dir.join(METRICS_FILE);
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    while (trainer.step_index() as usize) < config.steps {
        let stats = trainer.step()?;
        writeln!(log_file, "{}", serde_json::to_string(&stats).expect("stats serialise"))
            .map_err(|e| Error::io(&log_path, e))?;
        log.push(stats);
        let done = trainer.step_index() as usize;
        if config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 && done < config.steps {
            let path = ckpt_dir.join(format!("step_{done:06}.ckpt"));
            write_checkpoint(&path, &trainer.checkpoint())?;
            checkpoints.push(path);
        }
    }
    let final_checkpoint = ckpt_dir.join(FINAL_CHECKPOINT);
    write_checkpoint(&final_checkpoint, &trainer.checkpoint())?;
    checkpoints.push(final_checkpoint.clone());
    Ok(TrainOutcome { final_checkpoint, checkpoints, log })
}

/// Reads a `metrics.jsonl` training log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepStats>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_error: f64,
}

/// Denominator floor for the relative error, so entries whose true
/// gradient is at round-off level are judged by absolute error.
pub const GRADCHECK_FLOOR: f64 = 1e-7;

/// Compares the analytic gradient of `flow MSE + λ·L_FA` with central
/// differences of step `h` on `samples` randomly chosen parameters, in f64.
pub fn gradcheck(config: ModelConfig, samples: usize, lambda_fa: f64, h: f64, seed: u64) -> Result<GradcheckReport> {
    let layout = config.layout;
    let mut params = Parameters::<f64>::random(config, seeds::derive(seed, &[0]), 0.3)?;
    let ex = gradcheck_example::<f64>(&layout, seed)?;
    let mask = patchify_mask::<f64>(&build_inpaint_mask(&layout), &layout)?;
    let noise = Mat::from_vec(ex.x.rows(), ex.x.cols(), seeds::normal_vec(seeds::derive(seed, &[1]), ex.x.rows() * ex.x.cols()));
    let t = 0.63;
    let loss = |p: &Parameters<f64>| -> Result<f64> {
        let s = sample_loss_and_grad(p, &ex, &mask, noise.clone(), t, lambda_fa, false, 1.0, None)?;
        total_loss(s.flow_mse, s.fa_loss, lambda_fa)
    };
    let mut grads = vec![0.0; params.len()];
    sample_loss_and_grad(&params, &ex, &mask, noise.clone(), t, lambda_fa, false, 1.0, Some(&mut grads))?;
    let picks = sample(&mut seeds::rng(seeds::derive(seed, &[2])), params.len(), samples.min(params.len()));
    let mut entries = Vec::new();
    for index in picks.iter() {
        let orig = params.as_slice()[index];
        params.as_mut_slice()[index] = orig + h;
        let up = loss(&params)?;
        params.as_mut_slice()[index] = orig - h;
        let down = loss(&params)?;
        params.as_mut_slice()[index] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[index];
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        let name = params.entries().iter().find(|e| e.range().contains(&index)).map(|e| e.name.clone()).unwrap_or_default();
        entries.push(GradcheckEntry { name, index, analytic, numeric, rel_error });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport { entries, max_rel_error })
}

/// A synthworld triplet rendered at the layout's panel size.
fn gradcheck_example<T: Real>(layout: &PanelLayout, seed: u64) -> Result<Example<T>> {
    use crate::dataprep::{build_triplets, Compositor};
    use crate::synthworld::{render, sample_specs};
    let person = |k: u64| -> Result<_> {
        let (p, g) = sample_specs(seeds::derive(seed, &[3, k]));
        render(&p, &g, layout.height, layout.width)
    };
    let (m, n) = (person(0)?, person(1)?);
    let triplets = build_triplets(("m", &m), ("n", &n), &Compositor)?;
    Example::from_triplet(&triplets[0], layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(3);
        let mut p = vec![1.0f32, -1.0, 0.5];
        adam.update(&mut p, &[0.2, -3.0, 0.0], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] - -0.99).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn batch_indices_are_seeded() {
        assert_eq!(batch_indices(1, 5, 4, 10), batch_indices(1, 5, 4, 10));
        assert_ne!(batch_indices(1, 5, 4, 10), batch_indices(1, 6, 4, 10));
        let idx = batch_indices(1, 0, 10, 10);
        let mut sorted = idx.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(2, 0, 7, 3).len(), 7);
    }

    #[test]
    fn step_does_not_depend_on_thread_count() {
        let layout = ModelConfig::tiny().layout;
        let examples: Vec<Example<f32>> = (0..3).map(|s| gradcheck_example(&layout, s).unwrap()).collect();
        let cfg = TrainConfig { batch: 5, lr: 1e-2, model: ModelConfig::tiny(), ..TrainConfig::default() };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let mut tr = Trainer::new(cfg.clone(), examples.clone()).unwrap();
            let stats: Vec<_> = (0..2).map(|_| pool.install(|| tr.step()).unwrap()).collect();
            (stats, tr.params.as_slice().to_vec())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda_fa: -0.1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn gradient_check_on_tiny_model() {
        let r = gradcheck(ModelConfig::tiny(), 50, 0.1, 1e-4, 11).unwrap();
        assert_eq!(r.entries.len(), 50);
        assert!(r.max_rel_error <= 1e-3, "{:#?}", r.entries.iter().filter(|e| e.rel_error > 1e-3).collect::<Vec<_>>());
    }

    #[test]
    fn gradient_check_focus_term_alone() {
        // A large focus weight must still check out and must change the gradient.
        let cfg = ModelConfig::tiny();
        let a = gradcheck(cfg, 40, 0.0, 1e-4, 3).unwrap();
        let b = gradcheck(cfg, 40, 50.0, 1e-4, 3).unwrap();
        assert!(a.max_rel_error <= 1e-3);
        assert!(b.max_rel_error <= 1e-3);
        assert!(a.entries.iter().zip(&b.entries).any(|(x, y)| (x.analytic - y.analytic).abs() > 1e-6));
    }
}
