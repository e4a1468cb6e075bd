use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use mftryon::dataprep::{prepare_dataset, Compositor, DataprepOptions, FilterSpec, TryOnOracle};
use mftryon::dit::{read_checkpoint, ModelConfig};
use mftryon::infer::{attn_dump, sample_canvas, CheckpointOracle};
use mftryon::metrics::{evaluate_dirs, EvalOptions, Metric};
use mftryon::panels::Panel;
use mftryon::raster::{FileFormat, Image};
use mftryon::synthworld::{generate_dataset_sized, DEFAULT_HEIGHT, DEFAULT_WIDTH, MANIFEST_FILE};
use mftryon::train::{gradcheck, train_loop, TrainConfig};

use crate::config::{out_root, provenance, resolve, write_json, ConfigFile};
use crate::{AttnCommand, Cli, Command, Numerical, SynthCommand, Usage, Validation};

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| Usage(format!("missing required --{flag} (flag or config file)")).into())
}

fn parse_format(s: &str) -> Result<FileFormat> {
    s.parse().map_err(|e: mftryon::Error| Validation(e.to_string()).into())
}

fn announce(command: &str, resolved: &impl Serialize) {
    eprintln!("mftryon {command}: resolved config {}", serde_json::to_string(resolved).expect("settings serialise"));
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config_file {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Synth(SynthCommand::Gen(args)) => synth_gen(resolve(file.section("synth"), &args)?),
        Command::Dataprep(args) => dataprep(resolve(file.section("dataprep"), &args)?),
        Command::Train(args) => train(resolve(file.section("train"), &args)?),
        Command::Infer(args) => infer(resolve(file.section("infer"), &args)?),
        Command::Eval(args) => {
            let mut flags = serde_json::to_value(&args)?;
            if let Some(p) = args.paired_flag() {
                flags["paired"] = p.into();
            }
            eval(resolve(file.section("eval"), &flags)?)
        }
        Command::Attn(AttnCommand::Dump(args)) => attn(resolve(file.section("attn"), &args)?),
        Command::Gradcheck(args) => grad(resolve(file.section("gradcheck"), &args)?),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SynthSettings {
    n: usize,
    seed: u64,
    out: Option<PathBuf>,
    format: String,
    height: usize,
    width: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self { n: 100, seed: 0, out: None, format: "png".into(), height: DEFAULT_HEIGHT, width: DEFAULT_WIDTH }
    }
}

fn synth_gen(mut s: SynthSettings) -> Result<()> {
    let out = s.out.get_or_insert_with(|| out_root().join("synth")).clone();
    announce("synth gen", &s);
    if s.n == 0 {
        return Err(Validation("--n must be positive".into()).into());
    }
    let format = parse_format(&s.format)?;
    let manifest = generate_dataset_sized(s.n, s.seed, &out, format, s.height, s.width)?;
    write_json(&out.join("provenance.json"), &provenance("synth gen", &s))?;
    println!("wrote {} people to {}", manifest.records.len(), out.join(MANIFEST_FILE).display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct DataprepSettings {
    manifest: Option<PathBuf>,
    oracle: String,
    oracle_steps: usize,
    filter: String,
    seed: u64,
    format: String,
    out: Option<PathBuf>,
}

impl Default for DataprepSettings {
    fn default() -> Self {
        Self {
            manifest: None,
            oracle: "compositor".into(),
            oracle_steps: 30,
            filter: "none".into(),
            seed: 0,
            format: "png".into(),
            out: None,
        }
    }
}

fn dataprep(mut s: DataprepSettings) -> Result<()> {
    let out = s.out.get_or_insert_with(|| out_root().join("dataprep")).clone();
    announce("dataprep", &s);
    let manifest = required(&s.manifest, "manifest")?;
    let filter: FilterSpec = s.filter.parse().map_err(|e: mftryon::Error| Validation(e.to_string()))?;
    let oracle: Box<dyn TryOnOracle> = match s.oracle.as_str() {
        "compositor" => Box::new(Compositor),
        other => match other.strip_prefix("checkpoint:") {
            Some(path) if !path.is_empty() => Box::new(CheckpointOracle::load(Path::new(path), s.oracle_steps, s.seed)?),
            _ => return Err(Validation(format!("unknown oracle `{other}`, expected compositor or checkpoint:PATH")).into()),
        },
    };
    let opts = DataprepOptions {
        filter,
        format: parse_format(&s.format)?,
        seed: s.seed,
        provenance: Some(provenance("dataprep", &s)),
    };
    let result = prepare_dataset(manifest, oracle.as_ref(), &opts, &out)?;
    let stats = result.header.stats;
    println!(
        "kept {} of {} triplets ({} rejected), manifest {}",
        stats.kept,
        stats.total,
        stats.rejected,
        out.join(mftryon::dataprep::TRIPLETS_FILE).display()
    );
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainSettings {
    triplets: Option<PathBuf>,
    ckpt_dir: Option<PathBuf>,
    resume: Option<PathBuf>,
    #[serde(flatten)]
    config: TrainConfig,
}

fn train(mut s: TrainSettings) -> Result<()> {
    let dir = s.ckpt_dir.get_or_insert_with(|| out_root().join("train")).clone();
    announce("train", &s);
    let triplets = required(&s.triplets, "triplets")?;
    s.config.validate()?;
    write_json(&dir.join("provenance.json"), &provenance("train", &s))?;
    let outcome = train_loop(triplets, &s.config, &dir, s.resume.as_deref())?;
    if let Some(last) = outcome.log.last() {
        println!(
            "step {}: flow_mse {:.6} fa_loss {:.6} total {:.6}",
            last.step + 1,
            last.flow_mse,
            last.fa_loss,
            last.total
        );
    }
    println!("final checkpoint {}", outcome.final_checkpoint.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct InferSettings {
    ckpt: Option<PathBuf>,
    reference: Option<PathBuf>,
    target: Option<PathBuf>,
    steps: usize,
    seed: u64,
    out: Option<PathBuf>,
    save_canvas: bool,
}

impl Default for InferSettings {
    fn default() -> Self {
        Self { ckpt: None, reference: None, target: None, steps: 30, seed: 0, out: None, save_canvas: false }
    }
}

fn format_of(path: &Path) -> Result<FileFormat> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => parse_format(&ext.to_ascii_lowercase()),
        None => Err(Validation(format!("{}: output needs a .png or .ppm extension", path.display())).into()),
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.provenance.json"))
}

fn infer(mut s: InferSettings) -> Result<()> {
    let out = s.out.get_or_insert_with(|| out_root().join("infer").join("fit.png")).clone();
    announce("infer", &s);
    let format = format_of(&out)?;
    let ckpt = read_checkpoint(required(&s.ckpt, "ckpt")?)?;
    let reference = Image::load(required(&s.reference, "ref")?)?;
    let target = Image::load(required(&s.target, "target")?)?;
    let canvas = sample_canvas(&ckpt.params, &reference, &target, s.steps, s.seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    canvas.panel(Panel::Fit).save(&out, format)?;
    if s.save_canvas {
        let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        canvas.image().save(&out.with_file_name(format!("{stem}_canvas.{}", format.image_extension())), format)?;
    }
    write_json(&sidecar(&out), &provenance("infer", &s))?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct EvalSettings {
    pred: Option<PathBuf>,
    gt: Option<PathBuf>,
    metrics: String,
    paired: bool,
    kid_subset_size: usize,
    kid_subsets: usize,
    seed: u64,
    out: Option<PathBuf>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let d = EvalOptions::default();
        Self {
            pred: None,
            gt: None,
            metrics: "ssim,fid,kid".into(),
            paired: d.paired,
            kid_subset_size: d.kid_subset_size,
            kid_subsets: d.kid_subsets,
            seed: d.seed,
            out: None,
        }
    }
}

fn eval(mut s: EvalSettings) -> Result<()> {
    let out = s.out.get_or_insert_with(|| out_root().join("eval")).clone();
    announce("eval", &s);
    let metrics = s
        .metrics
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(|m| m.parse::<Metric>().map_err(|e| Validation(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    if metrics.is_empty() {
        return Err(Validation("--metrics is empty".into()).into());
    }
    let opts = EvalOptions {
        metrics,
        paired: s.paired,
        kid_subset_size: s.kid_subset_size,
        kid_subsets: s.kid_subsets,
        seed: s.seed,
    };
    let report = evaluate_dirs(required(&s.pred, "pred")?, required(&s.gt, "gt")?, &opts)?;
    report.write(&out, Some(&provenance("eval", &s)))?;
    print!("{}", report.summary);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct AttnSettings {
    ckpt: Option<PathBuf>,
    reference: Option<PathBuf>,
    target: Option<PathBuf>,
    layer: usize,
    seed: u64,
    format: String,
    out: Option<PathBuf>,
}

impl Default for AttnSettings {
    fn default() -> Self {
        Self { ckpt: None, reference: None, target: None, layer: 0, seed: 0, format: "png".into(), out: None }
    }
}

fn attn(mut s: AttnSettings) -> Result<()> {
    let out = s.out.get_or_insert_with(|| out_root().join("attn")).clone();
    announce("attn dump", &s);
    let format = parse_format(&s.format)?;
    let ckpt = read_checkpoint(required(&s.ckpt, "ckpt")?)?;
    let reference = Image::load(required(&s.reference, "ref")?)?;
    let target = Image::load(required(&s.target, "target")?)?;
    let written = attn_dump(&ckpt.params, &reference, &target, s.layer, s.seed, &out, format)?;
    write_json(&out.join("provenance.json"), &provenance("attn dump", &s))?;
    println!("wrote {} maps to {}", written.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct GradcheckSettings {
    config: String,
    samples: usize,
    lambda_fa: f64,
    h: f64,
    tolerance: f64,
    seed: u64,
    out: Option<PathBuf>,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self { config: "tiny".into(), samples: 50, lambda_fa: 0.1, h: 1e-4, tolerance: 1e-3, seed: 0, out: None }
    }
}

fn grad(s: GradcheckSettings) -> Result<()> {
    announce("gradcheck", &s);
    let model = match s.config.as_str() {
        "tiny" => ModelConfig::tiny(),
        "default" => ModelConfig::default(),
        other => return Err(Validation(format!("unknown model preset `{other}`, expected tiny or default")).into()),
    };
    let report = gradcheck(model, s.samples, s.lambda_fa, s.h, s.seed)?;
    let pass = report.max_rel_error <= s.tolerance;
    if let Some(out) = &s.out {
        let mut value = serde_json::to_value(&report)?;
        value["pass"] = pass.into();
        value["provenance"] = provenance("gradcheck", &s);
        write_json(out, &value)?;
    }
    println!(
        "{}",
        serde_json::json!({ "samples": report.entries.len(), "max_rel_error": report.max_rel_error, "tolerance": s.tolerance, "pass": pass })
    );
    if !pass {
        return Err(Numerical(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error, s.tolerance
        ))
        .into());
    }
    Ok(())
}
