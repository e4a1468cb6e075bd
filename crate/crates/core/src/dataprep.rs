//! Pseudo-triplet construction.
//!
//! Two people `m` and `n`, each wearing their own garment (`P_mm`, `P_nn`),
//! are turned into four training triplets by letting a try-on oracle swap
//! their garments (`P_mn` is person `m` wearing garment `n`).

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ssim;
use crate::raster::{FileFormat, Image, Mask};
use crate::synthworld::{composite_swap, GarmentSpec, Manifest, PersonSpec, RenderedPerson};

/// Any function that dresses a person in a garment.
pub trait TryOnOracle {
    fn name(&self) -> String;
    fn try_on(&self, person: &RenderedPerson, garment: &GarmentSpec) -> Result<RenderedPerson>;
}

/// The exact synthworld garment swap.
#[derive(Clone, Copy, Debug, Default)]
pub struct Compositor;

impl TryOnOracle for Compositor {
    fn name(&self) -> String {
        "compositor".into()
    }

    fn try_on(&self, person: &RenderedPerson, garment: &GarmentSpec) -> Result<RenderedPerson> {
        composite_swap(person, garment)
    }
}

/// Which of the four constructions a triplet came from, named `ref_target_gt`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    NnMmMn,
    MmNnNm,
    NmMnMm,
    MnNmNn,
}

impl Slot {
    pub const ORDER: [Slot; 4] = [Slot::NnMmMn, Slot::MmNnNm, Slot::NmMnMm, Slot::MnNmNn];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    /// Wears the garment to transfer.
    pub reference: RenderedPerson,
    pub target: RenderedPerson,
    /// The target person wearing the reference garment.
    pub ground_truth: RenderedPerson,
    pub pair: (String, String),
    pub slot: Slot,
}

/// The four triplets of one pair, in the order
/// `(P_nn, P_mm, P_mn)`, `(P_mm, P_nn, P_nm)`, `(P_nm, P_mn, P_mm)`, `(P_mn, P_nm, P_nn)`.
pub fn build_triplets(
    (m_id, p_mm): (&str, &RenderedPerson),
    (n_id, p_nn): (&str, &RenderedPerson),
    oracle: &dyn TryOnOracle,
) -> Result<Vec<Triplet>> {
    let fail = |e: Error| Error::Oracle { m: m_id.to_string(), n: n_id.to_string(), message: e.to_string() };
    let p_mn = oracle.try_on(p_mm, &p_nn.garment_spec).map_err(fail)?;
    let p_nm = oracle.try_on(p_nn, &p_mm.garment_spec).map_err(fail)?;
    let pair = (m_id.to_string(), n_id.to_string());
    let make = |r: &RenderedPerson, t: &RenderedPerson, g: &RenderedPerson, slot| Triplet {
        reference: r.clone(),
        target: t.clone(),
        ground_truth: g.clone(),
        pair: pair.clone(),
        slot,
    };
    Ok(vec![
        make(p_nn, p_mm, &p_mn, Slot::NnMmMn),
        make(p_mm, p_nn, &p_nm, Slot::MmNnNm),
        make(&p_nm, &p_mn, p_mm, Slot::NmMnMm),
        make(&p_mn, &p_nm, p_nn, Slot::MnNmNn),
    ])
}

/// Triplet acceptance rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilterSpec {
    None,
    /// Dress the ground truth back in the target's garment and require
    /// `SSIM(result, target) >= threshold`.
    Cycle(f64),
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec::None
    }
}

impl FromStr for FilterSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(FilterSpec::None);
        }
        if s == "cycle" {
            return Ok(FilterSpec::Cycle(0.9));
        }
        if let Some(t) = s.strip_prefix("cycle:") {
            let v: f64 = t.parse().map_err(|_| Error::Invalid(format!("bad cycle threshold {t:?}")))?;
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("cycle threshold {v} outside [-1, 1]")));
            }
            return Ok(FilterSpec::Cycle(v));
        }
        Err(Error::Invalid(format!("unknown filter {s:?} (expected none or cycle:THRESH)")))
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterSpec::None => write!(f, "none"),
            FilterSpec::Cycle(t) => write!(f, "cycle:{t}"),
        }
    }
}

/// Cycle-consistency score of one triplet.
pub fn cycle_score(t: &Triplet, oracle: &dyn TryOnOracle) -> Result<f64> {
    let back = oracle.try_on(&t.ground_truth, &t.target.garment_spec)?;
    ssim(&back.image, &t.target.image)
}

/// Splits triplets into `(kept, rejected)` by `keep`.
pub fn filter_triplets(
    triplets: Vec<Triplet>,
    mut keep: impl FnMut(&Triplet) -> Result<bool>,
) -> Result<(Vec<Triplet>, Vec<Triplet>)> {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for t in triplets {
        if keep(&t)? {
            kept.push(t);
        } else {
            rejected.push(t);
        }
    }
    Ok((kept, rejected))
}

pub fn apply_filter(
    triplets: Vec<Triplet>,
    filter: FilterSpec,
    oracle: &dyn TryOnOracle,
) -> Result<(Vec<Triplet>, Vec<Triplet>)> {
    match filter {
        FilterSpec::None => filter_triplets(triplets, |_| Ok(true)),
        FilterSpec::Cycle(th) => filter_triplets(triplets, |t| Ok(cycle_score(t, oracle)? >= th)),
    }
}

/// One person image on disk, with the specs that generated it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonEntry {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub person: PersonSpec,
    pub garment: GarmentSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub pair: (String, String),
    pub slot: Slot,
    pub reference: PersonEntry,
    pub target: PersonEntry,
    pub ground_truth: PersonEntry,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub total: usize,
    pub kept: usize,
    pub rejected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub oracle: String,
    pub seed: u64,
    pub filter: String,
    pub stats: FilterStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

/// Line-delimited triplet manifest: one header line, then one line per triplet.
/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletManifest {
    pub header: ManifestHeader,
    pub records: Vec<TripletRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header(ManifestHeader),
    Triplet(TripletRecord),
}

pub const TRIPLETS_FILE: &str = "triplets.jsonl";

impl TripletManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = serde_json::to_string(&Line::Header(self.header.clone())).expect("header serialises");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&Line::Triplet(r.clone())).expect("record serialises"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Parses the manifest without touching the referenced files.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let mut header = None;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Line>(line).map_err(|e| parse_err(i + 1, e.to_string()))? {
                Line::Header(h) if header.is_none() && records.is_empty() => header = Some(h),
                Line::Header(_) => return Err(parse_err(i + 1, "header must be the first and only header line".into())),
                Line::Triplet(_) if header.is_none() => return Err(parse_err(i + 1, "triplet before header".into())),
                Line::Triplet(r) => records.push(r),
            }
        }
        let header = header.ok_or_else(|| parse_err(1, "missing header line".into()))?;
        if header.stats.kept != records.len() || header.stats.kept + header.stats.rejected != header.stats.total {
            return Err(parse_err(1, format!(
                "header counts (total {}, kept {}, rejected {}) disagree with {} records",
                header.stats.total,
                header.stats.kept,
                header.stats.rejected,
                records.len()
            )));
        }
        Ok(Self { header, records })
    }

    /// Every referenced file that does not exist under `root`.
    pub fn missing_files(&self, root: &Path) -> Vec<PathBuf> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            for e in [&r.reference, &r.target, &r.ground_truth] {
                for p in [&e.image_path, &e.mask_path] {
                    let full = root.join(p);
                    if !full.is_file() {
                        seen.insert(full);
                    }
                }
            }
        }
        seen.into_iter().collect()
    }

    /// Reads the manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let m = Self::read(path)?;
        let missing = m.missing_files(&manifest_root(path));
        if !missing.is_empty() {
            return Err(Error::MissingFiles { missing });
        }
        Ok(m)
    }

    pub fn load_triplet(&self, root: &Path, index: usize) -> Result<Triplet> {
        let r = &self.records[index];
        let person = |e: &PersonEntry| -> Result<RenderedPerson> {
            Ok(RenderedPerson {
                image: Image::load(&root.join(&e.image_path))?,
                garment_mask: Mask::load(&root.join(&e.mask_path))?,
                person_spec: e.person,
                garment_spec: e.garment,
            })
        };
        Ok(Triplet {
            reference: person(&r.reference)?,
            target: person(&r.target)?,
            ground_truth: person(&r.ground_truth)?,
            pair: r.pair.clone(),
            slot: r.slot,
        })
    }
}

/// Directory that manifest paths are relative to.
pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

#[derive(Clone, Debug)]
pub struct DataprepOptions {
    pub filter: FilterSpec,
    pub format: FileFormat,
    pub seed: u64,
    pub provenance: Option<serde_json::Value>,
}

impl Default for DataprepOptions {
    fn default() -> Self {
        Self { filter: FilterSpec::None, format: FileFormat::Png, seed: 0, provenance: None }
    }
}

/// Builds triplets from consecutive records `(2k, 2k + 1)` of a synthworld
/// manifest, filters them and writes images, masks and `triplets.jsonl` to `out_dir`.
pub fn prepare_dataset(
    synth_manifest: &Path,
    oracle: &dyn TryOnOracle,
    opts: &DataprepOptions,
    out_dir: &Path,
) -> Result<TripletManifest> {
    let source = Manifest::read(synth_manifest)?;
    let root = manifest_root(synth_manifest);
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    for dir in [out_dir, images.as_path(), masks.as_path()] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut stats = FilterStats::default();
    let mut records = Vec::new();
    let mut written = BTreeSet::new();
    let fmt = opts.format;
    // A person image is identified by whose body it is and whose garment it wears.
    let mut store = |body: &str, garment: &str, p: &RenderedPerson| -> Result<PersonEntry> {
        let stem = format!("{body}_{garment}");
        let image_path = PathBuf::from("images").join(format!("{stem}.{}", fmt.image_extension()));
        let mask_path = PathBuf::from("masks").join(format!("{stem}.{}", fmt.mask_extension()));
        if written.insert(stem) {
            p.image.save(&out_dir.join(&image_path), fmt)?;
            p.garment_mask.save(&out_dir.join(&mask_path), fmt)?;
        }
        Ok(PersonEntry { image_path, mask_path, person: p.person_spec, garment: p.garment_spec })
    };
    for k in 0..source.records.len() / 2 {
        let (m_id, n_id) = (source.records[2 * k].id.clone(), source.records[2 * k + 1].id.clone());
        let p_mm = source.load_person(&root, 2 * k)?;
        let p_nn = source.load_person(&root, 2 * k + 1)?;
        let triplets = build_triplets((&m_id, &p_mm), (&n_id, &p_nn), oracle)?;
        stats.total += triplets.len();
        let (kept, rejected) = apply_filter(triplets, opts.filter, oracle)?;
        stats.kept += kept.len();
        stats.rejected += rejected.len();
        for t in kept {
            let (ref_body, tgt_body) = match t.slot {
                Slot::NnMmMn | Slot::NmMnMm => (&n_id, &m_id),
                Slot::MmNnNm | Slot::MnNmNn => (&m_id, &n_id),
            };
            let (ref_garment, tgt_garment) = match t.slot {
                Slot::NnMmMn => (&n_id, &m_id),
                Slot::MmNnNm => (&m_id, &n_id),
                Slot::NmMnMm => (&m_id, &n_id),
                Slot::MnNmNn => (&n_id, &m_id),
            };
            records.push(TripletRecord {
                reference: store(ref_body, ref_garment, &t.reference)?,
                target: store(tgt_body, tgt_garment, &t.target)?,
                ground_truth: store(tgt_body, ref_garment, &t.ground_truth)?,
                pair: t.pair,
                slot: t.slot,
            });
        }
    }
    let manifest = TripletManifest {
        header: ManifestHeader {
            oracle: oracle.name(),
            seed: opts.seed,
            filter: opts.filter.to_string(),
            stats,
            provenance: opts.provenance.clone(),
        },
        records,
    };
    manifest.write(&out_dir.join(TRIPLETS_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{render, sample_specs, DEFAULT_HEIGHT, DEFAULT_WIDTH};

    fn person(seed: u64) -> RenderedPerson {
        let (p, g) = sample_specs(seed);
        render(&p, &g, DEFAULT_HEIGHT, DEFAULT_WIDTH).unwrap()
    }

    struct Failing;

    impl TryOnOracle for Failing {
        fn name(&self) -> String {
            "failing".into()
        }

        fn try_on(&self, _: &RenderedPerson, _: &GarmentSpec) -> Result<RenderedPerson> {
            Err(Error::Invalid("no".into()))
        }
    }

    #[test]
    fn four_triplets_in_order() {
        let (m, n) = (person(1), person(2));
        let t = build_triplets(("a", &m), ("b", &n), &Compositor).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.iter().map(|t| t.slot).collect::<Vec<_>>(), Slot::ORDER);
        assert_eq!(t[0].reference, n);
        assert_eq!(t[0].target, m);
        assert_eq!(t[2].ground_truth, m);
        assert_eq!(t[3].ground_truth, n);
        for tr in &t {
            assert_eq!(tr.ground_truth.person_spec, tr.target.person_spec);
            assert_eq!(tr.ground_truth.garment_spec, tr.reference.garment_spec);
        }
    }

    #[test]
    fn degenerate_pair_gives_identical_triplets() {
        let m = person(5);
        for t in build_triplets(("a", &m), ("a", &m), &Compositor).unwrap() {
            assert_eq!((&t.reference, &t.target, &t.ground_truth), (&m, &m, &m));
        }
    }

    #[test]
    fn oracle_failure_names_the_pair() {
        let err = build_triplets(("p1", &person(1)), ("p2", &person(2)), &Failing).unwrap_err();
        assert!(matches!(&err, Error::Oracle { m, n, .. } if m == "p1" && n == "p2"));
    }

    #[test]
    fn filters_partition() {
        let t = build_triplets(("a", &person(1)), ("b", &person(2)), &Compositor).unwrap();
        let (k, r) = filter_triplets(t.clone(), |_| Ok(true)).unwrap();
        assert_eq!((k.len(), r.len()), (4, 0));
        let (k, r) = filter_triplets(t.clone(), |_| Ok(false)).unwrap();
        assert_eq!((k.len(), r.len()), (0, 4));
        let (k, _) = apply_filter(t, FilterSpec::Cycle(0.9), &Compositor).unwrap();
        assert_eq!(k.len(), 4);
    }

    #[test]
    fn filter_spec_parses() {
        assert_eq!("none".parse::<FilterSpec>().unwrap(), FilterSpec::None);
        assert_eq!("cycle:0.75".parse::<FilterSpec>().unwrap(), FilterSpec::Cycle(0.75));
        assert!("cycle:x".parse::<FilterSpec>().is_err());
        assert!("sharp".parse::<FilterSpec>().is_err());
    }
}
