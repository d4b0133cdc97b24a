//! File-level entry points behind the `weakreg` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::evaluate::{audit_split, evaluate, EvalReport};
use super::phantom::{synth_cases, training_corpus, PhantomSpec, SyntheticCase};
use crate::error::{Error, Result};
use crate::net::{load_checkpoint, NetworkConfig};
use crate::spatial::{
    displacement_magnitude_map, gradient_l2norm_map, jacobian_determinant_map, warp_volume,
};
use crate::train::{train, TrainConfig, TrainOutcome};
use crate::train::LabelPair;
use crate::volume::{read_ddf, read_label, read_scalar, read_volume, write_volume, AnyVolume};

pub const CORPUS_FORMAT: &str = "weakreg-corpus-1";
pub const CORPUS_MANIFEST: &str = "corpus.json";

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::file(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

/// Input of `synth`: the phantom parameters and the split sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub phantom: PhantomSpec,
    pub train_cases: usize,
    pub held_out_cases: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            phantom: PhantomSpec::default(),
            train_cases: 20,
            held_out_cases: 6,
        }
    }
}

/// Input of `train`: network and optimization settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// 32³ phantoms on a CPU.
    pub fn desk() -> Self {
        RunConfig {
            network: NetworkConfig::desk(),
            train: TrainConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFiles {
    pub moving: String,
    pub fixed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFiles {
    pub case_id: usize,
    pub moving: String,
    pub fixed: String,
    pub gland: PairFiles,
    pub landmarks: Vec<PairFiles>,
    #[serde(default)]
    pub ground_truth: Option<String>,
}

/// Lists case files relative to the manifest's directory, plus the split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    #[serde(default)]
    pub spec: Option<PhantomSpec>,
    pub cases: Vec<CaseFiles>,
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

impl CorpusManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let m: CorpusManifest = read_json(path.as_ref())?;
        if m.format != CORPUS_FORMAT {
            return Err(Error::InvalidConfig(format!("unknown corpus format `{}`", m.format)));
        }
        Ok(m)
    }

    /// Loads the listed cases in the given order.
    pub fn load(&self, base: &Path, ids: &[usize]) -> Result<Vec<SyntheticCase>> {
        ids.iter()
            .map(|&id| {
                let f = self
                    .cases
                    .iter()
                    .find(|c| c.case_id == id)
                    .ok_or_else(|| Error::InvalidConfig(format!("case {id} not in manifest")))?;
                let pair = |p: &PairFiles| -> Result<LabelPair> {
                    Ok(LabelPair {
                        moving: read_label(base.join(&p.moving))?,
                        fixed: read_label(base.join(&p.fixed))?,
                    })
                };
                Ok(SyntheticCase {
                    case_id: id,
                    moving: read_scalar(base.join(&f.moving))?,
                    fixed: read_scalar(base.join(&f.fixed))?,
                    gland: pair(&f.gland)?,
                    landmarks: f.landmarks.iter().map(pair).collect::<Result<_>>()?,
                    ground_truth: f.ground_truth.as_ref().map(|g| read_ddf(base.join(g))).transpose()?,
                })
            })
            .collect()
    }
}

fn manifest_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Writes every case under `dir/case_NNNN/` and the manifest to `dir/corpus.json`.
pub fn write_corpus(
    dir: &Path,
    spec: Option<&PhantomSpec>,
    cases: &[SyntheticCase],
    train: Vec<usize>,
    held_out: Vec<usize>,
) -> Result<PathBuf> {
    create_dir(dir)?;
    let mut files = Vec::new();
    for c in cases {
        let rel = format!("case_{:04}", c.case_id);
        create_dir(&dir.join(&rel))?;
        let name = |n: &str| format!("{rel}/{n}");
        let save_pair = |p: &LabelPair, n: &str| -> Result<PairFiles> {
            let (m, f) = (name(&format!("{n}_moving")), name(&format!("{n}_fixed")));
            write_volume(p.moving.clone(), dir.join(&m))?;
            write_volume(p.fixed.clone(), dir.join(&f))?;
            Ok(PairFiles { moving: m, fixed: f })
        };
        write_volume(c.moving.clone(), dir.join(name("moving")))?;
        write_volume(c.fixed.clone(), dir.join(name("fixed")))?;
        let gland = save_pair(&c.gland, "gland")?;
        let landmarks = c
            .landmarks
            .iter()
            .enumerate()
            .map(|(i, l)| save_pair(l, &format!("landmark{i}")))
            .collect::<Result<_>>()?;
        let ground_truth = match &c.ground_truth {
            Some(u) => {
                write_volume(u.clone(), dir.join(name("ground_truth")))?;
                Some(name("ground_truth"))
            }
            None => None,
        };
        files.push(CaseFiles {
            case_id: c.case_id,
            moving: name("moving"),
            fixed: name("fixed"),
            gland,
            landmarks,
            ground_truth,
        });
    }
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.into(),
        spec: spec.cloned(),
        cases: files,
        train,
        held_out,
    };
    let path = dir.join(CORPUS_MANIFEST);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// `synth`: generates the train and held-out cases and writes them to `out`.
/// Returns the manifest path.
pub fn synth_command(config: Option<&Path>, out: &Path) -> Result<PathBuf> {
    let cfg: SynthConfig = match config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    let n = cfg.train_cases + cfg.held_out_cases;
    let cases = synth_cases(&cfg.phantom, 0, n)?;
    write_corpus(
        out,
        Some(&cfg.phantom),
        &cases,
        (0..cfg.train_cases).collect(),
        (cfg.train_cases..n).collect(),
    )
}

/// `train`: trains on the manifest's training split (all cases if it is empty).
pub fn train_command(config: Option<&Path>, corpus: &Path, out: &Path) -> Result<TrainOutcome> {
    let cfg: RunConfig = match config {
        Some(p) => read_json(p)?,
        None => RunConfig::desk(),
    };
    let manifest = CorpusManifest::read(corpus)?;
    let ids: Vec<usize> = if manifest.train.is_empty() {
        manifest.cases.iter().map(|c| c.case_id).collect()
    } else {
        manifest.train.clone()
    };
    let cases = manifest.load(&manifest_base(corpus), &ids)?;
    create_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    train(&training_corpus(&cases)?, &cfg.network, &cfg.train, Some(out))
}

/// `register`: predicts the DDF for an image pair; optionally also writes
/// the warped moving image.
pub fn register_command(checkpoint: &Path, moving: &Path, fixed: &Path, out: &Path, warped: Option<&Path>) -> Result<()> {
    let (_, net) = load_checkpoint(checkpoint)?;
    let m = read_scalar(moving)?;
    let f = read_scalar(fixed)?;
    let ddf = net.predict(&m, &f)?;
    if let Some(w) = warped {
        write_volume(warp_volume(&m, &ddf)?, w)?;
    }
    write_volume(ddf, out)
}

/// `warp`: applies a stored DDF to a scalar volume or label.
pub fn warp_command(input: &Path, ddf: &Path, out: &Path) -> Result<()> {
    let v = match read_volume(input)? {
        AnyVolume::Scalar(v) => v,
        AnyVolume::Displacement(_) => return Err(Error::UnsupportedChannels(3)),
    };
    let u = read_ddf(ddf)?;
    write_volume(warp_volume(&v, &u)?, out)
}

/// `evaluate`: scores a checkpoint on the manifest's held-out split.
pub fn evaluate_command(checkpoint: &Path, corpus: &Path, report: &Path, maps: Option<&Path>) -> Result<EvalReport> {
    let (ck, net) = load_checkpoint(checkpoint)?;
    let manifest = CorpusManifest::read(corpus)?;
    let cases = manifest.load(&manifest_base(corpus), &manifest.held_out)?;
    audit_split(&ck.train_cases, &cases)?;
    if let Some(dir) = maps {
        create_dir(dir)?;
    }
    let mut r = evaluate(&net, &cases, maps)?;
    r.metadata.checkpoint_iteration = Some(ck.iteration);
    r.write(report)?;
    Ok(r)
}

/// Summary written by `inspect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectSummary {
    pub jacobian_min: f64,
    pub jacobian_max: f64,
    pub jacobian_std: f64,
    pub negative_jacobian: usize,
    pub max_displacement_mm: f64,
    pub mean_gradient_norm: f64,
}

/// `inspect`: writes the Jacobian-determinant, displacement-magnitude and
/// gradient-norm maps of a DDF plus `summary.json`.
pub fn inspect_command(ddf: &Path, out: &Path) -> Result<InspectSummary> {
    let u = read_ddf(ddf)?;
    create_dir(out)?;
    let j = jacobian_determinant_map(&u);
    let d = displacement_magnitude_map(&u);
    let g = gradient_l2norm_map(&u);
    let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let (jv, dv, gv) = (f(j.data()), f(d.data()), f(g.data()));
    let n = jv.len() as f64;
    let mean = jv.iter().sum::<f64>() / n;
    let summary = InspectSummary {
        jacobian_min: jv.iter().cloned().fold(f64::INFINITY, f64::min),
        jacobian_max: jv.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        jacobian_std: (jv.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt(),
        negative_jacobian: jv.iter().filter(|&&x| x <= 0.0).count(),
        max_displacement_mm: dv.iter().cloned().fold(0.0, f64::max),
        mean_gradient_norm: gv.iter().sum::<f64>() / n,
    };
    write_volume(j, out.join("jacobian"))?;
    write_volume(d, out.join("magnitude"))?;
    write_volume(g, out.join("gradient_norm"))?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
