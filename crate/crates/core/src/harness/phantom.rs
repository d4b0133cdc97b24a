use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::bending_energy;
use crate::spatial::{affine_to_ddf, jacobian_determinant_map, random_affine, AugmentConfig};
use crate::train::{CorpusEntry, LabelPair, TrainingCorpus};
use crate::volume::{DisplacementField, GridMeta, LabelMask, Volume};

/// Gland ellipsoid: semi-axes in mm, each jittered by up to `axis_jitter`
/// (relative), centre jittered by up to `center_jitter_mm` per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlandSpec {
    pub semi_axes_mm: [f64; 3],
    pub axis_jitter: f64,
    pub center_jitter_mm: f64,
}

impl Default for GlandSpec {
    fn default() -> Self {
        GlandSpec {
            semi_axes_mm: [10.0, 8.5, 9.0],
            axis_jitter: 0.1,
            center_jitter_mm: 1.0,
        }
    }
}

/// Spherical landmark blobs placed inside the gland.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkSpec {
    /// Inclusive range of blobs per case.
    pub count: [usize; 2],
    pub radius_mm: [f64; 2],
}

impl Default for LandmarkSpec {
    fn default() -> Self {
        LandmarkSpec {
            count: [2, 6],
            radius_mm: [1.5, 2.5],
        }
    }
}

/// Ground-truth deformation: a random affine plus a low-frequency sinusoid
/// per component, both multiplied by `magnitude`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformationSpec {
    pub magnitude: f64,
    pub affine: AugmentConfig,
    pub sine_amplitude_mm: f64,
    pub sine_wavelength_mm: f64,
    /// Upper bound on the bending energy of an accepted field.
    pub max_bending: f64,
}

impl Default for DeformationSpec {
    fn default() -> Self {
        DeformationSpec {
            magnitude: 1.0,
            affine: AugmentConfig {
                rotation_deg: 8.0,
                log_scale: 0.08,
                shear: 0.04,
                translation_frac: 0.06,
            },
            sine_amplitude_mm: 1.5,
            sine_wavelength_mm: 32.0,
            max_bending: 0.01,
        }
    }
}

/// How one side is turned into intensities. Tissue values are in `[0, 1]`
/// before `gamma` (a monotone remap) is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    pub background: f64,
    pub gland: f64,
    pub landmark: f64,
    pub gamma: f64,
    /// Standard deviation of multiplicative `(1 + n)` noise.
    pub speckle: f64,
    /// Standard deviation of additive noise.
    pub noise: f64,
    /// Edge width of the tissue boundaries, mm.
    pub edge_mm: f64,
}

impl RenderSpec {
    pub fn fixed_default() -> Self {
        RenderSpec {
            background: 0.15,
            gland: 0.5,
            landmark: 0.95,
            gamma: 1.0,
            speckle: 0.0,
            noise: 0.05,
            edge_mm: 0.5,
        }
    }

    pub fn moving_default() -> Self {
        RenderSpec {
            background: 0.1,
            gland: 0.45,
            landmark: 1.0,
            gamma: 2.0,
            speckle: 0.15,
            noise: 0.0,
            edge_mm: 0.5,
        }
    }
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self::fixed_default()
    }
}

/// Parameters of the synthetic prostate-like phantom suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub gland: GlandSpec,
    pub landmarks: LandmarkSpec,
    pub deformation: DeformationSpec,
    pub moving: RenderSpec,
    pub fixed: RenderSpec,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32; 3],
            spacing_mm: [1.0; 3],
            gland: GlandSpec::default(),
            landmarks: LandmarkSpec::default(),
            deformation: DeformationSpec::default(),
            moving: RenderSpec::moving_default(),
            fixed: RenderSpec::fixed_default(),
            seed: 2018,
        }
    }
}

/// Attempts at shrinking the deformation before giving up on a case.
pub const MAX_ATTEMPTS: usize = 10;
const SHRINK: f64 = 0.7;

impl PhantomSpec {
    pub fn meta(&self) -> Result<GridMeta> {
        GridMeta::new(self.dims, self.spacing_mm)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta()?;
        let l = &self.landmarks;
        if l.count[0] == 0 || l.count[0] > l.count[1] {
            return Err(Error::InvalidConfig("landmark count range must be 1 ≤ min ≤ max".into()));
        }
        if !(l.radius_mm[0] > 0.0 && l.radius_mm[0] <= l.radius_mm[1]) {
            return Err(Error::InvalidConfig("landmark radius range must be 0 < min ≤ max".into()));
        }
        if self.gland.semi_axes_mm.iter().any(|&a| a <= 0.0) {
            return Err(Error::InvalidConfig("gland semi-axes must be positive".into()));
        }
        let d = &self.deformation;
        if !(d.magnitude >= 0.0 && d.sine_amplitude_mm >= 0.0 && d.sine_wavelength_mm > 0.0) {
            return Err(Error::InvalidConfig("deformation parameters must be non-negative".into()));
        }
        d.affine.validate()?;
        for r in [&self.moving, &self.fixed] {
            if !(r.gamma > 0.0 && r.speckle >= 0.0 && r.noise >= 0.0 && r.edge_mm > 0.0) {
                return Err(Error::InvalidConfig("render parameters out of range".into()));
            }
        }
        Ok(())
    }
}

/// Analytic anatomy in moving-image space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    pub gland_center: [f64; 3],
    pub gland_axes: [f64; 3],
    /// `(centre, radius)` per landmark.
    pub blobs: Vec<([f64; 3], f64)>,
}

impl Anatomy {
    /// Approximate signed distance to the gland surface (negative inside).
    fn gland_sd(&self, p: [f64; 3]) -> f64 {
        let rho = (0..3)
            .map(|a| ((p[a] - self.gland_center[a]) / self.gland_axes[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let min_axis = self.gland_axes.iter().cloned().fold(f64::INFINITY, f64::min);
        (rho - 1.0) * min_axis
    }

    fn blob_sd(&self, i: usize, p: [f64; 3]) -> f64 {
        let (c, r) = self.blobs[i];
        dist(p, c) - r
    }

    pub fn in_gland(&self, p: [f64; 3]) -> bool {
        self.gland_sd(p) <= 0.0
    }

    pub fn in_blob(&self, i: usize, p: [f64; 3]) -> bool {
        self.blob_sd(i, p) <= 0.0
    }

    /// Tissue value at `p` with smooth edges, before noise and remapping.
    fn tissue(&self, p: [f64; 3], r: &RenderSpec) -> f64 {
        let s = |sd: f64| 1.0 / (1.0 + (sd / r.edge_mm).exp());
        let mut v = r.background + (r.gland - r.background) * s(self.gland_sd(p));
        for i in 0..self.blobs.len() {
            v += (r.landmark - r.gland) * s(self.blob_sd(i, p));
        }
        v.clamp(0.0, 1.0)
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// One generated case. The ground-truth field lives on the fixed grid and
/// maps fixed positions into the moving image, like a predicted DDF.
#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub case_id: usize,
    pub moving: Volume,
    pub fixed: Volume,
    pub gland: LabelPair,
    pub landmarks: Vec<LabelPair>,
    pub ground_truth: Option<DisplacementField>,
}

impl SyntheticCase {
    /// Gland first, then the landmarks.
    pub fn label_pairs(&self) -> Vec<LabelPair> {
        std::iter::once(self.gland.clone()).chain(self.landmarks.iter().cloned()).collect()
    }

    pub fn corpus_entry(&self) -> CorpusEntry {
        CorpusEntry {
            case_id: self.case_id,
            moving: self.moving.clone(),
            fixed: self.fixed.clone(),
            labels: self.label_pairs(),
        }
    }
}

pub fn training_corpus(cases: &[SyntheticCase]) -> Result<TrainingCorpus> {
    TrainingCorpus::new(cases.iter().map(SyntheticCase::corpus_entry).collect())
}

fn draw_anatomy(spec: &PhantomSpec, meta: &GridMeta, rng: &mut ChaCha8Rng) -> Result<Anatomy> {
    let g = &spec.gland;
    let c = meta.center();
    let gland_center = [0, 1, 2].map(|a| c[a] + g.center_jitter_mm * rng.gen_range(-1.0..=1.0));
    let gland_axes = g.semi_axes_mm.map(|a| a * (1.0 + g.axis_jitter * rng.gen_range(-1.0..=1.0)));
    let mut anatomy = Anatomy {
        gland_center,
        gland_axes,
        blobs: Vec::new(),
    };
    let l = &spec.landmarks;
    let count = rng.gen_range(l.count[0]..=l.count[1]);
    let min_axis = gland_axes.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut tries = 0;
    while anatomy.blobs.len() < count {
        tries += 1;
        if tries > 10_000 {
            return Err(Error::Phantom(format!(
                "could not place {count} landmarks inside the gland"
            )));
        }
        let r = rng.gen_range(l.radius_mm[0]..=l.radius_mm[1]);
        let p = [0, 1, 2].map(|a| gland_center[a] + gland_axes[a] * rng.gen_range(-1.0..=1.0));
        // Whole blob inside the gland with a margin, apart from the others.
        if anatomy.gland_sd(p) > -(r + 0.15 * min_axis) {
            continue;
        }
        if anatomy.blobs.iter().any(|&(q, s)| dist(p, q) < r + s + 1.0) {
            continue;
        }
        anatomy.blobs.push((p, r));
    }
    Ok(anatomy)
}

fn draw_field(spec: &DeformationSpec, meta: &GridMeta, scale: f64, rng: &mut ChaCha8Rng) -> DisplacementField {
    let m = spec.magnitude * scale;
    let affine = random_affine(meta, rng, &spec.affine.clone().scaled(m));
    let base = affine_to_ddf::<f32>(&affine, meta);
    let waves: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            let mut k = [0; 3].map(|_| rng.gen_range(-1.0..=1.0f64));
            let n = k.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            k.iter_mut().for_each(|v| *v /= n);
            let amp = m * spec.sine_amplitude_mm * rng.gen_range(0.5..=1.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (k, amp, phase)
        })
        .collect();
    let omega = std::f64::consts::TAU / spec.sine_wavelength_mm;
    let sine = DisplacementField::<f32>::from_fn(*meta, |p| {
        [0, 1, 2].map(|c| {
            let (k, amp, phase) = waves[c];
            amp * (omega * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2]) + phase).sin()
        })
    });
    let data = base.data().iter().zip(sine.data()).map(|(a, b)| a + b).collect();
    DisplacementField::new(*meta, data).expect("same grid")
}

fn render(anatomy: &Anatomy, meta: &GridMeta, r: &RenderSpec, at: impl Fn(usize) -> [f64; 3], rng: &mut ChaCha8Rng) -> Volume {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..meta.len())
        .map(|i| {
            let mut v = anatomy.tissue(at(i), r).powf(r.gamma);
            if r.speckle > 0.0 {
                v *= 1.0 + r.speckle * normal.sample(rng);
            }
            if r.noise > 0.0 {
                v += r.noise * normal.sample(rng);
            }
            v as f32
        })
        .collect();
    Volume::new(*meta, data).expect("grid-sized")
}

/// Generates case `case_id` of the suite. Each case has its own random
/// stream, so a case is the same whatever else is generated.
pub fn synth_case(spec: &PhantomSpec, case_id: usize) -> Result<SyntheticCase> {
    spec.validate()?;
    let meta = spec.meta()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(case_id as u64);
    let anatomy = draw_anatomy(spec, &meta, &mut rng)?;

    let mut scale = 1.0;
    let mut accepted = None;
    for attempt in 0..MAX_ATTEMPTS {
        let u = draw_field(&spec.deformation, &meta, scale, &mut rng);
        let min_det = jacobian_determinant_map(&u)
            .data()
            .iter()
            .fold(f32::INFINITY, |a, &b| a.min(b));
        let bending = bending_energy(&u).value;
        if min_det > 0.0 && bending <= spec.deformation.max_bending {
            accepted = Some(u);
            break;
        }
        log::debug!("case {case_id} attempt {attempt}: min det {min_det}, bending {bending}; shrinking");
        scale *= SHRINK;
    }
    let u = accepted.ok_or_else(|| {
        Error::Phantom(format!(
            "case {case_id}: no admissible deformation after {MAX_ATTEMPTS} attempts"
        ))
    })?;

    let warped_pos = |i: usize| {
        let p = meta.position(i);
        let d = u.vector(i);
        [p[0] + d[0] as f64, p[1] + d[1] as f64, p[2] + d[2] as f64]
    };
    let moving = render(&anatomy, &meta, &spec.moving, |i| meta.position(i), &mut rng);
    let fixed = render(&anatomy, &meta, &spec.fixed, warped_pos, &mut rng);

    let label = |inside: &dyn Fn([f64; 3]) -> bool, at: &dyn Fn(usize) -> [f64; 3]| {
        let data = (0..meta.len()).map(|i| if inside(at(i)) { 1.0f32 } else { 0.0 }).collect();
        LabelMask::new(meta, data).expect("binary")
    };
    let pair = |inside: &dyn Fn([f64; 3]) -> bool| LabelPair {
        moving: label(inside, &|i| meta.position(i)),
        fixed: label(inside, &warped_pos),
    };
    let gland = pair(&|p| anatomy.in_gland(p));
    let landmarks = (0..anatomy.blobs.len()).map(|b| pair(&|p| anatomy.in_blob(b, p))).collect();
    Ok(SyntheticCase {
        case_id,
        moving,
        fixed,
        gland,
        landmarks,
        ground_truth: Some(u),
    })
}

/// Cases `first..first + n`.
pub fn synth_cases(spec: &PhantomSpec, first: usize, n: usize) -> Result<Vec<SyntheticCase>> {
    use rayon::prelude::*;
    (first..first + n).into_par_iter().map(|i| synth_case(spec, i)).collect()
}

/// Cases `0..n_cases`.
pub fn synth_corpus(spec: &PhantomSpec, n_cases: usize) -> Result<Vec<SyntheticCase>> {
    synth_cases(spec, 0, n_cases)
}

/// The anatomy drawn for a case, for inspection.
pub fn case_anatomy(spec: &PhantomSpec, case_id: usize) -> Result<Anatomy> {
    let meta = spec.meta()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(case_id as u64);
    draw_anatomy(spec, &meta, &mut rng)
}
