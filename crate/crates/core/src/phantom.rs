//! Synthetic multimodal brain-like phantoms.
//!
//! A phantom is a set of nested random ellipsoids labeling tissue classes,
//! sliced transaxially. Each modality renders the class map through its own
//! contrast profile with a smooth low-frequency texture on top, so PET and
//! the two MRI contrasts share geometry but not intensities.
//!
//! Ellipse orientation uses the rational (Weierstrass) parametrization of
//! the unit circle so that rasterization only needs `+ - * /`, which keeps
//! tissue maps bit-identical across platforms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::rng::Rng;
use crate::tensor::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TissueClass {
    Background,
    White,
    Gray,
    Csf,
    HotLesion,
    ColdLesion,
}

impl TissueClass {
    pub const ALL: [TissueClass; 6] = [
        TissueClass::Background,
        TissueClass::White,
        TissueClass::Gray,
        TissueClass::Csf,
        TissueClass::HotLesion,
        TissueClass::ColdLesion,
    ];

    /// Numeric label stored in tissue maps.
    pub fn label(self) -> f64 {
        self as u8 as f64
    }

    pub fn from_label(v: f64) -> Option<TissueClass> {
        Self::ALL.iter().copied().find(|c| c.label() == v)
    }

    pub fn is_lesion(self) -> bool {
        matches!(self, TissueClass::HotLesion | TissueClass::ColdLesion)
    }
}

/// Per-class intensities: PET activity and the two MRI contrasts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub pet: f64,
    pub t1: f64,
    pub t2: f64,
}

pub fn default_contrast_profile() -> BTreeMap<TissueClass, Contrast> {
    use TissueClass::*;
    let c = |pet, t1, t2| Contrast { pet, t1, t2 };
    BTreeMap::from([
        (Background, c(0.0, 0.0, 0.0)),
        (White, c(0.3, 0.8, 0.45)),
        (Gray, c(0.8, 0.55, 0.65)),
        (Csf, c(0.05, 0.15, 0.95)),
        (HotLesion, c(1.0, 0.5, 0.75)),
        (ColdLesion, c(0.12, 0.35, 0.85)),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub size: usize,
    pub voxel_size: f64,
    pub num_slices: usize,
    pub num_ellipses: usize,
    pub seed: u64,
    pub contrast_profile: BTreeMap<TissueClass, Contrast>,
    pub lesion_probability: f64,
    /// Relative amplitude of the smooth intra-class texture.
    pub texture_amplitude: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 128,
            voxel_size: 2.0,
            num_slices: 1,
            num_ellipses: 6,
            seed: 0,
            contrast_profile: default_contrast_profile(),
            lesion_probability: 0.5,
            texture_amplitude: 0.05,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.size < 8 {
            errs.push(format!("phantom.size must be >= 8, got {}", self.size));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            errs.push("phantom.voxel_size must be > 0".into());
        }
        if self.num_slices == 0 {
            errs.push("phantom.num_slices must be >= 1".into());
        }
        if self.num_ellipses == 0 {
            errs.push("phantom.num_ellipses must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            errs.push("phantom.lesion_probability must be in [0, 1]".into());
        }
        if !(0.0..0.5).contains(&self.texture_amplitude) {
            errs.push("phantom.texture_amplitude must be in [0, 0.5)".into());
        }
        for class in TissueClass::ALL {
            match self.contrast_profile.get(&class) {
                None => errs.push(format!("phantom.contrast_profile is missing {class:?}")),
                Some(c) => {
                    if !(c.pet >= 0.0 && c.pet.is_finite()) {
                        errs.push(format!("PET activity for {class:?} must be >= 0"));
                    }
                    if !((0.0..=1.0).contains(&c.t1) && (0.0..=1.0).contains(&c.t2)) {
                        errs.push(format!("MRI intensities for {class:?} must be in [0, 1]"));
                    }
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// One rendered slice.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSlice {
    pub pet: Image,
    pub t1: Image,
    pub t2: Image,
    pub tissue: Image,
}

#[derive(Clone, Debug)]
struct Ellipsoid {
    cx: f64,
    cy: f64,
    cz: f64,
    a: f64,
    b: f64,
    c: f64,
    cos: f64,
    sin: f64,
    class: TissueClass,
}

impl Ellipsoid {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let (dx, dy, dz) = (x - self.cx, y - self.cy, z - self.cz);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a) * (u / self.a) + (v / self.b) * (v / self.b) + (dz / self.c) * (dz / self.c) <= 1.0
    }
}

/// Rotation as (cos, sin) from t ∈ [-1, 1] without trigonometric calls.
fn rational_rotation(t: f64) -> (f64, f64) {
    let d = 1.0 + t * t;
    ((1.0 - t * t) / d, 2.0 * t / d)
}

#[derive(Clone, Debug)]
struct CosineMode {
    kx: f64,
    ky: f64,
    kz: f64,
    phase: f64,
}

/// Sum of four low-order cosine modes, normalized to [-1, 1].
#[derive(Clone, Debug)]
struct Texture {
    modes: Vec<CosineMode>,
}

impl Texture {
    fn random(rng: &mut Rng) -> Self {
        let modes = (0..4)
            .map(|_| CosineMode {
                kx: rng.range(-1.5, 1.5),
                ky: rng.range(-1.5, 1.5),
                kz: rng.range(-0.5, 0.5),
                phase: rng.range(0.0, std::f64::consts::TAU),
            })
            .collect();
        Texture { modes }
    }

    /// Coordinates are normalized to the FOV radius.
    fn eval(&self, x: f64, y: f64, z: f64) -> f64 {
        let s: f64 = self
            .modes
            .iter()
            .map(|m| (std::f64::consts::PI * (m.kx * x + m.ky * y + m.kz * z) + m.phase).cos())
            .sum();
        s / self.modes.len() as f64
    }
}

/// A sampled phantom: its geometry plus textures for each modality.
#[derive(Clone, Debug)]
pub struct Phantom {
    spec: PhantomSpec,
    ellipsoids: Vec<Ellipsoid>,
    textures: [Texture; 3],
}

impl Phantom {
    pub fn new(spec: &PhantomSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(spec.seed);
        let mut ellipsoids = Vec::new();
        // Coordinates in units of the FOV radius; z spans [-1, 1] over the slab.
        let scale = rng.range(0.9, 1.05);
        let (rot_c, rot_s) = rational_rotation(rng.range(-0.1, 0.1));
        let head = Ellipsoid {
            cx: rng.range(-0.03, 0.03),
            cy: rng.range(-0.03, 0.03),
            cz: 0.0,
            a: 0.72 * scale,
            b: 0.86 * scale,
            c: 2.2,
            cos: rot_c,
            sin: rot_s,
            class: TissueClass::Gray,
        };
        let white = Ellipsoid {
            a: head.a * 0.8,
            b: head.b * 0.82,
            class: TissueClass::White,
            ..head.clone()
        };
        ellipsoids.push(head.clone());
        ellipsoids.push(white.clone());
        for i in 0..spec.num_ellipses {
            let class = if i < 2 { TissueClass::Csf } else { TissueClass::Gray };
            let (cos, sin) = rational_rotation(rng.range(-1.0, 1.0));
            let (a, b) = if class == TissueClass::Csf {
                (rng.range(0.05, 0.1), rng.range(0.15, 0.3))
            } else {
                (rng.range(0.06, 0.16), rng.range(0.06, 0.16))
            };
            let side = if i % 2 == 0 { -1.0 } else { 1.0 };
            let (cx, cy) = if class == TissueClass::Csf {
                (head.cx + side * rng.range(0.08, 0.18), head.cy + rng.range(-0.15, 0.1))
            } else {
                // Uniform inside 70% of the white-matter ellipse.
                let r = 0.7 * rng.uniform().sqrt();
                let (tc, ts) = rational_rotation(rng.range(-1.0, 1.0));
                let (qc, qs) = if rng.bernoulli(0.5) { (tc, ts) } else { (-tc, -ts) };
                (head.cx + r * white.a * qc, head.cy + r * white.b * qs)
            };
            ellipsoids.push(Ellipsoid {
                cx,
                cy,
                cz: rng.range(-0.3, 0.3),
                a,
                b,
                c: rng.range(0.8, 2.0),
                cos,
                sin,
                class,
            });
        }
        for _ in 0..2 {
            let present = rng.bernoulli(spec.lesion_probability);
            let hot = rng.bernoulli(0.5);
            let r = 0.75 * rng.uniform().sqrt();
            let (tc, ts) = rational_rotation(rng.range(-1.0, 1.0));
            let (qc, qs) = if rng.bernoulli(0.5) { (tc, ts) } else { (-tc, -ts) };
            let radius = rng.range(0.04, 0.09);
            if present {
                ellipsoids.push(Ellipsoid {
                    cx: head.cx + r * head.a * qc,
                    cy: head.cy + r * head.b * qs,
                    cz: rng.range(-0.2, 0.2),
                    a: radius,
                    b: radius * rng.range(0.8, 1.25),
                    c: rng.range(0.5, 1.2),
                    cos: 1.0,
                    sin: 0.0,
                    class: if hot { TissueClass::HotLesion } else { TissueClass::ColdLesion },
                });
            }
        }
        let textures = [Texture::random(&mut rng), Texture::random(&mut rng), Texture::random(&mut rng)];
        Ok(Phantom {
            spec: spec.clone(),
            ellipsoids,
            textures,
        })
    }

    pub fn spec(&self) -> &PhantomSpec {
        &self.spec
    }

    /// Normalized axial position of slice `k` in [-1, 1].
    fn slice_z(&self, k: usize) -> f64 {
        let n = self.spec.num_slices;
        if n == 1 {
            0.0
        } else {
            -1.0 + 2.0 * k as f64 / (n - 1) as f64
        }
    }

    fn class_at(&self, x: f64, y: f64, z: f64) -> TissueClass {
        // Later ellipsoids paint over earlier ones.
        self.ellipsoids
            .iter()
            .rev()
            .find(|e| e.contains(x, y, z))
            .map(|e| e.class)
            .unwrap_or(TissueClass::Background)
    }

    pub fn render_slice(&self, k: usize) -> Result<PhantomSlice> {
        if k >= self.spec.num_slices {
            return Err(domain(format!("slice {k} out of range ({} slices)", self.spec.num_slices)));
        }
        let n = self.spec.size;
        let vs = self.spec.voxel_size;
        let z = self.slice_z(k);
        let half = n as f64 / 2.0;
        let amp = self.spec.texture_amplitude;
        let mut pet = vec![0.0; n * n];
        let mut t1 = vec![0.0; n * n];
        let mut t2 = vec![0.0; n * n];
        let mut tissue = vec![0.0; n * n];
        for row in 0..n {
            for col in 0..n {
                let x = (col as f64 + 0.5 - half) / half;
                let y = (half - row as f64 - 0.5) / half;
                let i = row * n + col;
                if x * x + y * y > 1.0 {
                    continue;
                }
                let class = self.class_at(x, y, z);
                tissue[i] = class.label();
                if class == TissueClass::Background {
                    continue;
                }
                let c = self.spec.contrast_profile[&class];
                pet[i] = (c.pet * (1.0 + amp * self.textures[0].eval(x, y, z))).max(0.0);
                t1[i] = (c.t1 * (1.0 + amp * self.textures[1].eval(x, y, z))).clamp(0.0, 1.0);
                t2[i] = (c.t2 * (1.0 + amp * self.textures[2].eval(x, y, z))).clamp(0.0, 1.0);
            }
        }
        Ok(PhantomSlice {
            pet: Image::from_vec(n, n, vs, pet)?,
            t1: Image::from_vec(n, n, vs, t1)?,
            t2: Image::from_vec(n, n, vs, t2)?,
            tissue: Image::from_vec(n, n, vs, tissue)?,
        })
    }

    pub fn render(&self) -> Result<Vec<PhantomSlice>> {
        (0..self.spec.num_slices).map(|k| self.render_slice(k)).collect()
    }
}

/// Renders the central slice of the phantom described by `spec`.
pub fn generate(spec: &PhantomSpec) -> Result<PhantomSlice> {
    let phantom = Phantom::new(spec)?;
    phantom.render_slice(spec.num_slices / 2)
}

/// Mask of voxels inside the circular field of view.
pub fn fov_mask(size: usize) -> Vec<bool> {
    let half = size as f64 / 2.0;
    (0..size * size)
        .map(|i| {
            let x = ((i % size) as f64 + 0.5 - half) / half;
            let y = (half - (i / size) as f64 - 0.5) / half;
            x * x + y * y <= 1.0
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct Subject {
    pub index: usize,
    pub split: Split,
    pub seed: u64,
    pub slices: Vec<PhantomSlice>,
}

impl Subject {
    pub fn pet(&self) -> Vec<Image> {
        self.slices.iter().map(|s| s.pet.clone()).collect()
    }
}

/// Split sizes in 70/10/20 proportion, each at least one.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(domain(format!("a dataset needs at least 3 subjects, got {n}")));
    }
    let val = ((n as f64 * 0.1).round() as usize).max(1);
    let test = ((n as f64 * 0.2).round() as usize).max(1);
    Ok((n - val - test, val, test))
}

pub fn subject_seed(dataset_seed: u64, index: usize) -> u64 {
    Rng::with_stream(dataset_seed, 0x5_0000 + index as u64).next_u64()
}

/// `n` subjects from `template`, each with its own derived seed, ordered
/// train, then validation, then test.
pub fn generate_dataset(n: usize, template: &PhantomSpec, seed: u64) -> Result<Vec<Subject>> {
    let (train, val, _) = split_sizes(n)?;
    template.validate()?;
    (0..n)
        .map(|i| {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            let spec = PhantomSpec {
                seed: subject_seed(seed, i),
                ..template.clone()
            };
            let slices = Phantom::new(&spec)?.render()?;
            Ok(Subject {
                index: i,
                split,
                seed: spec.seed,
                slices,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            size: 64,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn no_lesions_when_probability_zero() {
        for seed in 0..20 {
            let spec = PhantomSpec {
                lesion_probability: 0.0,
                ..small(seed)
            };
            let s = generate(&spec).unwrap();
            assert!(s
                .tissue
                .data()
                .iter()
                .all(|&v| !TissueClass::from_label(v).unwrap().is_lesion()));
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small(7)).unwrap();
        let b = generate(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(8)).unwrap();
        assert_ne!(a.pet, c.pet);
    }

    #[test]
    fn class_means_separate() {
        let s = generate(&small(3)).unwrap();
        let mut groups: BTreeMap<TissueClass, Vec<f64>> = BTreeMap::new();
        for (&t, &p) in s.tissue.data().iter().zip(s.pet.data()) {
            groups.entry(TissueClass::from_label(t).unwrap()).or_default().push(p);
        }
        let stats: Vec<(f64, f64)> = groups
            .values()
            .filter(|v| v.len() > 3)
            .map(|v| crate::metrics::mean_std(v))
            .collect();
        assert!(stats.len() >= 4);
        for (i, a) in stats.iter().enumerate() {
            for b in &stats[i + 1..] {
                assert!((a.0 - b.0).abs() > a.1.max(b.1), "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn activity_confined_to_fov_and_ranges() {
        let spec = small(11);
        let s = generate(&spec).unwrap();
        let mask = fov_mask(64);
        for (i, &inside) in mask.iter().enumerate() {
            if !inside {
                assert_eq!(s.pet.data()[i], 0.0);
            }
        }
        assert!(s.pet.min() >= 0.0);
        assert!(s.t1.max() <= 1.0 && s.t1.min() >= 0.0);
        assert!(s.t2.max() <= 1.0 && s.t2.min() >= 0.0);
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_sizes(10).unwrap(), (7, 1, 2));
        assert_eq!(split_sizes(3).unwrap(), (1, 1, 1));
        assert_eq!(split_sizes(30).unwrap(), (21, 3, 6));
        assert!(split_sizes(2).is_err());
    }

    #[test]
    fn dataset_splits_disjoint() {
        let spec = PhantomSpec {
            size: 16,
            ..Default::default()
        };
        let ds = generate_dataset(10, &spec, 1).unwrap();
        let count = |s: Split| ds.iter().filter(|x| x.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (7, 1, 2));
        let mut idx: Vec<usize> = ds.iter().map(|s| s.index).collect();
        idx.dedup();
        assert_eq!(idx.len(), 10);
    }

    #[test]
    fn neighboring_slices_are_similar() {
        let spec = PhantomSpec {
            size: 48,
            num_slices: 9,
            ..small(2)
        };
        let slices = Phantom::new(&spec).unwrap().render().unwrap();
        let diff = |a: &Image, b: &Image| a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
        let near = diff(&slices[4].tissue, &slices[5].tissue);
        let far = diff(&slices[0].tissue, &slices[8].tissue);
        assert!(near < far);
    }

    #[test]
    fn invalid_spec_reports_all_errors() {
        let spec = PhantomSpec {
            size: 2,
            lesion_probability: 2.0,
            ..Default::default()
        };
        match spec.validate() {
            Err(Error::Config(e)) => assert_eq!(e.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
