//! Synthetic CT volumes with known lesions, masks and scores.
//!
//! Lesions are stacks of identical discs. The expected score is summed pixel
//! by pixel straight from the rasterized lesions; no code from
//! [`crate::scoring`] is involved.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::volume::{CtVolume, Dims, MaskRole, MaskVolume, Spacing, HU_MAX};

pub const DEFAULT_BACKGROUND_HU: f64 = -50.0;
const CALCIUM_HU: f64 = 130.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionSpec {
    /// (slice, row, col) of the disc centre on the first slice.
    pub center: (usize, usize, usize),
    pub radius_px: f64,
    /// Number of consecutive slices, starting at `center.0`.
    pub n_slices: usize,
    pub hu: f64,
}

impl LesionSpec {
    /// Voxels covered by this lesion, in scan order.
    pub fn voxels(&self, dims: Dims) -> Vec<(usize, usize, usize)> {
        let (s0, r0, c0) = self.center;
        let rr = self.radius_px.floor() as isize;
        let mut out = Vec::new();
        for s in s0..(s0 + self.n_slices).min(dims.slices) {
            for dr in -rr..=rr {
                for dc in -rr..=rr {
                    if ((dr * dr + dc * dc) as f64) > self.radius_px * self.radius_px {
                        continue;
                    }
                    let (r, c) = (r0 as isize + dr, c0 as isize + dc);
                    if r >= 0 && c >= 0 && (r as usize) < dims.rows && (c as usize) < dims.cols {
                        out.push((s, r as usize, c as usize));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub background_hu: f64,
    pub lesions: Vec<LesionSpec>,
    /// Std of the additive Gaussian noise, truncated at ±3σ.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Size filter applied by the oracle; 0 disables it.
    pub min_lesion_mm2: f64,
}

impl PhantomSpec {
    pub fn empty(dims: Dims, spacing: Spacing, seed: u64) -> Self {
        PhantomSpec {
            dims,
            spacing,
            background_hu: DEFAULT_BACKGROUND_HU,
            lesions: Vec::new(),
            noise_sigma: 0.0,
            seed,
            min_lesion_mm2: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.noise_sigma;
        if !(n >= 0.0 && n.is_finite()) {
            return Err(invalid!("noise sigma must be >= 0, got {n}"));
        }
        if self.background_hu + 3.0 * n >= CALCIUM_HU {
            return Err(invalid!("background {} HU + 3 sigma reaches the calcium threshold", self.background_hu));
        }
        for (k, l) in self.lesions.iter().enumerate() {
            if l.hu - 3.0 * n < CALCIUM_HU || l.hu + 3.0 * n > HU_MAX as f64 {
                return Err(invalid!("lesion {k}: {} HU ± 3 sigma leaves [130, {HU_MAX}]", l.hu));
            }
            let (s, r, c) = l.center;
            if s >= self.dims.slices || r >= self.dims.rows || c >= self.dims.cols {
                return Err(invalid!("lesion {k} centre {:?} outside {}", l.center, self.dims));
            }
            if l.n_slices == 0 || !(l.radius_px >= 0.0) {
                return Err(invalid!("lesion {k} is empty"));
            }
        }
        Ok(())
    }

    /// Lesion index per voxel; fails on overlap or 26-adjacency.
    fn rasterize(&self) -> Result<Vec<Option<usize>>> {
        let d = self.dims;
        let mut owner: Vec<Option<usize>> = vec![None; d.len()];
        for (k, l) in self.lesions.iter().enumerate() {
            for (s, r, c) in l.voxels(d) {
                let i = d.index(s, r, c);
                if owner[i].is_some() {
                    return Err(invalid!("lesions {} and {k} overlap", owner[i].unwrap()));
                }
                owner[i] = Some(k);
            }
        }
        for i in 0..d.len() {
            let Some(a) = owner[i] else { continue };
            let (s, r, c) = d.coords(i);
            for ds in -1..=1isize {
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        let (ns, nr, nc) = (s as isize + ds, r as isize + dr, c as isize + dc);
                        if ns < 0 || nr < 0 || nc < 0 {
                            continue;
                        }
                        let (ns, nr, nc) = (ns as usize, nr as usize, nc as usize);
                        if ns >= d.slices || nr >= d.rows || nc >= d.cols {
                            continue;
                        }
                        if let Some(b) = owner[d.index(ns, nr, nc)] {
                            if b != a {
                                return Err(invalid!("lesions {a} and {b} touch"));
                            }
                        }
                    }
                }
            }
        }
        Ok(owner)
    }
}

/// Expected score of one lesion and its slices.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleLesion {
    pub n_voxels: usize,
    /// `(slice, pixel count, peak HU)`, ascending by slice.
    pub slices: Vec<(usize, usize, i16)>,
    pub score: f64,
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Oracle {
    pub lesions: Vec<OracleLesion>,
    pub total: f64,
}

impl Oracle {
    pub fn n_kept(&self) -> usize {
        self.lesions.iter().filter(|l| l.kept).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: CtVolume,
    pub mask: MaskVolume,
    pub oracle: Oracle,
}

fn density_factor(hu: i16) -> f64 {
    [(400, 4.0), (300, 3.0), (200, 2.0), (130, 1.0)]
        .iter()
        .find(|&&(lo, _)| hu >= lo)
        .map(|&(_, f)| f)
        .unwrap_or(0.0)
}

/// Per-pixel evaluation of `Σ f·A·ΔS/3` over the lesions of `spec`.
fn oracle(spec: &PhantomSpec, voxels: &[i16], owner: &[Option<usize>]) -> Oracle {
    let d = spec.dims;
    let pix_area = spec.spacing.row_mm * spec.spacing.col_mm;
    let mut lesions = Vec::with_capacity(spec.lesions.len());
    for k in 0..spec.lesions.len() {
        let mut slices: Vec<(usize, usize, i16)> = Vec::new();
        for s in 0..d.slices {
            let mut count = 0;
            let mut peak = i16::MIN;
            for i in s * d.slice_len()..(s + 1) * d.slice_len() {
                if owner[i] == Some(k) {
                    count += 1;
                    peak = peak.max(voxels[i]);
                }
            }
            if count > 0 {
                slices.push((s, count, peak));
            }
        }
        let n_voxels = slices.iter().map(|s| s.1).sum();
        let kept = spec.min_lesion_mm2 <= 0.0
            || slices.iter().any(|&(_, n, _)| n as f64 * pix_area >= spec.min_lesion_mm2);
        let mut score = 0.0;
        for &(_, n, peak) in &slices {
            // one pixel at a time, as the double sum is written
            for _ in 0..n {
                score += density_factor(peak) * pix_area * spec.spacing.slice_mm / 3.0;
            }
        }
        lesions.push(OracleLesion { n_voxels, slices, score, kept });
    }
    let total = lesions.iter().filter(|l| l.kept).fold(0.0, |acc, l| acc + l.score);
    Oracle { lesions, total }
}

fn truncated_noise(normal: &Normal<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    loop {
        let z = normal.sample(rng);
        if z.abs() <= 3.0 * sigma {
            return z;
        }
    }
}

/// Rasterizes the spec into a volume, its exact mask and the oracle score.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let owner = spec.rasterize()?;
    let sigma = spec.noise_sigma;
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let voxels: Vec<i16> = owner
        .iter()
        .map(|o| {
            let base = o.map_or(spec.background_hu, |k| spec.lesions[k].hu);
            let v = (base + truncated_noise(&normal, sigma, &mut rng)).round();
            // background stays strictly below the gate, lesions at or above it
            let v = if o.is_some() { v.max(CALCIUM_HU) } else { v.min(CALCIUM_HU - 1.0) };
            v as i16
        })
        .collect();
    let labels = owner.iter().map(|o| o.is_some() as u8).collect();
    let volume = CtVolume::new(spec.dims, spec.spacing, voxels)?;
    let mask = MaskVolume::new(spec.dims, spec.spacing, labels, MaskRole::GroundTruth)?;
    let oracle = oracle(spec, volume.voxels(), &owner);
    Ok(Phantom { volume, mask, oracle })
}

/// Ranges for randomized phantoms.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomRanges {
    pub dims: Dims,
    pub slice_mm: (f64, f64),
    pub pixel_mm: (f64, f64),
    pub n_lesions: (usize, usize),
    pub radius_px: (f64, f64),
    pub lesion_slices: (usize, usize),
    pub lesion_hu: (f64, f64),
    pub noise_sigma: f64,
    pub min_lesion_mm2: f64,
}

impl Default for PhantomRanges {
    fn default() -> Self {
        PhantomRanges {
            dims: Dims::new(8, 24, 24),
            slice_mm: (1.0, 3.0),
            pixel_mm: (0.4, 1.0),
            n_lesions: (0, 5),
            radius_px: (0.0, 3.5),
            lesion_slices: (1, 3),
            lesion_hu: (160.0, 900.0),
            noise_sigma: 10.0,
            min_lesion_mm2: 1.0,
        }
    }
}

impl PhantomRanges {
    /// 32×32 phantoms for the toy training run.
    pub fn training() -> Self {
        PhantomRanges {
            dims: Dims::new(9, 32, 32),
            n_lesions: (2, 4),
            radius_px: (1.5, 3.5),
            lesion_slices: (2, 5),
            lesion_hu: (400.0, 1200.0),
            ..Self::default()
        }
    }
}

/// Draws a spec; lesions that would touch earlier ones are redrawn a bounded
/// number of times and otherwise skipped.
pub fn random_spec<R: Rng + ?Sized>(ranges: &PhantomRanges, rng: &mut R) -> PhantomSpec {
    let d = ranges.dims;
    let uni = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let pix = uni(rng, ranges.pixel_mm);
    let spacing = Spacing::new(uni(rng, ranges.slice_mm), pix, pix);
    let mut spec = PhantomSpec {
        dims: d,
        spacing,
        background_hu: DEFAULT_BACKGROUND_HU,
        lesions: Vec::new(),
        noise_sigma: ranges.noise_sigma,
        seed: rng.random(),
        min_lesion_mm2: ranges.min_lesion_mm2,
    };
    let target = rng.random_range(ranges.n_lesions.0..=ranges.n_lesions.1);
    for _ in 0..target {
        for _attempt in 0..20 {
            let l = LesionSpec {
                center: (rng.random_range(0..d.slices), rng.random_range(0..d.rows), rng.random_range(0..d.cols)),
                radius_px: uni(rng, ranges.radius_px),
                n_slices: rng.random_range(ranges.lesion_slices.0..=ranges.lesion_slices.1),
                hu: uni(rng, ranges.lesion_hu).round(),
            };
            spec.lesions.push(l);
            if spec.rasterize().is_ok() {
                break;
            }
            spec.lesions.pop();
        }
    }
    spec
}

/// `n` random phantoms, deterministic in `seed`.
pub fn make_training_set(n: usize, ranges: &PhantomRanges, seed: u64) -> Result<Vec<Phantom>> {
    if n == 0 {
        return Err(invalid!("training set size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generate(&random_spec(ranges, &mut rng))).collect()
}

/// Slice with the most lesion voxels (the first one on ties).
pub fn busiest_slice(mask: &MaskVolume) -> usize {
    let d = mask.dims();
    (0..d.slices)
        .map(|s| (mask.slice(s).iter().filter(|&&v| v != 0).count(), s))
        .fold((0, 0), |best, (n, s)| if n > best.0 { (n, s) } else { best })
        .1
}
