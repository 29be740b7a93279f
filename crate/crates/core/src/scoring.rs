//! Thresholding, HU gating, lesion extraction and the slice-spacing-corrected
//! Agatston score.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{invalid, shape_err, Error, Result};
use crate::volume::{CtVolume, Dims, MaskRole, MaskVolume, ProbVolume, Spacing};

pub const DEFAULT_PROB_THRESHOLD: f64 = 0.5;
pub const CAC_HU_THRESHOLD: i16 = 130;
pub const MIN_LESION_MM2: f64 = 1.0;
/// Reference slice thickness of the classic score.
pub const REFERENCE_SLICE_MM: f64 = 3.0;

/// Voxel adjacency used to group foreground voxels into lesions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Connectivity {
    /// Full 3×3×3 neighbourhood.
    #[default]
    Volume26,
    /// In-plane 3×3 neighbourhood only; every lesion lives on one slice.
    Slice8,
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "26" | "volume26" => Ok(Connectivity::Volume26),
            "8" | "slice8" | "8-2d" => Ok(Connectivity::Slice8),
            _ => Err(invalid!("unknown connectivity {s:?} (expected 26 or 8)")),
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Connectivity::Volume26 => "26",
            Connectivity::Slice8 => "8-2d",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoringParams {
    pub prob_threshold: f64,
    pub hu_threshold: i16,
    /// A lesion survives when at least one of its slices reaches this area.
    /// Zero disables the filter.
    pub min_lesion_mm2: f64,
    pub connectivity: Connectivity,
}

impl Default for ScoringParams {
    fn default() -> Self {
        ScoringParams {
            prob_threshold: DEFAULT_PROB_THRESHOLD,
            hu_threshold: CAC_HU_THRESHOLD,
            min_lesion_mm2: MIN_LESION_MM2,
            connectivity: Connectivity::Volume26,
        }
    }
}

impl ScoringParams {
    /// Same parameters with the lesion-size filter switched off.
    pub fn raw(self) -> Self {
        ScoringParams { min_lesion_mm2: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prob_threshold > 0.0 && self.prob_threshold <= 1.0) {
            return Err(invalid!("probability threshold must lie in (0,1], got {}", self.prob_threshold));
        }
        if self.hu_threshold <= 0 {
            return Err(invalid!("HU threshold must be positive, got {}", self.hu_threshold));
        }
        if !(self.min_lesion_mm2 >= 0.0 && self.min_lesion_mm2.is_finite()) {
            return Err(invalid!("minimum lesion area must be >= 0, got {}", self.min_lesion_mm2));
        }
        Ok(())
    }
}

/// `1` where `prob >= thresh`.
pub fn binarize(probs: &ProbVolume, thresh: f64) -> MaskVolume {
    let labels = probs.probs().iter().map(|&p| (p as f64 >= thresh) as u8).collect();
    MaskVolume::new(probs.dims(), probs.spacing(), labels, MaskRole::Prediction)
        .expect("binarized probabilities share the probability grid")
}

fn same_dims(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(shape_err!("mask dims {a} differ from volume dims {b}"));
    }
    Ok(())
}

/// Keeps mask voxels whose HU value reaches `hu_threshold`.
pub fn hu_gate(mask: &MaskVolume, vol: &CtVolume, hu_threshold: i16) -> Result<MaskVolume> {
    same_dims(mask.dims(), vol.dims())?;
    let labels = mask
        .labels()
        .iter()
        .zip(vol.voxels())
        .map(|(&m, &h)| (m != 0 && h >= hu_threshold) as u8)
        .collect();
    MaskVolume::new(mask.dims(), mask.spacing(), labels, mask.role())
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet { parent: (0..n as u32).collect() }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Neighbour offsets that precede a voxel in scan order.
fn backward_offsets(conn: Connectivity) -> Vec<(isize, isize, isize)> {
    let mut out = Vec::new();
    let ds: &[isize] = match conn {
        Connectivity::Volume26 => &[-1, 0],
        Connectivity::Slice8 => &[0],
    };
    for &ds in ds {
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                if (ds, dr, dc) < (0, 0, 0) {
                    out.push((ds, dr, dc));
                }
            }
        }
    }
    out
}

/// Groups foreground voxels into components.
///
/// Each component is a list of flat voxel indices in scan order; components
/// are ordered by their first voxel.
pub fn connected_components(mask: &MaskVolume, conn: Connectivity) -> Vec<Vec<usize>> {
    let d = mask.dims();
    let labels = mask.labels();
    let mut ds = DisjointSet::new(labels.len());
    let offsets = backward_offsets(conn);
    for (idx, &v) in labels.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let (s, r, c) = d.coords(idx);
        for &(ds_, dr, dc) in &offsets {
            let (ns, nr, nc) = (s as isize + ds_, r as isize + dr, c as isize + dc);
            if ns < 0 || nr < 0 || nc < 0 || nr >= d.rows as isize || nc >= d.cols as isize {
                continue;
            }
            let n = d.index(ns as usize, nr as usize, nc as usize);
            if labels[n] != 0 {
                ds.union(idx as u32, n as u32);
            }
        }
    }
    // roots are the smallest index of each set, so first-seen order is scan order
    let mut slot = vec![u32::MAX; labels.len()];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for (idx, &v) in labels.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let root = ds.find(idx as u32) as usize;
        if slot[root] == u32::MAX {
            slot[root] = comps.len() as u32;
            comps.push(Vec::new());
        }
        comps[slot[root] as usize].push(idx);
    }
    comps
}

/// Cross-section of a lesion on one slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceStat {
    pub slice: usize,
    pub n_pixels: usize,
    pub area_mm2: f64,
    pub peak_hu: i16,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lesion {
    /// 1-based, in scan order of the first voxel.
    pub id: usize,
    pub voxels: Vec<(usize, usize, usize)>,
    /// Ascending by slice.
    pub per_slice: Vec<SliceStat>,
    pub total_volume_mm3: f64,
}

impl Lesion {
    pub fn max_slice_area(&self) -> f64 {
        self.per_slice.iter().map(|s| s.area_mm2).fold(0.0, f64::max)
    }
}

/// Components of `mask` with per-slice statistics read from `vol`; lesions
/// whose largest cross-section is below `min_lesion_mm2` are dropped.
pub fn extract_lesions(
    mask: &MaskVolume,
    vol: &CtVolume,
    conn: Connectivity,
    min_lesion_mm2: f64,
) -> Result<Vec<Lesion>> {
    same_dims(mask.dims(), vol.dims())?;
    let d = vol.dims();
    let sp = vol.spacing();
    let mut lesions = Vec::new();
    for comp in connected_components(mask, conn) {
        let voxels: Vec<_> = comp.iter().map(|&i| d.coords(i)).collect();
        let mut per_slice: Vec<SliceStat> = Vec::new();
        let mut sorted: Vec<usize> = comp.clone();
        sorted.sort_unstable();
        for &i in &sorted {
            let (s, _, _) = d.coords(i);
            let hu = vol.voxels()[i];
            match per_slice.last_mut() {
                Some(st) if st.slice == s => {
                    st.n_pixels += 1;
                    st.peak_hu = st.peak_hu.max(hu);
                }
                _ => per_slice.push(SliceStat { slice: s, n_pixels: 1, area_mm2: 0.0, peak_hu: hu }),
            }
        }
        for st in &mut per_slice {
            st.area_mm2 = st.n_pixels as f64 * sp.pixel_area_mm2();
        }
        let lesion = Lesion {
            id: 0,
            total_volume_mm3: comp.len() as f64 * sp.voxel_volume_mm3(),
            voxels,
            per_slice,
        };
        if min_lesion_mm2 > 0.0 && lesion.max_slice_area() < min_lesion_mm2 {
            continue;
        }
        lesions.push(lesion);
    }
    for (k, l) in lesions.iter_mut().enumerate() {
        l.id = k + 1;
    }
    Ok(lesions)
}

/// Density factor for a cross-section's peak HU: 1/2/3/4 from
/// 130/200/300/400 HU.
pub fn agatston_weight(peak_hu: f64) -> Result<u8> {
    if !(peak_hu >= CAC_HU_THRESHOLD as f64) {
        return Err(invalid!("peak {peak_hu} HU is below the {CAC_HU_THRESHOLD} HU calcium threshold"));
    }
    Ok(match peak_hu {
        h if h < 200.0 => 1,
        h if h < 300.0 => 2,
        h if h < 400.0 => 3,
        _ => 4,
    })
}

/// Risk band of a total score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RiskCategory {
    Zero,
    Minimal,
    Mild,
    Moderate,
    Severe,
}

impl RiskCategory {
    pub const ALL: [RiskCategory; 5] = [
        RiskCategory::Zero,
        RiskCategory::Minimal,
        RiskCategory::Mild,
        RiskCategory::Moderate,
        RiskCategory::Severe,
    ];

    /// 0 / (0,10] / (10,100] / (100,400] / >400.
    pub fn from_score(total: f64) -> Self {
        match total {
            t if t <= 0.0 => RiskCategory::Zero,
            t if t <= 10.0 => RiskCategory::Minimal,
            t if t <= 100.0 => RiskCategory::Mild,
            t if t <= 400.0 => RiskCategory::Moderate,
            _ => RiskCategory::Severe,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RiskCategory::Zero => "zero",
            RiskCategory::Minimal => "minimal",
            RiskCategory::Mild => "mild",
            RiskCategory::Moderate => "moderate",
            RiskCategory::Severe => "severe",
        }
    }
}

impl fmt::Display for RiskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RiskCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RiskCategory::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| invalid!("unknown risk category {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceScore {
    pub slice: usize,
    pub area_mm2: f64,
    pub peak_hu: i16,
    pub weight: u8,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionScore {
    pub id: usize,
    pub n_voxels: usize,
    pub volume_mm3: f64,
    pub slices: Vec<SliceScore>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgatstonResult {
    pub lesions: Vec<LesionScore>,
    pub total: f64,
    pub risk: RiskCategory,
}

/// `Σ_slices Σ_lesions f · A · ΔS/3`.
pub fn agatston_score(lesions: &[Lesion], spacing: Spacing) -> Result<AgatstonResult> {
    let ds = spacing.slice_mm;
    if !(ds.is_finite() && ds > 0.0) {
        return Err(invalid!("slice spacing must be positive, got {ds}"));
    }
    let mut scores = Vec::with_capacity(lesions.len());
    for l in lesions {
        let mut slices = Vec::with_capacity(l.per_slice.len());
        for st in &l.per_slice {
            let weight = agatston_weight(st.peak_hu as f64)?;
            let score = weight as f64 * st.area_mm2 * ds / REFERENCE_SLICE_MM;
            slices.push(SliceScore { slice: st.slice, area_mm2: st.area_mm2, peak_hu: st.peak_hu, weight, score });
        }
        let score = slices.iter().fold(0.0, |acc, s| acc + s.score);
        scores.push(LesionScore { id: l.id, n_voxels: l.voxels.len(), volume_mm3: l.total_volume_mm3, slices, score });
    }
    let total = scores.iter().fold(0.0, |acc, s| acc + s.score);
    Ok(AgatstonResult { lesions: scores, total, risk: RiskCategory::from_score(total) })
}

/// binarize → HU gate → components → score.
pub fn score_pipeline(probs: &ProbVolume, vol: &CtVolume, params: &ScoringParams) -> Result<AgatstonResult> {
    params.validate()?;
    same_dims(probs.dims(), vol.dims())?;
    let mask = binarize(probs, params.prob_threshold);
    let gated = hu_gate(&mask, vol, params.hu_threshold)?;
    let lesions = extract_lesions(&gated, vol, params.connectivity, params.min_lesion_mm2)?;
    agatston_score(&lesions, vol.spacing())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Table,
    KeyValue,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "kv" => Ok(ReportFormat::KeyValue),
            _ => Err(invalid!("unknown report format {s:?} (expected table or kv)")),
        }
    }
}

impl AgatstonResult {
    /// Table:
    ///
    /// ```text
    /// # lesion_id, n_voxels, volume_mm3, score
    /// 1, 10, 14.7, 9.8
    /// total_score 9.8, risk minimal
    /// ```
    ///
    /// Key-value, one `key value` pair per line:
    ///
    /// ```text
    /// n_lesions 1
    /// lesion 1 n_voxels 10 volume_mm3 14.7 score 9.8
    /// total_score 9.8
    /// risk minimal
    /// ```
    pub fn render(&self, format: ReportFormat) -> String {
        let mut out = String::new();
        match format {
            ReportFormat::Table => {
                out.push_str("# lesion_id, n_voxels, volume_mm3, score\n");
                for l in &self.lesions {
                    let _ = writeln!(out, "{}, {}, {:?}, {:?}", l.id, l.n_voxels, l.volume_mm3, l.score);
                }
                let _ = writeln!(out, "total_score {:?}, risk {}", self.total, self.risk);
            }
            ReportFormat::KeyValue => {
                let _ = writeln!(out, "n_lesions {}", self.lesions.len());
                for l in &self.lesions {
                    let _ = writeln!(
                        out,
                        "lesion {} n_voxels {} volume_mm3 {:?} score {:?}",
                        l.id, l.n_voxels, l.volume_mm3, l.score
                    );
                }
                let _ = writeln!(out, "total_score {:?}", self.total);
                let _ = writeln!(out, "risk {}", self.risk);
            }
        }
        out
    }
}

/// Total score and risk from a key-value report.
pub fn parse_kv_report(text: &str) -> Result<(f64, RiskCategory)> {
    let mut total = None;
    let mut risk = None;
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("total_score ") {
            total = Some(v.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad total_score {v:?}")))?);
        } else if let Some(v) = line.strip_prefix("risk ") {
            risk = Some(v.trim().parse()?);
        }
    }
    match (total, risk) {
        (Some(t), Some(r)) => Ok((t, r)),
        _ => Err(Error::Format("report lacks total_score or risk".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: Dims, on: &[(usize, usize, usize)]) -> MaskVolume {
        let mut labels = vec![0u8; dims.len()];
        for &(s, r, c) in on {
            labels[dims.index(s, r, c)] = 1;
        }
        MaskVolume::new(dims, Spacing::new(1.0, 1.0, 1.0), labels, MaskRole::Prediction).unwrap()
    }

    #[test]
    fn binarize_tie_is_foreground() {
        let d = Dims::new(1, 1, 3);
        let p = ProbVolume::new(d, Spacing::new(1.0, 1.0, 1.0), vec![0.5, 0.4999, 1.0]).unwrap();
        assert_eq!(binarize(&p, 0.5).labels(), &[1, 0, 1]);
    }

    #[test]
    fn diagonal_in_plane_joins() {
        let d = Dims::new(1, 3, 3);
        assert_eq!(connected_components(&mask(d, &[(0, 0, 0), (0, 1, 1)]), Connectivity::Volume26).len(), 1);
        assert_eq!(connected_components(&mask(d, &[(0, 0, 0), (0, 0, 2)]), Connectivity::Volume26).len(), 2);
    }

    #[test]
    fn slice_mode_splits_across_slices() {
        let d = Dims::new(2, 2, 2);
        let m = mask(d, &[(0, 0, 0), (1, 1, 1)]);
        assert_eq!(connected_components(&m, Connectivity::Volume26).len(), 1);
        assert_eq!(connected_components(&m, Connectivity::Slice8).len(), 2);
    }

    #[test]
    fn components_ordered_by_first_voxel() {
        let d = Dims::new(1, 1, 7);
        // the later component's root merges leftwards through a chain
        let m = mask(d, &[(0, 0, 0), (0, 0, 3), (0, 0, 4), (0, 0, 6)]);
        let comps = connected_components(&m, Connectivity::Volume26);
        assert_eq!(comps, vec![vec![0], vec![3, 4], vec![6]]);
    }

    #[test]
    fn weight_table() {
        let cases = [(130.0, 1), (199.0, 1), (200.0, 2), (299.0, 2), (300.0, 3), (399.0, 3), (400.0, 4), (3000.0, 4)];
        for (hu, w) in cases {
            assert_eq!(agatston_weight(hu).unwrap(), w, "{hu}");
        }
        assert!(agatston_weight(129.0).is_err());
        assert!(agatston_weight(f64::NAN).is_err());
    }

    #[test]
    fn risk_bands() {
        use RiskCategory::*;
        let cases = [(0.0, Zero), (1e-9, Minimal), (10.0, Minimal), (10.1, Mild), (100.0, Mild), (400.0, Moderate), (400.5, Severe)];
        for (s, r) in cases {
            assert_eq!(RiskCategory::from_score(s), r, "{s}");
        }
        for r in RiskCategory::ALL {
            assert_eq!(r.name().parse::<RiskCategory>().unwrap(), r);
        }
    }

    #[test]
    fn empty_lesions_score_zero() {
        let r = agatston_score(&[], Spacing::new(3.0, 1.0, 1.0)).unwrap();
        assert_eq!((r.total, r.risk), (0.0, RiskCategory::Zero));
        assert!(r.render(ReportFormat::Table).ends_with("total_score 0.0, risk zero\n"));
    }

    #[test]
    fn kv_report_round_trips() {
        let r = AgatstonResult { lesions: vec![], total: 9.8, risk: RiskCategory::Minimal };
        assert_eq!(parse_kv_report(&r.render(ReportFormat::KeyValue)).unwrap(), (9.8, RiskCategory::Minimal));
        assert!(parse_kv_report("total_score 1.0\n").is_err());
    }

    #[test]
    fn gate_shape_mismatch() {
        let m = mask(Dims::new(1, 2, 2), &[]);
        let v = CtVolume::filled(Dims::new(1, 2, 3), Spacing::new(1.0, 1.0, 1.0), 0).unwrap();
        assert!(hu_gate(&m, &v, 130).is_err());
    }
}
