//! CT, mask and probability volumes plus their on-disk container.
//!
//! Every volume file starts with a five-line text header followed by a raw
//! little-endian payload in `[slice][row][col]` order:
//!
//! ```text
//! CACVOL1
//! dims <n_slices> <n_rows> <n_cols>
//! spacing <slice_mm> <row_mm> <col_mm>
//! dtype int16|uint8|float32
//! data
//! ```
//!
//! CT volumes use `int16` Hounsfield units, masks `uint8` and probability
//! maps `float32`.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{invalid, shape_err, Error, Result};

pub const MAGIC: &str = "CACVOL1";

/// Lowest HU value kept on ingestion.
pub const HU_MIN: i16 = -1024;
/// Highest HU value kept on ingestion (12-bit CT range).
pub const HU_MAX: i16 = 4095;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub slices: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Dims {
    pub fn new(slices: usize, rows: usize, cols: usize) -> Self {
        Dims { slices, rows, cols }
    }

    pub fn len(&self) -> usize {
        self.slices * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn index(&self, s: usize, r: usize, c: usize) -> usize {
        (s * self.rows + r) * self.cols + c
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let c = idx % self.cols;
        let r = (idx / self.cols) % self.rows;
        let s = idx / (self.cols * self.rows);
        (s, r, c)
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(invalid!("volume dims must be positive, got {self}"));
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.slices, self.rows, self.cols)
    }
}

/// Physical voxel size in millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spacing {
    pub slice_mm: f64,
    pub row_mm: f64,
    pub col_mm: f64,
}

impl Spacing {
    pub fn new(slice_mm: f64, row_mm: f64, col_mm: f64) -> Self {
        Spacing { slice_mm, row_mm, col_mm }
    }

    pub fn pixel_area_mm2(&self) -> f64 {
        self.row_mm * self.col_mm
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.slice_mm * self.row_mm * self.col_mm
    }

    fn validate(&self) -> Result<()> {
        for v in [self.slice_mm, self.row_mm, self.col_mm] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid!("spacing components must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// A CT volume in Hounsfield units.
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    dims: Dims,
    spacing: Spacing,
    voxels: Vec<i16>,
}

impl CtVolume {
    /// Builds a volume, clamping voxels into `[HU_MIN, HU_MAX]`.
    pub fn new(dims: Dims, spacing: Spacing, mut voxels: Vec<i16>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if voxels.len() != dims.len() {
            return Err(shape_err!(
                "volume {dims} needs {} voxels, got {}",
                dims.len(),
                voxels.len()
            ));
        }
        for v in &mut voxels {
            *v = (*v).clamp(HU_MIN, HU_MAX);
        }
        Ok(CtVolume { dims, spacing, voxels })
    }

    pub fn filled(dims: Dims, spacing: Spacing, hu: i16) -> Result<Self> {
        Self::new(dims, spacing, vec![hu; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn get(&self, s: usize, r: usize, c: usize) -> i16 {
        self.voxels[self.dims.index(s, r, c)]
    }

    pub fn slice(&self, s: usize) -> &[i16] {
        let n = self.dims.slice_len();
        &self.voxels[s * n..(s + 1) * n]
    }

    /// Same voxels, different spacing.
    pub fn with_spacing(&self, spacing: Spacing) -> Result<Self> {
        spacing.validate()?;
        Ok(CtVolume { spacing, ..self.clone() })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = header(self.dims, self.spacing, DType::Int16);
        out.reserve(self.voxels.len() * 2);
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, payload) = parse_header(bytes)?;
        h.expect_dtype(DType::Int16)?;
        h.check_payload(payload)?;
        let voxels = payload
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect();
        CtVolume::new(h.dims, h.spacing, voxels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskRole {
    GroundTruth,
    Prediction,
}

/// Binary voxel labels sharing a CT volume's grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    dims: Dims,
    spacing: Spacing,
    labels: Vec<u8>,
    role: MaskRole,
}

impl MaskVolume {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u8>, role: MaskRole) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if labels.len() != dims.len() {
            return Err(shape_err!(
                "mask {dims} needs {} labels, got {}",
                dims.len(),
                labels.len()
            ));
        }
        if let Some(pos) = labels.iter().position(|&v| v > 1) {
            return Err(invalid!("mask value {} at offset {pos} is not 0 or 1", labels[pos]));
        }
        Ok(MaskVolume { dims, spacing, labels, role })
    }

    pub fn zeros(dims: Dims, spacing: Spacing, role: MaskRole) -> Result<Self> {
        Self::new(dims, spacing, vec![0; dims.len()], role)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn role(&self) -> MaskRole {
        self.role
    }

    pub fn with_role(mut self, role: MaskRole) -> Self {
        self.role = role;
        self
    }

    pub fn slice(&self, s: usize) -> &[u8] {
        let n = self.dims.slice_len();
        &self.labels[s * n..(s + 1) * n]
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }

    /// The mask as hard probabilities (0.0 / 1.0).
    pub fn to_probs(&self) -> ProbVolume {
        ProbVolume {
            dims: self.dims,
            spacing: self.spacing,
            probs: self.labels.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = header(self.dims, self.spacing, DType::UInt8);
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn decode(bytes: &[u8], role: MaskRole) -> Result<Self> {
        let (h, payload) = parse_header(bytes)?;
        h.expect_dtype(DType::UInt8)?;
        h.check_payload(payload)?;
        MaskVolume::new(h.dims, h.spacing, payload.to_vec(), role)
    }
}

/// Per-voxel foreground probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume {
    dims: Dims,
    spacing: Spacing,
    probs: Vec<f32>,
}

impl ProbVolume {
    pub fn new(dims: Dims, spacing: Spacing, probs: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        spacing.validate()?;
        if probs.len() != dims.len() {
            return Err(shape_err!(
                "probability volume {dims} needs {} values, got {}",
                dims.len(),
                probs.len()
            ));
        }
        if let Some(pos) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid!("probability {} at offset {pos} outside [0,1]", probs[pos]));
        }
        Ok(ProbVolume { dims, spacing, probs })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = header(self.dims, self.spacing, DType::Float32);
        out.reserve(self.probs.len() * 4);
        for p in &self.probs {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, payload) = parse_header(bytes)?;
        h.expect_dtype(DType::Float32)?;
        h.check_payload(payload)?;
        let probs = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        ProbVolume::new(h.dims, h.spacing, probs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    Int16,
    UInt8,
    Float32,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::Int16 => 2,
            DType::UInt8 => 1,
            DType::Float32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Int16 => "int16",
            DType::UInt8 => "uint8",
            DType::Float32 => "float32",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "int16" => Ok(DType::Int16),
            "uint8" => Ok(DType::UInt8),
            "float32" => Ok(DType::Float32),
            other => Err(Error::Format(format!("unknown dtype {other:?}"))),
        }
    }
}

/// Parsed header of a volume file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Header {
    pub dims: Dims,
    pub spacing: Spacing,
    pub dtype: DType,
}

impl Header {
    fn expect_dtype(&self, want: DType) -> Result<()> {
        if self.dtype != want {
            return Err(Error::Format(format!(
                "expected dtype {}, file declares {}",
                want.name(),
                self.dtype.name()
            )));
        }
        Ok(())
    }

    fn check_payload(&self, payload: &[u8]) -> Result<()> {
        let want = self.dims.len() * self.dtype.width();
        if payload.len() != want {
            return Err(Error::Format(format!(
                "payload size mismatch: header {} ({}) needs {want} bytes, found {}",
                self.dims,
                self.dtype.name(),
                payload.len()
            )));
        }
        Ok(())
    }
}

fn header(dims: Dims, spacing: Spacing, dtype: DType) -> Vec<u8> {
    // `{:?}` prints the shortest round-trip form and always keeps a decimal point.
    format!(
        "{MAGIC}\ndims {} {} {}\nspacing {:?} {:?} {:?}\ndtype {}\ndata\n",
        dims.slices,
        dims.rows,
        dims.cols,
        spacing.slice_mm,
        spacing.row_mm,
        spacing.col_mm,
        dtype.name()
    )
    .into_bytes()
}

/// Splits a volume file into its header and raw payload.
pub fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let mut rest = bytes;
    let mut next_line = |what: &str| -> Result<&str> {
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format(format!("truncated header before {what} line")))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Format(format!("{what} line is not utf-8")))?;
        rest = &rest[end + 1..];
        Ok(line)
    };

    let magic = next_line("magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let dims: Vec<usize> = keyed_fields(next_line("dims")?, "dims", 3)?;
    let spacing: Vec<f64> = keyed_fields(next_line("spacing")?, "spacing", 3)?;
    let dtype_line = next_line("dtype")?;
    let dtype = match dtype_line.split_once(' ') {
        Some(("dtype", v)) => DType::parse(v.trim())?,
        _ => return Err(Error::Format(format!("expected dtype line, got {dtype_line:?}"))),
    };
    if next_line("data")? != "data" {
        return Err(Error::Format("missing data marker".into()));
    }

    let dims = Dims::new(dims[0], dims[1], dims[2]);
    let spacing = Spacing::new(spacing[0], spacing[1], spacing[2]);
    dims.validate()?;
    spacing.validate()?;
    Ok((Header { dims, spacing, dtype }, rest))
}

fn keyed_fields<T: std::str::FromStr>(line: &str, key: &str, n: usize) -> Result<Vec<T>> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(Error::Format(format!("expected {key} line, got {line:?}")));
    }
    let vals: Vec<T> = parts
        .map(|p| p.parse::<T>().map_err(|_| Error::Format(format!("bad {key} value {p:?}"))))
        .collect::<Result<_>>()?;
    if vals.len() != n {
        return Err(Error::Format(format!("{key} needs {n} values, got {}", vals.len())));
    }
    Ok(vals)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<CtVolume> {
    CtVolume::decode(&read_file(path.as_ref())?)
}

pub fn write_volume(vol: &CtVolume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &vol.encode())
}

pub fn read_mask(path: impl AsRef<Path>, role: MaskRole) -> Result<MaskVolume> {
    MaskVolume::decode(&read_file(path.as_ref())?, role)
}

pub fn write_mask(mask: &MaskVolume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &mask.encode())
}

pub fn read_probs(path: impl AsRef<Path>) -> Result<ProbVolume> {
    ProbVolume::decode(&read_file(path.as_ref())?)
}

pub fn write_probs(probs: &ProbVolume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &probs.encode())
}

/// Reads a prediction file that may hold either a binary mask or probabilities.
pub fn read_prediction(path: impl AsRef<Path>) -> Result<ProbVolume> {
    let bytes = read_file(path.as_ref())?;
    let (h, _) = parse_header(&bytes)?;
    match h.dtype {
        DType::UInt8 => Ok(MaskVolume::decode(&bytes, MaskRole::Prediction)?.to_probs()),
        DType::Float32 => ProbVolume::decode(&bytes),
        DType::Int16 => Err(Error::Format("expected a mask or probability volume, got int16".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(a: f64, b: f64, c: f64) -> Spacing {
        Spacing::new(a, b, c)
    }

    #[test]
    fn small_volume_round_trips() {
        let vals = vec![-1024, -50, 0, 130, 199, 400, 1000, 4095];
        let vol = CtVolume::new(Dims::new(2, 2, 2), sp(3.0, 0.7, 0.7), vals.clone()).unwrap();
        let back = CtVolume::decode(&vol.encode()).unwrap();
        assert_eq!(back.voxels(), &vals[..]);
        assert_eq!(back.spacing(), sp(3.0, 0.7, 0.7));
    }

    #[test]
    fn short_payload_is_a_size_mismatch() {
        let vol = CtVolume::filled(Dims::new(2, 2, 2), sp(3.0, 0.7, 0.7), 10).unwrap();
        let mut bytes = vol.encode();
        bytes.truncate(bytes.len() - 2);
        let err = CtVolume::decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
    }

    #[test]
    fn out_of_range_hu_is_clamped_on_read() {
        let mut bytes = header(Dims::new(1, 1, 2), sp(1.0, 1.0, 1.0), DType::Int16);
        bytes.extend_from_slice(&5000i16.to_le_bytes());
        bytes.extend_from_slice(&(-2000i16).to_le_bytes());
        let vol = CtVolume::decode(&bytes).unwrap();
        assert_eq!(vol.voxels(), &[4095, -1024]);
    }

    #[test]
    fn header_spacing_is_written_verbatim() {
        let vol = CtVolume::filled(Dims::new(1, 1, 1), sp(1.0, 0.5, 0.5), 0).unwrap();
        let text = String::from_utf8_lossy(&vol.encode()).to_string();
        assert!(text.contains("\nspacing 1.0 0.5 0.5\n"), "{text}");
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(CtVolume::new(Dims::new(0, 2, 2), sp(1.0, 1.0, 1.0), vec![]).is_err());
        assert!(MaskVolume::zeros(Dims::new(1, 0, 2), sp(1.0, 1.0, 1.0), MaskRole::GroundTruth).is_err());
    }

    #[test]
    fn non_positive_spacing_rejected() {
        let mut bytes = header(Dims::new(1, 1, 1), sp(1.0, 1.0, 1.0), DType::Int16);
        bytes.extend_from_slice(&0i16.to_le_bytes());
        let text = String::from_utf8(bytes.clone()).unwrap().replace("spacing 1.0", "spacing 0.0");
        assert!(CtVolume::decode(text.as_bytes()).is_err());
        assert!(CtVolume::filled(Dims::new(1, 1, 1), sp(1.0, -0.5, 1.0), 0).is_err());
    }

    #[test]
    fn all_zero_mask_round_trips() {
        let m = MaskVolume::zeros(Dims::new(3, 4, 5), sp(2.5, 0.6, 0.6), MaskRole::GroundTruth).unwrap();
        assert_eq!(MaskVolume::decode(&m.encode(), MaskRole::GroundTruth).unwrap(), m);
    }

    #[test]
    fn mask_value_two_rejected() {
        let mut bytes = header(Dims::new(1, 1, 3), sp(1.0, 1.0, 1.0), DType::UInt8);
        bytes.extend_from_slice(&[0, 2, 1]);
        assert!(matches!(MaskVolume::decode(&bytes, MaskRole::GroundTruth), Err(Error::Invalid(_))));
    }

    #[test]
    fn mask_payload_must_match_declared_shape() {
        let mut bytes = header(Dims::new(1, 2, 2), sp(1.0, 1.0, 1.0), DType::UInt8);
        bytes.extend_from_slice(&[0, 1, 0]);
        assert!(matches!(MaskVolume::decode(&bytes, MaskRole::GroundTruth), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_dtype_rejected() {
        let m = MaskVolume::zeros(Dims::new(1, 1, 2), sp(1.0, 1.0, 1.0), MaskRole::GroundTruth).unwrap();
        assert!(CtVolume::decode(&m.encode()).is_err());
    }

    #[test]
    fn prediction_reader_accepts_masks_and_probs() {
        let dir = std::env::temp_dir().join(format!("cacvol-pred-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let m = MaskVolume::new(Dims::new(1, 1, 2), sp(1.0, 1.0, 1.0), vec![0, 1], MaskRole::Prediction).unwrap();
        write_mask(&m, dir.join("m.cacvol")).unwrap();
        write_probs(&m.to_probs(), dir.join("p.cacvol")).unwrap();
        assert_eq!(read_prediction(dir.join("m.cacvol")).unwrap().probs(), &[0.0, 1.0]);
        assert_eq!(read_prediction(dir.join("p.cacvol")).unwrap().probs(), &[0.0, 1.0]);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_volume("/nonexistent/x.cacvol"), Err(Error::Io { .. })));
    }
}
