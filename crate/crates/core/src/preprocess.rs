//! Slice resizing, random crops, 9-slice stacks and the 130 HU label floor.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::par::{self, Execution};
use crate::tensor::Tensor;
use crate::volume::{CtVolume, MaskVolume};

/// Side length every slice is resized to before cropping.
pub const CANVAS: usize = 512;
/// Number of adjacent slices in one network input.
pub const STACK_DEPTH: usize = 9;
/// Labels on pixels below this HU value are cleared.
pub const LABEL_HU_FLOOR: i16 = 130;
/// HU window mapped linearly onto [0, 1].
pub const NORM_WINDOW: (f64, f64) = (-1000.0, 3000.0);

/// Row-major 2D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

pub type Image = Grid<f64>;
pub type LabelMap = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(shape_err!("grid dims must be positive, got {rows}x{cols}"));
        }
        if data.len() != rows * cols {
            return Err(shape_err!("{rows}x{cols} grid given {} values", data.len()));
        }
        Ok(Grid { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Result<Self> {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> T) -> Result<Self> {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Sub-window `[row0, row0+h) × [col0, col0+w)`.
    pub fn window(&self, row0: usize, col0: usize, h: usize, w: usize) -> Result<Self> {
        if row0 + h > self.rows || col0 + w > self.cols {
            return Err(invalid!(
                "window {h}x{w} at ({row0},{col0}) exceeds {}x{} grid",
                self.rows,
                self.cols
            ));
        }
        Self::from_fn(h, w, |r, c| self.get(row0 + r, col0 + c))
    }

    fn same_shape<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape_err!(
                "{}x{} vs {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        Ok(())
    }
}

/// Corner-aligned source coordinate of output index `i`.
fn src_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        0.0
    } else {
        (i * (n_in - 1)) as f64 / (n_out - 1) as f64
    }
}

fn check_out(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("output dims must be positive, got {out_h}x{out_w}"));
    }
    Ok(())
}

/// Bilinear resize with corner-aligned sampling.
pub fn resize_slice(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    check_out(out_h, out_w)?;
    if (out_h, out_w) == (img.rows, img.cols) {
        return Ok(img.clone());
    }
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|j| {
            let x = src_coord(j, img.cols, out_w);
            let x0 = (x.floor() as usize).min(img.cols - 1);
            (x0, (x0 + 1).min(img.cols - 1), x - x0 as f64)
        })
        .collect();
    Image::from_fn(out_h, out_w, |i, j| {
        let y = src_coord(i, img.rows, out_h);
        let y0 = (y.floor() as usize).min(img.rows - 1);
        let (y1, fy) = ((y0 + 1).min(img.rows - 1), y - y0 as f64);
        let (x0, x1, fx) = xs[j];
        let top = lerp(img.get(y0, x0), img.get(y0, x1), fx);
        let bottom = lerp(img.get(y1, x0), img.get(y1, x1), fx);
        lerp(top, bottom, fy)
    })
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

/// Nearest-neighbour resize with corner-aligned sampling; keeps labels binary.
pub fn resize_nearest(label: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    check_out(out_h, out_w)?;
    LabelMap::from_fn(out_h, out_w, |i, j| {
        let r = src_coord(i, label.rows, out_h).round() as usize;
        let c = src_coord(j, label.cols, out_w).round() as usize;
        label.get(r.min(label.rows - 1), c.min(label.cols - 1))
    })
}

/// Square crop window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub row0: usize,
    pub col0: usize,
    pub side: usize,
}

impl CropSpec {
    /// The whole `canvas × canvas` image; cropping with it is the identity.
    pub fn full(canvas: usize) -> Self {
        CropSpec { row0: 0, col0: 0, side: canvas }
    }

    /// Largest crop side on a canvas (256 on the 512 canvas).
    pub fn max_side(canvas: usize) -> usize {
        (canvas / 2).max(1)
    }

    /// Smallest sampled crop side (128 on the 512 canvas).
    pub fn min_side(canvas: usize) -> usize {
        (canvas / 4).max(1)
    }

    /// Side uniform in `[min_side, max_side]`, position uniform over all
    /// windows that fit.
    pub fn sample<R: Rng + ?Sized>(canvas: usize, rng: &mut R) -> Self {
        let side = rng.random_range(Self::min_side(canvas)..=Self::max_side(canvas));
        let row0 = rng.random_range(0..=canvas - side);
        let col0 = rng.random_range(0..=canvas - side);
        CropSpec { row0, col0, side }
    }

    pub fn validate(&self, canvas: usize) -> Result<()> {
        if self.side == 0 || self.row0 + self.side > canvas || self.col0 + self.side > canvas {
            return Err(invalid!("crop {self:?} does not fit a {canvas}x{canvas} image"));
        }
        if self.side > Self::max_side(canvas) && *self != Self::full(canvas) {
            return Err(invalid!("crop side {} exceeds {}", self.side, Self::max_side(canvas)));
        }
        Ok(())
    }
}

fn square_side<T>(g: &Grid<T>) -> Result<usize> {
    if g.rows != g.cols {
        return Err(shape_err!("crop input must be square, got {}x{}", g.rows, g.cols));
    }
    Ok(g.rows)
}

/// Crops the window and bilinearly resizes it back to the input size.
pub fn random_crop_resize(img: &Image, spec: CropSpec) -> Result<Image> {
    let n = square_side(img)?;
    spec.validate(n)?;
    let w = img.window(spec.row0, spec.col0, spec.side, spec.side)?;
    resize_slice(&w, n, n)
}

/// Label counterpart of [`random_crop_resize`] (nearest neighbour).
pub fn crop_resize_label(label: &LabelMap, spec: CropSpec) -> Result<LabelMap> {
    let n = square_side(label)?;
    spec.validate(n)?;
    let w = label.window(spec.row0, spec.col0, spec.side, spec.side)?;
    resize_nearest(&w, n, n)
}

/// Linear map of `[-1000, 3000]` HU onto `[0, 1]`, clipped.
pub fn normalize_hu(hu: f64) -> f64 {
    let (lo, hi) = NORM_WINDOW;
    ((hu - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Clears every label whose pixel is below 130 HU.
pub fn apply_hu_label_floor(label: &LabelMap, hu: &Grid<i16>) -> Result<LabelMap> {
    label.same_shape(hu)?;
    let data = label
        .data
        .iter()
        .zip(&hu.data)
        .map(|(&l, &h)| (l != 0 && h >= LABEL_HU_FLOOR) as u8)
        .collect();
    LabelMap::new(label.rows, label.cols, data)
}

/// Source slices `center-4 ..= center+4`, clamped to the volume.
pub fn stack_indices(center: usize, n_slices: usize) -> [usize; STACK_DEPTH] {
    let half = (STACK_DEPTH / 2) as isize;
    let mut out = [0; STACK_DEPTH];
    for (k, slot) in out.iter_mut().enumerate() {
        let s = center as isize + k as isize - half;
        *slot = s.clamp(0, n_slices as isize - 1) as usize;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StackOptions {
    /// Side length of the resized slices.
    pub canvas: usize,
    pub crop: Option<CropSpec>,
    pub exec: Execution,
}

impl Default for StackOptions {
    fn default() -> Self {
        StackOptions { canvas: CANVAS, crop: None, exec: Execution::default() }
    }
}

/// Nine normalized slices centred on `center_index` and that slice's label.
#[derive(Clone, Debug, PartialEq)]
pub struct Stack2_5D {
    /// `[9][H][W]`, row-major.
    pub channels: Vec<f64>,
    pub label: LabelMap,
    pub center_index: usize,
    pub source_slices: [usize; STACK_DEPTH],
}

impl Stack2_5D {
    pub fn height(&self) -> usize {
        self.label.rows
    }

    pub fn width(&self) -> usize {
        self.label.cols
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.channels[k * n..(k + 1) * n]
    }

    /// `[1, 9, H, W]` network input.
    pub fn input_tensor(&self) -> Tensor {
        Tensor::new(&[1, STACK_DEPTH, self.height(), self.width()], self.channels.clone())
            .expect("stack channels match their label shape")
    }
}

fn hu_slice(vol: &CtVolume, s: usize) -> Grid<i16> {
    let d = vol.dims();
    Grid { rows: d.rows, cols: d.cols, data: vol.slice(s).to_vec() }
}

/// Builds the 2.5D input for slice `center`.
///
/// All nine channels and the label share one resize and one crop. The label
/// floor is applied at native resolution, before any resampling.
pub fn make_stack(vol: &CtVolume, labels: &MaskVolume, center: usize, opts: &StackOptions) -> Result<Stack2_5D> {
    let d = vol.dims();
    if labels.dims() != d {
        return Err(shape_err!("mask dims {} differ from volume dims {d}", labels.dims()));
    }
    if center >= d.slices {
        return Err(invalid!("center slice {center} out of range 0..{}", d.slices));
    }
    if let Some(spec) = opts.crop {
        spec.validate(opts.canvas)?;
    }
    let n = opts.canvas;
    let source_slices = stack_indices(center, d.slices);

    let planes = par::map(opts.exec, &source_slices, |&s| -> Result<Vec<f64>> {
        let img = Image::new(d.rows, d.cols, vol.slice(s).iter().map(|&h| normalize_hu(h as f64)).collect())?;
        let mut img = resize_slice(&img, n, n)?;
        if let Some(spec) = opts.crop {
            img = random_crop_resize(&img, spec)?;
        }
        Ok(img.into_data())
    });
    let mut channels = Vec::with_capacity(STACK_DEPTH * n * n);
    for p in planes {
        channels.extend(p?);
    }

    let raw = LabelMap::new(d.rows, d.cols, labels.slice(center).to_vec())?;
    let floored = apply_hu_label_floor(&raw, &hu_slice(vol, center))?;
    let mut label = resize_nearest(&floored, n, n)?;
    if let Some(spec) = opts.crop {
        label = crop_resize_label(&label, spec)?;
    }
    Ok(Stack2_5D { channels, label, center_index: center, source_slices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, MaskRole, Spacing};

    #[test]
    fn bilinear_middle_column() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = resize_slice(&img, 2, 3).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Image::filled(256, 256, 7.0).unwrap();
        let out = resize_slice(&img, 512, 512).unwrap();
        assert!(out.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn normalize_endpoints() {
        assert_eq!(normalize_hu(-1000.0), 0.0);
        assert_eq!(normalize_hu(3000.0), 1.0);
        assert!((normalize_hu(130.0) - 0.2825).abs() < 1e-15);
        assert_eq!(normalize_hu(-1024.0), 0.0);
        assert_eq!(normalize_hu(4095.0), 1.0);
    }

    #[test]
    fn label_floor_boundary() {
        let label = LabelMap::new(1, 3, vec![1, 1, 0]).unwrap();
        let hu = Grid::new(1, 3, vec![129, 130, 500]).unwrap();
        assert_eq!(apply_hu_label_floor(&label, &hu).unwrap().data(), &[0, 1, 0]);
        let wrong = Grid::new(3, 1, vec![0i16; 3]).unwrap();
        assert!(apply_hu_label_floor(&label, &wrong).is_err());
    }

    #[test]
    fn crop_validation() {
        assert!(CropSpec::full(512).validate(512).is_ok());
        assert!(CropSpec { row0: 0, col0: 0, side: 300 }.validate(512).is_err());
        assert!(CropSpec { row0: 300, col0: 0, side: 256 }.validate(512).is_err());
        assert!(CropSpec { row0: 256, col0: 256, side: 256 }.validate(512).is_ok());
    }

    #[test]
    fn stack_indices_clamp() {
        assert_eq!(stack_indices(0, 20), [0, 0, 0, 0, 0, 1, 2, 3, 4]);
        assert_eq!(stack_indices(10, 20), [6, 7, 8, 9, 10, 11, 12, 13, 14]);
        assert_eq!(stack_indices(19, 20), [15, 16, 17, 18, 19, 19, 19, 19, 19]);
        assert_eq!(stack_indices(0, 1), [0; 9]);
    }

    #[test]
    fn make_stack_rejects_bad_center() {
        let dims = Dims::new(3, 4, 4);
        let sp = Spacing::new(1.0, 1.0, 1.0);
        let vol = CtVolume::filled(dims, sp, 0).unwrap();
        let mask = MaskVolume::zeros(dims, sp, MaskRole::GroundTruth).unwrap();
        let opts = StackOptions { canvas: 8, ..Default::default() };
        assert!(make_stack(&vol, &mask, 3, &opts).is_err());
        let s = make_stack(&vol, &mask, 2, &opts).unwrap();
        assert_eq!(s.input_tensor().shape(), &[1, 9, 8, 8]);
    }
}
