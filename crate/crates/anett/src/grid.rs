//! Dense 2-D grid containers shared by every other module: square images on
//! the physical domain [-1,1]^2 and sinograms (angles x detector bins), plus
//! elementwise algebra, quality metrics and the `.grd` file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

/// PSNR value reported when the mean squared error is exactly zero.
pub const PSNR_CAP_DB: f64 = 300.0;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("bad magic: not a grd file")]
    BadMagic,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("dtype mismatch: expected f32, got {0}")]
    DtypeMismatch(String),
    #[error("truncated payload: expected {expected} values, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("wrong grid kind: expected {expected}, got {got}")]
    WrongKind { expected: String, got: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Common view over the two grid kinds so the elementwise operations are
/// written once. Implementors own a flat row-major `Vec<f64>`.
pub trait Grid: Sized {
    fn values(&self) -> &[f64];
    fn values_mut(&mut self) -> &mut [f64];
    /// (rows, cols)
    fn shape(&self) -> (usize, usize);
    /// New grid with the same shape/metadata as `like` but the given values.
    fn same_shape(like: &Self, values: Vec<f64>) -> Self;
}

/// Square pixel grid on [-1,1]^2, row-major, pixel centers at
/// `-1 + (i + 1/2) * 2/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(side: usize) -> Self {
        assert!(side >= 8, "image side must be >= 8");
        Image {
            side,
            data: vec![0.0; side * side],
        }
    }

    pub fn from_values(side: usize, data: Vec<f64>) -> Result<Self, GridError> {
        if side < 8 {
            return Err(GridError::Invalid(format!("side {side} < 8")));
        }
        if data.len() != side * side {
            return Err(GridError::Invalid(format!(
                "expected {} values, got {}",
                side * side,
                data.len()
            )));
        }
        Ok(Image { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixel_size(&self) -> f64 {
        2.0 / self.side as f64
    }

    /// Physical center of pixel (row, col).
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let h = self.pixel_size();
        (-1.0 + (col as f64 + 0.5) * h, -1.0 + (row as f64 + 0.5) * h)
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.side + col]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        &mut self.data[row * self.side + col]
    }
}

impl Grid for Image {
    fn values(&self) -> &[f64] {
        &self.data
    }
    fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    fn shape(&self) -> (usize, usize) {
        (self.side, self.side)
    }
    fn same_shape(like: &Self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), like.data.len());
        Image {
            side: like.side,
            data: values,
        }
    }
}

/// Radon data: one row per projection angle, one column per detector bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    n_angles: usize,
    n_detectors: usize,
    data: Vec<f64>,
    detector_extent: (f64, f64),
}

pub const DEFAULT_DETECTOR_EXTENT: (f64, f64) = (-1.5, 1.5);

impl Sinogram {
    pub fn zeros(n_angles: usize, n_detectors: usize) -> Self {
        Sinogram {
            n_angles,
            n_detectors,
            data: vec![0.0; n_angles * n_detectors],
            detector_extent: DEFAULT_DETECTOR_EXTENT,
        }
    }

    pub fn from_values(
        n_angles: usize,
        n_detectors: usize,
        data: Vec<f64>,
    ) -> Result<Self, GridError> {
        if data.len() != n_angles * n_detectors {
            return Err(GridError::Invalid(format!(
                "expected {} values, got {}",
                n_angles * n_detectors,
                data.len()
            )));
        }
        Ok(Sinogram {
            n_angles,
            n_detectors,
            data,
            detector_extent: DEFAULT_DETECTOR_EXTENT,
        })
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }
    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }
    pub fn detector_extent(&self) -> (f64, f64) {
        self.detector_extent
    }

    #[inline]
    pub fn at(&self, angle: usize, det: usize) -> f64 {
        self.data[angle * self.n_detectors + det]
    }

    #[inline]
    pub fn at_mut(&mut self, angle: usize, det: usize) -> &mut f64 {
        &mut self.data[angle * self.n_detectors + det]
    }

    pub fn row(&self, angle: usize) -> &[f64] {
        &self.data[angle * self.n_detectors..(angle + 1) * self.n_detectors]
    }

    pub fn row_mut(&mut self, angle: usize) -> &mut [f64] {
        &mut self.data[angle * self.n_detectors..(angle + 1) * self.n_detectors]
    }
}

impl Grid for Sinogram {
    fn values(&self) -> &[f64] {
        &self.data
    }
    fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    fn shape(&self) -> (usize, usize) {
        (self.n_angles, self.n_detectors)
    }
    fn same_shape(like: &Self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), like.data.len());
        Sinogram {
            n_angles: like.n_angles,
            n_detectors: like.n_detectors,
            data: values,
            detector_extent: like.detector_extent,
        }
    }
}

fn check_same_shape<G: Grid>(x: &G, y: &G) -> Result<(), GridError> {
    if x.shape() != y.shape() {
        return Err(GridError::ShapeMismatch {
            expected: x.shape(),
            got: y.shape(),
        });
    }
    Ok(())
}

/// a*x + y, elementwise.
pub fn axpy<G: Grid>(a: f64, x: &G, y: &G) -> Result<G, GridError> {
    check_same_shape(x, y)?;
    let values = x
        .values()
        .iter()
        .zip(y.values())
        .map(|(&xv, &yv)| a * xv + yv)
        .collect();
    Ok(G::same_shape(x, values))
}

/// Euclidean norm of the flattened values.
pub fn l2_norm<G: Grid>(x: &G) -> f64 {
    x.values().iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot<G: Grid>(x: &G, y: &G) -> Result<f64, GridError> {
    check_same_shape(x, y)?;
    Ok(x.values()
        .iter()
        .zip(y.values())
        .map(|(a, b)| a * b)
        .sum())
}

pub fn mean<G: Grid>(x: &G) -> f64 {
    let n = x.values().len();
    assert!(n > 0, "mean of empty grid");
    x.values().iter().sum::<f64>() / n as f64
}

pub fn mse<G: Grid>(x: &G, reference: &G) -> Result<f64, GridError> {
    check_same_shape(x, reference)?;
    let n = x.values().len() as f64;
    Ok(x.values()
        .iter()
        .zip(reference.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB; returns [`PSNR_CAP_DB`] for identical inputs.
pub fn psnr(x: &Image, reference: &Image, peak: f64) -> Result<f64, GridError> {
    assert!(peak > 0.0, "psnr peak must be positive");
    let e = mse(x, reference)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

// ---------------------------------------------------------------------------
// .grd file format: ASCII header followed by a raw little-endian f32 payload.
//
//   grd 1
//   kind image|sinogram
//   dtype f32
//   shape <rows> <cols>
//   extent <lo> <hi>
//   data
//   <rows*cols little-endian f32>
// ---------------------------------------------------------------------------

const MAGIC: &str = "grd 1";

fn write_grd(
    w: &mut impl Write,
    kind: &str,
    shape: (usize, usize),
    extent: (f64, f64),
    values: &[f64],
) -> Result<(), GridError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GridError::Invalid("non-finite value in grid".into()));
    }
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "kind {kind}")?;
    writeln!(w, "dtype f32")?;
    writeln!(w, "shape {} {}", shape.0, shape.1)?;
    writeln!(w, "extent {} {}", extent.0, extent.1)?;
    writeln!(w, "data")?;
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

struct GrdFile {
    kind: String,
    shape: (usize, usize),
    #[allow(dead_code)]
    extent: (f64, f64),
    values: Vec<f64>,
}

fn read_line(r: &mut impl Read) -> Result<String, GridError> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 || byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 256 {
            return Err(GridError::BadHeader("header line too long".into()));
        }
    }
    String::from_utf8(line).map_err(|_| GridError::BadHeader("non-utf8 header".into()))
}

fn header_field<'a>(line: &'a str, key: &str) -> Result<&'a str, GridError> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| GridError::BadHeader(format!("expected `{key} ...`, got `{line}`")))
}

fn read_grd(r: &mut impl Read) -> Result<GrdFile, GridError> {
    if read_line(r)? != MAGIC {
        return Err(GridError::BadMagic);
    }
    let kind = header_field(&read_line(r)?, "kind")?.to_string();
    let dtype = header_field(&read_line(r)?, "dtype")?.to_string();
    if dtype != "f32" {
        return Err(GridError::DtypeMismatch(dtype));
    }
    let shape_line = read_line(r)?;
    let mut it = header_field(&shape_line, "shape")?.split_whitespace();
    let parse = |s: Option<&str>| -> Result<usize, GridError> {
        s.and_then(|t| t.parse().ok())
            .ok_or_else(|| GridError::BadHeader(format!("bad shape line `{shape_line}`")))
    };
    let rows = parse(it.next())?;
    let cols = parse(it.next())?;
    let extent_line = read_line(r)?;
    let mut it = header_field(&extent_line, "extent")?.split_whitespace();
    let parse_f = |s: Option<&str>| -> Result<f64, GridError> {
        s.and_then(|t| t.parse().ok())
            .ok_or_else(|| GridError::BadHeader(format!("bad extent line `{extent_line}`")))
    };
    let extent = (parse_f(it.next())?, parse_f(it.next())?);
    if read_line(r)? != "data" {
        return Err(GridError::BadHeader("missing `data` marker".into()));
    }
    let expected = rows * cols;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(GridError::Truncated {
            expected,
            got: payload.len() / 4,
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(GrdFile {
        kind,
        shape: (rows, cols),
        extent,
        values,
    })
}

pub fn write_image(img: &Image, path: &Path) -> Result<(), GridError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grd(&mut w, "image", img.shape(), (-1.0, 1.0), img.values())
}

pub fn read_image(path: &Path) -> Result<Image, GridError> {
    let f = read_grd(&mut BufReader::new(File::open(path)?))?;
    if f.kind != "image" {
        return Err(GridError::WrongKind {
            expected: "image".into(),
            got: f.kind,
        });
    }
    if f.shape.0 != f.shape.1 {
        return Err(GridError::BadHeader(format!(
            "image must be square, got {}x{}",
            f.shape.0, f.shape.1
        )));
    }
    Image::from_values(f.shape.0, f.values)
}

pub fn write_sinogram(sino: &Sinogram, path: &Path) -> Result<(), GridError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grd(
        &mut w,
        "sinogram",
        sino.shape(),
        sino.detector_extent,
        sino.values(),
    )
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram, GridError> {
    let f = read_grd(&mut BufReader::new(File::open(path)?))?;
    if f.kind != "sinogram" {
        return Err(GridError::WrongKind {
            expected: "sinogram".into(),
            got: f.kind,
        });
    }
    let mut s = Sinogram::from_values(f.shape.0, f.shape.1, f.values)?;
    s.detector_extent = f.extent;
    Ok(s)
}

/// 16-bit binary PGM export for visual inspection. Values are clamped to
/// [0, peak] and linearly quantized; PGM payload is big-endian per the spec
/// of the format.
pub fn write_pgm(img: &Image, peak: f64, path: &Path) -> Result<(), GridError> {
    assert!(peak > 0.0);
    let (rows, cols) = img.shape();
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{cols} {rows}\n65535\n")?;
    for &v in img.values() {
        let q = (v.clamp(0.0, peak) / peak * 65535.0).round() as u16;
        w.write_all(&q.to_be_bytes())?;
    }
    Ok(())
}
