//! ENVI-style hyperspectral cubes: a `key = value` text header plus a raw
//! little-endian payload.
//!
//! In memory a [`HyperCube`] always stores its values as `f32` in
//! band-interleaved-by-pixel order, so the logical element `(l, s, b)` lives
//! at `(l * samples + s) * bands + b`. The on-disk interleave only changes
//! the order in which elements are written. With `L = lines`, `S = samples`,
//! `B = bands`, the element index of `(l, s, b)` in the payload is:
//!
//! | interleave | payload element index        | fastest → slowest |
//! |------------|------------------------------|-------------------|
//! | BSQ        | `(b * L + l) * S + s`        | sample, line, band |
//! | BIL        | `(l * B + b) * S + s`        | sample, band, line |
//! | BIP        | `(l * S + s) * B + b`        | band, sample, line |
//!
//! Each element occupies 2 bytes (`data type = 12`, unsigned 16-bit) or
//! 4 bytes (`data type = 4`, IEEE-754 single), always little-endian
//! (`byte order = 0`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CubeError {
    #[error("header is missing required field `{0}`")]
    MissingField(String),
    #[error("header field `{0}` has a malformed value")]
    MalformedValue(String),
    #[error("header lists {found} wavelengths but declares {expected} bands")]
    WavelengthCountMismatch { expected: usize, found: usize },
    #[error("payload holds {found} bytes, header requires {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("non-finite value at payload element {0}")]
    NonFiniteValue(usize),
    #[error("band {band} is out of range 1..={bands}")]
    BandOutOfRange { band: usize, bands: usize },
    #[error("cube data holds {found} values, dimensions require {expected}")]
    DataLength { expected: usize, found: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CubeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interleave {
    Bsq,
    Bil,
    Bip,
}

impl Interleave {
    pub const ALL: [Interleave; 3] = [Interleave::Bsq, Interleave::Bil, Interleave::Bip];

    fn as_str(self) -> &'static str {
        match self {
            Interleave::Bsq => "bsq",
            Interleave::Bil => "bil",
            Interleave::Bip => "bip",
        }
    }

    /// Payload element index of logical element `(l, s, b)`.
    #[inline]
    pub fn payload_index(self, l: usize, s: usize, b: usize, dims: Dims) -> usize {
        match self {
            Interleave::Bsq => (b * dims.lines + l) * dims.samples + s,
            Interleave::Bil => (l * dims.bands + b) * dims.samples + s,
            Interleave::Bip => (l * dims.samples + s) * dims.bands + b,
        }
    }
}

impl fmt::Display for Interleave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Interleave {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bsq" => Ok(Interleave::Bsq),
            "bil" => Ok(Interleave::Bil),
            "bip" => Ok(Interleave::Bip),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataType {
    U16,
    F32,
}

impl DataType {
    pub fn envi_code(self) -> u32 {
        match self {
            DataType::U16 => 12,
            DataType::F32 => 4,
        }
    }

    pub fn from_envi_code(code: u32) -> Option<Self> {
        match code {
            12 => Some(DataType::U16),
            4 => Some(DataType::F32),
            _ => None,
        }
    }

    pub fn element_size(self) -> usize {
        match self {
            DataType::U16 => 2,
            DataType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ByteOrder {
    #[default]
    LittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub lines: usize,
    pub samples: usize,
    pub bands: usize,
}

impl Dims {
    pub fn len(&self) -> usize {
        self.lines * self.samples * self.bands
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub samples: usize,
    pub lines: usize,
    pub bands: usize,
    pub interleave: Interleave,
    pub data_type: DataType,
    #[serde(default)]
    pub byte_order: ByteOrder,
    /// Band centre wavelengths in nanometres, one per band.
    #[serde(default)]
    pub wavelengths: Option<Vec<f64>>,
}

impl CubeHeader {
    pub fn new(lines: usize, samples: usize, bands: usize) -> Self {
        CubeHeader {
            samples,
            lines,
            bands,
            interleave: Interleave::Bsq,
            data_type: DataType::F32,
            byte_order: ByteOrder::LittleEndian,
            wavelengths: None,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            lines: self.lines,
            samples: self.samples,
            bands: self.bands,
        }
    }

    pub fn payload_len(&self) -> usize {
        self.dims().len() * self.data_type.element_size()
    }

    /// Checks dimension positivity and the wavelength table.
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("samples", self.samples), ("lines", self.lines), ("bands", self.bands)] {
            if v == 0 {
                return Err(CubeError::MalformedValue(key.into()));
            }
        }
        if let Some(wl) = &self.wavelengths {
            if wl.len() != self.bands {
                return Err(CubeError::WavelengthCountMismatch {
                    expected: self.bands,
                    found: wl.len(),
                });
            }
            if wl.iter().any(|w| !w.is_finite()) || wl.windows(2).any(|w| w[1] <= w[0]) {
                return Err(CubeError::MalformedValue("wavelength".into()));
            }
        }
        Ok(())
    }

    /// Wavelength of a 1-based band index.
    pub fn wavelength_of(&self, band: usize) -> Result<f64> {
        self.check_band(band)?;
        self.wavelengths
            .as_ref()
            .map(|wl| wl[band - 1])
            .ok_or_else(|| CubeError::MissingField("wavelength".into()))
    }

    pub fn check_band(&self, band: usize) -> Result<()> {
        if band == 0 || band > self.bands {
            return Err(CubeError::BandOutOfRange {
                band,
                bands: self.bands,
            });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("ENVI\n");
        out.push_str(&format!("samples = {}\n", self.samples));
        out.push_str(&format!("lines = {}\n", self.lines));
        out.push_str(&format!("bands = {}\n", self.bands));
        out.push_str("header offset = 0\n");
        out.push_str(&format!("data type = {}\n", self.data_type.envi_code()));
        out.push_str(&format!("interleave = {}\n", self.interleave));
        out.push_str("byte order = 0\n");
        if let Some(wl) = &self.wavelengths {
            out.push_str("wavelength units = Nanometers\n");
            out.push_str("wavelength = {\n");
            for (i, chunk) in wl.chunks(8).enumerate() {
                let line: Vec<String> = chunk.iter().map(|w| format!("{w}")).collect();
                out.push_str("  ");
                out.push_str(&line.join(", "));
                if (i + 1) * 8 < wl.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str("}\n");
        }
        out
    }
}

fn normalize_key(key: &str) -> String {
    key.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_ascii_lowercase()
}

/// Splits header text into `(key, value)` pairs, joining brace-delimited
/// values that span several lines. Lines without `=` are skipped.
fn header_entries(text: &str) -> Vec<(String, String)> {
    let mut entries = Vec::new();
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let mut value = value.trim().to_string();
        if value.starts_with('{') {
            while !value.contains('}') {
                match lines.next() {
                    Some(more) => {
                        value.push(' ');
                        value.push_str(more.trim());
                    }
                    None => break,
                }
            }
        }
        entries.push((normalize_key(key), value));
    }
    entries
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .trim()
        .parse::<usize>()
        .map_err(|_| CubeError::MalformedValue(key.into()))
}

fn parse_wavelengths(value: &str) -> Result<Vec<f64>> {
    let inner = value
        .trim()
        .strip_prefix('{')
        .and_then(|v| v.strip_suffix('}'))
        .ok_or_else(|| CubeError::MalformedValue("wavelength".into()))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| CubeError::MalformedValue("wavelength".into()))
        })
        .collect()
}

/// Parses an ENVI-style header. Keys are matched case-insensitively with
/// internal whitespace collapsed; unknown keys are ignored.
pub fn parse_header(text: &str) -> Result<CubeHeader> {
    let mut samples = None;
    let mut lines = None;
    let mut bands = None;
    let mut interleave = None;
    let mut data_type = None;
    let mut wavelengths = None;

    for (key, value) in header_entries(text) {
        match key.as_str() {
            "samples" => samples = Some(parse_usize("samples", &value)?),
            "lines" => lines = Some(parse_usize("lines", &value)?),
            "bands" => bands = Some(parse_usize("bands", &value)?),
            "interleave" => {
                interleave = Some(
                    value
                        .parse::<Interleave>()
                        .map_err(|_| CubeError::MalformedValue("interleave".into()))?,
                )
            }
            "data type" => {
                let code = parse_usize("data type", &value)?;
                data_type = Some(
                    DataType::from_envi_code(code as u32)
                        .ok_or_else(|| CubeError::MalformedValue("data type".into()))?,
                )
            }
            "byte order" => {
                if parse_usize("byte order", &value)? != 0 {
                    return Err(CubeError::MalformedValue("byte order".into()));
                }
            }
            "header offset" => {
                if parse_usize("header offset", &value)? != 0 {
                    return Err(CubeError::MalformedValue("header offset".into()));
                }
            }
            "wavelength" => wavelengths = Some(parse_wavelengths(&value)?),
            _ => {}
        }
    }

    let header = CubeHeader {
        samples: samples.ok_or_else(|| CubeError::MissingField("samples".into()))?,
        lines: lines.ok_or_else(|| CubeError::MissingField("lines".into()))?,
        bands: bands.ok_or_else(|| CubeError::MissingField("bands".into()))?,
        interleave: interleave.ok_or_else(|| CubeError::MissingField("interleave".into()))?,
        data_type: data_type.ok_or_else(|| CubeError::MissingField("data type".into()))?,
        byte_order: ByteOrder::LittleEndian,
        wavelengths,
    };
    header.validate()?;
    Ok(header)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    pub header: CubeHeader,
    data: Vec<f32>,
}

impl HyperCube {
    /// Wraps BIP-ordered data. Fails if the length disagrees with the header
    /// or any value is not finite.
    pub fn new(header: CubeHeader, data: Vec<f32>) -> Result<Self> {
        header.validate()?;
        let expected = header.dims().len();
        if data.len() != expected {
            return Err(CubeError::DataLength {
                expected,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CubeError::NonFiniteValue(i));
        }
        Ok(HyperCube { header, data })
    }

    pub fn filled(header: CubeHeader, value: f32) -> Result<Self> {
        let n = header.dims().len();
        HyperCube::new(header, vec![value; n])
    }

    /// Builds a cube from a function of `(line, sample, band)`, 0-based.
    pub fn from_fn(header: CubeHeader, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let d = header.dims();
        let mut data = Vec::with_capacity(d.len());
        for l in 0..d.lines {
            for s in 0..d.samples {
                for b in 0..d.bands {
                    data.push(f(l, s, b));
                }
            }
        }
        HyperCube::new(header, data)
    }

    pub fn dims(&self) -> Dims {
        self.header.dims()
    }

    #[inline]
    pub fn index(&self, l: usize, s: usize, b: usize) -> usize {
        (l * self.header.samples + s) * self.header.bands + b
    }

    #[inline]
    pub fn get(&self, l: usize, s: usize, b: usize) -> f32 {
        self.data[self.index(l, s, b)]
    }

    /// The spectrum at one pixel.
    #[inline]
    pub fn pixel(&self, l: usize, s: usize) -> &[f32] {
        let start = self.index(l, s, 0);
        &self.data[start..start + self.header.bands]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn wavelength_of(&self, band: usize) -> Result<f64> {
        self.header.wavelength_of(band)
    }
}

/// A single 2-D image, row-major `lines × samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub lines: usize,
    pub samples: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(lines: usize, samples: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), lines * samples, "plane data length");
        Plane { lines, samples, data }
    }

    pub fn filled(lines: usize, samples: usize, value: f32) -> Self {
        Plane::new(lines, samples, vec![value; lines * samples])
    }

    #[inline]
    pub fn get(&self, l: usize, s: usize) -> f32 {
        self.data[l * self.samples + s]
    }

    #[inline]
    pub fn set(&mut self, l: usize, s: usize, v: f32) {
        self.data[l * self.samples + s] = v;
    }
}

/// Decodes a payload laid out according to `header`.
pub fn read_cube(header: &CubeHeader, raw: &[u8]) -> Result<HyperCube> {
    header.validate()?;
    let expected = header.payload_len();
    if raw.len() != expected {
        return Err(CubeError::SizeMismatch {
            expected,
            found: raw.len(),
        });
    }
    let dims = header.dims();
    let values: Vec<f32> = match header.data_type {
        DataType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DataType::U16 => raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(CubeError::NonFiniteValue(i));
    }
    let data = if header.interleave == Interleave::Bip {
        values
    } else {
        let mut data = vec![0f32; dims.len()];
        let mut out = 0;
        for l in 0..dims.lines {
            for s in 0..dims.samples {
                for b in 0..dims.bands {
                    data[out] = values[header.interleave.payload_index(l, s, b, dims)];
                    out += 1;
                }
            }
        }
        data
    };
    Ok(HyperCube {
        header: header.clone(),
        data,
    })
}

/// Serializes a cube using its header's interleave and data type. `U16`
/// output rounds and saturates to `0..=65535`.
pub fn write_cube(cube: &HyperCube) -> (String, Vec<u8>) {
    let header = &cube.header;
    let dims = header.dims();
    let mut ordered = vec![0f32; dims.len()];
    for l in 0..dims.lines {
        for s in 0..dims.samples {
            for b in 0..dims.bands {
                ordered[header.interleave.payload_index(l, s, b, dims)] = cube.get(l, s, b);
            }
        }
    }
    let bytes = match header.data_type {
        DataType::F32 => ordered.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DataType::U16 => ordered
            .iter()
            .flat_map(|v| (v.round().clamp(0.0, u16::MAX as f32) as u16).to_le_bytes())
            .collect(),
    };
    (header.to_text(), bytes)
}

/// The image of one 1-based band.
pub fn band_slice(cube: &HyperCube, band: usize) -> Result<Plane> {
    cube.header.check_band(band)?;
    let d = cube.dims();
    let b = band - 1;
    let data = (0..d.lines * d.samples).map(|p| cube.data[p * d.bands + b]).collect();
    Ok(Plane::new(d.lines, d.samples, data))
}

/// Header and payload paths for a cube stored as `<stem>.hdr` + `<stem>.raw`.
pub fn cube_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("hdr"), stem.with_extension("raw"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CubeError + '_ {
    move |source| CubeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_cube(stem: &Path, cube: &HyperCube) -> Result<()> {
    let (hdr, raw) = cube_paths(stem);
    let (text, bytes) = write_cube(cube);
    fs::write(&hdr, text).map_err(io_err(&hdr))?;
    fs::write(&raw, bytes).map_err(io_err(&raw))?;
    Ok(())
}

/// Loads `<stem>.hdr` and `<stem>.raw`. `stem` may also name the header file.
pub fn load_cube(stem: &Path) -> Result<HyperCube> {
    let (hdr, raw) = cube_paths(stem);
    let text = fs::read_to_string(&hdr).map_err(io_err(&hdr))?;
    let header = parse_header(&text)?;
    let bytes = fs::read(&raw).map_err(io_err(&raw))?;
    read_cube(&header, &bytes)
}

/// Band-centre table of the 256-band InGaAs push-broom camera the toolkit
/// targets (862.9–1704.2 nm). Built by piecewise-linear interpolation
/// between the camera's known band/wavelength anchors and rounded to 0.1 nm;
/// the anchors are reproduced exactly.
pub fn nir_camera_wavelengths() -> Vec<f64> {
    const ANCHORS: [(usize, f64); 9] = [
        (1, 862.9),
        (60, 1064.8),
        (81, 1135.6),
        (90, 1165.8),
        (115, 1249.1),
        (220, 1590.4),
        (221, 1593.5),
        (230, 1622.1),
        (256, 1704.2),
    ];
    (1..=256)
        .map(|band| {
            let seg = ANCHORS
                .windows(2)
                .find(|w| band <= w[1].0)
                .expect("band within anchor table");
            let ((b0, w0), (b1, w1)) = (seg[0], seg[1]);
            let t = (band - b0) as f64 / (b1 - b0) as f64;
            ((w0 + t * (w1 - w0)) * 10.0).round() / 10.0
        })
        .collect()
}
