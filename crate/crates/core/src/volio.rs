//! Volumetric image I/O and intensity normalization.
//!
//! Two on-disk formats are supported:
//!
//! * single-file NIfTI-1 (`.nii`), a minimal subset: datatypes uint8, int16
//!   and float32, either byte order, 3-D or squeezable 4-D;
//! * a raw little-endian float32 payload (`.f32raw`) with a JSON sidecar
//!   (`.json`) carrying dims and spacing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NIFTI1_HEADER_SIZE: usize = 348;
pub const NIFTI1_VOX_OFFSET: usize = 352;
pub const NIFTI1_MAGIC: [u8; 4] = *b"n+1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Error)]
pub enum VolioError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sizeof_hdr: expected 348 in either byte order, found {0}")]
    SizeofHdr(i32),
    #[error("magic: expected \"n+1\\0\", found {0:?}")]
    Magic([u8; 4]),
    #[error("datatype: unsupported code {0} (supported: 2, 4, 16)")]
    Datatype(i16),
    #[error("dim: {0}")]
    Dim(String),
    #[error("pixdim: {0}")]
    Pixdim(String),
    #[error("vox_offset: {0}")]
    VoxOffset(String),
    #[error("truncated {field}: need {need} bytes, have {have}")]
    Truncated {
        field: &'static str,
        need: usize,
        have: usize,
    },
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("unrecognized volume extension for {0} (expected .nii or .f32raw)")]
    Extension(PathBuf),
    #[error("sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, VolioError>;

/// A 3-D scalar image stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolioError::Invalid(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolioError::Invalid(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(VolioError::Invalid(format!(
                "data length {} does not match dims {dims:?} ({n} voxels)",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolioError::Invalid(format!("non-finite value at voxel {i}")));
        }
        Ok(Self { dims, spacing, data })
    }

    /// Volume filled with a constant, 1 mm isotropic.
    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        let n = dims.iter().product();
        Self::new(dims, [1.0; 3], vec![value; n]).expect("filled volume is valid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Same geometry, new voxel values. Values are checked for finiteness.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, self.spacing, data)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ByteOrder {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    order: ByteOrder,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[at..at + N]);
        if self.order == ByteOrder::Big {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.arr(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.arr(at))
    }
}

/// The header fields this crate reads from a NIfTI-1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct Nifti1HeaderSubset {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
    pub big_endian: bool,
}

impl Nifti1HeaderSubset {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < NIFTI1_HEADER_SIZE {
            return Err(VolioError::Truncated {
                field: "header",
                need: NIFTI1_HEADER_SIZE,
                have: bytes.len(),
            });
        }
        let raw: [u8; 4] = bytes[0..4].try_into().unwrap();
        let order = if i32::from_le_bytes(raw) == 348 {
            ByteOrder::Little
        } else if i32::from_be_bytes(raw) == 348 {
            ByteOrder::Big
        } else {
            return Err(VolioError::SizeofHdr(i32::from_le_bytes(raw)));
        };
        let r = Reader { bytes, order };
        let magic: [u8; 4] = bytes[offsets::MAGIC..offsets::MAGIC + 4].try_into().unwrap();
        if magic != NIFTI1_MAGIC {
            return Err(VolioError::Magic(magic));
        }
        let mut dim = [0i16; 8];
        let mut pixdim = [0f32; 8];
        for i in 0..8 {
            dim[i] = r.i16(offsets::DIM + 2 * i);
            pixdim[i] = r.f32(offsets::PIXDIM + 4 * i);
        }
        Ok(Self {
            sizeof_hdr: i32::from_le_bytes(r.arr(offsets::SIZEOF_HDR)),
            dim,
            datatype: r.i16(offsets::DATATYPE),
            bitpix: r.i16(offsets::BITPIX),
            pixdim,
            vox_offset: r.f32(offsets::VOX_OFFSET),
            scl_slope: r.f32(offsets::SCL_SLOPE),
            scl_inter: r.f32(offsets::SCL_INTER),
            magic,
            big_endian: order == ByteOrder::Big,
        })
    }

    fn spatial_dims(&self) -> Result<[usize; 3]> {
        let ndim = self.dim[0];
        if !(ndim == 3 || ndim == 4) {
            return Err(VolioError::Dim(format!("dim[0] must be 3 or 4, found {ndim}")));
        }
        if ndim == 4 && self.dim[4] != 1 {
            return Err(VolioError::Dim(format!(
                "4-D volumes must have dim[4] == 1, found {}",
                self.dim[4]
            )));
        }
        let mut out = [0usize; 3];
        for (i, o) in out.iter_mut().enumerate() {
            let d = self.dim[i + 1];
            if d <= 0 {
                return Err(VolioError::Dim(format!("dim[{}] must be positive, found {d}", i + 1)));
            }
            *o = d as usize;
        }
        Ok(out)
    }

    fn spacing(&self) -> Result<[f64; 3]> {
        let mut out = [1.0f64; 3];
        for (i, o) in out.iter_mut().enumerate() {
            let p = self.pixdim[i + 1];
            if !(p.is_finite() && p > 0.0) {
                return Err(VolioError::Pixdim(format!(
                    "pixdim[{}] must be positive, found {p}",
                    i + 1
                )));
            }
            *o = p as f64;
        }
        Ok(out)
    }
}

/// Decode a NIfTI-1 byte buffer into a float volume.
pub fn decode_nifti1(bytes: &[u8]) -> Result<Volume> {
    let hdr = Nifti1HeaderSubset::parse(bytes)?;
    let dims = hdr.spatial_dims()?;
    let spacing = hdr.spacing()?;
    let width = match hdr.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(VolioError::Datatype(other)),
    };
    if !(hdr.vox_offset.is_finite() && hdr.vox_offset >= NIFTI1_VOX_OFFSET as f32) {
        return Err(VolioError::VoxOffset(format!(
            "must be at least {NIFTI1_VOX_OFFSET}, found {}",
            hdr.vox_offset
        )));
    }
    let offset = hdr.vox_offset as usize;
    let n: usize = dims.iter().product();
    let need = offset + n * width;
    if bytes.len() < need {
        return Err(VolioError::Truncated { field: "voxel data", need, have: bytes.len() });
    }
    let payload = &bytes[offset..need];
    let r = Reader {
        bytes: payload,
        order: if hdr.big_endian { ByteOrder::Big } else { ByteOrder::Little },
    };
    let mut data: Vec<f32> = match hdr.datatype {
        DT_UINT8 => payload.iter().map(|&b| b as f32).collect(),
        DT_INT16 => (0..n).map(|i| r.i16(2 * i) as f32).collect(),
        _ => (0..n).map(|i| r.f32(4 * i)).collect(),
    };
    if hdr.scl_slope != 0.0 && hdr.scl_slope.is_finite() {
        let (m, b) = (hdr.scl_slope, hdr.scl_inter);
        if !(m == 1.0 && b == 0.0) {
            data.iter_mut().for_each(|v| *v = *v * m + b);
        }
    }
    Volume::new(dims, spacing, data)
}

/// Encode as little-endian NIfTI-1, float32, payload at byte 352.
pub fn encode_nifti1(v: &Volume) -> Vec<u8> {
    let mut out = vec![0u8; NIFTI1_VOX_OFFSET + 4 * v.len()];
    out[0..4].copy_from_slice(&(NIFTI1_HEADER_SIZE as i32).to_le_bytes());
    let dim: [i16; 8] = [3, v.dims[0] as i16, v.dims[1] as i16, v.dims[2] as i16, 1, 1, 1, 1];
    let pixdim: [f32; 8] = [
        1.0,
        v.spacing[0] as f32,
        v.spacing[1] as f32,
        v.spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for i in 0..8 {
        let at = offsets::DIM + 2 * i;
        out[at..at + 2].copy_from_slice(&dim[i].to_le_bytes());
        let at = offsets::PIXDIM + 4 * i;
        out[at..at + 4].copy_from_slice(&pixdim[i].to_le_bytes());
    }
    out[offsets::DATATYPE..offsets::DATATYPE + 2].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    out[offsets::BITPIX..offsets::BITPIX + 2].copy_from_slice(&32i16.to_le_bytes());
    out[offsets::VOX_OFFSET..offsets::VOX_OFFSET + 4]
        .copy_from_slice(&(NIFTI1_VOX_OFFSET as f32).to_le_bytes());
    out[offsets::SCL_SLOPE..offsets::SCL_SLOPE + 4].copy_from_slice(&1.0f32.to_le_bytes());
    out[offsets::SCL_INTER..offsets::SCL_INTER + 4].copy_from_slice(&0.0f32.to_le_bytes());
    out[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(&NIFTI1_MAGIC);
    for (i, x) in v.data.iter().enumerate() {
        let at = NIFTI1_VOX_OFFSET + 4 * i;
        out[at..at + 4].copy_from_slice(&x.to_le_bytes());
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

enum Format {
    Nifti,
    Raw,
}

fn format_of(path: &Path) -> Result<Format> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => Ok(Format::Nifti),
        Some("f32raw") => Ok(Format::Raw),
        _ => Err(VolioError::Extension(path.to_path_buf())),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| VolioError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| VolioError::Io { path: path.to_path_buf(), source })
}

/// Load a `.nii` or `.f32raw` volume.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match format_of(path)? {
        Format::Nifti => decode_nifti1(&read(path)?),
        Format::Raw => {
            let side = sidecar_path(path);
            let meta: RawSidecar = serde_json::from_slice(&read(&side)?)
                .map_err(|source| VolioError::Sidecar { path: side.clone(), source })?;
            let bytes = read(path)?;
            let n: usize = meta.dims.iter().product();
            if bytes.len() < 4 * n {
                return Err(VolioError::Truncated {
                    field: "voxel data",
                    need: 4 * n,
                    have: bytes.len(),
                });
            }
            let data = bytes[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Volume::new(meta.dims, meta.spacing, data)
        }
    }
}

/// Save a volume; the format is chosen by extension (`.nii` or `.f32raw`).
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // Volumes built through `new` are always finite, but `data` may have been
    // produced elsewhere in the crate.
    if let Some(i) = v.data.iter().position(|x| !x.is_finite()) {
        return Err(VolioError::Invalid(format!("non-finite value at voxel {i}")));
    }
    match format_of(path)? {
        Format::Nifti => write(path, &encode_nifti1(v)),
        Format::Raw => {
            let meta = RawSidecar { dims: v.dims, spacing: v.spacing };
            let side = sidecar_path(path);
            let json = serde_json::to_vec_pretty(&meta)
                .map_err(|source| VolioError::Sidecar { path: side.clone(), source })?;
            write(&side, &json)?;
            let bytes: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
            write(path, &bytes)
        }
    }
}

/// Linearly rescale to [0, 255]. A constant volume maps to all zeros.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let (lo, hi) = v.min_max();
    let data = if hi > lo {
        let (lo, hi) = (lo as f64, hi as f64);
        let scale = 255.0 / (hi - lo);
        v.data
            .iter()
            .map(|&x| (((x as f64 - lo) * scale) as f32).clamp(0.0, 255.0))
            .collect()
    } else {
        vec![0.0; v.len()]
    };
    Volume { dims: v.dims, spacing: v.spacing, data }
}
