//! NIfTI-1 parsing, Hounsfield-unit windowing and volume handling.
//!
//! Single-file uncompressed `.nii` only: a 348-byte header (little- or
//! big-endian, auto-detected through `dim[0]`), followed by the data section
//! at `vox_offset`. Supported on-disk datatypes are int16 and float32;
//! `scl_slope`/`scl_inter` are applied on read (slope 0 treated as 1) and
//! axial slices are rotated 90 degrees counter-clockwise in the (X, Y)
//! plane for consistent orientation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HEADER_SIZE: usize = 348;
pub const MIN_FILE_SIZE: usize = 352;
pub const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
pub const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endianness {
    Little,
    Big,
}

/// The fields of the NIfTI-1 header this pipeline consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
    pub endianness: Endianness,
}

/// A 3D voxel grid in scan coordinates plus acquisition metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// Shape `(X, Y, Z)`.
    pub voxels: Tensor,
    /// Voxel spacing in millimetres, informational.
    pub spacing: [f64; 3],
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub transforms: Vec<String>,
}

impl Volume {
    pub fn new(voxels: Tensor, spacing: [f64; 3], source: &str) -> Result<Self> {
        if voxels.rank() != 3 {
            return Err(Error::Shape {
                op: "volume",
                lhs: voxels.shape().to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        Ok(Volume {
            voxels,
            spacing,
            provenance: Provenance {
                source: source.to_string(),
                transforms: Vec::new(),
            },
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn log_transform(&mut self, what: &str) {
        self.provenance.transforms.push(what.to_string());
    }
}

/// A diagnostic Hounsfield-unit window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HuWindow {
    pub id: String,
    pub lower: f64,
    pub upper: f64,
}

impl HuWindow {
    pub fn new(id: &str, lower: f64, upper: f64) -> Result<Self> {
        if lower >= upper {
            return Err(Error::Config(format!(
                "HU window {id}: lower {lower} must be below upper {upper}"
            )));
        }
        Ok(HuWindow {
            id: id.to_string(),
            lower,
            upper,
        })
    }

    /// The four windows used for CT preprocessing. W4 performed best.
    pub fn standard(id: &str) -> Result<Self> {
        match id {
            "W1" => HuWindow::new("W1", -1000.0, 400.0),
            "W2" => HuWindow::new("W2", -1100.0, 500.0),
            "W3" => HuWindow::new("W3", -950.0, 550.0),
            "W4" => HuWindow::new("W4", -1000.0, 0.0),
            other => Err(Error::Config(format!("unknown HU window '{other}'"))),
        }
    }
}

/// Clip raw HU values to the window, then map affinely onto `[0, 1]`.
pub fn apply_hu_window(volume: &Volume, window: &HuWindow) -> Volume {
    let span = window.upper - window.lower;
    let mut out = volume.clone();
    for v in out.voxels.data_mut() {
        *v = ((*v).clamp(window.lower, window.upper) - window.lower) / span;
    }
    out.log_transform(&format!("hu_window:{}", window.id));
    out
}

// ── binary decoding helpers ──────────────────────────────────────────

struct Reader<'a> {
    bytes: &'a [u8],
    endianness: Endianness,
}

impl<'a> Reader<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        let raw = [self.bytes[off], self.bytes[off + 1]];
        match self.endianness {
            Endianness::Little => i16::from_le_bytes(raw),
            Endianness::Big => i16::from_be_bytes(raw),
        }
    }

    fn i32_at(&self, off: usize) -> i32 {
        let raw: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        match self.endianness {
            Endianness::Little => i32::from_le_bytes(raw),
            Endianness::Big => i32::from_be_bytes(raw),
        }
    }

    fn f32_at(&self, off: usize) -> f32 {
        let raw: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        match self.endianness {
            Endianness::Little => f32::from_le_bytes(raw),
            Endianness::Big => f32::from_be_bytes(raw),
        }
    }
}

/// Rotate each axial `(X, Y)` slice 90 degrees counter-clockwise:
/// `out[i][j] = in[j][ny - 1 - i]`, so an `(nx, ny, nz)` grid becomes
/// `(ny, nx, nz)`.
pub fn rotate_slices_ccw(voxels: &Tensor) -> Tensor {
    let s = voxels.shape();
    let (nx, ny, nz) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[ny, nx, nz]);
    for i in 0..ny {
        for j in 0..nx {
            for z in 0..nz {
                let v = voxels.at(&[j, ny - 1 - i, z]);
                out.set(&[i, j, z], v);
            }
        }
    }
    out
}

/// Inverse of [`rotate_slices_ccw`].
pub fn rotate_slices_cw(voxels: &Tensor) -> Tensor {
    let s = voxels.shape();
    let (ny, nx, nz) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[nx, ny, nz]);
    for j in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                out.set(&[j, y, z], voxels.at(&[ny - 1 - y, j, z]));
            }
        }
    }
    out
}

/// Parse a single-file NIfTI-1 byte stream into its header and a raw-HU
/// volume (slope/intercept applied, slices rotated for orientation).
pub fn parse_nifti(bytes: &[u8], source: &str) -> Result<(NiftiHeader, Volume)> {
    if bytes.len() < MIN_FILE_SIZE {
        return Err(Error::Truncated {
            expected: MIN_FILE_SIZE,
            actual: bytes.len(),
        });
    }
    // endianness detection: dim[0] must land in 1..=7
    let mut reader = Reader {
        bytes,
        endianness: Endianness::Little,
    };
    let dim0_le = reader.i16_at(40);
    if !(1..=7).contains(&dim0_le) {
        reader.endianness = Endianness::Big;
        let dim0_be = reader.i16_at(40);
        if !(1..=7).contains(&dim0_be) {
            return Err(Error::Format(format!(
                "dim[0] = {dim0_le} resolves to no valid endianness"
            )));
        }
    }

    let sizeof_hdr = reader.i32_at(0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::Format(format!(
            "sizeof_hdr = {sizeof_hdr}, expected {HEADER_SIZE}"
        )));
    }
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if &magic == MAGIC_PAIR {
        return Err(Error::Format(
            "header-only NIfTI pair ('ni1') is not supported; need single-file 'n+1'".into(),
        ));
    }
    if &magic != MAGIC_SINGLE {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = reader.i16_at(40 + 2 * i);
    }
    if dim[0] != 3 {
        return Err(Error::UnsupportedRank(dim[0]));
    }
    let datatype = reader.i16_at(70);
    let bitpix = reader.i16_at(72);
    let mut pixdim = [0f32; 8];
    for (i, d) in pixdim.iter_mut().enumerate() {
        *d = reader.f32_at(76 + 4 * i);
    }
    let vox_offset = reader.f32_at(108);
    let scl_slope = reader.f32_at(112);
    let scl_inter = reader.f32_at(116);

    let (nx, ny, nz) = (dim[1] as usize, dim[2] as usize, dim[3] as usize);
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::Format(format!("degenerate extents {dim:?}")));
    }
    let n = nx * ny * nz;
    let elem = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let offset = vox_offset as usize;
    let need = offset + n * elem;
    if bytes.len() < need || offset < MIN_FILE_SIZE {
        return Err(Error::Truncated {
            expected: need,
            actual: bytes.len(),
        });
    }

    let slope = if scl_slope == 0.0 { 1.0 } else { scl_slope as f64 };
    let inter = scl_inter as f64;
    let mut data = Vec::with_capacity(n);
    match datatype {
        DT_INT16 => {
            for i in 0..n {
                let raw = reader.i16_at(offset + 2 * i) as f64;
                data.push(raw * slope + inter);
            }
        }
        DT_FLOAT32 => {
            for i in 0..n {
                let raw = reader.f32_at(offset + 4 * i) as f64;
                data.push(raw * slope + inter);
            }
        }
        _ => unreachable!(),
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical { op: "parse_nifti" });
    }

    let header = NiftiHeader {
        sizeof_hdr,
        dim,
        datatype,
        bitpix,
        pixdim,
        vox_offset,
        scl_slope,
        scl_inter,
        magic,
        endianness: reader.endianness,
    };
    let raw = Tensor::from_parts(vec![nx, ny, nz], data);
    let rotated = rotate_slices_ccw(&raw);
    let mut volume = Volume::new(
        rotated,
        [pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64],
        source,
    )?;
    volume.log_transform("rot90_ccw_xy");
    Ok((header, volume))
}

/// Datatype for [`write_nifti`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteDatatype {
    Int16,
    Float32,
}

/// Serialize a volume as a little-endian single-file NIfTI-1 stream,
/// undoing the read-side rotation so parse(write(v)) round-trips.
pub fn write_nifti(volume: &Volume, datatype: WriteDatatype) -> Result<Vec<u8>> {
    let unrotated = rotate_slices_cw(&volume.voxels);
    let s = unrotated.shape();
    let (nx, ny, nz) = (s[0], s[1], s[2]);
    let mut header = vec![0u8; HEADER_SIZE];
    header[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dim: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        header[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    let (dt, bitpix) = match datatype {
        WriteDatatype::Int16 => (DT_INT16, 16i16),
        WriteDatatype::Float32 => (DT_FLOAT32, 32i16),
    };
    header[70..72].copy_from_slice(&dt.to_le_bytes());
    header[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim: [f32; 8] = [
        1.0,
        volume.spacing[0] as f32,
        volume.spacing[1] as f32,
        volume.spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (i, d) in pixdim.iter().enumerate() {
        header[76 + 4 * i..80 + 4 * i].copy_from_slice(&d.to_le_bytes());
    }
    header[108..112].copy_from_slice(&(MIN_FILE_SIZE as f32).to_le_bytes());
    header[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    header[116..120].copy_from_slice(&0.0f32.to_le_bytes()); // scl_inter
    header[344..348].copy_from_slice(MAGIC_SINGLE);

    let mut out = header;
    out.extend_from_slice(&[0u8; 4]); // extension flag, pads to vox_offset
    match datatype {
        WriteDatatype::Int16 => {
            for &v in unrotated.data() {
                let q = v.round();
                if !(i16::MIN as f64..=i16::MAX as f64).contains(&q) {
                    return Err(Error::Numerical { op: "write_nifti" });
                }
                out.extend_from_slice(&(q as i16).to_le_bytes());
            }
        }
        WriteDatatype::Float32 => {
            for &v in unrotated.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_int16(values: &[i16], dim: [i16; 4]) -> Vec<u8> {
        let mut bytes = vec![0u8; MIN_FILE_SIZE];
        bytes[0..4].copy_from_slice(&348i32.to_le_bytes());
        let dims: [i16; 8] = [dim[0], dim[1], dim[2], dim[3], 1, 1, 1, 1];
        for (i, d) in dims.iter().enumerate() {
            bytes[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        bytes[70..72].copy_from_slice(&DT_INT16.to_le_bytes());
        bytes[72..74].copy_from_slice(&16i16.to_le_bytes());
        bytes[108..112].copy_from_slice(&(MIN_FILE_SIZE as f32).to_le_bytes());
        bytes[112..116].copy_from_slice(&1.0f32.to_le_bytes());
        bytes[344..348].copy_from_slice(MAGIC_SINGLE);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    #[test]
    fn parses_synthetic_fixture() {
        let values: Vec<i16> = (0..32).collect();
        let bytes = fixture_int16(&values, [3, 4, 4, 2]);
        let (header, volume) = parse_nifti(&bytes, "fixture").unwrap();
        assert_eq!(header.dim[0], 3);
        assert_eq!(header.endianness, Endianness::Little);
        assert_eq!(volume.shape(), [4, 4, 2]);
        // every decoded value present exactly once (rotation permutes)
        let mut got: Vec<f64> = volume.voxels.data().to_vec();
        got.sort_by(f64::total_cmp);
        let want: Vec<f64> = (0..32).map(|v| v as f64).collect();
        assert_eq!(got, want);
        // rotation: out[i][j][z] = in[j][ny-1-i][z]
        let raw = Tensor::new(vec![4, 4, 2], want).unwrap();
        assert_eq!(volume.voxels.at(&[0, 0, 0]), raw.at(&[0, 3, 0]));
        assert_eq!(volume.voxels.at(&[3, 2, 1]), raw.at(&[2, 0, 1]));
    }

    #[test]
    fn slope_and_intercept_applied() {
        let bytes = {
            let mut b = fixture_int16(&[1024; 8], [3, 2, 2, 2]);
            b[112..116].copy_from_slice(&1.0f32.to_le_bytes());
            b[116..120].copy_from_slice(&(-1024.0f32).to_le_bytes());
            b
        };
        let (_, volume) = parse_nifti(&bytes, "fixture").unwrap();
        assert!(volume.voxels.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_slope_treated_as_one() {
        let mut bytes = fixture_int16(&[7; 8], [3, 2, 2, 2]);
        bytes[112..116].copy_from_slice(&0.0f32.to_le_bytes());
        let (_, volume) = parse_nifti(&bytes, "fixture").unwrap();
        assert!(volume.voxels.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn rank_other_than_three_rejected() {
        let bytes = fixture_int16(&[0; 16], [4, 2, 2, 2]);
        assert!(matches!(
            parse_nifti(&bytes, "fixture"),
            Err(Error::UnsupportedRank(4))
        ));
    }

    #[test]
    fn unknown_datatype_rejected() {
        let mut bytes = fixture_int16(&[0; 8], [3, 2, 2, 2]);
        bytes[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(
            parse_nifti(&bytes, "fixture"),
            Err(Error::UnsupportedDatatype(64))
        ));
    }

    #[test]
    fn pair_magic_rejected() {
        let mut bytes = fixture_int16(&[0; 8], [3, 2, 2, 2]);
        bytes[344..348].copy_from_slice(MAGIC_PAIR);
        assert!(matches!(parse_nifti(&bytes, "fixture"), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_data_detected() {
        let values: Vec<i16> = (0..32).collect();
        let mut bytes = fixture_int16(&values, [3, 4, 4, 2]);
        bytes.truncate(bytes.len() - 10);
        assert!(matches!(
            parse_nifti(&bytes, "fixture"),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn big_endian_detected_and_decoded() {
        let mut bytes = vec![0u8; MIN_FILE_SIZE];
        bytes[0..4].copy_from_slice(&348i32.to_be_bytes());
        let dims: [i16; 8] = [3, 2, 2, 2, 1, 1, 1, 1];
        for (i, d) in dims.iter().enumerate() {
            bytes[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_be_bytes());
        }
        bytes[70..72].copy_from_slice(&DT_INT16.to_be_bytes());
        bytes[72..74].copy_from_slice(&16i16.to_be_bytes());
        bytes[108..112].copy_from_slice(&(MIN_FILE_SIZE as f32).to_be_bytes());
        bytes[112..116].copy_from_slice(&1.0f32.to_be_bytes());
        bytes[344..348].copy_from_slice(MAGIC_SINGLE);
        for v in 0i16..8 {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let (header, volume) = parse_nifti(&bytes, "fixture").unwrap();
        assert_eq!(header.endianness, Endianness::Big);
        let mut got: Vec<f64> = volume.voxels.data().to_vec();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, (0..8).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn write_then_parse_round_trips_bytes() {
        let values: Vec<i16> = (0..32).map(|v| v * 3 - 50).collect();
        let raw = Tensor::new(vec![4, 4, 2], values.iter().map(|&v| v as f64).collect())
            .unwrap();
        let volume = Volume::new(rotate_slices_ccw(&raw), [1.0, 1.0, 1.0], "mem").unwrap();
        let bytes = write_nifti(&volume, WriteDatatype::Int16).unwrap();
        let (_, parsed) = parse_nifti(&bytes, "mem").unwrap();
        assert_eq!(parsed.voxels.data(), volume.voxels.data());
        let bytes2 = write_nifti(&parsed, WriteDatatype::Int16).unwrap();
        assert_eq!(bytes, bytes2, "writer output must be byte-stable");
    }

    #[test]
    fn hu_window_boundaries() {
        let w4 = HuWindow::standard("W4").unwrap();
        assert_eq!(w4.lower, -1000.0);
        assert_eq!(w4.upper, 0.0);
        let raw = Tensor::vector(&[400.0, -1000.0, -500.0]);
        let volume = Volume::new(raw.reshaped(vec![3, 1, 1]).unwrap(), [1.0; 3], "mem").unwrap();
        let out = apply_hu_window(&volume, &w4);
        assert_eq!(out.voxels.data()[0], 1.0); // clipped to 0 HU -> top of range
        assert_eq!(out.voxels.data()[1], 0.0);
        assert_eq!(out.voxels.data()[2], 0.5);
    }

    #[test]
    fn hu_window_validates_order() {
        assert!(HuWindow::new("bad", 10.0, -10.0).is_err());
    }

    #[test]
    fn unit_window_is_idempotent_on_normalized_data() {
        let unit = HuWindow::new("unit", 0.0, 1.0).unwrap();
        let volume = Volume::new(
            Tensor::new(vec![2, 2, 1], vec![0.0, 0.25, 0.5, 1.0]).unwrap(),
            [1.0; 3],
            "m",
        )
        .unwrap();
        let once = apply_hu_window(&volume, &unit);
        let twice = apply_hu_window(&once, &unit);
        assert_eq!(once.voxels.data(), twice.voxels.data());
        assert_eq!(once.voxels.data(), volume.voxels.data());
    }

    #[test]
    fn window_is_monotone() {
        let w = HuWindow::standard("W1").unwrap();
        let mk = |v: f64| {
            Volume::new(Tensor::full(&[1, 1, 1], v), [1.0; 3], "m").unwrap()
        };
        let mut prev = f64::NEG_INFINITY;
        for hu in [-2000.0, -1000.0, -3.0, 0.0, 250.0, 400.0, 900.0] {
            let out = apply_hu_window(&mk(hu), &w).voxels.data()[0];
            assert!(out >= prev);
            prev = out;
        }
    }
}
