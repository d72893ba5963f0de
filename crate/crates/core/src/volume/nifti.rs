//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reader and writer.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Matrix4};
use ndarray::{Array3, ShapeBuilder};

use super::{BinaryMask, Grid, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;
const DT_INT64: i16 = 1024;
const DT_UINT64: i16 = 1280;

fn bytes_per_voxel(datatype: i16) -> Result<usize> {
    Ok(match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 | DT_INT64 | DT_UINT64 => 8,
        other => return Err(Error::UnsupportedDataType(other)),
    })
}

/// Decoded image: grid plus scaled values.
#[derive(Debug, Clone)]
pub struct NiftiData {
    pub grid: Grid,
    pub data: Array3<f32>,
    pub datatype: i16,
}

struct Header {
    dims: [usize; 3],
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    affine: Matrix4<f64>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::CorruptHeader(format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header<B: ByteOrder>(buf: &[u8]) -> Result<Header> {
    let magic = &buf[344..348];
    if magic == b"ni1\0" {
        return Err(Error::CorruptHeader(
            "two-file (.hdr/.img) NIfTI is not supported".into(),
        ));
    }
    if magic != b"n+1\0" {
        return Err(Error::CorruptHeader(format!("bad magic {magic:?}")));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&buf[40 + 2 * i..]);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::CorruptHeader(format!("dim[0] = {ndim}")));
    }
    let extents: Vec<i64> = (1..=ndim as usize).map(|i| dim[i] as i64).collect();
    if extents.iter().any(|&e| e < 1) {
        return Err(Error::CorruptHeader(format!("non-positive extent in {extents:?}")));
    }
    if extents.iter().skip(3).any(|&e| e > 1) {
        let non_unit = extents.iter().filter(|&&e| e > 1).count();
        return Err(Error::NotThreeDimensional(non_unit));
    }
    let mut dims = [1usize; 3];
    for (i, e) in extents.iter().take(3).enumerate() {
        dims[i] = *e as usize;
    }

    let datatype = B::read_i16(&buf[70..]);
    bytes_per_voxel(datatype)?;

    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = B::read_f32(&buf[76 + 4 * i..]);
    }
    let vox_offset = B::read_f32(&buf[108..]);
    if !vox_offset.is_finite() || vox_offset < HEADER_SIZE as f32 {
        return Err(Error::CorruptHeader(format!("vox_offset {vox_offset}")));
    }
    let scl_slope = B::read_f32(&buf[112..]);
    let scl_inter = B::read_f32(&buf[116..]);
    let qform_code = B::read_i16(&buf[252..]);
    let sform_code = B::read_i16(&buf[254..]);

    let affine = if sform_code > 0 {
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = B::read_f32(&buf[280 + 16 * r + 4 * c..]) as f64;
            }
        }
        m
    } else if qform_code > 0 {
        let q = |off: usize| B::read_f32(&buf[off..]) as f64;
        qform_affine(
            [q(256), q(260), q(264)],
            [q(268), q(272), q(276)],
            [pixdim[0], pixdim[1], pixdim[2], pixdim[3]].map(|p| p as f64),
        )
    } else {
        let mut m = Matrix4::identity();
        for a in 0..3 {
            m[(a, a)] = pixdim[a + 1] as f64;
        }
        m
    };

    Ok(Header {
        dims,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope,
        scl_inter,
        affine,
    })
}

/// Quaternion form: rotation from (b, c, d), `pixdim[0]` as the handedness flag.
fn qform_affine(bcd: [f64; 3], offset: [f64; 3], pixdim: [f64; 4]) -> Matrix4<f64> {
    let [b, c, d] = bcd;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    #[rustfmt::skip]
    let rot = Matrix3::new(
        a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c),
        2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b),
        2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b,
    );
    let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let scale = Matrix3::from_diagonal(&nalgebra::Vector3::new(pixdim[1], pixdim[2], qfac * pixdim[3]));
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rot * scale));
    for r in 0..3 {
        m[(r, 3)] = offset[r];
    }
    m
}

fn decode<B: ByteOrder>(raw: &[u8], datatype: i16, n: usize, out: &mut Vec<f64>) {
    out.reserve(n);
    match datatype {
        DT_UINT8 => out.extend(raw[..n].iter().map(|&v| v as f64)),
        DT_INT8 => out.extend(raw[..n].iter().map(|&v| v as i8 as f64)),
        DT_INT16 => out.extend(raw.chunks_exact(2).take(n).map(|c| B::read_i16(c) as f64)),
        DT_UINT16 => out.extend(raw.chunks_exact(2).take(n).map(|c| B::read_u16(c) as f64)),
        DT_INT32 => out.extend(raw.chunks_exact(4).take(n).map(|c| B::read_i32(c) as f64)),
        DT_UINT32 => out.extend(raw.chunks_exact(4).take(n).map(|c| B::read_u32(c) as f64)),
        DT_FLOAT32 => out.extend(raw.chunks_exact(4).take(n).map(|c| B::read_f32(c) as f64)),
        DT_FLOAT64 => out.extend(raw.chunks_exact(8).take(n).map(B::read_f64)),
        DT_INT64 => out.extend(raw.chunks_exact(8).take(n).map(|c| B::read_i64(c) as f64)),
        DT_UINT64 => out.extend(raw.chunks_exact(8).take(n).map(|c| B::read_u64(c) as f64)),
        _ => unreachable!("datatype validated in header parse"),
    }
}

/// Reads a NIfTI-1 image, squeezing singleton dimensions beyond the third
/// and applying `scl_slope`/`scl_inter` when the slope is non-zero.
pub fn read_nifti(path: &Path) -> Result<NiftiData> {
    let buf = read_bytes(path)?;
    if buf.len() < HEADER_SIZE {
        return Err(Error::CorruptHeader(format!(
            "{} bytes, need at least {HEADER_SIZE}",
            buf.len()
        )));
    }
    let little = LittleEndian::read_i32(&buf[0..4]) == HEADER_SIZE as i32;
    let big = BigEndian::read_i32(&buf[0..4]) == HEADER_SIZE as i32;
    let header = match (little, big) {
        (true, _) => parse_header::<LittleEndian>(&buf)?,
        (_, true) => parse_header::<BigEndian>(&buf)?,
        _ => return Err(Error::CorruptHeader("sizeof_hdr is not 348".into())),
    };

    let n: usize = header.dims.iter().product();
    let need = n * bytes_per_voxel(header.datatype)?;
    let end = header.vox_offset + need;
    if buf.len() < end {
        return Err(Error::CorruptHeader(format!(
            "truncated voxel data: {} of {need} bytes",
            buf.len().saturating_sub(header.vox_offset)
        )));
    }
    let raw = &buf[header.vox_offset..end];
    let mut values = Vec::new();
    if little {
        decode::<LittleEndian>(raw, header.datatype, n, &mut values);
    } else {
        decode::<BigEndian>(raw, header.datatype, n, &mut values);
    }

    let (slope, inter) = if header.scl_slope != 0.0 && header.scl_slope.is_finite() {
        (header.scl_slope as f64, header.scl_inter as f64)
    } else {
        (1.0, 0.0)
    };
    let scaled: Vec<f32> = values.into_iter().map(|v| (v * slope + inter) as f32).collect();

    let grid = Grid::from_affine(header.dims, header.affine)?;
    let [nx, ny, nz] = header.dims;
    // NIfTI stores x fastest
    let data =
        Array3::from_shape_vec((nx, ny, nz).f(), scaled).map_err(|e| Error::CorruptHeader(format!("shape: {e}")))?;
    Ok(NiftiData {
        grid,
        data,
        datatype: header.datatype,
    })
}

fn series_id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name)
        .to_string()
}

/// Loads a NIfTI volume; the series id defaults to the file stem.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let NiftiData { grid, data, .. } = read_nifti(path)?;
    Volume::new(series_id_from_path(path), grid, data)
}

/// Loads a mask: any non-zero voxel is set.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let NiftiData { grid, data, .. } = read_nifti(path)?;
    BinaryMask::new(series_id_from_path(path), grid, data.mapv(|v| v != 0.0))
}

fn write_nifti(path: &Path, grid: &Grid, datatype: i16, payload: &[u8]) -> Result<()> {
    let mut hdr = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut hdr[0..], HEADER_SIZE as i32);
    let [nx, ny, nz] = grid.dims();
    let dims = [3i16, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    if [nx, ny, nz].iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::InvalidVolume("extent exceeds NIfTI-1 limit".into()));
    }
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut hdr[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut hdr[70..], datatype);
    LittleEndian::write_i16(&mut hdr[72..], (bytes_per_voxel(datatype)? * 8) as i16);
    let sp = grid.spacing();
    let pixdim = [1.0f32, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut hdr[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut hdr[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut hdr[112..], 1.0);
    LittleEndian::write_f32(&mut hdr[116..], 0.0);
    // xyzt_units: mm
    hdr[123] = 2;
    let descrip = b"ctqc";
    hdr[148..148 + descrip.len()].copy_from_slice(descrip);
    LittleEndian::write_i16(&mut hdr[252..], 0);
    LittleEndian::write_i16(&mut hdr[254..], 2);
    let a = grid.affine();
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut hdr[280 + 16 * r + 4 * c..], a[(r, c)] as f32);
        }
    }
    hdr[344..348].copy_from_slice(b"n+1\0");

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.to_string_lossy().ends_with(".gz");
    let result = if gz {
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(&hdr)
            .and_then(|_| enc.write_all(payload))
            .and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut file = file;
        file.write_all(&hdr).and_then(|_| file.write_all(payload))
    };
    result.map_err(|e| Error::io(path, e))
}

/// Values in NIfTI (x-fastest) order.
fn fortran_order<T: Copy>(data: &Array3<T>) -> impl Iterator<Item = T> + '_ {
    data.t().into_iter().copied()
}

/// Writes float32 voxels, gzip-compressed when the path ends in `.gz`.
pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut payload = vec![0u8; v.grid().voxel_count() * 4];
    for (chunk, value) in payload.chunks_exact_mut(4).zip(fortran_order(v.data())) {
        LittleEndian::write_f32(chunk, value);
    }
    write_nifti(path, v.grid(), DT_FLOAT32, &payload)
}

pub fn save_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    let payload: Vec<u8> = fortran_order(m.data()).map(u8::from).collect();
    write_nifti(path, m.grid(), DT_UINT8, &payload)
}

/// Writes a uint16 count volume.
pub fn save_counts(path: &Path, grid: &Grid, counts: &Array3<u16>) -> Result<()> {
    grid.check_shape(counts)?;
    let mut payload = vec![0u8; grid.voxel_count() * 2];
    for (chunk, value) in payload.chunks_exact_mut(2).zip(fortran_order(counts)) {
        LittleEndian::write_u16(chunk, value);
    }
    write_nifti(path, grid, DT_UINT16, &payload)
}
