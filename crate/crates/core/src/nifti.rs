//! NIfTI-1 single-file volumes (`.nii`, `.nii.gz`).
//!
//! Only the three spatial dimensions are supported for reading. Labels are
//! written as `uint16`; images as `int16` when every intensity is an
//! integer in range, `float32` otherwise.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::grid::{Frame, Geometry, ImageGrid, LabelGrid};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;
pub const DT_INT8: i16 = 256;
pub const DT_UINT16: i16 = 512;
pub const DT_UINT32: i16 = 768;
pub const DT_INT64: i16 = 1024;
pub const DT_UINT64: i16 = 1280;

/// The header fields this crate reads and writes.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeHeader {
    /// Number of voxels along x, y, z.
    pub dims: [usize; 3],
    /// Voxel size in mm.
    pub spacing: [f64; 3],
    pub datatype: i16,
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub frame: Frame,
    vox_offset: usize,
    big_endian: bool,
}

impl VolumeHeader {
    fn bytes_per_voxel(&self) -> usize {
        bytes_per_voxel(self.datatype).unwrap_or(0)
    }

    fn is_integer_type(&self) -> bool {
        !matches!(self.datatype, DT_FLOAT32 | DT_FLOAT64)
    }

    /// Slope/intercept as applied on read. A zero or non-finite slope means
    /// no scaling.
    fn scaling(&self) -> (f64, f64) {
        if self.scl_slope == 0.0 || !self.scl_slope.is_finite() {
            (1.0, 0.0)
        } else {
            let inter = if self.scl_inter.is_finite() { self.scl_inter } else { 0.0 };
            (self.scl_slope, inter)
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            dims: self.dims,
            spacing: self.spacing,
            orientation: Default::default(),
            frame: self.frame.clone(),
        }
    }
}

fn bytes_per_voxel(datatype: i16) -> Option<usize> {
    Some(match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 | DT_INT64 | DT_UINT64 => 8,
        _ => return None,
    })
}

/// Either kind of volume, chosen by the stored datatype.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Image(ImageGrid),
    Labels(LabelGrid),
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.bytes[off..off + N]);
        if self.big_endian {
            a.reverse();
        }
        a
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.arr(off))
    }
    fn f32(&self, off: usize) -> f64 {
        f64::from(f32::from_le_bytes(self.arr(off)))
    }
}

fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                reason: format!("gzip: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<VolumeHeader> {
    let perr = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_SIZE {
        return Err(perr(format!("file too short for a header ({} bytes)", bytes.len())));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(perr(format!("bad sizeof_hdr {le}"))),
    };
    let magic = &bytes[344..348];
    if magic == b"ni1\0" {
        return Err(Error::Unsupported {
            path: path.to_path_buf(),
            reason: "separate .hdr/.img pairs are not supported".into(),
        });
    }
    if magic != b"n+1\0" {
        return Err(perr(format!("bad magic {magic:?}")));
    }
    let r = Reader { bytes, big_endian };

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(perr(format!("dim[0] = {ndim}")));
    }
    let mut dim = [1i64; 8];
    for (i, d) in dim.iter_mut().enumerate().skip(1).take(ndim as usize) {
        *d = i64::from(r.i16(40 + 2 * i));
        if *d < 1 {
            return Err(perr(format!("dim[{i}] = {d}")));
        }
    }
    if dim[4..].iter().any(|&d| d > 1) {
        return Err(Error::Unsupported {
            path: path.to_path_buf(),
            reason: format!("more than 3 non-singleton dims ({:?})", &dim[1..=ndim as usize]),
        });
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let datatype = r.i16(70);
    if bytes_per_voxel(datatype).is_none() {
        return Err(Error::Unsupported {
            path: path.to_path_buf(),
            reason: format!("datatype {datatype}"),
        });
    }

    let unit_scale = match bytes[123] & 0x07 {
        1 => 1000.0,
        3 => 0.001,
        _ => 1.0,
    };
    let mut spacing = [1.0; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = r.f32(76 + 4 * (a + 1)).abs();
        if v > 0.0 && v.is_finite() {
            *s = v * unit_scale;
        }
    }
    let qfac = if r.f32(76) < 0.0 { -1.0 } else { 1.0 };

    let vox_offset = r.f32(108);
    if !(vox_offset >= HEADER_SIZE as f64) {
        return Err(perr(format!("vox_offset {vox_offset}")));
    }

    let mut srow = [[0.0; 4]; 3];
    for (row, out) in srow.iter_mut().enumerate() {
        for (c, v) in out.iter_mut().enumerate() {
            *v = r.f32(280 + 16 * row + 4 * c);
        }
    }
    let frame = Frame {
        qform_code: r.i16(252),
        sform_code: r.i16(254),
        quatern: [r.f32(256), r.f32(260), r.f32(264)],
        qoffset: [r.f32(268), r.f32(272), r.f32(276)],
        qfac,
        srow,
    };

    Ok(VolumeHeader {
        dims,
        spacing,
        datatype,
        scl_slope: r.f32(112),
        scl_inter: r.f32(116),
        frame,
        vox_offset: vox_offset as usize,
        big_endian,
    })
}

pub fn read_header(path: impl AsRef<Path>) -> Result<VolumeHeader> {
    let path = path.as_ref();
    let bytes = load_bytes(path)?;
    parse_header(path, &bytes)
}

/// Raw stored values converted to f64, before scaling.
fn decode_payload(path: &Path, header: &VolumeHeader, bytes: &[u8]) -> Result<Vec<f64>> {
    let n: usize = header.dims.iter().product();
    let bpv = header.bytes_per_voxel();
    let start = header.vox_offset;
    let end = start + n * bpv;
    if bytes.len() < end {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            reason: format!("truncated data: need {end} bytes, have {}", bytes.len()),
        });
    }
    let payload = &bytes[start..end];
    let be = header.big_endian;
    macro_rules! decode {
        ($t:ty, $n:expr) => {
            payload
                .chunks_exact($n)
                .map(|c| {
                    let mut a = [0u8; $n];
                    a.copy_from_slice(c);
                    if be {
                        a.reverse();
                    }
                    <$t>::from_le_bytes(a) as f64
                })
                .collect()
        };
    }
    Ok(match header.datatype {
        DT_UINT8 => decode!(u8, 1),
        DT_INT8 => decode!(i8, 1),
        DT_INT16 => decode!(i16, 2),
        DT_UINT16 => decode!(u16, 2),
        DT_INT32 => decode!(i32, 4),
        DT_UINT32 => decode!(u32, 4),
        DT_FLOAT32 => decode!(f32, 4),
        DT_FLOAT64 => decode!(f64, 8),
        DT_INT64 => decode!(i64, 8),
        DT_UINT64 => decode!(u64, 8),
        other => {
            return Err(Error::Unsupported {
                path: path.to_path_buf(),
                reason: format!("datatype {other}"),
            })
        }
    })
}

/// Read an intensity volume with slope/intercept applied.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = load_bytes(path)?;
    let header = parse_header(path, &bytes)?;
    let raw = decode_payload(path, &header, &bytes)?;
    let (slope, inter) = header.scaling();
    let data = raw.into_iter().map(|v| (v * slope + inter) as f32).collect();
    ImageGrid::new(header.geometry(), data)
}

/// Read a label volume. Values must be non-negative integers that fit in
/// 16 bits after scaling; anything else is a [`Error::NotLabels`].
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelGrid> {
    let path = path.as_ref();
    let bytes = load_bytes(path)?;
    let header = parse_header(path, &bytes)?;
    let raw = decode_payload(path, &header, &bytes)?;
    let (slope, inter) = header.scaling();
    let not_labels = |reason: String| Error::NotLabels {
        path: path.to_path_buf(),
        reason,
    };
    let mut data = Vec::with_capacity(raw.len());
    for v in raw {
        let s = v * slope + inter;
        if s.fract() != 0.0 || !s.is_finite() {
            return Err(not_labels(format!("value {s} is not an integer")));
        }
        if !(0.0..=f64::from(u16::MAX)).contains(&s) {
            return Err(not_labels(format!("value {s} is outside 0..=65535")));
        }
        data.push(s as u16);
    }
    LabelGrid::new(header.geometry(), data)
}

/// Read either kind of volume: integer datatypes with identity scaling and
/// non-negative values come back as labels, everything else as an image.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let header = read_header(path)?;
    let (slope, inter) = header.scaling();
    if header.is_integer_type() && slope == 1.0 && inter == 0.0 {
        if let Ok(l) = read_labels(path) {
            return Ok(Volume::Labels(l));
        }
    }
    read_image(path).map(Volume::Image)
}

fn header_bytes(geometry: &Geometry, extra_dims: &[usize], datatype: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put = |h: &mut Vec<u8>, off: usize, b: &[u8]| h[off..off + b.len()].copy_from_slice(b);
    put(&mut h, 0, &348i32.to_le_bytes());
    let ndim = 3 + extra_dims.len();
    put(&mut h, 40, &(ndim as i16).to_le_bytes());
    let all_dims: Vec<usize> = geometry.dims.iter().chain(extra_dims).copied().collect();
    for (i, d) in all_dims.iter().enumerate() {
        put(&mut h, 42 + 2 * i, &(*d as i16).to_le_bytes());
    }
    for i in ndim + 1..8 {
        put(&mut h, 40 + 2 * i, &1i16.to_le_bytes());
    }
    put(&mut h, 70, &datatype.to_le_bytes());
    let bitpix = bytes_per_voxel(datatype).unwrap() * 8;
    put(&mut h, 72, &(bitpix as i16).to_le_bytes());
    let frame = &geometry.frame;
    put(&mut h, 76, &(frame.qfac as f32).to_le_bytes());
    for a in 0..3 {
        put(&mut h, 80 + 4 * a, &(geometry.spacing[a] as f32).to_le_bytes());
    }
    for i in 4..8 {
        put(&mut h, 76 + 4 * i, &1.0f32.to_le_bytes());
    }
    put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1.0f32.to_le_bytes());
    put(&mut h, 116, &0.0f32.to_le_bytes());
    h[123] = 2; // mm
    put(&mut h, 148, b"cbctseg");
    put(&mut h, 252, &frame.qform_code.to_le_bytes());
    put(&mut h, 254, &frame.sform_code.to_le_bytes());
    let q = [
        frame.quatern[0],
        frame.quatern[1],
        frame.quatern[2],
        frame.qoffset[0],
        frame.qoffset[1],
        frame.qoffset[2],
    ];
    for (i, v) in q.iter().enumerate() {
        put(&mut h, 256 + 4 * i, &(*v as f32).to_le_bytes());
    }
    for (row, vals) in frame.srow.iter().enumerate() {
        for (c, v) in vals.iter().enumerate() {
            put(&mut h, 280 + 16 * row + 4 * c, &(*v as f32).to_le_bytes());
        }
    }
    put(&mut h, 344, b"n+1\0");
    h
}

fn write_file(path: &Path, header: Vec<u8>, payload: Vec<u8>, compress: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if compress {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(&header)
            .and_then(|_| enc.write_all(&payload))
            .and_then(|_| enc.finish()?.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&header)
            .and_then(|_| w.write_all(&payload))
            .and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

/// Gzip when the path ends in `.gz`.
pub fn wants_gzip(path: impl AsRef<Path>) -> bool {
    path.as_ref()
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

pub fn write_labels(grid: &LabelGrid, path: impl AsRef<Path>, compress: bool) -> Result<()> {
    let header = header_bytes(grid.geometry(), &[], DT_UINT16);
    let payload = grid.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(path.as_ref(), header, payload, compress)
}

pub fn write_image(grid: &ImageGrid, path: impl AsRef<Path>, compress: bool) -> Result<()> {
    let fits_i16 = grid
        .data()
        .iter()
        .all(|&v| v.fract() == 0.0 && (f32::from(i16::MIN)..=f32::from(i16::MAX)).contains(&v));
    let (datatype, payload): (i16, Vec<u8>) = if fits_i16 {
        (
            DT_INT16,
            grid.data().iter().flat_map(|&v| (v as i16).to_le_bytes()).collect(),
        )
    } else {
        (
            DT_FLOAT32,
            grid.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        )
    };
    let header = header_bytes(grid.geometry(), &[], datatype);
    write_file(path.as_ref(), header, payload, compress)
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>, compress: bool) -> Result<()> {
    match volume {
        Volume::Image(g) => write_image(g, path, compress),
        Volume::Labels(g) => write_labels(g, path, compress),
    }
}

/// Write a 4D float32 volume whose fourth axis holds `channels` values per
/// voxel. `value(voxel, channel)` supplies the data.
pub fn write_channels(
    geometry: &Geometry,
    channels: usize,
    value: impl Fn(usize, usize) -> f32,
    path: impl AsRef<Path>,
    compress: bool,
) -> Result<()> {
    let header = header_bytes(geometry, &[channels], DT_FLOAT32);
    let n = geometry.num_voxels();
    let mut payload = Vec::with_capacity(n * channels * 4);
    for c in 0..channels {
        for i in 0..n {
            payload.extend_from_slice(&value(i, c).to_le_bytes());
        }
    }
    write_file(path.as_ref(), header, payload, compress)
}
