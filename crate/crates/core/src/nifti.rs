//! NIfTI-1 file I/O (.nii and .nii.gz).
//!
//! Reads and writes single-file little-endian NIfTI-1 with the fields this
//! toolkit needs: dimensions, voxel spacing, scaling slope/intercept, and the
//! qform/sform orientation block (carried through verbatim, never resampled).
//! Volumes are written as float32, label maps as uint8. NIfTI extensions,
//! big-endian files, and paired .hdr/.img files are rejected with a
//! descriptive error naming the path.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Orientation, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_UINT16: i16 = 512;

struct RawHeader {
    dim: [i16; 8],
    datatype: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    scl_slope: f32,
    scl_inter: f32,
    orientation: Orientation,
}

fn read_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn read_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn read_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn parse_header(path: &Path, buf: &[u8]) -> Result<RawHeader> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::nifti(path, "file truncated before end of header"));
    }
    let sizeof_hdr = read_i32(buf, 0);
    if sizeof_hdr != 348 {
        if sizeof_hdr.swap_bytes() == 348 {
            return Err(Error::nifti(path, "big-endian NIfTI files are not supported"));
        }
        return Err(Error::nifti(
            path,
            format!("bad sizeof_hdr {sizeof_hdr}, not a NIfTI-1 file"),
        ));
    }
    let magic = &buf[344..348];
    if magic == b"ni1\0" {
        return Err(Error::nifti(path, "paired .hdr/.img NIfTI files are not supported"));
    }
    if magic != b"n+1\0" {
        return Err(Error::nifti(path, "missing NIfTI-1 magic"));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = read_i16(buf, 40 + 2 * i);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = read_f32(buf, 76 + 4 * i);
    }
    let orientation = Orientation {
        qform_code: read_i16(buf, 252),
        sform_code: read_i16(buf, 254),
        quatern: [read_f32(buf, 256), read_f32(buf, 260), read_f32(buf, 264)],
        qoffset: [read_f32(buf, 268), read_f32(buf, 272), read_f32(buf, 276)],
        srow: [
            [
                read_f32(buf, 280),
                read_f32(buf, 284),
                read_f32(buf, 288),
                read_f32(buf, 292),
            ],
            [
                read_f32(buf, 296),
                read_f32(buf, 300),
                read_f32(buf, 304),
                read_f32(buf, 308),
            ],
            [
                read_f32(buf, 312),
                read_f32(buf, 316),
                read_f32(buf, 320),
                read_f32(buf, 324),
            ],
        ],
        qfac: pixdim[0],
    };
    Ok(RawHeader {
        dim,
        datatype: read_i16(buf, 70),
        pixdim,
        vox_offset: read_f32(buf, 108),
        scl_slope: read_f32(buf, 112),
        scl_inter: read_f32(buf, 116),
        orientation,
    })
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        let mut decoder = MultiGzDecoder::new(file);
        decoder
            .read_to_end(&mut bytes)
            .map_err(|e| Error::nifti(path, format!("gzip decode failed: {e}")))?;
    } else {
        let mut reader = file;
        reader
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(bytes)
}

fn element_size(datatype: i16) -> Option<usize> {
    match datatype {
        DT_UINT8 => Some(1),
        DT_INT16 | DT_UINT16 => Some(2),
        DT_INT32 | DT_FLOAT32 => Some(4),
        DT_FLOAT64 => Some(8),
        _ => None,
    }
}

fn decode_voxel(datatype: i16, bytes: &[u8]) -> f32 {
    match datatype {
        DT_UINT8 => bytes[0] as f32,
        DT_INT16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f32,
        DT_UINT16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f32,
        DT_INT32 => i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f32,
        DT_FLOAT32 => f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
        DT_FLOAT64 => f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ]) as f32,
        _ => unreachable!("unsupported datatype checked earlier"),
    }
}

/// Load a 3D volume from a NIfTI-1 file, applying the header's scaling
/// slope/intercept if set. Spacing is read from pixdim.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let header = parse_header(path, &bytes)?;

    let ndim = header.dim[0];
    if !(3..=7).contains(&ndim) {
        return Err(Error::nifti(
            path,
            format!("expected a 3D payload, got dim[0] = {ndim}"),
        ));
    }
    for d in 4..=(ndim as usize) {
        if header.dim[d] > 1 {
            return Err(Error::nifti(
                path,
                format!("expected a 3D payload, but dim[{d}] = {}", header.dim[d]),
            ));
        }
    }
    let shape = [header.dim[1], header.dim[2], header.dim[3]];
    if shape.iter().any(|d| *d < 1) {
        return Err(Error::nifti(path, format!("bad spatial dims {shape:?}")));
    }
    let shape = [shape[0] as usize, shape[1] as usize, shape[2] as usize];
    let n = shape[0] * shape[1] * shape[2];

    let elem = element_size(header.datatype).ok_or_else(|| {
        Error::nifti(path, format!("unsupported datatype {}", header.datatype))
    })?;
    let offset = header.vox_offset as usize;
    if offset < HEADER_SIZE {
        return Err(Error::nifti(path, format!("bad vox_offset {offset}")));
    }
    let needed = offset + n * elem;
    if bytes.len() < needed {
        return Err(Error::nifti(
            path,
            format!("file truncated: need {needed} bytes, have {}", bytes.len()),
        ));
    }

    let apply_scaling =
        header.scl_slope != 0.0 && !(header.scl_slope == 1.0 && header.scl_inter == 0.0);
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = decode_voxel(header.datatype, &bytes[offset + i * elem..]);
        if apply_scaling {
            v = v * header.scl_slope + header.scl_inter;
        }
        values.push(v);
    }
    // NIfTI stores data in Fortran order: the first index varies fastest.
    let mut data = Array3::zeros((shape[0], shape[1], shape[2]));
    let mut it = values.into_iter();
    for k in 0..shape[2] {
        for j in 0..shape[1] {
            for i in 0..shape[0] {
                data[[i, j, k]] = it.next().unwrap();
            }
        }
    }

    let spacing = [
        header.pixdim[1].abs(),
        header.pixdim[2].abs(),
        header.pixdim[3].abs(),
    ];
    if spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::nifti(
            path,
            format!("non-positive voxel spacing {spacing:?}"),
        ));
    }
    Volume::new(data, spacing)
        .map_err(|e| Error::nifti(path, e.to_string()))
        .map(|v| v.with_orientation(Some(header.orientation)))
}

fn encode_header(
    shape: [usize; 3],
    spacing: [f32; 3],
    datatype: i16,
    bitpix: i16,
    orientation: Option<&Orientation>,
) -> [u8; VOX_OFFSET] {
    let mut buf = [0u8; VOX_OFFSET];
    buf[0..4].copy_from_slice(&348i32.to_le_bytes());
    // dim
    buf[40..42].copy_from_slice(&3i16.to_le_bytes());
    for (i, &d) in shape.iter().enumerate() {
        buf[42 + 2 * i..44 + 2 * i].copy_from_slice(&(d as i16).to_le_bytes());
    }
    for i in 4..8 {
        buf[40 + 2 * i..42 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
    }
    buf[70..72].copy_from_slice(&datatype.to_le_bytes());
    buf[72..74].copy_from_slice(&bitpix.to_le_bytes());
    // pixdim: [qfac, sx, sy, sz, 1, 1, 1, 1]
    let qfac = orientation.map_or(1.0, |o| if o.qfac == 0.0 { 1.0 } else { o.qfac });
    buf[76..80].copy_from_slice(&qfac.to_le_bytes());
    for (i, &s) in spacing.iter().enumerate() {
        buf[80 + 4 * i..84 + 4 * i].copy_from_slice(&s.to_le_bytes());
    }
    for i in 4..8 {
        buf[76 + 4 * i..80 + 4 * i].copy_from_slice(&1f32.to_le_bytes());
    }
    buf[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    buf[112..116].copy_from_slice(&1f32.to_le_bytes()); // scl_slope
    buf[116..120].copy_from_slice(&0f32.to_le_bytes()); // scl_inter
    if let Some(o) = orientation {
        buf[252..254].copy_from_slice(&o.qform_code.to_le_bytes());
        buf[254..256].copy_from_slice(&o.sform_code.to_le_bytes());
        for (i, q) in o.quatern.iter().enumerate() {
            buf[256 + 4 * i..260 + 4 * i].copy_from_slice(&q.to_le_bytes());
        }
        for (i, q) in o.qoffset.iter().enumerate() {
            buf[268 + 4 * i..272 + 4 * i].copy_from_slice(&q.to_le_bytes());
        }
        for (r, row) in o.srow.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let off = 280 + 16 * r + 4 * c;
                buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
            }
        }
    }
    buf[344..348].copy_from_slice(b"n+1\0");
    // bytes 348..352 are the extension flag, all zeros: no extensions
    buf
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut encoder = GzEncoder::new(file, Compression::fast());
        encoder.write_all(bytes).map_err(|e| Error::io(path, e))?;
        encoder.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut writer = file;
        writer.write_all(bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Save a volume as float32 NIfTI-1 (.nii or .nii.gz by extension).
pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let shape = volume.shape();
    let header = encode_header(
        shape,
        volume.spacing,
        DT_FLOAT32,
        32,
        volume.orientation.as_ref(),
    );
    let mut bytes = Vec::with_capacity(VOX_OFFSET + volume.num_voxels() * 4);
    bytes.extend_from_slice(&header);
    for k in 0..shape[2] {
        for j in 0..shape[1] {
            for i in 0..shape[0] {
                bytes.extend_from_slice(&volume.data[[i, j, k]].to_le_bytes());
            }
        }
    }
    write_all(path, &bytes)
}

/// Save a label map as uint8 NIfTI-1.
pub fn save_labelmap(label: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let shape = label.shape();
    let header = encode_header(shape, label.spacing, DT_UINT8, 8, None);
    let mut bytes = Vec::with_capacity(VOX_OFFSET + label.data.len());
    bytes.extend_from_slice(&header);
    for k in 0..shape[2] {
        for j in 0..shape[1] {
            for i in 0..shape[0] {
                bytes.push(label.data[[i, j, k]]);
            }
        }
    }
    write_all(path, &bytes)
}

/// Load a binary label map, binarizing as `value > threshold`.
///
/// The default threshold of 0.5 is robust to interpolation dust in masks
/// that went through resampling before being stored.
pub fn load_labelmap(path: impl AsRef<Path>, threshold: f32) -> Result<LabelMap> {
    let volume = load_volume(path)?;
    let data = volume.data.mapv(|v| u8::from(v > threshold));
    LabelMap::new(data, volume.spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn random_volume(shape: (usize, usize, usize), spacing: [f32; 3]) -> Volume {
        let mut rng = crate::rng::stream(11, "nifti-test", &[]);
        let data = Array3::from_shape_fn(shape, |_| rng.random_range(-100.0f32..100.0));
        Volume::new(data, spacing).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume((8, 8, 8), [1.0, 2.0, 3.0]);
        let path = dir.path().join("v.nii");
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.data, v.data);
        assert_eq!(back.spacing, v.spacing);
    }

    #[test]
    fn round_trip_gzip_preserves_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume((4, 4, 4), [3.0, 3.0, 6.0]);
        let path = dir.path().join("v.nii.gz");
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.data, v.data);
        assert_eq!(back.spacing, [3.0, 3.0, 6.0]);
    }

    #[test]
    fn representative_spacing_survives() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume((4, 4, 4), [3.0, 3.0, 3.0]);
        let path = dir.path().join("v.nii");
        save_volume(&v, &path).unwrap();
        assert_eq!(load_volume(&path).unwrap().spacing, [3.0, 3.0, 3.0]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume((6, 6, 6), [1.0, 1.0, 1.0]);
        let path = dir.path().join("v.nii");
        save_volume(&v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.nii");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_volume(&cut).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn missing_file_is_descriptive() {
        let err = load_volume("/nonexistent/missing.nii").unwrap_err();
        assert!(err.to_string().contains("missing.nii"), "{err}");
    }

    #[test]
    fn labelmap_round_trip_stays_binary() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Array3::<u8>::zeros((5, 5, 5));
        data[[2, 2, 2]] = 1;
        data[[1, 2, 3]] = 1;
        let label = LabelMap::new(data, [1.0, 1.0, 1.0]).unwrap();
        let path = dir.path().join("l.nii.gz");
        save_labelmap(&label, &path).unwrap();
        let back = load_labelmap(&path, 0.5).unwrap();
        assert_eq!(back.data, label.data);

        // the same holds when a label is saved via its volume view
        let vpath = dir.path().join("lv.nii");
        save_volume(&label.to_volume(), &vpath).unwrap();
        let back = load_labelmap(&vpath, 0.5).unwrap();
        assert_eq!(back.data, label.data);
    }

    #[test]
    fn labelmap_threshold_binarizes() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Array3::<f32>::zeros((3, 3, 3));
        data[[1, 1, 1]] = 0.7;
        data[[0, 0, 0]] = 0.4;
        let v = Volume::new(data, [1.0, 1.0, 1.0]).unwrap();
        let path = dir.path().join("soft.nii");
        save_volume(&v, &path).unwrap();
        let label = load_labelmap(&path, 0.5).unwrap();
        assert_eq!(label.data[[1, 1, 1]], 1);
        assert_eq!(label.data[[0, 0, 0]], 0);
        assert_eq!(label.count(), 1);
    }

    #[test]
    fn all_zero_labelmap_loads_as_empty() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(Array3::zeros((4, 4, 4)), [1.0, 1.0, 1.0]).unwrap();
        let path = dir.path().join("zero.nii");
        save_volume(&v, &path).unwrap();
        let label = load_labelmap(&path, 0.5).unwrap();
        assert!(label.is_empty());
    }

    #[test]
    fn orientation_carried_through() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = random_volume((4, 4, 4), [1.0, 1.0, 1.0]);
        v.orientation = Some(Orientation {
            qform_code: 1,
            sform_code: 1,
            quatern: [0.0, 0.5, 0.5],
            qoffset: [-10.0, 4.0, 7.5],
            srow: [
                [1.0, 0.0, 0.0, -10.0],
                [0.0, 1.0, 0.0, 4.0],
                [0.0, 0.0, 1.0, 7.5],
            ],
            qfac: -1.0,
        });
        let path = dir.path().join("o.nii");
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.orientation, v.orientation);
    }
}
