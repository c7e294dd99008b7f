//! Detached-header volume files.
//!
//! A grid is stored as two files: a plain-text header (conventionally
//! `*.vhdr`) and a raw little-endian payload. Header grammar:
//!
//! ```text
//! VOLGRID1
//! # comment lines start with '#'
//! dims: <nx> <ny> <nz>
//! spacing: <dx> <dy> <dz>
//! dtype: f32 | u8
//! encoding: raw
//! endian: little
//! data file: <payload path, relative to the header's directory>
//! ```
//!
//! The magic line must come first. `dims`, `spacing`, `dtype`, `encoding`
//! and `data file` are required; `endian` is optional and only `little` is
//! accepted. Any other field name is rejected. Spacing values are written in
//! shortest round-trip form, so a write followed by a read reproduces the
//! grid bit for bit. The payload is x-fastest, z-slowest.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dims3, Grid, Spacing3, VolgridError, Voxel};

pub const MAGIC: &str = "VOLGRID1";

/// On-disk representation of a voxel type.
pub trait VoxelCodec: Voxel {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn encode(&self, out: &mut Vec<u8>);
    /// `None` when the bytes do not form a legal value of this type.
    fn decode(bytes: &[u8]) -> Option<Self>;
}

impl VoxelCodec for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn decode(bytes: &[u8]) -> Option<Self> {
        let v = f32::from_le_bytes(bytes.try_into().ok()?);
        v.is_finite().then_some(v)
    }
}

impl VoxelCodec for bool {
    const DTYPE: &'static str = "u8";
    const BYTES: usize = 1;
    fn encode(&self, out: &mut Vec<u8>) {
        out.push(*self as u8);
    }
    fn decode(bytes: &[u8]) -> Option<Self> {
        match bytes[0] {
            0 => Some(false),
            1 => Some(true),
            _ => None,
        }
    }
}

/// Parsed header fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub dims: Dims3,
    pub spacing: Spacing3,
    pub dtype: String,
    pub data_file: PathBuf,
}

fn malformed(msg: impl Into<String>) -> VolgridError {
    VolgridError::MalformedHeader(msg.into())
}

pub fn parse_header(text: &str) -> Result<Header, VolgridError> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    match lines.next() {
        Some(MAGIC) => {}
        other => return Err(malformed(format!("expected magic {MAGIC}, found {other:?}"))),
    }
    let mut dims = None;
    let mut spacing = None;
    let mut dtype = None;
    let mut encoding = None;
    let mut data_file = None;
    for line in lines {
        let (key, value) = line.split_once(':').ok_or_else(|| malformed(format!("line without ':' separator: {line}")))?;
        let value = value.trim();
        match key.trim() {
            "dims" => {
                let v = parse_triple::<usize>(value)?;
                if v.contains(&0) {
                    return Err(malformed("dims must be positive"));
                }
                dims = Some(v);
            }
            "spacing" => {
                let [dx, dy, dz] = parse_triple::<f64>(value)?;
                spacing = Some(Spacing3::new(dx, dy, dz).map_err(|e| malformed(e.to_string()))?);
            }
            "dtype" => dtype = Some(value.to_string()),
            "encoding" => encoding = Some(value.to_string()),
            "endian" => {
                if value != "little" {
                    return Err(VolgridError::UnsupportedEncoding(format!("endian {value}")));
                }
            }
            "data file" => data_file = Some(PathBuf::from(value)),
            other => return Err(malformed(format!("unknown field '{other}'"))),
        }
    }
    let encoding = encoding.ok_or_else(|| malformed("missing field 'encoding'"))?;
    if encoding != "raw" {
        return Err(VolgridError::UnsupportedEncoding(encoding));
    }
    Ok(Header {
        dims: dims.ok_or_else(|| malformed("missing field 'dims'"))?,
        spacing: spacing.ok_or_else(|| malformed("missing field 'spacing'"))?,
        dtype: dtype.ok_or_else(|| malformed("missing field 'dtype'"))?,
        data_file: data_file.ok_or_else(|| malformed("missing field 'data file'"))?,
    })
}

fn parse_triple<T: std::str::FromStr>(value: &str) -> Result<[T; 3], VolgridError> {
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|p| p.parse::<T>().map_err(|_| malformed(format!("bad number '{p}'"))))
        .collect::<Result<_, _>>()?;
    <[T; 3]>::try_from(parts).map_err(|_| malformed(format!("expected three values in '{value}'")))
}

pub fn format_header(dims: Dims3, spacing: Spacing3, dtype: &str, data_file: &str) -> String {
    format!(
        "{MAGIC}\ndims: {} {} {}\nspacing: {:?} {:?} {:?}\ndtype: {dtype}\nencoding: raw\nendian: little\ndata file: {data_file}\n",
        dims[0], dims[1], dims[2], spacing.dx, spacing.dy, spacing.dz
    )
}

/// Payload path for a header path: same stem, `.raw` extension.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

pub fn write_grid<T: VoxelCodec>(grid: &Grid<T>, header_path: &Path) -> Result<(), VolgridError> {
    let payload = payload_path(header_path);
    let name = payload
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| malformed("payload path has no file name"))?;
    let mut bytes = Vec::with_capacity(grid.len() * T::BYTES);
    for v in grid.data() {
        v.encode(&mut bytes);
    }
    fs::write(&payload, bytes)?;
    fs::write(header_path, format_header(grid.dims(), grid.spacing(), T::DTYPE, name))?;
    Ok(())
}

pub fn read_grid<T: VoxelCodec>(header_path: &Path) -> Result<Grid<T>, VolgridError> {
    let header = parse_header(&fs::read_to_string(header_path)?)?;
    if header.dtype != T::DTYPE {
        return Err(VolgridError::WrongDtype {
            expected: T::DTYPE.into(),
            found: header.dtype,
        });
    }
    let payload = header_path.parent().unwrap_or_else(|| Path::new(".")).join(&header.data_file);
    let bytes = fs::read(payload)?;
    decode_payload(&header, &bytes)
}

pub fn decode_payload<T: VoxelCodec>(header: &Header, bytes: &[u8]) -> Result<Grid<T>, VolgridError> {
    let n = header.dims.iter().product::<usize>();
    let expected = n * T::BYTES;
    if bytes.len() != expected {
        return Err(VolgridError::SizeMismatch { expected, actual: bytes.len() });
    }
    let mut data = Vec::with_capacity(n);
    for (index, chunk) in bytes.chunks_exact(T::BYTES).enumerate() {
        data.push(T::decode(chunk).ok_or(VolgridError::InvalidVoxel { index })?);
    }
    Grid::new(header.dims, header.spacing, data)
}

pub fn read_volume(path: &Path) -> Result<super::Volume3, VolgridError> {
    read_grid(path)
}

pub fn write_volume(vol: &super::Volume3, path: &Path) -> Result<(), VolgridError> {
    write_grid(vol, path)
}

pub fn read_mask(path: &Path) -> Result<super::Mask3, VolgridError> {
    read_grid(path)
}

pub fn write_mask(mask: &super::Mask3, path: &Path) -> Result<(), VolgridError> {
    write_grid(mask, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::{Mask3, Volume3};
    use rand::{Rng, SeedableRng};

    #[test]
    fn random_volume_roundtrips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = Spacing3::new(0.8, 0.8, 0.987).unwrap();
        let v = Volume3::from_fn([8, 8, 8], s, |_, _, _| rng.gen_range(-1000.0f32..3000.0));
        let path = dir.path().join("vol.vhdr");
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing(), s);
        let a: Vec<u32> = v.data().iter().map(|f| f.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|f| f.to_bits()).collect();
        assert_eq!(a, b);

        let m = v.map(|x| x > 500.0);
        let mpath = dir.path().join("mask.vhdr");
        write_mask(&m, &mpath).unwrap();
        assert_eq!(read_mask(&mpath).unwrap(), m);
    }

    #[test]
    fn short_payload_is_size_mismatch() {
        let h = parse_header("VOLGRID1\ndims: 2 2 2\nspacing: 1 1 1\ndtype: f32\nencoding: raw\ndata file: x.raw\n").unwrap();
        let err = decode_payload::<f32>(&h, &[0u8; 7 * 4]).unwrap_err();
        assert!(matches!(err, VolgridError::SizeMismatch { expected: 32, actual: 28 }));
    }

    #[test]
    fn header_spacing_is_echoed() {
        let h = parse_header("VOLGRID1\ndims: 3 4 5\nspacing: 0.8 0.8 0.987\ndtype: u8\nencoding: raw\nendian: little\ndata file: m.raw\n").unwrap();
        assert_eq!(h.spacing, Spacing3::new(0.8, 0.8, 0.987).unwrap());
        assert_eq!(h.dims, [3, 4, 5]);
    }

    #[test]
    fn header_errors() {
        let base = "dims: 2 2 2\nspacing: 1 1 1\ndtype: f32\ndata file: x.raw\n";
        assert!(matches!(
            parse_header(&format!("VOLGRID1\n{base}encoding: gzip\n")),
            Err(VolgridError::UnsupportedEncoding(_))
        ));
        assert!(matches!(
            parse_header(&format!("VOLGRID1\n{base}encoding: raw\nendian: big\n")),
            Err(VolgridError::UnsupportedEncoding(_))
        ));
        assert!(matches!(
            parse_header(&format!("VOLGRID1\n{base}encoding: raw\ncolour: blue\n")),
            Err(VolgridError::MalformedHeader(_))
        ));
        assert!(matches!(parse_header(&format!("{base}encoding: raw\n")), Err(VolgridError::MalformedHeader(_))));
        assert!(matches!(
            parse_header("VOLGRID1\ndims: 2 2\nspacing: 1 1 1\ndtype: f32\nencoding: raw\ndata file: x\n"),
            Err(VolgridError::MalformedHeader(_))
        ));
        assert!(matches!(
            parse_header("VOLGRID1\nspacing: 1 1 1\ndtype: f32\nencoding: raw\ndata file: x\n"),
            Err(VolgridError::MalformedHeader(_))
        ));
    }

    #[test]
    fn wrong_dtype_and_bad_mask_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume3::filled([2, 2, 2], Spacing3::isotropic(1.0).unwrap(), 1.0);
        let path = dir.path().join("v.vhdr");
        write_volume(&v, &path).unwrap();
        assert!(matches!(read_mask(&path), Err(VolgridError::WrongDtype { .. })));

        let h = parse_header("VOLGRID1\ndims: 2 1 1\nspacing: 1 1 1\ndtype: u8\nencoding: raw\ndata file: m.raw\n").unwrap();
        assert!(matches!(decode_payload::<bool>(&h, &[0, 2]), Err(VolgridError::InvalidVoxel { index: 1 })));
        let _: Mask3 = decode_payload(&h, &[0, 1]).unwrap();
    }
}
