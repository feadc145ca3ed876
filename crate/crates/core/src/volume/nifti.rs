//! Reader and writer for the single-file, uncompressed, little-endian NIfTI-1
//! subset: `n+1` magic, three spatial dimensions, datatypes uint8 / int16 /
//! float32. The writer always emits float32.
//!
//! The writer stores the subject id in `descrip` and the modality tag in
//! `aux_file`, so `parse_nifti(write_nifti(v)) == v` holds for every valid
//! volume whose id fits in 79 bytes.

use byteorder::{ByteOrder, LittleEndian};

use super::{Dims, Modality, Volume};
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DATA_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const REGULAR: usize = 38;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const AUX_FILE: usize = 228;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

const DESCRIP_LEN: usize = 80;
const AUX_FILE_LEN: usize = 24;

/// Header fields the subset reads. The affine is carried for inspection only;
/// the depth axis is always taken as axial, as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dims: Dims,
    pub datatype: i16,
    pub bitpix: i16,
    pub spacing: [f32; 3],
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    pub srow: [[f32; 4]; 3],
    pub descrip: String,
    pub aux_file: String,
}

impl NiftiHeader {
    fn elem_size(&self) -> usize {
        match self.datatype {
            DT_UINT8 => 1,
            DT_INT16 => 2,
            _ => 4,
        }
    }
}

fn c_string(bytes: &[u8]) -> String {
    let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
    String::from_utf8_lossy(&bytes[..end]).into_owned()
}

pub fn parse_nifti_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(Error::BadHeader("gzip-compressed input is not supported".into()));
    }
    if bytes.len() < HEADER_SIZE {
        return Err(Error::TruncatedData {
            needed: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let sizeof_hdr = LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            Error::BadHeader("big-endian files are not supported".into())
        } else {
            Error::BadHeader(format!("sizeof_hdr = {sizeof_hdr}, expected 348"))
        });
    }
    let magic: [u8; 4] = bytes[offsets::MAGIC..offsets::MAGIC + 4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }

    let mut dim = [0i16; 8];
    LittleEndian::read_i16_into(&bytes[offsets::DIM..offsets::DIM + 16], &mut dim);
    let rank = dim[0];
    if !(3..=7).contains(&rank) || dim[4..=rank as usize].iter().any(|&d| d != 1) {
        return Err(Error::BadHeader(format!(
            "expected three spatial dimensions, got dim = {dim:?}"
        )));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(Error::BadHeader(format!("non-positive extent in dim = {dim:?}")));
    }
    let dims = Dims::new(dim[2] as usize, dim[1] as usize, dim[3] as usize);

    let datatype = LittleEndian::read_i16(&bytes[offsets::DATATYPE..]);
    let bitpix = LittleEndian::read_i16(&bytes[offsets::BITPIX..]);
    let expected_bitpix = match datatype {
        DT_UINT8 => 8,
        DT_INT16 => 16,
        DT_FLOAT32 => 32,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    if bitpix != expected_bitpix {
        return Err(Error::BadHeader(format!(
            "bitpix {bitpix} inconsistent with datatype {datatype}"
        )));
    }

    let mut pixdim = [0f32; 8];
    LittleEndian::read_f32_into(&bytes[offsets::PIXDIM..offsets::PIXDIM + 32], &mut pixdim);
    let vox_offset = LittleEndian::read_f32(&bytes[offsets::VOX_OFFSET..]);
    if !(vox_offset >= HEADER_SIZE as f32) || !vox_offset.is_finite() {
        return Err(Error::BadHeader(format!("vox_offset {vox_offset} inside header")));
    }

    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        let at = offsets::SROW_X + 16 * r;
        LittleEndian::read_f32_into(&bytes[at..at + 16], row);
    }

    Ok(NiftiHeader {
        dims,
        datatype,
        bitpix,
        spacing: [pixdim[2], pixdim[1], pixdim[3]],
        vox_offset: vox_offset as usize,
        scl_slope: LittleEndian::read_f32(&bytes[offsets::SCL_SLOPE..]),
        scl_inter: LittleEndian::read_f32(&bytes[offsets::SCL_INTER..]),
        qform_code: LittleEndian::read_i16(&bytes[offsets::QFORM_CODE..]),
        sform_code: LittleEndian::read_i16(&bytes[offsets::SFORM_CODE..]),
        srow,
        descrip: c_string(&bytes[offsets::DESCRIP..offsets::DESCRIP + DESCRIP_LEN]),
        aux_file: c_string(&bytes[offsets::AUX_FILE..offsets::AUX_FILE + AUX_FILE_LEN]),
    })
}

/// Parses a NIfTI-1 blob into a [`Volume`].
///
/// Intensities go through `x * scl_slope + scl_inter` unless the slope is zero
/// (or the pair is the identity). The modality comes from `aux_file` when it
/// names one, T1 otherwise; the subject id comes from `descrip`. Callers that
/// know better (manifest loading) overwrite both.
pub fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    let hdr = parse_nifti_header(bytes)?;
    let n = hdr.dims.len();
    let needed = hdr.vox_offset + n * hdr.elem_size();
    if bytes.len() < needed {
        return Err(Error::TruncatedData {
            needed,
            found: bytes.len(),
        });
    }
    let payload = &bytes[hdr.vox_offset..needed];
    let mut data = vec![0f32; n];
    match hdr.datatype {
        DT_UINT8 => {
            for (x, &b) in data.iter_mut().zip(payload) {
                *x = f32::from(b);
            }
        }
        DT_INT16 => {
            for (x, c) in data.iter_mut().zip(payload.chunks_exact(2)) {
                *x = f32::from(LittleEndian::read_i16(c));
            }
        }
        _ => LittleEndian::read_f32_into(payload, &mut data),
    }

    let (slope, inter) = (hdr.scl_slope, hdr.scl_inter);
    let identity = slope == 0.0 || !slope.is_finite() || (slope == 1.0 && inter == 0.0);
    if !identity {
        for x in &mut data {
            *x = *x * slope + inter;
        }
    }
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let modality = hdr.aux_file.parse().unwrap_or(Modality::T1);
    Volume::new(hdr.dims, data, hdr.spacing, modality, hdr.descrip)
}

fn put_c_string(dst: &mut [u8], s: &str) {
    // keep one byte for the terminator; truncate on a char boundary
    let mut end = s.len().min(dst.len() - 1);
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    dst[..end].copy_from_slice(&s.as_bytes()[..end]);
}

/// Serializes a volume as a canonical float32 NIfTI-1 file.
pub fn write_nifti(v: &Volume) -> Vec<u8> {
    let d = v.dims;
    let mut out = vec![0u8; DATA_OFFSET + 4 * d.len()];
    let hdr = &mut out[..HEADER_SIZE];
    LittleEndian::write_i32(&mut hdr[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
    hdr[offsets::REGULAR] = b'r';
    let dim: [i16; 8] = [
        3,
        d.width as i16,
        d.height as i16,
        d.depth as i16,
        1,
        1,
        1,
        1,
    ];
    LittleEndian::write_i16_into(&dim, &mut hdr[offsets::DIM..offsets::DIM + 16]);
    LittleEndian::write_i16(&mut hdr[offsets::DATATYPE..], DT_FLOAT32);
    LittleEndian::write_i16(&mut hdr[offsets::BITPIX..], 32);
    let [sh, sw, sd] = v.spacing;
    let pixdim = [1.0, sw, sh, sd, 1.0, 1.0, 1.0, 1.0];
    LittleEndian::write_f32_into(&pixdim, &mut hdr[offsets::PIXDIM..offsets::PIXDIM + 32]);
    LittleEndian::write_f32(&mut hdr[offsets::VOX_OFFSET..], DATA_OFFSET as f32);
    LittleEndian::write_f32(&mut hdr[offsets::SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut hdr[offsets::SCL_INTER..], 0.0);
    hdr[offsets::XYZT_UNITS] = 2; // mm
    put_c_string(
        &mut hdr[offsets::DESCRIP..offsets::DESCRIP + DESCRIP_LEN],
        &v.subject_id,
    );
    put_c_string(
        &mut hdr[offsets::AUX_FILE..offsets::AUX_FILE + AUX_FILE_LEN],
        v.modality.as_str(),
    );
    LittleEndian::write_i16(&mut hdr[offsets::SFORM_CODE..], 1);
    let srow = [
        [sw, 0.0, 0.0, 0.0],
        [0.0, sh, 0.0, 0.0],
        [0.0, 0.0, sd, 0.0],
    ];
    for (r, row) in srow.iter().enumerate() {
        let at = offsets::SROW_X + 16 * r;
        LittleEndian::write_f32_into(row, &mut hdr[at..at + 16]);
    }
    hdr[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(&MAGIC);
    LittleEndian::write_f32_into(&v.data, &mut out[DATA_OFFSET..]);
    out
}

pub fn read_nifti_file(path: &std::path::Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes)
}

pub fn write_nifti_file(path: &std::path::Path, v: &Volume) -> Result<()> {
    std::fs::write(path, write_nifti(v)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Builds a 4×4×2 float32 file field by field, independently of `write_nifti`.
    fn hand_built_4x4x2() -> Vec<u8> {
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        for (i, v) in [3i16, 4, 4, 2, 1, 1, 1, 1].iter().enumerate() {
            b[40 + 2 * i..42 + 2 * i].copy_from_slice(&v.to_le_bytes());
        }
        b[70..72].copy_from_slice(&16i16.to_le_bytes());
        b[72..74].copy_from_slice(&32i16.to_le_bytes());
        for (i, v) in [1f32, 1.0, 1.0, 1.0].iter().enumerate() {
            b[76 + 4 * i..80 + 4 * i].copy_from_slice(&v.to_le_bytes());
        }
        b[108..112].copy_from_slice(&352f32.to_le_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        for i in 0..32 {
            b.extend_from_slice(&(i as f32).to_le_bytes());
        }
        b
    }

    #[test]
    fn parses_hand_built_file() {
        let v = parse_nifti(&hand_built_4x4x2()).unwrap();
        assert_eq!(v.dims, Dims::new(4, 4, 2));
        assert_eq!(v.get(0, 0, 0), 0.0);
        assert_eq!(v.get(3, 3, 1), 31.0);
        // x runs fastest on disk
        assert_eq!(v.get(0, 1, 0), 1.0);
        assert_eq!(v.get(1, 0, 0), 4.0);
        assert_eq!(v.get(0, 0, 1), 16.0);
    }

    #[test]
    fn rejects_two_file_magic() {
        let mut b = hand_built_4x4x2();
        b[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(parse_nifti(&b), Err(Error::BadMagic(m)) if &m == b"ni1\0"));
    }

    #[test]
    fn rejects_unsupported_datatype() {
        let mut b = hand_built_4x4x2();
        b[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(parse_nifti(&b), Err(Error::UnsupportedDatatype(64))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut b = hand_built_4x4x2();
        b.truncate(352 + 4 * 31);
        assert!(matches!(
            parse_nifti(&b),
            Err(Error::TruncatedData { needed: 480, found: 476 })
        ));
    }

    #[test]
    fn rejects_nan_payload() {
        let mut b = hand_built_4x4x2();
        b[352 + 4 * 5..352 + 4 * 6].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(parse_nifti(&b), Err(Error::NonFinite(5))));
    }

    #[test]
    fn rejects_gzip_and_big_endian() {
        assert!(matches!(parse_nifti(&[0x1f, 0x8b, 8, 0]), Err(Error::BadHeader(_))));
        let mut b = hand_built_4x4x2();
        b[0..4].copy_from_slice(&348i32.to_be_bytes());
        assert!(matches!(parse_nifti(&b), Err(Error::BadHeader(_))));
    }

    #[test]
    fn int16_with_scaling() {
        let mut b = hand_built_4x4x2();
        b.truncate(352);
        b[70..72].copy_from_slice(&4i16.to_le_bytes());
        b[72..74].copy_from_slice(&16i16.to_le_bytes());
        b[112..116].copy_from_slice(&0.5f32.to_le_bytes());
        b[116..120].copy_from_slice(&10f32.to_le_bytes());
        for i in 0..32i16 {
            b.extend_from_slice(&(i - 16).to_le_bytes());
        }
        let v = parse_nifti(&b).unwrap();
        assert_eq!(v.get(0, 0, 0), -16.0 * 0.5 + 10.0);
        assert_eq!(v.get(3, 3, 1), 15.0 * 0.5 + 10.0);
    }

    #[test]
    fn uint8_zero_slope_is_identity() {
        let mut b = hand_built_4x4x2();
        b.truncate(352);
        b[70..72].copy_from_slice(&2i16.to_le_bytes());
        b[72..74].copy_from_slice(&8i16.to_le_bytes());
        b[116..120].copy_from_slice(&5f32.to_le_bytes()); // ignored with slope 0
        b.extend(0u8..32);
        let v = parse_nifti(&b).unwrap();
        assert_eq!(v.data, (0..32).map(|i| i as f32).collect::<Vec<_>>());
    }

    #[test]
    fn smallest_volume_layout() {
        let v = Volume::new(Dims::new(1, 1, 1), vec![7.0], [1.0; 3], Modality::T1, "s").unwrap();
        let b = write_nifti(&v);
        assert_eq!(b.len(), 348 + 4 + 4);
        assert_eq!(&b[352..], &7f32.to_le_bytes());
        assert_eq!(parse_nifti(&b).unwrap(), v);
    }

    #[test]
    fn spacing_lands_in_pixdim() {
        let v = Volume::new(Dims::new(2, 3, 4), vec![0.0; 24], [1.0, 1.0, 2.0], Modality::T2, "s")
            .unwrap();
        let b = write_nifti(&v);
        assert_eq!(f32::from_le_bytes(b[88..92].try_into().unwrap()), 2.0);
        let hdr = parse_nifti_header(&b).unwrap();
        assert_eq!(hdr.spacing, [1.0, 1.0, 2.0]);
        assert_eq!(hdr.sform_code, 1);
        assert_eq!(hdr.srow[2][2], 2.0);
        let back = parse_nifti(&b).unwrap();
        assert_eq!(back.spacing, [1.0, 1.0, 2.0]);
        assert_eq!(back.modality, Modality::T2);
    }

    #[test]
    fn canonical_bytes_round_trip() {
        let v = Volume::new(
            Dims::new(3, 5, 2),
            (0..30).map(|i| i as f32 * 0.25 - 3.0).collect(),
            [0.9, 1.1, 3.0],
            Modality::Flair,
            "sub-42",
        )
        .unwrap();
        let b = write_nifti(&v);
        assert_eq!(write_nifti(&parse_nifti(&b).unwrap()), b);
    }

    fn arb_volume() -> impl Strategy<Value = Volume> {
        (1usize..9, 1usize..9, 1usize..9, 0usize..3, "[a-z0-9-]{0,20}")
            .prop_flat_map(|(h, w, d, m, id)| {
                (
                    proptest::collection::vec(-1e6f32..1e6, h * w * d),
                    proptest::array::uniform3(0.1f32..5.0),
                )
                    .prop_map(move |(data, spacing)| {
                        Volume::new(Dims::new(h, w, d), data, spacing, Modality::ALL[m], id.clone())
                            .unwrap()
                    })
            })
    }

    proptest! {
        #[test]
        fn parse_inverts_write(v in arb_volume()) {
            let b = write_nifti(&v);
            prop_assert_eq!(parse_nifti(&b).unwrap(), v);
        }
    }
}
