//! Minimal single-file NIfTI-1 reader and writer.
//!
//! Supports uncompressed `.nii` volumes with 3 spatial dimensions and
//! uint8 / int16 / float32 payloads, little-endian only. Integer data is
//! converted to float32 on read, honouring `scl_slope` / `scl_inter`.
//! Writing always produces float32 data at `vox_offset` 352 with slope 1 and
//! intercept 0. Orientation fields (qform/sform) are carried through
//! untouched; this library never reorients.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::volume::{Mask, Orientation, Volume};

const HEADER_SIZE: usize = 348;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// Read a 3D volume from a single-file NIfTI-1 image.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_nifti(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::Unsupported(msg) => Error::Unsupported(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Read a NIfTI image and threshold it into a binary mask.
pub fn read_nifti_mask(path: &Path) -> Result<Mask> {
    let v = read_nifti(path)?;
    Ok(Mask::from_volume(&v))
}

fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "file too short for a NIfTI-1 header ({} bytes)",
            bytes.len()
        )));
    }
    let sizeof_hdr = LittleEndian::read_i32(&bytes[0..4]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::Format(format!(
            "sizeof_hdr is {sizeof_hdr}, expected 348 (big-endian or not NIfTI-1)"
        )));
    }
    let magic = &bytes[344..348];
    if magic != MAGIC_SINGLE {
        if magic == b"ni1\0" {
            return Err(Error::Unsupported("two-file NIfTI (.hdr/.img) images".into()));
        }
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }

    let ndim = LittleEndian::read_i16(&bytes[40..42]);
    if ndim != 3 {
        return Err(Error::Unsupported(format!(
            "{ndim}-dimensional image; only 3 spatial dimensions are handled"
        )));
    }
    let mut shape = [0usize; 3];
    for a in 0..3 {
        let d = LittleEndian::read_i16(&bytes[42 + 2 * a..44 + 2 * a]);
        if d <= 0 {
            return Err(Error::Format(format!("non-positive dim[{}] = {d}", a + 1)));
        }
        shape[a] = d as usize;
    }

    let datatype = LittleEndian::read_i16(&bytes[70..72]);
    let bitpix = LittleEndian::read_i16(&bytes[72..74]);
    let bytes_per = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::Unsupported(format!(
                "datatype code {other}; supported codes are 2 (uint8), 4 (int16), 16 (float32)"
            )))
        }
    };
    if bitpix as usize != bytes_per * 8 {
        return Err(Error::Format(format!(
            "bitpix {bitpix} inconsistent with datatype {datatype}"
        )));
    }

    let mut spacing = [0f32; 3];
    for a in 0..3 {
        let s = LittleEndian::read_f32(&bytes[76 + 4 * (a + 1)..80 + 4 * (a + 1)]);
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Format(format!("non-positive pixdim[{}] = {s}", a + 1)));
        }
        spacing[a] = s;
    }

    let vox_offset = LittleEndian::read_f32(&bytes[108..112]);
    if !vox_offset.is_finite() || vox_offset < HEADER_SIZE as f32 {
        return Err(Error::Format(format!("bad vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;

    let slope_raw = LittleEndian::read_f32(&bytes[112..116]);
    let inter_raw = LittleEndian::read_f32(&bytes[116..120]);
    let slope = if slope_raw == 0.0 || !slope_raw.is_finite() { 1.0 } else { slope_raw };
    let inter = if inter_raw.is_finite() { inter_raw } else { 0.0 };

    let n = shape[0] * shape[1] * shape[2];
    let need = offset + n * bytes_per;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "truncated payload: need {need} bytes, file has {}",
            bytes.len()
        )));
    }
    let payload = &bytes[offset..need];
    let mut data = vec![0f32; n];
    match datatype {
        DT_UINT8 => {
            for (d, &b) in data.iter_mut().zip(payload.iter()) {
                *d = b as f32;
            }
        }
        DT_INT16 => {
            for (i, d) in data.iter_mut().enumerate() {
                *d = LittleEndian::read_i16(&payload[2 * i..2 * i + 2]) as f32;
            }
        }
        DT_FLOAT32 => {
            LittleEndian::read_f32_into(payload, &mut data);
        }
        _ => unreachable!(),
    }
    if slope != 1.0 || inter != 0.0 {
        for d in &mut data {
            *d = *d * slope + inter;
        }
    }

    let orient = Orientation {
        qform_code: LittleEndian::read_i16(&bytes[252..254]),
        sform_code: LittleEndian::read_i16(&bytes[254..256]),
        quatern: [
            LittleEndian::read_f32(&bytes[256..260]),
            LittleEndian::read_f32(&bytes[260..264]),
            LittleEndian::read_f32(&bytes[264..268]),
        ],
        qoffset: [
            LittleEndian::read_f32(&bytes[268..272]),
            LittleEndian::read_f32(&bytes[272..276]),
            LittleEndian::read_f32(&bytes[276..280]),
        ],
        srow: [
            read_row(&bytes[280..296]),
            read_row(&bytes[296..312]),
            read_row(&bytes[312..328]),
        ],
    };

    let mut v = Volume::new(shape, spacing, data)?;
    v.set_origin(orient.qoffset);
    v.set_orientation(orient);
    Ok(v)
}

fn read_row(b: &[u8]) -> [f32; 4] {
    [
        LittleEndian::read_f32(&b[0..4]),
        LittleEndian::read_f32(&b[4..8]),
        LittleEndian::read_f32(&b[8..12]),
        LittleEndian::read_f32(&b[12..16]),
    ]
}

/// Write a volume as single-file NIfTI-1, float32 little-endian.
pub fn write_nifti(path: &Path, v: &Volume) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let shape = v.shape();
    let spacing = v.spacing();
    let o = v.orientation();

    w.write_i32::<LittleEndian>(HEADER_SIZE as i32)?; // sizeof_hdr
    w.write_all(&[0u8; 35])?; // data_type, db_name, extents, session_error, regular
    w.write_u8(0)?; // dim_info
    w.write_i16::<LittleEndian>(3)?; // dim[0]
    for a in 0..3 {
        w.write_i16::<LittleEndian>(shape[a] as i16)?;
    }
    for _ in 0..4 {
        w.write_i16::<LittleEndian>(1)?; // dim[4..7]
    }
    w.write_all(&[0u8; 14])?; // intent_p1..p3, intent_code
    w.write_i16::<LittleEndian>(DT_FLOAT32)?;
    w.write_i16::<LittleEndian>(32)?; // bitpix
    w.write_i16::<LittleEndian>(0)?; // slice_start
    w.write_f32::<LittleEndian>(1.0)?; // pixdim[0] (qfac)
    for a in 0..3 {
        w.write_f32::<LittleEndian>(spacing[a])?;
    }
    for _ in 0..4 {
        w.write_f32::<LittleEndian>(0.0)?; // pixdim[4..7]
    }
    w.write_f32::<LittleEndian>(352.0)?; // vox_offset
    w.write_f32::<LittleEndian>(1.0)?; // scl_slope
    w.write_f32::<LittleEndian>(0.0)?; // scl_inter
    w.write_i16::<LittleEndian>(0)?; // slice_end
    w.write_u8(0)?; // slice_code
    w.write_u8(2)?; // xyzt_units: millimetres
    w.write_all(&[0u8; 16])?; // cal_max..toffset
    w.write_all(&[0u8; 8])?; // glmax, glmin
    w.write_all(&[0u8; 80])?; // descrip
    w.write_all(&[0u8; 24])?; // aux_file
    w.write_i16::<LittleEndian>(o.qform_code)?;
    w.write_i16::<LittleEndian>(o.sform_code)?;
    for q in o.quatern {
        w.write_f32::<LittleEndian>(q)?;
    }
    let origin = v.origin();
    for x in origin {
        w.write_f32::<LittleEndian>(x)?;
    }
    for row in o.srow {
        for x in row {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    w.write_all(&[0u8; 16])?; // intent_name
    w.write_all(MAGIC_SINGLE)?;
    w.write_all(&[0u8; 4])?; // pad to vox_offset 352

    let mut buf = vec![0u8; v.data().len() * 4];
    LittleEndian::write_f32_into(v.data(), &mut buf);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Write a binary mask as a float32 NIfTI image (values 0.0 / 1.0).
pub fn write_nifti_mask(path: &Path, m: &Mask) -> Result<()> {
    write_nifti(path, &m.to_volume())
}
