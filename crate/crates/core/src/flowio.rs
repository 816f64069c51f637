//! Middlebury-compatible `.flo` flow files.
//!
//! Layout: the float tag 202021.25, then width and height as i32, then
//! row-major interleaved `(u, v)` float32 displacements. Flows are stored
//! internally as `(2, H, W)` f64 with plane 0 = u (x) and plane 1 = v (y).

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

const TAG_FLOAT: f32 = 202021.25;

pub fn write_flo(path: &Path, flow: &Array3<f64>) -> Result<()> {
    let (planes, h, w) = flow.dim();
    if planes != 2 {
        return Err(Error::shape("write_flo", "(2,H,W)", format!("({planes},{h},{w})")));
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_f32::<LittleEndian>(TAG_FLOAT)?;
    out.write_i32::<LittleEndian>(w as i32)?;
    out.write_i32::<LittleEndian>(h as i32)?;
    for y in 0..h {
        for x in 0..w {
            out.write_f32::<LittleEndian>(flow[(0, y, x)] as f32)?;
            out.write_f32::<LittleEndian>(flow[(1, y, x)] as f32)?;
        }
    }
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<Array3<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let tag = r.read_f32::<LittleEndian>()?;
    if tag != TAG_FLOAT {
        return Err(Error::DataFormat(format!(
            "{}: bad flow tag {tag}",
            path.display()
        )));
    }
    let w = r.read_i32::<LittleEndian>()?;
    let h = r.read_i32::<LittleEndian>()?;
    if w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16 {
        return Err(Error::DataFormat(format!(
            "{}: implausible flow size {w}x{h}",
            path.display()
        )));
    }
    let (w, h) = (w as usize, h as usize);
    let mut flow = Array3::<f64>::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            flow[(0, y, x)] = r.read_f32::<LittleEndian>()? as f64;
            flow[(1, y, x)] = r.read_f32::<LittleEndian>()? as f64;
        }
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let flow = Array3::from_shape_fn((2, 5, 7), |(p, y, x)| {
            (p as f64 - 0.5) * (y as f64 * 0.25 - x as f64 * 0.125)
        });
        write_flo(&path, &flow).unwrap();
        let back = read_flo(&path).unwrap();
        assert_eq!(back.dim(), (2, 5, 7));
        for (a, b) in flow.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_tag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        std::fs::write(&path, [0u8; 32]).unwrap();
        assert!(read_flo(&path).is_err());
    }
}
