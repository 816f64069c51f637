//! Checkpoint container: a versioned header followed by named f64 arrays.

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MBCKPT01";

pub fn save_arrays(path: &Path, arrays: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(arrays.len() as u32)?;
    for (name, arr) in arrays {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("array name too long: {name}")));
        }
        w.write_u16::<LittleEndian>(bytes.len() as u16)?;
        w.write_all(bytes)?;
        w.write_u8(arr.ndim() as u8)?;
        for &d in arr.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in arr.as_standard_layout().iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_arrays(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic (not a checkpoint or unsupported version)",
            path.display()
        )));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Checkpoint(format!("invalid array name: {e}")))?;
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))?;
        out.insert(name, arr);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut arrays = BTreeMap::new();
        arrays.insert(
            "enc.conv1.w".to_string(),
            ArrayD::from_shape_fn(IxDyn(&[2, 3, 3, 3]), |ix| (ix[0] * 100 + ix[3]) as f64 * 0.5),
        );
        arrays.insert(
            "step".to_string(),
            ArrayD::from_elem(IxDyn(&[1]), 42.0),
        );
        save_arrays(&path, &arrays).unwrap();
        let back = load_arrays(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back["enc.conv1.w"], arrays["enc.conv1.w"]);
        assert_eq!(back["step"][[0]], 42.0);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTACKPTxxxxxxx").unwrap();
        assert!(load_arrays(&path).is_err());
    }
}
