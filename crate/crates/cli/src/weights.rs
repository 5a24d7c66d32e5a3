//! Binary weights file.
//!
//! Little-endian layout, in order:
//!
//! ```text
//! magic   4 bytes   b"ATWT"
//! version u32       1
//! count   u32       number of tensors
//! then per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   is_bias  u8 (0 or 1)
//!   rank     u32
//!   dims     u32 x rank
//!   values   f64 x product(dims)
//! ```
//!
//! Only model parameters are stored; optimizer state (velocity buffers)
//! never enters this file.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context};

use adaptune_core::models::ModelParams;
use adaptune_core::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ATWT";
const VERSION: u32 = 1;

pub fn save_weights(params: &ModelParams, path: &Path) -> anyhow::Result<()> {
    let mut w = BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[u8::from(p.is_bias)])?;
        w.write_all(&(p.tensor.shape().len() as u32).to_le_bytes())?;
        for &d in p.tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.tensor.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> anyhow::Result<ModelParams> {
    let mut r = BufReader::new(
        std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!("{}: not a weights file (bad magic)", path.display());
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        bail!("{}: unsupported weights version {version}", path.display());
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).context("tensor name must be UTF-8")?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        params.insert(&name, flag[0] != 0, Tensor::new(shape, values)?)?;
    }
    Ok(params)
}

fn read_u32(r: &mut impl Read) -> anyhow::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use adaptune_core::models::{ClassifierModel, ModelSpec};
    use adaptune_core::SeededRng;

    #[test]
    fn roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut rng = SeededRng::new(1);
        let model = ModelSpec::Mlp { hidden: 5 }.build(&[3], 4, &mut rng).unwrap();
        save_weights(model.params(), &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(&back, model.params());
    }

    #[test]
    fn file_holds_exactly_the_parameters() {
        // No optimizer state sneaks in: the byte length is fully accounted
        // for by the header plus the parameter payload.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut rng = SeededRng::new(2);
        let model = ModelSpec::SoftmaxRegression.build(&[3], 2, &mut rng).unwrap();
        save_weights(model.params(), &path).unwrap();
        let expected: usize = 4
            + 4
            + 4
            + model
                .params()
                .iter()
                .map(|p| 4 + p.name.len() + 1 + 4 + 4 * p.tensor.shape().len() + 8 * p.tensor.len())
                .sum::<usize>();
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, expected);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.bin");
        std::fs::write(&path, b"not a weights file").unwrap();
        assert!(load_weights(&path).is_err());
    }
}
