//! Binary tensor snapshots.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BTSR" | version u8 | dtype u8 | ndim u8 | shape: ndim × u32 | payload
//! ```
//!
//! The payload is `product(shape)` scalars, `f64` (dtype 0) or `f32`
//! (dtype 1). Several snapshots may be concatenated in one stream.

use std::io::{self, Read, Write};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BTSR";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64 = 0,
    F32 = 1,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            other => Err(TensorError::Format(format!("unknown dtype code {other}"))),
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: Dtype) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(TensorError::Format(format!("{} dimensions do not fit in a u8", t.ndim())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype as u8, t.ndim() as u8])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    match dtype {
        Dtype::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one snapshot; `Ok(None)` on a clean end of stream.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 4];
    match r.read(&mut magic[..1])? {
        0 => return Ok(None),
        _ => r.read_exact(&mut magic[1..])?,
    }
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let mut head = [0u8; 3];
    r.read_exact(&mut head)?;
    if head[0] != VERSION {
        return Err(TensorError::Format(format!("unsupported version {}", head[0])));
    }
    let dtype = Dtype::from_code(head[1])?;
    let mut shape = Vec::with_capacity(head[2] as usize);
    for _ in 0..head[2] {
        let mut d = [0u8; 4];
        r.read_exact(&mut d)?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().product();
    let width = match dtype {
        Dtype::F64 => 8,
        Dtype::F32 => 4,
    };
    let mut payload = vec![0u8; n * width];
    r.read_exact(&mut payload)?;
    let data = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Tensor::new(&shape, data).map(Some)
}

pub fn write_all<W: Write>(w: &mut W, tensors: &[Tensor], dtype: Dtype) -> Result<()> {
    tensors.iter().try_for_each(|t| write_tensor(w, t, dtype))
}

pub fn read_all<R: Read>(r: &mut R) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    while let Some(t) = read_tensor(r)? {
        out.push(t);
    }
    Ok(out)
}

pub fn to_bytes(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t, dtype).expect("writing to a Vec cannot fail");
    buf
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = io::Cursor::new(bytes);
    read_tensor(&mut cursor)?.ok_or_else(|| TensorError::Format("empty stream".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let bytes = to_bytes(&t, Dtype::F64);
        assert_eq!(&bytes[..4], b"BTSR");
        assert_eq!(&bytes[4..7], &[1, 0, 2]);
        assert_eq!(&bytes[7..11], &2u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &1u32.to_le_bytes());
        assert_eq!(&bytes[15..23], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 15 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(from_bytes(b"XXXX\x01\x00\x00").is_err());
        let bytes = to_bytes(&Tensor::ones(&[3]), Dtype::F64);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn concatenated_stream() {
        let a = Tensor::ones(&[2, 2]);
        let b = Tensor::scalar(7.0);
        let mut buf = Vec::new();
        write_all(&mut buf, &[a.clone(), b.clone()], Dtype::F64).unwrap();
        let back = read_all(&mut io::Cursor::new(buf)).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_exact(
            shape in proptest::collection::vec(0usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed ^ i as u64) as f64).sin() * 1e3).collect();
            let t = Tensor::new(&shape, data).unwrap();
            prop_assert_eq!(from_bytes(&to_bytes(&t, Dtype::F64)).unwrap(), t.clone());
            let f32_back = from_bytes(&to_bytes(&t, Dtype::F32)).unwrap();
            prop_assert!(f32_back.max_abs_diff(&t).unwrap() <= 1e3 * 1e-7);
        }
    }
}
