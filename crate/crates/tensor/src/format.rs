//! FTN1 binary tensor format.
//!
//! Layout: magic `FTN1`, one byte rank, `rank` little-endian u32 dims, then
//! the row-major payload as little-endian f32.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const FTN1_MAGIC: &[u8; 4] = b"FTN1";

pub fn write_ftn1<W: Write>(mut w: W, tensor: &Tensor) -> Result<()> {
    let rank = u8::try_from(tensor.rank()).map_err(|_| TensorError::Format(format!("rank {} exceeds 255", tensor.rank())))?;
    let mut buf = Vec::with_capacity(5 + 4 * tensor.rank() + 4 * tensor.numel());
    buf.extend_from_slice(FTN1_MAGIC);
    buf.push(rank);
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_ftn1<R: Read>(mut r: R) -> Result<Tensor> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)?;
    if &head[..4] != FTN1_MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let rank = head[4] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        r.read_exact(&mut d)?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    crate::tensor::check_shape(&shape)?;
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(TensorError::Format("trailing bytes after payload".into()));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_ftn1(&mut buf, &t).unwrap();
        let mut expected = b"FTN1".to_vec();
        expected.push(2);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        assert!(read_ftn1(&b"FTN2\x01\x01\x00\x00\x00"[..]).is_err());
        assert!(read_ftn1(&b"FTN1\x01\x02\x00\x00\x00\x00\x00\x80\x3f"[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_ftn1(&mut buf, &t).unwrap();
            let back = read_ftn1(&buf[..]).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
