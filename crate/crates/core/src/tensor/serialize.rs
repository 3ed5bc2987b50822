//! Little-endian tensor layout:
//!
//! ```text
//! u32            rank
//! rank × u64     dims
//! numel × f64    values, row-major, IEEE-754 bits
//! ```

use super::{Result, Tensor, TensorError};

pub fn tensor_byte_len(t: &Tensor) -> usize {
    4 + 8 * t.rank() + 8 * t.numel()
}

pub fn write_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(TensorError::Decode(format!(
            "need {n} bytes, {} left",
            bytes.len()
        )));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Reads one tensor from the front of `bytes`, advancing the slice.
pub fn read_tensor(bytes: &mut &[u8]) -> Result<Tensor> {
    let rank = u32::from_le_bytes(take(bytes, 4)?.try_into().unwrap()) as usize;
    if rank == 0 || rank > 8 {
        return Err(TensorError::Decode(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, 8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| TensorError::Decode("dim overflow".into()))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= bytes.len() / 8)
        .ok_or_else(|| TensorError::Decode(format!("shape {shape:?} exceeds payload")))?;
    let raw = take(bytes, numel * 8)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_little_endian() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf);
        assert_eq!(buf.len(), tensor_byte_len(&t));
        assert_eq!(&buf[..4], &[2, 0, 0, 0]);
        assert_eq!(&buf[4..12], &1u64.to_le_bytes());
        assert_eq!(&buf[20..28], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_input_is_rejected() {
        let t = Tensor::ones(&[3]);
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf);
        buf.pop();
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            dims in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::Rng::new(seed);
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.normal() * 1e3).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&t, &mut buf);
            let mut slice = buf.as_slice();
            let back = read_tensor(&mut slice).unwrap();
            prop_assert!(slice.is_empty());
            prop_assert!(back.bit_eq(&t));
        }
    }
}
