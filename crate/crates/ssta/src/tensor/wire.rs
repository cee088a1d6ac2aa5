//! Tensor wire format, used by checkpoints, dataset chunks, and gradient
//! packets crossing worker threads.
//!
//! Each record is a compact JSON header object
//! `{"shape": [...], "dtype": "f32"|"f64", "name": "..."}` terminated by
//! a newline, followed by the raw little-endian IEEE-754 scalars. Records
//! may be concatenated in one stream.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Result, Scalar, Tensor, TensorError, DTYPE};

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
    name: String,
}

pub fn write_tensor<W: Write>(w: &mut W, name: &str, tensor: &Tensor) -> Result<()> {
    let header = Header {
        shape: tensor.shape().to_vec(),
        dtype: DTYPE.to_string(),
        name: name.to_string(),
    };
    let json = serde_json::to_string(&header).map_err(|e| TensorError::Wire(e.to_string()))?;
    w.write_all(json.as_bytes())?;
    w.write_all(b"\n")?;
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one record. Returns `Ok(None)` at a clean end of stream. Scalars
/// stored at the other precision are converted to the active [`Scalar`].
pub fn read_tensor<R: BufRead>(r: &mut R) -> Result<Option<(String, Tensor)>> {
    let mut line = String::new();
    let n = r.read_line(&mut line)?;
    if n == 0 {
        return Ok(None);
    }
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| TensorError::Wire(format!("bad header {line:?}: {e}")))?;
    let numel: usize = header.shape.iter().product();
    let data = match header.dtype.as_str() {
        "f64" => {
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes)?;
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Scalar)
                .collect()
        }
        "f32" => {
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes)?;
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Scalar)
                .collect()
        }
        other => return Err(TensorError::Wire(format!("unknown dtype {other:?}"))),
    };
    Ok(Some((header.name, Tensor::new(header.shape, data)?)))
}

/// Serializes one tensor to an owned byte buffer.
pub fn to_bytes(name: &str, tensor: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + tensor.numel() * std::mem::size_of::<Scalar>());
    write_tensor(&mut buf, name, tensor).expect("writing to a Vec cannot fail");
    buf
}

/// Deserializes one tensor from a byte buffer produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<(String, Tensor)> {
    let mut cursor = std::io::Cursor::new(bytes);
    read_tensor(&mut cursor)?.ok_or_else(|| TensorError::Wire("empty buffer".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_preserves_bits() {
        let t = Tensor::new(vec![2, 3], vec![0.0, -1.5, 3.25, 1e-300_f64 as Scalar, 7.0, -0.0])
            .unwrap();
        let bytes = to_bytes("weights/w0", &t);
        let (name, back) = from_bytes(&bytes).unwrap();
        assert_eq!(name, "weights/w0");
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn concatenated_records_stream() {
        let a = Tensor::filled(vec![2], 1.0);
        let b = Tensor::filled(vec![3], 2.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, "a", &a).unwrap();
        write_tensor(&mut buf, "b", &b).unwrap();
        let mut cursor = std::io::Cursor::new(buf);
        let (n1, t1) = read_tensor(&mut cursor).unwrap().unwrap();
        let (n2, t2) = read_tensor(&mut cursor).unwrap().unwrap();
        assert!(read_tensor(&mut cursor).unwrap().is_none());
        assert_eq!((n1.as_str(), t1.numel()), ("a", 2));
        assert_eq!((n2.as_str(), t2.numel()), ("b", 3));
    }

    proptest! {
        #[test]
        fn round_trip_any_shape(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seedish in any::<i32>(),
        ) {
            let numel: usize = dims.iter().product();
            let data: Vec<Scalar> = (0..numel)
                .map(|i| ((i as Scalar) + (seedish as Scalar) * 0.125) / 7.0)
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let (name, back) = from_bytes(&to_bytes("x", &t)).unwrap();
            prop_assert_eq!(name, "x");
            prop_assert_eq!(back, t);
        }
    }
}
