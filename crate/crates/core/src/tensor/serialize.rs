//! Tensor wire format: a header line `shape: d0 d1 ... / dtype: f32|f64`
//! followed by the elements as a little-endian stream.

use std::io::{BufRead, Write};

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub fn write_tensor<T: Element>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    writeln!(w, "shape: {} / dtype: {}", dims.join(" "), T::DTYPE.name())?;
    let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.width());
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn parse_header(line: &str) -> Result<(Vec<usize>, DType)> {
    let bad = || Error::Format(format!("bad tensor header {line:?}"));
    let rest = line.trim_end().strip_prefix("shape: ").ok_or_else(bad)?;
    let (dims, dtype) = rest.split_once(" / dtype: ").ok_or_else(bad)?;
    let shape = dims
        .split_whitespace()
        .map(|d| d.parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    if shape.is_empty() || shape.contains(&0) {
        return Err(bad());
    }
    let dtype = DType::parse(dtype).ok_or_else(bad)?;
    Ok((shape, dtype))
}

/// Reads one tensor. The stored dtype must match `T`.
pub fn read_tensor<T: Element>(r: &mut impl BufRead) -> Result<Tensor<T>> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Err(Error::Format("unexpected end of file before tensor header".into()));
    }
    let (shape, dtype) = parse_header(&line)?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "tensor stored as {} but {} was requested",
            dtype.name(),
            T::DTYPE.name()
        )));
    }
    let numel: usize = shape.iter().product();
    let width = dtype.width();
    let mut bytes = vec![0u8; numel * width];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated tensor payload: {e}")))?;
    let data = bytes.chunks_exact(width).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_vec([2, 3], vec![0.0; 6]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert!(buf.starts_with(b"shape: 2 3 / dtype: f32\n"));
        assert_eq!(buf.len(), "shape: 2 3 / dtype: f32\n".len() + 24);
    }

    #[test]
    fn dtype_mismatch_and_truncation_are_format_errors() {
        let t = Tensor::<f64>::from_vec([2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert!(matches!(read_tensor::<f32>(&mut Cursor::new(&buf)), Err(Error::Format(_))));
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensor::<f64>(&mut Cursor::new(&buf)), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.rotate_left(i as u32) >> 2)).collect();
            let t = Tensor::<f64>::from_vec(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back: Tensor<f64> = read_tensor(&mut Cursor::new(&buf)).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
