//! Named-tensor container format.
//!
//! ```text
//! name d0 d1 d2 d3\n      one header line per tensor
//! ...
//! \n                      blank line ends the header
//! <f32 LE> ...            payloads, concatenated in header order
//! ```

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const KIND: &str = "tensor file";

pub fn write_tensors<'a, W, I>(out: &mut W, tensors: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)> + Clone,
{
    let io = |e| Error::io("<tensor stream>", e);
    for (name, t) in tensors.clone() {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::invalid(
                "write_tensors",
                format!("tensor name {name:?} must be non-empty without whitespace"),
            ));
        }
        let s = t.shape();
        writeln!(out, "{name} {} {} {} {}", s.n, s.c, s.h, s.w).map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

/// Reads a header block and its payloads. `base_offset` is added to reported
/// byte offsets when the stream does not start at the beginning of a file.
pub fn read_tensors<R: BufRead>(input: &mut R, base_offset: usize) -> Result<Vec<(String, Tensor)>> {
    let mut offset = base_offset;
    let mut header = Vec::new();
    loop {
        let mut line = String::new();
        let read = input
            .read_line(&mut line)
            .map_err(|e| Error::io("<tensor stream>", e))?;
        if read == 0 {
            return Err(Error::Format {
                kind: KIND,
                offset,
                msg: "header not terminated by a blank line".into(),
            });
        }
        let line_start = offset;
        offset += read;
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if trimmed.is_empty() {
            break;
        }
        let mut parts = trimmed.split_whitespace();
        let name = parts.next().unwrap_or_default().to_string();
        let dims: std::result::Result<Vec<usize>, _> = parts.map(str::parse).collect();
        let shape = dims
            .ok()
            .and_then(|d| Shape::from_dims(&d))
            .ok_or_else(|| Error::Format {
                kind: KIND,
                offset: line_start,
                msg: format!("bad header line {trimmed:?}"),
            })?;
        header.push((name, shape));
    }

    let mut tensors = Vec::with_capacity(header.len());
    for (name, shape) in header {
        let mut raw = vec![0u8; shape.numel() * 4];
        input.read_exact(&mut raw).map_err(|_| Error::Format {
            kind: KIND,
            offset,
            msg: format!("truncated payload for {name}"),
        })?;
        offset += raw.len();
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_header_blank_line_then_f32_payload() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("w", &t)]).unwrap();
        let header = b"w 1 1 1 2\n\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(&buf[header.len()..header.len() + 4], &1.0f32.to_le_bytes());
        assert_eq!(&buf[header.len() + 4..], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let mut buf = Vec::new();
        write_tensors(&mut buf, [("w", &t)]).unwrap();
        buf.truncate(buf.len() - 1);
        let err = read_tensors(&mut buf.as_slice(), 0).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn bad_header_reports_line_offset() {
        let text = b"a 1 1 1 1\nb 1 x\n\n";
        match read_tensors(&mut &text[..], 0).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 10),
            e => panic!("unexpected {e}"),
        }
    }

    proptest! {
        #[test]
        fn roundtrip_is_exact_for_f32_values(
            vals in proptest::collection::vec(-1e6f32..1e6f32, 1..40),
        ) {
            let n = vals.len();
            let a = Tensor::from_vec(Shape::new(1, 1, 1, n), vals.iter().map(|&v| v as f64).collect()).unwrap();
            let b = Tensor::full(Shape::new(1, 2, 1, 1), 0.25);
            let mut buf = Vec::new();
            write_tensors(&mut buf, [("a", &a), ("b.bias", &b)]).unwrap();
            let back = read_tensors(&mut buf.as_slice(), 0).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].0, "a");
            prop_assert_eq!(&back[0].1, &a);
            prop_assert_eq!(&back[1].1, &b);
        }
    }
}
