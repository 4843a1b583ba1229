//! Parameter checkpoints.
//!
//! Layout: the magic `DSEB1`, then for each parameter its name length,
//! UTF-8 name, rank and dims (all `u32` little-endian) followed by its values
//! as `f64` little-endian. Entries run to end of file.

use std::io::{self, Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DSEB1";

pub fn write_checkpoint<'a, W: Write>(
    out: &mut W,
    params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    for (name, tensor) in params {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn malformed(what: &str) -> Error {
    Error::data("<checkpoint>", format!("malformed checkpoint: {what}"))
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(malformed("bad magic"));
    }
    let mut pos = 5;
    let mut take = |n: usize| -> Result<&[u8]> {
        let slice = bytes
            .get(pos..pos + n)
            .ok_or_else(|| malformed("truncated"))?;
        pos += n;
        Ok(slice)
    };
    let mut params = Vec::new();
    loop {
        let Ok(len) = take(4) else { break };
        let name_len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
        let name =
            String::from_utf8(take(name_len)?.to_vec()).map_err(|_| malformed("name not UTF-8"))?;
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let raw = take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let a =
            Tensor::matrix(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap();
        let b = Tensor::scalar(0.1);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("enc.w", &a), ("bias", &b)]).unwrap();
        assert_eq!(&buf[..5], b"DSEB1");
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "enc.w");
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(back[0].1.shape(), &[2, 3]);
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&mut &b"XXXX1"[..]).is_err());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("w", &Tensor::vector(vec![1.0, 2.0]))]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
