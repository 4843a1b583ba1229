//! Binary embeddings file: `DSEMB1`, count and dim as u32 LE, a branch tag
//! byte, then per row the utterance id (u32 length + UTF-8 bytes) and `dim`
//! f32 LE values.

use std::io::{self, Read, Write};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const EMBEDDINGS_MAGIC: &[u8; 6] = b"DSEMB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Full,
    Demo,
    Residual,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Full, Branch::Demo, Branch::Residual];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Full => "full",
            Branch::Demo => "demo",
            Branch::Residual => "residual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Branch::ALL.into_iter().find(|b| b.name() == s)
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Branch::ALL.get(tag as usize).copied()
    }
}

/// Embedding rows keyed by utterance id. Values are held in f64 but are
/// always representable in f32, so a write/read cycle is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub branch: Branch,
    pub ids: Vec<String>,
    pub matrix: Tensor,
}

impl Embeddings {
    /// Rounds `matrix` to f32 precision.
    pub fn new(branch: Branch, ids: Vec<String>, matrix: &Tensor) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.rows() != ids.len() {
            return Err(Error::Shape {
                op: "embeddings",
                left: vec![ids.len()],
                right: matrix.shape().to_vec(),
            });
        }
        let data = matrix.data().iter().map(|&v| v as f32 as f64).collect();
        Ok(Embeddings {
            branch,
            ids,
            matrix: Tensor::matrix(matrix.rows(), matrix.cols(), data)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    pub fn write<W: Write>(&self, out: &mut W) -> io::Result<()> {
        out.write_all(EMBEDDINGS_MAGIC)?;
        out.write_all(&(self.ids.len() as u32).to_le_bytes())?;
        out.write_all(&(self.dim() as u32).to_le_bytes())?;
        out.write_all(&[self.branch.tag()])?;
        for (i, id) in self.ids.iter().enumerate() {
            out.write_all(&(id.len() as u32).to_le_bytes())?;
            out.write_all(id.as_bytes())?;
            for &v in self.row(i) {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(input: &mut R) -> Result<Self> {
        let bad = |m: &str| Error::data("<embeddings>", m.to_string());
        let eof = |_| bad("truncated");
        let mut magic = [0u8; 6];
        input.read_exact(&mut magic).map_err(eof)?;
        if &magic != EMBEDDINGS_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 4];
        let mut read_u32 = |input: &mut R| -> Result<usize> {
            input.read_exact(&mut word).map_err(eof)?;
            Ok(u32::from_le_bytes(word) as usize)
        };
        let count = read_u32(input)?;
        let dim = read_u32(input)?;
        let mut tag = [0u8; 1];
        input.read_exact(&mut tag).map_err(eof)?;
        let branch = Branch::from_tag(tag[0]).ok_or_else(|| bad("unknown branch tag"))?;
        let mut ids = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        let mut value = [0u8; 4];
        for _ in 0..count {
            let len = read_u32(input)?;
            let mut id = vec![0u8; len];
            input.read_exact(&mut id).map_err(eof)?;
            ids.push(String::from_utf8(id).map_err(|_| bad("id is not UTF-8"))?);
            for _ in 0..dim {
                input.read_exact(&mut value).map_err(eof)?;
                data.push(f32::from_le_bytes(value) as f64);
            }
        }
        if input.read(&mut tag).map_err(eof)? != 0 {
            return Err(bad("trailing bytes after the last row"));
        }
        Ok(Embeddings {
            branch,
            ids,
            matrix: Tensor::matrix(count, dim, data)?,
        })
    }

    /// Rows for `ids`, in that order.
    pub fn select(&self, ids: &[&str]) -> Result<Tensor> {
        let index: std::collections::HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut data = Vec::with_capacity(ids.len() * self.dim());
        for id in ids {
            let &i = index.get(id).ok_or_else(|| {
                Error::data("<embeddings>", format!("no embedding for utterance `{id}`"))
            })?;
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(ids.len(), self.dim(), data)
    }
}
