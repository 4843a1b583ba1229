//! Dense tensors, reverse-mode differentiation, and the Adam optimizer.

mod adam;
mod checkpoint;
mod tape;
mod tensor;

pub use adam::{clip_global_norm, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use tape::{Function, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Cosine similarity `⟨u,v⟩/(‖u‖‖v‖)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> crate::Result<f64> {
    if u.len() != v.len() {
        return Err(crate::Error::Shape {
            op: "cosine_similarity",
            left: vec![u.len()],
            right: vec![v.len()],
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (row, norm) in [(0, nu), (1, nv)] {
        if !(norm > 1e-12) {
            return Err(crate::Error::DegenerateEmbedding { row, norm });
        }
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Row-wise unit normalization outside of any tape.
pub fn l2_normalize_rows(x: &Tensor) -> crate::Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.l2_normalize(v)?;
    Ok(tape.value(y).clone())
}
