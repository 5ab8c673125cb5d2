use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Multi-head scaled dot-product attention of `queries` (M×d) over
/// `keys`/`values` (N×d), heads split along the feature axis.
pub fn multi_head(tape: &mut Tape, queries: Var, keys: Var, values: Var, heads: usize) -> Result<Var> {
    let d = tape.value(queries).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (q, k, v) = if heads == 1 {
            (queries, keys, values)
        } else {
            (
                tape.slice_cols(queries, h * dh, dh)?,
                tape.slice_cols(keys, h * dh, dh)?,
                tape.slice_cols(values, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(weights, v)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}
