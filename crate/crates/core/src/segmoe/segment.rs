use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// A token sequence `[M, d]` viewed as `C` segments of `ω` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SegBatch {
    /// `[C, ω, d]`; padded slots hold zeros.
    pub data: Tensor,
    /// `C·ω` flags, false for padded slots.
    pub valid: Vec<bool>,
    /// Number of real tokens `M`.
    pub tokens: usize,
}

impl SegBatch {
    pub fn from_tokens(tokens: &Tensor, omega: usize) -> Result<Self> {
        if tokens.rank() != 2 || omega == 0 {
            return Err(Error::InvalidShape {
                shape: tokens.shape().to_vec(),
                reason: format!("segmenting needs [M, d] tokens and ω >= 1 (ω = {omega})"),
            });
        }
        let (m, d) = (tokens.shape()[0], tokens.shape()[1]);
        let c = m.div_ceil(omega);
        let mut data = vec![0.0; c * omega * d];
        data[..m * d].copy_from_slice(tokens.data());
        let valid = (0..c * omega).map(|i| i < m).collect();
        Ok(SegBatch {
            data: Tensor::new(vec![c, omega, d], data)?,
            valid,
            tokens: m,
        })
    }

    pub fn segments(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn omega(&self) -> usize {
        self.data.shape()[1]
    }

    /// Padded slots in the final segment.
    pub fn padding(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    /// Concatenates the valid positions back into `[M, d]`.
    pub fn unsegment(&self) -> Tensor {
        let d = self.data.shape()[2];
        let data = self.data.data()[..self.tokens * d].to_vec();
        Tensor::new(vec![self.tokens, d], data).expect("valid token count")
    }
}

/// Graph form of segmenting: `[Bt, M, d]` → flattened segments `[Bt·C, ω·d]`.
///
/// `pad_fill` (`[Bt, pad, d]`) supplies the raw content of the padded slots;
/// zeros when absent. Padded slots are masked to exact zeros either way.
/// Returns the flattened segments and `C`.
pub fn segment_tokens(g: &mut Graph, x: Var, omega: usize, pad_fill: Option<Var>) -> Result<(Var, usize)> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || omega == 0 {
        return Err(Error::InvalidShape {
            shape,
            reason: format!("segmenting needs [Bt, M, d] and ω >= 1 (ω = {omega})"),
        });
    }
    let (bt, m, d) = (shape[0], shape[1], shape[2]);
    let c = m.div_ceil(omega);
    let pad = c * omega - m;
    let full = if pad == 0 {
        x
    } else {
        let fill = match pad_fill {
            Some(f) => {
                if g.shape(f) != [bt, pad, d] {
                    return Err(Error::Shape {
                        op: "segment_tokens",
                        lhs: g.shape(f).to_vec(),
                        rhs: vec![bt, pad, d],
                    });
                }
                f
            }
            None => g.constant(Tensor::zeros(vec![bt, pad, d])?),
        };
        let cat = g.concat(&[x, fill], 1)?;
        let mask: Vec<bool> = (0..bt * c * omega * d).map(|i| (i / d) % (c * omega) >= m).collect();
        g.mask_fill(cat, &mask, 0.0)?
    };
    Ok((g.reshape(full, &[bt * c, omega * d])?, c))
}

/// Inverse of [`segment_tokens`]: `[Bt·C, ω·d]` → `[Bt, M, d]`, dropping
/// padded slots.
pub fn unsegment_tokens(g: &mut Graph, y: Var, bt: usize, m: usize, d: usize) -> Result<Var> {
    let rows = g.shape(y)[0];
    let width = g.shape(y)[1];
    let omega = width / d;
    let c = rows / bt;
    let seq = g.reshape(y, &[bt, c * omega, d])?;
    if c * omega == m {
        Ok(seq)
    } else {
        g.narrow(seq, 1, 0, m)
    }
}
