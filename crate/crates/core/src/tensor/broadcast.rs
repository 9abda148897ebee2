use super::{numel, Result, TensorError};

/// Result shape of trailing-dimension broadcasting, as in NumPy.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// How an operand's flat index is derived from an output flat index.
#[derive(Debug, Clone)]
pub(crate) enum SourceIndex {
    /// Operand has the output shape.
    Same,
    /// Operand equals a trailing block of the output; index is `i % len`.
    Cycle(usize),
    /// General case: explicit lookup table.
    Table(Vec<usize>),
}

impl SourceIndex {
    pub(crate) fn new(src: &[usize], out: &[usize]) -> Self {
        if src == out {
            return SourceIndex::Same;
        }
        let trimmed: Vec<usize> = src
            .iter()
            .copied()
            .skip_while(|&d| d == 1)
            .collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return SourceIndex::Cycle(numel(&trimmed));
        }
        // Strides of the source expressed in output coordinates; broadcast axes get 0.
        let rank = out.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            let oi = i + rank - src.len();
            strides[oi] = if src[i] == 1 { 0 } else { acc };
            acc *= src[i];
        }
        let total = numel(out);
        let mut table = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..total {
            table.push(offset);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                offset += strides[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                offset -= strides[ax] * out[ax];
                idx[ax] = 0;
            }
        }
        SourceIndex::Table(table)
    }

    #[inline]
    pub(crate) fn get(&self, i: usize) -> usize {
        match self {
            SourceIndex::Same => i,
            SourceIndex::Cycle(n) => i % n,
            SourceIndex::Table(t) => t[i],
        }
    }
}
