//! Transformer building blocks over a [`Bound`] parameter set: linear layers,
//! affine layer norm, multi-head self-attention, MLP and the pre-norm block
//! `z' = z + MSA(LN(z)); z = z' + MLP(LN(z'))`.

use rand::Rng;

use crate::error::Result;
use crate::params::{normal_tensor, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn linear<'t, T: Scalar>(p: &Bound<'t, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let y = x.matmul(w)?;
    match p.get(&format!("{prefix}.bias")) {
        Ok(b) => Ok(y.add(b)?),
        Err(_) => Ok(y),
    }
}

pub fn layer_norm<'t, T: Scalar>(p: &Bound<'t, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let gamma = p.get(&format!("{prefix}.gamma"))?;
    let beta = p.get(&format!("{prefix}.beta"))?;
    Ok(x.layer_norm_last(T::lit(LAYER_NORM_EPS)).mul(gamma)?.add(beta)?)
}

fn split_heads<'t, T: Scalar>(x: Var<'t, T>, b: usize, s: usize, heads: usize, dh: usize) -> Result<Var<'t, T>> {
    Ok(x
        .reshape([b, s, heads, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape([b * heads, s, dh])?)
}

/// Multi-head self-attention over `x: [B, S, D]`.
pub fn attention<'t, T: Scalar>(p: &Bound<'t, T>, prefix: &str, x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let q = split_heads(linear(p, &format!("{prefix}.q"), x)?, b, s, heads, dh)?;
    let k = split_heads(linear(p, &format!("{prefix}.k"), x)?, b, s, heads, dh)?;
    let v = split_heads(linear(p, &format!("{prefix}.v"), x)?, b, s, heads, dh)?;
    let scores = q
        .bmm(k.transpose_last2()?)?
        .scale(T::one() / T::lit(dh as f64).sqrt());
    let ctx = scores
        .softmax_last()
        .bmm(v)?
        .reshape([b, heads, s, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape([b, s, d])?;
    linear(p, &format!("{prefix}.out"), ctx)
}

pub fn mlp<'t, T: Scalar>(p: &Bound<'t, T>, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let h = linear(p, &format!("{prefix}.fc1"), x)?.gelu();
    linear(p, &format!("{prefix}.fc2"), h)
}

/// Pre-norm transformer block.
pub fn block<'t, T: Scalar>(p: &Bound<'t, T>, prefix: &str, x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let a = attention(p, &format!("{prefix}.attn"), layer_norm(p, &format!("{prefix}.ln1"), x)?, heads)?;
    let x = x.add(a)?;
    let m = mlp(p, &format!("{prefix}.mlp"), layer_norm(p, &format!("{prefix}.ln2"), x)?)?;
    Ok(x.add(m)?)
}

/// `N(0, std²)` weight `[fan_in, fan_out]`, zero bias. `std = None` uses `sqrt(1/fan_in)`.
pub fn init_linear<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    std: Option<f64>,
) {
    let std = std.unwrap_or((1.0 / fan_in as f64).sqrt());
    store.insert(format!("{prefix}.weight"), normal_tensor(rng, &[fan_in, fan_out], std));
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros([fan_out]));
    }
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full([dim], T::one()));
    store.insert(format!("{prefix}.beta"), Tensor::zeros([dim]));
}

pub fn init_block<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    dim: usize,
    hidden: usize,
    std: Option<f64>,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    for part in ["q", "k", "v", "out"] {
        init_linear(store, rng, &format!("{prefix}.attn.{part}"), dim, dim, true, std);
    }
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_linear(store, rng, &format!("{prefix}.mlp.fc1"), dim, hidden, true, std);
    init_linear(store, rng, &format!("{prefix}.mlp.fc2"), hidden, dim, true, std);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_norm_rows_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Tensor<f64> = normal_tensor(&mut rng, &[5, 16], 3.0);
        let tape = Tape::new();
        let y = tape.constant(&x).layer_norm_last(0.0).value();
        for r in 0..5 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        // One head, identity q/k/v/out projections, zero biases, length-1 sequence.
        let d = 4;
        let mut store = ParamStore::<f64>::new();
        for part in ["q", "k", "v", "out"] {
            store.insert(format!("a.{part}.weight"), Tensor::eye(d));
            store.insert(format!("a.{part}.bias"), Tensor::zeros([d]));
        }
        let tape = Tape::new();
        let p = store.bind(&tape, |_| false);
        let x = Tensor::from_f64([1, 1, d], &[0.3, -1.0, 2.0, 0.5]).unwrap();
        let y = attention(&p, "a", tape.constant(&x), 1).unwrap().value();
        assert_eq!(y.data(), x.data());
    }
}
