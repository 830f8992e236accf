use crate::error::{Error, Result};
use crate::nn::attend_t;
use crate::tensor::{Graph, Tensor};

/// Output and attention weights of [`cross_attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    /// `[n, d_h]`.
    pub output: Tensor,
    /// `[n, L]`, each row sums to one.
    pub weights: Tensor,
}

/// `Softmax(Q·Kᵀ / λ)·V` for queries `[n, d_h]` and prompt keys/values `[L, d_h]`.
pub fn cross_attention(q: &Tensor, k: &Tensor, v: &Tensor, lambda: f64) -> Result<CrossAttention> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Validation(format!("attention temperature {lambda} must be positive")));
    }
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::Shape("cross-attention operands must be matrices".into()));
    }
    if ks != vs || qs[1] != ks[1] {
        return Err(Error::Shape(format!(
            "cross-attention shapes q {qs:?}, k {ks:?}, v {vs:?} are inconsistent"
        )));
    }
    let mut g = Graph::no_grad();
    let qt = g.constant(q.transpose2());
    let kt = g.constant(k.transpose2());
    let vt = g.constant(v.transpose2());
    let l = g.constant(Tensor::full(&[1], lambda));
    let (out, weights) = attend_t(&mut g, qt, kt, vt, Some(l), 1.0);
    Ok(CrossAttention {
        output: g.value(out).transpose2(),
        weights: g.value(weights).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive_temperature() {
        let q = Tensor::zeros(&[2, 3]);
        let k = Tensor::zeros(&[1, 3]);
        assert!(matches!(cross_attention(&q, &k, &k, 0.0), Err(Error::Validation(_))));
        assert!(matches!(cross_attention(&q, &k, &Tensor::zeros(&[2, 3]), 1.0), Err(Error::Shape(_))));
    }
}
