use crate::error::{dim_err, Result};
use crate::ssm::fused::{self, Dims};
use crate::tensor::{Element, Tensor};

impl<T: Element> Tensor<T> {
    /// Differentiable selective scan over channel-first sequences.
    ///
    /// `self` is the input `u (S, E, L)`; `delta` matches it, `a` is the
    /// continuous diagonal `(E, N)`, `b` and `c` are per-step `(S, N, L)`
    /// shared across channels, `d` is the skip gain `(E)`. Each step is
    /// ZOH-discretized with its own Δ. The hidden states and discretized
    /// coefficients are kept for the backward pass, so memory is `3·S·E·N·L`.
    pub fn selective_scan(
        &self,
        delta: &Tensor<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
        c: &Tensor<T>,
        d: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let &[seqs, channels, len] = self.shape() else {
            return Err(dim_err!("scan input must be (S, E, L), got {:?}", self.shape()));
        };
        let &[ae, state] = a.shape() else {
            return Err(dim_err!("A must be (E, N), got {:?}", a.shape()));
        };
        if delta.shape() != self.shape() {
            return Err(dim_err!("Δ shape {:?} differs from input {:?}", delta.shape(), self.shape()));
        }
        if ae != channels || d.shape() != [channels] {
            return Err(dim_err!("A {:?} / D {:?} do not match {} channels", a.shape(), d.shape(), channels));
        }
        for (name, t) in [("B", b), ("C", c)] {
            if t.shape() != [seqs, state, len] {
                return Err(dim_err!("{} must be {:?}, got {:?}", name, [seqs, state, len], t.shape()));
            }
        }
        let dims = Dims { seqs, channels, state, len };
        let (y, trace) = fused::forward(dims, self.data(), delta.data(), a.data(), b.data(), c.data(), d.data());
        let saved = [self, delta, a, b, c, d].map(|t| t.data_rc());
        Ok(Tensor::from_op(vec![seqs, channels, len], y, &[self, delta, a, b, c, d], move |gy| {
            let [u, dt, a, b, c, d] = &saved;
            let g = fused::backward(dims, u, dt, a, b, c, d, &trace, gy);
            vec![Some(g.u), Some(g.delta), Some(g.a), Some(g.b), Some(g.c), Some(g.d)]
        }))
    }
}
