//! Parameterised layers built from graph ops.

use super::{AttentionMask, Graph, ParamId, ParamStore, Scalar, Var};
use crate::error::Result;
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Gaussian weights with std `gain / sqrt(din)`, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add_normal(format!("{name}.w"), &[din, dout], gain / (din as f64).sqrt(), rng)?;
        let b = if bias {
            Some(store.add_zeros(format!("{name}.b"), &[dout])?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_ones(format!("{name}.gamma"), &[d])?,
            beta: store.add_zeros(format!("{name}.beta"), &[d])?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Pre-norm transformer block: self-attention then a GELU MLP, each residual.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = width * mlp_ratio;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width)?,
            q: Linear::new(store, &format!("{name}.attn.q"), width, width, true, 1.0, rng)?,
            k: Linear::new(store, &format!("{name}.attn.k"), width, width, true, 1.0, rng)?,
            v: Linear::new(store, &format!("{name}.attn.v"), width, width, true, 1.0, rng)?,
            o: Linear::new(store, &format!("{name}.attn.o"), width, width, true, 0.5, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), width, hidden, true, 1.0, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, width, true, 0.5, rng)?,
            heads,
        })
    }

    /// `x` holds `batch` equal-length sequences stacked by rows.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let a = self.ln1.forward(g, store, x)?;
        let q = self.q.forward(g, store, a)?;
        let k = self.k.forward(g, store, a)?;
        let v = self.v.forward(g, store, a)?;
        let att = g.attention(q, k, v, self.heads, batch, mask)?;
        let att = self.o.forward(g, store, att)?;
        let x = g.add(x, att)?;
        let m = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, m)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::{gradient_check, gradient_check_params};
    use rand::SeedableRng;

    #[test]
    fn composed_block_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let block = Block::new(&mut store, "b", 8, 2, 2, &mut rng).unwrap();
        let mut xs = ParamStore::<f64>::new();
        let xid = xs.add_normal("x", &[6, 8], 1.0, &mut rng).unwrap();
        let x = xs.get(xid).value.clone();
        let mask = AttentionMask::causal(3);
        let wrt_input = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let y = block.forward(g, &store, v[0], 2, Some(&mask))?;
            Ok(g.sum(y))
        };
        let rep = gradient_check(wrt_input, std::slice::from_ref(&x), 1e-6).unwrap();
        assert!(rep.passed, "{rep:?}");
        let wrt_weights = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
            let xin = g.constant(x.clone());
            let y = block.forward(g, s, xin, 2, Some(&mask))?;
            Ok(g.sum(y))
        };
        let rep = gradient_check_params(&store, wrt_weights, 1e-6).unwrap();
        assert!(rep.passed, "{rep:?}");
        let store32 = store.cast::<f32>();
        let rep = gradient_check_params(
            &store32,
            |g, s| {
                let xin = g.constant(x.cast());
                let y = block.forward(g, s, xin, 2, Some(&mask))?;
                Ok(g.sum(y))
            },
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
