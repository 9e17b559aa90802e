use crate::cmx::Tensor3;
use crate::error::{shape_err, Result};
use crate::substrate::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
struct Conv {
    kernel: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

/// Convolutional critic emitting one realism score per receptive-field
/// patch: two stride-2 4x4 convolutions and a 3x3 head, so a `C x M x M`
/// input yields an `(M/4) x (M/4)` score map.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator<T> {
    pub store: ParamStore<T>,
    convs: [Conv; 3],
    channels: usize,
    size: usize,
}

impl<T: Scalar> PatchDiscriminator<T> {
    pub fn new(channels: usize, size: usize, hidden: usize, seed: u64) -> Result<Self> {
        if size < 4 || !size.is_multiple_of(4) || channels == 0 || hidden == 0 {
            return shape_err(format!("discriminator needs side divisible by 4, got {size}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let mut conv = |name: &str, cin: usize, cout: usize, k: usize, stride, pad| -> Result<Conv> {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            Ok(Conv {
                kernel: s.add_normal(format!("disc.{name}.w"), &[cout, cin, k, k], std, &mut rng)?,
                bias: s.add_zeros(format!("disc.{name}.b"), &[cout])?,
                stride,
                pad,
            })
        };
        let convs = [
            conv("conv0", channels, hidden, 4, 2, 1)?,
            conv("conv1", hidden, 2 * hidden, 4, 2, 1)?,
            conv("head", 2 * hidden, 1, 3, 1, 1)?,
        ];
        Ok(Self {
            store: s,
            convs,
            channels,
            size,
        })
    }

    pub fn cast<U: Scalar>(&self) -> PatchDiscriminator<U> {
        PatchDiscriminator {
            store: self.store.cast(),
            convs: self.convs,
            channels: self.channels,
            size: self.size,
        }
    }

    pub fn score_side(&self) -> usize {
        self.size / 4
    }

    /// `x: [batch, C, M, M]` to scores `[batch, 1, M/4, M/4]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1] != self.channels || xs[2] != self.size || xs[3] != self.size {
            return shape_err(format!(
                "discriminator expects [b, {}, {}, {}], got {xs:?}",
                self.channels, self.size, self.size
            ));
        }
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            let k = g.param(&self.store, c.kernel);
            let b = g.param(&self.store, c.bias);
            h = g.conv2d(h, k, c.stride, c.pad)?;
            h = g.add_channel_bias(h, b)?;
            if i + 1 < self.convs.len() {
                h = g.leaky_relu(h, 0.2);
            }
        }
        Ok(h)
    }

    pub fn batch_tensor(&self, xs: &[Tensor3]) -> Result<Tensor<T>> {
        let mut data = Vec::new();
        for x in xs {
            if x.shape() != (self.channels, self.size, self.size) {
                return shape_err(format!("discriminator input {:?}", x.shape()));
            }
            data.extend(x.data.iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(vec![xs.len(), self.channels, self.size, self.size], data)
    }

    /// Score maps of a batch, flattened per sample.
    pub fn scores(&self, xs: &[Tensor3]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let x = g.constant(self.batch_tensor(xs)?);
        let s = self.forward_graph(&mut g, x)?;
        let per = self.score_side() * self.score_side();
        Ok(g.value(s).to_f64().chunks(per).map(<[f64]>::to_vec).collect())
    }
}

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_loss<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let r = g.affine(real, -1.0, 1.0);
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.affine(fake, 1.0, 1.0);
    let f = g.relu(f);
    let f = g.mean(f);
    g.add(r, f)
}

/// Non-saturating generator term `mean(softplus(-fake))`.
pub fn generator_loss<T: Scalar>(g: &mut Graph<T>, fake: Var) -> Var {
    let n = g.affine(fake, -1.0, 0.0);
    let s = g.softplus(n);
    g.mean(s)
}
