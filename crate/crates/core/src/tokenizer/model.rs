use super::{multiscale_quantize, patchify, unpatchify, MultiScaleTokenMap, QuantizeResult, ScaleOps, TokenizerConfig};
use crate::cmx::Tensor3;
use crate::error::{shape_err, Error, Result};
use crate::substrate::nn::{Block, LayerNorm, Linear};
use crate::substrate::{matmul_plain, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
struct Layout {
    patch_in: Linear,
    enc_pos: ParamId,
    learnable: Option<ParamId>,
    encoder: Vec<Block>,
    enc_ln: LayerNorm,
    to_code: Linear,
    codebook: ParamId,
    from_code: Linear,
    dec_pos: ParamId,
    queries: ParamId,
    decoder: Vec<Block>,
    dec_ln: LayerNorm,
    to_patch: Linear,
}

#[derive(Debug, Clone)]
pub struct Tokenizer<T> {
    pub cfg: TokenizerConfig,
    pub store: ParamStore<T>,
    layout: Layout,
    ops: ScaleOps,
    up_all: Tensor<T>,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub z: Var,
    pub zhat: Var,
    pub zprime: Var,
    pub xhat: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub quant: Vec<QuantizeResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossComponents {
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    /// codebook + beta * commitment
    pub vq: f64,
    pub adversarial: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn combine(cfg: &TokenizerConfig, recon: f64, codebook: f64, commitment: f64, adversarial: f64) -> Self {
        let vq = codebook + cfg.beta * commitment;
        Self {
            recon,
            codebook,
            commitment,
            vq,
            adversarial,
            total: cfg.lambda_recon * recon + cfg.lambda_vq * vq + cfg.lambda_ad * adversarial,
        }
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Weighted objective from plain values. `disc_scores` are the
/// discriminator's patch scores for the reconstruction.
pub fn tokenizer_loss(
    cfg: &TokenizerConfig,
    x: &[f64],
    xhat: &[f64],
    quant: &[QuantizeResult],
    disc_scores: Option<&[f64]>,
) -> Result<LossComponents> {
    if [cfg.lambda_recon, cfg.lambda_vq, cfg.lambda_ad, cfg.beta].iter().any(|l| *l < 0.0) {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    if x.len() != xhat.len() || x.is_empty() {
        return shape_err(format!("reconstruction has {} values for {}", xhat.len(), x.len()));
    }
    let n = quant.len().max(1) as f64;
    let codebook = quant.iter().map(|q| q.codebook_loss).sum::<f64>() / n;
    let commitment = quant.iter().map(|q| q.commitment_loss).sum::<f64>() / n;
    let adversarial = match disc_scores {
        Some(s) if cfg.lambda_ad > 0.0 => s.iter().map(|&v| softplus(-v)).sum::<f64>() / s.len().max(1) as f64,
        _ => 0.0,
    };
    Ok(LossComponents::combine(cfg, mse(x, xhat), codebook, commitment, adversarial))
}

fn tile<T: Scalar>(g: &mut Graph<T>, v: Var, times: usize) -> Result<Var> {
    g.concat_rows(&vec![v; times])
}

impl<T: Scalar> Tokenizer<T> {
    pub fn new(cfg: &TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut s = ParamStore::new();
        let (w, n) = (cfg.width, cfg.grid() * cfg.grid());
        let blocks = |s: &mut ParamStore<T>, r: &mut ChaCha8Rng, prefix: &str, depth: usize| {
            (0..depth)
                .map(|i| Block::new(s, &format!("{prefix}.block{i}"), w, cfg.heads, cfg.mlp_ratio, r))
                .collect::<Result<Vec<_>>>()
        };
        let patch_in = Linear::new(&mut s, "enc.patch_in", cfg.patch_dim(), w, true, 1.0, r)?;
        let enc_pos = s.add_normal("enc.pos", &[n, w], 0.5, r)?;
        let learnable = match cfg.learnable_tokens {
            0 => None,
            k => Some(s.add_normal("enc.learnable_tokens", &[k, w], 0.5, r)?),
        };
        let encoder = blocks(&mut s, r, "enc", cfg.encoder_depth)?;
        let enc_ln = LayerNorm::new(&mut s, "enc.ln_f", w)?;
        let to_code = Linear::new(&mut s, "enc.to_code", w, cfg.code_dim, true, 1.0, r)?;
        let codebook = s.add_normal("quant.codebook", &[cfg.codebook_size, cfg.code_dim], 1.0, r)?;
        let from_code = Linear::new(&mut s, "dec.from_code", cfg.code_dim, w, true, 1.0, r)?;
        let dec_pos = s.add_normal("dec.pos", &[n, w], 0.5, r)?;
        let queries = s.add_normal("dec.queries", &[n, w], 0.5, r)?;
        let decoder = blocks(&mut s, r, "dec", cfg.decoder_depth)?;
        let dec_ln = LayerNorm::new(&mut s, "dec.ln_f", w)?;
        let to_patch = Linear::new(&mut s, "dec.to_patch", w, cfg.patch_dim(), true, 1.0, r)?;
        let ops = ScaleOps::new(&cfg.schedule, cfg.grid())?;
        let total = cfg.sequence_len();
        let up_all = Tensor::from_f64(&[n, total], &ops.up_all())?;
        Ok(Self {
            cfg: cfg.clone(),
            store: s,
            layout: Layout {
                patch_in,
                enc_pos,
                learnable,
                encoder,
                enc_ln,
                to_code,
                codebook,
                from_code,
                dec_pos,
                queries,
                decoder,
                dec_ln,
                to_patch,
            },
            ops,
            up_all,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tokenizer<U> {
        Tokenizer {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
            ops: self.ops.clone(),
            up_all: self.up_all.cast(),
        }
    }

    pub fn ops(&self) -> &ScaleOps {
        &self.ops
    }

    /// The single codebook every scale quantizes against.
    pub fn codebook_id(&self) -> ParamId {
        self.layout.codebook
    }

    /// Codebook parameter used at each scale of the schedule.
    pub fn scale_codebooks(&self) -> Vec<ParamId> {
        self.cfg.schedule.iter().map(|_| self.layout.codebook).collect()
    }

    fn tokens(&self) -> usize {
        self.cfg.grid() * self.cfg.grid()
    }

    /// Patch matrices of a batch stacked by rows.
    pub fn patch_batch(&self, xs: &[Tensor3]) -> Result<Tensor<T>> {
        let c = &self.cfg;
        let mut data = Vec::new();
        for x in xs {
            if x.shape() != (c.channels, c.size, c.size) {
                return shape_err(format!(
                    "tokenizer expects {}x{}x{} input, got {:?}",
                    c.channels,
                    c.size,
                    c.size,
                    x.shape()
                ));
            }
            data.extend(patchify::<T>(x, c.patch)?.data);
        }
        Tensor::new(vec![xs.len() * self.tokens(), c.patch_dim()], data)
    }

    /// `x`: `[batch * K*K, C*L*L]` patches; returns `z`: `[batch * K*K, code_dim]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var, batch: usize) -> Result<Var> {
        let (l, s, n) = (&self.layout, &self.store, self.tokens());
        let h = l.patch_in.forward(g, s, x)?;
        let pos = g.param(s, l.enc_pos);
        let pos = tile(g, pos, batch)?;
        let mut h = g.add(h, pos)?;
        let extra = self.cfg.learnable_tokens;
        if let Some(id) = l.learnable {
            let toks = g.param(s, id);
            let mut parts = Vec::with_capacity(2 * batch);
            for b in 0..batch {
                parts.push(g.slice_rows(h, b * n, n)?);
                parts.push(toks);
            }
            h = g.concat_rows(&parts)?;
        }
        for blk in &l.encoder {
            h = blk.forward(g, s, h, batch, None)?;
        }
        if extra > 0 {
            let parts = (0..batch)
                .map(|b| g.slice_rows(h, b * (n + extra), n))
                .collect::<Result<Vec<_>>>()?;
            h = g.concat_rows(&parts)?;
        }
        let h = l.enc_ln.forward(g, s, h)?;
        l.to_code.forward(g, s, h)
    }

    /// `zq`: `[batch * K*K, code_dim]`; returns patches `[batch * K*K, C*L*L]`.
    pub fn decode_graph(&self, g: &mut Graph<T>, zq: Var, batch: usize) -> Result<Var> {
        let (l, s, n) = (&self.layout, &self.store, self.tokens());
        let h = l.from_code.forward(g, s, zq)?;
        let pos = g.param(s, l.dec_pos);
        let pos = tile(g, pos, batch)?;
        let h = g.add(h, pos)?;
        let queries = g.param(s, l.queries);
        let mut parts = Vec::with_capacity(2 * batch);
        for b in 0..batch {
            parts.push(g.slice_rows(h, b * n, n)?);
            parts.push(queries);
        }
        let mut h = g.concat_rows(&parts)?;
        for blk in &l.decoder {
            h = blk.forward(g, s, h, batch, None)?;
        }
        let parts = (0..batch)
            .map(|b| g.slice_rows(h, b * 2 * n + n, n))
            .collect::<Result<Vec<_>>>()?;
        let h = g.concat_rows(&parts)?;
        let h = l.dec_ln.forward(g, s, h)?;
        l.to_patch.forward(g, s, h)
    }

    /// Quantizes every sample of `z`, returning the straight-through `z'`
    /// and the codebook-differentiable `z_hat`.
    pub fn quantize_graph(&self, g: &mut Graph<T>, z: Var, batch: usize) -> Result<(Var, Var, Vec<QuantizeResult>)> {
        let (n, d) = (self.tokens(), self.cfg.code_dim);
        let total = self.cfg.sequence_len();
        let cb = g.param(&self.store, self.layout.codebook);
        let cb_vals = g.value(cb).to_f64();
        let zv = g.value(z).to_f64();
        let mut quant = Vec::with_capacity(batch);
        let mut idx = Vec::with_capacity(batch * total);
        for b in 0..batch {
            let q = multiscale_quantize(&zv[b * n * d..(b + 1) * n * d], &cb_vals, d, &self.ops)?;
            idx.extend(q.tokens.grids.iter().flatten().map(|&i| i as usize));
            quant.push(q);
        }
        let codes = g.embedding(cb, &idx)?;
        let up = g.constant(self.up_all.clone());
        let parts = (0..batch)
            .map(|b| {
                let e = g.slice_rows(codes, b * total, total)?;
                g.matmul(up, e)
            })
            .collect::<Result<Vec<_>>>()?;
        let zhat = g.concat_rows(&parts)?;
        let zprime = g.straight_through(z, g.value(zhat).clone())?;
        Ok((zprime, zhat, quant))
    }

    /// Full forward pass with the reconstruction and VQ terms.
    pub fn forward(&self, g: &mut Graph<T>, patches: Tensor<T>, batch: usize) -> Result<Forward> {
        let x = g.constant(patches);
        let z = self.encode_graph(g, x, batch)?;
        let (zprime, zhat, quant) = self.quantize_graph(g, z, batch)?;
        let xhat = self.decode_graph(g, zprime, batch)?;
        let recon = g.mse(xhat, x)?;
        let zd = g.detach(z);
        let codebook = g.mse(zhat, zd)?;
        let zhd = g.detach(zhat);
        let commitment = g.mse(z, zhd)?;
        Ok(Forward {
            z,
            zhat,
            zprime,
            xhat,
            recon,
            codebook,
            commitment,
            quant,
        })
    }

    /// `lambda_recon * recon + lambda_vq * (codebook + beta * commitment) + lambda_ad * adv`.
    pub fn total_loss(&self, g: &mut Graph<T>, f: &Forward, adversarial: Option<Var>) -> Result<Var> {
        let c = &self.cfg;
        let commit = g.affine(f.commitment, c.beta, 0.0);
        let vq = g.add(f.codebook, commit)?;
        let vq = g.affine(vq, c.lambda_vq, 0.0);
        let recon = g.affine(f.recon, c.lambda_recon, 0.0);
        let mut total = g.add(recon, vq)?;
        if let Some(adv) = adversarial {
            let adv = g.affine(adv, c.lambda_ad, 0.0);
            total = g.add(total, adv)?;
        }
        Ok(total)
    }

    pub fn encode(&self, x: &Tensor3) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = g.constant(self.patch_batch(std::slice::from_ref(x))?);
        let z = self.encode_graph(&mut g, p, 1)?;
        Ok(g.value(z).clone())
    }

    pub fn quantize(&self, z: &Tensor<T>) -> Result<QuantizeResult> {
        let cb = self.store.get(self.layout.codebook).value.to_f64();
        multiscale_quantize(&z.to_f64(), &cb, self.cfg.code_dim, &self.ops)
    }

    pub fn decode(&self, zq: &[f64]) -> Result<Tensor3> {
        let (n, d) = (self.tokens(), self.cfg.code_dim);
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_f64(&[n, d], zq)?);
        let p = self.decode_graph(&mut g, z, 1)?;
        unpatchify(g.value(p), self.cfg.channels, self.cfg.size, self.cfg.patch)
    }

    /// Rebuilds the quantized latent from token indices.
    pub fn tokens_to_latent(&self, t: &MultiScaleTokenMap) -> Result<Vec<f64>> {
        if t.schedule != self.cfg.schedule {
            return Err(Error::Config(format!(
                "token schedule {:?} differs from tokenizer schedule {:?}",
                t.schedule, self.cfg.schedule
            )));
        }
        t.validate_vocab(self.cfg.codebook_size)?;
        let d = self.cfg.code_dim;
        let cb = &self.store.get(self.layout.codebook).value;
        let mut codes = Vec::with_capacity(t.len() * d);
        for &i in t.grids.iter().flatten() {
            codes.extend(cb.row(i as usize).iter().map(|v| v.f64()));
        }
        Ok(matmul_plain(&self.up_all.to_f64(), &codes, self.tokens(), t.len(), d))
    }

    /// Encode, quantize and decode one input.
    pub fn reconstruct(&self, x: &Tensor3) -> Result<(Tensor3, QuantizeResult)> {
        let q = self.quantize(&self.encode(x)?)?;
        Ok((self.decode(&q.zq)?, q))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::{gradient_check, gradient_check_f32, gradient_check_params, gradient_check_params_f32};
    use rand::Rng;

    pub(crate) fn toy_cfg() -> TokenizerConfig {
        TokenizerConfig {
            channels: 2,
            size: 8,
            patch: 2,
            learnable_tokens: 2,
            width: 8,
            encoder_depth: 1,
            decoder_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            codebook_size: 8,
            code_dim: 3,
            schedule: vec![1, 2, 4],
            ..Default::default()
        }
    }

    fn rand_input(seed: u64, cfg: &TokenizerConfig) -> Tensor3 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.channels * cfg.size * cfg.size;
        Tensor3::new(cfg.channels, cfg.size, cfg.size, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shape_contracts() {
        let cfg = toy_cfg();
        let t = Tokenizer::<f32>::new(&cfg, 0).unwrap();
        let x = rand_input(1, &cfg);
        let z = t.encode(&x).unwrap();
        assert_eq!(z.shape, vec![16, 3]);
        let (y, q) = t.reconstruct(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(q.tokens.schedule, vec![1, 2, 4]);
        assert_eq!(t.decode(&q.zq).unwrap(), y);
        let rebuilt = t.tokens_to_latent(&q.tokens).unwrap();
        for (a, b) in rebuilt.iter().zip(&q.zq) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(t.encode(&Tensor3::zeros(1, 8, 8)).is_err());
    }

    #[test]
    fn one_codebook_for_all_scales() {
        let t = Tokenizer::<f32>::new(&toy_cfg(), 0).unwrap();
        assert!(t.scale_codebooks().iter().all(|&id| id == t.codebook_id()));
        let codebooks = t.store.iter().filter(|(_, p)| p.name.contains("codebook")).count();
        assert_eq!(codebooks, 1);
    }

    #[test]
    fn encoder_is_sensitive_to_patch_order() {
        let cfg = toy_cfg();
        let t = Tokenizer::<f64>::new(&cfg, 0).unwrap();
        let x = rand_input(3, &cfg);
        let mut swapped = x.clone();
        // swap the first two 2x2 patches of channel 0
        for dy in 0..2 {
            for dx in 0..2 {
                swapped.data.swap(dy * 8 + dx, dy * 8 + 2 + dx);
            }
        }
        assert_ne!(t.encode(&x).unwrap(), t.encode(&swapped).unwrap());
    }

    #[test]
    fn encoder_and_decoder_gradients() {
        let cfg = toy_cfg();
        let t = Tokenizer::<f64>::new(&cfg, 5).unwrap();
        let x = t.patch_batch(&[rand_input(4, &cfg)]).unwrap();
        let enc = |g: &mut Graph<f64>, v: &[Var]| t.encode_graph(g, v[0], 1);
        let rep = gradient_check(enc, std::slice::from_ref(&x), 1e-6).unwrap();
        assert!(rep.passed, "encode wrt input {rep:?}");
        let rep = gradient_check_params(
            &t.store,
            |g, _| {
                let xv = g.constant(x.clone());
                t.encode_graph(g, xv, 1)
            },
            1e-6,
        )
        .unwrap();
        assert!(rep.passed, "encode wrt weights {rep:?}");
        let zq = t.encode(&rand_input(4, &cfg)).unwrap();
        let dec = |g: &mut Graph<f64>, v: &[Var]| t.decode_graph(g, v[0], 1);
        let rep = gradient_check(dec, std::slice::from_ref(&zq), 1e-6).unwrap();
        assert!(rep.passed, "decode wrt latent {rep:?}");
        let t32 = t.cast::<f32>();
        let t64 = t32.cast::<f64>();
        let enc = |g: &mut Graph<f32>, v: &[Var]| t32.encode_graph(g, v[0], 1);
        let enc_ref = |g: &mut Graph<f64>, v: &[Var]| t64.encode_graph(g, v[0], 1);
        let rep = gradient_check_f32(enc, enc_ref, &[x.cast()], 1e-4).unwrap();
        assert!(rep.passed, "f32 encode {rep:?}");
        let dec = |g: &mut Graph<f32>, v: &[Var]| t32.decode_graph(g, v[0], 1);
        let dec_ref = |g: &mut Graph<f64>, v: &[Var]| t64.decode_graph(g, v[0], 1);
        let rep = gradient_check_f32(dec, dec_ref, &[zq.cast()], 1e-4).unwrap();
        assert!(rep.passed, "f32 decode {rep:?}");
        let zq32: Tensor<f32> = zq.cast();
        let zq64: Tensor<f64> = zq32.cast();
        let rep = gradient_check_params_f32(
            &t32.store,
            |g, _| {
                let z = g.constant(zq32.clone());
                t32.decode_graph(g, z, 1)
            },
            &t64.store,
            |g, _| {
                let z = g.constant(zq64.clone());
                t64.decode_graph(g, z, 1)
            },
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "f32 decode weights {rep:?}");
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let cfg = toy_cfg();
        let t = Tokenizer::<f64>::new(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t.patch_batch(&[rand_input(2, &cfg)]).unwrap());
        let z = t.encode_graph(&mut g, x, 1).unwrap();
        let (zp, _, _) = t.quantize_graph(&mut g, z, 1).unwrap();
        let sq = g.mul(zp, zp).unwrap();
        let loss = g.sum(sq);
        let gr = g.backward(loss).unwrap();
        assert_eq!(gr.get(z).unwrap(), gr.get(zp).unwrap());
    }

    #[test]
    fn loss_decomposition() {
        let mut cfg = toy_cfg();
        cfg.lambda_recon = 0.7;
        cfg.lambda_vq = 1.3;
        cfg.beta = 0.25;
        let t = Tokenizer::<f64>::new(&cfg, 2).unwrap();
        let xs = [rand_input(7, &cfg), rand_input(8, &cfg)];
        let patches = t.patch_batch(&xs).unwrap();
        let mut g = Graph::new();
        let f = t.forward(&mut g, patches.clone(), 2).unwrap();
        let total = t.total_loss(&mut g, &f, None).unwrap();
        let comp = tokenizer_loss(&cfg, &patches.data, &g.value(f.xhat).data, &f.quant, None).unwrap();
        // direct summation oracle
        let n = patches.len() as f64;
        let recon: f64 = patches.data.iter().zip(&g.value(f.xhat).data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        let zv = &g.value(f.z).data;
        let zh = &g.value(f.zhat).data;
        let vq: f64 = zv.iter().zip(zh).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / zv.len() as f64;
        let want = 0.7 * recon + 1.3 * (vq + 0.25 * vq);
        assert!((g.value(total).data[0] - want).abs() < 1e-12);
        assert!((comp.total - want).abs() < 1e-12);
        assert_eq!(comp.total, cfg.lambda_recon * comp.recon + cfg.lambda_vq * comp.vq + cfg.lambda_ad * comp.adversarial);
        assert!(comp.codebook >= 0.0 && comp.commitment >= 0.0);
    }

    #[test]
    fn loss_degenerate_cases() {
        let cfg = TokenizerConfig {
            lambda_vq: 0.0,
            ..toy_cfg()
        };
        let x = [0.5, -1.0, 2.0];
        let zero = tokenizer_loss(&cfg, &x, &x, &[], None).unwrap();
        assert_eq!(zero.total, 0.0);
        let y = [0.0, 0.0, 0.0];
        let plain = tokenizer_loss(&cfg, &x, &y, &[], None).unwrap();
        assert_eq!(plain.total, mse(&x, &y));
        let neg = TokenizerConfig {
            lambda_recon: -1.0,
            ..toy_cfg()
        };
        assert!(tokenizer_loss(&neg, &x, &y, &[], None).is_err());
    }
}
