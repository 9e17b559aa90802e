use super::disc::generator_loss;
use super::{hinge_loss, unpatchify_index, LossComponents, PatchDiscriminator, Tokenizer, TokenizerConfig};
use crate::cmx::Tensor3;
use crate::error::{Error, Result};
use crate::substrate::{adam_step, step_rng, AdamState, Checkpoint, Graph, StepOutcome};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenizerStepReport {
    pub step: u64,
    pub loss: LossComponents,
    /// Hinge loss of the discriminator update, when one ran.
    pub disc_loss: Option<f64>,
    pub skipped: Option<String>,
    pub grad_norm: f64,
    /// Distinct codes selected in this batch.
    pub codes_used: usize,
    pub reseeded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Usage {
    counts: Vec<u64>,
    last_used: Vec<u64>,
}

/// Optimisation state for the tokenizer and its optional discriminator.
#[derive(Debug, Clone)]
pub struct TokenizerTrainer {
    pub model: Tokenizer<f32>,
    pub disc: Option<PatchDiscriminator<f32>>,
    opt: AdamState<f32>,
    disc_opt: Option<AdamState<f32>>,
    usage: Usage,
    seed: u64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    kind: String,
    tokenizer: TokenizerConfig,
    seed: u64,
    step: u64,
    adam_step: u64,
    disc_adam_step: Option<u64>,
    usage: Usage,
}

const KIND: &str = "tokenizer";

impl TokenizerTrainer {
    pub fn new(cfg: &TokenizerConfig, seed: u64) -> Result<Self> {
        let model = Tokenizer::new(cfg, seed)?;
        let disc = if cfg.lambda_ad > 0.0 {
            Some(PatchDiscriminator::new(cfg.channels, cfg.size, cfg.disc_channels, seed ^ 0x5eed_d15c)?)
        } else {
            None
        };
        let opt = AdamState::new(&model.store);
        let disc_opt = disc.as_ref().map(|d| AdamState::new(&d.store));
        Ok(Self {
            model,
            disc,
            opt,
            disc_opt,
            usage: Usage {
                counts: vec![0; cfg.codebook_size],
                last_used: vec![0; cfg.codebook_size],
            },
            seed,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// How often each code has been selected.
    pub fn usage_counts(&self) -> &[u64] {
        &self.usage.counts
    }

    pub fn step(&mut self, batch: &[Tensor3]) -> Result<TokenizerStepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty training batch".into()));
        }
        let cfg = self.model.cfg.clone();
        let b = batch.len();
        let step = self.step;
        self.step += 1;
        let mut rng = step_rng(self.seed, step);

        let mut g = Graph::new();
        let patches = self.model.patch_batch(batch)?;
        let f = self.model.forward(&mut g, patches, b)?;
        let mut adv_value = 0.0;
        let mut fake_image = None;
        let adversarial = match &self.disc {
            Some(d) => {
                let index = Rc::new(unpatchify_index(b, cfg.channels, cfg.size, cfg.patch));
                let image = g.gather(f.xhat, index, &[b, cfg.channels, cfg.size, cfg.size])?;
                fake_image = Some(g.value(image).clone());
                let scores = d.forward_graph(&mut g, image)?;
                let adv = generator_loss(&mut g, scores);
                adv_value = g.value(adv).data[0] as f64;
                Some(adv)
            }
            None => None,
        };
        let total = self.model.total_loss(&mut g, &f, adversarial)?;
        let scalar = |v| g.value(v).data[0] as f64;
        let loss = LossComponents::combine(&cfg, scalar(f.recon), scalar(f.codebook), scalar(f.commitment), adv_value);
        let mut report = TokenizerStepReport {
            step,
            loss: LossComponents {
                total: scalar(total),
                ..loss
            },
            disc_loss: None,
            skipped: None,
            grad_norm: 0.0,
            codes_used: 0,
            reseeded: 0,
        };
        if !report.loss.total.is_finite() {
            report.skipped = Some("non-finite loss".into());
            return Ok(report);
        }
        let grads = g.backward(total)?;
        let pg = g.param_grads(&self.model.store, &grads);
        match adam_step(&mut self.model.store, &pg, &mut self.opt, &cfg.optimizer)? {
            StepOutcome::Applied { grad_norm } => report.grad_norm = grad_norm,
            StepOutcome::Skipped { reason } => {
                report.skipped = Some(reason);
                return Ok(report);
            }
        }

        if let (Some(d), Some(opt), Some(fake)) = (&mut self.disc, &mut self.disc_opt, fake_image) {
            let mut dg = Graph::new();
            let real = dg.constant(d.batch_tensor(batch)?);
            let fake = dg.constant(fake);
            let rs = d.forward_graph(&mut dg, real)?;
            let fs = d.forward_graph(&mut dg, fake)?;
            let dl = hinge_loss(&mut dg, rs, fs)?;
            report.disc_loss = Some(dg.value(dl).data[0] as f64);
            if dg.value(dl).is_finite() {
                let grads = dg.backward(dl)?;
                let pg = dg.param_grads(&d.store, &grads);
                adam_step(&mut d.store, &pg, opt, &cfg.disc_optimizer)?;
            }
        }

        let mut used = vec![false; cfg.codebook_size];
        for q in &f.quant {
            for &i in q.tokens.grids.iter().flatten() {
                used[i as usize] = true;
                self.usage.counts[i as usize] += 1;
            }
        }
        for (i, &u) in used.iter().enumerate() {
            if u {
                self.usage.last_used[i] = self.step;
            }
        }
        report.codes_used = used.iter().filter(|&&u| u).count();
        report.reseeded = self.reseed_dead(g.value(f.z).data.as_slice(), &mut rng);
        Ok(report)
    }

    /// Replaces codes idle for `dead_code_steps` with random encoder outputs.
    fn reseed_dead(&mut self, z: &[f32], rng: &mut impl Rng) -> usize {
        let cfg = &self.model.cfg;
        let d = cfg.code_dim;
        let rows = z.len() / d;
        let limit = cfg.dead_code_steps;
        if limit == 0 || rows == 0 {
            return 0;
        }
        let id = self.model.codebook_id();
        let mut n = 0;
        for i in 0..cfg.codebook_size {
            if self.step - self.usage.last_used[i] >= limit {
                let r = rng.random_range(0..rows);
                let cb = &mut self.model.store.get_mut(id).value.data;
                cb[i * d..(i + 1) * d].copy_from_slice(&z[r * d..(r + 1) * d]);
                self.usage.last_used[i] = self.step;
                n += 1;
            }
        }
        n
    }

    pub fn to_checkpoint(&self, config_hash: [u8; 32]) -> Checkpoint {
        let meta = TrainerMeta {
            kind: KIND.into(),
            tokenizer: self.model.cfg.clone(),
            seed: self.seed,
            step: self.step,
            adam_step: self.opt.step,
            disc_adam_step: self.disc_opt.as_ref().map(|o| o.step),
            usage: self.usage.clone(),
        };
        let mut c = Checkpoint::new(config_hash, serde_json::to_value(meta).expect("meta serialises"));
        c.add_params(&self.model.store);
        c.add_optimizer(&self.model.store, &self.opt);
        if let (Some(d), Some(o)) = (&self.disc, &self.disc_opt) {
            c.add_params(&d.store);
            c.add_optimizer(&d.store, o);
        }
        c
    }

    /// Restores a trainer exactly as it was when the checkpoint was taken.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let meta: TrainerMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Format(format!("tokenizer checkpoint metadata: {e}")))?;
        if meta.kind != KIND {
            return Err(Error::Format(format!("expected a tokenizer checkpoint, found {:?}", meta.kind)));
        }
        let mut t = Self::new(&meta.tokenizer, meta.seed)?;
        c.load_params(&mut t.model.store)?;
        t.opt = c.load_optimizer(&t.model.store, meta.adam_step)?;
        if let Some(d) = &mut t.disc {
            c.load_params(&mut d.store)?;
            let step = meta.disc_adam_step.unwrap_or(0);
            t.disc_opt = Some(c.load_optimizer(&d.store, step)?);
        }
        if meta.usage.counts.len() != meta.tokenizer.codebook_size {
            return Err(Error::Format("usage table does not match codebook size".into()));
        }
        t.usage = meta.usage;
        t.step = meta.step;
        Ok(t)
    }
}

impl Tokenizer<f32> {
    /// Inference model from a training checkpoint.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Ok(TokenizerTrainer::from_checkpoint(c)?.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> TokenizerConfig {
        TokenizerConfig {
            channels: 1,
            size: 8,
            patch: 2,
            learnable_tokens: 2,
            width: 16,
            encoder_depth: 1,
            decoder_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            codebook_size: 16,
            code_dim: 4,
            schedule: vec![1, 2, 4],
            dead_code_steps: 8,
            ..Default::default()
        }
    }

    fn data(n: usize, seed: u64) -> Vec<Tensor3> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let f = r.random_range(0.2..1.0f32);
                let p = r.random_range(0.0..3.0f32);
                let v = (0..64).map(|i| ((i / 8) as f32 * f + p).sin() * ((i % 8) as f32 * 0.3).cos()).collect();
                Tensor3::new(1, 8, 8, v).unwrap()
            })
            .collect()
    }

    #[test]
    fn reconstruction_improves_when_overfitting() {
        let mut t = TokenizerTrainer::new(&cfg(), 0).unwrap();
        let xs = data(8, 1);
        let first = t.step(&xs).unwrap();
        let mut last = first.clone();
        for _ in 0..199 {
            last = t.step(&xs).unwrap();
            assert!(last.skipped.is_none());
            assert!(t.model.store.all_finite());
        }
        assert!(last.loss.recon < 0.1 * first.loss.recon, "{} -> {}", first.loss.recon, last.loss.recon);
    }

    #[test]
    fn bit_identical_and_resumable() {
        let xs = data(4, 2);
        let mut a = TokenizerTrainer::new(&cfg(), 9).unwrap();
        let mut b = TokenizerTrainer::new(&cfg(), 9).unwrap();
        for _ in 0..10 {
            assert_eq!(a.step(&xs).unwrap(), b.step(&xs).unwrap());
        }
        assert_eq!(a.model.store, b.model.store);
        let ck = Checkpoint::from_bytes(&a.to_checkpoint([1; 32]).to_bytes()).unwrap();
        let mut c = TokenizerTrainer::from_checkpoint(&ck).unwrap();
        for _ in 0..5 {
            assert_eq!(a.step(&xs).unwrap(), c.step(&xs).unwrap());
        }
        assert_eq!(a.model.store, c.model.store);
    }

    #[test]
    fn pure_autoencoder_configuration() {
        let c = TokenizerConfig {
            lambda_vq: 0.0,
            lambda_ad: 0.0,
            ..cfg()
        };
        let mut t = TokenizerTrainer::new(&c, 0).unwrap();
        assert!(t.disc.is_none());
        let r = t.step(&data(2, 3)).unwrap();
        assert_eq!(r.loss.total, r.loss.recon);
    }

    #[test]
    fn adversarial_training_runs_both_players() {
        let c = TokenizerConfig {
            lambda_ad: 0.1,
            disc_channels: 4,
            ..cfg()
        };
        let mut t = TokenizerTrainer::new(&c, 0).unwrap();
        let xs = data(2, 4);
        let before = t.disc.as_ref().unwrap().store.clone();
        let r = t.step(&xs).unwrap();
        assert!(r.disc_loss.is_some() && r.loss.adversarial > 0.0);
        assert_ne!(before, t.disc.as_ref().unwrap().store);
        let ck = t.to_checkpoint([0; 32]);
        let mut u = TokenizerTrainer::from_checkpoint(&ck).unwrap();
        assert_eq!(t.step(&xs).unwrap(), u.step(&xs).unwrap());
    }

    #[test]
    fn idle_codes_are_reseeded() {
        let mut t = TokenizerTrainer::new(&cfg(), 0).unwrap();
        let xs = data(1, 5);
        let mut total = 0;
        for _ in 0..10 {
            total += t.step(&xs).unwrap().reseeded;
        }
        assert!(total > 0);
        assert_eq!(t.usage_counts().iter().sum::<u64>(), 10 * 21);
    }
}
