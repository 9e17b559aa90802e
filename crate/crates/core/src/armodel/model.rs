use super::{block_causal_mask, sample_index, ArConfig, Condition, SamplingParams, ScaleSequence};
use crate::error::{Error, Result};
use crate::substrate::nn::{Block, LayerNorm, Linear};
use crate::substrate::{matmul_plain, AttentionMask, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::tokenizer::{MultiScaleTokenMap, ScaleOps};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
struct Layout {
    codebook: ParamId,
    class_emb: ParamId,
    word: Linear,
    pos: ParamId,
    level: ParamId,
    blocks: Vec<Block>,
    ln: LayerNorm,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct ArModel<T> {
    pub cfg: ArConfig,
    pub store: ParamStore<T>,
    layout: Layout,
    ops: ScaleOps,
    mask: AttentionMask,
    scale_ids: Vec<usize>,
}

/// Accumulated codebook latent over the full grid, grown one scale at a time.
struct Accumulator<'a, T> {
    model: &'a ArModel<T>,
    codebook: Vec<f64>,
    acc: Vec<f64>,
}

impl<'a, T: Scalar> Accumulator<'a, T> {
    fn new(model: &'a ArModel<T>) -> Self {
        let k = model.cfg.grid();
        Self {
            model,
            codebook: model.store.get(model.layout.codebook).value.to_f64(),
            acc: vec![0.0; k * k * model.cfg.code_dim],
        }
    }

    fn add_scale(&mut self, s: usize, tokens: &[u32]) {
        let d = self.model.cfg.code_dim;
        let kk = self.model.cfg.schedule[s].pow(2);
        let codes: Vec<f64> = tokens
            .iter()
            .flat_map(|&t| self.codebook[t as usize * d..(t as usize + 1) * d].iter().copied())
            .collect();
        let n = self.model.cfg.grid().pow(2);
        let up = matmul_plain(&self.model.ops.up[s], &codes, n, kk, d);
        for (a, u) in self.acc.iter_mut().zip(up) {
            *a += u;
        }
    }

    /// Input rows of scale `s`: the accumulation area-resampled to its grid.
    fn input(&self, s: usize) -> Vec<f64> {
        let d = self.model.cfg.code_dim;
        let kk = self.model.cfg.schedule[s].pow(2);
        let n = self.model.cfg.grid().pow(2);
        matmul_plain(&self.model.ops.down[s], &self.acc, kk, n, d)
    }
}

impl<T: Scalar> ArModel<T> {
    /// `codebook` is the frozen `[vocab, code_dim]` tokenizer codebook.
    pub fn new(cfg: &ArConfig, codebook: &Tensor<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if codebook.shape != [cfg.vocab, cfg.code_dim] {
            return Err(Error::Config(format!(
                "codebook {:?} does not match vocab {} x code_dim {}",
                codebook.shape, cfg.vocab, cfg.code_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let mut s = ParamStore::new();
        let w = cfg.width;
        let codebook = s.add_frozen("codebook", codebook.clone())?;
        let class_emb = s.add_normal("class_emb", &[cfg.condition_vocab(), w], 0.5, r)?;
        let word = Linear::new(&mut s, "word", cfg.code_dim, w, true, 1.0, r)?;
        let pos = s.add_normal("pos", &[cfg.context_len(), w], 0.5, r)?;
        let level = s.add_normal("level", &[cfg.schedule.len(), w], 0.5, r)?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&mut s, &format!("block{i}"), w, cfg.heads, cfg.mlp_ratio, r))
            .collect::<Result<Vec<_>>>()?;
        let ln = LayerNorm::new(&mut s, "ln_f", w)?;
        let head = Linear::new(&mut s, "head", w, cfg.vocab, true, 0.02, r)?;
        let ops = ScaleOps::new(&cfg.schedule, cfg.grid())?;
        let scale_ids = cfg
            .schedule
            .iter()
            .enumerate()
            .flat_map(|(i, k)| std::iter::repeat_n(i, k * k))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            store: s,
            layout: Layout {
                codebook,
                class_emb,
                word,
                pos,
                level,
                blocks,
                ln,
                head,
            },
            ops,
            mask: block_causal_mask(&cfg.schedule),
            scale_ids,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ArModel<U> {
        ArModel {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
            ops: self.ops.clone(),
            mask: self.mask.clone(),
            scale_ids: self.scale_ids.clone(),
        }
    }

    pub fn codebook(&self) -> &Tensor<T> {
        &self.store.get(self.layout.codebook).value
    }

    fn check_tokens(&self, t: &MultiScaleTokenMap) -> Result<()> {
        if t.schedule != self.cfg.schedule {
            return Err(Error::Config(format!(
                "token schedule {:?} differs from model schedule {:?}",
                t.schedule, self.cfg.schedule
            )));
        }
        t.validate_vocab(self.cfg.vocab)
    }

    /// Teacher-forced input rows for every position after the start token,
    /// `[context_len - 1, code_dim]`.
    pub fn scale_inputs(&self, t: &MultiScaleTokenMap) -> Result<Vec<f64>> {
        self.check_tokens(t)?;
        let mut acc = Accumulator::new(self);
        let mut out = Vec::with_capacity((self.cfg.context_len() - 1) * self.cfg.code_dim);
        for s in 1..self.cfg.schedule.len() {
            acc.add_scale(s - 1, &t.grids[s - 1]);
            out.extend(acc.input(s));
        }
        Ok(out)
    }

    /// Logits `[batch * positions, vocab]` for the first `positions`
    /// positions, given per-sample input rows `[positions - 1, code_dim]`
    /// stacked in `inputs`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        inputs: &[f64],
        conds: &[usize],
        positions: usize,
    ) -> Result<Var> {
        let (l, st) = (&self.layout, &self.store);
        let (b, d) = (conds.len(), self.cfg.code_dim);
        if positions == 0 || positions > self.cfg.context_len() || inputs.len() != b * (positions - 1) * d {
            return Err(Error::Shape(format!(
                "{} input values for batch {b} over {positions} positions",
                inputs.len()
            )));
        }
        if let Some(c) = conds.iter().find(|&&c| c >= self.cfg.condition_vocab()) {
            return Err(Error::InvalidInput(format!("unknown condition id {c}")));
        }
        let table = g.param(st, l.class_emb);
        let start = g.embedding(table, conds)?;
        let mut x = start;
        if positions > 1 {
            let raw = g.constant(Tensor::from_f64(&[b * (positions - 1), d], inputs)?);
            let words = l.word.forward(g, st, raw)?;
            let mut parts = Vec::with_capacity(2 * b);
            for i in 0..b {
                parts.push(g.slice_rows(start, i, 1)?);
                parts.push(g.slice_rows(words, i * (positions - 1), positions - 1)?);
            }
            x = g.concat_rows(&parts)?;
        }
        let pos = g.param(st, l.pos);
        let pos = g.slice_rows(pos, 0, positions)?;
        let levels = g.param(st, l.level);
        let lv = g.embedding(levels, &self.scale_ids[..positions])?;
        let pe = g.add(pos, lv)?;
        let pe = g.concat_rows(&vec![pe; b])?;
        let mut h = g.add(x, pe)?;
        let sub;
        let mask = if positions == self.cfg.context_len() {
            &self.mask
        } else {
            let allow = (0..positions * positions)
                .map(|i| self.mask.allows(i / positions, i % positions))
                .collect();
            sub = AttentionMask::new(positions, positions, allow)?;
            &sub
        };
        for blk in &l.blocks {
            h = blk.forward(g, st, h, b, Some(mask))?;
        }
        let h = l.ln.forward(g, st, h)?;
        l.head.forward(g, st, h)
    }

    /// Teacher-forced graph over full token maps; returns logits and targets.
    pub fn teacher_forced(
        &self,
        g: &mut Graph<T>,
        batch: &[(MultiScaleTokenMap, Condition)],
    ) -> Result<(Var, Vec<usize>)> {
        let mut inputs = Vec::new();
        let mut conds = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len() * self.cfg.context_len());
        for (t, c) in batch {
            inputs.extend(self.scale_inputs(t)?);
            conds.push(c.id(&self.cfg)?);
            targets.extend(t.grids.iter().flatten().map(|&v| v as usize));
        }
        let logits = self.forward_graph(g, &inputs, &conds, self.cfg.context_len())?;
        Ok((logits, targets))
    }

    /// Teacher-forced logits `[context_len, vocab]` for one token map.
    pub fn logits(&self, t: &MultiScaleTokenMap, cond: Condition) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (l, _) = self.teacher_forced(&mut g, &[(t.clone(), cond)])?;
        Ok(g.value(l).clone())
    }

    /// Generates scales in order; every token of a scale is drawn from one
    /// forward pass over the coarser context.
    pub fn sample(&self, cond: Condition, seed: u64, params: &SamplingParams) -> Result<MultiScaleTokenMap> {
        params.validate()?;
        let c = cond.id(&self.cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = Accumulator::new(self);
        let mut inputs: Vec<f64> = Vec::new();
        let mut grids: Vec<Vec<u32>> = Vec::with_capacity(self.cfg.schedule.len());
        let ranges = ScaleSequence::scale_ranges(&self.cfg.schedule);
        for (s, range) in ranges.iter().enumerate() {
            if s > 0 {
                acc.add_scale(s - 1, &grids[s - 1]);
                inputs.extend(acc.input(s));
            }
            let mut g = Graph::new();
            let logits = self.forward_graph(&mut g, &inputs, &[c], range.end)?;
            let lv = g.value(logits);
            let mut grid = Vec::with_capacity(range.len());
            for p in range.clone() {
                let row: Vec<f64> = lv.row(p).iter().map(|v| v.f64()).collect();
                grid.push(sample_index(&row, params, &mut rng)? as u32);
            }
            grids.push(grid);
        }
        MultiScaleTokenMap::new(self.cfg.schedule.clone(), grids)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::substrate::{gradient_check, gradient_check_params};
    use rand::Rng;

    pub(crate) fn toy() -> (ArConfig, Tensor<f64>) {
        let cfg = ArConfig {
            vocab: 6,
            schedule: vec![1, 2, 4],
            code_dim: 3,
            width: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            ..Default::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let cb = Tensor::from_f64(&[6, 3], &(0..18).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
        (cfg, cb)
    }

    pub(crate) fn random_map(cfg: &ArConfig, seed: u64) -> MultiScaleTokenMap {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let grids = cfg
            .schedule
            .iter()
            .map(|k| (0..k * k).map(|_| r.random_range(0..cfg.vocab as u32)).collect())
            .collect();
        MultiScaleTokenMap::new(cfg.schedule.clone(), grids).unwrap()
    }

    #[test]
    fn output_shape_and_condition_checks() {
        let (cfg, cb) = toy();
        let m = ArModel::new(&cfg, &cb, 0).unwrap();
        let t = random_map(&cfg, 1);
        assert_eq!(m.logits(&t, Condition::Class(1)).unwrap().shape, vec![21, 6]);
        assert!(m.logits(&t, Condition::Class(3)).is_err());
        let bad = MultiScaleTokenMap::new(vec![1, 4], vec![vec![0], vec![0; 16]]).unwrap();
        assert!(m.logits(&bad, Condition::Unconditional).is_err());
        assert!(ArModel::new(&cfg, &Tensor::<f64>::zeros(&[5, 3]), 0).is_err());
    }

    #[test]
    fn scale_inputs_come_from_coarser_scales() {
        let (cfg, cb) = toy();
        let m = ArModel::new(&cfg, &cb, 0).unwrap();
        let t = random_map(&cfg, 2);
        let x = m.scale_inputs(&t).unwrap();
        assert_eq!(x.len(), 20 * 3);
        // the 1x1 code upsampled and averaged back is the code itself
        let c0 = t.grids[0][0] as usize;
        for p in 0..4 {
            for j in 0..3 {
                assert!((x[p * 3 + j] - cb.data[c0 * 3 + j]).abs() < 1e-12);
            }
        }
        let mut u = t.clone();
        u.grids[2][5] = (u.grids[2][5] + 1) % 6;
        assert_eq!(m.scale_inputs(&u).unwrap(), x);
    }

    #[test]
    fn logits_are_causal_across_scales() {
        let (cfg, cb) = toy();
        let m = ArModel::<f32>::new(&cfg, &cb.cast(), 3).unwrap();
        let ranges = ScaleSequence::scale_ranges(&cfg.schedule);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let t = random_map(&cfg, 100 + trial);
            let base = m.logits(&t, Condition::Class(0)).unwrap();
            let s = r.random_range(0..cfg.schedule.len());
            let mut u = t.clone();
            let p = r.random_range(0..u.grids[s].len());
            u.grids[s][p] = (u.grids[s][p] + r.random_range(1..6)) % 6;
            let pert = m.logits(&u, Condition::Class(0)).unwrap();
            let keep = ranges[s].end * cfg.vocab;
            assert_eq!(base.data[..keep], pert.data[..keep]);
            if s + 1 < ranges.len() {
                assert_ne!(base.data[keep..], pert.data[keep..]);
            }
        }
    }

    #[test]
    fn gradients_through_the_model() {
        let (cfg, cb) = toy();
        let cfg = ArConfig {
            schedule: vec![1, 2],
            ..cfg
        };
        let m = ArModel::<f64>::new(&cfg, &cb, 5).unwrap();
        let t = random_map(&cfg, 6);
        let inputs = m.scale_inputs(&t).unwrap();
        let rep = gradient_check_params(&m.store, |g, _| m.forward_graph(g, &inputs, &[1], 5), 1e-6).unwrap();
        assert!(rep.passed, "{rep:?}");
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let (l, tg) = m.teacher_forced(g, &[(t.clone(), Condition::Class(2))])?;
            let l = g.add(l, v[0])?;
            g.cross_entropy(l, &tg)
        };
        let rep = gradient_check(f, &[Tensor::zeros(&[5, 6])], 1e-6).unwrap();
        assert!(rep.passed, "{rep:?}");
        let m32 = m.cast::<f32>();
        let m64 = m32.cast::<f64>();
        let rep = crate::substrate::gradient_check_params_f32(
            &m32.store,
            |g, _| m32.forward_graph(g, &inputs, &[1], 5),
            &m64.store,
            |g, _| m64.forward_graph(g, &inputs, &[1], 5),
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn initial_loss_near_uniform() {
        let cfg = ArConfig::default();
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let cb = Tensor::<f32>::from_f64(&[1024, 16], &(0..1024 * 16).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
        let m = ArModel::new(&cfg, &cb, 0).unwrap();
        let t = random_map(&cfg, 8);
        let mut g = Graph::new();
        let (l, tg) = m.teacher_forced(&mut g, &[(t, Condition::Unconditional)]).unwrap();
        let loss = g.cross_entropy(l, &tg).unwrap();
        let v = g.value(loss).data[0] as f64;
        assert!((v / 1024f64.ln() - 1.0).abs() < 0.01, "{v}");
    }

    #[test]
    fn sampling_is_seeded() {
        let (cfg, cb) = toy();
        let m = ArModel::new(&cfg, &cb, 0).unwrap();
        let p = SamplingParams::default();
        let a = m.sample(Condition::Class(0), 3, &p).unwrap();
        assert_eq!(a, m.sample(Condition::Class(0), 3, &p).unwrap());
        assert_eq!(a.schedule, cfg.schedule);
        let g = m.sample(Condition::Class(0), 3, &SamplingParams::greedy()).unwrap();
        let k1 = SamplingParams {
            top_k: 1,
            ..Default::default()
        };
        assert_eq!(g, m.sample(Condition::Class(0), 99, &k1).unwrap());
        assert!(m.sample(Condition::Class(0), 3, &SamplingParams { top_p: 0.0, ..p }).is_err());
    }
}
