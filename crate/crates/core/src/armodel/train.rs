use super::{ArConfig, ArModel, Condition, ScaleSequence};
use crate::error::{Error, Result};
use crate::substrate::{adam_step, AdamState, Checkpoint, Graph, StepOutcome, Tensor};
use crate::tokenizer::MultiScaleTokenMap;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArStepReport {
    pub step: u64,
    /// Mean cross-entropy over every position of the batch.
    pub loss: f64,
    /// Teacher-forced argmax accuracy.
    pub accuracy: f64,
    pub scale_loss: Vec<f64>,
    pub scale_accuracy: Vec<f64>,
    pub skipped: Option<String>,
    pub grad_norm: f64,
}

/// Per-scale cross-entropy and argmax accuracy of row-major logits.
pub(crate) fn scale_metrics(logits: &[f64], vocab: usize, targets: &[usize], schedule: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = schedule.len();
    let (mut loss, mut hits, mut count) = (vec![0.0; n], vec![0usize; n], vec![0usize; n]);
    let ids: Vec<usize> = ScaleSequence::scale_ranges(schedule)
        .into_iter()
        .enumerate()
        .flat_map(|(s, r)| std::iter::repeat_n(s, r.len()))
        .collect();
    for (row, &t) in targets.iter().enumerate() {
        let l = &logits[row * vocab..(row + 1) * vocab];
        let s = ids[row % ids.len()];
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss[s] += lse - l[t];
        let mut best = 0;
        for (i, &v) in l.iter().enumerate() {
            if v > l[best] {
                best = i;
            }
        }
        hits[s] += usize::from(best == t);
        count[s] += 1;
    }
    let loss = loss.iter().zip(&count).map(|(l, &c)| l / c.max(1) as f64).collect();
    let acc = hits.iter().zip(&count).map(|(&h, &c)| h as f64 / c.max(1) as f64).collect();
    (loss, acc)
}

#[derive(Debug, Clone)]
pub struct ArTrainer {
    pub model: ArModel<f32>,
    opt: AdamState<f32>,
    seed: u64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainerMeta {
    kind: String,
    ar: ArConfig,
    seed: u64,
    step: u64,
    adam_step: u64,
}

const KIND: &str = "ar";

impl ArTrainer {
    pub fn new(cfg: &ArConfig, codebook: &Tensor<f32>, seed: u64) -> Result<Self> {
        let model = ArModel::new(cfg, codebook, seed)?;
        let opt = AdamState::new(&model.store);
        Ok(Self {
            model,
            opt,
            seed,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, batch: &[(MultiScaleTokenMap, Condition)]) -> Result<ArStepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty training batch".into()));
        }
        let step = self.step;
        self.step += 1;
        let cfg = &self.model.cfg;
        let mut g = Graph::new();
        let (logits, targets) = self.model.teacher_forced(&mut g, batch)?;
        let loss = g.cross_entropy(logits, &targets)?;
        let (scale_loss, scale_accuracy) =
            scale_metrics(&g.value(logits).to_f64(), cfg.vocab, &targets, &cfg.schedule);
        let sizes: Vec<f64> = cfg.schedule.iter().map(|k| (k * k) as f64).collect();
        let total: f64 = sizes.iter().sum();
        let accuracy = scale_accuracy.iter().zip(&sizes).map(|(a, n)| a * n).sum::<f64>() / total;
        let mut report = ArStepReport {
            step,
            loss: g.value(loss).data[0] as f64,
            accuracy,
            scale_loss,
            scale_accuracy,
            skipped: None,
            grad_norm: 0.0,
        };
        if !report.loss.is_finite() {
            report.skipped = Some("non-finite loss".into());
            return Ok(report);
        }
        let grads = g.backward(loss)?;
        let pg = g.param_grads(&self.model.store, &grads);
        let opt_cfg = self.model.cfg.optimizer;
        match adam_step(&mut self.model.store, &pg, &mut self.opt, &opt_cfg)? {
            StepOutcome::Applied { grad_norm } => report.grad_norm = grad_norm,
            StepOutcome::Skipped { reason } => report.skipped = Some(reason),
        }
        Ok(report)
    }

    pub fn to_checkpoint(&self, config_hash: [u8; 32]) -> Checkpoint {
        let meta = TrainerMeta {
            kind: KIND.into(),
            ar: self.model.cfg.clone(),
            seed: self.seed,
            step: self.step,
            adam_step: self.opt.step,
        };
        let mut c = Checkpoint::new(config_hash, serde_json::to_value(meta).expect("meta serialises"));
        c.add_params(&self.model.store);
        c.add_optimizer(&self.model.store, &self.opt);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let meta: TrainerMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Format(format!("ar checkpoint metadata: {e}")))?;
        if meta.kind != KIND {
            return Err(Error::Format(format!("expected an ar checkpoint, found {:?}", meta.kind)));
        }
        let cb = c
            .get("codebook")
            .ok_or_else(|| Error::Format("ar checkpoint lacks the codebook".into()))?;
        let cb = Tensor::new(cb.shape.clone(), cb.values.clone())?;
        let mut t = Self::new(&meta.ar, &cb, meta.seed)?;
        c.load_params(&mut t.model.store)?;
        t.opt = c.load_optimizer(&t.model.store, meta.adam_step)?;
        t.step = meta.step;
        Ok(t)
    }
}

impl ArModel<f32> {
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Ok(ArTrainer::from_checkpoint(c)?.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::armodel::model::tests::{random_map, toy};
    use crate::armodel::SamplingParams;

    #[test]
    fn scale_losses_sum_to_total() {
        let (cfg, cb) = toy();
        let mut t = ArTrainer::new(&cfg, &cb.cast(), 0).unwrap();
        let batch: Vec<_> = (0..3).map(|i| (random_map(&cfg, i), Condition::Class(i as usize))).collect();
        let r = t.step(&batch).unwrap();
        let weighted: f64 = r.scale_loss.iter().zip([1.0, 4.0, 16.0]).map(|(l, n)| l * n).sum::<f64>() / 21.0;
        assert!((weighted - r.loss).abs() < 1e-5, "{weighted} vs {}", r.loss);
    }

    #[test]
    fn memorises_and_resumes() {
        let (cfg, cb) = toy();
        let cfg = ArConfig {
            optimizer: crate::substrate::AdamConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..cfg
        };
        let batch: Vec<_> = (0..3).map(|i| (random_map(&cfg, 10 + i), Condition::Class(i as usize))).collect();
        let mut a = ArTrainer::new(&cfg, &cb.cast(), 1).unwrap();
        for _ in 0..150 {
            a.step(&batch).unwrap();
        }
        let ck = Checkpoint::from_bytes(&a.to_checkpoint([2; 32]).to_bytes()).unwrap();
        let mut b = ArTrainer::from_checkpoint(&ck).unwrap();
        let mut last = None;
        for _ in 0..50 {
            let ra = a.step(&batch).unwrap();
            assert_eq!(ra, b.step(&batch).unwrap());
            last = Some(ra);
        }
        assert!(last.unwrap().accuracy > 0.99);
        for (t, c) in &batch {
            assert_eq!(&a.model.sample(*c, 0, &SamplingParams::greedy()).unwrap(), t);
        }
    }
}
