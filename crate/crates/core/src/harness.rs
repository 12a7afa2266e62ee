//! Sequential adapter tuning over a task list, with accuracy and retention tracking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterKind, AdapterStack, ParamReport, ParamRole};
use crate::autodiff::Graph;
use crate::backbone::{Backbone, Batch, Modality, TokenSequence};
use crate::error::{invalid, LabError, LabResult};
use crate::losses::{ce_graph, kd_graph, kd_rows, teacher_rows, KdConfig};
use crate::optim::{cosine_lr, Optimizer, OptimizerConfig};
use crate::tasks::{Example, TaskData};
use crate::tensor::Tensor;
use crate::train::{answer_exact_match, generation_exact_match, mean_ce, Corpus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    None,
    SeqLora,
    CoupledMoeLora,
    Mode,
    ModeWithoutKd,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::None,
        Strategy::SeqLora,
        Strategy::CoupledMoeLora,
        Strategy::Mode,
        Strategy::ModeWithoutKd,
    ];

    pub fn adapter_kind(self) -> Option<AdapterKind> {
        match self {
            Strategy::None => None,
            Strategy::SeqLora => Some(AdapterKind::Lora),
            Strategy::CoupledMoeLora => Some(AdapterKind::MoeLora),
            Strategy::Mode | Strategy::ModeWithoutKd => Some(AdapterKind::Mode),
        }
    }

    pub fn uses_kd(self) -> bool {
        self == Strategy::Mode
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::SeqLora => "seq-lora",
            Strategy::CoupledMoeLora => "coupled-moe-lora",
            Strategy::Mode => "mode",
            Strategy::ModeWithoutKd => "mode-without-kd",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = LabError;

    fn from_str(s: &str) -> LabResult<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| LabError::Invalid(format!("unknown strategy {s:?}")))
    }
}

/// `entries[τ][t]`: accuracy on task τ after training through task t (t ≥ τ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub zero_shot: Vec<f64>,
    pub entries: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            zero_shot: vec![0.0; tasks],
            entries: vec![vec![None; tasks]; tasks],
        }
    }

    pub fn tasks(&self) -> usize {
        self.entries.len()
    }

    /// A matrix whose task τ peaks at `best[τ]` right after its own stage and ends at
    /// `final_[τ]`.
    pub fn from_best_final(best: &[f64], final_: &[f64]) -> LabResult<Self> {
        if best.len() != final_.len() || best.is_empty() {
            return invalid("best and final rows must be equally long and non-empty");
        }
        let s = best.len();
        let mut m = Self::new(s);
        for tau in 0..s {
            for t in tau..s {
                m.entries[tau][t] = Some(if t == tau && t + 1 < s { best[tau] } else { final_[tau] });
            }
        }
        Ok(m)
    }

    pub fn final_row(&self) -> LabResult<Vec<f64>> {
        let s = self.tasks();
        (0..s)
            .map(|tau| {
                self.entries[tau][s - 1]
                    .ok_or_else(|| LabError::Invalid(format!("final accuracy of task {tau} missing")))
            })
            .collect()
    }

    pub fn validate(&self) -> LabResult<()> {
        let s = self.tasks();
        for tau in 0..s {
            for t in tau..s {
                if self.entries[tau][t].is_none() {
                    return invalid(format!("entry ({tau}, {t}) missing"));
                }
            }
        }
        Ok(())
    }
}

/// Mean final accuracy over all tasks.
pub fn compute_acc(m: &AccuracyMatrix) -> LabResult<f64> {
    let row = m.final_row()?;
    if row.is_empty() {
        return invalid("empty accuracy matrix");
    }
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub value: f64,
    /// False when fewer than two tasks leave nothing to forget.
    pub defined: bool,
}

/// Mean drop from each earlier task's best accuracy to its final accuracy; the
/// last task is excluded.
pub fn compute_fgt(m: &AccuracyMatrix) -> LabResult<Forgetting> {
    let s = m.tasks();
    if s < 2 {
        return Ok(Forgetting {
            value: 0.0,
            defined: false,
        });
    }
    m.validate()?;
    let mut total = 0.0;
    for tau in 0..s - 1 {
        let best = (tau..s)
            .map(|t| m.entries[tau][t].expect("validated"))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best - m.entries[tau][s - 1].expect("validated");
    }
    Ok(Forgetting {
        value: total / (s - 1) as f64,
        defined: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionRecord {
    /// 0 is the untuned model; stage t follows training task t - 1.
    pub stage: usize,
    pub visual_ce: f64,
    pub generation_exact_match: f64,
    pub understanding_exact_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub optimizer: OptimizerConfig,
    pub adapter: AdapterConfig,
    pub kd: KdConfig,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            adapter: AdapterConfig::default(),
            kd: KdConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContinualOutcome {
    pub strategy: Strategy,
    pub matrix: AccuracyMatrix,
    pub retention: Vec<RetentionRecord>,
    pub stages: Vec<AdapterStack>,
    pub losses: Vec<f64>,
    pub params: ParamReport,
}

/// Teacher logits cached per reference example, at the rows distillation reads.
struct KdReference {
    seqs: Vec<TokenSequence>,
    teacher: Vec<Tensor>,
    modality: Modality,
}

impl KdReference {
    fn build(bb: &Backbone, examples: &[Example], modality: Modality) -> LabResult<Self> {
        if examples.is_empty() {
            return invalid("distillation reference set is empty");
        }
        let mut seqs = Vec::with_capacity(examples.len());
        let mut teacher = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(64) {
            let cs: Vec<TokenSequence> = chunk.iter().map(|e| e.seq.mask_modality(modality)).collect();
            let batch = Batch::pack(&cs);
            let rows = kd_rows(&batch, modality);
            let all = teacher_rows(bb, &batch, &rows)?;
            let v = all.shape()[1];
            let mut offset = 0;
            for k in 0..cs.len() {
                let n = rows.iter().filter(|r| r.0 == k).count();
                teacher.push(Tensor::new(vec![n, v], all.data()[offset * v..(offset + n) * v].to_vec())?);
                offset += n;
            }
            seqs.extend(cs);
        }
        Ok(Self {
            seqs,
            teacher,
            modality,
        })
    }

    fn sample(&self, idx: &[usize]) -> LabResult<(Batch, Tensor, Vec<(usize, usize)>)> {
        let seqs: Vec<TokenSequence> = idx.iter().map(|&i| self.seqs[i].clone()).collect();
        let batch = Batch::pack(&seqs);
        let rows = kd_rows(&batch, self.modality);
        let v = self.teacher[idx[0]].shape()[1];
        let mut data = Vec::new();
        for &i in idx {
            data.extend_from_slice(self.teacher[i].data());
        }
        let t = Tensor::new(vec![rows.len(), v], data)?;
        Ok((batch, t, rows))
    }
}

fn ce_roles(strategy: Strategy) -> &'static [ParamRole] {
    match strategy {
        Strategy::Mode | Strategy::ModeWithoutKd => &[ParamRole::Psi, ParamRole::Phi],
        _ => &[ParamRole::Shared],
    }
}

/// Gradient of one adapter step: cross-entropy on the task batch for every
/// trainable adapter, plus `λ·KD` on the reference batch for `kd_role` only.
fn adapter_grads(
    bb: &Backbone,
    stack: &AdapterStack,
    strategy: Strategy,
    batch: &Batch,
    kd: Option<(&Batch, &Tensor, &[(usize, usize)], ParamRole, &KdConfig)>,
) -> LabResult<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bvars = bb.bind(&mut g, false)?;
    let avars = stack.bind_roles(&mut g, ce_roles(strategy))?;
    let logits = bb.forward(&mut g, &bvars, batch, Some((stack, &avars)))?;
    let ce = ce_graph(&mut g, logits, batch)?;
    g.backward(ce)?;
    let mut grads = stack.params.grads(&g, &avars);
    let mut loss = g.value(ce).item();
    if let Some((kb, teacher, rows, role, cfg)) = kd {
        let mut g = Graph::new();
        let bvars = bb.bind(&mut g, false)?;
        let avars = stack.bind_roles(&mut g, &[role])?;
        let logits = bb.forward(&mut g, &bvars, kb, Some((stack, &avars)))?;
        let kd_loss = kd_graph(&mut g, logits, teacher, rows, cfg.beta)?;
        g.backward(kd_loss)?;
        loss += cfg.lambda * g.value(kd_loss).item();
        for (acc, k) in grads.iter_mut().zip(stack.params.grads(&g, &avars)) {
            for (a, b) in acc.data_mut().iter_mut().zip(k.data()) {
                *a += cfg.lambda * b;
            }
        }
    }
    Ok((loss, grads))
}

fn new_stack(bb: &Backbone, strategy: Strategy, cfg: &TuneConfig) -> LabResult<Option<AdapterStack>> {
    match strategy.adapter_kind() {
        None => Ok(None),
        Some(kind) => Ok(Some(AdapterStack::new(
            &bb.config,
            AdapterConfig {
                kind,
                ..cfg.adapter.clone()
            },
        )?)),
    }
}

/// One pass of adapter training over `train` with a fresh optimizer and schedule.
#[allow(clippy::too_many_arguments)]
fn tune_on(
    bb: &Backbone,
    stack: &mut AdapterStack,
    strategy: Strategy,
    train: &[Example],
    cfg: &TuneConfig,
    kd: Option<(&KdReference, ParamRole)>,
    rng: &mut ChaCha8Rng,
    stage: &str,
    losses: &mut Vec<f64>,
) -> LabResult<()> {
    let bs = cfg.optimizer.batch_size.max(1);
    let steps_per_epoch = train.len() / bs;
    let total = steps_per_epoch * cfg.optimizer.epochs;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), stack.params.tensors());
    let roles: Vec<ParamRole> = ce_roles(strategy).to_vec();
    let mask: Vec<bool> = stack.roles.iter().map(|r| roles.contains(r)).collect();
    let mut step = 0;
    for _ in 0..cfg.optimizer.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks_exact(bs) {
            let seqs: Vec<TokenSequence> = chunk.iter().map(|&i| train[i].seq.clone()).collect();
            let batch = Batch::pack(&seqs);
            let kd_batch = match kd {
                Some((reference, _)) => {
                    let mut idx: Vec<usize> = (0..reference.seqs.len()).collect();
                    idx.shuffle(rng);
                    idx.truncate(bs.min(reference.seqs.len()));
                    Some(reference.sample(&idx)?)
                }
                None => None,
            };
            let kd_arg = match (&kd_batch, kd) {
                (Some((b, t, r)), Some((_, role))) => Some((b, t, r.as_slice(), role, &cfg.kd)),
                _ => None,
            };
            let (loss, grads) = adapter_grads(bb, stack, strategy, &batch, kd_arg)?;
            if !loss.is_finite() {
                return Err(LabError::Diverged {
                    stage: stage.to_string(),
                    step,
                });
            }
            losses.push(loss);
            let lr = cosine_lr(cfg.optimizer.lr, step, total, cfg.optimizer.warmup_ratio);
            opt.step(stack.params.tensors_mut(), &grads, lr, &mask);
            step += 1;
        }
    }
    Ok(())
}

fn retention(bb: &Backbone, stack: Option<&AdapterStack>, corpus: &Corpus, stage: usize) -> LabResult<RetentionRecord> {
    Ok(RetentionRecord {
        stage,
        visual_ce: mean_ce(bb, stack, &corpus.gen_eval)?,
        generation_exact_match: generation_exact_match(bb, stack, &corpus.gen_eval)?,
        understanding_exact_match: answer_exact_match(bb, stack, &corpus.describe_eval)?,
    })
}

/// Tunes adapters on each task in order, evaluating every seen task and the
/// held-out generation set after each stage. The backbone is never updated.
pub fn continual_tune(
    bb: &Backbone,
    strategy: Strategy,
    tasks: &[TaskData],
    cfg: &TuneConfig,
    corpus: &Corpus,
) -> LabResult<ContinualOutcome> {
    if tasks.is_empty() {
        return invalid("task list is empty");
    }
    cfg.kd.validate()?;
    let mut stack = new_stack(bb, strategy, cfg)?;
    let mut matrix = AccuracyMatrix::new(tasks.len());
    for (tau, task) in tasks.iter().enumerate() {
        matrix.zero_shot[tau] = answer_exact_match(bb, stack.as_ref(), &task.eval)?;
    }
    let mut records = vec![retention(bb, stack.as_ref(), corpus, 0)?];
    let reference = if strategy.uses_kd() {
        Some(KdReference::build(bb, &corpus.gen_reference, Modality::Image)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stages = Vec::with_capacity(tasks.len());
    let mut losses = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        if let Some(s) = stack.as_mut() {
            tune_on(
                bb,
                s,
                strategy,
                &task.train,
                cfg,
                reference.as_ref().map(|r| (r, ParamRole::Psi)),
                &mut rng,
                &format!("task {t}"),
                &mut losses,
            )?;
        }
        for (tau, prev) in tasks.iter().enumerate().take(t + 1) {
            matrix.entries[tau][t] = Some(if stack.is_none() {
                matrix.zero_shot[tau]
            } else {
                answer_exact_match(bb, stack.as_ref(), &prev.eval)?
            });
        }
        records.push(retention(bb, stack.as_ref(), corpus, t + 1)?);
        if let Some(s) = &stack {
            stages.push(s.clone());
        }
    }
    let params = crate::adapters::trainable_param_report(bb.numel(), stack.as_ref());
    Ok(ContinualOutcome {
        strategy,
        matrix,
        retention: records,
        stages,
        losses,
        params,
    })
}

#[derive(Debug, Clone)]
pub struct ReverseOutcome {
    pub strategy: Strategy,
    pub before: RetentionRecord,
    pub after: RetentionRecord,
    /// Exact match on held-out prompts of the tuned generation task.
    pub tuned_task_exact_match: f64,
    pub losses: Vec<f64>,
    pub stack: Option<AdapterStack>,
}

impl ReverseOutcome {
    pub fn understanding_drop(&self) -> f64 {
        self.before.understanding_exact_match - self.after.understanding_exact_match
    }
}

/// Tunes on a generation task and tracks understanding. For the decoupled
/// strategy, distillation on the text answers of an understanding-shaped
/// reference anchors the text-side experts.
pub fn reverse_direction_run(
    bb: &Backbone,
    strategy: Strategy,
    train: &[Example],
    eval: &[Example],
    cfg: &TuneConfig,
    corpus: &Corpus,
) -> LabResult<ReverseOutcome> {
    cfg.kd.validate()?;
    let mut stack = new_stack(bb, strategy, cfg)?;
    let before = retention(bb, stack.as_ref(), corpus, 0)?;
    let reference = if strategy.uses_kd() {
        Some(KdReference::build(bb, &corpus.describe_reference, Modality::Text)?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::new();
    if let Some(s) = stack.as_mut() {
        tune_on(
            bb,
            s,
            strategy,
            train,
            cfg,
            reference.as_ref().map(|r| (r, ParamRole::Phi)),
            &mut rng,
            "reverse",
            &mut losses,
        )?;
    }
    let after = retention(bb, stack.as_ref(), corpus, 1)?;
    Ok(ReverseOutcome {
        strategy,
        tuned_task_exact_match: generation_exact_match(bb, stack.as_ref(), eval)?,
        before,
        after,
        losses,
        stack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_task_has_no_forgetting() {
        let mut m = AccuracyMatrix::new(1);
        m.entries[0][0] = Some(0.7);
        let f = compute_fgt(&m).unwrap();
        assert_eq!(f.value, 0.0);
        assert!(!f.defined);
        assert!((compute_acc(&m).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn constant_matrix() {
        let m = AccuracyMatrix::from_best_final(&[0.4; 4], &[0.4; 4]).unwrap();
        assert_eq!(compute_fgt(&m).unwrap().value, 0.0);
        let ones = AccuracyMatrix::from_best_final(&[1.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(compute_acc(&ones).unwrap(), 1.0);
    }

    #[test]
    fn incomplete_final_row_rejected() {
        let m = AccuracyMatrix::new(2);
        assert!(compute_acc(&m).is_err());
        assert!(compute_fgt(&m).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("replay".parse::<Strategy>().is_err());
    }
}
