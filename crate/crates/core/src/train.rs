//! Backbone pretraining and the evaluation metrics shared by every run.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterStack;
use crate::autodiff::Graph;
use crate::backbone::{Backbone, BackboneConfig, Batch, Decode, TokenSequence};
use crate::error::{LabError, LabResult};
use crate::losses::ce_graph;
use crate::optim::{cosine_lr, Optimizer, OptimizerConfig, OptimizerKind};
use crate::tasks::{describe_example, generation_example, split_combos, ComboSplit, Example, Lexicon, GRID};

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// Share of each batch drawn from the generation direction.
    pub generation_fraction: f64,
    pub data_seed: u64,
    pub heldout_size: usize,
    pub reference_size: usize,
    pub generation_floor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            lr: 3e-3,
            warmup_ratio: 0.05,
            weight_decay: 0.0,
            generation_fraction: 0.5,
            data_seed: 0,
            heldout_size: 256,
            reference_size: 256,
            generation_floor: 0.90,
        }
    }
}

/// Pretraining and held-out data derived from one combo split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub split: ComboSplit,
    pub gen_train: Vec<Example>,
    pub describe_train: Vec<Example>,
    /// Held-out generation prompts used for the retention metrics.
    pub gen_eval: Vec<Example>,
    /// Held-out describe questions used to track understanding.
    pub describe_eval: Vec<Example>,
    /// Generation-shaped distillation reference.
    pub gen_reference: Vec<Example>,
    /// Understanding-shaped distillation reference.
    pub describe_reference: Vec<Example>,
}

impl Corpus {
    pub fn build(lex: &Lexicon, cfg: &PretrainConfig) -> LabResult<Self> {
        let split = split_combos(cfg.data_seed, cfg.heldout_size, cfg.reference_size)?;
        let gen = |cs: &[crate::tasks::Combo]| -> LabResult<Vec<Example>> {
            cs.iter().map(|&c| generation_example(lex, c, false)).collect()
        };
        let desc = |cs: &[crate::tasks::Combo]| -> LabResult<Vec<Example>> {
            cs.iter().map(|&c| describe_example(lex, c)).collect()
        };
        Ok(Self {
            gen_train: gen(&split.train)?,
            describe_train: desc(&split.train)?,
            gen_eval: gen(&split.eval)?,
            describe_eval: desc(&split.eval)?,
            gen_reference: gen(&split.reference)?,
            describe_reference: desc(&split.reference)?,
            split,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub generation_exact_match: f64,
    pub describe_exact_match: f64,
}

/// Loss and parameter gradients of the bare backbone on one batch.
pub fn backbone_grads(bb: &Backbone, batch: &Batch) -> LabResult<(f64, Vec<crate::tensor::Tensor>)> {
    let mut g = Graph::new();
    let vars = bb.bind(&mut g, true)?;
    let logits = bb.forward(&mut g, &vars, batch, None)?;
    let loss = ce_graph(&mut g, logits, batch)?;
    g.backward(loss)?;
    Ok((g.value(loss).item(), bb.params.grads(&g, &vars)))
}

fn check_finite(loss: f64, stage: &str, step: usize) -> LabResult<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(LabError::Diverged {
            stage: stage.to_string(),
            step,
        })
    }
}

/// Trains every backbone weight on a generation/describe mix.
pub fn pretrain_backbone(
    config: BackboneConfig,
    cfg: &PretrainConfig,
    corpus: &Corpus,
) -> LabResult<(Backbone, PretrainLog)> {
    let mut bb = Backbone::init(config)?;
    let opt_cfg = OptimizerConfig {
        kind: OptimizerKind::AdamW,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        warmup_ratio: cfg.warmup_ratio,
        batch_size: cfg.batch_size,
        ..OptimizerConfig::default()
    };
    let mut opt = Optimizer::new(opt_cfg, bb.params.tensors());
    let mask = vec![true; bb.params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed ^ 0x5eed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seqs: Vec<TokenSequence> = (0..cfg.batch_size)
            .map(|_| {
                let pool = if rng.gen_bool(cfg.generation_fraction) {
                    &corpus.gen_train
                } else {
                    &corpus.describe_train
                };
                pool.choose(&mut rng).expect("non-empty pool").seq.clone()
            })
            .collect();
        let (loss, grads) = backbone_grads(&bb, &Batch::pack(&seqs))?;
        check_finite(loss, "pretrain", step)?;
        losses.push(loss);
        let lr = cosine_lr(cfg.lr, step, cfg.steps, cfg.warmup_ratio);
        opt.step(bb.params.tensors_mut(), &grads, lr, &mask);
    }
    let generation_exact_match = generation_exact_match(&bb, None, &corpus.gen_eval)?;
    let describe_exact_match = answer_exact_match(&bb, None, &corpus.describe_eval)?;
    let final_loss = losses.last().copied().unwrap_or(f64::NAN);
    Ok((
        bb,
        PretrainLog {
            losses,
            final_loss,
            generation_exact_match,
            describe_exact_match,
        },
    ))
}

/// Share of generation prompts whose greedy image span equals the target grid.
pub fn generation_exact_match(
    bb: &Backbone,
    adapters: Option<&AdapterStack>,
    examples: &[Example],
) -> LabResult<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let prompts: Vec<TokenSequence> = chunk.iter().map(Example::prompt).collect();
        let out = bb.generate_image(&prompts, GRID, Decode::Greedy, adapters)?;
        hits += out.iter().zip(chunk).filter(|(o, e)| **o == e.answer).count();
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Share of questions whose greedy answer span matches exactly.
pub fn answer_exact_match(
    bb: &Backbone,
    adapters: Option<&AdapterStack>,
    examples: &[Example],
) -> LabResult<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut by_len: std::collections::BTreeMap<usize, Vec<&Example>> = Default::default();
    for e in examples {
        by_len.entry(e.answer.len()).or_default().push(e);
    }
    for (len, group) in by_len {
        for chunk in group.chunks(EVAL_CHUNK) {
            let prompts: Vec<TokenSequence> = chunk.iter().map(|e| e.prompt()).collect();
            let out = bb.greedy_continue(&prompts, len, adapters)?;
            hits += out.iter().zip(chunk).filter(|(o, e)| **o == e.answer).count();
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Mean per-sequence cross-entropy of the masked targets.
pub fn mean_ce(bb: &Backbone, adapters: Option<&AdapterStack>, examples: &[Example]) -> LabResult<f64> {
    let mut total = 0.0;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let seqs: Vec<TokenSequence> = chunk.iter().map(|e| e.seq.clone()).collect();
        for lp in bb.target_log_probs(&Batch::pack(&seqs), adapters)? {
            total += -lp.iter().sum::<f64>() / lp.len() as f64;
        }
    }
    Ok(total / examples.len().max(1) as f64)
}
