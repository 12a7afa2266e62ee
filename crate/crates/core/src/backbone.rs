//! A small pre-LN causal transformer over a joint image/text vocabulary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterStack, Site};
use crate::autodiff::{log_softmax_values, softmax_values, Graph, Segment, Var};
use crate::error::{invalid, LabResult};
use crate::params::{uniform, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Image,
}

/// Token id layout: image ids first, then text ids, then four specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub image_tokens: usize,
    pub text_tokens: usize,
}

impl VocabLayout {
    pub fn text_base(&self) -> usize {
        self.image_tokens
    }

    pub fn bos(&self) -> usize {
        self.image_tokens + self.text_tokens
    }

    pub fn eos(&self) -> usize {
        self.bos() + 1
    }

    pub fn img_start(&self) -> usize {
        self.bos() + 2
    }

    pub fn img_end(&self) -> usize {
        self.bos() + 3
    }

    pub fn size(&self) -> usize {
        self.bos() + 4
    }

    pub fn is_image_token(&self, id: usize) -> bool {
        id < self.image_tokens
    }

    /// Image codes and the two image-span markers are image modality; text ids,
    /// BOS and EOS are text.
    pub fn modality(&self, id: usize) -> Option<Modality> {
        if id < self.image_tokens {
            Some(Modality::Image)
        } else if id < self.bos() + 2 {
            Some(Modality::Text)
        } else if id < self.size() {
            Some(Modality::Image)
        } else {
            None
        }
    }
}

/// Token ids with per-position modality and a target mask. `loss_mask[i]`
/// marks `ids[i]` as a target predicted from the logits at `i - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub modality: Vec<Modality>,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(vocab: &VocabLayout, ids: Vec<usize>, loss_mask: Vec<bool>) -> LabResult<Self> {
        if ids.len() != loss_mask.len() {
            return invalid("ids and loss_mask lengths differ");
        }
        if loss_mask.first() == Some(&true) {
            return invalid("position 0 has no preceding logits and cannot be a target");
        }
        let modality = ids
            .iter()
            .map(|&id| {
                vocab
                    .modality(id)
                    .ok_or_else(|| crate::error::LabError::Invalid(format!("token id {id} outside vocabulary")))
            })
            .collect::<LabResult<Vec<_>>>()?;
        Ok(Self {
            ids,
            modality,
            loss_mask,
        })
    }

    /// A sequence with no targets.
    pub fn prompt(vocab: &VocabLayout, ids: Vec<usize>) -> LabResult<Self> {
        let n = ids.len();
        Self::new(vocab, ids, vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn target_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.loss_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
    }

    /// Copy with the mask restricted to targets of one modality.
    pub fn mask_modality(&self, keep: Modality) -> Self {
        let mut out = self.clone();
        for (m, modality) in out.loss_mask.iter_mut().zip(&self.modality) {
            *m = *m && *modality == keep;
        }
        out
    }

    pub fn validate(&self, vocab: &VocabLayout) -> LabResult<()> {
        if self.modality.len() != self.ids.len() || self.loss_mask.len() != self.ids.len() {
            return invalid("sequence fields have different lengths");
        }
        for (&id, &m) in self.ids.iter().zip(&self.modality) {
            if vocab.modality(id) != Some(m) {
                return invalid(format!("modality tag of token {id} disagrees with vocabulary"));
            }
        }
        Ok(())
    }
}

/// Several sequences packed row-wise for one forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub modality: Vec<Modality>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    pub seqs: Vec<TokenSequence>,
}

impl Batch {
    pub fn pack(seqs: &[TokenSequence]) -> Self {
        let mut ids = Vec::new();
        let mut modality = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            segments.push(Segment {
                start: ids.len(),
                len: s.len(),
            });
            ids.extend_from_slice(&s.ids);
            modality.extend_from_slice(&s.modality);
            positions.extend(0..s.len());
        }
        Self {
            ids,
            modality,
            positions,
            segments,
            seqs: seqs.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    /// `(logit_row, target_id)` for each masked target of sequence `k`.
    pub fn targets(&self, k: usize) -> Vec<(usize, usize)> {
        let seg = self.segments[k];
        let seq = &self.seqs[k];
        seq.target_positions()
            .map(|i| (seg.start + i - 1, seq.ids[i]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub image_tokens: usize,
    pub text_tokens: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 64,
            mlp_dim: 256,
            heads: 4,
            image_tokens: 64,
            text_tokens: 64,
            max_len: 160,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn vocab(&self) -> VocabLayout {
        VocabLayout {
            image_tokens: self.image_tokens,
            text_tokens: self.text_tokens,
        }
    }

    pub fn validate(&self) -> LabResult<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return invalid(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            ));
        }
        if self.layers == 0 || self.mlp_dim == 0 || self.max_len == 0 {
            return invalid("layers, mlp_dim and max_len must be positive");
        }
        Ok(())
    }
}

const PER_LAYER: usize = 12;
const LN_EPS: f64 = 1e-5;

/// How a decoder picks the next token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decode {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

impl Backbone {
    pub fn init(config: BackboneConfig) -> LabResult<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.model_dim;
        let v = config.vocab().size();
        let f = config.mlp_dim;
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut p = ParamStore::new();
        p.push("tok_emb", uniform(&mut rng, &[v, d], 0.1));
        p.push("pos_emb", uniform(&mut rng, &[config.max_len, d], 0.1));
        for l in 0..config.layers {
            p.push(format!("layer{l}.ln1.gain"), Tensor::filled(&[d], 1.0));
            p.push(format!("layer{l}.ln1.bias"), Tensor::zeros(&[d]));
            for w in ["wq", "wk", "wv", "wo"] {
                p.push(format!("layer{l}.attn.{w}"), uniform(&mut rng, &[d, d], lin(d)));
            }
            p.push(format!("layer{l}.ln2.gain"), Tensor::filled(&[d], 1.0));
            p.push(format!("layer{l}.ln2.bias"), Tensor::zeros(&[d]));
            p.push(format!("layer{l}.fc1.weight"), uniform(&mut rng, &[f, d], lin(d)));
            p.push(format!("layer{l}.fc1.bias"), Tensor::zeros(&[f]));
            p.push(format!("layer{l}.fc2.weight"), uniform(&mut rng, &[d, f], lin(f)));
            p.push(format!("layer{l}.fc2.bias"), Tensor::zeros(&[d]));
        }
        p.push("ln_f.gain", Tensor::filled(&[d], 1.0));
        p.push("ln_f.bias", Tensor::zeros(&[d]));
        p.push("unembed", uniform(&mut rng, &[v, d], lin(d)));
        Ok(Self { config, params: p })
    }

    pub fn vocab(&self) -> VocabLayout {
        self.config.vocab()
    }

    pub fn numel(&self) -> usize {
        self.params.numel()
    }

    /// Registers the weights on a graph, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LabResult<Vec<Var>> {
        Ok(self.params.bind(g, |_| trainable)?)
    }

    /// Logits `[rows, vocab]` for every packed position.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        batch: &Batch,
        adapters: Option<(&AdapterStack, &[Var])>,
    ) -> LabResult<Var> {
        let c = &self.config;
        for seg in &batch.segments {
            if seg.len > c.max_len {
                return invalid(format!(
                    "sequence length {} exceeds max_len {}",
                    seg.len, c.max_len
                ));
            }
        }
        let vocab = self.vocab().size();
        if let Some(&bad) = batch.ids.iter().find(|&&id| id >= vocab) {
            return invalid(format!("token id {bad} outside vocabulary"));
        }
        if let Some((stack, _)) = adapters {
            stack.check_compatible(c)?;
        }
        let tok = g.select_rows(vars[0], &batch.ids)?;
        let pos = g.select_rows(vars[1], &batch.positions)?;
        let mut x = g.add(tok, pos)?;
        for l in 0..c.layers {
            let w = &vars[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let h = g.layer_norm(x, w[0], w[1], LN_EPS)?;
            let q = g.matmul_nt(h, w[2])?;
            let k = g.matmul_nt(h, w[3])?;
            let v = g.matmul_nt(h, w[4])?;
            let att = g.causal_attention(q, k, v, &batch.segments, c.heads)?;
            let proj = g.matmul_nt(att, w[5])?;
            x = g.add(x, proj)?;
            let h2 = g.layer_norm(x, w[6], w[7], LN_EPS)?;
            let u = self.linear(g, h2, w[8], w[9], l, Site::Fc1, batch, adapters)?;
            let a = g.gelu(u)?;
            let o = self.linear(g, a, w[10], w[11], l, Site::Fc2, batch, adapters)?;
            x = g.add(x, o)?;
        }
        let tail = 2 + c.layers * PER_LAYER;
        let hf = g.layer_norm(x, vars[tail], vars[tail + 1], LN_EPS)?;
        Ok(g.matmul_nt(hf, vars[tail + 2])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn linear(
        &self,
        g: &mut Graph,
        h: Var,
        weight: Var,
        bias: Var,
        layer: usize,
        site: Site,
        batch: &Batch,
        adapters: Option<(&AdapterStack, &[Var])>,
    ) -> LabResult<Var> {
        match adapters {
            None => {
                let base = g.matmul_nt(h, weight)?;
                Ok(g.add_row(base, bias)?)
            }
            Some((stack, avars)) => {
                stack.site_forward(g, avars, layer, site, h, weight, Some(bias), &batch.modality)
            }
        }
    }

    /// Logits as plain rows, without keeping a tape.
    pub fn logits(&self, batch: &Batch, adapters: Option<&AdapterStack>) -> LabResult<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let bound = match adapters {
            Some(stack) => Some((stack, stack.bind(&mut g, |_| false)?)),
            None => None,
        };
        let out = self.forward(
            &mut g,
            &vars,
            batch,
            bound.as_ref().map(|(s, v)| (*s, v.as_slice())),
        )?;
        Ok(g.value(out).clone())
    }

    /// Continues all-text prompts with an image span: appends the start marker
    /// and decodes at most `max_len` image codes, stopping at an end marker.
    /// Returns only the emitted image codes.
    pub fn generate_image(
        &self,
        prompts: &[TokenSequence],
        max_len: usize,
        decode: Decode,
        adapters: Option<&AdapterStack>,
    ) -> LabResult<Vec<Vec<usize>>> {
        let vocab = self.vocab();
        for p in prompts {
            if p.modality.iter().any(|&m| m == Modality::Image) {
                return invalid("image generation prompt must be all text");
            }
        }
        let mut rng = match decode {
            Decode::Temperature { temperature, seed } => {
                if !(temperature > 0.0) {
                    return invalid("temperature must be positive");
                }
                Some(ChaCha8Rng::seed_from_u64(seed))
            }
            Decode::Greedy => None,
        };
        let mut seqs: Vec<TokenSequence> = prompts
            .iter()
            .map(|p| {
                let mut s = p.clone();
                s.ids.push(vocab.img_start());
                s.modality.push(Modality::Image);
                s.loss_mask.push(false);
                s
            })
            .collect();
        let mut out = vec![Vec::new(); prompts.len()];
        let mut live: Vec<usize> = (0..prompts.len()).collect();
        // Allowed continuations: image codes, then the two stop markers.
        let mut allowed: Vec<usize> = (0..vocab.image_tokens).collect();
        allowed.push(vocab.img_end());
        allowed.push(vocab.eos());
        for _ in 0..max_len {
            if live.is_empty() {
                break;
            }
            let active: Vec<TokenSequence> = live.iter().map(|&i| seqs[i].clone()).collect();
            let batch = Batch::pack(&active);
            let logits = self.logits(&batch, adapters)?;
            let mut still = Vec::with_capacity(live.len());
            for (k, &i) in live.iter().enumerate() {
                let row = logits.row(batch.segments[k].start + batch.segments[k].len - 1);
                let scores: Vec<f64> = allowed.iter().map(|&a| row[a]).collect();
                let pick = match (&decode, rng.as_mut()) {
                    (Decode::Temperature { temperature, .. }, Some(r)) => {
                        let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
                        sample(&softmax_values(&scaled), r)
                    }
                    _ => argmax(&scores),
                };
                let id = allowed[pick];
                if vocab.is_image_token(id) {
                    out[i].push(id);
                    seqs[i].ids.push(id);
                    seqs[i].modality.push(Modality::Image);
                    seqs[i].loss_mask.push(false);
                    still.push(i);
                }
            }
            live = still;
        }
        Ok(out)
    }

    /// Greedy continuation of arbitrary prompts by `steps` tokens over the full vocabulary.
    pub fn greedy_continue(
        &self,
        prompts: &[TokenSequence],
        steps: usize,
        adapters: Option<&AdapterStack>,
    ) -> LabResult<Vec<Vec<usize>>> {
        let vocab = self.vocab();
        let mut seqs = prompts.to_vec();
        let mut out = vec![Vec::with_capacity(steps); prompts.len()];
        for _ in 0..steps {
            let batch = Batch::pack(&seqs);
            let logits = self.logits(&batch, adapters)?;
            for (k, s) in seqs.iter_mut().enumerate() {
                let row = logits.row(batch.segments[k].start + batch.segments[k].len - 1);
                let id = argmax(row);
                out[k].push(id);
                s.ids.push(id);
                s.modality.push(vocab.modality(id).unwrap_or(Modality::Text));
                s.loss_mask.push(false);
            }
        }
        Ok(out)
    }

    /// Teacher-forced next-token log-probabilities of the masked targets, summed per
    /// sequence.
    pub fn target_log_probs(
        &self,
        batch: &Batch,
        adapters: Option<&AdapterStack>,
    ) -> LabResult<Vec<Vec<f64>>> {
        let logits = self.logits(batch, adapters)?;
        Ok((0..batch.seqs.len())
            .map(|k| {
                batch
                    .targets(k)
                    .into_iter()
                    .map(|(row, t)| log_softmax_values(logits.row(row))[t])
                    .collect()
            })
            .collect())
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
