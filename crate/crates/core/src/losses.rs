//! Training objectives: answer-token cross-entropy and tempered logit distillation.

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterStack;
use crate::autodiff::{log_softmax_values, Graph, Var};
use crate::backbone::{Backbone, Batch, Modality, TokenSequence};
use crate::error::{invalid, LabResult};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub per_token: Option<Vec<f64>>,
    pub contributing_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    pub beta: f64,
    pub lambda: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            lambda: 0.3,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> LabResult<()> {
        if !(self.beta > 0.0) {
            return invalid(format!("temperature must be positive, got {}", self.beta));
        }
        if !(self.lambda >= 0.0) {
            return invalid(format!("distillation weight must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of the masked targets of one sequence;
/// `logits` has one row per position.
pub fn ce_loss(logits: &Tensor, seq: &TokenSequence) -> LabResult<LossValue> {
    let (rows, _) = logits.dims2("ce_loss")?;
    if rows != seq.len() {
        return invalid(format!("{rows} logit rows for a sequence of length {}", seq.len()));
    }
    let per_token: Vec<f64> = seq
        .target_positions()
        .map(|i| -log_softmax_values(logits.row(i - 1))[seq.ids[i]])
        .collect();
    if per_token.is_empty() {
        return invalid("sequence has no target positions");
    }
    let value = per_token.iter().sum::<f64>() / per_token.len() as f64;
    Ok(LossValue {
        value,
        contributing_count: per_token.len(),
        per_token: Some(per_token),
    })
}

/// `β² · KL(softmax(z_t/β) ‖ softmax(z_s/β))` for one pair of logit rows.
pub fn kd_term(teacher: &[f64], student: &[f64], beta: f64) -> f64 {
    let inv = 1.0 / beta;
    let lt = log_softmax_values(&teacher.iter().map(|z| z * inv).collect::<Vec<_>>());
    let ls = log_softmax_values(&student.iter().map(|z| z * inv).collect::<Vec<_>>());
    let mut kl = 0.0;
    for (a, b) in lt.iter().zip(&ls) {
        kl += a.exp() * (a - b);
    }
    beta * beta * kl
}

/// Distillation loss summed over the rows of two equally shaped logit matrices.
pub fn kd_loss(teacher: &Tensor, student: &Tensor, beta: f64) -> LabResult<LossValue> {
    if !(beta > 0.0) {
        return invalid(format!("temperature must be positive, got {beta}"));
    }
    if teacher.shape() != student.shape() {
        return invalid(format!(
            "teacher logits {:?} and student logits {:?} differ in shape",
            teacher.shape(),
            student.shape()
        ));
    }
    let (rows, _) = teacher.rows_cols();
    let per_token: Vec<f64> = (0..rows)
        .map(|i| kd_term(teacher.row(i), student.row(i), beta))
        .collect();
    Ok(LossValue {
        value: per_token.iter().sum(),
        contributing_count: rows,
        per_token: Some(per_token),
    })
}

/// `ce + λ·kd`.
pub fn v_adapter_loss(ce: &LossValue, kd: &LossValue, lambda: f64) -> LabResult<LossValue> {
    if !(lambda >= 0.0) {
        return invalid(format!("distillation weight must be non-negative, got {lambda}"));
    }
    if !ce.value.is_finite() || !kd.value.is_finite() {
        return invalid("loss components must be finite");
    }
    Ok(LossValue {
        value: ce.value + lambda * kd.value,
        per_token: None,
        contributing_count: ce.contributing_count,
    })
}

// ---- batched graph objectives ----------------------------------------------

/// Cross-entropy over a packed batch: per-sequence mean over targets, then mean
/// over the sequences that have targets.
pub fn ce_graph(g: &mut Graph, logits: Var, batch: &Batch) -> LabResult<Var> {
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut weights = Vec::new();
    let with_targets = (0..batch.seqs.len())
        .filter(|&k| batch.seqs[k].loss_mask.iter().any(|&m| m))
        .count();
    if with_targets == 0 {
        return invalid("batch has no target positions");
    }
    for k in 0..batch.seqs.len() {
        let t = batch.targets(k);
        let w = -1.0 / (t.len() as f64 * with_targets as f64);
        for (r, c) in t {
            rows.push(r);
            cols.push(c);
            weights.push(w);
        }
    }
    let logp = g.log_softmax(logits)?;
    let picked = g.gather(logp, &rows, &cols)?;
    let n = weights.len();
    let wv = g.constant(Tensor::new(vec![n], weights)?)?;
    let weighted = g.mul(picked, wv)?;
    Ok(g.sum(weighted)?)
}

/// Rows `(sequence index, logit row)` whose next token is a target of the
/// given modality.
pub fn kd_rows(batch: &Batch, modality: Modality) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for k in 0..batch.seqs.len() {
        let seg = batch.segments[k];
        let seq = &batch.seqs[k];
        for i in seq.target_positions() {
            if seq.modality[i] == modality {
                out.push((k, seg.start + i - 1));
            }
        }
    }
    out
}

/// Frozen-teacher logits at the chosen rows.
pub fn teacher_rows(teacher: &Backbone, batch: &Batch, rows: &[(usize, usize)]) -> LabResult<Tensor> {
    let logits = teacher.logits(batch, None)?;
    let v = logits.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * v);
    for &(_, r) in rows {
        data.extend_from_slice(logits.row(r));
    }
    Ok(Tensor::new(vec![rows.len(), v], data)?)
}

/// Distillation term on the tape: summed over the chosen rows of each
/// sequence and averaged over sequences. Teacher logits enter as constants.
pub fn kd_graph(
    g: &mut Graph,
    student_logits: Var,
    teacher: &Tensor,
    rows: &[(usize, usize)],
    beta: f64,
) -> LabResult<Var> {
    if !(beta > 0.0) {
        return invalid(format!("temperature must be positive, got {beta}"));
    }
    if rows.is_empty() {
        return invalid("distillation batch has no contributing positions");
    }
    let mut seqs: Vec<usize> = rows.iter().map(|&(k, _)| k).collect();
    seqs.dedup();
    let n_seq = seqs.len() as f64;
    let v = teacher.shape()[1];
    let inv = 1.0 / beta;
    let weight = beta * beta / n_seq;
    // W[i, c] = weight · p_t[i, c]; loss = Σ W·log p_t − Σ W·log p_s
    let mut w = Vec::with_capacity(rows.len() * v);
    let mut const_term = 0.0;
    for i in 0..rows.len() {
        let scaled: Vec<f64> = teacher.row(i).iter().map(|z| z * inv).collect();
        let lt = log_softmax_values(&scaled);
        for &l in &lt {
            let wi = l.exp() * weight;
            w.push(wi);
            const_term += l * wi;
        }
    }
    let row_ids: Vec<usize> = rows.iter().map(|&(_, r)| r).collect();
    let sel = g.select_rows(student_logits, &row_ids)?;
    let scaled = g.scale(sel, inv)?;
    let ls = g.log_softmax(scaled)?;
    let wv = g.constant(Tensor::new(vec![rows.len(), v], w)?)?;
    let cross = g.mul(ls, wv)?;
    let cross_sum = g.sum(cross)?;
    let c = g.constant(Tensor::scalar(const_term))?;
    Ok(g.sub(c, cross_sum)?)
}

/// Distillation between the frozen backbone and the same backbone carrying
/// `student` adapters, over the image-target positions of `reference`.
pub fn teacher_student_kd_pass(
    teacher: &Backbone,
    student: &AdapterStack,
    reference: &[TokenSequence],
    beta: f64,
) -> LabResult<LossValue> {
    if reference.is_empty() {
        return invalid("distillation reference batch is empty");
    }
    let batch = Batch::pack(reference);
    let rows = kd_rows(&batch, Modality::Image);
    if rows.is_empty() {
        return invalid("distillation reference has no image targets");
    }
    let t = teacher.logits(&batch, None)?;
    let s = teacher.logits(&batch, Some(student))?;
    let pick = |m: &Tensor| {
        let v = m.shape()[1];
        let mut d = Vec::with_capacity(rows.len() * v);
        for &(_, r) in &rows {
            d.extend_from_slice(m.row(r));
        }
        Tensor::new(vec![rows.len(), v], d)
    };
    let mut kd = kd_loss(&pick(&t)?, &pick(&s)?, beta)?;
    // Sum per sequence, mean over sequences, matching the batched objective.
    let mut seqs: Vec<usize> = rows.iter().map(|&(k, _)| k).collect();
    seqs.dedup();
    kd.value /= seqs.len() as f64;
    Ok(kd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::VocabLayout;

    fn vocab() -> VocabLayout {
        VocabLayout {
            image_tokens: 2,
            text_tokens: 2,
        }
    }

    #[test]
    fn ce_certain_and_uniform() {
        let v = vocab();
        let seq = TokenSequence::new(&v, vec![4, 2, 3], vec![false, true, true]).unwrap();
        let mut sure = Tensor::filled(&[3, v.size()], -1e4);
        sure.data_mut()[2] = 1e4;
        sure.data_mut()[v.size() + 3] = 1e4;
        assert!(ce_loss(&sure, &seq).unwrap().value.abs() < 1e-12);
        let flat = Tensor::zeros(&[3, v.size()]);
        let ce = ce_loss(&flat, &seq).unwrap();
        assert!((ce.value - (v.size() as f64).ln()).abs() < 1e-12);
        assert_eq!(ce.contributing_count, 2);
    }

    #[test]
    fn ce_rejects_empty_mask() {
        let v = vocab();
        let seq = TokenSequence::prompt(&v, vec![4, 2]).unwrap();
        assert!(ce_loss(&Tensor::zeros(&[2, v.size()]), &seq).is_err());
    }

    #[test]
    fn kd_identity_and_rejections() {
        let z = Tensor::from_rows(&[&[0.3, -1.0, 2.0]]).unwrap();
        assert_eq!(kd_loss(&z, &z, 2.0).unwrap().value, 0.0);
        assert!(kd_loss(&z, &z, 0.0).is_err());
        assert!(kd_loss(&z, &Tensor::zeros(&[1, 2]), 1.0).is_err());
    }

    #[test]
    fn kd_two_class_against_direct_kl() {
        // p = softmax([0.5, 0]), q = softmax([0, 0.5]) after dividing by β = 2
        let p1 = 1.0 / (1.0 + (-0.5f64).exp());
        let p = [p1, 1.0 - p1];
        let q = [1.0 - p1, p1];
        let oracle = 4.0 * (p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln());
        let t = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
        let s = Tensor::from_rows(&[&[0.0, 1.0]]).unwrap();
        assert!((kd_loss(&t, &s, 2.0).unwrap().value - oracle).abs() < 1e-14);
        // 4 · (2p−1)·0.5 with p = σ(0.5)
        assert!((oracle - 0.489_837_324_807_418_4).abs() < 1e-12);
    }

    #[test]
    fn combined_loss() {
        let ce = LossValue {
            value: 0.0,
            per_token: None,
            contributing_count: 1,
        };
        let kd = LossValue {
            value: 2.0,
            per_token: None,
            contributing_count: 1,
        };
        assert!((v_adapter_loss(&ce, &kd, 0.3).unwrap().value - 0.6).abs() < 1e-15);
        assert_eq!(v_adapter_loss(&ce, &kd, 0.0).unwrap().value, 0.0);
        assert!(v_adapter_loss(&ce, &kd, -0.1).is_err());
    }

    #[test]
    fn graph_objectives_match_value_versions() {
        let v = vocab();
        let s1 = TokenSequence::new(&v, vec![4, 0, 1, 2], vec![false, true, true, false]).unwrap();
        let s2 = TokenSequence::new(&v, vec![4, 1, 3], vec![false, false, true]).unwrap();
        let batch = Batch::pack(&[s1.clone(), s2.clone()]);
        let data: Vec<f64> = (0..7 * v.size()).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.5).collect();
        let logits = Tensor::new(vec![7, v.size()], data).unwrap();
        let mut g = Graph::new();
        let lv = g.param(logits.clone()).unwrap();
        let ce = ce_graph(&mut g, lv, &batch).unwrap();
        let rows1 = Tensor::new(vec![4, v.size()], logits.data()[..4 * v.size()].to_vec()).unwrap();
        let rows2 = Tensor::new(vec![3, v.size()], logits.data()[4 * v.size()..].to_vec()).unwrap();
        let oracle = 0.5 * (ce_loss(&rows1, &s1).unwrap().value + ce_loss(&rows2, &s2).unwrap().value);
        assert!((g.value(ce).item() - oracle).abs() < 1e-14);

        let rows = kd_rows(&batch, Modality::Image);
        assert_eq!(rows, vec![(0, 0), (0, 1)]);
        let teacher = Tensor::new(vec![2, v.size()], logits.data()[5 * v.size()..7 * v.size()].to_vec()).unwrap();
        let kd = kd_graph(&mut g, lv, &teacher, &rows, 2.0).unwrap();
        let student = Tensor::new(vec![2, v.size()], logits.data()[..2 * v.size()].to_vec()).unwrap();
        let direct = kd_loss(&teacher, &student, 2.0).unwrap().value;
        assert!((g.value(kd).item() - direct).abs() < 1e-12);
    }
}
