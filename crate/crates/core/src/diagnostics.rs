//! Gradient-conflict measurements between a text-answer loss and an
//! image-token loss, taken over the adapter parameters of a frozen backbone.
//!
//! Everything works on the flat adapter vector `θ` (store order). A loss is
//! evaluated by writing `θ` into a scratch copy of the stack, so a drift
//! measurement never touches the caller's adapters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, AdapterKind, AdapterStack, ParamRole};
use crate::autodiff::Graph;
use crate::backbone::{Backbone, Batch, Modality, TokenSequence};
use crate::error::{invalid, LabResult};
use crate::losses::ce_graph;
use crate::train::Corpus;

pub const FD_EPSILON: f64 = 1e-4;
pub const DEFAULT_BIN_WIDTH: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Cross-entropy over text-answer targets.
    Text,
    /// Cross-entropy over image-token targets.
    Visual,
}

impl LossKind {
    fn modality(self) -> Modality {
        match self {
            LossKind::Text => Modality::Text,
            LossKind::Visual => Modality::Image,
        }
    }
}

/// Parameter roles each objective trains under a given adapter kind.
pub fn objective_roles(kind: AdapterKind, loss: LossKind) -> Vec<ParamRole> {
    match (kind, loss) {
        (AdapterKind::Mode, LossKind::Text) => vec![ParamRole::Phi],
        (AdapterKind::Mode, LossKind::Visual) => vec![ParamRole::Psi],
        _ => vec![ParamRole::Shared],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSlice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSnapshot {
    pub kind: LossKind,
    pub loss: f64,
    pub flat: Vec<f64>,
    pub groups: Vec<GroupSlice>,
}

/// One loss over the adapter vector of a fixed stack and backbone.
pub struct AdapterObjective<'a> {
    bb: &'a Backbone,
    stack: AdapterStack,
    batch: Batch,
    pub kind: LossKind,
}

impl<'a> AdapterObjective<'a> {
    pub fn new(bb: &'a Backbone, stack: &AdapterStack, seqs: &[TokenSequence], kind: LossKind) -> LabResult<Self> {
        let masked: Vec<TokenSequence> = seqs.iter().map(|s| s.mask_modality(kind.modality())).collect();
        if !masked.iter().any(|s| s.loss_mask.iter().any(|&m| m)) {
            return invalid(format!("batch has no {kind:?} targets"));
        }
        Ok(Self {
            bb,
            stack: stack.clone(),
            batch: Batch::pack(&masked),
            kind,
        })
    }

    pub fn dim(&self) -> usize {
        self.stack.params.numel()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.stack.params.flatten()
    }

    pub fn value(&mut self, theta: &[f64]) -> LabResult<f64> {
        self.stack.params.assign_flat(theta)?;
        let mut g = Graph::new();
        let bv = self.bb.bind(&mut g, false)?;
        let av = self.stack.bind(&mut g, |_| false)?;
        let logits = self.bb.forward(&mut g, &bv, &self.batch, Some((&self.stack, &av)))?;
        let loss = ce_graph(&mut g, logits, &self.batch)?;
        Ok(g.value(loss).item())
    }

    /// Loss and gradient over all adapter coordinates.
    pub fn grad(&mut self, theta: &[f64]) -> LabResult<(f64, Vec<f64>)> {
        self.stack.params.assign_flat(theta)?;
        let mut g = Graph::new();
        let bv = self.bb.bind(&mut g, false)?;
        let av = self.stack.bind(&mut g, |_| true)?;
        let logits = self.bb.forward(&mut g, &bv, &self.batch, Some((&self.stack, &av)))?;
        let loss = ce_graph(&mut g, logits, &self.batch)?;
        g.backward(loss)?;
        let mut flat = Vec::with_capacity(theta.len());
        for t in self.stack.params.grads(&g, &av) {
            flat.extend_from_slice(t.data());
        }
        Ok((g.value(loss).item(), flat))
    }

    /// Coordinate mask selecting parameters with the given roles.
    pub fn role_mask(&self, roles: &[ParamRole]) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.dim());
        for (t, r) in self.stack.params.tensors().iter().zip(&self.stack.roles) {
            mask.extend(std::iter::repeat(roles.contains(r)).take(t.numel()));
        }
        mask
    }

    pub fn groups(&self) -> Vec<GroupSlice> {
        self.stack
            .params
            .offsets()
            .into_iter()
            .enumerate()
            .map(|(i, (offset, len))| GroupSlice {
                name: self.stack.params.name(i).to_string(),
                offset,
                len,
            })
            .collect()
    }
}

pub fn apply_mask(v: &mut [f64], mask: &[bool]) {
    for (x, &m) in v.iter_mut().zip(mask) {
        if !m {
            *x = 0.0;
        }
    }
}

/// Gradient of the objective at the stack's current parameters, restricted to
/// the parameters that objective trains (`roles`).
pub fn gradient_snapshot(obj: &mut AdapterObjective<'_>, roles: &[ParamRole]) -> LabResult<GradientSnapshot> {
    let theta = obj.theta();
    let (loss, mut flat) = obj.grad(&theta)?;
    apply_mask(&mut flat, &obj.role_mask(roles));
    Ok(GradientSnapshot {
        kind: obj.kind,
        loss,
        flat,
        groups: obj.groups(),
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine with the zero-norm convention: 0 when either side vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCosine {
    pub name: String,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub inner_product: f64,
    pub norm_t: f64,
    pub norm_v: f64,
    pub cosine: f64,
    pub groups: Vec<GroupCosine>,
}

pub fn conflict_inner_product(t: &GradientSnapshot, v: &GradientSnapshot) -> LabResult<Conflict> {
    if t.groups != v.groups || t.flat.len() != v.flat.len() {
        return invalid("snapshots are indexed over different parameter sets");
    }
    let groups = t
        .groups
        .iter()
        .map(|g| GroupCosine {
            name: g.name.clone(),
            cosine: cosine(&t.flat[g.offset..g.offset + g.len], &v.flat[g.offset..g.offset + g.len]),
        })
        .collect();
    Ok(Conflict {
        inner_product: dot(&t.flat, &v.flat),
        norm_t: norm(&t.flat),
        norm_v: norm(&v.flat),
        cosine: cosine(&t.flat, &v.flat),
        groups,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// Left edge of each bin; the last bin is closed at 1.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn bin_of(&self, x: f64) -> usize {
        let n = self.counts.len();
        (((x + 1.0) / self.bin_width).floor().max(0.0) as usize).min(n - 1)
    }
}

pub fn cosine_histogram(cosines: &[f64], bin_width: f64) -> LabResult<Histogram> {
    if cosines.is_empty() {
        return invalid("histogram needs at least one group");
    }
    if !(bin_width > 0.0 && bin_width <= 2.0) {
        return invalid(format!("bin width {bin_width} outside (0, 2]"));
    }
    let n = (2.0 / bin_width).round() as usize;
    let mut h = Histogram {
        bin_width,
        edges: (0..n).map(|i| -1.0 + i as f64 * bin_width).collect(),
        counts: vec![0; n],
    };
    for &c in cosines {
        let b = h.bin_of(c);
        h.counts[b] += 1;
    }
    Ok(h)
}

/// `(∇f(θ + εv̂) − ∇f(θ − εv̂)) / (2ε) · ‖v‖` for unit `v̂ = v/‖v‖`.
pub fn hessian_vector_product<F>(grad: &mut F, theta: &[f64], v: &[f64]) -> LabResult<Vec<f64>>
where
    F: FnMut(&[f64]) -> LabResult<Vec<f64>>,
{
    let nv = norm(v);
    if nv == 0.0 {
        return invalid("Hessian-vector product along a zero direction");
    }
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + FD_EPSILON * d / nv).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - FD_EPSILON * d / nv).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| (a - b) / (2.0 * FD_EPSILON) * nv)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaMax {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Power iteration for the eigenvalue of largest magnitude. Returns its
/// absolute value. Stops when successive Rayleigh quotients agree to `tol`
/// (relative) or the eigen-residual falls below `tol`.
pub fn lambda_max<F>(hvp: &mut F, dim: usize, iters: usize, tol: f64, seed: u64) -> LabResult<LambdaMax>
where
    F: FnMut(&[f64]) -> LabResult<Vec<f64>>,
{
    if iters == 0 {
        return invalid("power iteration needs at least one step");
    }
    if dim == 0 {
        return invalid("empty parameter space");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut prev: Option<f64> = None;
    let mut rq = 0.0;
    for it in 1..=iters {
        let w = hvp(&v)?;
        rq = dot(&v, &w);
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok(LambdaMax {
                value: 0.0,
                converged: true,
                iterations: it,
            });
        }
        let resid = w.iter().zip(&v).map(|(a, b)| (a - rq * b).powi(2)).sum::<f64>().sqrt();
        let settled = prev.is_some_and(|p| (rq - p).abs() <= tol * rq.abs());
        if resid <= tol * rq.abs() || settled {
            return Ok(LambdaMax {
                value: rq.abs(),
                converged: true,
                iterations: it,
            });
        }
        prev = Some(rq);
        v = w.iter().map(|x| x / nw).collect();
    }
    Ok(LambdaMax {
        value: rq.abs(),
        converged: false,
        iterations: iters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftMeasurement {
    pub eta: f64,
    pub exact: f64,
    /// `−η⟨g_t, g_v⟩` with `g_v` on the visual objective's own parameters.
    pub first_order: f64,
    /// `−η⟨g_t, ∇ℒ_v⟩` restricted to parameters outside that support.
    pub cross_support: f64,
    pub second_order: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the log-log fit.
    pub rms: f64,
    pub points: usize,
}

/// Least-squares line through `(ln x, ln |y|)` over points with `|y| > floor`.
pub fn loglog_slope(xs: &[f64], ys: &[f64], floor: f64) -> Option<SlopeFit> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(_, y)| y.abs() > floor)
        .map(|(x, y)| (x.ln(), y.abs().ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / n).sqrt();
    Some(SlopeFit {
        slope,
        intercept,
        rms,
        points: pts.len(),
    })
}

/// Logarithmically spaced grid from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Minimum span of an η grid: a factor of 30.
pub const MIN_GRID_SPAN: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub rows: Vec<DriftMeasurement>,
    pub fit: Option<SlopeFit>,
    pub residual_fit: Option<SlopeFit>,
    /// All drifts are at or below the noise floor.
    pub degenerate: bool,
    /// Residual stays under 10% of the drift at the largest step.
    pub small_step_ok: bool,
    pub norm_step: f64,
    /// Norm of the full visual gradient.
    pub norm_visual: f64,
    /// `g_tᵀ H_v g_t` from one finite-difference Hessian-vector product.
    pub curvature: f64,
}

/// Exact one-step change of `visual` under `θ ← θ − η·step` compared with its
/// Taylor terms. `visual_support` marks the coordinates the visual objective
/// trains; the gradient outside it feeds `cross_support`.
pub fn taylor_drift(
    visual: &mut AdapterObjective<'_>,
    step: &[f64],
    visual_support: &[bool],
    etas: &[f64],
) -> LabResult<DriftReport> {
    if etas.is_empty() || etas.iter().any(|&e| !(e > 0.0)) {
        return invalid("step sizes must be positive");
    }
    let lo = etas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = etas.iter().copied().fold(0.0, f64::max);
    if hi / lo < MIN_GRID_SPAN * (1.0 - 1e-9) {
        return invalid(format!("step grid spans a factor {:.1}, need {MIN_GRID_SPAN}", hi / lo));
    }
    let theta = visual.theta();
    let (l0, gv) = visual.grad(&theta)?;
    let ns = norm(step);
    let curvature = if ns == 0.0 {
        0.0
    } else {
        let hv = hessian_vector_product(&mut |t: &[f64]| visual.grad(t).map(|r| r.1), &theta, step)?;
        dot(step, &hv)
    };
    let (mut on, mut off) = (0.0, 0.0);
    for ((s, g), &m) in step.iter().zip(&gv).zip(visual_support) {
        if m {
            on += s * g;
        } else {
            off += s * g;
        }
    }
    let mut rows = Vec::with_capacity(etas.len());
    for &eta in etas {
        let moved: Vec<f64> = theta.iter().zip(step).map(|(t, s)| t - eta * s).collect();
        let exact = visual.value(&moved)? - l0;
        let first_order = -eta * on;
        let cross_support = -eta * off;
        let second_order = 0.5 * eta * eta * curvature;
        rows.push(DriftMeasurement {
            eta,
            exact,
            first_order,
            cross_support,
            second_order,
            residual: exact - first_order - cross_support - second_order,
        });
    }
    // Leave the objective's stack where it started.
    visual.value(&theta)?;
    let floor = 1e-12;
    let e: Vec<f64> = rows.iter().map(|r| r.eta).collect();
    let fit = loglog_slope(&e, &rows.iter().map(|r| r.exact).collect::<Vec<_>>(), floor);
    let residual_fit = loglog_slope(&e, &rows.iter().map(|r| r.residual).collect::<Vec<_>>(), 0.0);
    let top = rows
        .iter()
        .max_by(|a, b| a.eta.total_cmp(&b.eta))
        .expect("non-empty grid");
    Ok(DriftReport {
        degenerate: rows.iter().all(|r| r.exact.abs() <= floor),
        small_step_ok: top.residual.abs() <= 0.1 * top.exact.abs(),
        rows,
        fit,
        residual_fit,
        norm_step: ns,
        norm_visual: norm(&gv),
        curvature,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub eta: f64,
    pub drift: f64,
    pub bound: f64,
    pub holds: bool,
}

/// `|Δ| ≤ η‖g_t‖‖g_v‖ + (η²/2)·λ·‖g_t‖² + |residual|`.
pub fn coupled_bound(report: &DriftReport, lambda: f64) -> Vec<BoundCheck> {
    report
        .rows
        .iter()
        .map(|r| {
            let bound = r.eta * report.norm_step * report.norm_visual
                + 0.5 * r.eta * r.eta * lambda * report.norm_step.powi(2)
                + r.residual.abs();
            BoundCheck {
                eta: r.eta,
                drift: r.exact,
                bound,
                holds: r.exact.abs() <= bound,
            }
        })
        .collect()
}

/// `|Δ| ≤ (η²/2)·λ·‖g_t‖² · (1 + slack)`.
pub fn second_order_bound(report: &DriftReport, lambda: f64, slack: f64) -> Vec<BoundCheck> {
    report
        .rows
        .iter()
        .map(|r| {
            let bound = 0.5 * r.eta * r.eta * lambda * report.norm_step.powi(2) * (1.0 + slack);
            BoundCheck {
                eta: r.eta,
                drift: r.exact,
                bound,
                holds: r.exact.abs() <= bound,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub adapter_kind: AdapterKind,
    pub grouping: String,
    pub bin_width: f64,
    pub fd_epsilon: f64,
    pub text_roles: Vec<ParamRole>,
    pub visual_roles: Vec<ParamRole>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub metadata: ReportMetadata,
    pub inner_product: f64,
    pub cosine: f64,
    pub norm_t: f64,
    pub norm_v: f64,
    pub group_cosines: Vec<GroupCosine>,
    pub histogram: Histogram,
    /// `⟨g_t, ∇ℒ_v⟩` with the visual gradient taken over every adapter
    /// parameter, including those only the text objective trains.
    pub full_visual_inner_product: f64,
    pub drift: DriftReport,
    pub lambda_max: LambdaMax,
    pub bounds: Vec<BoundCheck>,
    pub orthogonal: bool,
    pub bounds_hold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub eta_min: f64,
    pub eta_max: f64,
    pub eta_points: usize,
    pub power_iters: usize,
    pub power_tol: f64,
    pub bin_width: f64,
    pub bound_slack: f64,
    /// Sequences per probe batch.
    pub batch_size: usize,
    /// Half-width of the uniform noise written into every `B` of a probe stack.
    pub perturb_bound: f64,
    pub seed: u64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            eta_min: 1e-4,
            eta_max: 3e-3,
            eta_points: 8,
            power_iters: 60,
            power_tol: 1e-4,
            bin_width: DEFAULT_BIN_WIDTH,
            bound_slack: 0.25,
            batch_size: 32,
            perturb_bound: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeInstance {
    pub stack: AdapterStack,
    pub text: Vec<TokenSequence>,
    pub visual: Vec<TokenSequence>,
}

/// Seeded probe: a stack with noisy `B` plus describe and generation batches
/// drawn over the same training combos, so both losses see the same grids.
pub fn probe_instance(
    bb: &Backbone,
    corpus: &Corpus,
    adapter: &AdapterConfig,
    seed: u64,
    cfg: &DiagnoseConfig,
) -> LabResult<ProbeInstance> {
    let n = corpus.gen_train.len();
    if cfg.batch_size == 0 || cfg.batch_size > n {
        return invalid(format!("probe batch size {} outside 1..={n}", cfg.batch_size));
    }
    let mut stack = AdapterStack::new(
        &bb.config,
        AdapterConfig {
            seed,
            ..adapter.clone()
        },
    )?;
    if cfg.perturb_bound > 0.0 {
        stack.perturb_b(seed.wrapping_add(100), cfg.perturb_bound);
    }
    let start = (seed as usize).wrapping_mul(cfg.batch_size) % n;
    let idx: Vec<usize> = (0..cfg.batch_size).map(|i| (start + i) % n).collect();
    Ok(ProbeInstance {
        stack,
        text: idx.iter().map(|&i| corpus.describe_train[i].seq.clone()).collect(),
        visual: idx.iter().map(|&i| corpus.gen_train[i].seq.clone()).collect(),
    })
}

/// Full conflict analysis of one stack on one text batch and one visual batch.
pub fn diagnose(
    bb: &Backbone,
    stack: &AdapterStack,
    text_batch: &[TokenSequence],
    visual_batch: &[TokenSequence],
    cfg: &DiagnoseConfig,
) -> LabResult<ConflictReport> {
    let kind = stack.kind();
    let text_roles = objective_roles(kind, LossKind::Text);
    let visual_roles = objective_roles(kind, LossKind::Visual);
    let mut text = AdapterObjective::new(bb, stack, text_batch, LossKind::Text)?;
    let mut visual = AdapterObjective::new(bb, stack, visual_batch, LossKind::Visual)?;
    let snap_t = gradient_snapshot(&mut text, &text_roles)?;
    let snap_v = gradient_snapshot(&mut visual, &visual_roles)?;
    let conflict = conflict_inner_product(&snap_t, &snap_v)?;
    let cosines: Vec<f64> = conflict.groups.iter().map(|g| g.cosine).collect();
    let histogram = cosine_histogram(&cosines, cfg.bin_width)?;
    let theta = visual.theta();
    let (_, gv_full) = visual.grad(&theta)?;
    let full_visual_inner_product = dot(&snap_t.flat, &gv_full);
    let etas = log_grid(cfg.eta_min, cfg.eta_max, cfg.eta_points);
    let visual_mask = visual.role_mask(&visual_roles);
    let drift = taylor_drift(&mut visual, &snap_t.flat, &visual_mask, &etas)?;
    // Curvature along the step lives in the step's own subspace.
    let step_mask = visual.role_mask(&text_roles);
    let mut projected = |v: &[f64]| -> LabResult<Vec<f64>> {
        let mut pv = v.to_vec();
        apply_mask(&mut pv, &step_mask);
        let mut h = hessian_vector_product(&mut |t: &[f64]| visual.grad(t).map(|r| r.1), &theta, &pv)?;
        apply_mask(&mut h, &step_mask);
        Ok(h)
    };
    let dim = theta.len();
    let lm = lambda_max(&mut projected, dim, cfg.power_iters, cfg.power_tol, cfg.seed)?;
    visual.value(&theta)?;
    let bounds = if kind == AdapterKind::Mode {
        second_order_bound(&drift, lm.value, cfg.bound_slack)
    } else {
        coupled_bound(&drift, lm.value)
    };
    let zero_bin = histogram.bin_of(0.0);
    let orthogonal = conflict.inner_product.abs() < 1e-12 * conflict.norm_t * conflict.norm_v
        && histogram.counts[zero_bin] == cosines.len();
    let bounds_hold = bounds.iter().all(|b| b.holds);
    Ok(ConflictReport {
        metadata: ReportMetadata {
            adapter_kind: kind,
            grouping: "one group per adapter matrix".into(),
            bin_width: cfg.bin_width,
            fd_epsilon: FD_EPSILON,
            text_roles,
            visual_roles,
        },
        inner_product: conflict.inner_product,
        cosine: conflict.cosine,
        norm_t: conflict.norm_t,
        norm_v: conflict.norm_v,
        group_cosines: conflict.groups,
        histogram,
        full_visual_inner_product,
        drift,
        lambda_max: lm,
        bounds,
        orthogonal,
        bounds_hold,
    })
}
