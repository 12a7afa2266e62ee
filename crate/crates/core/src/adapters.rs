//! Low-rank adapters for the MLP linear maps: plain LoRA, a softly routed
//! mixture of LoRA experts, and the modality-split variant that sends image
//! positions through one LoRA (the V-Adapter) and text positions through an
//! expert mixture (the T-MoE).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{BackboneConfig, Modality};
use crate::error::{invalid, LabResult};
use crate::params::{uniform, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    Lora,
    MoeLora,
    Mode,
}

/// Which parameter subset a tensor belongs to. `Psi` is the image-side
/// adapter, `Phi` the text-side experts and router, `Shared` everything in a
/// modality-agnostic stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    Shared,
    Psi,
    Phi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Site {
    Fc1,
    Fc2,
}

impl Site {
    pub const ALL: [Site; 2] = [Site::Fc1, Site::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            Site::Fc1 => "fc1",
            Site::Fc2 => "fc2",
        }
    }

    /// `(d_in, d_out)` of the adapted map.
    pub fn dims(self, c: &BackboneConfig) -> (usize, usize) {
        match self {
            Site::Fc1 => (c.model_dim, c.mlp_dim),
            Site::Fc2 => (c.mlp_dim, c.model_dim),
        }
    }

    fn index(self) -> usize {
        match self {
            Site::Fc1 => 0,
            Site::Fc2 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub rank: usize,
    pub alpha: f64,
    pub experts: usize,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Mode,
            rank: 8,
            alpha: 16.0,
            experts: 4,
            seed: 0,
        }
    }
}

impl AdapterConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

// ---- graph-level building blocks -------------------------------------------

/// `(alpha / r) · h Aᵀ Bᵀ` for `h: [N, d_in]`, `A: [r, d_in]`, `B: [d_out, r]`.
pub fn lora_delta(g: &mut Graph, h: Var, a: Var, b: Var, scale: f64) -> LabResult<Var> {
    let t = g.matmul_nt(h, a)?;
    let u = g.matmul_nt(t, b)?;
    Ok(g.scale(u, scale)?)
}

/// Router weights `softmax(x W_g)` per row, `W_g: [d_in, n]`.
pub fn route(g: &mut Graph, x: Var, gate: Var) -> LabResult<Var> {
    let z = g.matmul(x, gate)?;
    Ok(g.softmax(z)?)
}

/// `(alpha / r) · Σ_j g_j(h) h A_jᵀ B_jᵀ`, router input taken as `h`.
pub fn moe_delta(
    g: &mut Graph,
    h: Var,
    experts: &[(Var, Var)],
    gate: Var,
    scale: f64,
) -> LabResult<Var> {
    if experts.is_empty() {
        return invalid("mixture needs at least one expert");
    }
    if g.shape(gate)[1] != experts.len() {
        return invalid(format!(
            "router has {} outputs for {} experts",
            g.shape(gate)[1],
            experts.len()
        ));
    }
    let weights = route(g, h, gate)?;
    let mut acc: Option<Var> = None;
    for (j, &(a, b)) in experts.iter().enumerate() {
        let t = g.matmul_nt(h, a)?;
        let u = g.matmul_nt(t, b)?;
        let wj = g.slice_cols(weights, j, 1)?;
        let term = g.mul_col(u, wj)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(prev, term)?,
        });
    }
    Ok(g.scale(acc.expect("non-empty"), scale)?)
}

fn base(g: &mut Graph, h: Var, w: Var, bias: Option<Var>) -> LabResult<Var> {
    let y = g.matmul_nt(h, w)?;
    Ok(match bias {
        Some(b) => g.add_row(y, b)?,
        None => y,
    })
}

pub fn lora_forward(
    g: &mut Graph,
    h: Var,
    w: Var,
    bias: Option<Var>,
    adapter: (Var, Var),
    scale: f64,
) -> LabResult<Var> {
    let y = base(g, h, w, bias)?;
    let d = lora_delta(g, h, adapter.0, adapter.1, scale)?;
    Ok(g.add(y, d)?)
}

pub fn moe_lora_forward(
    g: &mut Graph,
    h: Var,
    w: Var,
    bias: Option<Var>,
    experts: &[(Var, Var)],
    gate: Var,
    scale: f64,
) -> LabResult<Var> {
    let y = base(g, h, w, bias)?;
    let d = moe_delta(g, h, experts, gate, scale)?;
    Ok(g.add(y, d)?)
}

/// Splits rows by modality, sends image rows through the single adapter and
/// text rows through the expert mixture, and puts each result back at its
/// original row.
#[allow(clippy::too_many_arguments)]
pub fn mode_forward(
    g: &mut Graph,
    h: Var,
    modality: &[Modality],
    w: Var,
    bias: Option<Var>,
    v_adapter: (Var, Var),
    experts: &[(Var, Var)],
    gate: Var,
    scale: f64,
) -> LabResult<Var> {
    let rows = g.shape(h)[0];
    if modality.len() != rows {
        return invalid(format!(
            "{} modality tags for {} hidden rows",
            modality.len(),
            rows
        ));
    }
    let y = base(g, h, w, bias)?;
    let d_out = g.shape(y)[1];
    let (image, text): (Vec<usize>, Vec<usize>) =
        (0..rows).partition(|&i| modality[i] == Modality::Image);
    let mut parts: Vec<(Var, &[usize])> = Vec::with_capacity(2);
    if !image.is_empty() {
        let hi = g.select_rows(h, &image)?;
        let di = lora_delta(g, hi, v_adapter.0, v_adapter.1, scale)?;
        parts.push((di, &image));
    }
    if !text.is_empty() {
        let ht = g.select_rows(h, &text)?;
        let dt = moe_delta(g, ht, experts, gate, scale)?;
        parts.push((dt, &text));
    }
    if parts.is_empty() {
        return Ok(y);
    }
    let delta = g.scatter_rows(rows, d_out, &parts)?;
    Ok(g.add(y, delta)?)
}

// ---- value-level adapters ---------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraAdapter {
    pub fn new(a: Tensor, b: Tensor, alpha: f64) -> LabResult<Self> {
        let (r, d_in) = a.dims2("lora")?;
        let (d_out, r2) = b.dims2("lora")?;
        if r != r2 {
            return invalid(format!("A has rank {r}, B has rank {r2}"));
        }
        if r == 0 || r > d_in.min(d_out) {
            return invalid(format!("rank {r} must lie in 1..=min({d_in}, {d_out})"));
        }
        Ok(Self { a, b, alpha, rank: r })
    }

    /// Zero `B` and uniform `A` with bound `1/sqrt(d_in)`.
    pub fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> LabResult<Self> {
        Self::new(
            uniform(rng, &[rank, d_in], 1.0 / (d_in as f64).sqrt()),
            Tensor::zeros(&[d_out, rank]),
            alpha,
        )
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn forward(&self, h: &Tensor, w: &Tensor) -> LabResult<Tensor> {
        let mut g = Graph::new();
        let hv = g.constant(as_rows(h)?)?;
        let wv = g.constant(w.clone())?;
        let a = g.constant(self.a.clone())?;
        let b = g.constant(self.b.clone())?;
        let out = lora_forward(&mut g, hv, wv, None, (a, b), self.scale())?;
        Ok(g.value(out).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLoraAdapter {
    pub experts: Vec<LoraAdapter>,
    pub gate: Tensor,
}

impl MoeLoraAdapter {
    pub fn new(experts: Vec<LoraAdapter>, gate: Tensor) -> LabResult<Self> {
        let first = experts.first().ok_or_else(|| {
            crate::error::LabError::Invalid("mixture needs at least one expert".into())
        })?;
        for e in &experts {
            if e.a.shape() != first.a.shape() || e.b.shape() != first.b.shape() || e.alpha != first.alpha {
                return invalid("experts must share rank, alpha and dimensions");
            }
        }
        let (d_in, n) = gate.dims2("router")?;
        if d_in != first.a.shape()[1] || n != experts.len() {
            return invalid(format!(
                "router shape {:?} does not fit {} experts over d_in {}",
                gate.shape(),
                experts.len(),
                first.a.shape()[1]
            ));
        }
        Ok(Self { experts, gate })
    }

    pub fn route(&self, x: &Tensor) -> LabResult<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(as_rows(x)?)?;
        let gv = g.constant(self.gate.clone())?;
        let out = route(&mut g, xv, gv)?;
        Ok(g.value(out).clone())
    }

    pub fn forward(&self, h: &Tensor, w: &Tensor) -> LabResult<Tensor> {
        let mut g = Graph::new();
        let hv = g.constant(as_rows(h)?)?;
        let wv = g.constant(w.clone())?;
        let (experts, gate) = bind_moe(&mut g, self)?;
        let out = moe_lora_forward(&mut g, hv, wv, None, &experts, gate, self.experts[0].scale())?;
        Ok(g.value(out).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeLayerAdapter {
    pub v_adapter: LoraAdapter,
    pub t_moe: MoeLoraAdapter,
}

impl ModeLayerAdapter {
    pub fn forward(&self, h: &Tensor, modality: &[Modality], w: &Tensor) -> LabResult<Tensor> {
        let mut g = Graph::new();
        let hv = g.constant(as_rows(h)?)?;
        let wv = g.constant(w.clone())?;
        let a = g.constant(self.v_adapter.a.clone())?;
        let b = g.constant(self.v_adapter.b.clone())?;
        let (experts, gate) = bind_moe(&mut g, &self.t_moe)?;
        let out = mode_forward(
            &mut g,
            hv,
            modality,
            wv,
            None,
            (a, b),
            &experts,
            gate,
            self.v_adapter.scale(),
        )?;
        Ok(g.value(out).clone())
    }
}

fn bind_moe(g: &mut Graph, m: &MoeLoraAdapter) -> LabResult<(Vec<(Var, Var)>, Var)> {
    let mut experts = Vec::with_capacity(m.experts.len());
    for e in &m.experts {
        experts.push((g.constant(e.a.clone())?, g.constant(e.b.clone())?));
    }
    Ok((experts, g.constant(m.gate.clone())?))
}

fn as_rows(h: &Tensor) -> LabResult<Tensor> {
    match h.shape().len() {
        1 => Ok(Tensor::new(vec![1, h.numel()], h.data().to_vec())?),
        2 => Ok(h.clone()),
        _ => invalid(format!("expected a vector or matrix, got {:?}", h.shape())),
    }
}

// ---- per-backbone stacks ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default)]
struct SiteParams {
    lora: Option<(usize, usize)>,
    experts: Vec<(usize, usize)>,
    gate: Option<usize>,
}

/// Adapters for both MLP maps of every layer, stored flat in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStack {
    pub config: AdapterConfig,
    pub params: ParamStore,
    pub roles: Vec<ParamRole>,
    layers: usize,
    model_dim: usize,
    mlp_dim: usize,
    sites: Vec<SiteParams>,
}

impl AdapterStack {
    pub fn new(backbone: &BackboneConfig, config: AdapterConfig) -> LabResult<Self> {
        if config.rank == 0 {
            return invalid("rank must be positive");
        }
        if config.kind != AdapterKind::Lora && config.experts == 0 {
            return invalid("expert count must be positive");
        }
        if config.rank > backbone.model_dim.min(backbone.mlp_dim) {
            return invalid("rank exceeds the adapted layer dimensions");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut roles = Vec::new();
        let mut sites = Vec::new();
        let r = config.rank;
        for l in 0..backbone.layers {
            for site in Site::ALL {
                let (d_in, d_out) = site.dims(backbone);
                let bound = 1.0 / (d_in as f64).sqrt();
                let prefix = format!("layer{l}.{}", site.name());
                let mut sp = SiteParams::default();
                let mut push = |name: String, t: Tensor, role: ParamRole| {
                    roles.push(role);
                    params.push(name, t)
                };
                let (lora_label, moe_label, lora_role, moe_role) = match config.kind {
                    AdapterKind::Lora => ("lora", "", ParamRole::Shared, ParamRole::Shared),
                    AdapterKind::MoeLora => ("", "moe", ParamRole::Shared, ParamRole::Shared),
                    AdapterKind::Mode => ("v_adapter", "t_moe", ParamRole::Psi, ParamRole::Phi),
                };
                if config.kind != AdapterKind::MoeLora {
                    let a = push(
                        format!("{prefix}.{lora_label}.A"),
                        uniform(&mut rng, &[r, d_in], bound),
                        lora_role,
                    );
                    let b = push(format!("{prefix}.{lora_label}.B"), Tensor::zeros(&[d_out, r]), lora_role);
                    sp.lora = Some((a, b));
                }
                if config.kind != AdapterKind::Lora {
                    for j in 0..config.experts {
                        let a = push(
                            format!("{prefix}.{moe_label}.expert[{j}].A"),
                            uniform(&mut rng, &[r, d_in], bound),
                            moe_role,
                        );
                        let b = push(
                            format!("{prefix}.{moe_label}.expert[{j}].B"),
                            Tensor::zeros(&[d_out, r]),
                            moe_role,
                        );
                        sp.experts.push((a, b));
                    }
                    sp.gate = Some(push(
                        format!("{prefix}.{moe_label}.gate"),
                        uniform(&mut rng, &[d_in, config.experts], bound),
                        moe_role,
                    ));
                }
                sites.push(sp);
            }
        }
        Ok(Self {
            config,
            params,
            roles,
            layers: backbone.layers,
            model_dim: backbone.model_dim,
            mlp_dim: backbone.mlp_dim,
            sites,
        })
    }

    pub fn kind(&self) -> AdapterKind {
        self.config.kind
    }

    pub fn check_compatible(&self, c: &BackboneConfig) -> LabResult<()> {
        if c.layers != self.layers || c.model_dim != self.model_dim || c.mlp_dim != self.mlp_dim {
            return invalid(format!(
                "adapter stack built for {} layers d={} mlp={}, backbone has {} layers d={} mlp={}",
                self.layers, self.model_dim, self.mlp_dim, c.layers, c.model_dim, c.mlp_dim
            ));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(usize) -> bool) -> LabResult<Vec<Var>> {
        Ok(self.params.bind(g, trainable)?)
    }

    /// Binds with gradients enabled for the given roles only.
    pub fn bind_roles(&self, g: &mut Graph, roles: &[ParamRole]) -> LabResult<Vec<Var>> {
        self.bind(g, |i| roles.contains(&self.roles[i]))
    }

    /// Indices of parameters with the given role.
    pub fn role_indices(&self, role: ParamRole) -> Vec<usize> {
        (0..self.roles.len()).filter(|&i| self.roles[i] == role).collect()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn site_forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        layer: usize,
        site: Site,
        h: Var,
        w: Var,
        bias: Option<Var>,
        modality: &[Modality],
    ) -> LabResult<Var> {
        let sp = &self.sites[layer * 2 + site.index()];
        let scale = self.config.scale();
        let experts: Vec<(Var, Var)> = sp.experts.iter().map(|&(a, b)| (vars[a], vars[b])).collect();
        match self.config.kind {
            AdapterKind::Lora => {
                let (a, b) = sp.lora.expect("lora site");
                lora_forward(g, h, w, bias, (vars[a], vars[b]), scale)
            }
            AdapterKind::MoeLora => {
                moe_lora_forward(g, h, w, bias, &experts, vars[sp.gate.expect("gate")], scale)
            }
            AdapterKind::Mode => {
                let (a, b) = sp.lora.expect("v-adapter site");
                mode_forward(
                    g,
                    h,
                    modality,
                    w,
                    bias,
                    (vars[a], vars[b]),
                    &experts,
                    vars[sp.gate.expect("gate")],
                    scale,
                )
            }
        }
    }

    fn lora_at(&self, (a, b): (usize, usize)) -> LoraAdapter {
        LoraAdapter {
            a: self.params.get(a).clone(),
            b: self.params.get(b).clone(),
            alpha: self.config.alpha,
            rank: self.config.rank,
        }
    }

    fn moe_at(&self, sp: &SiteParams) -> MoeLoraAdapter {
        MoeLoraAdapter {
            experts: sp.experts.iter().map(|&e| self.lora_at(e)).collect(),
            gate: self.params.get(sp.gate.expect("gate")).clone(),
        }
    }

    /// Value-level view of one site's adapter.
    pub fn lora_site(&self, layer: usize, site: Site) -> Option<LoraAdapter> {
        let sp = &self.sites[layer * 2 + site.index()];
        match self.config.kind {
            AdapterKind::Lora => sp.lora.map(|p| self.lora_at(p)),
            _ => None,
        }
    }

    pub fn moe_site(&self, layer: usize, site: Site) -> Option<MoeLoraAdapter> {
        let sp = &self.sites[layer * 2 + site.index()];
        match self.config.kind {
            AdapterKind::MoeLora => Some(self.moe_at(sp)),
            _ => None,
        }
    }

    pub fn mode_site(&self, layer: usize, site: Site) -> Option<ModeLayerAdapter> {
        let sp = &self.sites[layer * 2 + site.index()];
        match self.config.kind {
            AdapterKind::Mode => Some(ModeLayerAdapter {
                v_adapter: self.lora_at(sp.lora.expect("v-adapter")),
                t_moe: self.moe_at(sp),
            }),
            _ => None,
        }
    }

    /// Overwrites every `B` (and leaves `A`/router alone) with uniform noise so the
    /// adapters start away from the zero-delta point.
    pub fn perturb_b(&mut self, seed: u64, bound: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..self.params.len() {
            if self.params.name(i).ends_with(".B") {
                let shape = self.params.get(i).shape().to_vec();
                *self.params.get_mut(i) = uniform(&mut rng, &shape, bound);
            }
        }
    }

    /// One histogram group per adapter matrix.
    pub fn groups(&self) -> Vec<(String, ParamRole)> {
        (0..self.params.len())
            .map(|i| (self.params.name(i).to_string(), self.roles[i]))
            .collect()
    }

    pub fn param_report(&self, backbone_params: usize) -> ParamReport {
        let mut report = ParamReport {
            backbone: backbone_params,
            ..ParamReport::default()
        };
        for i in 0..self.params.len() {
            let n = self.params.get(i).numel();
            match self.roles[i] {
                ParamRole::Psi => report.psi += n,
                ParamRole::Phi => report.phi += n,
                ParamRole::Shared => report.shared += n,
            }
            if self.params.name(i).ends_with(".gate") {
                report.gates += n;
            }
        }
        report.trainable = report.psi + report.phi + report.shared;
        report.ratio = report.trainable as f64 / (report.trainable + report.backbone) as f64;
        report
    }
}

/// Trainable-parameter counts. `gates` is the router subset of `phi` or `shared`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamReport {
    pub backbone: usize,
    pub psi: usize,
    pub phi: usize,
    pub shared: usize,
    pub gates: usize,
    pub trainable: usize,
    pub ratio: f64,
}

pub fn trainable_param_report(backbone_params: usize, stack: Option<&AdapterStack>) -> ParamReport {
    match stack {
        Some(s) => s.param_report(backbone_params),
        None => ParamReport {
            backbone: backbone_params,
            ..ParamReport::default()
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            model_dim: 8,
            mlp_dim: 12,
            heads: 2,
            image_tokens: 4,
            text_tokens: 4,
            max_len: 8,
            seed: 1,
        }
    }

    #[test]
    fn construction_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = LoraAdapter::init(&mut rng, 6, 5, 2, 4.0).unwrap();
        assert!(l.b.data().iter().all(|&x| x == 0.0));
        let bound = 1.0 / 6f64.sqrt();
        assert!(l.a.data().iter().all(|&x| x.abs() <= bound && x != 0.0));
        assert!(LoraAdapter::new(Tensor::zeros(&[6, 6]), Tensor::zeros(&[5, 6]), 1.0).is_err());
    }

    #[test]
    fn stack_names_and_roles() {
        let s = AdapterStack::new(&cfg(), AdapterConfig::default()).unwrap();
        assert_eq!(s.params.name(0), "layer0.fc1.v_adapter.A");
        assert_eq!(s.params.name(2), "layer0.fc1.t_moe.expert[0].A");
        assert!(s.params.index_of("layer1.fc2.t_moe.gate").is_some());
        for i in 0..s.params.len() {
            let role = s.roles[i];
            let name = s.params.name(i);
            assert_eq!(role == ParamRole::Psi, name.contains("v_adapter"));
        }
    }

    #[test]
    fn mode_default_count_matches_closed_form() {
        let c = cfg();
        let s = AdapterStack::new(&c, AdapterConfig::default()).unwrap();
        let (r, n) = (8, 4);
        // one LoRA on either MLP map holds r*(d_in + d_out) = r*(d + mlp) weights
        let lora_pair = r * (c.model_dim + c.mlp_dim);
        let report = s.param_report(1000);
        let expected = c.layers * (2 * (n + 1) * lora_pair + n * (c.model_dim + c.mlp_dim));
        assert_eq!(report.trainable, expected);
        assert_eq!(report.trainable, s.params.numel());
        assert_eq!(report.gates, c.layers * n * (c.model_dim + c.mlp_dim));
        assert_eq!(report.psi, c.layers * 2 * lora_pair);
        assert!((report.ratio - expected as f64 / (expected + 1000) as f64).abs() < 1e-15);
    }

    #[test]
    fn no_adapters_ratio_zero() {
        assert_eq!(trainable_param_report(500, None).ratio, 0.0);
    }
}
