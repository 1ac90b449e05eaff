//! Parameter-efficient baselines: bottleneck adapters, LoRA, AdaLoRA-lite
//! and BitFit. All of them keep the backbone frozen but still backpropagate
//! through it, so backbone activations stay retained.
//!
//! Low-rank factors are stored pre-transposed (`…lora.a` is Aᵀ with shape
//! `[d_model, r]`, `…lora.b.h{h}` is the per-head slice of Bᵀ with shape
//! `[r, d_head]`), which keeps the encoder wiring free of transpose nodes;
//! parameter counts are unchanged. LoRA and AdaLoRA attach to the query and
//! value projections.

use crate::backbone::{insert_init, AttnSite, LayerHooks, ModelConfig, Sublayer};
use crate::engine::{Engine, EngineError, Owner, Result};
use crate::method::MethodSpec;
use crate::params::{ParamRole, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub const ADALORA_BETA: f64 = 0.85;
pub const ADALORA_MASK_EVERY: usize = 50;
pub const ADALORA_ORTHO_WEIGHT: f64 = 0.1;

fn site_name(site: AttnSite) -> &'static str {
    match site {
        AttnSite::Query => "q",
        AttnSite::Value => "v",
    }
}

// ── attachment ──────────────────────────────────────────────────────────

/// Insert the trainable structures for a PEFT method (owner `Side`).
/// BitFit adds nothing; its selection is a freeze policy.
pub fn attach_peft<F: Scalar>(
    store: &mut ParamStore<F>,
    cfg: &ModelConfig,
    method: MethodSpec,
    seed: u64,
) -> Result<()> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    match method {
        MethodSpec::Adapter { dim } => {
            if dim == 0 {
                return Err(EngineError::Invalid("adapter dim must be ≥ 1".into()));
            }
            for i in 1..=cfg.n_layers {
                for which in ["adapter1", "adapter2"] {
                    let p = format!("enc.{i}.{which}");
                    insert_init(store, seed, format!("{p}.ln.g"), vec![1, d], Owner::Side, ParamRole::LnGain);
                    insert_init(store, seed, format!("{p}.ln.b"), vec![1, d], Owner::Side, ParamRole::LnBias);
                    insert_init(store, seed, format!("{p}.down.w"), vec![d, dim], Owner::Side, ParamRole::Weight);
                    insert_init(store, seed, format!("{p}.down.b"), vec![1, dim], Owner::Side, ParamRole::Bias);
                    // zero-initialized up-projection: identity at init
                    store.insert(format!("{p}.up.w"), vec![dim, d], vec![F::zero(); dim * d], Owner::Side, ParamRole::Weight);
                    insert_init(store, seed, format!("{p}.up.b"), vec![1, d], Owner::Side, ParamRole::Bias);
                }
            }
        }
        MethodSpec::Lora { r } => {
            if r == 0 {
                return Err(EngineError::Invalid("lora rank must be ≥ 1".into()));
            }
            for i in 1..=cfg.n_layers {
                for site in ["q", "v"] {
                    let p = format!("enc.{i}.attn.{site}.lora");
                    insert_init(store, seed, format!("{p}.a"), vec![d, r], Owner::Side, ParamRole::Weight);
                    for h in 0..cfg.n_heads {
                        store.insert(format!("{p}.b.h{h}"), vec![r, dh], vec![F::zero(); r * dh], Owner::Side, ParamRole::Weight);
                    }
                }
            }
        }
        MethodSpec::Adalora { init_r } => {
            if init_r == 0 {
                return Err(EngineError::Invalid("adalora init_r must be ≥ 1".into()));
            }
            for i in 1..=cfg.n_layers {
                for site in ["q", "v"] {
                    let p = format!("enc.{i}.attn.{site}.adalora");
                    insert_init(store, seed, format!("{p}.q"), vec![d, init_r], Owner::Side, ParamRole::Weight);
                    store.insert(format!("{p}.lambda"), vec![1, init_r], vec![F::zero(); init_r], Owner::Side, ParamRole::Weight);
                    for h in 0..cfg.n_heads {
                        insert_init(store, seed, format!("{p}.p.h{h}"), vec![init_r, dh], Owner::Side, ParamRole::Weight);
                    }
                }
            }
        }
        MethodSpec::Bitfit => {}
        other => {
            return Err(EngineError::Invalid(format!(
                "attach_peft called with non-PEFT method {other}"
            )))
        }
    }
    Ok(())
}

/// Restrict training to bias terms plus the head.
pub fn bitfit_select<F: Scalar>(store: &mut ParamStore<F>) {
    crate::backbone::freeze_policy(store, MethodSpec::Bitfit);
}

// ── standalone forwards (spec-shaped, used by tests and gradcheck) ──────

/// `y = x + up(relu(down(ln(x))))` for the block stored under `prefix`.
pub fn adapter_forward<F: Scalar>(
    engine: &mut Engine<F>,
    store: &ParamStore<F>,
    prefix: &str,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    let g = store.use_param(engine, &format!("{prefix}.ln.g"));
    let b = store.use_param(engine, &format!("{prefix}.ln.b"));
    let dw = store.use_param(engine, &format!("{prefix}.down.w"));
    let db = store.use_param(engine, &format!("{prefix}.down.b"));
    let uw = store.use_param(engine, &format!("{prefix}.up.w"));
    let ub = store.use_param(engine, &format!("{prefix}.up.b"));
    let ln = engine.layer_norm(x, &g, &b, F::from_f64(crate::backbone::LN_EPS))?;
    let h = engine.matmul(&ln, &dw)?;
    let h = engine.add(&h, &db)?;
    let h = engine.relu(&h)?;
    let u = engine.matmul(&h, &uw)?;
    let u = engine.add(&u, &ub)?;
    engine.add(x, &u)
}

/// `y = x·Wᵀ + scaling·(x·Aᵀ)·Bᵀ` with A `[r, d_in]`, B `[d_out, r]`.
/// Only A and B are expected to carry gradients; W is the frozen weight.
pub fn lora_forward<F: Scalar>(
    engine: &mut Engine<F>,
    w_frozen: &Tensor<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
    scaling: F,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    let r = a.rows();
    if r == 0 || b.cols() != r {
        return Err(EngineError::Invalid(format!(
            "lora_forward: rank must be ≥ 1 and shared (A {:?}, B {:?})",
            a.shape(),
            b.shape()
        )));
    }
    let wt = engine.transpose(w_frozen)?;
    let base = engine.matmul(x, &wt)?;
    let at = engine.transpose(a)?;
    let u = engine.matmul(x, &at)?;
    let bt = engine.transpose(b)?;
    let delta = engine.matmul(&u, &bt)?;
    let delta = engine.scale(&delta, scaling)?;
    engine.add(&base, &delta)
}

// ── layer hooks ─────────────────────────────────────────────────────────

/// Two bottleneck blocks per layer: after the attention sublayer and after
/// the FFN sublayer.
pub struct AdapterHooks;

impl<F: Scalar> LayerHooks<F> for AdapterHooks {
    fn post_sublayer(
        &self,
        engine: &mut Engine<F>,
        store: &ParamStore<F>,
        layer: usize,
        sublayer: Sublayer,
        h: Tensor<F>,
    ) -> Result<Tensor<F>> {
        let which = match sublayer {
            Sublayer::Attention => "adapter1",
            Sublayer::Ffn => "adapter2",
        };
        adapter_forward(engine, store, &format!("enc.{layer}.{which}"), &h)
    }
}

/// Low-rank deltas on the query and value projections.
pub struct LoraHooks {
    pub scaling: f64,
}

impl Default for LoraHooks {
    fn default() -> Self {
        // α = r by convention, so α/r = 1.
        LoraHooks { scaling: 1.0 }
    }
}

impl<F: Scalar> LayerHooks<F> for LoraHooks {
    fn site_deltas(
        &self,
        engine: &mut Engine<F>,
        store: &ParamStore<F>,
        layer: usize,
        site: AttnSite,
        lnx: &Tensor<F>,
    ) -> Result<Option<Vec<Tensor<F>>>> {
        let p = format!("enc.{layer}.attn.{}.lora", site_name(site));
        let a = store.use_param(engine, &format!("{p}.a"));
        let u = engine.matmul(lnx, &a)?;
        let n_heads = count_heads(store, &p);
        let mut deltas = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let b = store.use_param(engine, &format!("{p}.b.h{h}"));
            let d = engine.matmul(&u, &b)?;
            deltas.push(engine.scale(&d, F::from_f64(self.scaling))?);
        }
        Ok(Some(deltas))
    }
}

/// SVD-shaped deltas `x·Qᵀ·Λ·Pᵀ` with a maskable diagonal.
pub struct AdaloraHooks;

impl<F: Scalar> LayerHooks<F> for AdaloraHooks {
    fn site_deltas(
        &self,
        engine: &mut Engine<F>,
        store: &ParamStore<F>,
        layer: usize,
        site: AttnSite,
        lnx: &Tensor<F>,
    ) -> Result<Option<Vec<Tensor<F>>>> {
        let p = format!("enc.{layer}.attn.{}.adalora", site_name(site));
        let q = store.use_param(engine, &format!("{p}.q"));
        let lambda = store.use_param(engine, &format!("{p}.lambda"));
        let u = engine.matmul(lnx, &q)?;
        let s = engine.mul(&u, &lambda)?;
        let n_heads = count_heads_named(store, &p, "p");
        let mut deltas = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let ph = store.use_param(engine, &format!("{p}.p.h{h}"));
            deltas.push(engine.matmul(&s, &ph)?);
        }
        Ok(Some(deltas))
    }
}

fn count_heads<F: Scalar>(store: &ParamStore<F>, prefix: &str) -> usize {
    count_heads_named(store, prefix, "b")
}

fn count_heads_named<F: Scalar>(store: &ParamStore<F>, prefix: &str, field: &str) -> usize {
    (0..)
        .take_while(|h| store.contains(&format!("{prefix}.{field}.h{h}")))
        .count()
}

// ── AdaLoRA budget allocation ───────────────────────────────────────────

/// Importance-smoothed rank allocation with a quantized cubic budget:
/// the target rank decays from `init_r` to `init_r/2` over the first 60% of
/// training, evaluated at masking boundaries (every `mask_every` steps).
pub struct AdaLoraState {
    pub init_r: usize,
    pub total_steps: usize,
    pub mask_every: usize,
    pub beta: f64,
    /// site prefix (e.g. `enc.3.attn.q.adalora`) → smoothed |λ·∂L/∂λ|
    importance: BTreeMap<String, Vec<f64>>,
    /// site prefix → masked-out indices
    masked: BTreeMap<String, Vec<usize>>,
}

/// λ gradients captured right after backward, before the optimizer clears
/// them: site prefix → ∂L/∂λ.
pub type LambdaGrads = BTreeMap<String, Vec<f64>>;

impl AdaLoraState {
    pub fn new<F: Scalar>(store: &ParamStore<F>, init_r: usize, total_steps: usize) -> Self {
        let mut importance = BTreeMap::new();
        let masked = BTreeMap::new();
        for name in store.names() {
            if let Some(prefix) = name.strip_suffix(".lambda") {
                importance.insert(prefix.to_string(), vec![0.0; init_r]);
            }
        }
        AdaLoraState {
            init_r,
            total_steps,
            mask_every: ADALORA_MASK_EVERY,
            beta: ADALORA_BETA,
            importance,
            masked,
        }
    }

    pub fn sites(&self) -> impl Iterator<Item = &String> {
        self.importance.keys()
    }

    /// Target active rank at `step`: cubic decay from `init_r` to
    /// `init_r/2` over the first 60% of training, then constant, evaluated
    /// at the most recent masking boundary.
    pub fn budget_schedule(&self, step: usize) -> usize {
        let boundary = (step / self.mask_every) * self.mask_every;
        let t60 = ((self.total_steps as f64) * 0.6).ceil().max(1.0);
        let p = (boundary as f64 / t60).min(1.0);
        let target = (self.init_r / 2).max(1);
        let extra = (self.init_r - target) as f64 * (1.0 - p).powi(3);
        target + extra.round() as usize
    }

    /// Snapshot ∂L/∂λ for every site (call between backward and the
    /// optimizer step).
    pub fn capture_grads<F: Scalar>(&self, store: &ParamStore<F>) -> LambdaGrads {
        self.importance
            .keys()
            .map(|p| {
                let g = store
                    .entry(&format!("{p}.lambda"))
                    .grad()
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                (p.clone(), g)
            })
            .collect()
    }

    /// Active (unmasked) rank per site.
    pub fn active_ranks(&self) -> BTreeMap<String, usize> {
        self.importance
            .keys()
            .map(|p| {
                let masked = self.masked.get(p).map_or(0, Vec::len);
                (p.clone(), self.init_r - masked)
            })
            .collect()
    }
}

/// One allocation update, run after the optimizer step so masked entries
/// end the step exactly zero:
/// `importance ← β·importance + (1−β)·|λ·∂L/∂λ|`; at masking boundaries the
/// top-k λ by importance survive (k from the budget schedule) and the rest
/// are zeroed. The standing mask is re-applied every step.
pub fn adalora_step<F: Scalar>(
    state: &mut AdaLoraState,
    store: &mut ParamStore<F>,
    grads: &LambdaGrads,
    step: usize,
) {
    let beta = state.beta;
    let sites: Vec<String> = state.importance.keys().cloned().collect();
    for site in &sites {
        let lam_name = format!("{site}.lambda");
        let lam: Vec<f64> = store.entry(&lam_name).value().iter().map(|v| v.as_f64()).collect();
        let g = &grads[site];
        let imp = state.importance.get_mut(site).expect("known site");
        for i in 0..imp.len() {
            imp[i] = beta * imp[i] + (1.0 - beta) * (lam[i] * g[i]).abs();
        }
    }

    if step % state.mask_every == 0 {
        let k = state.budget_schedule(step);
        for site in &sites {
            let imp = &state.importance[site];
            let mut order: Vec<usize> = (0..imp.len()).collect();
            // descending importance, ties toward the lower index
            order.sort_by(|&a, &b| imp[b].partial_cmp(&imp[a]).unwrap().then(a.cmp(&b)));
            let masked: Vec<usize> = order[k.min(order.len())..].to_vec();
            state.masked.insert(site.clone(), masked);
        }
    }

    for site in &sites {
        if let Some(masked) = state.masked.get(site) {
            if masked.is_empty() {
                continue;
            }
            let lam_name = format!("{site}.lambda");
            store.update_value(&lam_name, |data| {
                for &i in masked {
                    data[i] = F::zero();
                }
            });
        }
    }
}

/// Orthogonality penalty `‖PᵀP−I‖²_F + ‖QQᵀ−I‖²_F` summed over all AdaLoRA
/// sites, built on the tape so P and Q receive its gradients.
pub fn adalora_ortho_penalty<F: Scalar>(
    engine: &mut Engine<F>,
    store: &ParamStore<F>,
    cfg: &ModelConfig,
) -> Result<Option<Tensor<F>>> {
    let mut total: Option<Tensor<F>> = None;
    for i in 1..=cfg.n_layers {
        for site in ["q", "v"] {
            let p = format!("enc.{i}.attn.{site}.adalora");
            if !store.contains(&format!("{p}.lambda")) {
                continue;
            }
            let q = store.use_param(engine, &format!("{p}.q")); // Qᵀ, [d, r]
            let qt = engine.transpose(&q)?;
            let qqt = engine.matmul(&qt, &q)?; // QQᵀ, [r, r]
            let mut gram_p: Option<Tensor<F>> = None;
            for h in 0..cfg.n_heads {
                let ph = store.use_param(engine, &format!("{p}.p.h{h}")); // Pᵀ slice, [r, dh]
                let pht = engine.transpose(&ph)?;
                let g = engine.matmul(&ph, &pht)?; // [r, r]
                gram_p = Some(match gram_p {
                    None => g,
                    Some(acc) => engine.add(&acc, &g)?,
                });
            }
            let gram_p = gram_p.expect("at least one head");
            for gram in [qqt, gram_p] {
                let r = gram.rows();
                let eye = identity::<F>(r);
                let neg_eye = engine.scale(&eye, -F::one())?;
                let diff = engine.add(&gram, &neg_eye)?;
                let sq = engine.mul(&diff, &diff)?;
                let m0 = engine.mean_over_axis(&sq, 0)?;
                let m1 = engine.mean_over_axis(&m0, 1)?;
                let frob = engine.scale(&m1, F::from_usize(r * r))?;
                total = Some(match total {
                    None => frob,
                    Some(acc) => engine.add(&acc, &frob)?,
                });
            }
        }
    }
    match total {
        None => Ok(None),
        Some(t) => {
            let t = engine.scale(&t, F::from_f64(ADALORA_ORTHO_WEIGHT))?;
            Ok(Some(engine.reshape(&t, vec![1])?))
        }
    }
}

fn identity<F: Scalar>(n: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); n * n];
    for i in 0..n {
        data[i * n + i] = F::one();
    }
    Tensor::matrix(n, n, data)
}
