//! Pre-norm transformer encoder with per-layer taps, plus the
//! projection → mean-pool → classifier head.
//!
//! The frozen front end mirrors the two kernel-3 convolution stages of the
//! speech models this stands in for: each stage is three weight matrices
//! applied to the previous/current/next frame plus a bias, followed by GELU,
//! then a learned position embedding is added. Front-end parameters are
//! frozen from birth under every fine-tuning policy.
//!
//! Attention projections are stored per head (`…attn.q.h3.w`), so the whole
//! forward pass stays inside the engine's primitive set; parameter counts
//! are identical to the monolithic layout.

use crate::engine::{Engine, EngineError, Owner, Result};
use crate::method::MethodSpec;
use crate::params::{ParamRole, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

/// Architecture dimensions. `proj_dim` defaults to 256.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    pub d_input: usize,
    pub n_classes: usize,
    #[serde(default = "default_proj_dim")]
    pub proj_dim: usize,
}

fn default_proj_dim() -> usize {
    256
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.seq_len,
            self.d_input,
            self.n_classes,
            self.proj_dim,
        ];
        if all.iter().any(|&x| x == 0) {
            return Err(EngineError::Invalid(format!(
                "model config has a zero extent: {self:?}"
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EngineError::Invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Side-network width for reduction factor `rf`.
    pub fn d_side(&self, rf: usize) -> Result<usize> {
        if rf == 0 || self.d_model % rf != 0 {
            return Err(EngineError::Invalid(format!(
                "d_model {} not divisible by reduction factor {}",
                self.d_model, rf
            )));
        }
        Ok(self.d_model / rf)
    }
}

/// Per-layer intermediate activations exposed to side networks. Layer
/// indices are 1-based; `embeddings` is the post-front-end input to layer 1.
pub struct LayerTaps<F: Scalar> {
    pub embeddings: Tensor<F>,
    pub per_layer: Vec<Tensor<F>>,
}

impl<F: Scalar> LayerTaps<F> {
    /// Output of encoder layer `i`, 1-based.
    pub fn layer(&self, i: usize) -> &Tensor<F> {
        &self.per_layer[i - 1]
    }

    /// Output of the last encoder layer.
    pub fn final_tap(&self) -> &Tensor<F> {
        self.per_layer.last().expect("at least one layer")
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer.len()
    }
}

/// Attention projection sites that fine-tuning methods may hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnSite {
    Query,
    Value,
}

/// Residual insertion points for adapter-style methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sublayer {
    Attention,
    Ffn,
}

/// Wiring points inside each encoder layer. PEFT methods implement this;
/// the plain backbone uses [`NoHooks`]. Hook bodies run in a `Side`-owned
/// scope so their tape nodes are attributed to the method, not the backbone.
pub trait LayerHooks<F: Scalar> {
    /// Per-head additive deltas for projection `site` of layer `layer`
    /// (e.g. low-rank updates). Return `None` for no insertion.
    fn site_deltas(
        &self,
        engine: &mut Engine<F>,
        store: &ParamStore<F>,
        layer: usize,
        site: AttnSite,
        lnx: &Tensor<F>,
    ) -> Result<Option<Vec<Tensor<F>>>> {
        let _ = (engine, store, layer, site, lnx);
        Ok(None)
    }

    /// Transform the hidden state after a residual sublayer (adapters).
    fn post_sublayer(
        &self,
        engine: &mut Engine<F>,
        store: &ParamStore<F>,
        layer: usize,
        sublayer: Sublayer,
        h: Tensor<F>,
    ) -> Result<Tensor<F>> {
        let _ = (engine, store, layer, sublayer);
        Ok(h)
    }
}

/// The unhooked backbone.
pub struct NoHooks;

impl<F: Scalar> LayerHooks<F> for NoHooks {}

// ── initialization ──────────────────────────────────────────────────────

/// Stable per-parameter seed: FNV-1a over the name, mixed with the run seed,
/// so initialization does not depend on insertion order.
pub(crate) fn param_seed(master: u64, name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ master.wrapping_mul(0x100_0000_01b3);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

pub(crate) fn init_data<F: Scalar>(role: ParamRole, numel: usize, seed: u64) -> Vec<F> {
    match role {
        ParamRole::Weight | ParamRole::PosEmbedding => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let std = F::from_f64(0.02);
            (0..numel)
                .map(|_| F::sample_standard_normal(&mut rng) * std)
                .collect()
        }
        ParamRole::Bias | ParamRole::LnBias | ParamRole::Gate => vec![F::zero(); numel],
        ParamRole::LnGain => vec![F::one(); numel],
    }
}

pub(crate) fn insert_init<F: Scalar>(
    store: &mut ParamStore<F>,
    seed: u64,
    name: String,
    shape: Vec<usize>,
    owner: Owner,
    role: ParamRole,
) {
    let numel = shape.iter().product();
    let data = init_data(role, numel, param_seed(seed, &name));
    store.insert(name, shape, data, owner, role);
}

/// Seeded "pseudo-pretrained" backbone plus a full-width head. Weights are
/// scaled-normal (std 0.02), biases zero, layernorm gains one; the front end
/// and position embedding are frozen from birth.
pub fn init_backbone<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    let dh = cfg.head_dim();

    let mut ins = |store: &mut ParamStore<F>, name: String, shape: Vec<usize>, role: ParamRole| {
        insert_init(store, seed, name, shape, Owner::Backbone, role);
    };

    // Front end: two kernel-3 context stages, then the position table.
    for tap in 0..3 {
        ins(
            &mut store,
            format!("frontend.conv1.w{tap}"),
            vec![cfg.d_input, d],
            ParamRole::Weight,
        );
        ins(
            &mut store,
            format!("frontend.conv2.w{tap}"),
            vec![d, d],
            ParamRole::Weight,
        );
    }
    ins(&mut store, "frontend.conv1.b".into(), vec![1, d], ParamRole::Bias);
    ins(&mut store, "frontend.conv2.b".into(), vec![1, d], ParamRole::Bias);
    ins(
        &mut store,
        "frontend.pos".into(),
        vec![cfg.seq_len, d],
        ParamRole::PosEmbedding,
    );

    for i in 1..=cfg.n_layers {
        ins(&mut store, format!("enc.{i}.ln1.g"), vec![1, d], ParamRole::LnGain);
        ins(&mut store, format!("enc.{i}.ln1.b"), vec![1, d], ParamRole::LnBias);
        for site in ["q", "k", "v"] {
            for h in 0..cfg.n_heads {
                ins(
                    &mut store,
                    format!("enc.{i}.attn.{site}.h{h}.w"),
                    vec![d, dh],
                    ParamRole::Weight,
                );
                ins(
                    &mut store,
                    format!("enc.{i}.attn.{site}.h{h}.b"),
                    vec![1, dh],
                    ParamRole::Bias,
                );
            }
        }
        ins(&mut store, format!("enc.{i}.attn.o.w"), vec![d, d], ParamRole::Weight);
        ins(&mut store, format!("enc.{i}.attn.o.b"), vec![1, d], ParamRole::Bias);
        ins(&mut store, format!("enc.{i}.ln2.g"), vec![1, d], ParamRole::LnGain);
        ins(&mut store, format!("enc.{i}.ln2.b"), vec![1, d], ParamRole::LnBias);
        ins(&mut store, format!("enc.{i}.ff.w1"), vec![d, cfg.d_ff], ParamRole::Weight);
        ins(&mut store, format!("enc.{i}.ff.b1"), vec![1, cfg.d_ff], ParamRole::Bias);
        ins(&mut store, format!("enc.{i}.ff.w2"), vec![cfg.d_ff, d], ParamRole::Weight);
        ins(&mut store, format!("enc.{i}.ff.b2"), vec![1, d], ParamRole::Bias);
    }

    ins(&mut store, "final_ln.g".into(), vec![1, d], ParamRole::LnGain);
    ins(&mut store, "final_ln.b".into(), vec![1, d], ParamRole::LnBias);

    attach_head(&mut store, cfg, d, seed);

    // The front end never trains, regardless of method.
    store.freeze_where(|name, _| name.starts_with("frontend."));
    Ok(store)
}

/// Add the classification head for feature width `d_feat`. Side-network
/// methods whose exit width is `d_model / RF` replace the default head.
pub fn attach_head<F: Scalar>(
    store: &mut ParamStore<F>,
    cfg: &ModelConfig,
    d_feat: usize,
    seed: u64,
) {
    let mut ins = |name: &str, shape: Vec<usize>, role: ParamRole| {
        insert_init(store, seed, name.to_string(), shape, Owner::Head, role);
    };
    ins("head.proj.w", vec![d_feat, cfg.proj_dim], ParamRole::Weight);
    ins("head.proj.b", vec![1, cfg.proj_dim], ParamRole::Bias);
    ins("head.fc.w", vec![cfg.proj_dim, cfg.n_classes], ParamRole::Weight);
    ins("head.fc.b", vec![1, cfg.n_classes], ParamRole::Bias);
}

/// Drop the current head (before attaching one at a different width).
pub fn remove_head<F: Scalar>(store: &mut ParamStore<F>) {
    for name in ["head.proj.w", "head.proj.b", "head.fc.w", "head.fc.b"] {
        store.remove(name);
    }
}

// ── forward ─────────────────────────────────────────────────────────────

/// Rows of `x` shifted by `delta` (vacated rows zero). A constant-building
/// helper for the frozen context stages; it never touches the tape.
fn shifted_rows<F: Scalar>(x: &Tensor<F>, delta: isize) -> Tensor<F> {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let src = r as isize + delta;
        if src >= 0 && (src as usize) < rows {
            let src = src as usize;
            out[r * cols..(r + 1) * cols]
                .copy_from_slice(&x.data()[src * cols..(src + 1) * cols]);
        }
    }
    Tensor::from_vec(vec![rows, cols], out)
}

fn context_stage<F: Scalar>(
    engine: &mut Engine<F>,
    store: &ParamStore<F>,
    x: &Tensor<F>,
    prefix: &str,
) -> Result<Tensor<F>> {
    let xm = shifted_rows(x, -1);
    let xp = shifted_rows(x, 1);
    let w0 = store.use_param(engine, &format!("{prefix}.w0"));
    let w1 = store.use_param(engine, &format!("{prefix}.w1"));
    let w2 = store.use_param(engine, &format!("{prefix}.w2"));
    let b = store.use_param(engine, &format!("{prefix}.b"));
    let y0 = engine.matmul(&xm, &w0)?;
    let y1 = engine.matmul(x, &w1)?;
    let y2 = engine.matmul(&xp, &w2)?;
    let s = engine.add(&y0, &y1)?;
    let s = engine.add(&s, &y2)?;
    let s = engine.add(&s, &b)?;
    engine.gelu(&s)
}

/// Frozen front end: two context stages with GELU, then the position table.
fn front_end<F: Scalar>(
    engine: &mut Engine<F>,
    store: &ParamStore<F>,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    engine.scoped(Owner::Backbone, None, |e| {
        let c1 = context_stage(e, store, x, "frontend.conv1")?;
        let c2 = context_stage(e, store, &c1, "frontend.conv2")?;
        let pos = store.use_param(e, "frontend.pos");
        e.embedding_add(&c2, &pos)
    })
}

/// Column-wise concatenation expressed with transpose + concat-rows, so the
/// per-head context vectors rejoin without a dedicated primitive. Shape ops
/// retain nothing.
fn col_concat<F: Scalar>(engine: &mut Engine<F>, parts: &[Tensor<F>]) -> Result<Tensor<F>> {
    let mut transposed = Vec::with_capacity(parts.len());
    for p in parts {
        transposed.push(engine.transpose(p)?);
    }
    let refs: Vec<&Tensor<F>> = transposed.iter().collect();
    let cat = engine.concat_rows(&refs)?;
    engine.transpose(&cat)
}

/// One pre-norm encoder layer: `y = x + MHSA(LN(x)); z = y + FFN(LN(y))`.
/// `layer` is 1-based and tags every recorded node for layer attribution.
pub fn encoder_layer_forward<F: Scalar, H: LayerHooks<F>>(
    engine: &mut Engine<F>,
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    layer: usize,
    x: &Tensor<F>,
    hooks: &H,
) -> Result<Tensor<F>> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let eps = F::from_f64(LN_EPS);
    if x.rows() != cfg.seq_len || x.cols() != d {
        return Err(EngineError::Invalid(format!(
            "encoder layer {layer}: input {:?}, expected [{}, {}]",
            x.shape(),
            cfg.seq_len,
            d
        )));
    }

    engine.scoped(Owner::Backbone, Some(layer as u16), |e| {
        let g1 = store.use_param(e, &format!("enc.{layer}.ln1.g"));
        let b1 = store.use_param(e, &format!("enc.{layer}.ln1.b"));
        let lnx = e.layer_norm(x, &g1, &b1, eps)?;

        let dq = e.scoped(Owner::Side, Some(layer as u16), |e| {
            hooks.site_deltas(e, store, layer, AttnSite::Query, &lnx)
        })?;
        let dv = e.scoped(Owner::Side, Some(layer as u16), |e| {
            hooks.site_deltas(e, store, layer, AttnSite::Value, &lnx)
        })?;

        let inv_sqrt_dh = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut ctx_heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let proj = |e: &mut Engine<F>, site: &str| -> Result<Tensor<F>> {
                let w = store.use_param(e, &format!("enc.{layer}.attn.{site}.h{h}.w"));
                let b = store.use_param(e, &format!("enc.{layer}.attn.{site}.h{h}.b"));
                let y = e.matmul(&lnx, &w)?;
                e.add(&y, &b)
            };
            let mut q = proj(e, "q")?;
            if let Some(dq) = &dq {
                q = e.add(&q, &dq[h])?;
            }
            let k = proj(e, "k")?;
            let mut v = proj(e, "v")?;
            if let Some(dv) = &dv {
                v = e.add(&v, &dv[h])?;
            }
            let kt = e.transpose(&k)?;
            let scores = e.matmul(&q, &kt)?;
            let scores = e.scale(&scores, inv_sqrt_dh)?;
            let p = e.softmax_rows(&scores)?;
            ctx_heads.push(e.matmul(&p, &v)?);
        }
        let ctx = col_concat(e, &ctx_heads)?;
        let ow = store.use_param(e, &format!("enc.{layer}.attn.o.w"));
        let ob = store.use_param(e, &format!("enc.{layer}.attn.o.b"));
        let attn = e.matmul(&ctx, &ow)?;
        let attn = e.add(&attn, &ob)?;
        let h1 = e.add(x, &attn)?;
        let h1 = e.scoped(Owner::Side, Some(layer as u16), |e| {
            hooks.post_sublayer(e, store, layer, Sublayer::Attention, h1)
        })?;

        let g2 = store.use_param(e, &format!("enc.{layer}.ln2.g"));
        let b2 = store.use_param(e, &format!("enc.{layer}.ln2.b"));
        let lnx2 = e.layer_norm(&h1, &g2, &b2, eps)?;
        let w1 = store.use_param(e, &format!("enc.{layer}.ff.w1"));
        let fb1 = store.use_param(e, &format!("enc.{layer}.ff.b1"));
        let w2 = store.use_param(e, &format!("enc.{layer}.ff.w2"));
        let fb2 = store.use_param(e, &format!("enc.{layer}.ff.b2"));
        let f = e.matmul(&lnx2, &w1)?;
        let f = e.add(&f, &fb1)?;
        let f = e.gelu(&f)?;
        let f = e.matmul(&f, &w2)?;
        let f = e.add(&f, &fb2)?;
        let h2 = e.add(&h1, &f)?;
        e.scoped(Owner::Side, Some(layer as u16), |e| {
            hooks.post_sublayer(e, store, layer, Sublayer::Ffn, h2)
        })
    })
}

/// Full encoder pass exposing every tap. With `retain = false` the whole
/// pass runs in a detached scope: no tape nodes, no retained bytes, and the
/// returned taps are constants.
pub fn encode<F: Scalar, H: LayerHooks<F>>(
    engine: &mut Engine<F>,
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    x: &Tensor<F>,
    retain: bool,
    hooks: &H,
) -> Result<LayerTaps<F>> {
    if x.rows() != cfg.seq_len || x.cols() != cfg.d_input {
        return Err(EngineError::Invalid(format!(
            "encode: input {:?}, expected [{}, {}]",
            x.shape(),
            cfg.seq_len,
            cfg.d_input
        )));
    }
    let run = |e: &mut Engine<F>| -> Result<LayerTaps<F>> {
        let embeddings = front_end(e, store, x)?;
        let mut per_layer = Vec::with_capacity(cfg.n_layers);
        let mut h = embeddings.clone();
        for i in 1..=cfg.n_layers {
            h = encoder_layer_forward(e, store, cfg, i, &h, hooks)?;
            per_layer.push(h.clone());
        }
        Ok(LayerTaps {
            embeddings,
            per_layer,
        })
    };
    if retain {
        run(engine)
    } else {
        engine.detached(run)
    }
}

/// Closing layernorm applied to full-width features before the head. Its
/// nodes are attributed to the last layer's region.
pub fn final_layernorm<F: Scalar>(
    engine: &mut Engine<F>,
    store: &ParamStore<F>,
    cfg: &ModelConfig,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    engine.scoped(Owner::Backbone, Some(cfg.n_layers as u16), |e| {
        let g = store.use_param(e, "final_ln.g");
        let b = store.use_param(e, "final_ln.b");
        e.layer_norm(x, &g, &b, F::from_f64(LN_EPS))
    })
}

/// `logits = FC(mean over time(Proj(features)))`. Head parameters are
/// always trainable and owned by `Head`.
pub fn classify_head<F: Scalar>(
    engine: &mut Engine<F>,
    store: &ParamStore<F>,
    features: &Tensor<F>,
) -> Result<Tensor<F>> {
    let head_width = store.entry("head.proj.w").shape()[0];
    if features.cols() != head_width {
        return Err(EngineError::Invalid(format!(
            "classify_head: features width {} but the head was built for {}",
            features.cols(),
            head_width
        )));
    }
    engine.scoped(Owner::Head, None, |e| {
        let pw = store.use_param(e, "head.proj.w");
        let pb = store.use_param(e, "head.proj.b");
        let fw = store.use_param(e, "head.fc.w");
        let fb = store.use_param(e, "head.fc.b");
        let p = e.matmul(features, &pw)?;
        let p = e.add(&p, &pb)?;
        let pooled = e.mean_over_axis(&p, 0)?;
        let logits = e.matmul(&pooled, &fw)?;
        let logits = e.add(&logits, &fb)?;
        let k = logits.cols();
        e.reshape(&logits, vec![k])
    })
}

/// Set frozen flags for a fine-tuning strategy. The front end (context
/// stages + position embedding) stays frozen under every policy; the head
/// is trainable under every policy.
pub fn freeze_policy<F: Scalar>(store: &mut ParamStore<F>, method: MethodSpec) {
    store.freeze_where(|name, e| {
        if name.starts_with("frontend.") {
            return true;
        }
        if e.owner == Owner::Head {
            return false;
        }
        match method {
            MethodSpec::Vanilla => false,
            MethodSpec::Head => true,
            MethodSpec::Bitfit => !e.role.is_bias(),
            // PEFT and MEFT: whole backbone frozen, method-owned trainable.
            _ => e.owner == Owner::Backbone,
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            seq_len: 6,
            d_input: 4,
            n_classes: 3,
            proj_dim: 5,
        }
    }

    fn input(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..cfg.seq_len * cfg.d_input)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::matrix(cfg.seq_len, cfg.d_input, data)
    }

    fn bits_of_store(store: &ParamStore<f64>) -> Vec<(String, Vec<u64>)> {
        store
            .iter()
            .map(|(n, e)| (n.clone(), e.value().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn same_seed_gives_bitwise_identical_stores() {
        let cfg = toy_cfg();
        let a = init_backbone::<f64>(&cfg, 7).unwrap();
        let b = init_backbone::<f64>(&cfg, 7).unwrap();
        assert_eq!(bits_of_store(&a), bits_of_store(&b));
    }

    #[test]
    fn different_seeds_differ_somewhere() {
        let cfg = toy_cfg();
        let a = init_backbone::<f64>(&cfg, 7).unwrap();
        let b = init_backbone::<f64>(&cfg, 8).unwrap();
        assert_ne!(bits_of_store(&a), bits_of_store(&b));
    }

    #[test]
    fn closed_form_param_count_matches_census() {
        let cfg = toy_cfg();
        let store = init_backbone::<f64>(&cfg, 1).unwrap();
        let (d, dh, h, dff, n) = (
            cfg.d_model,
            cfg.head_dim(),
            cfg.n_heads,
            cfg.d_ff,
            cfg.seq_len,
        );
        let frontend = 3 * cfg.d_input * d + d + 3 * d * d + d + n * d;
        let per_layer = 2 * 2 * d            // two layernorms
            + 3 * h * (d * dh + dh)          // q,k,v per head
            + d * d + d                      // output projection
            + d * dff + dff + dff * d + d;   // ffn
        let head = d * cfg.proj_dim + cfg.proj_dim + cfg.proj_dim * cfg.n_classes + cfg.n_classes;
        let expected = frontend + cfg.n_layers * per_layer + 2 * d + head;
        assert_eq!(store.total_params(), expected as u64);
    }

    #[test]
    fn zero_input_zero_pos_gives_zero_taps() {
        let cfg = toy_cfg();
        let mut store = init_backbone::<f64>(&cfg, 3).unwrap();
        store.set_value(
            "frontend.pos",
            vec![0.0; cfg.seq_len * cfg.d_model],
        );
        let x = Tensor::zeros(vec![cfg.seq_len, cfg.d_input]);
        let mut eng = Engine::<f64>::new();
        let taps = encode(&mut eng, &store, &cfg, &x, true, &NoHooks).unwrap();
        for tap in &taps.per_layer {
            assert!(tap.data().iter().all(|&v| v == 0.0), "nonzero tap");
        }
    }

    #[test]
    fn detached_encode_retains_nothing_and_matches_retained_values() {
        let cfg = toy_cfg();
        let mut store = init_backbone::<f64>(&cfg, 5).unwrap();
        freeze_policy(&mut store, MethodSpec::Vanilla);
        let x = input(&cfg, 11);

        let mut e1 = Engine::<f64>::new();
        let retained = encode(&mut e1, &store, &cfg, &x, true, &NoHooks).unwrap();
        assert!(e1.peak_retained_bytes() > 0);

        let mut e2 = Engine::<f64>::new();
        let detached = encode(&mut e2, &store, &cfg, &x, false, &NoHooks).unwrap();
        assert_eq!(e2.peak_retained_bytes(), 0);
        assert_eq!(e2.tape_len(), 0);
        for (a, b) in retained
            .per_layer
            .iter()
            .zip(detached.per_layer.iter())
        {
            assert!(b.is_const());
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn taps_have_seq_by_dmodel_shape() {
        let cfg = toy_cfg();
        let store = init_backbone::<f64>(&cfg, 5).unwrap();
        let x = input(&cfg, 2);
        let mut eng = Engine::<f64>::new();
        let taps = encode(&mut eng, &store, &cfg, &x, false, &NoHooks).unwrap();
        assert_eq!(taps.n_layers(), cfg.n_layers);
        assert_eq!(taps.embeddings.shape(), &[cfg.seq_len, cfg.d_model]);
        for tap in &taps.per_layer {
            assert_eq!(tap.shape(), &[cfg.seq_len, cfg.d_model]);
        }
    }

    #[test]
    fn encode_is_deterministic_across_runs() {
        let cfg = toy_cfg();
        let store = init_backbone::<f64>(&cfg, 9).unwrap();
        let x = input(&cfg, 1);
        let run = || {
            let mut eng = Engine::<f64>::new();
            let taps = encode(&mut eng, &store, &cfg, &x, false, &NoHooks).unwrap();
            taps.final_tap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    /// Straight-line reimplementation of the same arithmetic, kept
    /// deliberately independent of the engine.
    mod straightline {
        pub fn layernorm(x: &[f64], rows: usize, cols: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
                let rstd = 1.0 / (var + super::LN_EPS).sqrt();
                for c in 0..cols {
                    out[r * cols + c] = (row[c] - mean) * rstd * g[c] + b[c];
                }
            }
            out
        }

        pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for kk in 0..k {
                    for j in 0..n {
                        out[i * n + j] += a[i * k + kk] * b[kk * n + j];
                    }
                }
            }
            out
        }

        pub fn softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
            for r in 0..rows {
                let row = &mut x[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }

        pub fn gelu(x: &mut [f64]) {
            for v in x.iter_mut() {
                let c = 0.7978845608028654;
                let u = c * (*v + 0.044715 * v.powi(3));
                *v = 0.5 * *v * (1.0 + u.tanh());
            }
        }
    }

    #[test]
    fn two_layer_encoder_matches_straightline_reimplementation() {
        let cfg = toy_cfg();
        let store = init_backbone::<f64>(&cfg, 3).unwrap();
        let x = input(&cfg, 3);
        let (n, d, dh) = (cfg.seq_len, cfg.d_model, cfg.head_dim());

        let mut eng = Engine::<f64>::new();
        let taps = encode(&mut eng, &store, &cfg, &x, false, &NoHooks).unwrap();

        // Independent forward on raw slices.
        let v = |name: &str| store.entry(name).value().to_vec();
        // front end
        let shift = |x: &[f64], rows: usize, cols: usize, delta: isize| {
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let s = r as isize + delta;
                if s >= 0 && (s as usize) < rows {
                    out[r * cols..(r + 1) * cols]
                        .copy_from_slice(&x[s as usize * cols..(s as usize + 1) * cols]);
                }
            }
            out
        };
        let stage = |x: &[f64], din: usize, prefix: &str| {
            let mut acc = straightline::matmul(&shift(x, n, din, -1), &v(&format!("{prefix}.w0")), n, din, d);
            let y1 = straightline::matmul(x, &v(&format!("{prefix}.w1")), n, din, d);
            let y2 = straightline::matmul(&shift(x, n, din, 1), &v(&format!("{prefix}.w2")), n, din, d);
            let b = v(&format!("{prefix}.b"));
            for i in 0..n * d {
                acc[i] += y1[i] + y2[i] + b[i % d];
            }
            straightline::gelu(&mut acc);
            acc
        };
        let c1 = stage(x.data(), cfg.d_input, "frontend.conv1");
        let mut h = stage(&c1, d, "frontend.conv2");
        let pos = v("frontend.pos");
        for i in 0..n * d {
            h[i] += pos[i];
        }

        for layer in 1..=cfg.n_layers {
            let lnx = straightline::layernorm(
                &h, n, d,
                &v(&format!("enc.{layer}.ln1.g")),
                &v(&format!("enc.{layer}.ln1.b")),
            );
            let mut ctx = vec![0.0; n * d];
            for hd in 0..cfg.n_heads {
                let proj = |site: &str| {
                    let w = v(&format!("enc.{layer}.attn.{site}.h{hd}.w"));
                    let b = v(&format!("enc.{layer}.attn.{site}.h{hd}.b"));
                    let mut y = straightline::matmul(&lnx, &w, n, d, dh);
                    for i in 0..n * dh {
                        y[i] += b[i % dh];
                    }
                    y
                };
                let q = proj("q");
                let k = proj("k");
                let vv = proj("v");
                let mut scores = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let mut s = 0.0;
                        for c in 0..dh {
                            s += q[i * dh + c] * k[j * dh + c];
                        }
                        scores[i * n + j] = s / (dh as f64).sqrt();
                    }
                }
                straightline::softmax_rows(&mut scores, n, n);
                for i in 0..n {
                    for c in 0..dh {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += scores[i * n + j] * vv[j * dh + c];
                        }
                        ctx[i * d + hd * dh + c] = s;
                    }
                }
            }
            let ow = v(&format!("enc.{layer}.attn.o.w"));
            let ob = v(&format!("enc.{layer}.attn.o.b"));
            let mut attn = straightline::matmul(&ctx, &ow, n, d, d);
            for i in 0..n * d {
                attn[i] += ob[i % d];
                attn[i] += h[i];
            }
            let lnx2 = straightline::layernorm(
                &attn, n, d,
                &v(&format!("enc.{layer}.ln2.g")),
                &v(&format!("enc.{layer}.ln2.b")),
            );
            let mut f = straightline::matmul(&lnx2, &v(&format!("enc.{layer}.ff.w1")), n, d, cfg.d_ff);
            let b1 = v(&format!("enc.{layer}.ff.b1"));
            for i in 0..n * cfg.d_ff {
                f[i] += b1[i % cfg.d_ff];
            }
            straightline::gelu(&mut f);
            let mut f2 = straightline::matmul(&f, &v(&format!("enc.{layer}.ff.w2")), n, cfg.d_ff, d);
            let b2 = v(&format!("enc.{layer}.ff.b2"));
            for i in 0..n * d {
                f2[i] += b2[i % d];
                f2[i] += attn[i];
            }
            h = f2;

            let tap = taps.layer(layer);
            for (a, b) in tap.data().iter().zip(h.iter()) {
                assert!(
                    (a - b).abs() < 1e-9,
                    "layer {layer}: engine {a} vs straightline {b}"
                );
            }
        }
    }

    #[test]
    fn head_constant_rows_equal_single_row() {
        let cfg = toy_cfg();
        let store = init_backbone::<f64>(&cfg, 4).unwrap();
        let mut eng = Engine::<f64>::new();
        let row: Vec<f64> = (0..cfg.d_model).map(|i| 0.1 * i as f64).collect();
        let mut many = Vec::new();
        for _ in 0..cfg.seq_len {
            many.extend_from_slice(&row);
        }
        let features = Tensor::matrix(cfg.seq_len, cfg.d_model, many);
        let single = Tensor::matrix(1, cfg.d_model, row);
        let l1 = classify_head(&mut eng, &store, &features).unwrap();
        let l2 = classify_head(&mut eng, &store, &single).unwrap();
        for (a, b) in l1.data().iter().zip(l2.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn head_zero_weights_give_zero_logits() {
        let cfg = toy_cfg();
        let mut store = init_backbone::<f64>(&cfg, 4).unwrap();
        for name in ["head.proj.w", "head.fc.w"] {
            let numel = store.entry(name).numel();
            store.set_value(name, vec![0.0; numel]);
        }
        let mut eng = Engine::<f64>::new();
        let features = Tensor::matrix(cfg.seq_len, cfg.d_model, vec![0.3; cfg.seq_len * cfg.d_model]);
        let logits = classify_head(&mut eng, &store, &features).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_matches_hand_matrix_arithmetic() {
        // d_feat = 4, proj = 3, K = 2, two time steps, hand-set weights.
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            d_ff: 4,
            seq_len: 2,
            d_input: 2,
            n_classes: 2,
            proj_dim: 3,
        };
        let mut store = init_backbone::<f64>(&cfg, 0).unwrap();
        store.set_value(
            "head.proj.w",
            vec![
                1.0, 0.0, 0.5, //
                0.0, 1.0, -0.5, //
                1.0, 1.0, 0.0, //
                0.0, 0.0, 2.0,
            ],
        );
        store.set_value("head.proj.b", vec![0.1, -0.1, 0.0]);
        store.set_value("head.fc.w", vec![1.0, -1.0, 0.5, 0.5, 2.0, 0.0]);
        store.set_value("head.fc.b", vec![0.0, 0.25]);
        let features = Tensor::matrix(2, 4, vec![1.0, 2.0, 0.5, -1.0, 0.0, 1.0, 1.0, 3.0]);
        // Proj rows: t0 = [1.6, 2.4, -2.5], t1 = [1.1, 1.9, 5.5];
        // pooled = [1.35, 2.15, 1.5]; logits = [pooled·col0, pooled·col1] + b
        //        = [1.35·1 + 2.15·0.5 + 1.5·2, 1.35·(−1) + 2.15·0.5 + 0] + [0, 0.25]
        let expect = [
            1.35 + 1.075 + 3.0,
            -1.35 + 1.075 + 0.25,
        ];
        let mut eng = Engine::<f64>::new();
        let logits = classify_head(&mut eng, &store, &features).unwrap();
        for (a, b) in logits.data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn head_width_mismatch_is_reported() {
        let cfg = toy_cfg();
        let store = init_backbone::<f64>(&cfg, 4).unwrap();
        let mut eng = Engine::<f64>::new();
        let bad = Tensor::matrix(2, cfg.d_model + 1, vec![0.0; 2 * (cfg.d_model + 1)]);
        let err = classify_head(&mut eng, &store, &bad).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let cfg = toy_cfg();
        let store = init_backbone::<f64>(&cfg, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let data: Vec<f64> = (0..cfg.seq_len * cfg.d_model)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let feats = Tensor::matrix(cfg.seq_len, cfg.d_model, data.clone());
        // reverse the time rows
        let mut rev = Vec::with_capacity(data.len());
        for r in (0..cfg.seq_len).rev() {
            rev.extend_from_slice(&data[r * cfg.d_model..(r + 1) * cfg.d_model]);
        }
        let feats_rev = Tensor::matrix(cfg.seq_len, cfg.d_model, rev);
        let mut eng = Engine::<f64>::new();
        let a = classify_head(&mut eng, &store, &feats).unwrap();
        let b = classify_head(&mut eng, &store, &feats_rev).unwrap();
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn head_tuning_trains_exactly_the_head() {
        let cfg = toy_cfg();
        let mut store = init_backbone::<f64>(&cfg, 1).unwrap();
        freeze_policy(&mut store, MethodSpec::Head);
        for (name, e) in store.iter() {
            assert_eq!(
                !e.frozen,
                name.starts_with("head."),
                "{name} frozen flag wrong"
            );
        }
    }

    #[test]
    fn vanilla_freezes_only_the_front_end() {
        let cfg = toy_cfg();
        let mut store = init_backbone::<f64>(&cfg, 1).unwrap();
        freeze_policy(&mut store, MethodSpec::Vanilla);
        for (name, e) in store.iter() {
            assert_eq!(
                e.frozen,
                name.starts_with("frontend."),
                "{name} frozen flag wrong"
            );
        }
    }

    #[test]
    fn bitfit_selects_biases_plus_head() {
        let cfg = toy_cfg();
        let mut store = init_backbone::<f64>(&cfg, 1).unwrap();
        freeze_policy(&mut store, MethodSpec::Bitfit);
        for (name, e) in store.iter() {
            let expect_trainable = name.starts_with("head.")
                || (!name.starts_with("frontend.") && e.role.is_bias());
            assert_eq!(!e.frozen, expect_trainable, "{name} frozen flag wrong");
        }
        // spot checks from the selection rule: LN gains frozen, LN biases not
        assert!(store.entry("enc.1.ln1.g").frozen);
        assert!(!store.entry("enc.1.ln1.b").frozen);
        assert!(store.entry("enc.1.ff.w1").frozen);
    }

    #[test]
    fn head_is_trainable_under_every_method() {
        let cfg = toy_cfg();
        let methods = [
            MethodSpec::Vanilla,
            MethodSpec::Head,
            MethodSpec::Bitfit,
            MethodSpec::Adapter { dim: 4 },
            MethodSpec::Lora { r: 2 },
            MethodSpec::Adalora { init_r: 2 },
            MethodSpec::Lst { rf: 2 },
            MethodSpec::Unipt { rf: 2 },
            MethodSpec::Sherl { rf: 2 },
        ];
        for m in methods {
            let mut store = init_backbone::<f64>(&cfg, 1).unwrap();
            freeze_policy(&mut store, m);
            for name in ["head.proj.w", "head.proj.b", "head.fc.w", "head.fc.b"] {
                assert!(!store.entry(name).frozen, "{m}: {name} must train");
            }
        }
    }
}
