//! Named parameters with frozen flags, owner tags and gradient accumulators.
//!
//! The store is the single census authority: trainable ratios reported by
//! the harness are computed by walking these entries, never from the cost
//! model's closed forms (the two are cross-checked in tests).

use crate::engine::{Engine, Owner};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

/// What a parameter is, structurally. BitFit's bias-only selection and the
/// vanilla front-end freeze are both driven off this.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    LnGain,
    LnBias,
    PosEmbedding,
    /// Learnable gating scalar (side-network α).
    Gate,
}

impl ParamRole {
    /// Bias terms in the BitFit sense: additive vectors, including the
    /// layernorm shift but not the layernorm gain.
    pub fn is_bias(self) -> bool {
        matches!(self, ParamRole::Bias | ParamRole::LnBias)
    }
}

pub struct ParamEntry<F: Scalar> {
    uid: u64,
    shape: Vec<usize>,
    value: Rc<Vec<F>>,
    grad: Rc<RefCell<Vec<F>>>,
    pub frozen: bool,
    pub owner: Owner,
    pub role: ParamRole,
}

impl<F: Scalar> ParamEntry<F> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn value(&self) -> &[F] {
        &self.value
    }

    pub fn grad(&self) -> std::cell::Ref<'_, Vec<F>> {
        self.grad.borrow()
    }
}

/// Map name → (value, grad accumulator, frozen flag, owner). Single-writer
/// during training; iteration order is the sorted name order, so every walk
/// over the store is deterministic.
pub struct ParamStore<F: Scalar> {
    entries: BTreeMap<String, ParamEntry<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    /// Insert a parameter. Names are unique; a duplicate is a wiring bug.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<F>,
        owner: Owner,
        role: ParamRole,
    ) {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param {name}: shape {shape:?} vs {} elements",
            data.len()
        );
        let numel = data.len();
        let prev = self.entries.insert(
            name.clone(),
            ParamEntry {
                uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
                shape,
                value: Rc::new(data),
                grad: Rc::new(RefCell::new(vec![F::zero(); numel])),
                frozen: false,
                owner,
                role,
            },
        );
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> &ParamEntry<F> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<F>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Put a parameter on the tape. Trainable entries become leaf nodes
    /// whose gradients accumulate into this store; frozen entries come back
    /// as constants.
    pub fn use_param(&self, engine: &mut Engine<F>, name: &str) -> Tensor<F> {
        let e = self.entry(name);
        engine.leaf(
            e.uid,
            &e.shape,
            Rc::clone(&e.value),
            !e.frozen,
            e.owner,
            if e.frozen {
                None
            } else {
                Some(Rc::clone(&e.grad))
            },
        )
    }

    /// Mutate a value in place (optimizer update). Buffers still retained by
    /// an old tape are left untouched via copy-on-write.
    pub fn update_value(&mut self, name: &str, f: impl FnOnce(&mut [F])) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        match Rc::get_mut(&mut e.value) {
            Some(data) => f(data),
            None => {
                let mut cloned = (*e.value).clone();
                f(&mut cloned);
                e.value = Rc::new(cloned);
            }
        }
    }

    pub fn set_value(&mut self, name: &str, data: Vec<F>) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(data.len(), e.numel(), "set_value {name}: wrong length");
        e.value = Rc::new(data);
    }

    pub fn set_element(&mut self, name: &str, idx: usize, v: F) {
        self.update_value(name, |data| data[idx] = v);
    }

    /// Remove an entry (e.g. swapping the head for a different width).
    pub fn remove(&mut self, name: &str) {
        let prev = self.entries.remove(name);
        assert!(prev.is_some(), "removing unknown parameter {name}");
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        e.frozen = frozen;
    }

    /// Apply a freeze predicate to every entry at once.
    pub fn freeze_where(&mut self, mut frozen: impl FnMut(&str, &ParamEntry<F>) -> bool) {
        // BTreeMap has no iter_mut over (k, &mut v) splitting borrows of the
        // predicate's &v; collect names first.
        let names: Vec<String> = self.entries.keys().cloned().collect();
        for name in names {
            let decision = frozen(&name, &self.entries[&name]);
            self.entries.get_mut(&name).unwrap().frozen = decision;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values() {
            for g in e.grad.borrow_mut().iter_mut() {
                *g = F::zero();
            }
        }
    }

    // ── census ──────────────────────────────────────────────────────────

    pub fn total_params(&self) -> u64 {
        self.entries.values().map(|e| e.numel() as u64).sum()
    }

    pub fn trainable_params(&self) -> u64 {
        self.entries
            .values()
            .filter(|e| !e.frozen)
            .map(|e| e.numel() as u64)
            .sum()
    }

    pub fn params_by_owner(&self, owner: Owner) -> u64 {
        self.entries
            .values()
            .filter(|e| e.owner == owner)
            .map(|e| e.numel() as u64)
            .sum()
    }

    /// Trainable parameters as a percentage of all parameters.
    pub fn trainable_ratio_pct(&self) -> f64 {
        100.0 * self.trainable_params() as f64 / self.total_params() as f64
    }

    /// Names of all trainable entries, in deterministic order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| !e.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Engine;

    fn store_with(frozen: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], Owner::Backbone, ParamRole::Weight);
        s.set_frozen("w", frozen);
        s
    }

    #[test]
    fn frozen_entries_stay_silent_after_backward() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", vec![2, 1], vec![0.5, -0.5], Owner::Backbone, ParamRole::Weight);
        store.insert("v", vec![2, 1], vec![1.0, 1.0], Owner::Side, ParamRole::Weight);
        store.set_frozen("w", true);

        let mut eng = Engine::<f64>::new();
        let x = Tensor::row(vec![1.0, 2.0]);
        let w = store.use_param(&mut eng, "w");
        let v = store.use_param(&mut eng, "v");
        let a = eng.matmul(&x, &w).unwrap(); // const path (w frozen, x const)
        let b = eng.matmul(&x, &v).unwrap();
        let y = eng.add(&a, &b).unwrap();
        let loss = eng.reshape(&y, vec![1]).unwrap();
        eng.backward(&loss).unwrap();

        assert!(store.entry("w").grad().iter().all(|&g| g == 0.0));
        assert_eq!(&*store.entry("v").grad(), &vec![1.0, 2.0]);
    }

    #[test]
    fn census_counts_follow_freeze_flags() {
        let mut s = store_with(false);
        s.insert("b", vec![1, 2], vec![0.0, 0.0], Owner::Head, ParamRole::Bias);
        assert_eq!(s.total_params(), 6);
        assert_eq!(s.trainable_params(), 6);
        s.set_frozen("w", true);
        assert_eq!(s.trainable_params(), 2);
        assert!((s.trainable_ratio_pct() - 100.0 * 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut s = store_with(false);
        s.insert("w", vec![1], vec![0.0], Owner::Head, ParamRole::Bias);
    }

    #[test]
    fn update_value_preserves_retained_buffers() {
        let mut s = store_with(false);
        let mut eng = Engine::<f64>::new();
        let w = s.use_param(&mut eng, "w");
        let before = w.shared();
        s.update_value("w", |d| d[0] = 99.0);
        // The tape's view of the old buffer is unchanged.
        assert_eq!(before[0], 1.0);
        assert_eq!(s.entry("w").value()[0], 99.0);
    }
}
