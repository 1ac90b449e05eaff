//! Fine-tuning strategy selection.

use serde::{Deserialize, Serialize};

/// Which fine-tuning strategy a run uses, with its single hyperparameter.
/// JSON form: `{"kind": "lst", "rf": 8}`, `{"kind": "lora", "r": 64}`, …
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MethodSpec {
    Vanilla,
    Head,
    Bitfit,
    Adapter { dim: usize },
    Lora { r: usize },
    Adalora { init_r: usize },
    Lst { rf: usize },
    Unipt { rf: usize },
    Sherl { rf: usize },
}

impl MethodSpec {
    /// Stable identifier used in CSV rows and file names.
    pub fn id(&self) -> String {
        match self {
            MethodSpec::Vanilla => "vanilla".into(),
            MethodSpec::Head => "head".into(),
            MethodSpec::Bitfit => "bitfit".into(),
            MethodSpec::Adapter { dim } => format!("adapter_dim{dim}"),
            MethodSpec::Lora { r } => format!("lora_r{r}"),
            MethodSpec::Adalora { init_r } => format!("adalora_r{init_r}"),
            MethodSpec::Lst { rf } => format!("lst_rf{rf}"),
            MethodSpec::Unipt { rf } => format!("unipt_rf{rf}"),
            MethodSpec::Sherl { rf } => format!("sherl_rf{rf}"),
        }
    }

    /// Side-network methods: the backbone runs detached and only side
    /// structures and the head are on the tape.
    pub fn is_meft(&self) -> bool {
        matches!(
            self,
            MethodSpec::Lst { .. } | MethodSpec::Unipt { .. } | MethodSpec::Sherl { .. }
        )
    }

    /// Methods that keep the backbone frozen but still backpropagate
    /// through it.
    pub fn is_peft(&self) -> bool {
        matches!(
            self,
            MethodSpec::Adapter { .. }
                | MethodSpec::Lora { .. }
                | MethodSpec::Adalora { .. }
                | MethodSpec::Bitfit
        )
    }

    /// Reduction factor for the side-network methods.
    pub fn rf(&self) -> Option<usize> {
        match self {
            MethodSpec::Lst { rf } | MethodSpec::Unipt { rf } | MethodSpec::Sherl { rf } => {
                Some(*rf)
            }
            _ => None,
        }
    }

    /// Sort key grouping rows the way comparison tables are laid out:
    /// head, vanilla, then the PEFT block, then the MEFT block.
    pub fn group_order(&self) -> (u8, String) {
        let g = match self {
            MethodSpec::Head => 0,
            MethodSpec::Vanilla => 1,
            MethodSpec::Adapter { .. } => 2,
            MethodSpec::Lora { .. } => 3,
            MethodSpec::Adalora { .. } => 4,
            MethodSpec::Bitfit => 5,
            MethodSpec::Lst { .. } => 6,
            MethodSpec::Unipt { .. } => 7,
            MethodSpec::Sherl { .. } => 8,
        };
        (g, self.id())
    }
}

impl std::fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.id())
    }
}
