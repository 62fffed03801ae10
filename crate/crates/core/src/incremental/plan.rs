use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Phase};
use crate::tensor::Scalar;

/// Whether `name` matches `pattern`, where `*` matches any (possibly empty)
/// run of characters, dots included.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let (p, n) = (pattern.as_bytes(), name.as_bytes());
    let (mut pi, mut ni) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ni));
            pi += 1;
        } else if pi < p.len() && p[pi] == n[ni] {
            pi += 1;
            ni += 1;
        } else if let Some((sp, sn)) = star {
            pi = sp + 1;
            ni = sn + 1;
            star = Some((sp, sn + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

/// Bookkeeping of a channel expansion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    /// `N`, channels before expansion; old kernel slices keep indices `0..N`.
    pub old_channels: usize,
    /// `M`, channels added; their slices occupy `N..N+M`.
    pub added_channels: usize,
    pub new_groups: Vec<String>,
}

/// Trainable/frozen partition of the parameter names for one phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phase: Phase,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub expansion: Option<ExpansionRecord>,
}

/// Knobs of the incremental freeze plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezeOptions {
    /// Freeze the pretrained decoder output slice and its bias.
    pub freeze_old_decoder: bool,
    /// Freeze the up-channel projection that feeds fused expert output into
    /// the residual stream.
    pub freeze_up_proj: bool,
}

impl Default for FreezeOptions {
    fn default() -> Self {
        FreezeOptions {
            freeze_old_decoder: true,
            freeze_up_proj: true,
        }
    }
}

impl PhasePlan {
    /// Everything trainable.
    pub fn initial() -> Self {
        PhasePlan {
            phase: Phase::Initial,
            trainable: vec!["*".into()],
            frozen: Vec::new(),
            expansion: None,
        }
    }

    /// Old experts, attention, norms, position embedding and the old
    /// encoder/decoder slices frozen; new experts, the shared expert, new
    /// slices, the index projector and the loss weights trainable.
    pub fn incremental(old_groups: &[String], expansion: ExpansionRecord, opts: FreezeOptions) -> Self {
        let mut trainable: Vec<String> = vec![
            "blocks.*.moe.shared.*".into(),
            "encoder.kernel_inc".into(),
            "decoder.kernel_inc".into(),
            "decoder.bias_inc".into(),
            "index.proj".into(),
            "loss.w".into(),
            "loss.w_inc".into(),
        ];
        let mut frozen: Vec<String> = vec![
            "encoder.kernel".into(),
            "encoder.bias".into(),
            "pos_embed".into(),
            "blocks.*.norm1.*".into(),
            "blocks.*.norm2.*".into(),
            "blocks.*.attn.*".into(),
        ];
        let old_decoder = ["decoder.kernel".to_string(), "decoder.bias".to_string()];
        if opts.freeze_old_decoder {
            frozen.extend(old_decoder);
        } else {
            trainable.extend(old_decoder);
        }
        let up = "blocks.*.moe.up.*".to_string();
        if opts.freeze_up_proj {
            frozen.push(up);
        } else {
            trainable.push(up);
        }
        frozen.extend(old_groups.iter().map(|g| format!("blocks.*.moe.cae.{g}.*")));
        trainable.extend(
            expansion
                .new_groups
                .iter()
                .map(|g| format!("blocks.*.moe.cae.{g}.*")),
        );
        PhasePlan {
            phase: Phase::Incremental,
            trainable,
            frozen,
            expansion: Some(expansion),
        }
    }

    /// Incremental phase with nothing frozen (naive fine-tuning).
    pub fn unfrozen(expansion: ExpansionRecord) -> Self {
        PhasePlan {
            phase: Phase::Incremental,
            trainable: vec!["*".into()],
            frozen: Vec::new(),
            expansion: Some(expansion),
        }
    }

    /// Incremental phase with nothing trainable.
    pub fn all_frozen(expansion: Option<ExpansionRecord>) -> Self {
        PhasePlan {
            phase: Phase::Incremental,
            trainable: Vec::new(),
            frozen: vec!["*".into()],
            expansion,
        }
    }

    /// Frozen flag of one parameter. Errors if the name is matched by
    /// neither set or by both.
    pub fn is_frozen(&self, name: &str) -> Result<bool> {
        let t = self.trainable.iter().any(|p| glob_match(p, name));
        let f = self.frozen.iter().any(|p| glob_match(p, name));
        match (t, f) {
            (true, false) => Ok(false),
            (false, true) => Ok(true),
            (false, false) => Err(Error::UncoveredParameter(name.to_string())),
            (true, true) => Err(Error::Phase(format!(
                "parameter `{name}` is matched by both trainable and frozen patterns"
            ))),
        }
    }

    /// Check that every pattern matches some name and that every name is
    /// covered exactly once; returns the frozen flag per name.
    pub fn resolve(&self, names: &[&str]) -> Result<Vec<bool>> {
        for p in self.trainable.iter().chain(&self.frozen) {
            if !names.iter().any(|n| glob_match(p, n)) {
                return Err(Error::UnmatchedPattern(p.clone()));
            }
        }
        names.iter().map(|n| self.is_frozen(n)).collect()
    }
}

/// Set every parameter's frozen flag according to `plan`.
pub fn apply_freeze<T: Scalar>(model: &mut Model<T>, plan: &PhasePlan) -> Result<()> {
    let names: Vec<&str> = model.params.iter().map(|p| p.name.as_str()).collect();
    let flags = plan.resolve(&names)?;
    for (p, frozen) in model.params.iter_mut().zip(flags) {
        p.frozen = frozen;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob_semantics() {
        assert!(glob_match("*", "anything.at.all"));
        assert!(glob_match("blocks.*.attn.*", "blocks.1.attn.qkv.weight"));
        assert!(!glob_match("blocks.*.attn.*", "blocks.1.norm1.gain"));
        assert!(glob_match("loss.w", "loss.w"));
        assert!(!glob_match("loss.w", "loss.w_inc"));
        assert!(glob_match("a*b*c", "aXXbYYc"));
        assert!(!glob_match("a*b*c", "aXXbYY"));
        assert!(glob_match("", ""));
        assert!(!glob_match("", "x"));
    }

    #[test]
    fn coverage_errors() {
        let plan = PhasePlan {
            phase: Phase::Incremental,
            trainable: vec!["a.*".into()],
            frozen: vec!["b.*".into(), "zzz".into()],
            expansion: None,
        };
        assert!(matches!(
            plan.resolve(&["a.x", "b.y"]),
            Err(Error::UnmatchedPattern(p)) if p == "zzz"
        ));
        let plan = PhasePlan {
            frozen: vec!["b.*".into()],
            ..plan
        };
        assert_eq!(plan.resolve(&["a.x", "b.y"]).unwrap(), vec![false, true]);
        assert!(matches!(
            plan.resolve(&["a.x", "b.y", "c"]),
            Err(Error::UncoveredParameter(n)) if n == "c"
        ));
        let overlap = PhasePlan {
            trainable: vec!["*".into()],
            ..plan
        };
        assert!(matches!(overlap.is_frozen("b.y"), Err(Error::Phase(_))));
    }
}
