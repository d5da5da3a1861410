//! Causal interventions applied inside the forward pass.
//!
//! Two kinds exist. [`InterventionSpec::ZeroAblate`] zeroes the post-gate
//! activation of named neurons before the output projection.
//! [`InterventionSpec::SinkPatch`] rewrites a sink neuron's up-projection
//! output (`Win·x`, before the SiLU gate product): during prefill the value
//! at `reference_position` is stored and copied over every later position,
//! and each decode step receives the stored value. Position 0 is never
//! written, so the true BoS sink survives.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelError, Result};
use crate::numkit::Scalar;

/// Default reference slot: the first token after BoS.
pub const DEFAULT_REFERENCE_POSITION: usize = 1;

fn default_reference_position() -> usize {
    DEFAULT_REFERENCE_POSITION
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InterventionSpec {
    ZeroAblate {
        layer: usize,
        neurons: BTreeSet<usize>,
    },
    SinkPatch {
        layer: usize,
        neuron: usize,
        #[serde(default = "default_reference_position")]
        reference_position: usize,
    },
}

impl InterventionSpec {
    pub fn zero_ablate(layer: usize, neurons: impl IntoIterator<Item = usize>) -> Self {
        Self::ZeroAblate {
            layer,
            neurons: neurons.into_iter().collect(),
        }
    }

    pub fn sink_patch(layer: usize, neuron: usize) -> Self {
        Self::SinkPatch {
            layer,
            neuron,
            reference_position: DEFAULT_REFERENCE_POSITION,
        }
    }

    pub fn layer(&self) -> usize {
        match self {
            Self::ZeroAblate { layer, .. } | Self::SinkPatch { layer, .. } => *layer,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let layer = self.layer();
        if layer >= cfg.n_layers {
            return Err(ModelError::Argument(format!(
                "intervention targets layer {layer} of a {}-layer model",
                cfg.n_layers
            )));
        }
        match self {
            Self::ZeroAblate { neurons, .. } => {
                if let Some(n) = neurons.iter().find(|&&n| n >= cfg.d_ff) {
                    return Err(ModelError::Argument(format!(
                        "neuron {n} outside d_ff {}",
                        cfg.d_ff
                    )));
                }
            }
            Self::SinkPatch {
                neuron,
                reference_position,
                ..
            } => {
                if *neuron >= cfg.d_ff {
                    return Err(ModelError::Argument(format!(
                        "sink neuron {neuron} outside d_ff {}",
                        cfg.d_ff
                    )));
                }
                if *reference_position == 0 {
                    return Err(ModelError::Argument(
                        "reference_position must be >= 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

/// The "no-sink" up-projection value captured during prefill.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PatchState<T> {
    pub stored_value: Option<T>,
}

/// Zeroes the listed neurons' post-gate activations at every position.
///
/// `acts` holds one `d_ff` vector per position of the layer the spec targets.
pub fn apply_zero_ablation<T: Scalar>(spec: &InterventionSpec, acts: &mut [Vec<T>]) {
    if let InterventionSpec::ZeroAblate { neurons, .. } = spec {
        for row in acts.iter_mut() {
            for &n in neurons {
                row[n] = T::zero();
            }
        }
    }
}

/// Rewrites the sink neuron's up-projection values.
///
/// In prefill `up` covers the whole sequence (position `p` at index `p`).
/// In decode it holds the single new position.
pub fn apply_sink_patch<T: Scalar>(
    spec: &InterventionSpec,
    phase: Phase,
    up: &mut [Vec<T>],
    state: &mut PatchState<T>,
) -> Result<()> {
    let InterventionSpec::SinkPatch {
        neuron,
        reference_position,
        ..
    } = spec
    else {
        return Ok(());
    };
    match phase {
        Phase::Prefill => {
            if up.len() <= *reference_position {
                return Err(ModelError::Argument(format!(
                    "sink patch needs more than {reference_position} prefill positions, got {}",
                    up.len()
                )));
            }
            let stored = up[*reference_position][*neuron];
            state.stored_value = Some(stored);
            for row in &mut up[*reference_position..] {
                row[*neuron] = stored;
            }
        }
        Phase::Decode => {
            let stored = state
                .stored_value
                .ok_or_else(|| ModelError::State("sink patch decode before prefill".into()))?;
            for row in up.iter_mut() {
                row[*neuron] = stored;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_forms() {
        let z: InterventionSpec =
            serde_json::from_str(r#"{"type":"zero_ablate","layer":1,"neurons":[7890,10411]}"#)
                .unwrap();
        assert_eq!(z, InterventionSpec::zero_ablate(1, [7890, 10411]));
        let p: InterventionSpec =
            serde_json::from_str(r#"{"type":"sink_patch","layer":1,"neuron":7890}"#).unwrap();
        assert_eq!(p, InterventionSpec::sink_patch(1, 7890));
        assert!(serde_json::from_str::<InterventionSpec>(r#"{"type":"resample","layer":1}"#).is_err());
    }

    #[test]
    fn zero_ablation_touches_only_listed_neurons() {
        let mut acts = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        apply_zero_ablation(&InterventionSpec::zero_ablate(0, [1]), &mut acts);
        assert_eq!(acts, vec![vec![1.0, 0.0, 3.0], vec![4.0, 0.0, 6.0]]);
    }

    #[test]
    fn sink_patch_prefill_then_decode() {
        let spec = InterventionSpec::sink_patch(0, 1);
        let mut state = PatchState::default();
        let mut up = vec![vec![9.0, 9.0], vec![0.0, -2.0], vec![0.0, 5.0], vec![0.0, 7.0]];
        apply_sink_patch(&spec, Phase::Prefill, &mut up, &mut state).unwrap();
        assert_eq!(state.stored_value, Some(-2.0));
        assert_eq!(up[0], vec![9.0, 9.0]);
        assert!(up[1..].iter().all(|r| r[1] == -2.0));
        let mut step = vec![vec![3.0, 40.0]];
        apply_sink_patch(&spec, Phase::Decode, &mut step, &mut state).unwrap();
        assert_eq!(step, vec![vec![3.0, -2.0]]);
    }

    #[test]
    fn sink_patch_errors() {
        let spec = InterventionSpec::sink_patch(0, 0);
        let mut state = PatchState::<f64>::default();
        let mut step = vec![vec![1.0]];
        assert!(matches!(
            apply_sink_patch(&spec, Phase::Decode, &mut step, &mut state),
            Err(ModelError::State(_))
        ));
        let mut short = vec![vec![1.0]];
        assert!(matches!(
            apply_sink_patch(&spec, Phase::Prefill, &mut short, &mut state),
            Err(ModelError::Argument(_))
        ));
    }

    #[test]
    fn listing_defaults() {
        // sink_layer = 1, sink_neuron = 7890 in the reference patch.
        let spec = InterventionSpec::sink_patch(1, 7890);
        let InterventionSpec::SinkPatch { layer, neuron, reference_position } = spec else {
            unreachable!()
        };
        assert_eq!((layer, neuron, reference_position), (1, 7890, 1));
    }
}
