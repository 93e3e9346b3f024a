//! Parameter bookkeeping shared by the backbone, heads, optimizer,
//! checkpointing and gradient checking: named flat parameter views grouped
//! into freezable families, and a name-keyed gradient accumulator.

use std::collections::BTreeMap;

/// Families a parameter can belong to. Freeze policies operate on these
/// names, so training code never has to know individual tensor names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Patch embed, class token, positional embeddings, block LN/attention/MLP
    /// weights and the final layer norm.
    Backbone,
    /// Bottleneck adapters inserted into each block.
    Adapters,
    /// Transposed-convolution local feature head.
    LocalHead,
    /// The GeM pooling exponent.
    Gem,
}

impl ParamGroup {
    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Adapters => "adapters",
            ParamGroup::LocalHead => "local_head",
            ParamGroup::Gem => "gem",
        }
    }
}

/// Gradient accumulator keyed by parameter name. BTreeMap keeps iteration
/// order deterministic, which keeps optimizer updates and serialized
/// diagnostics reproducible run to run.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Gradients {
        Gradients::default()
    }

    /// Accumulates `values` into the gradient for `name`, creating it on
    /// first use.
    pub fn add(&mut self, name: &str, values: &[f64]) {
        match self.map.get_mut(name) {
            Some(g) => {
                debug_assert_eq!(g.len(), values.len(), "gradient size changed for {}", name);
                for (a, b) in g.iter_mut().zip(values) {
                    *a += *b;
                }
            }
            None => {
                self.map.insert(name.to_string(), values.to_vec());
            }
        }
    }

    pub fn add_scalar(&mut self, name: &str, value: f64) {
        self.add(name, &[value]);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.map.values_mut() {
            for x in v {
                *x *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }
}
