use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Fcn,
    Se,
    Va,
    Ta,
    Sigma,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Fcn,
        ParamGroup::Se,
        ParamGroup::Va,
        ParamGroup::Ta,
        ParamGroup::Sigma,
        ParamGroup::Classifier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Fcn => "fcn",
            ParamGroup::Se => "se",
            ParamGroup::Va => "va",
            ParamGroup::Ta => "ta",
            ParamGroup::Sigma => "sigma",
            ParamGroup::Classifier => "classifier",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup, decay: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Model(format!("parameter {name} registered twice")));
        }
        self.entries.insert(name, Param { value, group, decay });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), g.param(p.value.clone())))
                .collect(),
        }
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    /// Panics when `name` was never registered; names are fixed by the
    /// architecture so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut s = ParamStore::new();
        s.register("a", Tensor::zeros([1]), ParamGroup::Fcn, true).unwrap();
        assert!(s.register("a", Tensor::zeros([1]), ParamGroup::Fcn, true).is_err());
        assert_eq!(s.len(), 1);
    }
}
