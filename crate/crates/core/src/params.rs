//! Named, component-tagged parameter tensors and their initializers.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rftensor::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    RfEncoder,
    PoseEstimator,
    SslDecoder,
}

impl Component {
    pub const ALL: [Component; 3] = [
        Component::RfEncoder,
        Component::PoseEstimator,
        Component::SslDecoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::RfEncoder => "rf_encoder",
            Component::PoseEstimator => "pose_estimator",
            Component::SslDecoder => "ssl_decoder",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Component {
    type Err = PoseError;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| PoseError::InvalidInput(format!("unknown component '{s}'")))
    }
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub component: Component,
    pub value: Tensor<T>,
}

/// Parameters in registration order. Registration order is also the
/// checkpoint order and the order gradients are applied in.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, component: Component, value: Tensor<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter '{name}' registered twice"
        );
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            component,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn components(&self) -> Vec<Component> {
        let mut c: Vec<Component> = self.params.iter().map(|p| p.component).collect();
        c.sort();
        c.dedup();
        c
    }

    /// Learnable scalar count per component present in the store.
    pub fn count(&self, component: Component) -> usize {
        self.params
            .iter()
            .filter(|p| p.component == component)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds every parameter to `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bound> {
        self.bind_with(g, true)
    }

    /// Adds every parameter to `g` without gradient tracking.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Result<Bound> {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph<T>, requires_grad: bool) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), requires_grad))
            .collect::<rftensor::Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    component: p.component,
                    value: p.value.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copies values for every parameter of `source` whose component is in
    /// `components`. All shapes are validated before anything is written.
    pub fn load_from(&mut self, source: &ParamStore<T>, components: &[Component]) -> Result<usize> {
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        for p in source
            .params
            .iter()
            .filter(|p| components.contains(&p.component))
        {
            match self.id(&p.name) {
                None => problems.push(format!("{}: not present in the target model", p.name)),
                Some(id) => {
                    let target = &self.params[id.0];
                    if target.value.shape() != p.value.shape() {
                        problems.push(format!(
                            "{}: checkpoint shape {:?}, model shape {:?}",
                            p.name,
                            p.value.shape(),
                            target.value.shape()
                        ));
                    } else {
                        updates.push((id, p.value.clone()));
                    }
                }
            }
        }
        for c in components {
            let expected = self.params.iter().filter(|p| p.component == *c).count();
            let provided = source.params.iter().filter(|p| p.component == *c).count();
            if provided == 0 {
                problems.push(format!("component {c} is missing from the checkpoint"));
            } else if provided != expected && problems.is_empty() {
                problems.push(format!(
                    "component {c}: checkpoint has {provided} tensors, model has {expected}"
                ));
            }
        }
        if !problems.is_empty() {
            return Err(PoseError::WeightMismatch(problems));
        }
        let n = updates.len();
        for (id, value) in updates {
            self.params[id.0].value = value;
        }
        Ok(n)
    }
}

/// Graph variables for a [`ParamStore`], aligned by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables that already hold the store's values, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Normal samples with std `std`, redrawn outside two standard deviations.
pub fn trunc_normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64_lossy(z * std);
        }
    })
}

/// He/Kaiming uniform for ReLU-like fan-in: bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
}
