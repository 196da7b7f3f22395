use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::tensor::{finite_diff_check, Float, GradCheckReport, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    lookup: HashMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::ShapeMismatch {
                op: "set parameter",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.values
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }
}

/// A tape plus lazily bound model parameters.
///
/// Each parameter enters the tape as a leaf the first time a layer asks for
/// it, so parameters a forward pass never touches never appear on the tape.
pub struct Graph<'p, F: Float> {
    tape: Tape<F>,
    params: &'p ParamStore<F>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p, F: Float> Graph<'p, F> {
    /// Parameters become gradient-tracking leaves.
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            trainable: true,
        }
    }

    /// Parameters become constants; for inference and analysis.
    pub fn frozen(params: &'p ParamStore<F>) -> Self {
        Graph {
            trainable: false,
            ..Self::new(params)
        }
    }

    /// Uses already-recorded leaves `vars[i]` for parameter `i`.
    pub fn with_bound(tape: Tape<F>, params: &'p ParamStore<F>, vars: &[Var]) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        Ok(Graph {
            tape,
            params,
            bound: vars.iter().copied().map(Some).collect(),
            trainable: true,
        })
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn into_tape(self) -> Tape<F> {
        self.tape
    }

    /// Gradients of every bound parameter after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<F>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad_tensor(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

impl<F: Float> Deref for Graph<'_, F> {
    type Target = Tape<F>;
    fn deref(&self) -> &Tape<F> {
        &self.tape
    }
}

impl<F: Float> DerefMut for Graph<'_, F> {
    fn deref_mut(&mut self) -> &mut Tape<F> {
        &mut self.tape
    }
}

/// Finite-difference check of `f` with respect to every parameter in `store`.
pub fn check_param_gradients<Fun>(store: &ParamStore<f64>, eps: f64, mut f: Fun) -> Result<GradCheckReport>
where
    Fun: FnMut(&mut Graph<f64>) -> Result<Var>,
{
    finite_diff_check(
        |tape, vars| {
            let mut g = Graph::with_bound(std::mem::take(tape), store, vars)?;
            let out = f(&mut g);
            *tape = g.into_tape();
            out
        },
        store.tensors(),
        eps,
    )
}
