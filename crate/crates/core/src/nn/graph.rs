//! Execution backends. Model code is written once against [`Backend`]; the
//! [`Eval`] backend runs it directly and the [`Tape`] backend records it for
//! reverse-mode differentiation.

use std::collections::HashMap;

use super::ops::Op;
use super::weights::{ModelWeights, ParamDecl, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub trait Backend {
    type T: Clone;

    /// Looks up a named parameter and checks its shape.
    fn param(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Self::T>;
    fn constant(&mut self, x: DenseTensor) -> Self::T;
    fn apply(&mut self, op: Op, inputs: &[&Self::T]) -> Result<Self::T>;
    fn shape<'a>(&'a self, t: &'a Self::T) -> &'a [usize];
}

fn fetch<'w>(weights: &'w ModelWeights, name: &str, shape: &[usize]) -> Result<&'w DenseTensor> {
    let t = weights
        .get(name)
        .ok_or_else(|| Error::Weight(format!("missing parameter {name}")))?;
    if t.shape() != shape {
        return Err(Error::Weight(format!(
            "parameter {name} has shape {:?}, model expects {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}

/// Direct evaluation.
pub struct Eval<'w> {
    weights: &'w ModelWeights,
}

impl<'w> Eval<'w> {
    pub fn new(weights: &'w ModelWeights) -> Self {
        Self { weights }
    }
}

impl Backend for Eval<'_> {
    type T = DenseTensor;

    fn param(&mut self, name: &str, shape: &[usize], _: ParamKind) -> Result<DenseTensor> {
        fetch(self.weights, name, shape).cloned()
    }

    fn constant(&mut self, x: DenseTensor) -> DenseTensor {
        x
    }

    fn apply(&mut self, op: Op, inputs: &[&DenseTensor]) -> Result<DenseTensor> {
        op.forward(inputs)
    }

    fn shape<'a>(&'a self, t: &'a DenseTensor) -> &'a [usize] {
        t.shape()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    op: Option<Op>,
    inputs: Vec<usize>,
    value: DenseTensor,
}

/// Records every operation so that gradients can be pulled back from a
/// scalar output to the parameters.
pub struct Tape<'w> {
    weights: &'w ModelWeights,
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
}

impl<'w> Tape<'w> {
    pub fn new(weights: &'w ModelWeights) -> Self {
        Self {
            weights,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, op: Option<Op>, inputs: Vec<usize>, value: DenseTensor) -> Var {
        self.nodes.push(Node { op, inputs, value });
        Var(self.nodes.len() - 1)
    }

    /// Names of the parameters touched so far.
    pub fn used_params(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.params.keys().map(String::as_str).collect();
        names.sort_unstable();
        names
    }

    /// Gradients of the scalar `out` with respect to every parameter used.
    /// Parameters that do not influence `out` get a zero gradient.
    pub fn backward(self, out: Var) -> Result<HashMap<String, DenseTensor>> {
        if self.nodes[out.0].value.len() != 1 {
            return Err(Error::Dimension("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<DenseTensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[out.0] = Some(DenseTensor::full(self.nodes[out.0].value.shape(), 1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&DenseTensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let pulled = op.backward(&inputs, &node.value, &g)?;
            for (&j, dj) in node.inputs.iter().zip(pulled) {
                let Some(dj) = dj else { continue };
                grads[j] = Some(match grads[j].take() {
                    Some(acc) => acc.add(&dj)?,
                    None => dj,
                });
            }
        }
        Ok(self
            .params
            .into_iter()
            .map(|(name, idx)| {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| DenseTensor::zeros(self.nodes[idx].value.shape()));
                (name, g)
            })
            .collect())
    }
}

impl Backend for Tape<'_> {
    type T = Var;

    fn param(&mut self, name: &str, shape: &[usize], _: ParamKind) -> Result<Var> {
        if let Some(&idx) = self.params.get(name) {
            return Ok(Var(idx));
        }
        let value = fetch(self.weights, name, shape)?.clone();
        let v = self.push(None, Vec::new(), value);
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    fn constant(&mut self, x: DenseTensor) -> Var {
        self.push(None, Vec::new(), x)
    }

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var> {
        let values: Vec<&DenseTensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = op.forward(&values)?;
        Ok(self.push(Some(op), inputs.iter().map(|v| v.0).collect(), out))
    }

    fn shape<'a>(&'a self, t: &'a Var) -> &'a [usize] {
        self.nodes[t.0].value.shape()
    }
}

impl Tape<'_> {
    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }
}

/// Shape-only execution that records the parameters a model asks for.
#[derive(Default)]
pub struct Declare {
    decls: Vec<ParamDecl>,
}

impl Declare {
    pub fn into_decls(self) -> Vec<ParamDecl> {
        self.decls
    }
}

impl Backend for Declare {
    type T = Vec<usize>;

    fn param(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Vec<usize>> {
        match self.decls.iter().find(|d| d.name == name) {
            Some(d) if d.shape != shape => {
                return Err(Error::Weight(format!("parameter {name} requested with two shapes")))
            }
            Some(_) => {}
            None => self.decls.push(ParamDecl::new(name, shape, kind)),
        }
        Ok(shape.to_vec())
    }

    fn constant(&mut self, x: DenseTensor) -> Vec<usize> {
        x.shape().to_vec()
    }

    fn apply(&mut self, op: Op, inputs: &[&Vec<usize>]) -> Result<Vec<usize>> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|s| s.as_slice()).collect();
        op.output_shape(&shapes)
    }

    fn shape<'a>(&'a self, t: &'a Vec<usize>) -> &'a [usize] {
        t
    }
}
