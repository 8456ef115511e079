use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::tensor::{ParamSet, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Local gradient rule for one recorded operation.
///
/// `backward` receives the upstream gradient, the input values, the output
/// value, and a mask saying which inputs actually need a gradient; it returns
/// one optional gradient per input (None where not needed).
pub trait GradFn {
    fn backward(
        &self,
        out_grad: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    grad_fn: Option<Box<dyn GradFn>>,
}

/// Record of a forward computation, replayable in reverse for gradients.
///
/// Nodes are appended in execution order, so the arena is already
/// topologically sorted; `backward` walks it once from the loss node down.
/// Constants and every node derived only from constants carry no gradient
/// machinery, which is what lets the teacher branch run "off-tape" through
/// the same forward code as the student.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            grad_fn: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Re-enter `v`'s value as a leaf so no gradient flows past it.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_leaf(value, false)
    }

    /// Record an operation result. Rejects non-finite outputs: every forward
    /// value on the tape is finite by construction.
    ///
    /// Public so that modules outside `numeric` can register composite
    /// operations with hand-derived gradients.
    pub fn push_op(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        grad_fn: Box<dyn GradFn>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(
                "operation produced NaN or Inf".to_string(),
            ));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            // grad_fn is dead weight on a constant subgraph; drop it.
            grad_fn: if requires_grad { Some(grad_fn) } else { None },
            parents,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Every tape node reachable from `loss` gets its gradient; query them
    /// through the returned [`Gradients`]. Unreachable or non-trainable
    /// nodes read back as zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_val = &self.nodes[loss.0].value;
        if loss_val.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(loss_val.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.grad_fn.is_none() {
                continue;
            }
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            let grad_fn = node.grad_fn.as_ref().unwrap();
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let contribs = grad_fn.backward(&out_grad, &inputs, &node.value, &needs);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (parent, contrib) in node.parents.iter().zip(contribs) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                let Some(c) = contrib else { continue };
                debug_assert_eq!(c.shape(), self.nodes[parent.0].value.shape());
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
            grads[id] = Some(out_grad);
        }
        Ok(Gradients { by_node: grads })
    }

    /// Register every tensor of a [`ParamSet`] on the tape.
    pub fn register_params(&mut self, params: &ParamSet, trainable: bool) -> ParamVars {
        let mut vars = BTreeMap::new();
        for (name, tensor) in params.iter() {
            let v = if trainable {
                self.param(tensor.clone())
            } else {
                self.constant(tensor.clone())
            };
            vars.insert(name.to_string(), v);
        }
        ParamVars { vars }
    }
}

/// Result of a backward sweep, indexed by tape node.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, densified to zeros when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Tape handles for a registered [`ParamSet`], keyed by parameter name.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("no registered parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Densify a backward sweep into gradients keyed like the parameter set.
/// Parameters the loss never touched come back as zeros.
pub fn collect_param_grads(
    grads: &Gradients,
    vars: &ParamVars,
    params: &ParamSet,
) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, tensor) in params.iter() {
        let v = vars.get(name)?;
        out.insert(name, grads.get_or_zeros(v, tensor.shape()))?;
    }
    Ok(out)
}
