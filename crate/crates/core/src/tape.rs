//! Reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Calling
//! [`Tape::backward`] walks the records in reverse once; a tape cannot be
//! replayed a second time.

use std::collections::BTreeMap;

use crate::error::{rejected, Error, Result};
use crate::ops;
use crate::params::ParamSet;
use crate::tensor::{squared_distance, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Conv { input: NodeId, kernel: NodeId, bias: NodeId, stride: usize, pad: usize },
    Relu(NodeId),
    MaxPool { input: NodeId, argmax: Vec<usize> },
    Gap(NodeId),
    SqDist(NodeId, NodeId),
    Affine { terms: Vec<(NodeId, f64)> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Parameter name to tape node.
pub type ParamNodes = BTreeMap<String, NodeId>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push(value, Op::Param(name.to_owned()))
    }

    /// Registers every tensor of `params` as a named leaf.
    pub fn params(&mut self, params: &ParamSet) -> ParamNodes {
        params.iter().map(|(name, t)| (name.to_owned(), self.param(name, t.clone()))).collect()
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let v = ops::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), stride, pad)?;
        Ok(self.push(v, Op::Conv { input, kernel, bias, stride, pad }))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let v = ops::relu_forward(self.value(input));
        self.push(v, Op::Relu(input))
    }

    pub fn maxpool(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let p = ops::maxpool2d_forward(self.value(input), window, stride)?;
        Ok(self.push(p.output, Op::MaxPool { input, argmax: p.argmax }))
    }

    pub fn gap(&mut self, input: NodeId) -> Result<NodeId> {
        let v = ops::gap_forward(self.value(input))?;
        Ok(self.push(v, Op::Gap(input)))
    }

    /// Squared Euclidean distance as a one-element tensor.
    pub fn sq_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.value(a).same_shape(self.value(b))?;
        let d = squared_distance(self.value(a).data(), self.value(b).data());
        Ok(self.push(Tensor::from_vec(vec![d]), Op::SqDist(a, b)))
    }

    /// `constant + sum_i coeff_i * node_i` over equally shaped nodes.
    pub fn affine(&mut self, terms: &[(NodeId, f64)], constant: f64) -> Result<NodeId> {
        let (first, _) = *terms.first().ok_or_else(|| rejected("affine combination needs a term"))?;
        let mut acc = Tensor::full(self.value(first).shape(), constant);
        for &(id, c) in terms {
            acc.add_assign(&self.value(id).scale(c))?;
        }
        Ok(self.push(acc, Op::Affine { terms: terms.to_vec() }))
    }

    /// Propagates `seed` (the gradient of the loss with respect to `output`)
    /// back through the tape.
    pub fn backward(&mut self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by a backward pass".into()));
        }
        self.consumed = true;
        self.value(output).same_shape(seed)?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                &Op::Conv { input, kernel, bias, stride, pad } => {
                    let (gx, gk, gb) =
                        ops::conv2d_backward(self.value(input), self.value(kernel), self.value(bias), stride, pad, &g)?;
                    accumulate(&mut grads, input, gx)?;
                    accumulate(&mut grads, kernel, gk)?;
                    accumulate(&mut grads, bias, gb)?;
                }
                &Op::Relu(input) => {
                    let gx = ops::relu_backward(self.value(input), &g)?;
                    accumulate(&mut grads, input, gx)?;
                }
                Op::MaxPool { input, argmax } => {
                    let gx = ops::maxpool2d_backward(self.value(*input).shape(), argmax, &g)?;
                    accumulate(&mut grads, *input, gx)?;
                }
                &Op::Gap(input) => {
                    let gx = ops::gap_backward(self.value(input).shape(), &g)?;
                    accumulate(&mut grads, input, gx)?;
                }
                &Op::SqDist(a, b) => {
                    let s = 2.0 * g.data()[0];
                    let (va, vb) = (self.value(a), self.value(b));
                    let ga: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| s * (x - y)).collect();
                    let gb = ga.iter().map(|v| -v).collect();
                    accumulate(&mut grads, a, Tensor::new(va.shape().to_vec(), ga)?)?;
                    accumulate(&mut grads, b, Tensor::new(vb.shape().to_vec(), gb)?)?;
                }
                Op::Affine { terms } => {
                    for &(id, c) in terms {
                        accumulate(&mut grads, id, g.scale(c))?;
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => {
                    Some((name.clone(), grads[i].clone().unwrap_or_else(|| Tensor::zeros(n.value.shape()))))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Output of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any recorded node; `None` if it does not influence the output.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter leaf, keyed by parameter name.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_backward_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.relu(x);
        tape.backward(y, &Tensor::from_vec(vec![1.0, 1.0])).unwrap();
        assert!(matches!(tape.backward(y, &Tensor::from_vec(vec![1.0, 1.0])), Err(Error::Usage(_))));
    }

    #[test]
    fn gap_gradient_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap());
        let f = tape.gap(x).unwrap();
        let g = tape.backward(f, &Tensor::from_vec(vec![1.0])).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 1.0 / 9.0));
    }

    #[test]
    fn relu_gradient_zero_for_negative_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-2.0, 0.0, 3.0]));
        let y = tape.relu(x);
        let g = tape.backward(y, &Tensor::from_vec(vec![1.0; 3])).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_routes_to_argmax_only() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, 5.0, 2.0]).unwrap());
        let y = tape.maxpool(x, 2, 2).unwrap();
        let g = tape.backward(y, &Tensor::from_vec(vec![3.0]).reshape(vec![1, 1, 1]).unwrap()).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let d = tape.sq_distance(a, b).unwrap();
        let s = tape.affine(&[(d, 2.0), (d, 1.0)], 0.5).unwrap();
        assert_eq!(tape.value(s).data(), &[15.5]);
        let g = tape.backward(s, &Tensor::from_vec(vec![1.0])).unwrap();
        // d(3*|a-b|^2)/da = 6(a-b)
        assert_eq!(g.wrt(a).unwrap().data(), &[6.0, 12.0]);
        assert_eq!(g.wrt(b).unwrap().data(), &[-6.0, -12.0]);
    }
}
