//! Explicit gradient tape.
//!
//! Every layer call appends one node recording which values (and which
//! parameters) it read. [`Tape::backward`] walks the nodes in exact reverse
//! order and accumulates parameter gradients keyed by [`ParamId`].

use crate::error::{Error, Result};
use crate::head::{weighted_pool, weighted_pool_backward};
use crate::ops::activation::{relu, relu_backward};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::ops::linear::{affine_backward, affine_forward, resize_backward, resize_forward};
use crate::ops::pool::{
    global_avg_pool, global_avg_pool_backward, max_pool2d, max_pool2d_backward, PoolGeometry,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Parameter(format!("duplicate parameter name {name:?}")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Parameter gradients, one slot per parameter of the store they came from.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn set(&mut self, id: ParamId, g: Tensor) {
        self.grads[id.0] = Some(g);
    }

    pub fn accumulate(&mut self, id: ParamId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.grads
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    /// L2 norm over every gradient entry of every parameter.
    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Node {
    Leaf,
    Conv { x: Var, w: ParamId, b: ParamId, g: ConvGeometry },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Gap { x: Var },
    Resize { x: Var },
    WeightedPool { acts: Var, maps: Var },
    SelectRow { x: Var, row: usize },
    MaxRows { x: Var, argmax: Vec<usize> },
    Concat { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Affine { x: Var, w: ParamId, b: ParamId },
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    values: Vec<Tensor>,
    nodes: Vec<Node>,
}

/// Output of [`Tape::backward`].
#[derive(Debug)]
pub struct Backward {
    pub params: Gradients,
    values: Vec<Option<Tensor>>,
    order: Vec<usize>,
}

impl Backward {
    /// Gradient with respect to any recorded value (e.g. an input leaf).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.values[v.0].as_ref()
    }

    /// Node indices in the order the backward pass visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.order
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            values: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, node: Node) -> Var {
        self.values.push(value);
        self.nodes.push(node);
        Var(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Records an input or constant.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Node::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: ParamId, b: ParamId, g: ConvGeometry) -> Result<Var> {
        let y = conv2d_forward(self.value(x), self.params.get(w), self.params.get(b), g)?;
        Ok(self.push(y, Node::Conv { x, w, b, g }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = relu(self.value(x));
        self.push(y, Node::Relu { x })
    }

    pub fn max_pool(&mut self, x: Var, g: PoolGeometry) -> Result<Var> {
        let (y, argmax) = max_pool2d(self.value(x), g)?;
        Ok(self.push(y, Node::MaxPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = global_avg_pool(self.value(x))?;
        Ok(self.push(y, Node::Gap { x }))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = resize_forward(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Node::Resize { x }))
    }

    /// `[N×C×H×W]` activations, `[N×R×H×W]` maps → `[N×R×C]`.
    pub fn weighted_pool(&mut self, acts: Var, maps: Var) -> Result<Var> {
        let y = weighted_pool(self.value(acts), self.value(maps))?;
        Ok(self.push(y, Node::WeightedPool { acts, maps }))
    }

    /// Row `row` of an `[N×R×C]` value, as `[N×C]`.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let [n, r, c] = *self.value(x).shape() else {
            return Err(Error::dim("select_row expects N×R×C"));
        };
        if row >= r {
            return Err(Error::dim(format!("row {row} out of range for {r} rows")));
        }
        let src = self.value(x).data();
        let out: Vec<f64> = (0..n)
            .flat_map(|b| src[(b * r + row) * c..(b * r + row + 1) * c].iter().copied())
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Node::SelectRow { x, row }))
    }

    /// Coordinatewise max over rows `start..end` of an `[N×R×C]` value.
    /// Ties route the gradient to the first row in order.
    pub fn max_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let [n, r, c] = *self.value(x).shape() else {
            return Err(Error::dim("max_rows expects N×R×C"));
        };
        if start >= end || end > r {
            return Err(Error::dim(format!("row range {start}..{end} invalid for {r} rows")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for b in 0..n {
            for j in 0..c {
                let mut best = start;
                for row in start + 1..end {
                    if src[(b * r + row) * c + j] > src[(b * r + best) * c + j] {
                        best = row;
                    }
                }
                out.push(src[(b * r + best) * c + j]);
                argmax.push(best);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Node::MaxRows { x, argmax },
        ))
    }

    /// Concatenation along axis 1 (all other axes must agree).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let shape0 = self.value(*first).shape().to_vec();
        let n = shape0[0];
        let mut width = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != shape0.len() || s[0] != n || s[2..] != shape0[2..] || s.len() < 2 {
                return Err(Error::dim(format!("concat shape mismatch: {s:?} vs {shape0:?}")));
            }
            width += s[1];
        }
        let mut out = Vec::new();
        for b in 0..n {
            for p in parts {
                let t = self.value(*p);
                let block = t.len() / n;
                out.extend_from_slice(&t.data()[b * block..(b + 1) * block]);
            }
        }
        let mut shape = shape0;
        shape[1] = width;
        Ok(self.push(Tensor::from_parts(shape, out), Node::Concat { parts: parts.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim("add shape mismatch"));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Node::Add { a, b }))
    }

    pub fn affine(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let y = affine_forward(self.value(x), self.params.get(w), self.params.get(b))?;
        Ok(self.push(y, Node::Affine { x, w, b }))
    }

    /// Back-propagates `seed` (the gradient of some scalar with respect to
    /// `output`) through every recorded node, newest first.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Backward> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::dim(format!(
                "seed gradient {:?} does not match output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        let mut params = Gradients::empty(self.params.len());
        let mut order = Vec::new();
        grads[output.0] = Some(seed);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            order.push(idx);
            match &self.nodes[idx] {
                Node::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Node::Conv { x, w, b, g: geom } => {
                    let cg = conv2d_backward(self.value(*x), self.params.get(*w), *geom, &g)?;
                    acc(&mut grads, *x, cg.input);
                    params.accumulate(*w, cg.weight);
                    params.accumulate(*b, cg.bias);
                }
                Node::Relu { x } => acc(&mut grads, *x, relu_backward(self.value(*x), &g)),
                Node::MaxPool { x, argmax } => {
                    let dx = max_pool2d_backward(&g, argmax, self.value(*x).shape())?;
                    acc(&mut grads, *x, dx);
                }
                Node::Gap { x } => {
                    let s = self.value(*x).shape();
                    acc(&mut grads, *x, global_avg_pool_backward(&g, s[2], s[3])?);
                }
                Node::Resize { x } => {
                    let s = self.value(*x).shape();
                    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                    acc(&mut grads, *x, resize_backward(&g, h, w)?);
                }
                Node::WeightedPool { acts, maps } => {
                    let (da, dm) = weighted_pool_backward(self.value(*acts), self.value(*maps), &g)?;
                    acc(&mut grads, *acts, da);
                    acc(&mut grads, *maps, dm);
                }
                Node::SelectRow { x, row } => {
                    let [n, r, c] = *self.value(*x).shape() else { unreachable!() };
                    let mut dx = Tensor::zeros(&[n, r, c]);
                    for b in 0..n {
                        dx.data_mut()[(b * r + row) * c..(b * r + row + 1) * c]
                            .copy_from_slice(&g.data()[b * c..(b + 1) * c]);
                    }
                    acc(&mut grads, *x, dx);
                }
                Node::MaxRows { x, argmax, .. } => {
                    let [n, r, c] = *self.value(*x).shape() else { unreachable!() };
                    let mut dx = Tensor::zeros(&[n, r, c]);
                    for b in 0..n {
                        for j in 0..c {
                            let row = argmax[b * c + j];
                            dx.data_mut()[(b * r + row) * c + j] += g.data()[b * c + j];
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Node::Concat { parts } => {
                    let n = g.shape()[0];
                    let block_out = g.len() / n;
                    let mut offset = 0;
                    for p in parts {
                        let t = self.value(*p);
                        let block = t.len() / n;
                        let mut dp = Vec::with_capacity(t.len());
                        for b in 0..n {
                            let s = b * block_out + offset;
                            dp.extend_from_slice(&g.data()[s..s + block]);
                        }
                        acc(&mut grads, *p, Tensor::from_parts(t.shape().to_vec(), dp));
                        offset += block;
                    }
                }
                Node::Add { a, b } => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Node::Affine { x, w, b } => {
                    let (dx, dw, db) = affine_backward(self.value(*x), self.params.get(*w), &g)?;
                    acc(&mut grads, *x, dx);
                    params.accumulate(*w, dw);
                    params.accumulate(*b, db);
                }
            }
        }
        Ok(Backward {
            params,
            values: grads,
            order,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_visits_in_reverse_execution_order() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Tensor::full(&[2, 1, 1, 1], 0.5)).unwrap();
        let b = ps.add("b", Tensor::zeros(&[2])).unwrap();
        let mut tape = Tape::new(&ps);
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let c = tape.conv2d(x, w, b, ConvGeometry::new(1, 1, 0)).unwrap();
        let r = tape.relu(c);
        let p = tape.global_avg_pool(r).unwrap();
        let out = tape.backward(p, Tensor::full(&[1, 2], 1.0)).unwrap();
        assert_eq!(out.visit_order(), &[3, 2, 1, 0]);
        assert_eq!(out.params.get(w).unwrap().shape(), ps.get(w).shape());
        assert_eq!(out.params.get(b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(out.wrt(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn add_and_concat_route_gradients() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let a = tape.leaf(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.add(c, c).unwrap();
        let seed = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = tape.backward(s, seed).unwrap();
        assert_eq!(out.wrt(a).unwrap().data(), &[2.0, 8.0]);
        assert_eq!(out.wrt(b).unwrap().data(), &[4.0, 6.0, 10.0, 12.0]);
    }

    #[test]
    fn max_rows_ties_go_to_first_row() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let x = tape.leaf(Tensor::new(&[1, 3, 2], vec![1.0, 5.0, 1.0, 4.0, 0.0, 5.0]).unwrap());
        let m = tape.max_rows(x, 0, 3).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 5.0]);
        let out = tape.backward(m, Tensor::full(&[1, 2], 1.0)).unwrap();
        assert_eq!(out.wrt(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut ps = ParamStore::new();
        ps.add("a", Tensor::scalar(1.0)).unwrap();
        assert!(ps.add("a", Tensor::scalar(2.0)).is_err());
    }
}
