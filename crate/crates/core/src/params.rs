//! Named parameter storage shared by the encoder and the heads.

use std::ops::Index;

use rand::Rng;

use crate::tape::{Graph, Mat, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    /// Hierarchical path such as `encoder/layer0/erla/w_q`.
    pub name: String,
    pub value: Mat,
    /// Whether decoupled weight decay applies (weight matrices only).
    pub decay: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    /// Xavier-uniform weight matrix, decayed.
    pub fn weight(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let value = Mat::from_shape_simple_fn((rows, cols), || rng.gen_range(-a..=a));
        self.add(name, value, true)
    }

    /// `1 × cols` row filled with `fill`, not decayed.
    pub fn row(&mut self, name: impl Into<String>, cols: usize, fill: f64) -> ParamId {
        self.add(name, Mat::from_elem((1, cols), fill), false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Copies every parameter into `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            nodes: self.entries.iter().map(|e| g.param(e.value.clone())).collect(),
        }
    }
}

/// Graph nodes for the parameters of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

impl Index<ParamId> for Bound {
    type Output = NodeId;

    fn index(&self, id: ParamId) -> &NodeId {
        &self.nodes[id.0]
    }
}
