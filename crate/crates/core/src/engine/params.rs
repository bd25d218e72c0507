use serde::{Deserialize, Serialize};

/// A named, shaped block of scalars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of parameter (or gradient) blocks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub blocks: Vec<ParamBlock>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.blocks.push(ParamBlock {
            name: name.into(),
            shape,
            data,
        });
        self.blocks.len() - 1
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    data: vec![0.0; b.data.len()],
                })
                .collect(),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &ParamStore) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            b.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// All values concatenated in block order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.data.iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for b in &mut self.blocks {
            let n = b.data.len();
            b.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        debug_assert_eq!(off, flat.len());
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

/// Gradients share the parameter layout.
pub type Gradients = ParamStore;
