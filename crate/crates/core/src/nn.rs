//! Dense building blocks shared by every network stage.

use rand::Rng;

use crate::autograd::{init_he, init_uniform, ParamId, ParamStore, Tape, Var};
use crate::tensor::Mat;

/// `y = x·W + b`
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init_he(rng, in_dim, out_dim, in_dim));
        let bias = store.add(format!("{name}.bias"), init_uniform(rng, 1, out_dim, in_dim));
        Self { weight, bias, in_dim, out_dim }
    }

    /// A layer that starts at exactly zero output.
    pub fn zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Mat::zeros(in_dim, out_dim));
        let bias = store.add(format!("{name}.bias"), Mat::zeros(1, out_dim));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for id in [self.weight, self.bias] {
            store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Per-point MLP with ReLU between layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Apply ReLU after the last layer as well (PointNet-style feature MLPs).
    pub final_relu: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LastLayer {
    Random,
    Zero,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dims: &[usize],
        final_relu: bool,
        last: LastLayer,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if i + 1 == n && last == LastLayer::Zero {
                    Linear::zeroed(store, &lname, dims[i], dims[i + 1])
                } else {
                    Linear::new(store, rng, &lname, dims[i], dims[i + 1])
                }
            })
            .collect();
        Self { layers, final_relu }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i + 1 < n || self.final_relu {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeroed_last_layer_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, &mut rng, "m", &[3, 8, 4], false, LastLayer::Zero);
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 2.0]]));
        let y = mlp.forward(&mut tape, &store, x);
        assert_eq!(tape.value(y), &Mat::zeros(2, 4));
        assert_eq!(mlp.out_dim(), 4);
        assert_eq!(store.len(), 4);
    }
}
