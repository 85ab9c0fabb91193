//! Named parameter storage and the layer helpers shared by the backbone and
//! the visibility head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

/// Parameters keyed by stable names, addressed by slot id in graphs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &mut Graph, id: usize) -> Var {
        g.param(id, &self.tensors[id])
    }
}

/// Uniform Kaiming initialization: `U(−b, b)` with `b = gain·√(3 / fan_in)`.
pub fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).unwrap()
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Convolution parameter slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let w = store.add(format!("{name}.w"), kaiming(rng, &[cout, cin, k, k], cin * k * k, gain));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn apply(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Var {
        let w = store.bind(g, self.w);
        let b = store.bind(g, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Pre-activation residual block: `x + conv(relu(conv(relu(x))))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Residual {
    pub a: Conv,
    pub b: Conv,
}

impl Residual {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        Self {
            a: Conv::new(store, rng, &format!("{name}.a"), c, c, 3, 1, RELU_GAIN),
            // Half-gain second conv keeps stacked residual sums from blowing up.
            b: Conv::new(store, rng, &format!("{name}.b"), c, c, 3, 1, RELU_GAIN * 0.5),
        }
    }

    pub fn apply(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Var {
        let h = g.relu(x);
        let h = self.a.apply(store, g, h);
        let h = g.relu(h);
        let h = self.b.apply(store, g, h);
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kaiming_bounds_and_determinism() {
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let a = kaiming(&mut r1, &[4, 3, 3, 3], 27, RELU_GAIN);
        let b = kaiming(&mut r2, &[4, 3, 3, 3], 27, RELU_GAIN);
        assert_eq!(a, b);
        let bound = RELU_GAIN * (3.0f64 / 27.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn store_names_are_unique_and_addressable() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::zeros(&[2]));
        assert_eq!(s.id("x"), Some(id));
        assert_eq!(s.count(), 2);
        let res = std::panic::catch_unwind(move || {
            let mut s = s;
            s.add("x", Tensor::zeros(&[1]));
        });
        assert!(res.is_err());
    }
}
