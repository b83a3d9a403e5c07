//! Parameter storage and the two layer types the model is built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::graph::{Graph, GruVars, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalars.
    pub fn size(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get_named(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Replace tensors by name; every stored name must be present with the
    /// stored shape.
    pub fn assign(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return dim_err(
                "assign",
                format!("expected {} tensors, got {}", self.tensors.len(), named.len()),
            );
        }
        for (name, t) in named {
            let Some(i) = self.position(&name) else {
                return dim_err("assign", format!("unknown parameter {}", name));
            };
            if t.shape() != self.tensors[i].shape() {
                return dim_err(
                    "assign",
                    format!("{}: {:?} vs {:?}", name, t.shape(), self.tensors[i].shape()),
                );
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Copy every tensor onto `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }
}

/// Graph variables of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Uniform in `±√(6/(fan_in+fan_out))`.
pub fn xavier<T: Real>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::of_f64(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

/// Fully connected layer `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{}.weight", name), xavier(inputs, outputs, rng));
        let b = store.add(format!("{}.bias", name), Tensor::zeros(&[outputs]));
        Self {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.affine(x, p.var(self.w), p.var(self.b))
    }
}

/// Weights of a gated recurrent cell with input size `D` and hidden size `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<T: Real> {
    pub w_z: Tensor<T>,
    pub w_r: Tensor<T>,
    pub w_n: Tensor<T>,
    pub u_z: Tensor<T>,
    pub u_r: Tensor<T>,
    pub u_n: Tensor<T>,
    pub b_z: Tensor<T>,
    pub b_r: Tensor<T>,
    pub b_n: Tensor<T>,
}

const GRU_PARTS: [&str; 9] = ["w_z", "w_r", "w_n", "u_z", "u_r", "u_n", "b_z", "b_r", "b_n"];

impl<T: Real> GruParams<T> {
    pub fn zeros(d: usize, h: usize) -> Self {
        Self {
            w_z: Tensor::zeros(&[d, h]),
            w_r: Tensor::zeros(&[d, h]),
            w_n: Tensor::zeros(&[d, h]),
            u_z: Tensor::zeros(&[h, h]),
            u_r: Tensor::zeros(&[h, h]),
            u_n: Tensor::zeros(&[h, h]),
            b_z: Tensor::zeros(&[h]),
            b_r: Tensor::zeros(&[h]),
            b_n: Tensor::zeros(&[h]),
        }
    }

    pub fn init(d: usize, h: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w_z: xavier(d, h, rng),
            w_r: xavier(d, h, rng),
            w_n: xavier(d, h, rng),
            u_z: xavier(h, h, rng),
            u_r: xavier(h, h, rng),
            u_n: xavier(h, h, rng),
            ..Self::zeros(d, h)
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.b_z.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = match self.w_z.shape() {
            &[d, h] => (d, h),
            s => return dim_err("gru params", format!("w_z shape {:?}", s)),
        };
        let ok = [&self.w_z, &self.w_r, &self.w_n].iter().all(|t| t.shape() == [d, h])
            && [&self.u_z, &self.u_r, &self.u_n].iter().all(|t| t.shape() == [h, h])
            && [&self.b_z, &self.b_r, &self.b_n].iter().all(|t| t.shape() == [h]);
        if !ok {
            return dim_err("gru params", format!("inconsistent shapes for D={} H={}", d, h));
        }
        Ok(())
    }

    fn parts(self) -> [Tensor<T>; 9] {
        [
            self.w_z, self.w_r, self.w_n, self.u_z, self.u_r, self.u_n, self.b_z, self.b_r,
            self.b_n,
        ]
    }

    /// Load onto a graph as trainable leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> GruVars {
        let [w_z, w_r, w_n, u_z, u_r, u_n, b_z, b_r, b_n] = self.clone().parts().map(|t| g.param(t));
        GruVars {
            w_z,
            w_r,
            w_n,
            u_z,
            u_r,
            u_n,
            b_z,
            b_r,
            b_n,
        }
    }
}

/// A gated recurrent cell whose weights live in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct GruLayer {
    ids: [ParamId; 9],
    pub inputs: usize,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let parts = GruParams::<T>::init(inputs, hidden, rng).parts();
        let mut ids = [ParamId(0); 9];
        for ((slot, t), part) in ids.iter_mut().zip(parts).zip(GRU_PARTS) {
            *slot = store.add(format!("{}.{}", name, part), t);
        }
        Self {
            ids,
            inputs,
            hidden,
        }
    }

    pub fn vars(&self, p: &Bound) -> GruVars {
        let [w_z, w_r, w_n, u_z, u_r, u_n, b_z, b_r, b_n] = self.ids.map(|id| p.var(id));
        GruVars {
            w_z,
            w_r,
            w_n,
            u_z,
            u_r,
            u_n,
            b_z,
            b_r,
            b_n,
        }
    }

    pub fn step<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, h: Var) -> Result<Var> {
        g.gru_cell(x, h, &self.vars(p))
    }
}
