//! Parameter storage, initializers, and the Adam optimizer.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::fill_normal;
use crate::tape::{Real, Tape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter tensors, shared across per-sample tapes via `Arc`.
pub struct ParamStore<F: Real> {
    names: Vec<String>,
    values: Vec<Arc<Array2<F>>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Array2<F>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.index.insert(name.to_string(), self.values.len() - 1);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Arc<Array2<F>> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, value: Array2<F>) {
        self.values[id.0] = Arc::new(value);
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Array2<F>>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }
}

impl ParamStore<f32> {
    pub fn to_records(&self) -> Vec<crate::container::Record> {
        let mut recs: Vec<_> = self
            .iter()
            .map(|(name, v)| crate::container::Record::f32(name, (**v).clone()))
            .collect();
        recs.sort_by(|a, b| a.name.cmp(&b.name));
        recs
    }

    /// Replace all parameter values from container records; shapes must match.
    pub fn load_records(&mut self, records: &[crate::container::Record]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let rec = crate::container::find(records, name)?;
            let arr = rec.data.as_f32()?;
            let cur = self.values[i].dim();
            let got = arr.shape();
            if got != [cur.0, cur.1] {
                return Err(Error::Format(format!(
                    "parameter {name}: checkpoint shape {got:?} != model shape {cur:?}"
                )));
            }
            let arr2 = arr
                .to_owned()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::Format(e.to_string()))?;
            self.values[i] = Arc::new(arr2);
        }
        Ok(())
    }
}

/// One forward pass: a tape plus lazy bindings of store parameters.
pub struct Graph<'s, F: Real> {
    pub tape: Tape<F>,
    store: &'s ParamStore<F>,
    bound: Vec<Option<TensorId>>,
}

impl<'s, F: Real> Graph<'s, F> {
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Graph { tape: Tape::new(), store, bound: vec![None; store.len()] }
    }

    /// Bind a parameter onto this tape (idempotent per graph).
    pub fn p(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let t = self.tape.param(Arc::clone(self.store.value(id)));
        self.bound[id.0] = Some(t);
        t
    }

    /// Backward pass; gradients re-indexed by parameter id.
    pub fn grads(&mut self, loss: TensorId) -> Vec<Option<Array2<F>>> {
        let node_grads = self.tape.backward(loss);
        let mut out: Vec<Option<Array2<F>>> = (0..self.store.len()).map(|_| None).collect();
        for (pid, tid) in self.bound.iter().enumerate() {
            if let Some(tid) = tid {
                out[pid] = node_grads[tid.0].clone();
            }
        }
        out
    }
}

/// Linear layer: weight (in, out) and optional bias (1, out).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn apply<F: Real>(&self, g: &mut Graph<F>, x: TensorId) -> TensorId {
        let w = g.p(self.w);
        let y = g.tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.p(b);
                g.tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Register a linear layer with orthogonal weight init and zero bias.
pub fn linear<F: Real>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
    gain: f64,
) -> Linear {
    let w = store.add(&format!("{name}.w"), orthogonal(rng, d_in, d_out, gain));
    let b = store.add(&format!("{name}.b"), Array2::zeros((1, d_out)));
    Linear { w, b: Some(b) }
}

/// Register a zero-initialized linear layer (residual heads, gates).
pub fn linear_zero<F: Real>(
    store: &mut ParamStore<F>,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> Linear {
    let w = store.add(&format!("{name}.w"), Array2::zeros((d_in, d_out)));
    let b = store.add(&format!("{name}.b"), Array2::zeros((1, d_out)));
    Linear { w, b: Some(b) }
}

/// Semi-orthogonal matrix of shape (rows, cols): the smaller dimension is an
/// orthonormal frame. Modified Gram-Schmidt on a seeded Gaussian draw.
pub fn orthogonal<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Array2<F> {
    let transpose = rows < cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    // n >= m; orthonormalize m columns of length n
    let mut a = Array2::<f64>::zeros((n, m));
    fill_normal(rng, a.as_slice_mut().unwrap());
    for j in 0..m {
        for k in 0..j {
            let dot: f64 = (0..n).map(|i| a[[i, j]] * a[[i, k]]).sum();
            for i in 0..n {
                a[[i, j]] -= dot * a[[i, k]];
            }
        }
        let norm: f64 = (0..n).map(|i| a[[i, j]] * a[[i, j]]).sum::<f64>().sqrt();
        let inv = if norm > 1e-12 { 1.0 / norm } else { 0.0 };
        for i in 0..n {
            a[[i, j]] *= inv;
        }
    }
    let a = if transpose { a.reversed_axes().as_standard_layout().to_owned() } else { a };
    a.mapv(|v| F::lit(v * gain))
}

/// Plain Adam. Moments are allocated lazily per parameter.
pub struct Adam<F: Real> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step: usize,
    m: Vec<Option<Array2<F>>>,
    v: Vec<Option<Array2<F>>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr: F::lit(lr),
            beta1: F::lit(0.9),
            beta2: F::lit(0.999),
            eps: F::lit(1e-8),
            step: 0,
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
        }
    }

    /// Apply one update; returns the global gradient L2 norm.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Array2<F>>]) -> f64 {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        let mut sq_norm = 0.0f64;
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            sq_norm += g.iter().map(|&v| v.to_f64_() * v.to_f64_()).sum::<f64>();
            let m = self
                .m[i]
                .get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v[i]
                .get_or_insert_with(|| Array2::zeros(g.dim()));
            let one = F::one();
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
            });
            let lr = self.lr;
            let eps = self.eps;
            let value = Arc::make_mut(&mut store.values[i]);
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
        }
        sq_norm.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn orthogonal_has_orthonormal_frame() {
        let mut rng = stream(11, 0);
        let w: Array2<f64> = orthogonal(&mut rng, 8, 4, 1.0);
        let gram = w.t().dot(&w);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-10, "gram[{i},{j}]={}", gram[[i, j]]);
            }
        }
        // wide case: rows orthonormal
        let w: Array2<f64> = orthogonal(&mut rng, 3, 9, 1.0);
        let gram = w.dot(&w.t());
        for i in 0..3 {
            assert!((gram[[i, i]] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Array2::from_elem((1, 3), 5.0));
        let mut adam = Adam::new(0.1, store.len());
        for _ in 0..500 {
            // grad of 0.5*||x||^2 is x
            let g = (**store.value(x)).clone();
            adam.step(&mut store, &[Some(g)]);
        }
        assert!(store.value(x).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn graph_binds_params_once() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Array2::ones((2, 2)));
        let mut g = Graph::new(&store);
        let a = g.p(w);
        let b = g.p(w);
        assert_eq!(a, b);
    }
}
