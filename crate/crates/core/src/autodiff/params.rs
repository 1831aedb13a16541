use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub type ParamId = usize;

struct Param {
    name: String,
    value: RefCell<Rc<ArrayD<f64>>>,
    trainable: bool,
}

/// Named tensor store for model weights and buffers (running statistics).
///
/// Values are reference-counted so binding a parameter onto a tape never
/// copies the array. Updates go through interior mutability under the
/// single-writer discipline of the trainer. Each store carries a unique id
/// so gradients stay separated when several stores share one tape (the
/// adversarial setup binds generator and discriminator together).
pub struct ParamStore {
    uid: u64,
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

static STORE_COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: STORE_COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn create(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        self.create_inner(name, value, true)
    }

    /// A buffer participates in checkpoints but not in optimizer updates.
    pub fn create_buffer(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        self.create_inner(name, value, false)
    }

    fn create_inner(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value: RefCell::new(Rc::new(value)),
            trainable,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id].trainable
    }

    pub fn value_rc(&self, id: ParamId) -> Rc<ArrayD<f64>> {
        self.params[id].value.borrow().clone()
    }

    pub fn value(&self, id: ParamId) -> ArrayD<f64> {
        self.params[id].value.borrow().as_ref().clone()
    }

    pub fn set_value(&self, id: ParamId, value: ArrayD<f64>) {
        let current = self.params[id].value.borrow().shape().to_vec();
        assert_eq!(
            current,
            value.shape(),
            "set_value shape change on {}",
            self.name(id)
        );
        *self.params[id].value.borrow_mut() = Rc::new(value);
    }

    /// In-place update `value += delta`.
    pub fn update(&self, id: ParamId, delta: &ArrayD<f64>) {
        let mut guard = self.params[id].value.borrow_mut();
        let arr = Rc::make_mut(&mut guard);
        *arr += delta;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        0..self.params.len()
    }

    /// Total number of stored elements across all tensors.
    pub fn num_elements(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.value.borrow().len())
            .sum()
    }

    /// Snapshot of every tensor, keyed by name (cheap: clones the Rc).
    pub fn snapshot(&self) -> Vec<(String, Rc<ArrayD<f64>>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.borrow().clone()))
            .collect()
    }

    /// Restore values from a snapshot. Names absent from the snapshot keep
    /// their current values; unknown names are ignored.
    pub fn restore(&self, snapshot: &[(String, Rc<ArrayD<f64>>)]) {
        for (name, value) in snapshot {
            if let Some(&id) = self.index.get(name) {
                *self.params[id].value.borrow_mut() = value.clone();
            }
        }
    }
}

/// Normal(0, std) truncated to two standard deviations, resampled on miss.
pub fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let mut draw = || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    };
    ArrayD::from_shape_simple_fn(IxDyn(shape), &mut draw)
}

/// Kaiming-normal over fan-out, the convolution init used across the model.
pub fn kaiming_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    // shape = [out, in/groups, kh, kw]; fan_out = out * kh * kw.
    let fan_out: usize = shape[0] * shape[2..].iter().product::<usize>().max(1);
    let std = (2.0 / fan_out as f64).sqrt();
    let mut draw = || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    };
    ArrayD::from_shape_simple_fn(IxDyn(shape), &mut draw)
}

/// Uniform(-bound, bound), used for bias init where a fan-in bound applies.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> ArrayD<f64> {
    let mut draw = || rng.random_range(-bound..=bound);
    ArrayD::from_shape_simple_fn(IxDyn(shape), &mut draw)
}
