use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::numerics::Tensor;

/// Named trainable tensors, listed in a stable order.
pub trait Parameters {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Hash of the exact bit patterns of a parameter list.
pub fn param_hash<'a>(params: impl IntoIterator<Item = (String, &'a Tensor)>) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, t) in params {
        name.hash(&mut h);
        t.shape().hash(&mut h);
        for v in t.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}
