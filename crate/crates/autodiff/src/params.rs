use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Initialization schemes for new parameters.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f32),
    /// Glorot/Xavier uniform over the last two dimensions.
    XavierUniform,
    Normal(f32),
    Uniform(f32, f32),
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Flat, ordered collection of named trainable tensors.
///
/// Order of insertion is stable, so two stores built by the same code from
/// the same seed are identical element for element.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let len: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; len],
            Init::Const(c) => vec![c; len],
            Init::XavierUniform => {
                let (fan_in, fan_out) = match shape {
                    [] => (1, 1),
                    [n] => (*n, *n),
                    _ => (shape[shape.len() - 2], shape[shape.len() - 1]),
                };
                let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                (0..len).map(|_| dist.sample(rng)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("std must be finite and >= 0");
                (0..len).map(|_| dist.sample(rng)).collect()
            }
            Init::Uniform(lo, hi) => {
                let dist = Uniform::new_inclusive(lo, hi).expect("lo <= hi");
                (0..len).map(|_| dist.sample(rng)).collect()
            }
        };
        self.push(name, shape, data)
    }

    /// Insert a parameter with explicit contents.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.params[id.0].data
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn xavier_respects_limit() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let id = store.add("w", &[16, 48], Init::XavierUniform, &mut rng);
        let limit = (6.0f32 / 64.0).sqrt();
        assert!(store.data(id).iter().all(|x| x.abs() <= limit));
        assert_eq!(store.numel(), 16 * 48);
        assert_eq!(store.find("w"), Some(id));
    }
}
