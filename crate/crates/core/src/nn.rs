use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::store::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..=a))
        .collect();
    Tensor::new(fan_in, fan_out, data).expect("sized data")
}

/// Affine layer with parameters owned by a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.register(&format!("{name}/w"), xavier_uniform(rng, fan_in, fan_out))?;
        let b = if bias {
            Some(store.register(&format!("{name}/b"), Tensor::zeros(1, fan_out))?)
        } else {
            None
        };
        Ok(Linear {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let bn = g.param(b);
                g.add_bias(y, bn)
            }
            None => y,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self.b {
            Some(b) => vec![self.w, b],
            None => vec![self.w],
        }
    }
}

/// Plain ReLU MLP: linear layers with ReLU between them, identity head.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: &[usize],
    ) -> Result<Self> {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            layers.push(Linear::new(
                store,
                rng,
                &format!("{name}/l{i}"),
                pair[0],
                pair[1],
                true,
            )?);
        }
        Ok(Mlp { layers })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i != last {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.ids()).collect()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out
    }

    /// Register a frozen copy of `source` under `name` (target-network use);
    /// the copies are buffers, never handed to the optimizer.
    pub fn clone_as_buffers(
        store: &mut ParamStore,
        name: &str,
        source: &Mlp,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, layer) in source.layers.iter().enumerate() {
            let w_val = store.value(layer.w).clone();
            let w = store.register_buffer(&format!("{name}/l{i}/w"), w_val)?;
            let b = match layer.b {
                Some(b_id) => {
                    let b_val = store.value(b_id).clone();
                    Some(store.register_buffer(&format!("{name}/l{i}/b"), b_val)?)
                }
                None => None,
            };
            layers.push(Linear {
                w,
                b,
                fan_in: layer.fan_in,
                fan_out: layer.fan_out,
            });
        }
        Ok(Mlp { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = xavier_uniform(&mut rng, 8, 8);
        let a = (6.0 / 16.0f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= a));
    }

    #[test]
    fn mlp_shapes_and_determinism() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let m1 = Mlp::new(&mut s1, &mut r1, "net", &[4, 8, 3]).unwrap();
        let _m2 = Mlp::new(&mut s2, &mut r2, "net", &[4, 8, 3]).unwrap();
        assert_eq!(s1.checksum(), s2.checksum());

        let mut g = Graph::new(&s1);
        let x = g.constant(Tensor::zeros(5, 4));
        let y = m1.forward(&mut g, x);
        assert_eq!(g.value(y).shape(), (5, 3));
    }
}
