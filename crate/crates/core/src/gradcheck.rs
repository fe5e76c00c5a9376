use std::collections::HashMap;

use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::store::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Central-difference check of reverse-mode gradients.
///
/// `loss` evaluates the scalar objective for the store's current values;
/// `analytic` runs one forward+backward and returns the gradients to check.
/// Both closures must be deterministic (fix any sampling outside). At most
/// `samples_per_param` coordinates per parameter are probed, chosen by a
/// seeded draw so reruns check the same coordinates.
///
/// Returns the max over probed coordinates of
/// |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
pub fn finite_diff_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    loss: &mut dyn FnMut(&ParamStore) -> f64,
    analytic: &mut dyn FnMut(&ParamStore) -> HashMap<ParamId, Tensor>,
    h: f64,
    samples_per_param: usize,
    seed: u64,
) -> f64 {
    let grads = analytic(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0_f64;

    for &id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= samples_per_param {
            (0..n).collect()
        } else {
            index_sample(&mut rng, n, samples_per_param).into_vec()
        };
        let g_param = grads.get(&id);
        for coord in coords {
            let orig = store.value(id).data()[coord];
            set_coord(store, id, coord, orig + h);
            let f_plus = loss(store);
            set_coord(store, id, coord, orig - h);
            let f_minus = loss(store);
            set_coord(store, id, coord, orig);

            let g_fd = (f_plus - f_minus) / (2.0 * h);
            let g_ad = g_param.map(|t| t.data()[coord]).unwrap_or(0.0);
            let rel = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

fn set_coord(store: &mut ParamStore, id: ParamId, coord: usize, v: f64) {
    let cur = store.value(id).data()[coord];
    store.nudge(id, coord, v - cur);
    // Guard against accumulation drift: force the exact value.
    let after = store.value(id).data()[coord];
    if after != v {
        store.nudge(id, coord, v - after);
    }
}
