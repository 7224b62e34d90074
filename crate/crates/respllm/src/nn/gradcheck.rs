//! Central finite-difference gradient verification.
//!
//! Used by unit tests, the acceptance suite, and the `gradcheck` CLI
//! subcommand. The loss closure must be a pure function of the context's
//! parameter store.

use super::matrix::RealMatrix;
use super::param::{ParamId, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel_err: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare analytic gradients against central differences on `n_coords`
/// randomly chosen coordinates of the listed parameters.
///
/// `ctx` is whatever owns the parameters (a bare store, a model, ...);
/// `store_of` exposes its store for perturbation. `loss` evaluates the
/// scalar objective and `grads` the analytic gradients, both against the
/// current parameter values.
pub fn check_params<C>(
    ctx: &mut C,
    store_of: impl Fn(&mut C) -> &mut ParamStore,
    ids: &[ParamId],
    n_coords: usize,
    seed: u64,
    loss: impl Fn(&C) -> f64,
    grads: impl Fn(&C) -> Vec<(ParamId, RealMatrix)>,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let analytic: Vec<RealMatrix> = {
        let raw = grads(ctx);
        let store = store_of(ctx);
        let mut by_id: Vec<RealMatrix> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                RealMatrix::zeros(r, c)
            })
            .collect();
        for (id, g) in raw {
            by_id[id.index()].add_assign(&g);
        }
        by_id
    };

    // Sample coordinates over the concatenation of the requested parameters.
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    {
        let store = store_of(ctx);
        for &id in ids {
            for i in 0..store.value(id).len() {
                coords.push((id, i));
            }
        }
    }
    coords.shuffle(&mut rng);
    coords.truncate(n_coords);

    let mut report = GradCheckReport {
        checked: 0,
        worst_rel_err: 0.0,
        failures: Vec::new(),
    };
    for (id, i) in coords {
        let orig = store_of(ctx).value(id).data()[i];
        store_of(ctx).value_mut(id).data_mut()[i] = orig + FD_STEP;
        let up = loss(ctx);
        store_of(ctx).value_mut(id).data_mut()[i] = orig - FD_STEP;
        let down = loss(ctx);
        store_of(ctx).value_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let exact = analytic[id.index()].data()[i];
        let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-4);
        report.checked += 1;
        if rel > report.worst_rel_err {
            report.worst_rel_err = rel;
        }
        if rel > REL_TOL {
            report.failures.push(format!(
                "{}[{}]: analytic {exact:.6e} vs numeric {numeric:.6e} (rel {rel:.3e})",
                store_of(ctx).get(id).name,
                i
            ));
        }
    }
    report
}

/// Gradient check on a bare parameter store.
pub fn check_store(
    store: &mut ParamStore,
    ids: &[ParamId],
    n_coords: usize,
    seed: u64,
    loss: impl Fn(&ParamStore) -> f64,
    grads: impl Fn(&ParamStore) -> Vec<(ParamId, RealMatrix)>,
) -> GradCheckReport {
    check_params(store, |s| s, ids, n_coords, seed, loss, grads)
}
