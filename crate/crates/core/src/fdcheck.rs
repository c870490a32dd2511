//! Central-finite-difference gradient verification.

use rand::seq::SliceRandom;

use crate::error::Error;
use crate::init::seeded_rng;
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Compare analytic gradients against central differences.
///
/// `f(store, with_grad)` must rebuild the computation from scratch and
/// return the scalar loss; when `with_grad` is true it must also leave
/// gradients in the store (one `backward` call on cleared buffers).
/// The function must be deterministic given the parameters — dropout
/// and any other train-mode randomness stay off.
///
/// Returns the maximum over sampled coordinates of
/// `|analytic − central| / max(|analytic|, |central|, 1e-12)`.
/// At most `max_coords` coordinates per parameter are probed, chosen by
/// a seeded shuffle so reruns are identical. Coordinates whose analytic
/// gradient sits more than four orders of magnitude below the largest
/// gradient anywhere in the model are skipped: the central difference
/// carries ~|f|·2⁻⁵²/ε of cancellation noise, so the relative metric is
/// meaningless there (a structurally-zero gradient, e.g. an attention
/// key bias, would otherwise read as total disagreement).
pub fn finite_difference_check<S, F>(
    mut f: F,
    store: &mut ParamStore<S>,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64, Error>
where
    S: Scalar,
    F: FnMut(&mut ParamStore<S>, bool) -> Result<f64, Error>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArg(format!("finite-difference step must be positive, got {eps}")));
    }
    if max_coords == 0 {
        return Err(Error::InvalidArg("max_coords must be at least 1".into()));
    }

    store.clear_grads();
    f(store, true)?;

    let mut rng = seeded_rng(seed);
    let ids = store.trainable_ids();
    let mut worst = 0.0f64;

    let mut global_scale = 0.0f64;
    for &id in &ids {
        let g = store
            .grad(id)
            .ok_or_else(|| Error::MissingGradient { name: store.name(id).to_string() })?;
        for v in g.values() {
            global_scale = global_scale.max(v.as_f64().abs());
        }
    }
    let floor = global_scale * 1e-4;

    for id in ids {
        let analytic: Vec<f64> = store
            .grad(id)
            .ok_or_else(|| Error::MissingGradient { name: store.name(id).to_string() })?
            .to_f64_vec();

        let n = analytic.len();

        let mut coords: Vec<usize> = (0..n).collect();
        coords.shuffle(&mut rng);
        let picked: Vec<usize> =
            coords.iter().copied().filter(|&c| analytic[c].abs() >= floor).take(max_coords).collect();

        for &c in &picked {
            let orig = store.value(id).values()[c];
            store.value_mut(id).values_mut()[c] = orig + S::of(eps);
            let plus = f(store, false)?;
            store.value_mut(id).values_mut()[c] = orig - S::of(eps);
            let minus = f(store, false)?;
            store.value_mut(id).values_mut()[c] = orig;

            let central = (plus - minus) / (2.0 * eps);
            let denom = analytic[c].abs().max(central.abs()).max(1e-12);
            let err = (analytic[c] - central).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}
