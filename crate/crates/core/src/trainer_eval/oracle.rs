//! Reference computations on state spaces small enough to enumerate.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};

use crate::ctmc_sampler::step_transition;
use crate::denoiser::{softmax_rows, ExactBayesSpec, PosteriorModel};
use crate::error::{validation, Error, Result};
use crate::kinetics::{Scheduler, TimeInterval};
use crate::path_data::{Sequence, Token};

/// Largest joint state space accepted by the Kolmogorov integrator.
pub const MAX_KOLMOGOROV_STATES: usize = 64;
const NEGATIVE_TOL: f64 = 1e-9;

/// Every sequence of length `len` over `alphabet`, in lexicographic order
/// of alphabet positions.
pub fn enumerate_states(alphabet: &[Token], len: usize) -> Vec<Sequence> {
    let n = alphabet.len();
    let total = n.pow(len as u32);
    (0..total)
        .map(|mut k| {
            let mut x = vec![0; len];
            for slot in x.iter_mut().rev() {
                *slot = alphabet[k % n];
                k /= n;
            }
            Sequence(x)
        })
        .collect()
}

/// Lookup from state to its row in an enumeration.
pub fn state_index(states: &[Sequence]) -> HashMap<Vec<Token>, usize> {
    states.iter().enumerate().map(|(i, s)| (s.0.clone(), i)).collect()
}

/// Joint generator of the factorized process at time `t`:
/// `u(x -> x with x^i = a) = g(t) p_i(a | x)` for `a != x^i`.
pub fn factorized_generator(
    model: &dyn PosteriorModel,
    scheduler: &Scheduler,
    states: &[Sequence],
    t: f64,
    h: f64,
) -> Result<Array2<f64>> {
    let index = state_index(states);
    let g = scheduler.g_instant(t)?;
    let n = states.len();
    let mut u = Array2::zeros((n, n));
    for (r, x) in states.iter().enumerate() {
        let post = model.posterior(x, t, h, 1.0)?;
        let mut y = x.0.clone();
        for i in 0..x.len() {
            for (a, &p) in post.row(i).iter().enumerate() {
                if a == x[i] as usize || p == 0.0 {
                    continue;
                }
                y[i] = a as Token;
                let c = *index
                    .get(&y)
                    .ok_or_else(|| validation(format!("state {y:?} reachable but not enumerated")))?;
                u[[r, c]] += g * p;
                y[i] = x[i];
            }
        }
        let off: f64 = u.row(r).sum();
        u[[r, r]] = -off;
    }
    Ok(u)
}

/// Transition matrix `P(t0, t1)` from `fine_steps` left-point Euler updates
/// `P <- P + dt P u(t)` of the forward equation, rows renormalized at the end.
pub fn kolmogorov_reference<F>(mut generator: F, t0: f64, t1: f64, fine_steps: usize) -> Result<Array2<f64>>
where
    F: FnMut(f64) -> Result<Array2<f64>>,
{
    if fine_steps == 0 || !(t1 >= t0) {
        return Err(validation(format!("need t0 <= t1 and fine_steps > 0, got [{t0}, {t1}] with {fine_steps}")));
    }
    let dt = (t1 - t0) / fine_steps as f64;
    let mut p: Option<Array2<f64>> = None;
    for k in 0..fine_steps {
        let t = t0 + k as f64 * dt;
        let u = generator(t)?;
        let n = u.nrows();
        if u.ncols() != n || n > MAX_KOLMOGOROV_STATES {
            return Err(validation(format!("generator shape {:?} not square within {MAX_KOLMOGOROV_STATES}", u.dim())));
        }
        for (r, row) in u.rows().into_iter().enumerate() {
            let scale = row.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            if row.sum().abs() > 1e-9 * scale {
                return Err(validation(format!("generator row {r} sums to {} at t = {t}", row.sum())));
            }
        }
        let current = p.get_or_insert_with(|| Array2::eye(n));
        let step = current.dot(&u) * dt;
        *current += &step;
        if let Some(&bad) = current.iter().find(|&&v| v < -NEGATIVE_TOL) {
            return Err(Error::StepSize(format!(
                "transition entry {bad} at t = {t}; increase the number of fine steps"
            )));
        }
    }
    let mut p = p.expect("at least one step");
    for mut row in p.rows_mut() {
        row.mapv_inplace(|v| v.max(0.0));
        let s = row.sum();
        row /= s;
    }
    Ok(p)
}

/// `E[(1/h) int_t^{t+h} logits(X_s, s) ds]` with `X` the exact factorized
/// process started at `x_t`, by midpoint quadrature over `fine_steps`
/// cells. The model is queried with step condition `cond_h`.
#[allow(clippy::too_many_arguments)]
pub fn interval_average_logits(
    model: &dyn PosteriorModel,
    scheduler: &Scheduler,
    states: &[Sequence],
    x_t: &[Token],
    t: f64,
    h: f64,
    cond_h: f64,
    fine_steps: usize,
) -> Result<Array2<f64>> {
    TimeInterval::new(t, h)?;
    let index = state_index(states);
    let start = *index.get(x_t).ok_or_else(|| validation("x_t is not in the enumerated states"))?;
    let mut dist = Array1::zeros(states.len());
    dist[start] = 1.0;
    let dt = h / fine_steps as f64;
    let mut acc: Option<Array2<f64>> = None;
    for k in 0..fine_steps {
        let s = t + (k as f64 + 0.5) * dt;
        for (y, &w) in states.iter().zip(dist.iter()) {
            if w == 0.0 {
                continue;
            }
            let l = model.logits(y, s, cond_h)? * (w * dt / h);
            match acc.as_mut() {
                None => acc = Some(l),
                Some(a) => *a += &l,
            }
        }
        let u = factorized_generator(model, scheduler, states, s, cond_h)?;
        let flow = dist.dot(&u) * dt;
        dist += &flow;
    }
    acc.ok_or_else(|| validation("no quadrature cells"))
}

/// One-step transition rows of the cumulative-mode kernel driven by `logits`.
pub fn logit_step_kernel(x: &[Token], logits: &Array2<f64>, scheduler: &Scheduler, t: f64, h: f64) -> Result<Array2<f64>> {
    let post = softmax_rows(logits.view(), 1.0);
    let scale = scheduler.g_cumulative(TimeInterval::new(t, h)?);
    step_transition(x, post.view(), scale, h)
}

/// For each probe state at time `t`, `KL(one step of size h || two steps of size h/2)`
/// between joint next-state distributions of a two-position model, using the
/// cumulative scale and the model's own step conditioning.
///
/// Every intermediate state over `alphabet` is evaluated once in a single batch.
pub fn composition_kl(
    model: &dyn PosteriorModel,
    scheduler: &Scheduler,
    alphabet: &[Token],
    probes: &[Sequence],
    t: f64,
    h: f64,
) -> Result<Vec<f64>> {
    if probes.iter().any(|p| p.len() != 2) {
        return Err(validation("composition probe needs two-position states"));
    }
    let v = model.vocab().size;
    let half = h / 2.0;
    let mid = t + half;
    let g_full = scheduler.g_cumulative(TimeInterval::new(t, h)?);
    let g_first = scheduler.g_cumulative(TimeInterval::new(t, half)?);
    let g_second = scheduler.g_cumulative(TimeInterval::new(mid, half)?);

    let inter = enumerate_states(alphabet, 2);
    let refs: Vec<&[Token]> = inter.iter().map(|s| &s[..]).collect();
    let post_mid = model.posterior_batch(&refs, &vec![mid; refs.len()], &vec![half; refs.len()], 1.0)?;
    // Second-step kernels of each position for every intermediate state.
    let mut k0 = Array2::zeros((inter.len(), v));
    let mut k1 = Array2::zeros((inter.len(), v));
    for (j, y) in inter.iter().enumerate() {
        let rows = step_transition(y, post_mid.index_axis(Axis(0), j), g_second, half)?;
        k0.row_mut(j).assign(&rows.row(0));
        k1.row_mut(j).assign(&rows.row(1));
    }

    let probe_refs: Vec<&[Token]> = probes.iter().map(|s| &s[..]).collect();
    let post_full = model.posterior_batch(&probe_refs, &vec![t; probes.len()], &vec![h; probes.len()], 1.0)?;
    let post_first = model.posterior_batch(&probe_refs, &vec![t; probes.len()], &vec![half; probes.len()], 1.0)?;
    let mut out = Vec::with_capacity(probes.len());
    for (b, z) in probes.iter().enumerate() {
        let one = step_transition(z, post_full.index_axis(Axis(0), b), g_full, h)?;
        let first = step_transition(z, post_first.index_axis(Axis(0), b), g_first, half)?;
        // P2 = sum_y T1(y) outer(k0[y], k1[y]) = k0^T diag(T1) k1.
        let mut weighted = k1.clone();
        for (j, y) in inter.iter().enumerate() {
            let w = first[[0, y[0] as usize]] * first[[1, y[1] as usize]];
            weighted.row_mut(j).mapv_inplace(|q| q * w);
        }
        let two = k0.t().dot(&weighted);
        let mut kl = 0.0;
        for a in alphabet {
            for c in alphabet {
                let p = one[[0, *a as usize]] * one[[1, *c as usize]];
                if p > 0.0 {
                    let q = two[[*a as usize, *c as usize]];
                    kl += p * (p.ln() - q.max(f64::MIN_POSITIVE).ln());
                }
            }
        }
        out.push(kl.max(0.0));
    }
    Ok(out)
}

/// Two-state target `p1 = (0.3, 0.7)`, one position, uniform source.
pub fn two_state_fixture() -> ExactBayesSpec {
    serde_json::from_str(TWO_STATE_JSON).expect("shipped fixture parses")
}

/// Correlated target over two positions with four tokens, uniform source.
pub fn sixteen_state_fixture() -> ExactBayesSpec {
    serde_json::from_str(SIXTEEN_STATE_JSON).expect("shipped fixture parses")
}

pub const TWO_STATE_JSON: &str = include_str!("../../fixtures/two_state.json");
pub const SIXTEEN_STATE_JSON: &str = include_str!("../../fixtures/sixteen_state.json");

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ExactBayes;
    use ndarray::array;

    #[test]
    fn symmetric_two_state_chain() {
        let u = array![[-1.0, 1.0], [1.0, -1.0]];
        let p = kolmogorov_reference(|_| Ok(u.clone()), 0.0, 1.0, 10_000).unwrap();
        let expect = (1.0 + (-2.0f64).exp()) / 2.0;
        assert!((p[[0, 0]] - expect).abs() < 1e-4, "{}", p[[0, 0]]);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_generator_is_identity() {
        let p = kolmogorov_reference(|_| Ok(Array2::zeros((3, 3))), 0.2, 0.9, 50).unwrap();
        assert_eq!(p, Array2::<f64>::eye(3));
    }

    #[test]
    fn coarse_steps_raise_step_size_error() {
        let u = array![[-50.0, 50.0], [50.0, -50.0]];
        assert!(matches!(kolmogorov_reference(|_| Ok(u.clone()), 0.0, 1.0, 10), Err(Error::StepSize(_))));
    }

    #[test]
    fn unbalanced_generator_rejected() {
        let u = array![[-1.0, 0.5], [1.0, -1.0]];
        assert!(matches!(kolmogorov_reference(|_| Ok(u.clone()), 0.0, 1.0, 10), Err(Error::Validation(_))));
    }

    #[test]
    fn enumeration_order() {
        let s = enumerate_states(&[0, 1, 2], 2);
        assert_eq!(s.len(), 9);
        assert_eq!(s[5].0, vec![1, 2]);
    }

    #[test]
    fn fixtures_are_valid() {
        let two = ExactBayes::new(two_state_fixture()).unwrap();
        assert_eq!(two.seq_len(), 1);
        let sixteen = ExactBayes::new(sixteen_state_fixture()).unwrap();
        assert_eq!(sixteen.seq_len(), 2);
        assert_eq!(sixteen.spec().support.len(), 16);
    }

    #[test]
    fn generator_rows_balance() {
        let model = ExactBayes::new(sixteen_state_fixture()).unwrap();
        let states = enumerate_states(&[0, 1, 2, 3], 2);
        let u = factorized_generator(&model, &model.spec().scheduler, &states, 0.4, 0.1).unwrap();
        for (r, row) in u.rows().into_iter().enumerate() {
            assert!(row.sum().abs() < 1e-12);
            assert!(row.iter().enumerate().all(|(c, &v)| c == r || v >= 0.0));
        }
    }

    #[test]
    fn exact_flow_reaches_target() {
        // Uniform start pushed through the exact posterior's generator lands on p1.
        let spec = sixteen_state_fixture();
        let scheduler = Scheduler::new(spec.scheduler.kind, 1e-6).unwrap();
        let model = ExactBayes::new(ExactBayesSpec { scheduler, ..spec.clone() }).unwrap();
        let states = enumerate_states(&[0, 1, 2, 3], 2);
        let p = kolmogorov_reference(
            |t| factorized_generator(&model, &scheduler, &states, t, 1e-3),
            0.0,
            1.0,
            4000,
        )
        .unwrap();
        let start = Array1::from_elem(16, 1.0 / 16.0);
        let end = start.dot(&p);
        let index = state_index(&states);
        for (x, q) in &spec.support {
            assert!((end[index[&x.0]] - q).abs() < 5e-3, "{x:?}: {} vs {q}", end[index[&x.0]]);
        }
    }
}
