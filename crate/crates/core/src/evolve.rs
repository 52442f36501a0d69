//! Hidden-state evolution between events: fixed-step Euler/RK4 solves over
//! neural fields, GRU-flow evaluation, per-dimension exponential decay, and
//! the identity evolution used by the time-gap baselines.
//!
//! Solvers are fixed-step on purpose: adaptive stepping makes the BPTT
//! graph size input-dependent, and the default of 4 steps per hour is
//! validated by the RK4 convergence test.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::nets::GruFlow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolveConfig {
    pub method: SolveMethod,
    /// Steps per unit hour; a gap of `h` hours uses `ceil(h * steps_per_hour)`
    /// steps, at least one.
    pub steps_per_hour: u32,
    /// Upper bound on the step count for a single solve.
    pub max_steps: u32,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            method: SolveMethod::Rk4,
            steps_per_hour: 4,
            max_steps: 10_000,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_hour == 0 {
            return Err(Error::Config("steps_per_hour must be >= 1".into()));
        }
        if self.max_steps < self.steps_per_hour {
            return Err(Error::Config(
                "max_steps must be >= steps_per_hour".into(),
            ));
        }
        Ok(())
    }

    fn step_count(&self, gap: f64) -> usize {
        let raw = (gap * self.steps_per_hour as f64).ceil() as usize;
        raw.clamp(1, self.max_steps as usize)
    }
}

/// Integrate `dz/dt = field(z)` from `t0` to `t1`, differentiably.
///
/// `t1 == t0` returns `z0` unchanged. Constant controls for the gap are
/// expected to be baked into `field` by the caller.
pub fn ode_solve<F>(
    g: &mut Graph,
    field: F,
    z0: NodeId,
    t0: f64,
    t1: f64,
    cfg: &SolveConfig,
) -> Result<NodeId>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if t1 < t0 {
        return Err(Error::Config(format!(
            "ode_solve needs t1 >= t0, got ({t0}, {t1})"
        )));
    }
    if t1 == t0 {
        return Ok(z0);
    }
    cfg.validate()?;
    let steps = cfg.step_count(t1 - t0);
    let dt = (t1 - t0) / steps as f64;
    let mut z = z0;
    for step in 0..steps {
        z = (|| -> Result<NodeId> {
            match cfg.method {
                SolveMethod::Euler => {
                    let k1 = field(g, z)?;
                    let dz = g.scale(k1, dt)?;
                    g.add(z, dz)
                }
                SolveMethod::Rk4 => {
                    let k1 = field(g, z)?;
                    let half_k1 = g.scale(k1, dt / 2.0)?;
                    let z1 = g.add(z, half_k1)?;
                    let k2 = field(g, z1)?;
                    let half_k2 = g.scale(k2, dt / 2.0)?;
                    let z2 = g.add(z, half_k2)?;
                    let k3 = field(g, z2)?;
                    let full_k3 = g.scale(k3, dt)?;
                    let z3 = g.add(z, full_k3)?;
                    let k4 = field(g, z3)?;
                    // z + dt/6 * (k1 + 2 k2 + 2 k3 + k4)
                    let k12 = g.add(k1, k2)?;
                    let k23 = g.add(k2, k3)?;
                    let k34 = g.add(k3, k4)?;
                    let s1 = g.add(k12, k23)?;
                    let s = g.add(s1, k34)?;
                    let inc = g.scale(s, dt / 6.0)?;
                    g.add(z, inc)
                }
            }
        })()
        .map_err(|e| Error::SolveStep {
            step,
            source: Box::new(e),
        })?;
    }
    Ok(z)
}

/// Closed-form per-dimension exponential decay `z' = z .* exp(-rate * gap)`.
/// `rate` must be elementwise nonnegative (callers obtain it via softplus
/// of a raw parameter).
pub fn decay_evolve(g: &mut Graph, rate: NodeId, z: NodeId, gap: f64) -> Result<NodeId> {
    if gap < 0.0 {
        return Err(Error::Config(format!("decay gap must be >= 0, got {gap}")));
    }
    if gap == 0.0 {
        return Ok(z);
    }
    let scaled = g.scale(rate, -gap)?;
    let factor = g.exp(scaled)?;
    g.hadamard(z, factor)
}

/// How the hidden state moves across an inter-event gap.
pub enum Mechanism<'a, F>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    Ode { field: F, cfg: SolveConfig },
    Flow {
        flow: &'a GruFlow,
        store: &'a ParamStore,
        ctrl: Option<NodeId>,
    },
    Decay { rate: NodeId },
    /// Hidden state held constant between observations (time-gap baselines).
    Identity,
}

pub fn evolve<F>(g: &mut Graph, z: NodeId, gap: f64, mechanism: Mechanism<'_, F>) -> Result<NodeId>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if gap < 0.0 {
        return Err(Error::Config(format!("evolve gap must be >= 0, got {gap}")));
    }
    match mechanism {
        Mechanism::Ode { field, cfg } => ode_solve(g, field, z, 0.0, gap, &cfg),
        Mechanism::Flow { flow, store, ctrl } => flow.evolve(g, store, z, gap, ctrl),
        Mechanism::Decay { rate } => decay_evolve(g, rate, z, gap),
        Mechanism::Identity => Ok(z),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, ParamStore, Tensor};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn neg_field(g: &mut Graph, z: NodeId) -> Result<NodeId> {
        g.scale(z, -1.0)
    }

    fn cfg(method: SolveMethod, steps_per_hour: u32) -> SolveConfig {
        SolveConfig {
            method,
            steps_per_hour,
            max_steps: 1_000_000,
        }
    }

    fn solve_scalar(method: SolveMethod, steps_per_hour: u32) -> f64 {
        let mut g = Graph::new();
        let z0 = g.constant(Tensor::vector(vec![1.0]));
        let z1 = ode_solve(&mut g, neg_field, z0, 0.0, 1.0, &cfg(method, steps_per_hour)).unwrap();
        g.value(z1).data()[0]
    }

    #[test]
    fn euler_one_step_linear_field() {
        // z' = z + dt * (-z) = 0 for dt = 1
        assert_eq!(solve_scalar(SolveMethod::Euler, 1), 0.0);
    }

    #[test]
    fn rk4_one_step_known_truncation() {
        // single RK4 step for dz/dt = -z over [0,1]: 1 - 3.75/6 = 0.375
        assert!((solve_scalar(SolveMethod::Rk4, 1) - 0.375).abs() < 1e-15);
    }

    #[test]
    fn rk4_eight_steps_near_exact_exponential() {
        let got = solve_scalar(SolveMethod::Rk4, 8);
        assert!((got - (-1.0f64).exp()).abs() < 1e-5, "{got}");
    }

    #[test]
    fn zero_length_solve_is_identity() {
        let mut g = Graph::new();
        let z0 = g.constant(Tensor::vector(vec![3.0, -1.0]));
        let z1 = ode_solve(
            &mut g,
            neg_field,
            z0,
            2.0,
            2.0,
            &SolveConfig::default(),
        )
        .unwrap();
        assert_eq!(z0, z1);
    }

    #[test]
    fn rk4_empirical_order_at_least_3_5() {
        let exact = (-1.0f64).exp();
        let e1 = (solve_scalar(SolveMethod::Rk4, 2) - exact).abs();
        let e2 = (solve_scalar(SolveMethod::Rk4, 4) - exact).abs();
        let order = (e1 / e2).log2();
        assert!(order >= 3.5, "empirical order {order}");
    }

    #[test]
    fn euler_empirical_order_at_least_0_9() {
        let exact = (-1.0f64).exp();
        let e1 = (solve_scalar(SolveMethod::Euler, 16) - exact).abs();
        let e2 = (solve_scalar(SolveMethod::Euler, 32) - exact).abs();
        let order = (e1 / e2).log2();
        assert!(order >= 0.9, "empirical order {order}");
    }

    #[test]
    fn non_finite_state_reports_step_index() {
        // field that explodes: dz/dt = exp(z^2) quickly overflows
        let field = |g: &mut Graph, z: NodeId| -> Result<NodeId> {
            let sq = g.square(z)?;
            let sq2 = g.square(sq)?;
            let sq3 = g.square(sq2)?;
            g.exp(sq3)
        };
        let mut g = Graph::new();
        let z0 = g.constant(Tensor::vector(vec![4.0]));
        let err = ode_solve(&mut g, field, z0, 0.0, 1.0, &cfg(SolveMethod::Euler, 4)).unwrap_err();
        assert!(matches!(err, Error::SolveStep { step: 0, .. }), "{err}");
    }

    #[test]
    fn decay_known_value() {
        let mut g = Graph::new();
        let rate = g.constant(Tensor::vector(vec![0.5]));
        let z = g.constant(Tensor::vector(vec![1.0]));
        let z2 = decay_evolve(&mut g, rate, z, 2.0).unwrap();
        assert!((g.value(z2).data()[0] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((g.value(z2).data()[0] - 0.3679).abs() < 5e-5);
    }

    #[test]
    fn decay_zero_gap_and_zero_rate_are_identity() {
        let mut g = Graph::new();
        let rate = g.constant(Tensor::vector(vec![0.7, 0.1]));
        let zero_rate = g.constant(Tensor::zeros(2, 1));
        let z = g.constant(Tensor::vector(vec![2.0, -3.0]));
        let a = decay_evolve(&mut g, rate, z, 0.0).unwrap();
        assert_eq!(a, z);
        let b = decay_evolve(&mut g, zero_rate, z, 7.5).unwrap();
        assert_eq!(g.value(b).data(), &[2.0, -3.0]);
    }

    #[test]
    fn identity_mechanism_never_moves() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let z2 = evolve(
            &mut g,
            z,
            5.0,
            Mechanism::<fn(&mut Graph, NodeId) -> Result<NodeId>>::Identity,
        )
        .unwrap();
        assert_eq!(z, z2);
    }

    #[test]
    fn decay_agrees_with_ode_on_linear_field() {
        // dz/dt = -a .* z solved by RK4 must match the closed form.
        let a = [0.3, 1.2, 0.05];
        let zv = [1.5, -2.0, 0.7];
        let gap = 2.5;
        let mut g = Graph::new();
        let rate = g.constant(Tensor::vector(a.to_vec()));
        let z = g.constant(Tensor::vector(zv.to_vec()));
        let closed = decay_evolve(&mut g, rate, z, gap).unwrap();
        let field = |g: &mut Graph, z: NodeId| -> Result<NodeId> {
            let az = g.hadamard(rate, z)?;
            g.scale(az, -1.0)
        };
        let solved = ode_solve(&mut g, field, z, 0.0, gap, &cfg(SolveMethod::Rk4, 32)).unwrap();
        for (c, s) in g.value(closed).data().iter().zip(g.value(solved).data()) {
            assert!((c - s).abs() < 1e-4, "{c} vs {s}");
        }
    }

    #[test]
    fn semigroup_property() {
        // decay: exact; rk4: up to step-placement differences
        let mut g = Graph::new();
        let rate = g.constant(Tensor::vector(vec![0.4]));
        let z = g.constant(Tensor::vector(vec![2.0]));
        let whole = decay_evolve(&mut g, rate, z, 3.0).unwrap();
        let part = decay_evolve(&mut g, rate, z, 1.25).unwrap();
        let rest = decay_evolve(&mut g, rate, part, 1.75).unwrap();
        assert!((g.value(whole).data()[0] - g.value(rest).data()[0]).abs() < 1e-6);

        let solve_cfg = cfg(SolveMethod::Rk4, 4);
        let w = ode_solve(&mut g, neg_field, z, 0.0, 2.0, &solve_cfg).unwrap();
        let p = ode_solve(&mut g, neg_field, z, 0.0, 0.8, &solve_cfg).unwrap();
        let r = ode_solve(&mut g, neg_field, p, 0.8, 2.0, &solve_cfg).unwrap();
        assert!((g.value(w).data()[0] - g.value(r).data()[0]).abs() < 1e-4);
    }

    #[test]
    fn gradients_flow_through_solver() {
        use crate::nets::GruOdeField;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let field = GruOdeField::init(&mut store, "f", 3, 0, &mut rng).unwrap();
        store
            .insert(
                "z0",
                Tensor::vector((0..3).map(|_| rng.random_range(-0.5..0.5)).collect()),
            )
            .unwrap();
        for method in [SolveMethod::Euler, SolveMethod::Rk4] {
            let builder = |g: &mut Graph, s: &ParamStore| {
                let z0 = g.param(s, "z0")?;
                let z1 = ode_solve(
                    g,
                    |g: &mut Graph, z: NodeId| field.field(g, s, z, None),
                    z0,
                    0.0,
                    1.5,
                    &cfg(method, 4),
                )?;
                let sq = g.square(z1)?;
                g.sum(sq)
            };
            let err = grad_check(builder, &store, 1e-5).unwrap();
            assert!(err < 1e-4, "{method:?}: max rel err {err}");
        }
    }
}
