//! The model state machines: initialization, jump updates at observation
//! events, continuous evolution across gaps, and probabilistic forecasting,
//! for all eight architectures.
//!
//! A rollout alternates update and evolve steps along a trajectory. For
//! every event after the first it emits the forecast made from the state
//! evolved across the preceding gap (scored by the prediction loss and all
//! metrics) and the forecast made right after updating on the event
//! (scored by the jump loss).

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::evolve::{decay_evolve, ode_solve, SolveConfig};
use crate::forecast::ForecastDist;
use crate::nets::{GruCell, GruFlow, GruOdeField, LstmCell, Mlp, MlpSpec, OutputHead};
use crate::sim::TrajectoryRecord;

const CHECKPOINT_VERSION: u32 = 1;

/// Feature scalings for the event input vector
/// `(log-glucose, insulin/20, glucose_input/10, gap/24)`.
pub const INSULIN_FEATURE_SCALE: f64 = 20.0;
pub const GLUCOSE_INPUT_FEATURE_SCALE: f64 = 10.0;
pub const GAP_FEATURE_SCALE: f64 = 24.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    OdeGru,
    OdeLstm,
    FlowGru,
    FlowLstm,
    DecayGru,
    Imode,
    TimegapGru,
    TimegapLstm,
}

impl ArchKind {
    pub const ALL: [ArchKind; 8] = [
        ArchKind::OdeGru,
        ArchKind::OdeLstm,
        ArchKind::FlowGru,
        ArchKind::FlowLstm,
        ArchKind::DecayGru,
        ArchKind::Imode,
        ArchKind::TimegapGru,
        ArchKind::TimegapLstm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ArchKind::OdeGru => "ode_gru",
            ArchKind::OdeLstm => "ode_lstm",
            ArchKind::FlowGru => "flow_gru",
            ArchKind::FlowLstm => "flow_lstm",
            ArchKind::DecayGru => "decay_gru",
            ArchKind::Imode => "imode",
            ArchKind::TimegapGru => "timegap_gru",
            ArchKind::TimegapLstm => "timegap_lstm",
        }
    }

    fn uses_lstm(&self) -> bool {
        matches!(
            self,
            ArchKind::OdeLstm | ArchKind::FlowLstm | ArchKind::TimegapLstm
        )
    }
}

impl std::fmt::Display for ArchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = ArchKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown architecture `{s}`; valid: {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub hidden_dim: usize,
    /// Dimension of the intervention hidden state (imode only).
    #[serde(default)]
    pub intervention_dim: usize,
    #[serde(default)]
    pub solve: SolveConfig,
}

impl ArchSpec {
    pub fn new(kind: ArchKind, hidden_dim: usize) -> Self {
        ArchSpec {
            kind,
            hidden_dim,
            intervention_dim: (hidden_dim / 2).max(1),
            solve: SolveConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be >= 1".into()));
        }
        if self.kind == ArchKind::Imode && self.intervention_dim == 0 {
            return Err(Error::Config("imode needs intervention_dim >= 1".into()));
        }
        self.solve.validate()
    }
}

/// Hidden state mid-rollout; node handles into the rollout graph.
#[derive(Clone, Copy, Debug)]
pub struct ModelState {
    pub z: NodeId,
    pub c: Option<NodeId>,
    pub za: Option<NodeId>,
    pub t: f64,
}

/// Inputs carried by one observation event.
#[derive(Clone, Copy, Debug)]
pub struct EventInput {
    /// Observed log-glucose; `None` when masked out.
    pub y_log: Option<f64>,
    pub insulin_rate: f64,
    pub glucose_input: f64,
    /// Hours since the previous event (0 at the first).
    pub gap_prev: f64,
    /// Hours to the next event, when known (time-gap architectures feed
    /// this through the jump cell).
    pub delta_next: Option<f64>,
}

/// Pre/post-update forecasts emitted per event index `k >= 1`.
#[derive(Clone, Copy, Debug)]
pub struct RolloutStep {
    pub event_idx: usize,
    pub pre_mu: NodeId,
    pub pre_sigma: NodeId,
    pub post_mu: NodeId,
    pub post_sigma: NodeId,
    /// Observed target at this event (log-glucose) and its mask.
    pub y_log: f64,
    pub mask: bool,
    pub gap: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ForecastStep {
    pub event_idx: usize,
    pub pre: ForecastDist,
    pub post: ForecastDist,
    pub gap: f64,
}

enum EvolveLayer {
    GruField(GruOdeField),
    MlpField(Mlp),
    Flow(GruFlow),
    Decay,
    Identity,
    ImodeFields { field_h: Mlp, field_a: Mlp },
}

enum Jump {
    Gru(GruCell),
    Lstm(LstmCell),
    Imode { jump_h: GruCell, jump_a: GruCell },
}

/// One architecture with its component networks. Parameters live in the
/// [`ParamStore`] the model was initialized with; forward passes are pure
/// given `(store, inputs)`.
pub struct CtrnnModel {
    spec: ArchSpec,
    jump: Jump,
    evolve: EvolveLayer,
    head: OutputHead,
}

impl CtrnnModel {
    /// Register all parameters for `spec` into `store`.
    pub fn init(spec: ArchSpec, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let h = spec.hidden_dim;
        let base_features = 4;
        let timegap_features = 5;
        let ctrl_dim = 2;

        store.insert("init.z", Tensor::zeros(h, 1))?;
        if spec.kind.uses_lstm() {
            store.insert("init.c", Tensor::zeros(h, 1))?;
        }

        let jump = match spec.kind {
            ArchKind::Imode => {
                let a = spec.intervention_dim;
                store.insert("init.za", Tensor::zeros(a, 1))?;
                Jump::Imode {
                    jump_h: GruCell::init(store, "jump_h", base_features, h, rng)?,
                    jump_a: GruCell::init(store, "jump_a", ctrl_dim, a, rng)?,
                }
            }
            k if k.uses_lstm() => Jump::Lstm(LstmCell::init(
                store,
                "jump",
                if k == ArchKind::TimegapLstm {
                    timegap_features
                } else {
                    base_features
                },
                h,
                rng,
            )?),
            k => Jump::Gru(GruCell::init(
                store,
                "jump",
                if k == ArchKind::TimegapGru {
                    timegap_features
                } else {
                    base_features
                },
                h,
                rng,
            )?),
        };

        let evolve = match spec.kind {
            ArchKind::OdeGru => {
                EvolveLayer::GruField(GruOdeField::init(store, "field", h, ctrl_dim, rng)?)
            }
            ArchKind::OdeLstm => EvolveLayer::MlpField(Mlp::init(
                store,
                "field",
                MlpSpec::new(vec![h + ctrl_dim, h, h], true),
                rng,
            )?),
            ArchKind::FlowGru | ArchKind::FlowLstm => {
                EvolveLayer::Flow(GruFlow::init(store, "flow", h, ctrl_dim, rng)?)
            }
            ArchKind::DecayGru => {
                store.insert("decay.a_raw", Tensor::zeros(h, 1))?;
                EvolveLayer::Decay
            }
            ArchKind::Imode => {
                let a = spec.intervention_dim;
                EvolveLayer::ImodeFields {
                    field_h: Mlp::init(
                        store,
                        "field_h",
                        MlpSpec::new(vec![h + a, h, h], true),
                        rng,
                    )?,
                    field_a: Mlp::init(store, "field_a", MlpSpec::new(vec![a, a, a], true), rng)?,
                }
            }
            ArchKind::TimegapGru | ArchKind::TimegapLstm => EvolveLayer::Identity,
        };

        let head_in = if spec.kind == ArchKind::Imode {
            h + spec.intervention_dim
        } else {
            h
        };
        let head = OutputHead::init(store, "head", head_in, h, rng)?;

        Ok(CtrnnModel {
            spec,
            jump,
            evolve,
            head,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    /// The learned constant initial state at clock zero.
    pub fn init_state(&self, g: &mut Graph, store: &ParamStore) -> Result<ModelState> {
        let z = g.param(store, "init.z")?;
        let c = if self.spec.kind.uses_lstm() {
            Some(g.param(store, "init.c")?)
        } else {
            None
        };
        let za = if self.spec.kind == ArchKind::Imode {
            Some(g.param(store, "init.za")?)
        } else {
            None
        };
        Ok(ModelState { z, c, za, t: 0.0 })
    }

    fn feature_node(
        &self,
        g: &mut Graph,
        ev: &EventInput,
        fallback_mu: Option<NodeId>,
    ) -> Result<NodeId> {
        let timegap = matches!(self.spec.kind, ArchKind::TimegapGru | ArchKind::TimegapLstm);
        let mut rest = vec![
            ev.insulin_rate / INSULIN_FEATURE_SCALE,
            ev.glucose_input / GLUCOSE_INPUT_FEATURE_SCALE,
            ev.gap_prev / GAP_FEATURE_SCALE,
        ];
        if timegap {
            rest.push(ev.delta_next.unwrap_or(0.0) / GAP_FEATURE_SCALE);
        }
        match ev.y_log {
            Some(y) => {
                let mut v = vec![y];
                v.extend_from_slice(&rest);
                Ok(g.constant(Tensor::vector(v)))
            }
            None => {
                // Autoregressive feedback: the model's own predicted mean
                // stands in for the missing observation, kept on the graph
                // so gradients flow through the feedback path.
                let mu = fallback_mu.ok_or_else(|| {
                    Error::Config("masked event needs a fallback forecast mean".into())
                })?;
                let rest_node = g.constant(Tensor::vector(rest));
                g.concat(mu, rest_node)
            }
        }
    }

    fn ctrl_node(&self, g: &mut Graph, insulin_rate: f64, glucose_input: f64) -> NodeId {
        g.constant(Tensor::vector(vec![
            insulin_rate / INSULIN_FEATURE_SCALE,
            glucose_input / GLUCOSE_INPUT_FEATURE_SCALE,
        ]))
    }

    /// Jump update on a new observation vector. `fallback_mu` feeds the
    /// autoregressive input when the target is masked.
    pub fn update(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &ModelState,
        ev: &EventInput,
        fallback_mu: Option<NodeId>,
    ) -> Result<ModelState> {
        let x = self.feature_node(g, ev, fallback_mu)?;
        match &self.jump {
            Jump::Gru(cell) => {
                let z = cell.forward(g, store, x, state.z)?;
                Ok(ModelState { z, ..*state })
            }
            Jump::Lstm(cell) => {
                let c = state.c.expect("lstm state has a cell vector");
                let (z, c2) = cell.forward(g, store, x, state.z, c)?;
                Ok(ModelState {
                    z,
                    c: Some(c2),
                    ..*state
                })
            }
            Jump::Imode { jump_h, jump_a } => {
                let za = state.za.expect("imode state has za");
                let z = jump_h.forward(g, store, x, state.z)?;
                let xa = self.ctrl_node(g, ev.insulin_rate, ev.glucose_input);
                let za2 = jump_a.forward(g, store, xa, za)?;
                Ok(ModelState {
                    z,
                    za: Some(za2),
                    ..*state
                })
            }
        }
    }

    /// Evolve the hidden state across `gap` hours while the controls
    /// `(insulin_rate, glucose_input)` run. The LSTM cell state and clock
    /// move; nothing else does for the time-gap baselines.
    pub fn evolve_state(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &ModelState,
        gap: f64,
        insulin_rate: f64,
        glucose_input: f64,
    ) -> Result<ModelState> {
        if gap < 0.0 {
            return Err(Error::Config(format!("evolve gap must be >= 0, got {gap}")));
        }
        let t = state.t + gap;
        if gap == 0.0 {
            return Ok(ModelState { t, ..*state });
        }
        let z = match &self.evolve {
            EvolveLayer::GruField(field) => {
                let ctrl = self.ctrl_node(g, insulin_rate, glucose_input);
                ode_solve(
                    g,
                    |g, z| field.field(g, store, z, Some(ctrl)),
                    state.z,
                    0.0,
                    gap,
                    &self.spec.solve,
                )?
            }
            EvolveLayer::MlpField(mlp) => {
                let ctrl = self.ctrl_node(g, insulin_rate, glucose_input);
                ode_solve(
                    g,
                    |g, z| {
                        let v = g.concat(z, ctrl)?;
                        mlp.forward(g, store, v)
                    },
                    state.z,
                    0.0,
                    gap,
                    &self.spec.solve,
                )?
            }
            EvolveLayer::Flow(flow) => {
                let ctrl = self.ctrl_node(g, insulin_rate, glucose_input);
                flow.evolve(g, store, state.z, gap, Some(ctrl))?
            }
            EvolveLayer::Decay => {
                let raw = g.param(store, "decay.a_raw")?;
                let rate = g.softplus(raw)?;
                decay_evolve(g, rate, state.z, gap)?
            }
            EvolveLayer::Identity => state.z,
            EvolveLayer::ImodeFields { field_h, field_a } => {
                let h = self.spec.hidden_dim;
                let a = self.spec.intervention_dim;
                let za = state.za.expect("imode state has za");
                let stacked = g.concat(state.z, za)?;
                let joint = ode_solve(
                    g,
                    |g, s| {
                        let zh = g.slice(s, 0, h)?;
                        let zan = g.slice(s, h, a)?;
                        let hv = g.concat(zh, zan)?;
                        let dzh = field_h.forward(g, store, hv)?;
                        let dza = field_a.forward(g, store, zan)?;
                        g.concat(dzh, dza)
                    },
                    stacked,
                    0.0,
                    gap,
                    &self.spec.solve,
                )?;
                let z = g.slice(joint, 0, h)?;
                let za2 = g.slice(joint, h, a)?;
                return Ok(ModelState {
                    z,
                    za: Some(za2),
                    c: state.c,
                    t,
                });
            }
        };
        Ok(ModelState { z, t, ..*state })
    }

    /// Distribution parameters read from the current state.
    pub fn forecast(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &ModelState,
    ) -> Result<(NodeId, NodeId)> {
        let input = match state.za {
            Some(za) => g.concat(state.z, za)?,
            None => state.z,
        };
        self.head.forward(g, store, input)
    }

    fn event_input(traj: &TrajectoryRecord, k: usize) -> EventInput {
        let ev = &traj.events[k];
        let gap_prev = if k == 0 {
            0.0
        } else {
            ev.t - traj.events[k - 1].t
        };
        let delta_next = traj.events.get(k + 1).map(|n| n.t - ev.t);
        EventInput {
            y_log: if ev.mask == 1 {
                Some(ev.glucose_obs.ln())
            } else {
                None
            },
            insulin_rate: ev.insulin_rate,
            glucose_input: ev.glucose_input,
            gap_prev,
            delta_next,
        }
    }

    /// Run the update/evolve alternation over a trajectory, emitting one
    /// step per event `k >= 1`. Trajectories with fewer than two events
    /// produce no steps.
    pub fn rollout(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        traj: &TrajectoryRecord,
    ) -> Result<Vec<RolloutStep>> {
        let events = &traj.events;
        for pair in events.windows(2) {
            if pair[1].t <= pair[0].t {
                return Err(Error::data(format!(
                    "trajectory {}: event times not strictly increasing",
                    traj.traj_id
                )));
            }
        }
        let mut steps = Vec::new();
        if events.is_empty() {
            return Ok(steps);
        }

        let mut state = self.init_state(g, store)?;
        // First event: a plain update; the pre-update forecast exists but, with
        // nothing evolved yet, is never scored.
        let ev0 = Self::event_input(traj, 0);
        let fallback = if ev0.y_log.is_none() {
            Some(self.forecast(g, store, &state)?.0)
        } else {
            None
        };
        state = self.update(g, store, &state, &ev0, fallback)?;

        for k in 1..events.len() {
            let gap = events[k].t - events[k - 1].t;
            let prev = &events[k - 1];
            let evolved =
                self.evolve_state(g, store, &state, gap, prev.insulin_rate, prev.glucose_input)?;
            let (pre_mu, pre_sigma) = self.forecast(g, store, &evolved)?;
            let ev = Self::event_input(traj, k);
            let post_state = self.update(g, store, &evolved, &ev, Some(pre_mu))?;
            let (post_mu, post_sigma) = self.forecast(g, store, &post_state)?;
            steps.push(RolloutStep {
                event_idx: k,
                pre_mu,
                pre_sigma,
                post_mu,
                post_sigma,
                y_log: events[k].glucose_obs.ln(),
                mask: events[k].mask == 1,
                gap,
            });
            state = post_state;
        }
        Ok(steps)
    }

    /// Rollout evaluated to plain forecast distributions.
    pub fn rollout_dists(
        &self,
        store: &ParamStore,
        traj: &TrajectoryRecord,
    ) -> Result<Vec<ForecastStep>> {
        let mut g = Graph::new();
        let steps = self.rollout(&mut g, store, traj)?;
        Ok(steps
            .iter()
            .map(|s| ForecastStep {
                event_idx: s.event_idx,
                pre: ForecastDist::new(g.value(s.pre_mu).item(), g.value(s.pre_sigma).item()),
                post: ForecastDist::new(g.value(s.post_mu).item(), g.value(s.post_sigma).item()),
                gap: s.gap,
            })
            .collect())
    }

    /// Forecast at an arbitrary elapsed time after event `k`: the
    /// post-update state at `k` evolved by `tau` hours under the controls
    /// running since that event.
    pub fn forecast_at(
        &self,
        store: &ParamStore,
        traj: &TrajectoryRecord,
        k: usize,
        tau: f64,
    ) -> Result<ForecastDist> {
        if k >= traj.events.len() {
            return Err(Error::data(format!(
                "event index {k} out of range for trajectory {}",
                traj.traj_id
            )));
        }
        let mut g = Graph::new();
        let mut state = self.init_state(&mut g, store)?;
        for j in 0..=k {
            if j > 0 {
                let gap = traj.events[j].t - traj.events[j - 1].t;
                let prev = &traj.events[j - 1];
                state = self.evolve_state(
                    &mut g,
                    store,
                    &state,
                    gap,
                    prev.insulin_rate,
                    prev.glucose_input,
                )?;
            }
            let ev = Self::event_input(traj, j);
            let fallback = if ev.y_log.is_none() {
                Some(self.forecast(&mut g, store, &state)?.0)
            } else {
                None
            };
            state = self.update(&mut g, store, &state, &ev, fallback)?;
        }
        let here = &traj.events[k];
        let evolved =
            self.evolve_state(&mut g, store, &state, tau, here.insulin_rate, here.glucose_input)?;
        let (mu, sigma) = self.forecast(&mut g, store, &evolved)?;
        Ok(ForecastDist::new(g.value(mu).item(), g.value(sigma).item()))
    }

    pub fn save(&self, store: &ParamStore, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        #[derive(Serialize)]
        struct ArchDoc<'a> {
            format_version: u32,
            spec: &'a ArchSpec,
        }
        let doc = ArchDoc {
            format_version: CHECKPOINT_VERSION,
            spec: &self.spec,
        };
        std::fs::write(dir.join("arch.json"), serde_json::to_string_pretty(&doc)?)?;
        store.save(&dir.join("params.json"))
    }

    pub fn load(dir: &Path) -> Result<(CtrnnModel, ParamStore)> {
        #[derive(Deserialize)]
        struct ArchDoc {
            format_version: u32,
            spec: ArchSpec,
        }
        let doc: ArchDoc = serde_json::from_str(&std::fs::read_to_string(dir.join("arch.json"))?)?;
        if doc.format_version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint format_version {}",
                doc.format_version
            )));
        }
        let params = ParamStore::load(&dir.join("params.json"))?;
        // Rebuild the component structure against a scratch store, then
        // swap in the loaded parameters.
        let mut scratch = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let model = CtrnnModel::init(doc.spec, &mut scratch, &mut rng)?;
        for name in scratch.names() {
            if params.value(name).is_none() {
                return Err(Error::data(format!("checkpoint missing parameter `{name}`")));
            }
        }
        Ok((model, params))
    }
}

use rand::SeedableRng;
