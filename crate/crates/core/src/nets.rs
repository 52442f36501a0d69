//! Parameterized building blocks: MLP, GRU and LSTM cells, the GRU-based
//! ODE vector field, the GRU neural flow, and the distribution output head.
//!
//! Each block registers its parameters under a name prefix in a
//! [`ParamStore`] and builds its forward pass into a [`Graph`]. Weights
//! are initialized uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Floor added to the softplus of the raw scale output so the predictive
/// standard deviation stays strictly positive and log scores stay finite.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Feedforward stack: affine + tanh on hidden layers, optional tanh on the
/// final layer (used to bound ODE vector fields).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub final_tanh: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, final_tanh: bool) -> Self {
        MlpSpec { widths, final_tanh }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config("MLP needs at least one layer".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("MLP widths must be positive".into()));
        }
        Ok(())
    }
}

fn init_tensor(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(rows, cols, data).expect("sized data")
}

fn register(store: &mut ParamStore, name: String, t: Tensor) -> Result<()> {
    store.insert(&name, t)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    prefix: String,
    spec: MlpSpec,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        spec: MlpSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        for l in 0..spec.widths.len() - 1 {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            register(
                store,
                format!("{prefix}.w{l}"),
                init_tensor(rng, fan_out, fan_in, fan_in),
            )?;
            register(
                store,
                format!("{prefix}.b{l}"),
                init_tensor(rng, fan_out, 1, fan_in),
            )?;
        }
        Ok(Mlp {
            prefix: prefix.to_string(),
            spec,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.spec.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.spec.widths.last().expect("validated")
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let n_layers = self.spec.widths.len() - 1;
        let mut h = x;
        for l in 0..n_layers {
            let w = g.param(store, &format!("{}.w{l}", self.prefix))?;
            let b = g.param(store, &format!("{}.b{l}", self.prefix))?;
            let wx = g.matmul(w, h)?;
            h = g.add(wx, b)?;
            let last = l == n_layers - 1;
            if !last || self.spec.final_tanh {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit: `h' = (1-u) .* h + u .* c` with reset gate `r`
/// entering the candidate as `c = tanh(Wc x + Uc (r .* h) + bc)`.
#[derive(Clone, Debug)]
pub struct GruCell {
    prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = input_dim + hidden_dim;
        for gate in ["r", "u", "c"] {
            register(
                store,
                format!("{prefix}.w{gate}"),
                init_tensor(rng, hidden_dim, input_dim, fan_in),
            )?;
            register(
                store,
                format!("{prefix}.u{gate}"),
                init_tensor(rng, hidden_dim, hidden_dim, fan_in),
            )?;
            register(
                store,
                format!("{prefix}.b{gate}"),
                init_tensor(rng, hidden_dim, 1, fan_in),
            )?;
        }
        Ok(GruCell {
            prefix: prefix.to_string(),
            input_dim,
            hidden_dim,
        })
    }

    fn gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        name: &str,
        x: NodeId,
        h: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(store, &format!("{}.w{name}", self.prefix))?;
        let u = g.param(store, &format!("{}.u{name}", self.prefix))?;
        let b = g.param(store, &format!("{}.b{name}", self.prefix))?;
        let wx = g.matmul(w, x)?;
        let uh = g.matmul(u, h)?;
        let s = g.add(wx, uh)?;
        g.add(s, b)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        h: NodeId,
    ) -> Result<NodeId> {
        let r_pre = self.gate(g, store, "r", x, h)?;
        let r = g.sigmoid(r_pre)?;
        let u_pre = self.gate(g, store, "u", x, h)?;
        let u = g.sigmoid(u_pre)?;
        let rh = g.hadamard(r, h)?;
        let c_pre = self.gate(g, store, "c", x, rh)?;
        let c = g.tanh(c_pre)?;
        // h' = h - u.*h + u.*c
        let uh = g.hadamard(u, h)?;
        let uc = g.hadamard(u, c)?;
        let keep = g.sub(h, uh)?;
        g.add(keep, uc)
    }
}

/// LSTM with forget/input/output gates and tanh candidate. The cell state
/// `c` is updated only here; evolution layers leave it untouched.
#[derive(Clone, Debug)]
pub struct LstmCell {
    prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = input_dim + hidden_dim;
        for gate in ["f", "i", "o", "g"] {
            register(
                store,
                format!("{prefix}.w{gate}"),
                init_tensor(rng, hidden_dim, input_dim, fan_in),
            )?;
            register(
                store,
                format!("{prefix}.u{gate}"),
                init_tensor(rng, hidden_dim, hidden_dim, fan_in),
            )?;
            register(
                store,
                format!("{prefix}.b{gate}"),
                init_tensor(rng, hidden_dim, 1, fan_in),
            )?;
        }
        Ok(LstmCell {
            prefix: prefix.to_string(),
            input_dim,
            hidden_dim,
        })
    }

    fn gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        name: &str,
        x: NodeId,
        h: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(store, &format!("{}.w{name}", self.prefix))?;
        let u = g.param(store, &format!("{}.u{name}", self.prefix))?;
        let b = g.param(store, &format!("{}.b{name}", self.prefix))?;
        let wx = g.matmul(w, x)?;
        let uh = g.matmul(u, h)?;
        let s = g.add(wx, uh)?;
        g.add(s, b)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let f_pre = self.gate(g, store, "f", x, h)?;
        let f = g.sigmoid(f_pre)?;
        let i_pre = self.gate(g, store, "i", x, h)?;
        let i = g.sigmoid(i_pre)?;
        let o_pre = self.gate(g, store, "o", x, h)?;
        let o = g.sigmoid(o_pre)?;
        let cand_pre = self.gate(g, store, "g", x, h)?;
        let cand = g.tanh(cand_pre)?;
        let fc = g.hadamard(f, c)?;
        let ig = g.hadamard(i, cand)?;
        let c_new = g.add(fc, ig)?;
        let tc = g.tanh(c_new)?;
        let h_new = g.hadamard(o, tc)?;
        Ok((h_new, c_new))
    }
}

/// GRU-derived autonomous vector field `dz/dt = (1-u(v)) .* (c(v) - z)`
/// where `v = concat(z, ctrl)` and the gates are GRU-style. The gate range
/// bounds the field: `|dz/dt| <= |c - z|` elementwise.
#[derive(Clone, Debug)]
pub struct GruOdeField {
    prefix: String,
    pub state_dim: usize,
    pub ctrl_dim: usize,
}

impl GruOdeField {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        state_dim: usize,
        ctrl_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let in_dim = state_dim + ctrl_dim;
        for gate in ["r", "u", "c"] {
            register(
                store,
                format!("{prefix}.w{gate}"),
                init_tensor(rng, state_dim, in_dim, in_dim),
            )?;
            register(
                store,
                format!("{prefix}.b{gate}"),
                init_tensor(rng, state_dim, 1, in_dim),
            )?;
        }
        Ok(GruOdeField {
            prefix: prefix.to_string(),
            state_dim,
            ctrl_dim,
        })
    }

    /// `ctrl` must be a `ctrl_dim x 1` node (required when `ctrl_dim > 0`).
    pub fn field(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: NodeId,
        ctrl: Option<NodeId>,
    ) -> Result<NodeId> {
        let v = match ctrl {
            Some(c) if self.ctrl_dim > 0 => g.concat(z, c)?,
            None if self.ctrl_dim == 0 => z,
            _ => {
                return Err(Error::Config(
                    "control input does not match field ctrl_dim".into(),
                ))
            }
        };
        let gate = |g: &mut Graph, name: &str, inp: NodeId| -> Result<NodeId> {
            let w = g.param(store, &format!("{}.w{name}", self.prefix))?;
            let b = g.param(store, &format!("{}.b{name}", self.prefix))?;
            let wv = g.matmul(w, inp)?;
            g.add(wv, b)
        };
        let r_pre = gate(g, "r", v)?;
        let r = g.sigmoid(r_pre)?;
        let u_pre = gate(g, "u", v)?;
        let u = g.sigmoid(u_pre)?;
        let rz = g.hadamard(r, z)?;
        let cv = match ctrl {
            Some(c) if self.ctrl_dim > 0 => g.concat(rz, c)?,
            _ => rz,
        };
        let c_pre = gate(g, "c", cv)?;
        let c = g.tanh(c_pre)?;
        // (1 - u) .* (c - z) = (c - z) - u .* (c - z)
        let cz = g.sub(c, z)?;
        let ucz = g.hadamard(u, cz)?;
        g.sub(cz, ucz)
    }
}

/// GRU-style neural flow `z' = z + tanh(gap) * u(v) .* (c(v) - z)` with
/// `v = concat(z, gap/24, ctrl)`. The `tanh(gap)` time gate is zero at
/// zero elapsed time, so the flow satisfies the initial condition exactly.
#[derive(Clone, Debug)]
pub struct GruFlow {
    prefix: String,
    pub state_dim: usize,
    pub ctrl_dim: usize,
}

impl GruFlow {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        state_dim: usize,
        ctrl_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let in_dim = state_dim + 1 + ctrl_dim;
        for gate in ["r", "u", "c"] {
            register(
                store,
                format!("{prefix}.w{gate}"),
                init_tensor(rng, state_dim, in_dim, in_dim),
            )?;
            register(
                store,
                format!("{prefix}.b{gate}"),
                init_tensor(rng, state_dim, 1, in_dim),
            )?;
        }
        Ok(GruFlow {
            prefix: prefix.to_string(),
            state_dim,
            ctrl_dim,
        })
    }

    pub fn evolve(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: NodeId,
        gap: f64,
        ctrl: Option<NodeId>,
    ) -> Result<NodeId> {
        if gap < 0.0 {
            return Err(Error::Config(format!("flow gap must be >= 0, got {gap}")));
        }
        if gap == 0.0 {
            return Ok(z);
        }
        let gap_in = g.constant(Tensor::vector(vec![gap / 24.0]));
        let zg = g.concat(z, gap_in)?;
        let v = match ctrl {
            Some(c) if self.ctrl_dim > 0 => g.concat(zg, c)?,
            None if self.ctrl_dim == 0 => zg,
            _ => {
                return Err(Error::Config(
                    "control input does not match flow ctrl_dim".into(),
                ))
            }
        };
        let gate = |g: &mut Graph, name: &str, inp: NodeId| -> Result<NodeId> {
            let w = g.param(store, &format!("{}.w{name}", self.prefix))?;
            let b = g.param(store, &format!("{}.b{name}", self.prefix))?;
            let wv = g.matmul(w, inp)?;
            g.add(wv, b)
        };
        let r_pre = gate(g, "r", v)?;
        let r = g.sigmoid(r_pre)?;
        let u_pre = gate(g, "u", v)?;
        let u = g.sigmoid(u_pre)?;
        let rz = g.hadamard(r, z)?;
        let rzg = g.concat(rz, gap_in)?;
        let cv = match ctrl {
            Some(c) if self.ctrl_dim > 0 => g.concat(rzg, c)?,
            _ => rzg,
        };
        let c_pre = gate(g, "c", cv)?;
        let c = g.tanh(c_pre)?;
        let cz = g.sub(c, z)?;
        let ucz = g.hadamard(u, cz)?;
        let step = g.scale(ucz, gap.tanh())?;
        g.add(z, step)
    }
}

/// Maps the hidden state to the parameters of a normal over log-glucose:
/// unconstrained mean and `softplus(s) + 1e-4` scale.
#[derive(Clone, Debug)]
pub struct OutputHead {
    mlp: Mlp,
}

impl OutputHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mlp = Mlp::init(
            store,
            prefix,
            MlpSpec::new(vec![in_dim, hidden_dim, 2], false),
            rng,
        )?;
        Ok(OutputHead { mlp })
    }

    /// Returns `(mu_log, sigma_log)` as 1x1 nodes.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let out = self.mlp.forward(g, store, z)?;
        let mu = g.slice(out, 0, 1)?;
        let s = g.slice(out, 1, 1)?;
        let sp = g.softplus(s)?;
        let floor = g.scalar(SIGMA_FLOOR);
        let sigma = g.add(sp, floor)?;
        Ok((mu, sigma))
    }
}
