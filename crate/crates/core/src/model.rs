//! Full recurrent models (TARDIS and the LSTM baseline) and the batched
//! episode runner.

use serde::{Deserialize, Serialize};

use crate::addressing::{discretize, mask_last_read, read_logits, usage_tensor, AddressingParams, ReadDecision, ReadMode};
use crate::autodiff::{argmax, Graph, Tensor, Var};
use crate::controller::{cell_update, gates, predict, preactivations, reset_gates, reset_noise, ControllerParams, ControllerState};
use crate::error::{Error, Result};
use crate::memory::{init_memory, sparse_addresses, MemoryConfig, MemoryState};
use crate::params::{glorot, Bound, ParamId, ParamStore};
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Tardis,
    Lstm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub d_x: usize,
    pub d_out: usize,
    pub d_h: usize,
    pub k: usize,
    pub a: usize,
    pub d_m: usize,
    /// Hidden width of the addressing MLP.
    pub d_att: usize,
    /// Build the auxiliary `p(y | r, x)` head.
    pub aux_head: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_x == 0 || self.d_out == 0 || self.d_h == 0 {
            return bad(format!("d_x, d_out and d_h must be positive: {self:?}"));
        }
        if self.arch == Architecture::Tardis {
            MemoryConfig {
                k: self.k,
                a: self.a,
                c: self.d_m,
            }
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
            if self.d_h <= self.d_m {
                return bad(format!("d_h ({}) must exceed d_m ({})", self.d_h, self.d_m));
            }
            if self.d_att == 0 {
                return bad("d_att must be positive".into());
            }
        }
        Ok(())
    }

    pub fn memory(&self) -> MemoryConfig {
        MemoryConfig {
            k: self.k,
            a: self.a,
            c: self.d_m,
        }
    }

    /// Width of a memory read, `a + d_m`.
    pub fn read_width(&self) -> usize {
        self.a + self.d_m
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AuxParams {
    pub w_r: ParamId,
    pub w_x: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct MemoryParams {
    pub addresses: ParamId,
    pub w_m: ParamId,
    pub addr: AddressingParams,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ctrl: ControllerParams,
    /// Present for TARDIS.
    pub mem: Option<MemoryParams>,
    pub aux: Option<AuxParams>,
}

impl Model {
    pub fn new(config: ModelConfig, stream: &SeedStream) -> Result<Model> {
        config.validate()?;
        let mut rng = stream.child("init").rng();
        let mut store = ParamStore::new();
        let c = &config;
        match c.arch {
            Architecture::Tardis => {
                let q = c.read_width();
                let ctrl = ControllerParams::new(&mut store, c.d_h, c.d_x, q, c.d_out, &mut rng);
                let addr = AddressingParams::new(&mut store, c.d_h, c.d_x, q, c.k, c.d_att, &mut rng);
                let w_m = store.add("mem.w_m", glorot(&mut rng, c.d_h, c.d_m));
                let mut arng = stream.child("addresses").rng();
                let addresses = store.add_buffer("mem.addresses", sparse_addresses(c.k, c.a, &mut arng));
                let aux = c.aux_head.then(|| AuxParams {
                    w_r: store.add("aux.w_r", glorot(&mut rng, q, c.d_out)),
                    w_x: store.add("aux.w_x", glorot(&mut rng, c.d_x, c.d_out)),
                    b: store.add("aux.b", Tensor::zeros(&[c.d_out])),
                });
                Ok(Model {
                    config,
                    store,
                    ctrl,
                    mem: Some(MemoryParams { addresses, w_m, addr }),
                    aux,
                })
            }
            Architecture::Lstm => {
                if c.aux_head {
                    return Err(Error::Config("the LSTM baseline has no auxiliary head".into()));
                }
                let ctrl = ControllerParams::new(&mut store, c.d_h, c.d_x, 0, c.d_out, &mut rng);
                Ok(Model {
                    config,
                    store,
                    ctrl,
                    mem: None,
                    aux: None,
                })
            }
        }
    }
}

/// How an episode is run.
#[derive(Clone, Debug)]
pub struct EpisodeOptions {
    pub read_mode: ReadMode,
    /// Gumbel noise in the RESET gates (training).
    pub noisy_resets: bool,
    /// Forward the continuous weights `w̄` instead of the one-hot read
    /// (smooth surrogate used by gradient checks).
    pub relaxed_reads: bool,
    /// Pinned read indices, `[t][b]`.
    pub forced_reads: Option<Vec<Vec<usize>>>,
    /// Constant `(α, β)` replacing the RESET gates.
    pub reset_override: Option<(f64, f64)>,
    /// Feed back the model's own argmax on feedback steps.
    pub free_running: bool,
}

impl EpisodeOptions {
    pub fn train(mode: ReadMode) -> Self {
        EpisodeOptions {
            read_mode: mode,
            noisy_resets: true,
            relaxed_reads: false,
            forced_reads: None,
            reset_override: None,
            free_running: false,
        }
    }

    pub fn eval() -> Self {
        EpisodeOptions {
            read_mode: ReadMode::Argmax,
            noisy_resets: false,
            relaxed_reads: false,
            forced_reads: None,
            reset_override: None,
            free_running: true,
        }
    }
}

/// Replaces channels `[channel_offset, channel_offset + n_classes)` of the
/// input with the one-hot of the previous step's predicted class on the
/// flagged `[t][b]` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Feedback {
    pub channel_offset: usize,
    pub n_classes: usize,
    pub steps: Vec<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct StepTrace {
    pub input: Var,
    pub decision: Option<ReadDecision>,
    pub read: Option<Var>,
    pub written: Vec<usize>,
    pub state: ControllerState,
    pub logits: Var,
    pub aux_logits: Option<Var>,
    pub resets: Option<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub steps: Vec<StepTrace>,
    /// Memory after every step (index 0 is the fresh memory).
    pub memories: Vec<MemoryState>,
}

/// One TARDIS step for a batch of episodes, in the order: logits, mask,
/// discretize, read, controller update, write-slot selection, write,
/// prediction. `t` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn tardis_step(
    g: &mut Graph,
    model: &Model,
    bound: &Bound,
    state: &ControllerState,
    memory: &MemoryState,
    x: Var,
    t: usize,
    opts: &EpisodeOptions,
    stream: &SeedStream,
) -> Result<(ControllerState, MemoryState, StepTrace)> {
    let mp = model
        .mem
        .as_ref()
        .ok_or_else(|| Error::invalid("tardis_step", "model has no memory"))?;
    let k = memory.config.k;
    let usage = g.constant(usage_tensor(&memory.usage_counts, k));
    let matrix = memory.matrix(g)?;
    let logits = read_logits(g, &mp.addr, bound, state.h, x, matrix, usage)?;
    let masked = mask_last_read(g, logits, &memory.last_read)?;
    let forced = opts.forced_reads.as_ref().map(|f| f[t - 1].as_slice());
    let mut rng = stream.child("read").rng();
    let decision = discretize(g, &mp.addr, bound, masked, state.h, opts.read_mode, forced, &mut rng)?;

    let weights = if opts.relaxed_reads {
        decision.weights
    } else if opts.read_mode == ReadMode::GumbelSt {
        g.straight_through(decision.onehot.clone(), decision.weights)?
    } else {
        g.constant(decision.onehot.clone())
    };
    let r = memory.read_weighted(g, weights, matrix)?;

    let pre = preactivations(g, &model.ctrl, bound, state.h, x, Some(r))?;
    let gs = gates(g, &model.ctrl, &pre)?;
    let resets = match opts.reset_override {
        Some((a, b)) => {
            let batch = memory.batch;
            (
                g.constant(Tensor::filled(&[batch, 1], a)),
                g.constant(Tensor::filled(&[batch, 1], b)),
            )
        }
        None => {
            let noise = opts
                .noisy_resets
                .then(|| reset_noise(&mut stream.child("reset").rng(), memory.batch));
            reset_gates(g, &model.ctrl, &pre, noise.as_ref())?
        }
    };
    let next = cell_update(g, &model.ctrl, state, &pre, &gs, Some(resets))?;

    let mut mem = memory.clone();
    mem.record_reads(&decision.indices);
    let slots = mem.select_write_slots(t, &decision.indices);
    let mem = mem.write(g, &slots, next.h, bound.var(mp.w_m))?;

    let logits_out = predict(g, &model.ctrl, bound, next.h, Some(r))?;
    let aux_logits = match model.aux {
        Some(aux) => {
            let rd = g.detach(r);
            let a = g.matmul(rd, bound.var(aux.w_r))?;
            let b = g.matmul(x, bound.var(aux.w_x))?;
            let s = g.add(a, b)?;
            Some(g.add(s, bound.var(aux.b))?)
        }
        None => None,
    };

    let trace = StepTrace {
        input: x,
        decision: Some(decision),
        read: Some(r),
        written: slots,
        state: next,
        logits: logits_out,
        aux_logits,
        resets: Some(resets),
    };
    Ok((next, mem, trace))
}

/// One LSTM baseline step.
pub fn lstm_step(g: &mut Graph, model: &Model, bound: &Bound, state: &ControllerState, x: Var) -> Result<(ControllerState, StepTrace)> {
    let pre = preactivations(g, &model.ctrl, bound, state.h, x, None)?;
    let gs = gates(g, &model.ctrl, &pre)?;
    let next = cell_update(g, &model.ctrl, state, &pre, &gs, None)?;
    let logits = predict(g, &model.ctrl, bound, next.h, None)?;
    let trace = StepTrace {
        input: x,
        decision: None,
        read: None,
        written: Vec::new(),
        state: next,
        logits,
        aux_logits: None,
        resets: None,
    };
    Ok((next, trace))
}

/// Runs `batch` episodes in lockstep over `inputs` (one `batch × d_x`
/// tensor per step). Noise for step `t` comes from `stream / t=<t>`.
pub fn run_episode(
    g: &mut Graph,
    model: &Model,
    bound: &Bound,
    inputs: &[Tensor],
    feedback: Option<&Feedback>,
    opts: &EpisodeOptions,
    stream: &SeedStream,
) -> Result<Episode> {
    let c = &model.config;
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("run_episode", "empty input sequence"))?;
    let (batch, d_x) = first.as_matrix();
    if d_x != c.d_x || first.rank() != 2 {
        return Err(Error::shape("run_episode", first.shape(), &[batch, c.d_x]));
    }
    if let Some(f) = &opts.forced_reads {
        if f.len() < inputs.len() {
            return Err(Error::invalid("run_episode", "forced reads shorter than the sequence"));
        }
    }
    let mut state = ControllerState::zeros(g, batch, c.d_h);
    let mut memory = match &model.mem {
        Some(mp) => Some(init_memory(g, c.memory(), model.store.get(mp.addresses), batch)?),
        None => None,
    };
    let mut memories: Vec<MemoryState> = memory.iter().cloned().collect();
    let mut steps: Vec<StepTrace> = Vec::with_capacity(inputs.len());

    for (ti, input) in inputs.iter().enumerate() {
        if input.shape() != first.shape() {
            return Err(Error::shape("run_episode", input.shape(), first.shape()));
        }
        let mut input = input.clone();
        if let (Some(fb), true, Some(prev)) = (feedback, opts.free_running, steps.last()) {
            let pv = g.value(prev.logits).clone();
            for b in 0..batch {
                if fb.steps[ti][b] {
                    let guess = argmax(&pv.row(b)[..fb.n_classes]);
                    let row = &mut input.row_mut(b)[fb.channel_offset..fb.channel_offset + fb.n_classes];
                    row.iter_mut().for_each(|v| *v = 0.0);
                    row[guess] = 1.0;
                }
            }
        }
        let x = g.constant(input);
        let t = ti + 1;
        let trace = match memory.take() {
            Some(mem) => {
                let (s, m, tr) = tardis_step(g, model, bound, &state, &mem, x, t, opts, &stream.indexed("t", t as u64))?;
                state = s;
                memories.push(m.clone());
                memory = Some(m);
                tr
            }
            None => {
                let (s, tr) = lstm_step(g, model, bound, &state, x)?;
                state = s;
                tr
            }
        };
        if !g.value(trace.logits).all_finite() {
            return Err(Error::NonFinite {
                what: format!("output logits at step {t}"),
            });
        }
        steps.push(trace);
    }
    Ok(Episode { steps, memories })
}
