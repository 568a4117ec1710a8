//! Message-level simulation of the decentralized scheme. The aggregator owns
//! the network model and the multipliers; each agent owns one EV's profile
//! and its private sensitivity column. Per iteration the aggregator sends one
//! broadcast and every agent answers with the change in its charging power.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fleet::PrivateKey;
use crate::solver::{
    constraint_scale, dual_step, ev_gradient, evaluate_constraints, make_record, mean_total_load, primal_update,
    should_stop, Aggregates, IterationRecord, Mode, Problem, SolverConfig,
};

const BYTES_PER_NUMBER: usize = 8;
/// Iteration number plus the two payload dimensions.
const BROADCAST_HEADER_BYTES: usize = 16;
/// EV identifier.
const REPLY_HEADER_BYTES: usize = 8;

/// Public data sent to every EV.
#[derive(Debug, Clone, PartialEq)]
pub struct BroadcastMessage {
    pub iter: usize,
    /// Baseline mean plus current EV charging, per slot (W).
    pub mean_total_load: Vec<f64>,
    /// h x K; column `k` is the multiplier-weighted constraint gradient of
    /// slot `k`. Zero columns for inactive slots.
    pub weighted_gradients: DMatrix<f64>,
}

impl BroadcastMessage {
    pub fn payload_len(&self) -> usize {
        self.mean_total_load.len() + self.weighted_gradients.len()
    }

    pub fn byte_size(&self) -> usize {
        BROADCAST_HEADER_BYTES + BYTES_PER_NUMBER * self.payload_len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentReply {
    pub ev: usize,
    /// `P̄ (u+ - u)` per slot (W).
    pub delta_aggregate: Vec<f64>,
    /// `||u+ - u||^2` and `||u+||^2`, used only by the relative-change
    /// stopping rule.
    pub step_sq: f64,
    pub norm_sq: f64,
}

impl AgentReply {
    pub fn payload_len(&self) -> usize {
        self.delta_aggregate.len() + 2
    }

    pub fn byte_size(&self) -> usize {
        REPLY_HEADER_BYTES + BYTES_PER_NUMBER * self.payload_len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Downlink,
    Uplink,
}

/// Traffic of one direction in one iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageRecord {
    pub iter: usize,
    pub direction: Direction,
    pub messages: usize,
    pub payload_elements: usize,
    pub bytes: usize,
}

/// One EV's local state. Nothing here refers to other EVs.
#[derive(Debug, Clone)]
pub struct Agent {
    pub id: usize,
    pbar_w: f64,
    required: f64,
    key: PrivateKey,
    u: Vec<f64>,
    rho: f64,
    alpha: f64,
    tau: f64,
}

impl Agent {
    pub fn new(problem: &Problem, config: &SolverConfig, id: usize) -> Result<Self> {
        Ok(Self {
            id,
            pbar_w: problem.pbar_w[id],
            required: problem.required[id],
            key: problem.private_key(id)?,
            u: vec![0.0; problem.horizon()],
            rho: config.rho_for(problem),
            alpha: config.alpha,
            tau: config.tau_u,
        })
    }

    pub fn profile(&self) -> &[f64] {
        &self.u
    }
}

/// Local gradient and update for one agent.
pub fn agent_round(agent: &mut Agent, msg: &BroadcastMessage) -> Result<AgentReply> {
    let k = agent.u.len();
    if msg.mean_total_load.len() != k {
        return Err(Error::dim("broadcast load profile", k, msg.mean_total_load.len()));
    }
    if msg.weighted_gradients.ncols() != k || msg.weighted_gradients.nrows() != agent.key.column().len() {
        return Err(Error::dim("broadcast gradient blocks", k, msg.weighted_gradients.ncols()));
    }
    let g = ev_gradient(
        agent.pbar_w,
        agent.key.column(),
        &agent.u,
        &msg.mean_total_load,
        &msg.weighted_gradients,
        agent.rho,
    );
    let next = primal_update(&agent.u, &g, agent.required, agent.alpha, agent.tau)?;
    let delta_aggregate = next.iter().zip(&agent.u).map(|(a, b)| agent.pbar_w * (a - b)).collect();
    let step_sq = next.iter().zip(&agent.u).map(|(a, b)| (a - b) * (a - b)).sum();
    let norm_sq = next.iter().map(|a| a * a).sum();
    agent.u = next;
    Ok(AgentReply {
        ev: agent.id,
        delta_aggregate,
        step_sq,
        norm_sq,
    })
}

/// Coordinator holding the network model, the multipliers and the running
/// aggregate of EV charging.
#[derive(Debug, Clone)]
pub struct Aggregator<'a> {
    problem: &'a Problem,
    config: &'a SolverConfig,
    mode: Mode,
    lambda: DMatrix<f64>,
    agg: Aggregates,
    iter: usize,
    small_steps: usize,
    pending: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl<'a> Aggregator<'a> {
    pub fn new(problem: &'a Problem, config: &'a SolverConfig, mode: Mode) -> Self {
        let cols = match mode {
            Mode::ChanceConstrained => 1,
            Mode::Deterministic => problem.node_count(),
        };
        Self {
            problem,
            config,
            mode,
            lambda: DMatrix::zeros(problem.horizon(), cols),
            agg: Aggregates::zero(problem),
            iter: 0,
            small_steps: 0,
            pending: None,
        }
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn aggregates(&self) -> &Aggregates {
        &self.agg
    }

    /// Evaluates the constraints, builds the broadcast for the current
    /// multipliers and then advances the multipliers.
    pub fn aggregator_round(&mut self) -> Result<BroadcastMessage> {
        let eval = evaluate_constraints(self.problem, self.config, self.mode, &self.agg, &self.lambda, self.iter)?;
        let msg = BroadcastMessage {
            iter: self.iter,
            mean_total_load: mean_total_load(self.problem, &self.agg),
            weighted_gradients: eval.weights,
        };
        let scale = constraint_scale(self.problem, self.config, self.mode);
        let next = dual_step(&self.lambda, self.config, &(&eval.d * scale))?;
        let old = std::mem::replace(&mut self.lambda, next);
        self.pending = Some((eval.d, old));
        Ok(msg)
    }

    /// Folds the replies in (in the given order) and closes the iteration.
    /// Returns the history entry and whether the run should stop.
    pub fn collect(&mut self, replies: &[AgentReply]) -> Result<(IterationRecord, bool)> {
        let (d, old_lambda) = self
            .pending
            .take()
            .ok_or_else(|| Error::Domain("replies collected before a broadcast".into()))?;
        let (mut step_sq, mut norm_sq) = (0.0, 0.0);
        for r in replies {
            if r.ev >= self.problem.ev_count() {
                return Err(Error::Domain(format!("reply from unknown EV {}", r.ev)));
            }
            if r.delta_aggregate.len() != self.problem.horizon() {
                return Err(Error::dim("reply length", self.problem.horizon(), r.delta_aggregate.len()));
            }
            self.agg.absorb(self.problem, r.ev, &r.delta_aggregate);
            step_sq += r.step_sq;
            norm_sq += r.norm_sq;
        }
        self.iter += 1;
        let stop = should_stop(self.config, self.iter, &mut self.small_steps, step_sq, norm_sq);
        let rho = self.config.rho_for(self.problem);
        let rec = make_record(
            self.problem,
            self.iter,
            &self.agg,
            rho,
            &d,
            &self.lambda,
            &old_lambda,
            step_sq,
            norm_sq,
        );
        Ok((rec, stop))
    }
}

#[derive(Debug, Clone)]
pub struct DecentralizedRun {
    /// Final agent profiles, in EV order.
    pub u: Vec<Vec<f64>>,
    pub lambda: DMatrix<f64>,
    pub history: Vec<IterationRecord>,
    pub log: Vec<MessageRecord>,
}

/// Full iteration loop through aggregator and agent rounds.
pub fn run_decentralized(problem: &Problem, config: &SolverConfig) -> Result<DecentralizedRun> {
    run_decentralized_mode(problem, config, Mode::ChanceConstrained)
}

pub fn run_decentralized_mode(problem: &Problem, config: &SolverConfig, mode: Mode) -> Result<DecentralizedRun> {
    config.validate()?;
    let mut aggregator = Aggregator::new(problem, config, mode);
    let mut agents: Vec<Agent> = (0..problem.ev_count())
        .map(|i| Agent::new(problem, config, i))
        .collect::<Result<_>>()?;
    let mut history = Vec::new();
    let mut log = Vec::new();
    loop {
        let msg = aggregator.aggregator_round()?;
        log.push(MessageRecord {
            iter: msg.iter + 1,
            direction: Direction::Downlink,
            messages: 1,
            payload_elements: msg.payload_len(),
            bytes: msg.byte_size(),
        });
        let replies: Vec<AgentReply> = agents
            .iter_mut()
            .map(|a| agent_round(a, &msg))
            .collect::<Result<_>>()?;
        log.push(MessageRecord {
            iter: msg.iter + 1,
            direction: Direction::Uplink,
            messages: replies.len(),
            payload_elements: replies.iter().map(AgentReply::payload_len).sum(),
            bytes: replies.iter().map(AgentReply::byte_size).sum(),
        });
        let (rec, stop) = aggregator.collect(&replies)?;
        history.push(rec);
        if stop {
            break;
        }
    }
    Ok(DecentralizedRun {
        u: agents.into_iter().map(|a| a.u).collect(),
        lambda: aggregator.lambda,
        history,
        log,
    })
}
