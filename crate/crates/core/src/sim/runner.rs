//! The simulation orchestrator.
//!
//! Work is organised in serving lanes. The pipeline lane runs batches over a
//! chain of GPUs while loading continues in the background; single lanes run
//! the whole model on one GPU (baselines, and after the strategy switch).
//! Each GPU has one compute queue shared by every lane that uses it and one
//! host link used by its loader.

use std::collections::{BTreeMap, BTreeSet};

use crate::catalog::{partition_model, AdapterId, AdapterSpec, CheckpointLocation, ModelSpec, Segment};
use crate::chain::{PipelineChain, Stage};
use crate::cluster::{decode_step_time, prefill_time, transfer_time};
use crate::engine::{Batch, BatchId, BatchPhase, KvLedger, Request, RequestId, RequestStage};
use crate::error::{Result, SimError};
use crate::lora::{epoch_tick, merge_seconds, AdapterKey, AdapterQueues, EpochConfig, LoraMode, LoraScheduling};
use crate::planner::{
    next_transfer, owned_by, plan_loading, AdapterOwners, GpuId, GpuState, LoadItem, LoadPlan,
    LoadStrategy,
};
use crate::recovery::{find_pipeline_chain, full_recovery_baseline, reassign_layers, reconstruct_kv, RecoveryMode};
use crate::scenario::Scenario;
use crate::sim::{generate_workload, sub_rng, EventQueue};
use crate::switcher::{check_switch, RouteCandidate, Router, ServingMode, SwitchState};
use crate::time::SimTime;
use crate::trace::{ColdPhase, Link, Trace, TraceRecord};

use rand::Rng;
use rand_distr::{Distribution, Exp1};

/// Hard stop against runaway scenarios.
const MAX_EVENTS: u64 = 200_000_000;

#[derive(Debug, Clone)]
enum Ev {
    LoadersStart,
    Arrival(RequestId),
    LoadStep { gpu: GpuId, token: u64 },
    TaskDone { gpu: GpuId, token: u64 },
    EpochTick { lane: usize, token: u64 },
    Crash(GpuId),
    RecoveryStart,
    RestartLoading,
    Dispatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LoadPhase {
    HostConvert,
    Transfer,
    Convert,
}

#[derive(Debug, Clone)]
struct LoadOp {
    item: LoadItem,
    bytes: u64,
    phase: LoadPhase,
    start: SimTime,
}

#[derive(Debug, Clone)]
struct Task {
    batch: BatchId,
    stage: usize,
    phase: BatchPhase,
    adapter: AdapterKey,
}

impl Task {
    fn rank(&self) -> (u8, BatchId) {
        (u8::from(!self.phase.is_prefill_like()), self.batch)
    }
}

#[derive(Debug, Clone)]
enum Busy {
    Task {
        task: Task,
        start: SimTime,
        compute_end: SimTime,
        hop: Option<(GpuId, u64)>,
    },
    Merge {
        from: AdapterKey,
        to: AdapterKey,
        start: SimTime,
    },
}

#[derive(Debug, Clone)]
struct Gpu {
    state: GpuState,
    load: Option<LoadOp>,
    load_token: u64,
    tasks: Vec<Task>,
    busy: Option<Busy>,
    busy_token: u64,
    /// Adapter currently merged into the base weights.
    active: AdapterKey,
    /// Adapter this GPU is expected to serve, used for routing affinity.
    affinity: AdapterKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LaneKind {
    Pipeline,
    Single(GpuId),
}

#[derive(Debug, Clone)]
struct Lane {
    kind: LaneKind,
    chain: Option<PipelineChain>,
    alive: bool,
    /// Accepts new requests.
    open: bool,
    queue: AdapterQueues,
    running: BTreeSet<RequestId>,
    idle_decode: BTreeSet<RequestId>,
    idle_recon: BTreeSet<RequestId>,
    in_flight: BTreeSet<BatchId>,
    sched: AdapterKey,
    epoch_start: SimTime,
    waiting_since: BTreeMap<AdapterKey, SimTime>,
    tick_pending: bool,
    tick_token: u64,
}

impl Lane {
    fn new(kind: LaneKind, adapters: &[AdapterId], now: SimTime) -> Self {
        Lane {
            kind,
            chain: None,
            alive: true,
            open: true,
            queue: AdapterQueues::new(adapters.iter().cloned()),
            running: BTreeSet::new(),
            idle_decode: BTreeSet::new(),
            idle_recon: BTreeSet::new(),
            in_flight: BTreeSet::new(),
            sched: None,
            epoch_start: now,
            waiting_since: BTreeMap::new(),
            tick_pending: false,
            tick_token: 0,
        }
    }

    fn label(&self) -> String {
        match self.kind {
            LaneKind::Pipeline => "pipeline".into(),
            LaneKind::Single(g) => format!("gpu{g}"),
        }
    }

    fn mode(&self) -> ServingMode {
        match self.kind {
            LaneKind::Pipeline => ServingMode::PipelineParallel,
            LaneKind::Single(_) => ServingMode::SingleGpu,
        }
    }
}

#[derive(Debug, Clone)]
struct BatchRun {
    batch: Batch,
    lane: usize,
    chain: PipelineChain,
    stage: usize,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Trace,
    pub requests: Vec<Request>,
    /// Serving mode each request was last admitted under.
    pub modes: Vec<Option<ServingMode>>,
    pub scenario_hash: String,
    pub seed: u64,
    pub end_time: SimTime,
    pub switch_time: Option<SimTime>,
}

pub fn run(scenario: &Scenario) -> Result<RunResult> {
    Simulation::new(scenario)?.run()
}

pub struct Simulation {
    sc: Scenario,
    model: ModelSpec,
    adapters: Vec<AdapterSpec>,
    adapter_ids: Vec<AdapterId>,
    owners: AdapterOwners,
    segments: Vec<Segment>,
    n_seg: u32,
    eff_pcie: f64,
    epoch: EpochConfig,
    q: EventQueue<Ev>,
    trace: Trace,
    requests: Vec<Request>,
    modes: Vec<Option<ServingMode>>,
    gpus: Vec<Gpu>,
    plan: LoadPlan,
    ledger: KvLedger,
    lanes: Vec<Lane>,
    pipeline_lane: Option<usize>,
    single_lanes: Vec<Option<usize>>,
    batches: BTreeMap<BatchId, BatchRun>,
    next_batch: BatchId,
    switch: SwitchState,
    router: Router,
    pending: Vec<RequestId>,
    host_convert_free: SimTime,
    loaders_enabled: bool,
    dispatch_scheduled: bool,
    /// A scheduled recovery also covers crashes detected before it runs.
    recovery_pending: bool,
}

fn secs(s: f64) -> SimTime {
    SimTime::from_secs_ceil(s)
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        if let Err(mut errs) = scenario.validate() {
            return Err(errs.remove(0));
        }
        let sc = scenario.clone();
        let model = sc.model_spec()?;
        let adapters = sc.adapter_specs()?;
        let adapter_ids = sc.adapter_ids();
        let owners = sc.owners();
        let gpu_count = sc.cluster.gpu_count;
        let segments = partition_model(&model, gpu_count)?;
        let plan = plan_loading(sc.loading.strategy, &segments, &adapter_ids, &owners, gpu_count)?;
        let requests = generate_workload(&sc.workload, &sc.workload_adapters(), sc.seed)?;
        let gpus = (0..gpu_count)
            .map(|g| {
                let owned = owned_by(&owners, g);
                Gpu {
                    state: GpuState::new(g),
                    load: None,
                    load_token: 0,
                    tasks: Vec::new(),
                    busy: None,
                    busy_token: 0,
                    active: None,
                    affinity: if owned.len() == 1 { owned.into_iter().next() } else { None },
                }
            })
            .collect();
        let n_seg = segments.len() as u32;
        Ok(Simulation {
            eff_pcie: sc.cluster.effective_pcie_bandwidth(),
            epoch: sc.lora.epoch_config(),
            q: EventQueue::new(),
            trace: Trace {
                header: format!("scenario {} seed {}", sc.hash(), sc.seed),
                records: Vec::new(),
            },
            modes: vec![None; requests.len()],
            requests,
            gpus,
            plan,
            ledger: KvLedger::new(model.layer_count),
            lanes: Vec::new(),
            pipeline_lane: None,
            single_lanes: vec![None; gpu_count as usize],
            batches: BTreeMap::new(),
            next_batch: 0,
            switch: SwitchState::default(),
            router: Router::default(),
            pending: Vec::new(),
            host_convert_free: SimTime::ZERO,
            loaders_enabled: false,
            dispatch_scheduled: false,
            recovery_pending: false,
            n_seg,
            segments,
            model,
            adapters,
            adapter_ids,
            owners,
            sc,
        })
    }

    fn now(&self) -> SimTime {
        self.q.now()
    }

    fn invariant(&self, message: impl Into<String>) -> SimError {
        SimError::Invariant {
            event_index: self.q.processed(),
            message: message.into(),
        }
    }

    fn pipelined(&self) -> bool {
        self.sc.loading.strategy == LoadStrategy::PipelineParallel
    }

    fn mode(&self) -> ServingMode {
        if self.pipelined() {
            self.switch.mode
        } else {
            ServingMode::SingleGpu
        }
    }

    fn adapter_spec(&self, id: &AdapterId) -> Option<&AdapterSpec> {
        self.adapters.iter().find(|a| &a.adapter_id == id)
    }

    fn adapter_bytes(&self, key: &AdapterKey, layers: &std::ops::Range<u32>) -> u64 {
        key.as_ref()
            .and_then(|a| self.adapter_spec(a))
            .map_or(0, |a| a.bytes_for_layers(&self.model, layers))
    }

    fn item_bytes(&self, item: &LoadItem) -> u64 {
        match item {
            LoadItem::Segment(s) => self.segments[*s as usize].bytes,
            LoadItem::AdapterPart(a, s) => {
                self.adapter_bytes(&Some(a.clone()), &self.segments[*s as usize].layer_range)
            }
        }
    }

    // ---- setup -------------------------------------------------------------

    fn start(&mut self) -> Result<()> {
        for r in &self.requests {
            self.q.schedule(r.arrival_time, Ev::Arrival(r.request_id))?;
        }
        self.schedule_faults()?;
        if self.pipelined() {
            let lane = Lane::new(LaneKind::Pipeline, &self.adapter_ids, SimTime::ZERO);
            self.lanes.push(lane);
            self.pipeline_lane = Some(self.lanes.len() - 1);
        }
        if self.sc.loading.warm_start {
            self.warm_start()?;
            return Ok(());
        }
        let mut t = SimTime::ZERO;
        if self.model.checkpoint_location == CheckpointLocation::Ssd {
            let model_bytes = self.model.total_bytes();
            let lora_bytes: u64 = self.adapters.iter().map(|a| a.total_bytes(&self.model)).sum();
            for (phase, bytes) in [
                (ColdPhase::LoadCkptDram, model_bytes),
                (ColdPhase::LoadLoraCkptDram, lora_bytes),
            ] {
                let end = t + secs(transfer_time(bytes, self.sc.cluster.ssd_bandwidth, 0.0)?);
                if bytes > 0 {
                    self.trace.push(TraceRecord::Transfer {
                        link: Link::Ssd,
                        what: phase.to_string(),
                        bytes,
                        start: t,
                        end,
                        cancelled: false,
                    });
                }
                self.trace.push(TraceRecord::Phase { phase, start: t, end });
                t = end;
            }
        }
        let end = t + secs(self.sc.loading.init_meta);
        self.trace.push(TraceRecord::Phase {
            phase: ColdPhase::InitMeta,
            start: t,
            end,
        });
        self.q.schedule(end, Ev::LoadersStart)
    }

    fn warm_start(&mut self) -> Result<()> {
        for g in 0..self.gpus.len() {
            let mut hbm = 0;
            for s in 0..self.n_seg {
                self.gpus[g].state.loaded_segments.insert(s);
                hbm += self.segments[s as usize].bytes;
                for a in self.adapter_ids.clone() {
                    hbm += self.item_bytes(&LoadItem::AdapterPart(a.clone(), s));
                    self.gpus[g].state.loaded_adapter_parts.insert((a, s));
                }
            }
            self.gpus[g].state.hbm_used = hbm;
        }
        self.loaders_enabled = true;
        if let Some(l) = self.pipeline_lane {
            let chain = PipelineChain {
                stages: self
                    .segments
                    .iter()
                    .enumerate()
                    .map(|(g, s)| Stage {
                        gpu: g as GpuId,
                        layers: s.layer_range.clone(),
                    })
                    .collect(),
            };
            self.adopt_chain(l, chain)?;
            self.maybe_switch()?;
        } else {
            for g in 0..self.gpus.len() as GpuId {
                self.create_single_lane(g)?;
            }
        }
        Ok(())
    }

    fn schedule_faults(&mut self) -> Result<()> {
        let mut rng = sub_rng(self.sc.seed, "faults");
        let mut times = Vec::new();
        for c in &self.sc.faults.crash {
            let t = match (c.time, c.window) {
                (Some(t), _) => t,
                (None, Some([a, b])) => rng.random_range(a..b),
                (None, None) => continue,
            };
            times.push((secs(t), c.gpu));
        }
        let rate = self.sc.faults.poisson_rate;
        if rate > 0.0 {
            let mut t = 0.0;
            loop {
                let gap: f64 = Exp1.sample(&mut rng);
                t += gap / rate;
                if t > self.sc.workload.duration {
                    break;
                }
                let gpu = rng.random_range(0..self.sc.cluster.gpu_count);
                times.push((secs(t), gpu));
            }
        }
        for (t, gpu) in times {
            self.q.schedule(t, Ev::Crash(gpu))?;
        }
        Ok(())
    }

    // ---- main loop -----------------------------------------------------------

    pub fn run(mut self) -> Result<RunResult> {
        self.start()?;
        while let Some(ev) = self.q.pop() {
            if self.q.processed() > MAX_EVENTS {
                return Err(self.invariant("event budget exhausted"));
            }
            self.handle(ev.kind)?;
        }
        let end_time = self.now();
        Ok(RunResult {
            trace: self.trace,
            requests: self.requests,
            modes: self.modes,
            scenario_hash: self.sc.hash(),
            seed: self.sc.seed,
            end_time,
            switch_time: self.switch.switch_time,
        })
    }

    fn handle(&mut self, ev: Ev) -> Result<()> {
        match ev {
            Ev::LoadersStart | Ev::RestartLoading => {
                self.loaders_enabled = true;
                for g in 0..self.gpus.len() as GpuId {
                    self.start_loader(g)?;
                }
                Ok(())
            }
            Ev::Arrival(r) => self.on_arrival(r),
            Ev::LoadStep { gpu, token } => self.on_load_step(gpu, token),
            Ev::TaskDone { gpu, token } => self.on_task_done(gpu, token),
            Ev::EpochTick { lane, token } => self.on_epoch_tick(lane, token),
            Ev::Crash(g) => self.on_crash(g),
            Ev::RecoveryStart => self.on_recovery_start(),
            Ev::Dispatch => {
                self.dispatch_scheduled = false;
                self.dispatch_pending()
            }
        }
    }

    // ---- arrivals and routing -----------------------------------------------

    fn on_arrival(&mut self, r: RequestId) -> Result<()> {
        let now = self.now();
        let adapter = self.requests[r as usize].adapter_id.clone();
        self.trace.push(TraceRecord::Arrival {
            time: now,
            request: r,
            adapter: adapter.clone(),
        });
        if let Some(a) = &adapter {
            if self.adapter_spec(a).is_none() {
                self.trace.push(TraceRecord::Rejected {
                    time: now,
                    request: r,
                    reason: format!("unknown adapter {a}"),
                });
                return Ok(());
            }
        }
        match self.pipeline_lane {
            Some(l) if self.lanes[l].open && self.mode() == ServingMode::PipelineParallel => {
                self.lanes[l].queue.enqueue_by_adapter(r, &adapter)?;
                self.pump(l)
            }
            _ => {
                self.pending.push(r);
                self.dispatch_pending()
            }
        }
    }

    fn schedule_dispatch(&mut self) -> Result<()> {
        if !self.dispatch_scheduled {
            self.dispatch_scheduled = true;
            self.q.schedule(self.now(), Ev::Dispatch)?;
        }
        Ok(())
    }

    fn route_candidates(&self, adapter: &AdapterKey) -> Vec<RouteCandidate> {
        let full = 0..self.model.layer_count;
        self.single_lanes
            .iter()
            .enumerate()
            .filter_map(|(g, l)| l.map(|l| (g, l)))
            .filter(|&(g, l)| self.lanes[l].alive && self.lanes[l].open && self.gpus[g].state.alive)
            .map(|(g, _)| {
                let gpu = &self.gpus[g];
                let mut cost = 0.0;
                if self.sc.lora.mode == LoraMode::Merged && &gpu.active != adapter {
                    cost += merge_seconds(
                        self.adapter_bytes(&gpu.active, &full),
                        self.adapter_bytes(adapter, &full),
                        self.sc.compute.merge_rate,
                    );
                }
                if let Some(a) = adapter {
                    let missing: u64 = (0..self.n_seg)
                        .filter(|&s| !gpu.state.loaded_adapter_parts.contains(&(a.clone(), s)))
                        .map(|s| self.item_bytes(&LoadItem::AdapterPart(a.clone(), s)))
                        .sum();
                    cost += missing as f64 / self.eff_pcie;
                }
                RouteCandidate {
                    gpu: g as GpuId,
                    active: gpu.affinity.clone(),
                    switch_cost: cost,
                }
            })
            .collect()
    }

    /// Hands waiting requests to single lanes.
    fn dispatch_pending(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let mut waiting = std::mem::take(&mut self.pending);
        waiting.sort_unstable();
        let mut touched = BTreeSet::new();
        for r in waiting {
            let adapter = self.requests[r as usize].adapter_id.clone();
            let cands = self.route_candidates(&adapter);
            let Some(g) = self.router.pick(&adapter, &cands) else {
                self.pending.push(r);
                continue;
            };
            self.gpus[g as usize].affinity = adapter.clone();
            let l = self.single_lanes[g as usize].expect("candidate has a lane");
            self.place_in_lane(l, r)?;
            touched.insert(l);
        }
        for l in touched {
            self.pump(l)?;
        }
        Ok(())
    }

    /// Adds a request to a lane: queued if it has no progress to keep,
    /// otherwise admitted directly for KV reconstruction.
    fn place_in_lane(&mut self, l: usize, r: RequestId) -> Result<()> {
        let req = &mut self.requests[r as usize];
        let adapter = req.adapter_id.clone();
        if req.ttft.is_some() && req.stage != RequestStage::Queued {
            req.stage = RequestStage::AwaitingReconstruction;
            self.modes[r as usize] = Some(self.lanes[l].mode());
            self.lanes[l].running.insert(r);
            self.lanes[l].idle_recon.insert(r);
        } else {
            req.stage = RequestStage::Queued;
            self.lanes[l].queue.enqueue_by_adapter(r, &adapter)?;
        }
        Ok(())
    }

    // ---- loading -------------------------------------------------------------

    fn start_loader(&mut self, g: GpuId) -> Result<()> {
        let gi = g as usize;
        if !self.loaders_enabled || !self.gpus[gi].state.alive || self.gpus[gi].load.is_some() {
            return Ok(());
        }
        let Some(item) = next_transfer(&self.plan, &self.gpus[gi].state) else {
            return Ok(());
        };
        let bytes = self.item_bytes(&item);
        let phase = if self.sc.loading.strategy == LoadStrategy::FullCopyCpuConvert {
            LoadPhase::HostConvert
        } else {
            LoadPhase::Transfer
        };
        self.begin_phase(g, item, bytes, phase)
    }

    fn begin_phase(&mut self, g: GpuId, item: LoadItem, bytes: u64, phase: LoadPhase) -> Result<()> {
        let now = self.now();
        let rate = self.sc.cluster.convert_rate;
        let (start, end) = match phase {
            LoadPhase::HostConvert => {
                // One host converter shared by every GPU, first come first served.
                let start = now.max(self.host_convert_free);
                let end = start + secs(bytes as f64 / rate);
                self.host_convert_free = end;
                (start, end)
            }
            LoadPhase::Transfer => (now, now + secs(bytes as f64 / self.eff_pcie)),
            LoadPhase::Convert => (now, now + secs(bytes as f64 / rate)),
        };
        let gpu = &mut self.gpus[g as usize];
        gpu.load_token += 1;
        gpu.load = Some(LoadOp {
            item,
            bytes,
            phase,
            start,
        });
        let token = gpu.load_token;
        self.q.schedule(end, Ev::LoadStep { gpu: g, token })
    }

    fn record_load_phase(&mut self, g: GpuId, op: &LoadOp, end: SimTime, cancelled: bool) {
        if end < op.start {
            return;
        }
        match op.phase {
            LoadPhase::Transfer => {
                let bytes = if cancelled {
                    let moved = (self.eff_pcie * (end - op.start).as_secs_f64()).floor() as u64;
                    moved.min(op.bytes)
                } else {
                    op.bytes
                };
                self.trace.push(TraceRecord::Transfer {
                    link: Link::Pcie(g),
                    what: op.item.to_string(),
                    bytes,
                    start: op.start,
                    end,
                    cancelled,
                });
            }
            LoadPhase::HostConvert | LoadPhase::Convert => {
                self.trace.push(TraceRecord::Convert {
                    gpu: g,
                    item: op.item.clone(),
                    start: op.start,
                    end,
                    cancelled,
                });
            }
        }
    }

    fn cancel_loader(&mut self, g: GpuId) {
        let now = self.now();
        if let Some(op) = self.gpus[g as usize].load.take() {
            self.record_load_phase(g, &op, now, true);
        }
        self.gpus[g as usize].load_token += 1;
    }

    fn on_load_step(&mut self, g: GpuId, token: u64) -> Result<()> {
        let gi = g as usize;
        if self.gpus[gi].load_token != token {
            return Ok(());
        }
        let Some(op) = self.gpus[gi].load.take() else {
            return Ok(());
        };
        let now = self.now();
        self.record_load_phase(g, &op, now, false);
        let next = match (self.sc.loading.strategy, op.phase) {
            (LoadStrategy::FullCopyCpuConvert, LoadPhase::HostConvert) => Some(LoadPhase::Transfer),
            (LoadStrategy::FullCopyCpuConvert, _) => None,
            (_, LoadPhase::Transfer) => Some(LoadPhase::Convert),
            _ => None,
        };
        if let Some(phase) = next {
            return self.begin_phase(g, op.item, op.bytes, phase);
        }
        let state = &mut self.gpus[gi].state;
        match &op.item {
            LoadItem::Segment(s) => {
                state.loaded_segments.insert(*s);
            }
            LoadItem::AdapterPart(a, s) => {
                state.loaded_adapter_parts.insert((a.clone(), *s));
            }
        }
        state.hbm_used += op.bytes;
        if state.hbm_used > self.sc.cluster.hbm_capacity {
            return Err(self.invariant(format!("GPU {g} exceeds its HBM capacity")));
        }
        self.trace.push(TraceRecord::Loaded {
            time: now,
            gpu: g,
            item: op.item.clone(),
        });
        self.on_loaded(g)
    }

    fn on_loaded(&mut self, g: GpuId) -> Result<()> {
        if let Some(l) = self.pipeline_lane {
            if self.lanes[l].alive && self.lanes[l].chain.is_none() && self.loaders_enabled {
                if let Some(chain) = find_pipeline_chain(&self.states(), &self.segments) {
                    self.adopt_chain(l, chain)?;
                }
            }
        }
        if self.mode() == ServingMode::SingleGpu
            && self.single_lanes[g as usize].is_none()
            && self.gpus[g as usize].state.holds_all(self.n_seg)
        {
            self.create_single_lane(g)?;
        }
        self.maybe_switch()?;
        self.try_start(g)?;
        self.start_loader(g)
    }

    fn states(&self) -> Vec<GpuState> {
        self.gpus.iter().map(|g| g.state.clone()).collect()
    }

    // ---- lanes -----------------------------------------------------------------

    fn adopt_chain(&mut self, l: usize, chain: PipelineChain) -> Result<()> {
        chain.validate(self.model.layer_count)?;
        self.trace.push(TraceRecord::ChainReady {
            time: self.now(),
            chain: chain.clone(),
        });
        let running: Vec<RequestId> = self.lanes[l].idle_decode.iter().copied().collect();
        for r in running {
            if !self.ledger.complete_for(r, &chain) {
                self.lanes[l].idle_decode.remove(&r);
                self.lanes[l].idle_recon.insert(r);
                self.requests[r as usize].stage = RequestStage::AwaitingReconstruction;
            }
        }
        self.lanes[l].chain = Some(chain);
        self.pump(l)
    }

    fn create_single_lane(&mut self, g: GpuId) -> Result<()> {
        let lane = Lane::new(LaneKind::Single(g), &self.adapter_ids, self.now());
        self.lanes.push(lane);
        let l = self.lanes.len() - 1;
        self.single_lanes[g as usize] = Some(l);
        self.adopt_chain(l, PipelineChain::single(g, self.model.layer_count))?;
        self.schedule_dispatch()
    }

    fn maybe_switch(&mut self) -> Result<()> {
        if !self.pipelined()
            || !self.sc.switch.enabled
            || self.switch.mode == ServingMode::SingleGpu
            || !self.loaders_enabled
            || !check_switch(&self.states(), &self.owners, self.n_seg)
        {
            return Ok(());
        }
        let now = self.now();
        let l = self.pipeline_lane.expect("pipelined runs have a pipeline lane");
        let in_flight: Vec<BatchId> = self.lanes[l].in_flight.iter().copied().collect();
        self.switch.fire(now, in_flight)?;
        self.trace.push(TraceRecord::StrategySwitch { time: now });
        self.lanes[l].open = false;
        for (_, r) in self.lanes[l].queue.drain_all() {
            self.pending.push(r);
        }
        if self.lanes[l].chain.is_none() {
            let lane = &mut self.lanes[l];
            let stranded: Vec<RequestId> = lane.running.iter().copied().collect();
            lane.running.clear();
            lane.idle_decode.clear();
            lane.idle_recon.clear();
            self.pending.extend(stranded);
        }
        for g in 0..self.gpus.len() as GpuId {
            if self.gpus[g as usize].state.alive && self.single_lanes[g as usize].is_none() {
                self.create_single_lane(g)?;
            }
        }
        self.retire_pipeline_if_drained()
    }

    fn retire_pipeline_if_drained(&mut self) -> Result<()> {
        let Some(l) = self.pipeline_lane else {
            return Ok(());
        };
        let lane = &self.lanes[l];
        if lane.open || !lane.alive || !lane.running.is_empty() || !lane.in_flight.is_empty() {
            return Ok(());
        }
        self.lanes[l].alive = false;
        let now = self.now();
        for g in 0..self.gpus.len() {
            let state = &self.gpus[g].state;
            if !state.alive || !state.holds_all(self.n_seg) {
                continue;
            }
            let owned = owned_by(&self.owners, g as GpuId);
            let before = state.loaded_adapter_parts.len();
            let next = crate::planner::discard_surplus_adapter_parts(state, &owned, self.n_seg, |a, s| {
                self.item_bytes(&LoadItem::AdapterPart(a.clone(), s))
            })?;
            let dropped = before - next.loaded_adapter_parts.len();
            if dropped > 0 {
                self.gpus[g].state = next;
                self.trace.push(TraceRecord::Discard {
                    time: now,
                    gpu: g as GpuId,
                    parts: dropped as u32,
                });
            }
        }
        Ok(())
    }

    fn adapter_keys_with_work(&self, l: usize, include_in_flight: bool) -> BTreeSet<AdapterKey> {
        let lane = &self.lanes[l];
        let mut keys: BTreeSet<AdapterKey> = lane.queue.non_empty().cloned().collect();
        for r in lane.idle_decode.iter().chain(&lane.idle_recon) {
            keys.insert(self.requests[*r as usize].adapter_id.clone());
        }
        if include_in_flight {
            for b in &lane.in_flight {
                keys.insert(self.batches[b].batch.adapter_id.clone());
            }
        }
        keys
    }

    /// Forms batches for a lane while it has pipeline slots free.
    fn pump(&mut self, l: usize) -> Result<()> {
        if !self.lanes[l].alive || self.lanes[l].chain.is_none() {
            return Ok(());
        }
        let stages = self.lanes[l].chain.as_ref().map_or(1, |c| c.stages.len());
        while self.lanes[l].in_flight.len() < stages {
            let choice = if self.sc.lora.mode == LoraMode::Unmerged
                || self.sc.lora.scheduling == LoraScheduling::Eager
            {
                self.choose_in_order(l)
            } else {
                self.choose_epoch(l)
            };
            let Some((adapter, phase, reqs)) = choice else {
                break;
            };
            self.form_batch(l, adapter, phase, reqs)?;
        }
        self.update_epoch_timer(l)?;
        if self.pipeline_lane == Some(l) {
            self.retire_pipeline_if_drained()?;
        }
        Ok(())
    }

    fn room(&self, l: usize) -> usize {
        (self.sc.batching.max_batch_size as usize).saturating_sub(self.lanes[l].running.len())
    }

    fn take_for(&self, l: usize, key: &AdapterKey) -> Option<(BatchPhase, Vec<RequestId>)> {
        let lane = &self.lanes[l];
        let max = self.sc.batching.max_batch_size as usize;
        let of_key = |set: &BTreeSet<RequestId>| -> Vec<RequestId> {
            set.iter()
                .copied()
                .filter(|r| &self.requests[*r as usize].adapter_id == key)
                .take(max)
                .collect()
        };
        let recon = of_key(&lane.idle_recon);
        if !recon.is_empty() {
            return Some((BatchPhase::Reconstruct, recon));
        }
        let room = self.room(l);
        if room > 0 {
            if let Some(q) = lane.queue.queue(key) {
                let take: Vec<RequestId> = q.iter().copied().take(room.min(max)).collect();
                if !take.is_empty() {
                    return Some((BatchPhase::Prefill, take));
                }
            }
        }
        let decode = of_key(&lane.idle_decode);
        (!decode.is_empty()).then_some((BatchPhase::Decode, decode))
    }

    /// Epoch policy: serve the lane's current adapter; move on early only
    /// when it has no work at all.
    fn choose_epoch(&mut self, l: usize) -> Option<(AdapterKey, BatchPhase, Vec<RequestId>)> {
        let current = self.lanes[l].sched.clone();
        let busy = self.adapter_keys_with_work(l, true);
        if !busy.contains(&current) {
            let formable = self.adapter_keys_with_work(l, false);
            let next = formable
                .iter()
                .find(|k| **k > current)
                .or_else(|| formable.iter().next())
                .cloned()?;
            self.switch_lane_adapter(l, next);
        }
        let key = self.lanes[l].sched.clone();
        self.take_for(l, &key).map(|(p, rs)| (key, p, rs))
    }

    fn switch_lane_adapter(&mut self, l: usize, to: AdapterKey) {
        let now = self.now();
        let lane = &mut self.lanes[l];
        if lane.sched != to {
            self.trace.push(TraceRecord::AdapterSwitch {
                time: now,
                lane: lane.label(),
                to: to.clone(),
            });
        }
        lane.waiting_since.remove(&to);
        lane.sched = to;
        lane.epoch_start = now;
    }

    /// Arrival-order policy: the oldest available request picks adapter and
    /// phase; the batch is the contiguous run that matches both.
    fn choose_in_order(&self, l: usize) -> Option<(AdapterKey, BatchPhase, Vec<RequestId>)> {
        let lane = &self.lanes[l];
        let max = self.sc.batching.max_batch_size as usize;
        let room = self.room(l);
        let mut avail: Vec<(RequestId, BatchPhase)> = Vec::new();
        avail.extend(lane.idle_recon.iter().map(|&r| (r, BatchPhase::Reconstruct)));
        avail.extend(lane.idle_decode.iter().map(|&r| (r, BatchPhase::Decode)));
        if room > 0 {
            // Only the heads of the queues that admission could reach.
            for k in lane.queue.non_empty() {
                let q = lane.queue.queue(k).expect("non-empty queue exists");
                avail.extend(q.iter().take(room).map(|&r| (r, BatchPhase::Prefill)));
            }
        }
        avail.sort_unstable();
        let (first, phase) = *avail.first()?;
        let key = self.requests[first as usize].adapter_id.clone();
        let cap = if phase == BatchPhase::Prefill { room.min(max) } else { max };
        let reqs: Vec<RequestId> = avail
            .iter()
            .take_while(|(r, p)| *p == phase && self.requests[*r as usize].adapter_id == key)
            .map(|(r, _)| *r)
            .take(cap)
            .collect();
        Some((key, phase, reqs))
    }

    fn update_epoch_timer(&mut self, l: usize) -> Result<()> {
        if self.sc.lora.mode == LoraMode::Unmerged || self.sc.lora.scheduling == LoraScheduling::Eager {
            return Ok(());
        }
        let now = self.now();
        let formable = self.adapter_keys_with_work(l, false);
        let lane = &mut self.lanes[l];
        let sched = lane.sched.clone();
        lane.waiting_since.retain(|k, _| formable.contains(k) && *k != sched);
        for k in &formable {
            if *k != sched {
                lane.waiting_since.entry(k.clone()).or_insert(now);
            }
        }
        if lane.waiting_since.is_empty() || lane.tick_pending || !lane.alive {
            return Ok(());
        }
        lane.tick_pending = true;
        lane.tick_token += 1;
        let at = (lane.epoch_start + self.epoch.epoch_length).max(now);
        let token = lane.tick_token;
        self.q.schedule(at, Ev::EpochTick { lane: l, token })
    }

    fn on_epoch_tick(&mut self, l: usize, token: u64) -> Result<()> {
        if self.lanes[l].tick_token != token || !self.lanes[l].alive {
            return Ok(());
        }
        self.lanes[l].tick_pending = false;
        let now = self.now();
        let formable = self.adapter_keys_with_work(l, false);
        let lane = &self.lanes[l];
        let pending: Vec<(AdapterKey, SimTime)> = formable
            .iter()
            .map(|k| (k.clone(), lane.waiting_since.get(k).copied().unwrap_or(now)))
            .collect();
        match epoch_tick(now, lane.epoch_start, &lane.sched, &pending, &self.epoch) {
            Some(next) => self.switch_lane_adapter(l, next),
            None => {
                if now.saturating_sub(self.lanes[l].epoch_start) >= self.epoch.epoch_length {
                    self.lanes[l].epoch_start = now;
                }
            }
        }
        self.pump(l)
    }

    fn form_batch(&mut self, l: usize, adapter: AdapterKey, phase: BatchPhase, reqs: Vec<RequestId>) -> Result<()> {
        let id = self.next_batch;
        self.next_batch += 1;
        let mode = self.lanes[l].mode();
        for &r in &reqs {
            let lane = &mut self.lanes[l];
            match phase {
                BatchPhase::Prefill => {
                    lane.queue.remove(r);
                    lane.running.insert(r);
                    self.requests[r as usize].stage = RequestStage::Prefill;
                    self.modes[r as usize] = Some(mode);
                }
                BatchPhase::Decode => {
                    lane.idle_decode.remove(&r);
                }
                BatchPhase::Reconstruct => {
                    lane.idle_recon.remove(&r);
                }
            }
        }
        let chain = self.lanes[l].chain.clone().expect("pump checks the chain");
        let gpu = chain.stages[0].gpu;
        self.lanes[l].in_flight.insert(id);
        self.batches.insert(
            id,
            BatchRun {
                batch: Batch {
                    batch_id: id,
                    request_ids: reqs,
                    adapter_id: adapter.clone(),
                    phase,
                },
                lane: l,
                chain,
                stage: 0,
            },
        );
        self.gpus[gpu as usize].tasks.push(Task {
            batch: id,
            stage: 0,
            phase,
            adapter,
        });
        self.try_start(gpu)
    }

    // ---- GPU compute -----------------------------------------------------------

    /// True while a batch of the GPU's merged adapter, formed before
    /// `before`, still has to pass it.
    fn switch_blocked(&self, g: GpuId, before: BatchId) -> bool {
        let active = &self.gpus[g as usize].active;
        self.batches.range(..before).any(|(_, b)| {
            &b.batch.adapter_id == active
                && b.chain.stages[b.stage..].iter().any(|s| s.gpu == g)
        })
    }

    /// Runs the best task if the merged adapter fits it. Otherwise older
    /// batches of the merged adapter go first, then the GPU switches.
    fn try_start(&mut self, g: GpuId) -> Result<()> {
        let gi = g as usize;
        if self.gpus[gi].busy.is_some() || !self.gpus[gi].state.alive || self.gpus[gi].tasks.is_empty() {
            return Ok(());
        }
        let merged = self.sc.lora.mode == LoraMode::Merged;
        let gpu = &self.gpus[gi];
        let (head, task) = gpu
            .tasks
            .iter()
            .enumerate()
            .min_by_key(|(_, t)| t.rank())
            .map(|(i, t)| (i, t.clone()))
            .expect("tasks are non-empty");
        let pick = if !merged || task.adapter == gpu.active {
            Some(head)
        } else {
            gpu.tasks
                .iter()
                .enumerate()
                .filter(|(_, t)| t.adapter == gpu.active && t.batch < task.batch)
                .min_by_key(|(_, t)| t.rank())
                .map(|(i, _)| i)
        };
        if let Some(i) = pick {
            let task = self.gpus[gi].tasks.remove(i);
            return self.start_task(g, task);
        }
        if self.switch_blocked(g, task.batch) {
            return Ok(());
        }
        let layers = self.batches[&task.batch].chain.stages[task.stage].layers.clone();
        if let Some(a) = &task.adapter {
            let missing: Vec<u32> = self
                .segments
                .iter()
                .filter(|s| s.layer_range.start >= layers.start && s.layer_range.end <= layers.end)
                .map(|s| s.segment_id)
                .filter(|s| !self.gpus[gi].state.loaded_adapter_parts.contains(&(a.clone(), *s)))
                .collect();
            if !missing.is_empty() {
                for s in missing {
                    self.plan.request_adapter_part(g, a, s);
                }
                return self.start_loader(g);
            }
        }
        let from = self.gpus[gi].active.clone();
        let secs_needed = merge_seconds(
            self.adapter_bytes(&from, &layers),
            self.adapter_bytes(&task.adapter, &layers),
            self.sc.compute.merge_rate,
        );
        let now = self.now();
        let gpu = &mut self.gpus[gi];
        gpu.busy_token += 1;
        gpu.busy = Some(Busy::Merge {
            from,
            to: task.adapter,
            start: now,
        });
        let token = gpu.busy_token;
        self.q.schedule(now + secs(secs_needed), Ev::TaskDone { gpu: g, token })
    }

    fn start_task(&mut self, g: GpuId, task: Task) -> Result<()> {
        let now = self.now();
        let run = &self.batches[&task.batch];
        let stage = run.chain.stages[task.stage].clone();
        let layers = stage.layer_count();
        let coeffs = &self.sc.compute;
        let reqs = &run.batch.request_ids;
        let (compute, hop_tokens) = match task.phase {
            BatchPhase::Prefill => {
                let tokens: u64 = reqs.iter().map(|r| u64::from(self.requests[*r as usize].prompt_tokens)).sum();
                (prefill_time(layers, tokens, 1, coeffs)?, tokens)
            }
            BatchPhase::Reconstruct => {
                let one = PipelineChain { stages: vec![stage.clone()] };
                let mut total = 0.0;
                let mut tokens = 0;
                for r in reqs {
                    let req = &self.requests[*r as usize];
                    tokens += req.merged_length();
                    total += reconstruct_kv(req, &one, &self.ledger, coeffs)?[0].seconds;
                }
                (total, tokens)
            }
            BatchPhase::Decode => {
                for r in reqs {
                    if self.ledger.missing(*r, stage.layers.clone(), g) > 0 {
                        return Err(self.invariant(format!(
                            "request {r} lacks KV entries on GPU {g} for layers {:?}",
                            stage.layers
                        )));
                    }
                }
                (decode_step_time(layers, reqs.len() as u64, coeffs)?, reqs.len() as u64)
            }
        };
        let compute = if self.sc.lora.mode == LoraMode::Unmerged && task.adapter.is_some() {
            compute * self.sc.lora.unmerged_overhead
        } else {
            compute
        };
        let compute_end = now + secs(compute);
        let mut end = compute_end;
        let mut hop = None;
        if let Some(next) = run.chain.stages.get(task.stage + 1) {
            if next.gpu != g {
                let bytes = hop_tokens * coeffs.hidden_state_bytes_per_token;
                let t = transfer_time(
                    bytes,
                    self.sc.cluster.interconnect_bandwidth,
                    self.sc.cluster.interconnect_base_latency,
                )?;
                end = compute_end + secs(t);
                hop = Some((next.gpu, bytes));
            }
        }
        let gpu = &mut self.gpus[g as usize];
        gpu.busy_token += 1;
        gpu.busy = Some(Busy::Task {
            task,
            start: now,
            compute_end,
            hop,
        });
        let token = gpu.busy_token;
        self.q.schedule(end, Ev::TaskDone { gpu: g, token })
    }

    fn on_task_done(&mut self, g: GpuId, token: u64) -> Result<()> {
        let gi = g as usize;
        if self.gpus[gi].busy_token != token {
            return Ok(());
        }
        let Some(busy) = self.gpus[gi].busy.take() else {
            return Ok(());
        };
        let now = self.now();
        match busy {
            Busy::Merge { from, to, start } => {
                self.trace.push(TraceRecord::Merge {
                    gpu: g,
                    from,
                    to: to.clone(),
                    start,
                    end: now,
                });
                self.gpus[gi].active = to;
                self.try_start(g)
            }
            Busy::Task { task, start, compute_end, hop } => {
                let run = self.batches.get(&task.batch).expect("running batch exists");
                self.trace.push(TraceRecord::Compute {
                    gpu: g,
                    batch: task.batch,
                    phase: task.phase,
                    requests: run.batch.request_ids.len() as u32,
                    start,
                    end: compute_end,
                });
                if let Some((to, bytes)) = hop {
                    self.trace.push(TraceRecord::Transfer {
                        link: Link::Interconnect(g, to),
                        what: format!("b{}", task.batch),
                        bytes,
                        start: compute_end,
                        end: now,
                        cancelled: false,
                    });
                }
                let layers = run.chain.stages[task.stage].layers.clone();
                if task.phase.is_prefill_like() {
                    for &r in &run.batch.request_ids {
                        self.ledger.write(r, layers.clone(), g);
                    }
                }
                let last = task.stage + 1 == run.chain.stages.len();
                if last {
                    self.finish_batch(task.batch)?;
                } else {
                    let run = self.batches.get_mut(&task.batch).expect("running batch exists");
                    run.stage += 1;
                    let next = run.chain.stages[run.stage].gpu;
                    let next_task = Task {
                        stage: run.stage,
                        ..task
                    };
                    self.gpus[next as usize].tasks.push(next_task);
                    self.try_start(next)?;
                }
                self.try_start(g)
            }
        }
    }

    fn finish_batch(&mut self, id: BatchId) -> Result<()> {
        let run = self.batches.remove(&id).expect("finished batch exists");
        let l = run.lane;
        self.lanes[l].in_flight.remove(&id);
        let now = self.now();
        for r in run.batch.request_ids {
            let req = &mut self.requests[r as usize];
            match run.batch.phase {
                BatchPhase::Prefill => {
                    req.record_first_token(now);
                    req.stage = RequestStage::Decode;
                    self.trace.push(TraceRecord::Token {
                        time: now,
                        request: r,
                        index: 0,
                    });
                }
                BatchPhase::Reconstruct => {
                    req.stage = RequestStage::Decode;
                }
                BatchPhase::Decode => {
                    req.generated += 1;
                    self.trace.push(TraceRecord::Token {
                        time: now,
                        request: r,
                        index: req.generated,
                    });
                }
            }
            if req.stage == RequestStage::Decode && req.generated >= req.max_new_tokens {
                req.stage = RequestStage::Done;
                req.completion_time = Some(now);
                self.trace.push(TraceRecord::Done { time: now, request: r });
                self.ledger.remove_request(r);
                self.lanes[l].running.remove(&r);
            } else {
                self.lanes[l].idle_decode.insert(r);
            }
        }
        self.pump(l)
    }

    // ---- crashes and recovery ----------------------------------------------------

    fn abort_batch(&mut self, id: BatchId) {
        let Some(run) = self.batches.remove(&id) else {
            return;
        };
        let l = run.lane;
        self.lanes[l].in_flight.remove(&id);
        for gpu in &mut self.gpus {
            gpu.tasks.retain(|t| t.batch != id);
            if matches!(&gpu.busy, Some(Busy::Task { task, .. }) if task.batch == id) {
                gpu.busy = None;
                gpu.busy_token += 1;
            }
        }
        let lane = &mut self.lanes[l];
        match run.batch.phase {
            BatchPhase::Prefill => {
                for &r in run.batch.request_ids.iter().rev() {
                    lane.running.remove(&r);
                    let req = &mut self.requests[r as usize];
                    req.stage = RequestStage::Queued;
                    lane.queue.requeue_front(r, &req.adapter_id);
                }
            }
            BatchPhase::Decode => lane.idle_decode.extend(run.batch.request_ids),
            BatchPhase::Reconstruct => lane.idle_recon.extend(run.batch.request_ids),
        }
    }

    fn on_crash(&mut self, g: GpuId) -> Result<()> {
        let gi = g as usize;
        if !self.gpus[gi].state.alive {
            return Ok(());
        }
        let now = self.now();
        self.trace.push(TraceRecord::Crash { time: now, gpu: g });
        self.cancel_loader(g);
        let gpu = &mut self.gpus[gi];
        gpu.state.alive = false;
        gpu.state.wipe();
        gpu.tasks.clear();
        gpu.busy = None;
        gpu.busy_token += 1;
        gpu.active = None;
        self.ledger.remove_gpu(g);
        let hit: Vec<BatchId> = self
            .batches
            .iter()
            .filter(|(_, b)| b.chain.contains_gpu(g))
            .map(|(id, _)| *id)
            .collect();
        for id in hit {
            self.abort_batch(id);
        }
        for l in 0..self.lanes.len() {
            let lane = &mut self.lanes[l];
            if !lane.alive {
                continue;
            }
            if lane.chain.as_ref().is_some_and(|c| c.contains_gpu(g)) {
                lane.chain = None;
                if lane.kind == LaneKind::Single(g) {
                    lane.alive = false;
                }
            }
        }
        if self.gpus.iter().all(|g| !g.state.alive) {
            return Err(SimError::Unrecoverable(format!("all GPUs crashed by {now}")));
        }
        if !self.recovery_pending {
            self.recovery_pending = true;
            let delay = secs(self.sc.recovery.detection_latency);
            self.q.schedule(now + delay, Ev::RecoveryStart)?;
        }
        for h in 0..self.gpus.len() as GpuId {
            self.try_start(h)?;
        }
        Ok(())
    }

    fn on_recovery_start(&mut self) -> Result<()> {
        self.recovery_pending = false;
        match self.sc.recovery.mode {
            RecoveryMode::Pp => self.pp_recovery(),
            RecoveryMode::Full => self.full_recovery(),
        }
    }

    fn pp_recovery(&mut self) -> Result<()> {
        let now = self.now();
        // Requests of dead single lanes move to surviving GPUs.
        for l in 0..self.lanes.len() {
            let lane = &mut self.lanes[l];
            if lane.alive || !matches!(lane.kind, LaneKind::Single(_)) {
                continue;
            }
            let mut moved: Vec<RequestId> = lane.queue.drain_all().into_iter().map(|(_, r)| r).collect();
            moved.extend(lane.running.iter().copied());
            lane.running.clear();
            lane.idle_decode.clear();
            lane.idle_recon.clear();
            if let LaneKind::Single(g) = lane.kind {
                if self.single_lanes[g as usize] == Some(l) {
                    self.single_lanes[g as usize] = None;
                }
            }
            for r in moved {
                if self.requests[r as usize].stage == RequestStage::Prefill {
                    self.requests[r as usize].stage = RequestStage::Queued;
                }
                self.pending.push(r);
            }
        }
        if let Some(l) = self.pipeline_lane {
            if self.lanes[l].alive && self.lanes[l].chain.is_none() {
                match find_pipeline_chain(&self.states(), &self.segments) {
                    Some(chain) => {
                        self.trace.push(TraceRecord::Recovery {
                            time: now,
                            detail: format!("rechain {chain}"),
                        });
                        self.adopt_chain(l, chain)?;
                    }
                    None => self.reassign()?,
                }
            }
        }
        self.maybe_switch()?;
        self.dispatch_pending()?;
        for g in 0..self.gpus.len() as GpuId {
            self.start_loader(g)?;
        }
        Ok(())
    }

    fn reassign(&mut self) -> Result<()> {
        let now = self.now();
        let alive: Vec<GpuState> = self.states().into_iter().filter(|s| s.alive).collect();
        let plan = reassign_layers(&alive, self.n_seg)?;
        let mut detail = String::from("reassign");
        for (g, block) in &plan.target_blocks {
            detail.push_str(&format!(" gpu{g}:{}..{}", block.start, block.end));
        }
        self.trace.push(TraceRecord::Recovery { time: now, detail });
        for (g, order) in plan.new_orders {
            self.plan.orders[g as usize] = order;
            let gi = g as usize;
            let next = next_transfer(&self.plan, &self.gpus[gi].state);
            let current = self.gpus[gi].load.as_ref().map(|op| op.item.clone());
            if current.is_some() && current != next {
                self.cancel_loader(g);
            }
        }
        Ok(())
    }

    fn full_recovery(&mut self) -> Result<()> {
        let now = self.now();
        for g in 0..self.gpus.len() as GpuId {
            self.cancel_loader(g);
            let gpu = &mut self.gpus[g as usize];
            gpu.state.wipe();
            gpu.tasks.clear();
            gpu.busy = None;
            gpu.busy_token += 1;
            gpu.active = None;
        }
        self.ledger.clear();
        self.batches.clear();
        let mut unfinished: BTreeSet<RequestId> = self.pending.drain(..).collect();
        for lane in &mut self.lanes {
            unfinished.extend(lane.queue.drain_all().into_iter().map(|(_, r)| r));
            unfinished.extend(lane.running.iter().copied());
            lane.alive = false;
            lane.running.clear();
            lane.idle_decode.clear();
            lane.idle_recon.clear();
            lane.in_flight.clear();
        }
        self.single_lanes.iter_mut().for_each(|l| *l = None);
        for &r in &unfinished {
            let req = &mut self.requests[r as usize];
            req.generated = 0;
            req.stage = RequestStage::Queued;
        }
        self.pipeline_lane = None;
        if self.pipelined() && self.mode() == ServingMode::PipelineParallel {
            let mut lane = Lane::new(LaneKind::Pipeline, &self.adapter_ids, now);
            for &r in &unfinished {
                let adapter = self.requests[r as usize].adapter_id.clone();
                lane.queue.enqueue_by_adapter(r, &adapter)?;
            }
            self.lanes.push(lane);
            self.pipeline_lane = Some(self.lanes.len() - 1);
            let survivors: Vec<GpuId> = self
                .gpus
                .iter()
                .filter(|g| g.state.alive)
                .map(|g| g.state.gpu_id)
                .collect();
            let plan = full_recovery_baseline(&survivors, self.n_seg)?;
            for (g, order) in plan.new_orders {
                self.plan.orders[g as usize] = order;
            }
        } else {
            self.pending.extend(unfinished);
        }
        for r in &mut self.plan.requested {
            r.clear();
        }
        self.trace.push(TraceRecord::Recovery {
            time: now,
            detail: "full_restart".into(),
        });
        self.loaders_enabled = false;
        self.q.schedule(now + secs(self.sc.loading.init_meta), Ev::RestartLoading)
    }
}
