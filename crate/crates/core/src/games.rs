//! The deletion-as-control experiment with its simulators, the
//! deletion-as-confidentiality experiment, and audits over both.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{put_field, put_i64, put_u64};
use crate::controllers::XorController;
use crate::dist::{
    check_indisting, check_tape_law, estimate_from_samples, AuditMode, AuditOptions, ClosenessReport, FinitePmf,
    Method, FLOAT_SLACK,
};
use crate::enumerate::enumerate_paths;
use crate::error::{Error, Result};
use crate::exec::{
    run_confidentiality, run_ideal, run_real, ChannelId, Controller, ControllerState, ExecutionOutcome, Message,
    Participant, Query, Role, World,
};
use crate::hi::trial_tapes;
use crate::tape::{
    derive_seed, nest_region, split_region, Choice, Coins, DrawKind, RandomTape, Recording, Replayer, Stream,
    TapeError,
};

/// A realized controller draw: region, kind, value.
pub type Draw = (u32, DrawKind, i64);

/// An environment and data subject to run a controller against.
#[derive(Clone)]
pub struct Fixture {
    pub name: String,
    pub environment: Box<dyn Participant>,
    pub subject: Box<dyn Participant>,
    pub subject_channel: ChannelId,
    /// The subject never messages the environment.
    pub silent: bool,
}

/// What a simulator sees after the real execution.
pub struct SimInput<'a> {
    /// Fresh, uninitialized copy of the controller.
    pub controller: &'a dyn Controller,
    /// The environment's queries `q_E`.
    pub queries: &'a [Query],
    /// Draws the real run made from `R_C`, in order.
    pub real_draws: &'a [Draw],
    pub state: &'a ControllerState,
    /// Channels the real final state refers to, if the controller knows.
    pub referenced: Option<&'a BTreeSet<ChannelId>>,
    pub opts: &'a AuditOptions,
    /// Seed for the simulator's own coins.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimOutcome {
    /// `R' = R`.
    Same,
    /// `R'` is uniform on the cylinder of one of these draw lists, picked
    /// with the given probability. An empty list is a fresh uniform tape.
    Cylinders(Vec<(Vec<Draw>, f64)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub outcome: SimOutcome,
    /// The conditioning event was empty.
    pub fallback: bool,
    /// Sampling gave up before finding the event.
    pub inconclusive: bool,
}

impl SimResult {
    fn plain(outcome: SimOutcome) -> Self {
        SimResult {
            outcome,
            fallback: false,
            inconclusive: false,
        }
    }
}

/// Produces the alternative tape `R'` of the ideal execution.
pub trait Simulator: Send + Sync {
    fn name(&self) -> String;

    fn simulate(&self, input: &SimInput) -> Result<SimResult>;
}

/// `R' = R`.
#[derive(Debug, Clone, Default)]
pub struct IdentitySimulator;

impl Simulator for IdentitySimulator {
    fn name(&self) -> String {
        "identity".into()
    }

    fn simulate(&self, _input: &SimInput) -> Result<SimResult> {
        Ok(SimResult::plain(SimOutcome::Same))
    }
}

/// `R' = state ⊕ x_E` for the XOR controller.
#[derive(Debug, Clone)]
pub struct XorSimulator {
    pub k: u32,
}

impl Simulator for XorSimulator {
    fn name(&self) -> String {
        "xor".into()
    }

    fn simulate(&self, input: &SimInput) -> Result<SimResult> {
        let ControllerState::Bytes(s) = input.state else {
            return Ok(SimResult::plain(SimOutcome::Same));
        };
        let xor = XorController::new(self.k)?;
        let mut r = xor
            .decode_word(s)
            .ok_or_else(|| Error::Parameter("state is not a word of the declared width".into()))?;
        for q in input.queries {
            if let Message::Data(p) = &q.message {
                r ^= xor.decode_word(p).unwrap_or(0);
            }
        }
        Ok(SimResult::plain(SimOutcome::Cylinders(vec![(
            vec![(0, DrawKind::Bits(self.k), r as i64)],
            1.0,
        )])))
    }
}

/// Ideal-run draw paths for one `q_E`, grouped by final state.
type IdealTable = BTreeMap<ControllerState, Vec<(Vec<Draw>, f64)>>;

/// Samples `R'` conditioned on the ideal run reaching the real state:
/// exactly from the enumerated ideal runs when they fit the cap, by
/// rejection otherwise (sampled audits only). An empty event gives `R' = R`.
#[derive(Default)]
pub struct DefaultSimulator {
    cache: Mutex<BTreeMap<Vec<Query>, Option<Arc<IdealTable>>>>,
}

impl DefaultSimulator {
    pub fn new() -> Self {
        DefaultSimulator::default()
    }

    /// `None` when the ideal runs exceed the enumeration cap.
    fn table(&self, input: &SimInput) -> Result<Option<Arc<IdealTable>>> {
        if let Some(t) = self.cache.lock().expect("cache lock").get(input.queries) {
            return Ok(t.clone());
        }
        let leaves = enumerate_paths(
            |pc| {
                let mut c = input.controller.box_clone();
                run_ideal(c.as_mut(), input.queries, pc, input.opts.max_steps).map(|o| o.controller_state)
            },
            input.opts.enumeration_cap,
        );
        let table = match leaves {
            Ok(leaves) => {
                let mut table = IdealTable::new();
                for l in leaves {
                    let draws = l.choices.into_iter().map(|c| (c.region, c.kind, c.value)).collect();
                    table.entry(l.value).or_default().push((draws, l.mass));
                }
                Some(Arc::new(table))
            }
            Err(Error::EnumerationCap { .. }) => None,
            Err(e) => return Err(e),
        };
        self.cache
            .lock()
            .expect("cache lock")
            .insert(input.queries.to_vec(), table.clone());
        Ok(table)
    }

    fn rejection(&self, input: &SimInput) -> Result<SimResult> {
        for attempt in 0..input.opts.attempt_cap {
            let mut tape = RandomTape::lenient(derive_seed(input.seed, attempt), u64::MAX);
            let mut c = input.controller.box_clone();
            let o = run_ideal(c.as_mut(), input.queries, &mut tape, input.opts.max_steps)?;
            if &o.controller_state == input.state {
                return Ok(SimResult::plain(SimOutcome::Cylinders(vec![(tape.draws().to_vec(), 1.0)])));
            }
        }
        Ok(SimResult {
            outcome: SimOutcome::Same,
            fallback: false,
            inconclusive: true,
        })
    }

    /// `R'` conditioned on the ideal state, or `None` if the event is empty.
    pub fn conditional(&self, input: &SimInput) -> Result<Option<SimResult>> {
        if let Some(refs) = input.referenced {
            let asked: BTreeSet<&ChannelId> = input.queries.iter().map(|q| &q.channel).collect();
            if refs.iter().any(|c| !asked.contains(c)) {
                return Ok(None);
            }
        }
        let table = match self.table(input)? {
            Some(t) => t,
            None if matches!(input.opts.mode, AuditMode::Sampled { .. }) => {
                return self.rejection(input).map(Some);
            }
            None => {
                return Err(Error::EnumerationCap {
                    cap: input.opts.enumeration_cap,
                })
            }
        };
        let Some(paths) = table.get(input.state) else {
            return Ok(None);
        };
        let total: f64 = paths.iter().map(|(_, m)| m).sum();
        Ok(Some(SimResult::plain(SimOutcome::Cylinders(
            paths.iter().map(|(d, m)| (d.clone(), m / total)).collect(),
        ))))
    }
}

impl Simulator for DefaultSimulator {
    fn name(&self) -> String {
        "default".into()
    }

    fn simulate(&self, input: &SimInput) -> Result<SimResult> {
        if input.state.is_bottom() {
            return Ok(SimResult::plain(SimOutcome::Same));
        }
        Ok(self.conditional(input)?.unwrap_or(SimResult {
            outcome: SimOutcome::Same,
            fallback: true,
            inconclusive: false,
        }))
    }
}

/// Simulator for the one-shot batch controller: `R' = R` if the
/// environment never ticked, otherwise `R'` conditioned on the released
/// value (which the post-tick state determines). An unreachable value
/// falls back to a fresh uniform tape.
#[derive(Default)]
pub struct BatchSimulator {
    inner: DefaultSimulator,
}

impl BatchSimulator {
    pub fn new() -> Self {
        BatchSimulator::default()
    }
}

impl Simulator for BatchSimulator {
    fn name(&self) -> String {
        "batch".into()
    }

    fn simulate(&self, input: &SimInput) -> Result<SimResult> {
        let ticked = input.queries.iter().any(|q| q.message == Message::Tick);
        if !ticked || input.state.is_bottom() {
            return Ok(SimResult::plain(SimOutcome::Same));
        }
        Ok(self.inner.conditional(input)?.unwrap_or(SimResult {
            outcome: SimOutcome::Cylinders(vec![(Vec::new(), 1.0)]),
            fallback: true,
            inconclusive: false,
        }))
    }
}

/// Runs one simulator per half of a parallel composition and takes the
/// product of their tapes.
pub struct ComposedSimulator {
    halves: [(Box<dyn Controller>, Box<dyn Simulator>); 2],
}

impl ComposedSimulator {
    pub fn new(
        left: (Box<dyn Controller>, Box<dyn Simulator>),
        right: (Box<dyn Controller>, Box<dyn Simulator>),
    ) -> Self {
        ComposedSimulator { halves: [left, right] }
    }
}

impl Simulator for ComposedSimulator {
    fn name(&self) -> String {
        format!("composed({},{})", self.halves[0].1.name(), self.halves[1].1.name())
    }

    fn simulate(&self, input: &SimInput) -> Result<SimResult> {
        let ControllerState::Bytes(s) = input.state else {
            return Ok(SimResult::plain(SimOutcome::Same));
        };
        let (s0, s1) =
            crate::hi::unpair(s).ok_or_else(|| Error::Parameter("composed state is not a pair".into()))?;
        let states = [ControllerState::Bytes(s0), ControllerState::Bytes(s1)];
        let mut split: [Vec<Draw>; 2] = [Vec::new(), Vec::new()];
        for (r, k, v) in input.real_draws {
            let (top, inner) = split_region(*r)
                .filter(|(t, _)| *t < 2)
                .ok_or_else(|| Error::Parameter(format!("draw in region {r} belongs to neither half")))?;
            split[top as usize].push((inner, k.clone(), *v));
        }
        let mut parts = Vec::with_capacity(2);
        let (mut fallback, mut inconclusive) = (false, false);
        for (i, (proto, sim)) in self.halves.iter().enumerate() {
            let sub = SimInput {
                controller: proto.as_ref(),
                queries: input.queries,
                real_draws: &split[i],
                state: &states[i],
                referenced: None,
                opts: input.opts,
                seed: derive_seed(input.seed, i as u64),
            };
            let r = sim.simulate(&sub)?;
            fallback |= r.fallback;
            inconclusive |= r.inconclusive;
            parts.push(match r.outcome {
                SimOutcome::Same => (true, vec![(split[i].clone(), 1.0)]),
                SimOutcome::Cylinders(c) => (false, c),
            });
        }
        let outcome = if parts.iter().all(|(same, _)| *same) {
            SimOutcome::Same
        } else {
            let mut out = Vec::new();
            for (a, pa) in &parts[0].1 {
                for (b, pb) in &parts[1].1 {
                    let mut d: Vec<Draw> = a.iter().map(|(r, k, v)| (nest_region(0, *r), k.clone(), *v)).collect();
                    d.extend(b.iter().map(|(r, k, v)| (nest_region(1, *r), k.clone(), *v)));
                    out.push((d, pa * pb));
                }
            }
            SimOutcome::Cylinders(out)
        };
        Ok(SimResult {
            outcome,
            fallback,
            inconclusive,
        })
    }
}

/// Deletion-as-control condition 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRate {
    /// Probability (exact) or frequency (sampled) of `state' = state or state = ⊥`.
    pub rate: f64,
    /// One-sided lower confidence bound on the rate (sampled only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lower_bound: Option<f64>,
    /// Mass of runs where the simulator's event was empty.
    pub fallback: f64,
    /// Mass of runs scored as failures because sampling gave up.
    pub inconclusive: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Definition {
    Control,
    Confidentiality,
    Ahi,
    PanPrivacy,
}

impl Definition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Definition::Control => "control",
            Definition::Confidentiality => "confidentiality",
            Definition::Ahi => "ahi",
            Definition::PanPrivacy => "pan_privacy",
        }
    }
}

/// Result of one audit, in the shape written to report files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub definition: Definition,
    pub controller: String,
    pub fixture: String,
    pub eps: f64,
    pub delta: f64,
    pub cond1: ClosenessReport,
    pub cond2: Option<MatchRate>,
    pub passed: bool,
    pub method: Method,
    pub trials: Option<u64>,
    pub seed: u64,
}

impl AuditReport {
    /// Report for a definition with a single closeness condition.
    pub fn closeness(
        definition: Definition,
        controller: &str,
        fixture: &str,
        delta: f64,
        cond1: ClosenessReport,
        seed: u64,
    ) -> Self {
        AuditReport {
            definition,
            controller: controller.into(),
            fixture: fixture.into(),
            eps: cond1.eps,
            delta,
            passed: cond1.passed,
            method: cond1.method,
            trials: cond1.trials,
            cond2: None,
            cond1,
            seed,
        }
    }
}

/// Raw material of one deletion-as-control trial.
#[derive(Debug, Clone)]
pub struct DeletionTrial {
    pub real: ExecutionOutcome,
    /// Draws the real run made from `R_C`.
    pub real_draws: Vec<Draw>,
    pub queries: Vec<Query>,
    pub sim: SimResult,
    /// The tape the ideal run read.
    pub ideal_tape: RandomTape,
    pub ideal: ExecutionOutcome,
    pub state_match: bool,
}

fn state_matches(real: &ControllerState, ideal: &ControllerState) -> bool {
    real.is_bottom() || real == ideal
}

/// One sampled run of the control experiment on the tapes of trial `i`.
pub fn run_deletion_experiment(
    controller: &dyn Controller,
    fixture: &Fixture,
    simulator: &dyn Simulator,
    opts: &AuditOptions,
    i: u64,
) -> Result<DeletionTrial> {
    let mut tapes = trial_tapes(opts.seed, i);
    let mut c = controller.box_clone();
    let mut e = fixture.environment.clone();
    let mut y = fixture.subject.clone();
    let real = run_real(
        c.as_mut(),
        e.as_mut(),
        y.as_mut(),
        &fixture.subject_channel,
        &mut tapes,
        opts.max_steps,
    )?;
    let queries = real.queries();
    let refs = c.referenced_channels();
    let real_draws = tapes.controller.draws().to_vec();
    let sim = simulator.simulate(&SimInput {
        controller,
        queries: &queries,
        real_draws: &real_draws,
        state: &real.controller_state,
        referenced: refs.as_ref(),
        opts,
        seed: tapes.aux.seed(),
    })?;
    let mut pick_rng = ChaCha8Rng::seed_from_u64(derive_seed(tapes.aux.seed(), 1));
    let base = RandomTape::lenient(tapes.controller.seed(), u64::MAX);
    let ideal_tape = match &sim.outcome {
        SimOutcome::Same => base,
        SimOutcome::Cylinders(cyl) => {
            let u: f64 = pick_rng.gen();
            let mut acc = 0.0;
            let mut chosen = &cyl[cyl.len() - 1].0;
            for (d, p) in cyl {
                acc += p;
                if u < acc {
                    chosen = d;
                    break;
                }
            }
            RandomTape::with_choices(
                derive_seed(tapes.aux.seed(), 2),
                u64::MAX,
                chosen.iter().map(|(r, k, v)| (*r, k, *v)),
                |lo, hi| pick_rng.gen_range(lo..hi),
            )
            .ok_or_else(|| Error::Parameter("simulator chose an impossible draw".into()))?
        }
    };
    let mut tape = ideal_tape.clone();
    let mut ic = controller.box_clone();
    let ideal = run_ideal(ic.as_mut(), &queries, &mut tape, opts.max_steps)?;
    let state_match = !sim.inconclusive && state_matches(&real.controller_state, &ideal.controller_state);
    Ok(DeletionTrial {
        real,
        real_draws,
        queries,
        sim,
        ideal_tape,
        ideal,
        state_match,
    })
}

fn choices_of(draws: &[Draw]) -> Vec<Choice> {
    draws
        .iter()
        .map(|(r, k, v)| Choice {
            stream: Stream::Controller,
            region: *r,
            kind: k.clone(),
            value: *v,
        })
        .collect()
}

struct LeafResult {
    law: Vec<(Vec<Choice>, f64)>,
    matched: f64,
    fallback: f64,
    inconclusive: f64,
}

fn exact_leaf(
    controller: &dyn Controller,
    simulator: &dyn Simulator,
    opts: &AuditOptions,
    mass: f64,
    real_draws: &[Draw],
    queries: &[Query],
    state: &ControllerState,
    refs: Option<&BTreeSet<ChannelId>>,
) -> Result<LeafResult> {
    let sim = simulator.simulate(&SimInput {
        controller,
        queries,
        real_draws,
        state,
        referenced: refs,
        opts,
        seed: opts.seed,
    })?;
    let cylinders = match &sim.outcome {
        SimOutcome::Same => vec![(real_draws.to_vec(), 1.0)],
        SimOutcome::Cylinders(c) => c.clone(),
    };
    let mut out = LeafResult {
        law: Vec::with_capacity(cylinders.len()),
        matched: 0.0,
        fallback: if sim.fallback { mass } else { 0.0 },
        inconclusive: if sim.inconclusive { mass } else { 0.0 },
    };
    for (fixed, p) in cylinders {
        let recording = Recording { draws: fixed };
        let ideal = enumerate_paths(
            |pc| {
                let mut cursor = BTreeMap::new();
                let mut rep = Replayer {
                    inner: pc,
                    recording: &recording,
                    cursor: &mut cursor,
                };
                let mut c = controller.box_clone();
                run_ideal(c.as_mut(), queries, &mut rep, opts.max_steps).map(|o| o.controller_state)
            },
            opts.enumeration_cap,
        )
        .map_err(|e| match e {
            Error::Tape(TapeError::Misaligned { region }) => Error::Unsupported(format!(
                "ideal run read region {region} differently from the simulator's draws"
            )),
            e => e,
        })?;
        if !sim.inconclusive {
            for l in &ideal {
                if state_matches(state, &l.value) {
                    out.matched += mass * p * l.mass;
                }
            }
        }
        out.law.push((choices_of(&recording.draws), mass * p));
    }
    Ok(out)
}

/// Audits deletion-as-control for one fixture.
pub fn audit_deletion_as_control(
    controller: &dyn Controller,
    fixture: &Fixture,
    simulator: &dyn Simulator,
    eps: f64,
    delta: f64,
    opts: &AuditOptions,
) -> Result<(ClosenessReport, MatchRate, bool)> {
    match opts.mode {
        AuditMode::Exact => audit_control_exact(controller, fixture, simulator, eps, delta, opts),
        AuditMode::Sampled { trials, confidence } => {
            audit_control_sampled(controller, fixture, simulator, eps, delta, trials, confidence, opts)
        }
    }
}

fn audit_control_exact(
    controller: &dyn Controller,
    fixture: &Fixture,
    simulator: &dyn Simulator,
    eps: f64,
    delta: f64,
    opts: &AuditOptions,
) -> Result<(ClosenessReport, MatchRate, bool)> {
    let leaves = enumerate_paths(
        |pc| {
            let mut c = controller.box_clone();
            let mut e = fixture.environment.clone();
            let mut y = fixture.subject.clone();
            let o = run_real(c.as_mut(), e.as_mut(), y.as_mut(), &fixture.subject_channel, pc, opts.max_steps)?;
            Ok((o.queries(), o.controller_state, c.referenced_channels()))
        },
        opts.enumeration_cap,
    )?;
    let results = leaves
        .par_iter()
        .map(|l| {
            let draws: Vec<Draw> = l
                .choices
                .iter()
                .filter(|c| c.stream == Stream::Controller)
                .map(|c| (c.region, c.kind.clone(), c.value))
                .collect();
            let (queries, state, refs) = &l.value;
            exact_leaf(controller, simulator, opts, l.mass, &draws, queries, state, refs.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut law: BTreeMap<Vec<Choice>, f64> = BTreeMap::new();
    let (mut matched, mut fallback, mut inconclusive) = (0.0, 0.0, 0.0);
    for r in results {
        for (path, m) in r.law {
            *law.entry(path).or_insert(0.0) += m;
        }
        matched += r.matched;
        fallback += r.fallback;
        inconclusive += r.inconclusive;
    }
    let law: Vec<(Vec<Choice>, f64)> = law.into_iter().collect();
    let cond1 = check_tape_law(&law, eps, delta)?;
    let rate = MatchRate {
        rate: matched,
        lower_bound: None,
        fallback,
        inconclusive,
    };
    let passed = cond1.passed && matched + FLOAT_SLACK >= 1.0 - delta;
    Ok((cond1, rate, passed))
}

/// Hoeffding lower bound on a frequency at the given confidence.
pub fn hoeffding_lower(rate: f64, n: u64, confidence: f64) -> f64 {
    (rate - ((1.0 / (1.0 - confidence)).ln() / (2.0 * n as f64)).sqrt()).max(0.0)
}

fn draws_bytes(draws: &[Draw]) -> Vec<u8> {
    let mut out = Vec::new();
    for (r, _, v) in draws {
        put_u64(&mut out, *r as u64);
        put_i64(&mut out, *v);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn audit_control_sampled(
    controller: &dyn Controller,
    fixture: &Fixture,
    simulator: &dyn Simulator,
    eps: f64,
    delta: f64,
    trials: u64,
    confidence: f64,
    opts: &AuditOptions,
) -> Result<(ClosenessReport, MatchRate, bool)> {
    let runs = (0..trials)
        .into_par_iter()
        .map(|i| {
            let t = run_deletion_experiment(controller, fixture, simulator, opts, i)?;
            // Read R' along the real run's draw schedule to compare it with R.
            let mut alt = t.ideal_tape.clone();
            let alt_draws = t
                .real_draws
                .iter()
                .map(|(r, k, _)| alt.draw_in(*r, k).map(|v| (*r, k.clone(), v)))
                .collect::<std::result::Result<Vec<Draw>, _>>()?;
            let real = &t.real_draws;
            Ok((draws_bytes(real), draws_bytes(&alt_draws), t.state_match, t.sim.fallback, t.sim.inconclusive))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = runs.len() as u64;
    let frac = |f: &dyn Fn(&(Vec<u8>, Vec<u8>, bool, bool, bool)) -> bool| {
        runs.iter().filter(|r| f(r)).count() as f64 / n as f64
    };
    let rate = frac(&|r| r.2);
    let fallback = frac(&|r| r.3);
    let inconclusive = frac(&|r| r.4);
    let (ps, qs): (Vec<Vec<u8>>, Vec<Vec<u8>>) = runs.into_iter().map(|r| (r.1, r.0)).unzip();
    let cond1 = estimate_from_samples(&ps, &qs, eps, delta, confidence, derive_seed(opts.seed, u64::MAX))?;
    let lower = hoeffding_lower(rate, n, confidence);
    let passed = cond1.passed && lower >= 1.0 - delta;
    Ok((
        cond1,
        MatchRate {
            rate,
            lower_bound: Some(lower),
            fallback,
            inconclusive,
        },
        passed,
    ))
}

/// Full control report.
pub fn control_report(
    controller_name: &str,
    controller: &dyn Controller,
    fixture: &Fixture,
    simulator: &dyn Simulator,
    eps: f64,
    delta: f64,
    opts: &AuditOptions,
) -> Result<AuditReport> {
    let (cond1, cond2, passed) = audit_deletion_as_control(controller, fixture, simulator, eps, delta, opts)?;
    Ok(AuditReport {
        definition: Definition::Control,
        controller: controller_name.into(),
        fixture: fixture.name.clone(),
        eps,
        delta,
        method: cond1.method,
        trials: cond1.trials,
        cond1,
        cond2: Some(cond2),
        passed,
        seed: opts.seed,
    })
}

/// One world of the confidentiality experiment.
#[derive(Debug, Clone)]
pub struct ConfidentialityRun {
    pub environment_draws: Vec<i64>,
    pub outcome: ExecutionOutcome,
}

impl ConfidentialityRun {
    /// `(V_E, state_C)` as bytes.
    pub fn observable(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_u64(&mut out, self.environment_draws.len() as u64);
        for d in &self.environment_draws {
            put_i64(&mut out, *d);
        }
        put_u64(&mut out, self.outcome.environment_view.len() as u64);
        for (from, to, ch, m) in &self.outcome.environment_view {
            out.push(role_byte(*from));
            out.push(role_byte(*to));
            put_field(&mut out, ch.as_bytes());
            m.encode(&mut out);
        }
        match &self.outcome.controller_state {
            ControllerState::Bottom => out.push(0),
            ControllerState::Bytes(b) => {
                out.push(1);
                put_field(&mut out, b);
            }
        }
        out
    }
}

fn role_byte(r: Role) -> u8 {
    match r {
        Role::Controller => 0,
        Role::Environment => 1,
        Role::Subject => 2,
        Role::Dummy => 3,
    }
}

fn confidentiality_once(
    controller: &dyn Controller,
    fixture: &Fixture,
    world: World,
    tapes: &mut dyn crate::tape::TapeSet,
    max_steps: u64,
) -> Result<ExecutionOutcome> {
    let mut c = controller.box_clone();
    let mut e = fixture.environment.clone();
    let mut y = fixture.subject.clone();
    run_confidentiality(
        c.as_mut(),
        e.as_mut(),
        y.as_mut(),
        &fixture.subject_channel,
        tapes,
        max_steps,
        world,
        fixture.silent,
    )
}

/// One sampled run of the confidentiality experiment.
pub fn run_confidentiality_experiment(
    controller: &dyn Controller,
    fixture: &Fixture,
    world: World,
    seed: u64,
    i: u64,
    max_steps: u64,
) -> Result<ConfidentialityRun> {
    let mut tapes = trial_tapes(seed, i);
    let outcome = confidentiality_once(controller, fixture, world, &mut tapes, max_steps)?;
    Ok(ConfidentialityRun {
        environment_draws: tapes.environment.draws().iter().map(|d| d.2).collect(),
        outcome,
    })
}

/// Exact law of `(V_E, state_C)` in one world.
pub fn confidentiality_law(
    controller: &dyn Controller,
    fixture: &Fixture,
    world: World,
    opts: &AuditOptions,
) -> Result<FinitePmf> {
    let leaves = enumerate_paths(
        |pc| confidentiality_once(controller, fixture, world, pc, opts.max_steps),
        opts.enumeration_cap,
    )?;
    FinitePmf::from_weights(leaves.into_iter().map(|l| {
        let run = ConfidentialityRun {
            environment_draws: l
                .choices
                .iter()
                .filter(|c| c.stream == Stream::Environment)
                .map(|c| c.value)
                .collect(),
            outcome: l.value,
        };
        (run.observable(), l.mass)
    }))
}

/// Audits deletion-as-confidentiality for one fixture.
pub fn audit_confidentiality(
    controller: &dyn Controller,
    fixture: &Fixture,
    eps: f64,
    delta: f64,
    opts: &AuditOptions,
) -> Result<ClosenessReport> {
    match opts.mode {
        AuditMode::Exact => {
            let p = confidentiality_law(controller, fixture, World::Real, opts)?;
            let q = confidentiality_law(controller, fixture, World::Ideal, opts)?;
            Ok(check_indisting(&p, &q, eps, delta))
        }
        AuditMode::Sampled { trials, confidence } => {
            let sample = |world, seed| {
                (0..trials)
                    .into_par_iter()
                    .map(|i| {
                        run_confidentiality_experiment(controller, fixture, world, seed, i, opts.max_steps)
                            .map(|r| r.observable())
                    })
                    .collect::<Result<Vec<_>>>()
            };
            let ps = sample(World::Real, derive_seed(opts.seed, 0))?;
            let qs = sample(World::Ideal, derive_seed(opts.seed, 1))?;
            estimate_from_samples(&ps, &qs, eps, delta, confidence, derive_seed(opts.seed, u64::MAX))
        }
    }
}

pub fn confidentiality_report(
    controller_name: &str,
    controller: &dyn Controller,
    fixture: &Fixture,
    eps: f64,
    delta: f64,
    opts: &AuditOptions,
) -> Result<AuditReport> {
    let r = audit_confidentiality(controller, fixture, eps, delta, opts)?;
    Ok(AuditReport::closeness(
        Definition::Confidentiality,
        controller_name,
        &fixture.name,
        delta,
        r,
        opts.seed,
    ))
}
