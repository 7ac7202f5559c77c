//! Name lookup for controllers, simulators, fixtures and adversaries, the
//! audit configuration, and the verdict matrix.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::{
    composed_directory, BoardController, CloudController, CounterParams, DictController, DirectoryController,
    IgnoreDeleteController, ParallelCompose, PushController, TimingController, XorController,
};
use crate::dist::{AuditMode, AuditOptions};
use crate::dp::{
    audit_pp, tracing_adversary, BatchController, NullMechanism, OnlineMechanism, PpAdversary,
    RawStreamMechanism, TreeCounter,
};
use crate::error::{Error, Result};
use crate::exec::Controller;
use crate::fixtures::fixtures_for;
use crate::games::{
    confidentiality_report, control_report, AuditReport, BatchSimulator, ComposedSimulator, DefaultSimulator,
    Definition, Fixture, IdentitySimulator, Simulator, XorSimulator,
};
use crate::hi::{
    pair, audit_ahi, canon_of, key_universe, AhiAdversary, AhiVariant, BatchAdt, BoardAdt, CloudAdt, DictionaryAdt,
    EchoAdversary, Implementation, LeakyImpl, Op, OpKind, RandomAdversary, ScriptedAdversary, SortedListDict,
    StarRule,
};
use crate::noise::TruncatedGeometric;

/// Controller parameters. Unused fields are ignored by controllers that
/// do not need them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// XOR word width in bits.
    pub k: u32,
    /// Mechanism privacy parameter.
    pub eps: f64,
    /// Counter δ budget.
    pub delta: f64,
    #[serde(rename = "T")]
    pub horizon: u64,
    /// Noise support is `[-B, B]`.
    #[serde(rename = "B")]
    pub bound: i64,
    /// Bits per noise draw.
    #[serde(rename = "w")]
    pub width: u32,
    /// Leak width or number of scripted inserts.
    pub n: u32,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            k: 8,
            eps: 1.0,
            delta: 0.0,
            horizon: 2,
            bound: 4,
            width: 8,
            n: 8,
        }
    }
}

impl Params {
    pub fn noise(&self) -> Result<TruncatedGeometric> {
        TruncatedGeometric::new(self.eps, self.bound, self.width)
    }

    pub fn counter(&self) -> CounterParams {
        CounterParams {
            horizon: self.horizon,
            eps: self.eps,
            delta: self.delta,
            bound: self.bound,
            width: self.width,
        }
    }
}

pub const CONTROLLERS: &[&str] = &[
    "xor",
    "dict",
    "dict_write_only",
    "cloud",
    "bulletin",
    "batch",
    "directory",
    "directory_monolithic",
    "pp_counter",
    "ignore_delete",
    "timing",
    "push",
];

fn unknown(kind: &str, name: &str) -> Error {
    Error::Parameter(format!("unknown {kind} `{name}`"))
}

pub fn build_controller(name: &str, p: &Params) -> Result<Box<dyn Controller>> {
    Ok(match name {
        "xor" => Box::new(XorController::new(p.k)?),
        "dict" => Box::new(DictController::new(true)),
        "dict_write_only" => Box::new(DictController::new(false)),
        "cloud" => Box::new(CloudController::new()),
        "bulletin" => Box::new(BoardController::new()),
        "batch" => Box::new(BatchController::noisy_count(p.noise()?)),
        "directory" => Box::new(composed_directory(p.counter())?),
        "directory_monolithic" => Box::new(DirectoryController::new(p.counter())?),
        "pp_counter" => Box::new(crate::dp::PpController::new(
            Box::new(p.counter().counter()?),
            crate::dp::PpInput::Direct,
        )),
        "ignore_delete" => Box::new(IgnoreDeleteController::new()),
        "timing" => Box::new(TimingController::new(p.horizon)?),
        "push" => Box::new(PushController::default()),
        _ => return Err(unknown("controller", name)),
    })
}

/// The simulator each controller is audited with unless one is named.
pub fn default_simulator_for(controller: &str) -> &'static str {
    match controller {
        "xor" => "xor",
        "dict" | "dict_write_only" | "cloud" | "bulletin" | "ignore_delete" => "identity",
        "batch" => "batch",
        "directory" => "composed",
        _ => "default",
    }
}

pub fn build_simulator(name: &str, controller: &str, p: &Params) -> Result<Box<dyn Simulator>> {
    Ok(match name {
        "identity" => Box::new(IdentitySimulator),
        "default" => Box::new(DefaultSimulator::new()),
        "batch" => Box::new(BatchSimulator::new()),
        "xor" => Box::new(XorSimulator { k: p.k }),
        "composed" if controller == "directory" => {
            let c: ParallelCompose = composed_directory(p.counter())?;
            Box::new(ComposedSimulator::new(
                (c.half(0).box_clone(), Box::new(DefaultSimulator::new())),
                (c.half(1).box_clone(), Box::new(IdentitySimulator)),
            ))
        }
        _ => return Err(unknown("simulator", name)),
    })
}

/// Truncation cost a controller's guarantee carries on top of its δ.
pub fn tail_deficit(controller: &str, p: &Params) -> Result<f64> {
    Ok(match controller {
        "batch" => p.noise()?.tail_deficit(),
        "directory" | "directory_monolithic" | "pp_counter" => p.counter().counter()?.tail_deficit(),
        _ => 0.0,
    })
}

pub fn fixtures(controller: &str, p: &Params, names: &[String]) -> Result<Vec<Fixture>> {
    let all = fixtures_for(controller, p.k);
    if all.is_empty() {
        return Err(Error::Parameter(format!("no fixtures for controller `{controller}`")));
    }
    if names.is_empty() {
        return Ok(all);
    }
    names
        .iter()
        .map(|n| {
            all.iter()
                .find(|f| &f.name == n)
                .cloned()
                .ok_or_else(|| unknown("fixture", n))
        })
        .collect()
}

/// An implementation paired with its ADT, for history independence audits.
pub enum AhiTarget {
    Dict(Box<dyn Implementation>),
    Batch(BatchController),
    Cloud(CloudController),
    Board(BoardController),
}

pub fn ahi_target(name: &str, p: &Params) -> Result<AhiTarget> {
    Ok(match name {
        "dict" => AhiTarget::Dict(Box::new(SortedListDict::new())),
        "leaky" => AhiTarget::Dict(Box::new(LeakyImpl::new(p.n)?)),
        "batch" => AhiTarget::Batch(BatchController::noisy_count(p.noise()?)),
        "cloud" => AhiTarget::Cloud(CloudController::new()),
        "bulletin" => AhiTarget::Board(BoardController::new()),
        _ => return Err(unknown("history independence target", name)),
    })
}

fn upload(owner: &str, name: &str, file: &str) -> Op {
    Op::new(OpKind::Upload, owner, Some(&pair(name.as_bytes(), file.as_bytes())))
}

fn post(owner: &str, msg: &str) -> Op {
    Op::new(OpKind::Post, owner, Some(msg.as_bytes()))
}

/// Adversaries shipped for a target. Names not listed give an error.
pub fn ahi_adversaries(target: &str, p: &Params) -> Vec<Box<dyn AhiAdversary>> {
    let dict = canon_of(&DictionaryAdt::default());
    match target {
        "dict" => vec![
            Box::new(EchoAdversary { star: StarRule::Canonical(dict.clone()) }),
            Box::new(RandomAdversary {
                keys: key_universe(4),
                values: vec![b"a".to_vec(), b"b".to_vec()],
                len: 4,
                star: StarRule::Canonical(dict),
            }),
        ],
        "leaky" => vec![Box::new(EchoAdversary { star: StarRule::Canonical(dict) })],
        "batch" => {
            let mut ops: Vec<Op> = (0..p.n).map(|i| Op::insert([b'u', i as u8])).collect();
            ops.push(Op::tick());
            vec![Box::new(ScriptedAdversary {
                label: "inserts_then_tick".into(),
                ops,
                star: StarRule::Canonical(canon_of(&BatchAdt::default())),
            })]
        }
        "cloud" => {
            let ops = vec![
                upload("a", "notes", "first"),
                upload("b", "notes", "other"),
                upload("a", "notes", "second"),
                upload("a", "todo", "x"),
                Op::new(OpKind::Download, "b", Some(b"notes")),
                Op::delete("a"),
                upload("a", "todo", "y"),
            ];
            vec![
                Box::new(ScriptedAdversary {
                    label: "canonical".into(),
                    ops: ops.clone(),
                    star: StarRule::Canonical(canon_of(&CloudAdt)),
                }),
                Box::new(ScriptedAdversary {
                    label: "grouped".into(),
                    ops,
                    star: StarRule::GroupById,
                }),
            ]
        }
        "bulletin" => {
            let ops = vec![post("a", "m1"), post("b", "m2"), post("a", "m3"), Op::new(OpKind::Read, "b", None), Op::delete("a")];
            vec![Box::new(ScriptedAdversary {
                label: "post_delete".into(),
                ops,
                star: StarRule::Fixed(vec![post("b", "m2")]),
            })]
        }
        _ => Vec::new(),
    }
}

fn ahi_report(target: &str, p: &Params, adv: &dyn AhiAdversary, eps: f64, delta: f64, opts: &AuditOptions) -> Result<AuditReport> {
    let v = AhiVariant::Identical;
    let r = match ahi_target(target, p)? {
        AhiTarget::Dict(i) => audit_ahi(i.as_ref(), &DictionaryAdt::default(), adv, v, eps, delta, opts)?,
        AhiTarget::Batch(i) => audit_ahi(&i, &BatchAdt::default(), adv, v, eps, delta, opts)?,
        AhiTarget::Cloud(i) => audit_ahi(&i, &CloudAdt, adv, v, eps, delta, opts)?,
        AhiTarget::Board(i) => audit_ahi(&i, &BoardAdt, adv, v, eps, delta, opts)?,
    };
    Ok(AuditReport::closeness(Definition::Ahi, target, &adv.name(), delta, r, opts.seed))
}

pub fn pp_mechanism(name: &str, p: &Params) -> Result<Box<dyn OnlineMechanism>> {
    Ok(match name {
        "tree_counter" => Box::new(TreeCounter::new(p.horizon, p.eps, p.delta, p.bound, p.width)?),
        "null" => Box::new(NullMechanism),
        "raw_stream" => Box::new(RawStreamMechanism::default()),
        _ => return Err(unknown("online mechanism", name)),
    })
}

pub fn pp_adversaries(p: &Params) -> Vec<Box<dyn PpAdversary>> {
    vec![Box::new(tracing_adversary(p.horizon))]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Exact,
    Sampled,
}

/// One audit, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    /// Controller, history independence target or online mechanism name.
    pub controller: String,
    #[serde(default)]
    pub params: Params,
    pub definition: Definition,
    /// Fixture or adversary names; empty means all shipped ones.
    #[serde(default)]
    pub fixtures: Vec<String>,
    #[serde(default)]
    pub simulator: Option<String>,
    pub eps: f64,
    #[serde(default)]
    pub delta: f64,
    /// Adds the controller's tail deficit to `delta`.
    #[serde(default)]
    pub add_tail: bool,
    #[serde(default = "default_mode")]
    pub mode: ModeName,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default = "default_cap")]
    pub enumeration_cap: usize,
    #[serde(default = "default_attempts")]
    pub attempt_cap: u64,
}

fn default_mode() -> ModeName {
    ModeName::Exact
}
fn default_trials() -> u64 {
    2000
}
fn default_confidence() -> f64 {
    0.95
}
fn default_max_steps() -> u64 {
    10_000
}
fn default_cap() -> usize {
    1 << 20
}
fn default_attempts() -> u64 {
    1 << 16
}

impl AuditConfig {
    pub fn new(controller: &str, definition: Definition, eps: f64, delta: f64) -> Self {
        AuditConfig {
            controller: controller.into(),
            params: Params::default(),
            definition,
            fixtures: Vec::new(),
            simulator: None,
            eps,
            delta,
            add_tail: false,
            mode: default_mode(),
            trials: default_trials(),
            confidence: default_confidence(),
            seed: 0,
            max_steps: default_max_steps(),
            enumeration_cap: default_cap(),
            attempt_cap: default_attempts(),
        }
    }

    pub fn options(&self) -> AuditOptions {
        AuditOptions {
            mode: match self.mode {
                ModeName::Exact => AuditMode::Exact,
                ModeName::Sampled => AuditMode::Sampled {
                    trials: self.trials,
                    confidence: self.confidence,
                },
            },
            seed: self.seed,
            enumeration_cap: self.enumeration_cap,
            attempt_cap: self.attempt_cap,
            max_steps: self.max_steps,
        }
    }

    pub fn effective_delta(&self) -> Result<f64> {
        let tail = if !self.add_tail {
            0.0
        } else if self.definition == Definition::PanPrivacy {
            pp_mechanism(&self.controller, &self.params)?.tail_deficit()
        } else if self.definition == Definition::Ahi {
            match self.controller.as_str() {
                "batch" => self.params.noise()?.tail_deficit(),
                _ => 0.0,
            }
        } else {
            tail_deficit(&self.controller, &self.params)?
        };
        Ok(self.delta + tail)
    }

    /// Checks that every name resolves.
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Parameter(format!("bad (eps, delta) = ({}, {})", self.eps, self.delta)));
        }
        match self.definition {
            Definition::Control | Definition::Confidentiality => {
                build_controller(&self.controller, &self.params)?;
                fixtures(&self.controller, &self.params, &self.fixtures)?;
                if self.definition == Definition::Control {
                    let s = self.simulator.as_deref().unwrap_or(default_simulator_for(&self.controller));
                    build_simulator(s, &self.controller, &self.params)?;
                }
            }
            Definition::Ahi => {
                ahi_target(&self.controller, &self.params)?;
                self.pick(ahi_adversaries(&self.controller, &self.params), |a| a.name())?;
            }
            Definition::PanPrivacy => {
                pp_mechanism(&self.controller, &self.params)?;
                self.pick(pp_adversaries(&self.params), |a| a.name())?;
            }
        }
        Ok(())
    }

    fn pick<T>(&self, all: Vec<T>, name: impl Fn(&T) -> String) -> Result<Vec<T>> {
        if self.fixtures.is_empty() {
            return Ok(all);
        }
        let mut by_name: BTreeMap<String, T> = all.into_iter().map(|a| (name(&a), a)).collect();
        self.fixtures
            .iter()
            .map(|n| by_name.remove(n).ok_or_else(|| unknown("adversary", n)))
            .collect()
    }

    /// Runs the audit, one report per fixture or adversary.
    pub fn run(&self) -> Result<Vec<AuditReport>> {
        self.validate()?;
        let opts = self.options();
        let delta = self.effective_delta()?;
        let (eps, p) = (self.eps, &self.params);
        match self.definition {
            Definition::Control => {
                let c = build_controller(&self.controller, p)?;
                let s = self.simulator.as_deref().unwrap_or(default_simulator_for(&self.controller));
                let sim = build_simulator(s, &self.controller, p)?;
                fixtures(&self.controller, p, &self.fixtures)?
                    .iter()
                    .map(|f| control_report(&self.controller, c.as_ref(), f, sim.as_ref(), eps, delta, &opts))
                    .collect()
            }
            Definition::Confidentiality => {
                let c = build_controller(&self.controller, p)?;
                fixtures(&self.controller, p, &self.fixtures)?
                    .iter()
                    .map(|f| confidentiality_report(&self.controller, c.as_ref(), f, eps, delta, &opts))
                    .collect()
            }
            Definition::Ahi => self
                .pick(ahi_adversaries(&self.controller, p), |a| a.name())?
                .iter()
                .map(|a| ahi_report(&self.controller, p, a.as_ref(), eps, delta, &opts))
                .collect(),
            Definition::PanPrivacy => {
                let m = pp_mechanism(&self.controller, p)?;
                self.pick(pp_adversaries(p), |a| a.name())?
                    .iter()
                    .map(|a| {
                        let r = audit_pp(m.as_ref(), a.as_ref(), eps, delta, &opts)?;
                        Ok(AuditReport::closeness(
                            Definition::PanPrivacy,
                            &self.controller,
                            &a.name(),
                            delta,
                            r,
                            opts.seed,
                        ))
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::NotApplicable => "not-applicable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub controller: String,
    pub definition: Definition,
    pub verdict: Verdict,
    pub eps: f64,
    pub delta: f64,
    /// Fixtures or adversaries that failed.
    pub failed: Vec<String>,
    pub audited: Vec<String>,
}

/// The four touchstone controllers and the parameters they are held to.
pub fn matrix_rows() -> Vec<(&'static str, Params, f64, f64, bool)> {
    let batch = Params {
        eps: 1.0,
        bound: 8,
        width: 12,
        ..Params::default()
    };
    let directory = Params {
        eps: 1.0,
        delta: 0.0,
        horizon: 2,
        bound: 8,
        width: 10,
        ..Params::default()
    };
    vec![
        ("bulletin", Params::default(), 0.0, 0.0, false),
        ("cloud", Params::default(), 0.0, 0.0, false),
        ("batch", batch, 1.0, 0.0, true),
        ("directory", directory, 1.0, 0.0, true),
    ]
}

/// The directory row at `B = 8` enumerates about 1.4M tapes per world.
pub const MATRIX_ENUMERATION_CAP: usize = 1 << 22;

pub const MATRIX_DEFINITIONS: [Definition; 3] = [Definition::Control, Definition::Confidentiality, Definition::Ahi];

/// Runs every touchstone against control, confidentiality and history
/// independence. Directory traffic is not a single ADT, so its history
/// independence cell is not applicable.
pub fn run_matrix(seed: u64) -> Result<Vec<MatrixCell>> {
    let mut jobs = Vec::new();
    for (name, params, eps, delta, add_tail) in matrix_rows() {
        for def in MATRIX_DEFINITIONS {
            jobs.push((name, params.clone(), eps, delta, add_tail, def));
        }
    }
    jobs.into_par_iter()
        .map(|(name, params, eps, delta, add_tail, def)| {
            if def == Definition::Ahi && ahi_target(name, &params).is_err() {
                return Ok(MatrixCell {
                    controller: name.into(),
                    definition: def,
                    verdict: Verdict::NotApplicable,
                    eps,
                    delta,
                    failed: Vec::new(),
                    audited: Vec::new(),
                });
            }
            let mut cfg = AuditConfig::new(name, def, eps, delta);
            cfg.params = params;
            cfg.add_tail = add_tail;
            cfg.seed = seed;
            cfg.enumeration_cap = MATRIX_ENUMERATION_CAP;
            let reports = cfg.run()?;
            let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.fixture.clone()).collect();
            Ok(MatrixCell {
                controller: name.into(),
                definition: def,
                verdict: if failed.is_empty() { Verdict::Pass } else { Verdict::Fail },
                eps,
                delta: cfg.effective_delta()?,
                failed,
                audited: reports.into_iter().map(|r| r.fixture).collect(),
            })
        })
        .collect()
}
