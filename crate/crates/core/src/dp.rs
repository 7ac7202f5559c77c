//! Noisy batch release, the binary-tree counter, the pan-privacy game and
//! the event-to-user controller built on an online mechanism.

use std::collections::BTreeSet;
use std::fmt::Debug;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{put_field, put_i64, put_u64};
use crate::dist::{check_indisting, estimate_from_samples, AuditMode, AuditOptions, ClosenessReport, FinitePmf};
use crate::enumerate::enumerate_paths;
use crate::error::{Error, Result};
use crate::exec::{ChannelId, Controller, Message};
use crate::hi::{pair, trial_tapes, Implementation, Op, OpKind, SortedListDict, DictValue};
use crate::noise::TruncatedGeometric;
use crate::tape::{derive_seed, Coins, Recorder, Recording, Region, Stream, TapeSet};

/// A one-shot mechanism over the logical contents of a dataset.
pub trait BatchMechanism: Send + Sync + Debug {
    fn name(&self) -> String;

    fn release(&self, data: &SortedListDict, coins: &mut dyn Coins) -> Result<i64>;

    /// Truncation cost to add to the mechanism's δ.
    fn tail_deficit(&self) -> f64 {
        0.0
    }
}

/// `|D|` plus truncated geometric noise.
#[derive(Debug, Clone)]
pub struct NoisyCount {
    pub noise: TruncatedGeometric,
}

impl BatchMechanism for NoisyCount {
    fn name(&self) -> String {
        "noisy_count".into()
    }

    fn release(&self, data: &SortedListDict, coins: &mut dyn Coins) -> Result<i64> {
        Ok(data.len() as i64 + coins.noise(&self.noise)?)
    }

    fn tail_deficit(&self) -> f64 {
        self.noise.tail_deficit()
    }
}

pub fn encode_out(v: i64) -> Vec<u8> {
    v.to_be_bytes().to_vec()
}

pub fn decode_out(b: &[u8]) -> Option<i64> {
    Some(i64::from_be_bytes(b.try_into().ok()?))
}

/// Collects a dataset until the first tick, then releases one noisy value,
/// erases the dataset and answers every later query with that value.
#[derive(Debug, Clone)]
pub struct BatchController {
    mech: Arc<dyn BatchMechanism>,
    data: SortedListDict,
    out: Option<i64>,
}

impl BatchController {
    pub fn new(mech: Arc<dyn BatchMechanism>) -> Self {
        BatchController {
            mech,
            data: SortedListDict::new(),
            out: None,
        }
    }

    pub fn noisy_count(noise: TruncatedGeometric) -> Self {
        BatchController::new(Arc::new(NoisyCount { noise }))
    }

    pub fn mechanism(&self) -> &Arc<dyn BatchMechanism> {
        &self.mech
    }

    pub fn out(&self) -> Option<i64> {
        self.out
    }

    pub fn data(&self) -> &SortedListDict {
        &self.data
    }

    fn step(&mut self, op: &Op, coins: &mut dyn Coins) -> Result<Option<i64>> {
        if let Some(out) = self.out {
            return Ok(Some(out));
        }
        if op.op == OpKind::Tick {
            let out = self.mech.release(&self.data, coins)?;
            self.data.clear();
            self.out = Some(out);
            return Ok(Some(out));
        }
        self.data.apply_op(op);
        Ok(None)
    }

    fn state_bytes(&self) -> Vec<u8> {
        let mut s = Vec::new();
        match self.out {
            None => {
                s.push(0);
                self.data.encode(&mut s);
            }
            Some(v) => {
                s.push(1);
                self.data.encode(&mut s);
                put_i64(&mut s, v);
            }
        }
        s
    }
}

impl Controller for BatchController {
    fn activate(
        &mut self,
        channel: &ChannelId,
        message: &Message,
        coins: &mut dyn Coins,
    ) -> Result<Option<(ChannelId, Message)>> {
        let Some(op) = Op::from_message(channel, message) else {
            return Ok(None);
        };
        Ok(self
            .step(&op, coins)?
            .map(|v| (channel.clone(), Message::Data(encode_out(v)))))
    }

    fn canonical_state(&self) -> Vec<u8> {
        self.state_bytes()
    }

    fn referenced_channels(&self) -> Option<BTreeSet<ChannelId>> {
        Some(self.data.keys().map(ChannelId::new).collect())
    }

    fn box_clone(&self) -> Box<dyn Controller> {
        Box::new(self.clone())
    }
}

impl Implementation for BatchController {
    fn apply(&mut self, op: &Op, coins: &mut dyn Coins) -> Result<Option<Vec<u8>>> {
        Ok(self.step(op, coins)?.map(encode_out))
    }

    fn physical_state(&self) -> Vec<u8> {
        self.state_bytes()
    }

    fn box_clone(&self) -> Box<dyn Implementation> {
        Box::new(self.clone())
    }
}

/// An online algorithm: consumes a stream and releases outputs on ticks.
pub trait OnlineMechanism: Send + Sync {
    fn name(&self) -> String;

    fn init(&mut self, _coins: &mut dyn Coins) -> Result<()> {
        Ok(())
    }

    fn process(&mut self, op: &Op, coins: &mut dyn Coins) -> Result<Option<Vec<u8>>>;

    /// Internal state as revealed by an intrusion.
    fn state(&self) -> Vec<u8>;

    fn tail_deficit(&self) -> f64 {
        0.0
    }

    fn box_clone(&self) -> Box<dyn OnlineMechanism>;
}

impl Clone for Box<dyn OnlineMechanism> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// The `feed(x)` stream element.
pub fn feed(id: impl AsRef<[u8]>, x: u8) -> Op {
    Op::new(OpKind::Feed, id, Some(&[x]))
}

/// Binary-tree counter over a horizon of `T` ticks. Every node accumulator
/// starts from its own noise draw; each release adds fresh noise to the
/// dyadic cover of `[1, t]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TreeCounter {
    horizon: u64,
    levels: u32,
    noise: TruncatedGeometric,
    delta_budget: u64,
    t: u64,
    /// `acc[h][j]` covers positions `j·2^h + 1 ..= (j+1)·2^h`.
    acc: Vec<Vec<i64>>,
}

impl TreeCounter {
    /// `eps` is split evenly across the `⌈log₂T⌉+1` levels and again
    /// between node and release noise.
    pub fn new(horizon: u64, eps: f64, delta_budget: f64, bound: i64, width: u32) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Parameter("tree counter horizon must be at least 1".into()));
        }
        let levels = Self::levels_for(horizon);
        let noise = TruncatedGeometric::new(eps / (2.0 * levels as f64), bound, width)?;
        Ok(TreeCounter {
            horizon,
            levels,
            noise,
            delta_budget: delta_budget.to_bits(),
            t: 0,
            acc: Vec::new(),
        })
    }

    pub fn levels_for(horizon: u64) -> u32 {
        let mut l = 0;
        while (1u64 << l) < horizon {
            l += 1;
        }
        l + 1
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn node_noise(&self) -> &TruncatedGeometric {
        &self.noise
    }

    pub fn delta_budget(&self) -> f64 {
        f64::from_bits(self.delta_budget)
    }

    pub fn ticks(&self) -> u64 {
        self.t
    }

    fn leaves(&self) -> u64 {
        1 << (self.levels - 1)
    }

    /// Running sum over `[1, t]` without any noise removed.
    pub fn noisy_prefix(&self, t: u64) -> i64 {
        let mut start = 0u64;
        let mut sum = 0;
        for h in (0..self.levels).rev() {
            if t & (1 << h) != 0 {
                sum += self.acc[h as usize][(start >> h) as usize];
                start += 1 << h;
            }
        }
        sum
    }
}

impl OnlineMechanism for TreeCounter {
    fn name(&self) -> String {
        "tree_counter".into()
    }

    fn init(&mut self, coins: &mut dyn Coins) -> Result<()> {
        let leaves = self.leaves();
        let mut acc = Vec::with_capacity(self.levels as usize);
        for h in 0..self.levels {
            let row = (0..leaves >> h)
                .map(|_| coins.noise(&self.noise).map_err(Error::from))
                .collect::<Result<Vec<i64>>>()?;
            acc.push(row);
        }
        self.acc = acc;
        self.t = 0;
        Ok(())
    }

    fn process(&mut self, op: &Op, coins: &mut dyn Coins) -> Result<Option<Vec<u8>>> {
        if self.t >= self.horizon {
            return Ok(None);
        }
        match op.op {
            OpKind::Tick => {
                self.t += 1;
                let out = self.noisy_prefix(self.t) + coins.noise(&self.noise)?;
                Ok(Some(encode_out(out)))
            }
            OpKind::Feed => {
                let x = op.value.as_deref().and_then(|v| v.first().copied()).unwrap_or(0);
                if x > 1 {
                    return Err(Error::Parameter(format!("tree counter inputs are bits, got {x}")));
                }
                for h in 0..self.levels {
                    self.acc[h as usize][(self.t >> h) as usize] += x as i64;
                }
                Ok(None)
            }
            _ => Ok(None),
        }
    }

    fn state(&self) -> Vec<u8> {
        let mut s = Vec::new();
        put_u64(&mut s, self.t);
        for row in &self.acc {
            for v in row {
                put_i64(&mut s, *v);
            }
        }
        s
    }

    /// Truncation cost of the node noises one input touches.
    fn tail_deficit(&self) -> f64 {
        self.levels as f64 * self.noise.tail_deficit()
    }

    fn box_clone(&self) -> Box<dyn OnlineMechanism> {
        Box::new(self.clone())
    }
}

/// Outputs nothing and keeps nothing.
#[derive(Debug, Clone, Default)]
pub struct NullMechanism;

impl OnlineMechanism for NullMechanism {
    fn name(&self) -> String {
        "null".into()
    }

    fn process(&mut self, _op: &Op, _coins: &mut dyn Coins) -> Result<Option<Vec<u8>>> {
        Ok(None)
    }

    fn state(&self) -> Vec<u8> {
        Vec::new()
    }

    fn box_clone(&self) -> Box<dyn OnlineMechanism> {
        Box::new(self.clone())
    }
}

/// Keeps the raw stream in its state.
#[derive(Debug, Clone, Default)]
pub struct RawStreamMechanism {
    ops: Vec<Op>,
}

impl OnlineMechanism for RawStreamMechanism {
    fn name(&self) -> String {
        "raw_stream".into()
    }

    fn process(&mut self, op: &Op, _coins: &mut dyn Coins) -> Result<Option<Vec<u8>>> {
        self.ops.push(op.clone());
        Ok(None)
    }

    fn state(&self) -> Vec<u8> {
        serde_json::to_vec(&self.ops).expect("ops serialize")
    }

    fn box_clone(&self) -> Box<dyn OnlineMechanism> {
        Box::new(self.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PpCode {
    Regular,
    Intrusion,
    Challenge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    In,
    Out,
}

/// One adversary message; intrusions carry no operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PpMove {
    pub code: PpCode,
    pub op: Option<Op>,
}

pub trait PpAdversary: Send + Sync {
    fn name(&self) -> String;

    /// Next move given the last response, or `None` to end the game.
    fn next(&mut self, last: Option<&[u8]>, coins: &mut dyn Coins) -> Result<Option<PpMove>>;

    fn box_clone(&self) -> Box<dyn PpAdversary>;
}

impl Clone for Box<dyn PpAdversary> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedPpAdversary {
    pub label: String,
    pub moves: Vec<PpMove>,
    pos: usize,
}

impl ScriptedPpAdversary {
    pub fn new(label: impl Into<String>, moves: Vec<PpMove>) -> Self {
        ScriptedPpAdversary {
            label: label.into(),
            moves,
            pos: 0,
        }
    }
}

impl PpAdversary for ScriptedPpAdversary {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn next(&mut self, _last: Option<&[u8]>, _coins: &mut dyn Coins) -> Result<Option<PpMove>> {
        let m = self.moves.get(self.pos).cloned();
        self.pos += 1;
        Ok(m)
    }

    fn box_clone(&self) -> Box<dyn PpAdversary> {
        Box::new(self.clone())
    }
}

pub fn regular(op: Op) -> PpMove {
    PpMove {
        code: PpCode::Regular,
        op: Some(op),
    }
}

pub fn challenge(op: Op) -> PpMove {
    PpMove {
        code: PpCode::Challenge,
        op: Some(op),
    }
}

pub fn intrusion() -> PpMove {
    PpMove {
        code: PpCode::Intrusion,
        op: None,
    }
}

/// Challenges with `feed(1)` in the first epoch, ticks, intrudes, then
/// ticks out the horizon.
pub fn tracing_adversary(horizon: u64) -> ScriptedPpAdversary {
    let mut moves = vec![challenge(feed(b"x", 1)), regular(Op::tick()), intrusion()];
    moves.extend((1..horizon).map(|_| regular(Op::tick())));
    ScriptedPpAdversary::new("tracing", moves)
}

/// The adversary's view: its coins and every message sent and received.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PpView {
    pub adversary_draws: Vec<i64>,
    pub transcript: Vec<(PpMove, Option<Vec<u8>>)>,
    /// An assertion failed on the last message.
    pub halted: bool,
}

impl PpView {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_u64(&mut out, self.adversary_draws.len() as u64);
        for d in &self.adversary_draws {
            put_i64(&mut out, *d);
        }
        for (m, resp) in &self.transcript {
            out.push(m.code as u8);
            match &m.op {
                None => out.push(0),
                Some(op) => {
                    out.push(1);
                    put_field(&mut out, &serde_json::to_vec(op).expect("op serializes"));
                }
            }
            match resp {
                None => out.push(0),
                Some(r) => {
                    out.push(1);
                    put_field(&mut out, r);
                }
            }
        }
        out.push(self.halted as u8);
        out
    }

    /// Response to the intrusion, if one succeeded.
    pub fn intrusion(&self) -> Option<&[u8]> {
        self.transcript
            .iter()
            .find(|(m, r)| m.code == PpCode::Intrusion && r.is_some())
            .and_then(|(_, r)| r.as_deref())
    }
}

/// Plays the adaptive pan-privacy game. The mechanism reads the controller
/// stream and the adversary the environment stream.
pub fn run_pp_game(
    mech: &dyn OnlineMechanism,
    adversary: &dyn PpAdversary,
    side: Side,
    tapes: &mut dyn TapeSet,
    max_ops: usize,
) -> Result<PpView> {
    let mut m = mech.box_clone();
    let mut adv = adversary.box_clone();
    m.init(tapes.coins(Stream::Controller))?;
    let mut rec = Recording::default();
    let mut intruded = false;
    let mut challenged = false;
    let mut transcript: Vec<(PpMove, Option<Vec<u8>>)> = Vec::new();
    let mut last: Option<Vec<u8>> = None;
    loop {
        let next = adv.next(
            last.as_deref(),
            &mut Recorder {
                inner: tapes.coins(Stream::Environment),
                recording: &mut rec,
            },
        )?;
        let Some(mv) = next else { break };
        if transcript.len() >= max_ops {
            return Err(Error::InvalidAdversary(format!(
                "{} did not stop within {max_ops} moves",
                adv.name()
            )));
        }
        let resp = match mv.code {
            PpCode::Intrusion => {
                if intruded {
                    transcript.push((mv, None));
                    return Ok(view(rec, transcript, true));
                }
                intruded = true;
                Some(m.state())
            }
            PpCode::Regular => {
                let op = mv
                    .op
                    .as_ref()
                    .ok_or_else(|| Error::InvalidAdversary("regular move without an operation".into()))?;
                m.process(op, tapes.coins(Stream::Controller))?
            }
            PpCode::Challenge => {
                let op = mv
                    .op
                    .as_ref()
                    .ok_or_else(|| Error::InvalidAdversary("challenge without an operation".into()))?;
                if challenged || op.op == OpKind::Tick {
                    transcript.push((mv, None));
                    return Ok(view(rec, transcript, true));
                }
                challenged = true;
                if side == Side::In {
                    m.process(op, tapes.coins(Stream::Controller))?;
                }
                None
            }
        };
        last = resp.clone();
        transcript.push((mv, resp));
    }
    Ok(view(rec, transcript, false))
}

fn view(rec: Recording, transcript: Vec<(PpMove, Option<Vec<u8>>)>, halted: bool) -> PpView {
    PpView {
        adversary_draws: rec.draws.into_iter().map(|(_, _, v)| v).collect(),
        transcript,
        halted,
    }
}

/// Exact view laws for both sides.
pub fn pp_view_laws(
    mech: &dyn OnlineMechanism,
    adversary: &dyn PpAdversary,
    max_ops: usize,
    cap: usize,
) -> Result<(FinitePmf, FinitePmf)> {
    let law = |side| -> Result<FinitePmf> {
        let leaves = enumerate_paths(|pc| run_pp_game(mech, adversary, side, pc, max_ops), cap)?;
        FinitePmf::from_weights(leaves.into_iter().map(|l| (l.value.to_bytes(), l.mass)))
    };
    Ok((law(Side::In)?, law(Side::Out)?))
}

/// Checks `V(in) ≈ V(out)` for one adversary.
pub fn audit_pp(
    mech: &dyn OnlineMechanism,
    adversary: &dyn PpAdversary,
    eps: f64,
    delta: f64,
    opts: &AuditOptions,
) -> Result<ClosenessReport> {
    match opts.mode {
        AuditMode::Exact => {
            let (p, q) = pp_view_laws(mech, adversary, opts.max_steps as usize, opts.enumeration_cap)?;
            Ok(check_indisting(&p, &q, eps, delta))
        }
        AuditMode::Sampled { trials, confidence } => {
            let sample = |side| {
                (0..trials)
                    .into_par_iter()
                    .map(|i| {
                        let mut tapes = trial_tapes(opts.seed, i);
                        run_pp_game(mech, adversary, side, &mut tapes, opts.max_steps as usize).map(|v| v.to_bytes())
                    })
                    .collect::<Result<Vec<_>>>()
            };
            let ps = sample(Side::In)?;
            let qs = sample(Side::Out)?;
            estimate_from_samples(&ps, &qs, eps, delta, confidence, derive_seed(opts.seed, u64::MAX))
        }
    }
}

/// How the event-to-user controller reads incoming operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpInput {
    /// Operations go to the mechanism as they are.
    Direct,
    /// Directory traffic: `get` feeds a 1, `getCount` ticks, other writes
    /// are not the mechanism's business.
    DirectoryLookups,
}

/// Forwards the first operation of each present user to an online
/// mechanism, and every tick. Deleting forgets the user, not the
/// mechanism's input. The mechanism reads tape sub-region 0; the user
/// dictionary draws nothing, so sub-region 1 stays unread.
#[derive(Clone)]
pub struct PpController {
    mech: Box<dyn OnlineMechanism>,
    users: SortedListDict,
    input: PpInput,
}

impl PpController {
    pub fn new(mech: Box<dyn OnlineMechanism>, input: PpInput) -> Self {
        PpController {
            mech,
            users: SortedListDict::new(),
            input,
        }
    }

    pub fn users(&self) -> &SortedListDict {
        &self.users
    }

    pub fn mechanism(&self) -> &dyn OnlineMechanism {
        self.mech.as_ref()
    }

    fn translate(&self, op: Op) -> Option<Op> {
        match self.input {
            PpInput::Direct => Some(op),
            PpInput::DirectoryLookups => match op.op {
                OpKind::Get => Some(feed(&op.id, 1)),
                OpKind::GetCount | OpKind::Tick => Some(Op { op: OpKind::Tick, ..op }),
                OpKind::Delete => Some(op),
                _ => None,
            },
        }
    }
}

impl Controller for PpController {
    fn init(&mut self, coins: &mut dyn Coins) -> Result<()> {
        self.mech.init(&mut Region::new(coins, 0))
    }

    fn activate(
        &mut self,
        channel: &ChannelId,
        message: &Message,
        coins: &mut dyn Coins,
    ) -> Result<Option<(ChannelId, Message)>> {
        let Some(op) = Op::from_message(channel, message).and_then(|op| self.translate(op)) else {
            return Ok(None);
        };
        match op.op {
            OpKind::Tick => Ok(self
                .mech
                .process(&op, &mut Region::new(coins, 0))?
                .map(|out| (channel.clone(), Message::Data(out)))),
            OpKind::Delete => {
                self.users.delete(&op.id);
                Ok(None)
            }
            _ if self.users.contains(&op.id) => Ok(None),
            _ => {
                self.users.set(&op.id, DictValue::Top);
                self.mech.process(&op, &mut Region::new(coins, 0))?;
                Ok(None)
            }
        }
    }

    fn canonical_state(&self) -> Vec<u8> {
        pair(&self.users.to_bytes(), &self.mech.state())
    }

    fn referenced_channels(&self) -> Option<BTreeSet<ChannelId>> {
        Some(self.users.keys().map(ChannelId::new).collect())
    }

    fn box_clone(&self) -> Box<dyn Controller> {
        Box::new(self.clone())
    }
}

/// Instrumented mechanism that records what it was given.
#[derive(Debug, Clone, Default)]
pub struct RecordingMechanism {
    pub seen: Vec<Op>,
}

impl OnlineMechanism for RecordingMechanism {
    fn name(&self) -> String {
        "recording".into()
    }

    fn process(&mut self, op: &Op, _coins: &mut dyn Coins) -> Result<Option<Vec<u8>>> {
        self.seen.push(op.clone());
        Ok(None)
    }

    fn state(&self) -> Vec<u8> {
        serde_json::to_vec(&self.seen).expect("ops serialize")
    }

    fn box_clone(&self) -> Box<dyn OnlineMechanism> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enumerate::enumerate_merged;
    use crate::enumerate::Stepper;
    use crate::exec::run_ideal;
    use crate::exec::Query;
    use crate::tape::RandomTape;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn spec(eps: f64, b: i64, w: u32) -> TruncatedGeometric {
        TruncatedGeometric::new(eps, b, w).unwrap()
    }

    fn q(ch: &str, m: Message) -> Query {
        Query {
            channel: ChannelId::new(ch),
            message: m,
        }
    }

    fn ins() -> Message {
        Op::insert("").to_message()
    }

    fn outs(c: &mut dyn Controller, queries: &[Query], coins: &mut dyn Coins) -> Vec<Option<i64>> {
        c.init(coins).unwrap();
        queries
            .iter()
            .map(|qq| {
                c.activate(&qq.channel, &qq.message, coins)
                    .unwrap()
                    .map(|(_, m)| decode_out(m.payload()).unwrap())
            })
            .collect()
    }

    #[test]
    fn batch_releases_count_plus_noise_once() {
        let s = spec(1.0, 8, 12);
        let mut c = BatchController::noisy_count(s.clone());
        let queries = vec![q("a", ins()), q("b", ins()), q("e", Message::Tick), q("e", Message::Delete), q("a", ins())];
        let mut tape = RandomTape::new(3, 64);
        let o = outs(&mut c, &queries, &mut tape);
        let z = tape.draws()[0].2;
        assert_eq!(o[..2], [None, None]);
        assert_eq!(o[2], Some(2 + z));
        assert_eq!(o[3], o[2]);
        assert_eq!(o[4], o[2]);
        assert!(c.data().is_empty());
        assert_eq!(tape.consumed(), 12);
    }

    #[test]
    fn batch_on_empty_dataset_releases_noise() {
        let mut c = BatchController::noisy_count(spec(1.0, 8, 12));
        let mut tape = RandomTape::new(9, 64);
        let o = outs(&mut c, &[q("e", Message::Tick)], &mut tape);
        assert_eq!(o[0], Some(tape.draws()[0].2));
    }

    #[test]
    fn batch_state_law_matches_noise_shift() {
        let s = spec(1.0, 4, 8);
        let queries = vec![q("a", ins()), q("e", Message::Tick)];
        let leaves = enumerate_paths(
            |pc| {
                let mut c = BatchController::noisy_count(s.clone());
                let o = run_ideal(&mut c, &queries, pc, 100)?;
                Ok(o.controller_state)
            },
            1000,
        )
        .unwrap();
        assert_eq!(leaves.len(), s.quantized_pmf().len());
        for (l, (z, p)) in leaves.iter().zip(s.quantized_pmf()) {
            assert_eq!(l.mass, p);
            let mut expect = vec![1];
            SortedListDict::new().encode(&mut expect);
            put_i64(&mut expect, 1 + z);
            assert_eq!(l.value, crate::exec::ControllerState::Bytes(expect));
        }
    }

    #[test]
    fn tree_counter_single_node() {
        let mut m = TreeCounter::new(1, 1.0, 0.0, 4, 10).unwrap();
        let mut tape = RandomTape::new(1, 100);
        m.init(&mut tape).unwrap();
        m.process(&feed("a", 1), &mut tape).unwrap();
        let out = decode_out(&m.process(&Op::tick(), &mut tape).unwrap().unwrap()).unwrap();
        let d: Vec<i64> = tape.draws().iter().map(|x| x.2).collect();
        assert_eq!(d.len(), 2);
        assert_eq!(out, 1 + d[0] + d[1]);
        assert_eq!(m.process(&Op::tick(), &mut tape).unwrap(), None);
        assert_eq!(m.process(&feed("a", 1), &mut tape).unwrap(), None);
    }

    #[test]
    fn tree_counter_zero_stream_uses_cover_noise() {
        let mut m = TreeCounter::new(4, 1.0, 0.0, 4, 10).unwrap();
        assert_eq!(m.levels(), 3);
        let mut tape = RandomTape::new(2, 10_000);
        m.init(&mut tape).unwrap();
        let node: Vec<i64> = tape.draws().iter().map(|x| x.2).collect();
        assert_eq!(node.len(), 7);
        // Level rows: [n0 n1 n2 n3] [n4 n5] [n6].
        let cover = [node[0], node[4], node[4] + node[2], node[6]];
        for c in cover {
            let out = decode_out(&m.process(&Op::tick(), &mut tape).unwrap().unwrap()).unwrap();
            let rel = tape.draws().last().unwrap().2;
            assert_eq!(out, c + rel);
        }
    }

    #[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
    struct ReleaseNoise {
        left: Vec<TruncatedGeometric>,
        sum: i64,
    }

    impl Stepper for ReleaseNoise {
        type Output = i64;
        fn step(&mut self, coins: &mut dyn Coins) -> Result<Option<i64>> {
            match self.left.pop() {
                None => Ok(Some(self.sum)),
                Some(s) => {
                    self.sum += coins.noise(&s)?;
                    Ok(None)
                }
            }
        }
    }

    #[test]
    fn first_release_variance_matches_convolution() {
        // Z_1 for T = 4 is one leaf noise plus the release noise.
        let m = TreeCounter::new(4, 1.0, 0.0, 32, 16).unwrap();
        let s = m.node_noise().clone();
        let law = enumerate_merged(
            ReleaseNoise {
                left: vec![s.clone(), s.clone()],
                sum: 0,
            },
            10,
            100_000,
        )
        .unwrap();
        let mean: f64 = law.iter().map(|(z, p)| *z as f64 * p).sum();
        let var: f64 = law.iter().map(|(z, p)| (*z as f64 - mean).powi(2) * p).sum();
        let (_, v1) = s.moments();
        assert!((var - 2.0 * v1).abs() < 1e-9);
        // Independent oracle: direct convolution of the quantized pmf.
        let pmf = s.quantized_pmf();
        let mut conv: BTreeMap<i64, f64> = BTreeMap::new();
        for (a, p) in &pmf {
            for (b, r) in &pmf {
                *conv.entry(a + b).or_insert(0.0) += p * r;
            }
        }
        let cvar: f64 = conv.iter().map(|(z, p)| (*z as f64).powi(2) * p).sum();
        assert!((var - cvar).abs() < 1e-9);
    }

    #[test]
    fn double_intrusion_halts_with_identical_suffix() {
        let adv = ScriptedPpAdversary::new(
            "twice",
            vec![challenge(feed("x", 1)), intrusion(), intrusion(), regular(Op::tick())],
        );
        let mech = RawStreamMechanism::default();
        for side in [Side::In, Side::Out] {
            let mut tapes = trial_tapes(0, 0);
            let v = run_pp_game(&mech, &adv, side, &mut tapes, 10).unwrap();
            assert!(v.halted);
            assert_eq!(v.transcript.len(), 3);
            assert_eq!(v.transcript[2].1, None);
        }
    }

    #[test]
    fn challenge_tick_is_rejected() {
        let adv = ScriptedPpAdversary::new("tick", vec![challenge(Op::tick()), regular(Op::tick())]);
        let mut tapes = trial_tapes(0, 0);
        let v = run_pp_game(&NullMechanism, &adv, Side::In, &mut tapes, 10).unwrap();
        assert!(v.halted);
        assert_eq!(v.transcript.len(), 1);
    }

    #[test]
    fn no_challenge_means_equal_views() {
        let m = TreeCounter::new(2, 1.0, 0.0, 3, 8).unwrap();
        let adv = ScriptedPpAdversary::new("plain", vec![regular(feed("a", 1)), regular(Op::tick()), intrusion()]);
        let r = audit_pp(&m, &adv, 0.0, 0.0, &AuditOptions::default()).unwrap();
        assert!(r.passed);
        assert_eq!(r.delta(), 0.0);
    }

    #[test]
    fn null_mechanism_is_pan_private() {
        let r = audit_pp(&NullMechanism, &tracing_adversary(2), 0.0, 0.0, &AuditOptions::default()).unwrap();
        assert!(r.passed);
    }

    #[test]
    fn raw_stream_fails() {
        let r = audit_pp(&RawStreamMechanism::default(), &tracing_adversary(2), 5.0, 0.9, &AuditOptions::default()).unwrap();
        assert!(!r.passed);
        assert_eq!(r.delta(), 1.0);
    }

    #[test]
    fn tracing_views_shift_first_release_by_one() {
        let m = TreeCounter::new(2, 1.0, 0.0, 3, 8).unwrap();
        let adv = tracing_adversary(2);
        let mut a = trial_tapes(11, 0);
        let mut b = trial_tapes(11, 0);
        let vin = run_pp_game(&m, &adv, Side::In, &mut a, 10).unwrap();
        let vout = run_pp_game(&m, &adv, Side::Out, &mut b, 10).unwrap();
        let first = |v: &PpView| decode_out(v.transcript[1].1.as_deref().unwrap()).unwrap();
        assert_eq!(first(&vin), first(&vout) + 1);
    }

    #[test]
    fn tree_counter_resists_tracing() {
        let m = TreeCounter::new(2, 1.0, 0.0, 4, 8).unwrap();
        let r = audit_pp(&m, &tracing_adversary(2), 1.0, m.tail_deficit(), &AuditOptions::default()).unwrap();
        assert!(r.passed);
    }

    #[test]
    fn pp_controller_forwards_first_op_per_user() {
        let mut c = PpController::new(Box::new(RecordingMechanism::default()), PpInput::Direct);
        let mut tape = RandomTape::new(0, 0);
        c.init(&mut tape).unwrap();
        let a = ChannelId::new("a");
        let f = feed("", 1).to_message();
        for m in [&f, &f] {
            assert_eq!(c.activate(&a, m, &mut tape).unwrap(), None);
        }
        c.activate(&ChannelId::new("e"), &Message::Tick, &mut tape).unwrap();
        let seen = |c: &PpController| -> Vec<Op> { serde_json::from_slice(&c.mechanism().state()).unwrap() };
        assert_eq!(seen(&c).len(), 2);
        assert_eq!(seen(&c)[0], feed("a", 1));
        assert_eq!(seen(&c)[1].op, OpKind::Tick);

        let mut c = PpController::new(Box::new(RecordingMechanism::default()), PpInput::Direct);
        c.init(&mut tape).unwrap();
        c.activate(&a, &f, &mut tape).unwrap();
        c.activate(&a, &Message::Delete, &mut tape).unwrap();
        c.activate(&a, &f, &mut tape).unwrap();
        assert_eq!(seen(&c).len(), 2);
        assert!(c.users().contains(b"a"));

        let before = c.canonical_state();
        c.activate(&ChannelId::new("z"), &Message::Delete, &mut tape).unwrap();
        assert_eq!(c.canonical_state(), before);
    }

    fn arb_stream() -> impl Strategy<Value = Vec<(u8, u8)>> {
        // (user, kind): 0 feed, 1 delete, 2 tick.
        proptest::collection::vec((0u8..4, 0u8..3), 0..25)
    }

    proptest! {
        #[test]
        fn pp_filter_forwards_first_op_per_membership(stream in arb_stream()) {
            let mut c = PpController::new(Box::new(RecordingMechanism::default()), PpInput::Direct);
            let mut tape = RandomTape::new(0, 0);
            c.init(&mut tape).unwrap();
            let mut members = BTreeSet::new();
            let mut expect = Vec::new();
            for (u, kind) in &stream {
                let ch = ChannelId::new([b'u', *u]);
                let msg = match kind {
                    0 => feed("", 1).to_message(),
                    1 => Message::Delete,
                    _ => Message::Tick,
                };
                match kind {
                    0 => {
                        if members.insert(*u) {
                            expect.push(feed([b'u', *u], 1));
                        }
                    }
                    1 => {
                        members.remove(u);
                    }
                    _ => expect.push(Op { op: OpKind::Tick, id: vec![b'u', *u], value: None }),
                }
                c.activate(&ch, &msg, &mut tape).unwrap();
            }
            let seen: Vec<Op> = serde_json::from_slice(&c.mechanism().state()).unwrap();
            prop_assert_eq!(seen, expect);
        }

        #[test]
        fn batch_out_never_changes_after_tick(ops in proptest::collection::vec(0u8..3, 0..20), seed in any::<u64>()) {
            let mut c = BatchController::noisy_count(spec(1.0, 8, 10));
            let mut tape = RandomTape::new(seed, 100);
            Controller::init(&mut c, &mut tape).unwrap();
            let e = ChannelId::new("e");
            let first = c.activate(&e, &Message::Tick, &mut tape).unwrap();
            for o in ops {
                let m = match o { 0 => ins(), 1 => Message::Delete, _ => Message::Tick };
                prop_assert_eq!(c.activate(&ChannelId::new("a"), &m, &mut tape).unwrap().map(|x| x.1), first.clone().map(|x| x.1));
            }
        }

        #[test]
        fn tree_counter_minus_noise_is_running_sum(bits in proptest::collection::vec(0u8..2, 4), seed in any::<u64>()) {
            let mut m = TreeCounter::new(4, 1.0, 0.0, 6, 10).unwrap();
            let mut tape = RandomTape::new(seed, 10_000);
            m.init(&mut tape).unwrap();
            // Accumulators before any input hold the node noise alone.
            let base = m.clone();
            let mut running = 0;
            for (t, b) in bits.iter().enumerate() {
                m.process(&feed("a", *b), &mut tape).unwrap();
                running += *b as i64;
                let out = decode_out(&m.process(&Op::tick(), &mut tape).unwrap().unwrap()).unwrap();
                let rel = tape.draws().last().unwrap().2;
                prop_assert_eq!(out - rel - base.noisy_prefix(t as u64 + 1), running);
            }
        }
    }
}
