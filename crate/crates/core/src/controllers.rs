//! Touchstone and counterexample controllers, and parallel composition.

use std::collections::BTreeSet;

use crate::codec::{put_field, put_u64, Reader};
use crate::dp::{PpController, PpInput, TreeCounter};
use crate::error::{Error, Result};
use crate::exec::{ChannelId, Controller, Message, Query};
use crate::hi::{encode_board, pair, unpair, DictValue, Implementation, Op, OpKind, SortedListDict};
use crate::tape::{Coins, DrawKind, RandomTape, Region, TapeError};

type Reply = Option<(ChannelId, Message)>;

fn reply_on(channel: &ChannelId, out: Option<Vec<u8>>) -> Reply {
    out.map(|p| (channel.clone(), Message::Data(p)))
}

/// Keeps a `k`-bit word, starts from `k` tape bits and XORs in every
/// `k`-bit payload.
#[derive(Debug, Clone)]
pub struct XorController {
    k: u32,
    state: u64,
}

impl XorController {
    pub fn new(k: u32) -> Result<Self> {
        if !(1..=63).contains(&k) {
            return Err(Error::Parameter(format!("xor width must be in 1..=63, got {k}")));
        }
        Ok(XorController { k, state: 0 })
    }

    pub fn width_bytes(&self) -> usize {
        self.k.div_ceil(8) as usize
    }

    pub fn encode_word(&self, x: u64) -> Vec<u8> {
        x.to_be_bytes()[8 - self.width_bytes()..].to_vec()
    }

    pub fn word(&self) -> u64 {
        self.state
    }

    /// Payloads that are not exactly a `k`-bit word are dropped.
    pub fn decode_word(&self, p: &[u8]) -> Option<u64> {
        if p.len() != self.width_bytes() {
            return None;
        }
        let x = p.iter().fold(0u64, |a, b| (a << 8) | *b as u64);
        (x >> self.k == 0).then_some(x)
    }
}

impl Controller for XorController {
    fn init(&mut self, coins: &mut dyn Coins) -> Result<()> {
        self.state = coins.bits(self.k)?;
        Ok(())
    }

    fn activate(&mut self, _channel: &ChannelId, message: &Message, _coins: &mut dyn Coins) -> Result<Reply> {
        if let Message::Data(p) = message {
            if let Some(x) = self.decode_word(p) {
                self.state ^= x;
            }
        }
        Ok(None)
    }

    fn canonical_state(&self) -> Vec<u8> {
        self.encode_word(self.state)
    }

    fn referenced_channels(&self) -> Option<BTreeSet<ChannelId>> {
        Some(BTreeSet::new())
    }

    fn box_clone(&self) -> Box<dyn Controller> {
        Box::new(self.clone())
    }
}

/// Per-channel dictionary over a sorted list. With `reads`, `get` answers
/// the caller's own entry.
#[derive(Debug, Clone, Default)]
pub struct DictController {
    pub dict: SortedListDict,
    pub reads: bool,
}

impl DictController {
    pub fn new(reads: bool) -> Self {
        DictController {
            dict: SortedListDict::new(),
            reads,
        }
    }
}

impl Controller for DictController {
    fn activate(&mut self, channel: &ChannelId, message: &Message, _coins: &mut dyn Coins) -> Result<Reply> {
        let Some(op) = Op::from_message(channel, message) else {
            return Ok(None);
        };
        let out = self.dict.apply_op(&op);
        Ok(if self.reads { reply_on(channel, out) } else { None })
    }

    fn canonical_state(&self) -> Vec<u8> {
        self.dict.to_bytes()
    }

    fn referenced_channels(&self) -> Option<BTreeSet<ChannelId>> {
        Some(self.dict.keys().map(ChannelId::new).collect())
    }

    fn box_clone(&self) -> Box<dyn Controller> {
        Box::new(self.clone())
    }
}

/// Private file storage: one store per owner, downloads only from the
/// owner's channel.
#[derive(Debug, Clone, Default)]
pub struct CloudController {
    /// Keyed by `pair(owner, name)`.
    files: SortedListDict,
}

impl CloudController {
    pub fn new() -> Self {
        CloudController::default()
    }

    pub fn upload(name: &[u8], file: &[u8]) -> Message {
        Op::new(OpKind::Upload, [], Some(&pair(name, file))).to_message()
    }

    pub fn download(name: &[u8]) -> Message {
        Op::new(OpKind::Download, [], Some(name)).to_message()
    }

    fn step(&mut self, op: &Op) -> Option<Vec<u8>> {
        match op.op {
            OpKind::Upload => {
                if let Some((name, file)) = op.value.as_deref().and_then(unpair) {
                    let key = pair(&op.id, &name);
                    if !self.files.contains(&key) {
                        self.files.set(&key, DictValue::Bytes(file));
                    }
                }
                None
            }
            OpKind::Download => {
                let key = pair(&op.id, op.value.as_deref()?);
                self.files.get(&key).and_then(DictValue::to_arg)
            }
            OpKind::Delete => {
                let doomed: Vec<Vec<u8>> = self
                    .files
                    .keys()
                    .filter(|k| unpair(k).is_some_and(|(owner, _)| owner == op.id))
                    .cloned()
                    .collect();
                for k in doomed {
                    self.files.delete(&k);
                }
                None
            }
            _ => None,
        }
    }

    fn owners(&self) -> BTreeSet<ChannelId> {
        self.files
            .keys()
            .filter_map(|k| unpair(k))
            .map(|(owner, _)| ChannelId(owner))
            .collect()
    }
}

impl Controller for CloudController {
    fn activate(&mut self, channel: &ChannelId, message: &Message, _coins: &mut dyn Coins) -> Result<Reply> {
        let Some(op) = Op::from_message(channel, message) else {
            return Ok(None);
        };
        Ok(reply_on(channel, self.step(&op)))
    }

    fn canonical_state(&self) -> Vec<u8> {
        self.files.to_bytes()
    }

    fn referenced_channels(&self) -> Option<BTreeSet<ChannelId>> {
        Some(self.owners())
    }

    fn box_clone(&self) -> Box<dyn Controller> {
        Box::new(self.clone())
    }
}

impl Implementation for CloudController {
    fn apply(&mut self, op: &Op, _coins: &mut dyn Coins) -> Result<Option<Vec<u8>>> {
        Ok(self.step(op))
    }

    fn physical_state(&self) -> Vec<u8> {
        self.files.to_bytes()
    }

    fn box_clone(&self) -> Box<dyn Implementation> {
        Box::new(self.clone())
    }
}

/// Public board: posts in insertion order, readable by anyone.
#[derive(Debug, Clone, Default)]
pub struct BoardController {
    posts: Vec<(Vec<u8>, Vec<u8>)>,
}

impl BoardController {
    pub fn new() -> Self {
        BoardController::default()
    }

    pub fn post(msg: &[u8]) -> Message {
        Op::new(OpKind::Post, [], Some(msg)).to_message()
    }

    pub fn read() -> Message {
        Op::new(OpKind::Read, [], None).to_message()
    }

    pub fn posts(&self) -> &[(Vec<u8>, Vec<u8>)] {
        &self.posts
    }

    fn step(&mut self, op: &Op) -> Option<Vec<u8>> {
        match op.op {
            OpKind::Post => {
                self.posts.push((op.id.clone(), op.value.clone().unwrap_or_default()));
                None
            }
            OpKind::Read => Some(encode_board(&self.posts)),
            OpKind::Delete => {
                self.posts.retain(|(id, _)| id != &op.id);
                None
            }
            _ => None,
        }
    }
}

impl Controller for BoardController {
    fn activate(&mut self, channel: &ChannelId, message: &Message, _coins: &mut dyn Coins) -> Result<Reply> {
        let Some(op) = Op::from_message(channel, message) else {
            return Ok(None);
        };
        Ok(reply_on(channel, self.step(&op)))
    }

    fn canonical_state(&self) -> Vec<u8> {
        encode_board(&self.posts)
    }

    fn referenced_channels(&self) -> Option<BTreeSet<ChannelId>> {
        Some(self.posts.iter().map(|(id, _)| ChannelId::new(id)).collect())
    }

    fn box_clone(&self) -> Box<dyn Controller> {
        Box::new(self.clone())
    }
}

impl Implementation for BoardController {
    fn apply(&mut self, op: &Op, _coins: &mut dyn Coins) -> Result<Option<Vec<u8>>> {
        Ok(self.step(op))
    }

    fn physical_state(&self) -> Vec<u8> {
        encode_board(&self.posts)
    }

    fn box_clone(&self) -> Box<dyn Implementation> {
        Box::new(self.clone())
    }
}

/// Directory wire messages.
pub mod directory {
    use super::*;

    pub fn set(listing: &[u8]) -> Message {
        Op::new(OpKind::Set, [], Some(listing)).to_message()
    }

    pub fn get(owner: &[u8]) -> Message {
        Op::new(OpKind::Get, [], Some(owner)).to_message()
    }

    pub fn get_count() -> Message {
        Op::new(OpKind::GetCount, [], None).to_message()
    }
}

/// The listing half of the directory: `set` writes the caller's listing,
/// `get(owner)` reads anyone's.
#[derive(Debug, Clone, Default)]
pub struct DirectoryDict {
    dict: SortedListDict,
}

impl DirectoryDict {
    pub fn new() -> Self {
        DirectoryDict::default()
    }

    fn step(dict: &mut SortedListDict, op: &Op) -> Option<Vec<u8>> {
        match op.op {
            OpKind::Set => {
                dict.set(&op.id, DictValue::from_arg(&op.value));
                None
            }
            OpKind::Get => dict
                .get(op.value.as_deref()?)
                .map(|v| v.to_arg().unwrap_or_default()),
            OpKind::Delete => {
                dict.delete(&op.id);
                None
            }
            _ => None,
        }
    }
}

impl Controller for DirectoryDict {
    fn activate(&mut self, channel: &ChannelId, message: &Message, _coins: &mut dyn Coins) -> Result<Reply> {
        let Some(op) = Op::from_message(channel, message) else {
            return Ok(None);
        };
        Ok(reply_on(channel, DirectoryDict::step(&mut self.dict, &op)))
    }

    fn canonical_state(&self) -> Vec<u8> {
        self.dict.to_bytes()
    }

    fn referenced_channels(&self) -> Option<BTreeSet<ChannelId>> {
        Some(self.dict.keys().map(ChannelId::new).collect())
    }

    fn box_clone(&self) -> Box<dyn Controller> {
        Box::new(self.clone())
    }
}

/// Tree-counter parameters shared by both directory builds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CounterParams {
    pub horizon: u64,
    pub eps: f64,
    pub delta: f64,
    pub bound: i64,
    pub width: u32,
}

impl CounterParams {
    pub fn counter(&self) -> Result<TreeCounter> {
        TreeCounter::new(self.horizon, self.eps, self.delta, self.bound, self.width)
    }
}

/// Public directory that also releases a private count of distinct users
/// who looked something up. Deletion clears the listing and the user's
/// membership but not the counter.
///
/// The counter reads tape region `(0, 0)` so the monolithic and composed
/// builds consume identical tapes, and the state is laid out as the
/// composed pair `((users, counter), listings)`.
#[derive(Clone)]
pub struct DirectoryController {
    listings: SortedListDict,
    /// Membership only; the stored value is irrelevant.
    users: SortedListDict,
    counter: TreeCounter,
}

impl DirectoryController {
    pub fn new(params: CounterParams) -> Result<Self> {
        Ok(DirectoryController {
            listings: SortedListDict::new(),
            users: SortedListDict::new(),
            counter: params.counter()?,
        })
    }
}

fn counter_coins(coins: &mut dyn Coins, f: impl FnOnce(&mut dyn Coins) -> Result<Option<Vec<u8>>>) -> Result<Option<Vec<u8>>> {
    let mut outer = Region::new(coins, 0);
    let mut inner = Region::new(&mut outer, 0);
    f(&mut inner)
}

impl Controller for DirectoryController {
    fn init(&mut self, coins: &mut dyn Coins) -> Result<()> {
        use crate::dp::OnlineMechanism;
        let counter = &mut self.counter;
        counter_coins(coins, |c| counter.init(c).map(|_| None))?;
        Ok(())
    }

    fn activate(&mut self, channel: &ChannelId, message: &Message, coins: &mut dyn Coins) -> Result<Reply> {
        use crate::dp::{feed, OnlineMechanism};
        let Some(op) = Op::from_message(channel, message) else {
            return Ok(None);
        };
        let out = match op.op {
            OpKind::Delete => {
                self.listings.delete(&op.id);
                self.users.delete(&op.id);
                None
            }
            OpKind::Set => DirectoryDict::step(&mut self.listings, &op),
            OpKind::Get => {
                if !self.users.contains(&op.id) {
                    self.users.set(&op.id, DictValue::Top);
                    let counter = &mut self.counter;
                    counter_coins(coins, |c| counter.process(&feed(&op.id, 1), c))?;
                }
                DirectoryDict::step(&mut self.listings, &op)
            }
            OpKind::GetCount | OpKind::Tick => {
                let counter = &mut self.counter;
                counter_coins(coins, |c| counter.process(&Op::tick(), c))?
            }
            _ => None,
        };
        Ok(reply_on(channel, out))
    }

    fn canonical_state(&self) -> Vec<u8> {
        use crate::dp::OnlineMechanism;
        pair(&pair(&self.users.to_bytes(), &self.counter.state()), &self.listings.to_bytes())
    }

    fn referenced_channels(&self) -> Option<BTreeSet<ChannelId>> {
        Some(
            self.users
                .keys()
                .chain(self.listings.keys())
                .map(ChannelId::new)
                .collect(),
        )
    }

    fn box_clone(&self) -> Box<dyn Controller> {
        Box::new(self.clone())
    }
}

/// Directory with statistics as the parallel composition of its counting
/// half and its listing half.
pub fn composed_directory(params: CounterParams) -> Result<ParallelCompose> {
    Ok(ParallelCompose::new(
        Box::new(PpController::new(Box::new(params.counter()?), PpInput::DirectoryLookups)),
        Box::new(DirectoryDict::new()),
    ))
}

/// Counts the bits drawn through it.
struct Meter<'a> {
    inner: Region<'a>,
    used: &'a mut u64,
}

impl Coins for Meter<'_> {
    fn draw_in(&mut self, region: u32, kind: &DrawKind) -> std::result::Result<i64, TapeError> {
        let v = self.inner.draw_in(region, kind)?;
        *self.used += kind.width() as u64;
        Ok(v)
    }

    fn consumed_bits(&self) -> u64 {
        self.inner.consumed_bits()
    }
}

/// Runs two query-response controllers side by side on tape regions 0 and
/// 1, pairing their replies and states.
#[derive(Clone)]
pub struct ParallelCompose {
    halves: [Box<dyn Controller>; 2],
    /// Optional per-half bit shares.
    budgets: Option<[u64; 2]>,
    used: [u64; 2],
}

impl ParallelCompose {
    pub fn new(left: Box<dyn Controller>, right: Box<dyn Controller>) -> Self {
        ParallelCompose {
            halves: [left, right],
            budgets: None,
            used: [0, 0],
        }
    }

    pub fn with_budgets(mut self, budgets: [u64; 2]) -> Self {
        self.budgets = Some(budgets);
        self
    }

    pub fn half(&self, i: usize) -> &dyn Controller {
        self.halves[i].as_ref()
    }

    fn run_half<T>(
        &mut self,
        i: usize,
        coins: &mut dyn Coins,
        f: impl FnOnce(&mut dyn Controller, &mut dyn Coins) -> Result<T>,
    ) -> Result<T> {
        let mut meter = Meter {
            inner: Region::new(coins, i as u32),
            used: &mut self.used[i],
        };
        let out = f(self.halves[i].as_mut(), &mut meter)?;
        if let Some(b) = self.budgets {
            if self.used[i] > b[i] {
                return Err(Error::SplitViolation {
                    region: i as u32,
                    budget: b[i],
                });
            }
        }
        Ok(out)
    }
}

/// Encodes a pair of optional replies.
pub fn pair_replies(a: Option<&Message>, b: Option<&Message>) -> Vec<u8> {
    let mut out = Vec::new();
    for m in [a, b] {
        match m {
            None => out.push(0),
            Some(m) => {
                out.push(1);
                let mut enc = Vec::new();
                m.encode(&mut enc);
                put_field(&mut out, &enc);
            }
        }
    }
    out
}

fn decode_message(b: &[u8]) -> Option<Message> {
    let (&tag, rest) = b.split_first()?;
    match tag {
        0 => {
            let mut r = Reader::new(rest);
            let p = r.field().ok()?.to_vec();
            r.finish().ok()?;
            Some(Message::Data(p))
        }
        1 if rest.is_empty() => Some(Message::Delete),
        2 if rest.is_empty() => Some(Message::Tick),
        3 if rest.is_empty() => Some(Message::Fail),
        _ => None,
    }
}

pub fn unpair_replies(p: &[u8]) -> Option<(Option<Message>, Option<Message>)> {
    let mut r = Reader::new(p);
    let mut next = || -> Option<Option<Message>> {
        match r.byte().ok()? {
            0 => Some(None),
            1 => Some(Some(decode_message(r.field().ok()?)?)),
            _ => None,
        }
    };
    let a = next()?;
    let b = next()?;
    r.finish().ok()?;
    Some((a, b))
}

/// A paired reply where only one half answered becomes that answer;
/// anything else is left alone.
pub fn collapse(m: &Message) -> Message {
    if let Message::Data(p) = m {
        match unpair_replies(p) {
            Some((Some(x), None)) | Some((None, Some(x))) => return x,
            _ => {}
        }
    }
    m.clone()
}

impl Controller for ParallelCompose {
    fn init(&mut self, coins: &mut dyn Coins) -> Result<()> {
        for i in 0..2 {
            self.run_half(i, coins, |c, k| c.init(k))?;
        }
        Ok(())
    }

    fn activate(&mut self, channel: &ChannelId, message: &Message, coins: &mut dyn Coins) -> Result<Reply> {
        let mut outs = Vec::with_capacity(2);
        for i in 0..2 {
            let r = self.run_half(i, coins, |c, k| c.activate(channel, message, k))?;
            if let Some((ch, m)) = r {
                if &ch != channel {
                    return Err(Error::ModelViolation(format!(
                        "composed half {i} replied on {ch:?} to a query on {channel:?}"
                    )));
                }
                outs.push(Some(m));
            } else {
                outs.push(None);
            }
        }
        if outs.iter().all(Option::is_none) {
            return Ok(None);
        }
        Ok(Some((
            channel.clone(),
            Message::Data(pair_replies(outs[0].as_ref(), outs[1].as_ref())),
        )))
    }

    fn canonical_state(&self) -> Vec<u8> {
        pair(&self.halves[0].canonical_state(), &self.halves[1].canonical_state())
    }

    fn referenced_channels(&self) -> Option<BTreeSet<ChannelId>> {
        let mut a = self.halves[0].referenced_channels()?;
        a.extend(self.halves[1].referenced_channels()?);
        Some(a)
    }

    fn box_clone(&self) -> Box<dyn Controller> {
        Box::new(self.clone())
    }
}

/// Write-only registry that honours deletes except from channels another
/// channel has named in a payload.
#[derive(Debug, Clone, Default)]
pub struct IgnoreDeleteController {
    present: SortedListDict,
    blacklist: SortedListDict,
}

impl IgnoreDeleteController {
    pub fn new() -> Self {
        IgnoreDeleteController::default()
    }

    pub fn contains(&self, channel: &[u8]) -> bool {
        self.present.contains(channel)
    }
}

impl Controller for IgnoreDeleteController {
    fn activate(&mut self, channel: &ChannelId, message: &Message, _coins: &mut dyn Coins) -> Result<Reply> {
        match message {
            Message::Data(p) => {
                self.present.set(channel.as_bytes(), DictValue::Top);
                if !p.is_empty() && p.as_slice() != channel.as_bytes() {
                    self.blacklist.set(p, DictValue::Top);
                }
            }
            Message::Delete => {
                if !self.blacklist.contains(channel.as_bytes()) {
                    self.present.delete(channel.as_bytes());
                }
            }
            _ => {}
        }
        Ok(None)
    }

    fn canonical_state(&self) -> Vec<u8> {
        pair(&self.present.to_bytes(), &self.blacklist.to_bytes())
    }

    /// Blacklisted tokens arrive as payloads, so only stored channels count.
    fn referenced_channels(&self) -> Option<BTreeSet<ChannelId>> {
        Some(self.present.keys().map(ChannelId::new).collect())
    }

    fn box_clone(&self) -> Box<dyn Controller> {
        Box::new(self.clone())
    }
}

/// Write-only registry that tells each new channel a uniform `t ∈ [1, T]`
/// and, when that channel's delete arrives while the registry holds
/// exactly `t` entries, removes it one activation late.
#[derive(Debug, Clone)]
pub struct TimingController {
    horizon: u64,
    bits: u32,
    present: SortedListDict,
    pending: Option<ChannelId>,
}

impl TimingController {
    /// Draws `⌈log₂T⌉` bits and maps them modulo `T`, which is uniform
    /// only when `T` is a power of two.
    pub fn new(horizon: u64) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::Parameter(format!("timing horizon must be at least 2, got {horizon}")));
        }
        let bits = 64 - (horizon - 1).leading_zeros();
        Ok(TimingController {
            horizon,
            bits,
            present: SortedListDict::new(),
            pending: None,
        })
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn contains(&self, channel: &[u8]) -> bool {
        self.present.contains(channel)
    }

    pub fn size(&self) -> usize {
        self.present.len()
    }

    pub fn pending(&self) -> Option<&ChannelId> {
        self.pending.as_ref()
    }

    fn t_of(&self, channel: &[u8]) -> Option<u64> {
        match self.present.get(channel)? {
            DictValue::Bytes(b) => Some(u64::from_be_bytes(b.as_slice().try_into().ok()?)),
            DictValue::Top => None,
        }
    }
}

pub fn decode_t(p: &[u8]) -> Option<u64> {
    Some(u64::from_be_bytes(p.try_into().ok()?))
}

impl Controller for TimingController {
    fn activate(&mut self, channel: &ChannelId, message: &Message, coins: &mut dyn Coins) -> Result<Reply> {
        if let Some(ch) = self.pending.take() {
            self.present.delete(ch.as_bytes());
        }
        match message {
            Message::Delete => {
                if let Some(t) = self.t_of(channel.as_bytes()) {
                    if self.present.len() as u64 == t {
                        self.pending = Some(channel.clone());
                    } else {
                        self.present.delete(channel.as_bytes());
                    }
                }
                Ok(None)
            }
            Message::Data(_) | Message::Tick if !self.present.contains(channel.as_bytes()) => {
                let t = coins.bits(self.bits)? % self.horizon + 1;
                self.present.set(channel.as_bytes(), DictValue::Bytes(t.to_be_bytes().to_vec()));
                Ok(Some((channel.clone(), Message::Data(t.to_be_bytes().to_vec()))))
            }
            _ => Ok(None),
        }
    }

    fn canonical_state(&self) -> Vec<u8> {
        let mut s = self.present.to_bytes();
        match &self.pending {
            None => s.push(0),
            Some(ch) => {
                s.push(1);
                put_field(&mut s, ch.as_bytes());
            }
        }
        s
    }

    fn referenced_channels(&self) -> Option<BTreeSet<ChannelId>> {
        let mut r: BTreeSet<ChannelId> = self.present.keys().map(ChannelId::new).collect();
        r.extend(self.pending.clone());
        Some(r)
    }

    fn box_clone(&self) -> Box<dyn Controller> {
        Box::new(self.clone())
    }
}

/// Messaging server: `Data(pair(to, body))` is pushed to channel `to`.
#[derive(Debug, Clone, Default)]
pub struct PushController {
    delivered: u64,
}

impl Controller for PushController {
    fn activate(&mut self, _channel: &ChannelId, message: &Message, _coins: &mut dyn Coins) -> Result<Reply> {
        let Message::Data(p) = message else {
            return Ok(None);
        };
        let Some((to, body)) = unpair(p) else {
            return Ok(None);
        };
        self.delivered += 1;
        Ok(Some((ChannelId(to), Message::Data(body))))
    }

    fn canonical_state(&self) -> Vec<u8> {
        let mut s = Vec::new();
        put_u64(&mut s, self.delivered);
        s
    }

    fn box_clone(&self) -> Box<dyn Controller> {
        Box::new(self.clone())
    }
}

const TRACE_TAPE_BITS: u64 = 1 << 20;

/// Replies to each query of `trace` under a fresh copy seeded with `seed`.
pub fn trace_replies(c: &dyn Controller, trace: &[Query], seed: u64) -> Result<Vec<Reply>> {
    let mut c = c.box_clone();
    let mut tape = RandomTape::lenient(seed, TRACE_TAPE_BITS);
    c.init(&mut tape)?;
    trace
        .iter()
        .map(|q| c.activate(&q.channel, &q.message, &mut tape))
        .collect()
}

/// True iff every reply on every trace goes back on the query's channel.
pub fn check_query_response(c: &dyn Controller, traces: &[Vec<Query>], seed: u64) -> Result<bool> {
    for trace in traces {
        let replies = trace_replies(c, trace, seed)?;
        for (q, r) in trace.iter().zip(&replies) {
            if let Some((ch, _)) = r {
                if ch != &q.channel {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// True iff every trace gets the same replies under every seed.
pub fn check_deterministic_functionality(c: &dyn Controller, traces: &[Vec<Query>], seeds: &[u64]) -> Result<bool> {
    for trace in traces {
        let mut first: Option<Vec<Reply>> = None;
        for &s in seeds {
            let r = trace_replies(c, trace, s)?;
            match &first {
                None => first = Some(r),
                Some(f) if f != &r => return Ok(false),
                Some(_) => {}
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::{decode_out, BatchController};
    use crate::noise::TruncatedGeometric;
    use proptest::prelude::*;

    fn q(ch: &str, m: Message) -> Query {
        Query {
            channel: ChannelId::new(ch),
            message: m,
        }
    }

    fn run(c: &mut dyn Controller, trace: &[Query], tape: &mut RandomTape) -> Vec<Reply> {
        c.init(tape).unwrap();
        trace
            .iter()
            .map(|x| c.activate(&x.channel, &x.message, tape).unwrap())
            .collect()
    }

    fn payload(r: &Reply) -> Option<Vec<u8>> {
        r.as_ref().map(|(_, m)| m.payload().to_vec())
    }

    #[test]
    fn xor_folds_inputs_into_initial_word() {
        let mut c = XorController::new(8).unwrap();
        let mut tape = RandomTape::new(5, 8);
        let r = run(&mut c, &[q("a", Message::Data(vec![0x0f])), q("b", Message::Data(vec![0xa0]))], &mut tape);
        assert!(r.iter().all(Option::is_none));
        let init = tape.draws()[0].2 as u64;
        assert_eq!(c.word(), init ^ 0x0f ^ 0xa0);

        let mut c = XorController::new(8).unwrap();
        run(&mut c, &[], &mut RandomTape::new(5, 8));
        assert_eq!(c.word(), init);

        let mut c = XorController::new(8).unwrap();
        let x = Message::Data(vec![0x33]);
        run(&mut c, &[q("a", x.clone()), q("a", x)], &mut RandomTape::new(5, 8));
        assert_eq!(c.word(), init);
    }

    #[test]
    fn xor_drops_malformed_words() {
        let mut c = XorController::new(4).unwrap();
        let mut tape = RandomTape::new(1, 4);
        run(
            &mut c,
            &[q("a", Message::Data(vec![0x10])), q("a", Message::Data(vec![1, 2])), q("a", Message::Delete)],
            &mut tape,
        );
        assert_eq!(c.word(), tape.draws()[0].2 as u64);
        assert_eq!(c.canonical_state().len(), 1);
        assert!(XorController::new(0).is_err());
    }

    #[test]
    fn cloud_storage_examples() {
        let mut c = CloudController::new();
        let mut tape = RandomTape::new(0, 0);
        let r = run(
            &mut c,
            &[
                q("a", CloudController::upload(b"f", b"one")),
                q("a", CloudController::upload(b"f", b"two")),
                q("a", CloudController::download(b"f")),
                q("b", CloudController::download(b"f")),
                q("b", CloudController::download(b"g")),
                q("a", Message::Delete),
                q("a", CloudController::download(b"f")),
            ],
            &mut tape,
        );
        assert_eq!(payload(&r[2]), Some(b"one".to_vec()));
        assert_eq!(r[2].as_ref().unwrap().0, ChannelId::new("a"));
        assert_eq!(r[3], None);
        assert_eq!(r[4], None);
        assert_eq!(r[6], None);
        assert_eq!(c.canonical_state(), CloudController::new().canonical_state());
    }

    #[test]
    fn board_examples() {
        let mut c = BoardController::new();
        let mut tape = RandomTape::new(0, 0);
        let r = run(
            &mut c,
            &[
                q("z", BoardController::read()),
                q("a", BoardController::post(b"m1")),
                q("b", BoardController::post(b"m2")),
                q("a", BoardController::post(b"m3")),
                q("z", BoardController::read()),
                q("a", Message::Delete),
                q("z", BoardController::read()),
            ],
            &mut tape,
        );
        assert_eq!(payload(&r[0]), Some(encode_board(&[])));
        let p = |a: &str, m: &str| (a.as_bytes().to_vec(), m.as_bytes().to_vec());
        assert_eq!(payload(&r[4]), Some(encode_board(&[p("a", "m1"), p("b", "m2"), p("a", "m3")])));
        assert_eq!(payload(&r[6]), Some(encode_board(&[p("b", "m2")])));
    }

    fn params() -> CounterParams {
        CounterParams {
            horizon: 2,
            eps: 1.0,
            delta: 0.0,
            bound: 4,
            width: 10,
        }
    }

    #[test]
    fn directory_examples() {
        let mut c = DirectoryController::new(params()).unwrap();
        let mut tape = RandomTape::new(3, 1000);
        let r = run(
            &mut c,
            &[
                q("a", directory::set(b"555")),
                q("b", directory::get(b"a")),
                q("b", directory::get(b"a")),
                q("b", directory::get(b"c")),
                q("a", Message::Delete),
                q("b", Message::Delete),
                q("e", directory::get_count()),
            ],
            &mut tape,
        );
        assert_eq!(payload(&r[1]), Some(b"555".to_vec()));
        assert_eq!(payload(&r[2]), Some(b"555".to_vec()));
        assert_eq!(r[3], None);
        // Three node noises at init, then the release noise.
        let d: Vec<i64> = tape.draws().iter().map(|x| x.2).collect();
        assert_eq!(d.len(), 4);
        let out = decode_out(&payload(&r[6]).unwrap()).unwrap();
        assert_eq!(out, 1 + d[0] + d[2] + d[3]);
    }

    fn random_trace(seed: u64, len: usize) -> Vec<Query> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let users = ["a", "b", "c", "d"];
        (0..len)
            .map(|_| {
                let u = users[rng.gen_range(0..users.len())];
                let m = match rng.gen_range(0..6) {
                    0 => directory::set(&[rng.gen()]),
                    1 | 2 => directory::get(users[rng.gen_range(0..users.len())].as_bytes()),
                    3 => directory::get_count(),
                    4 => Message::Delete,
                    _ => Message::Data(vec![0xff]),
                };
                q(u, m)
            })
            .collect()
    }

    #[test]
    fn composed_directory_matches_monolithic() {
        for seed in 0..100u64 {
            let trace = random_trace(seed, 12);
            let mut mono = DirectoryController::new(params()).unwrap();
            let mut comp = composed_directory(params()).unwrap();
            let mut t1 = RandomTape::new(seed, 1000);
            let mut t2 = RandomTape::new(seed, 1000);
            let a = run(&mut mono, &trace, &mut t1);
            let b: Vec<Reply> = run(&mut comp, &trace, &mut t2)
                .into_iter()
                .map(|r| r.map(|(ch, m)| (ch, collapse(&m))))
                .collect();
            assert_eq!(a, b, "trace {seed}");
            assert_eq!(mono.canonical_state(), comp.canonical_state());
            assert_eq!(t1.draws(), t2.draws());
        }
    }

    #[test]
    fn compose_pairs_outputs_and_states() {
        let mut c = ParallelCompose::new(Box::new(XorController::new(4).unwrap()), Box::new(DictController::new(true)));
        let mut tape = RandomTape::new(2, 100);
        let r = run(&mut c, &[q("a", Op::set("", b"v").to_message()), q("a", Op::get("").to_message())], &mut tape);
        assert_eq!(r[0], None);
        let (x, d) = unpair_replies(&payload(&r[1]).unwrap()).unwrap();
        assert_eq!(x, None);
        assert!(d.is_some());
        // The xor half read region 1.
        assert_eq!(tape.draws()[0].0, 1);
        let (s0, s1) = unpair(&c.canonical_state()).unwrap();
        assert_eq!(s0.len(), 1);
        assert_eq!(s1, c.half(1).canonical_state());

        let mut c = ParallelCompose::new(Box::new(DictController::new(false)), Box::new(DictController::new(false)));
        let r = run(&mut c, &[q("a", Message::Tick)], &mut tape);
        assert_eq!(r[0], None);
        assert_eq!(unpair(&c.canonical_state()).unwrap(), (0u32.to_be_bytes().to_vec(), 0u32.to_be_bytes().to_vec()));
    }

    #[test]
    fn compose_enforces_budgets_and_channels() {
        let mut c = ParallelCompose::new(Box::new(XorController::new(8).unwrap()), Box::new(DictController::new(false)))
            .with_budgets([4, 0]);
        let e = c.init(&mut RandomTape::new(0, 100)).unwrap_err();
        assert_eq!(e, Error::SplitViolation { region: 0, budget: 4 });

        let mut c = ParallelCompose::new(Box::new(PushController::default()), Box::new(DictController::new(false)));
        let mut tape = RandomTape::new(0, 0);
        c.init(&mut tape).unwrap();
        let e = c
            .activate(&ChannelId::new("a"), &Message::Data(pair(b"b", b"hi")), &mut tape)
            .unwrap_err();
        assert!(matches!(e, Error::ModelViolation(_)));
    }

    #[test]
    fn ignore_delete_examples() {
        let y = "y";
        let mut tape = RandomTape::new(0, 0);
        let mut c = IgnoreDeleteController::new();
        run(&mut c, &[q(y, Message::Data(vec![1])), q("e", Message::Data(y.into())), q(y, Message::Delete)], &mut tape);
        assert!(c.contains(y.as_bytes()));

        let mut c = IgnoreDeleteController::new();
        run(&mut c, &[q(y, Message::Data(vec![1])), q(y, Message::Delete)], &mut tape);
        assert!(!c.contains(y.as_bytes()));

        let mut c = IgnoreDeleteController::new();
        run(&mut c, &[q(y, Message::Data(y.into())), q(y, Message::Delete)], &mut tape);
        assert!(!c.contains(y.as_bytes()));
    }

    #[test]
    fn timing_defers_only_at_its_size() {
        // Find a seed whose first draw gives t = 2, then one giving t = 1.
        let seed_for = |want: u64| {
            (0..1000u64)
                .find(|s| RandomTape::new(*s, 64).bits(2).unwrap() % 4 + 1 == want)
                .unwrap()
        };
        let mut c = TimingController::new(4).unwrap();
        let mut tape = RandomTape::new(seed_for(2), 64);
        let r = run(&mut c, &[q("y", Message::Data(vec![])), q("e", Message::Data(vec![]))], &mut tape);
        assert_eq!(decode_t(&payload(&r[0]).unwrap()), Some(2));
        c.activate(&ChannelId::new("y"), &Message::Delete, &mut tape).unwrap();
        assert!(c.contains(b"y"));
        assert_eq!(c.pending(), Some(&ChannelId::new("y")));
        c.activate(&ChannelId::new("e"), &Message::Data(vec![]), &mut tape).unwrap();
        assert!(!c.contains(b"y"));
        assert_eq!(c.pending(), None);

        let mut c = TimingController::new(4).unwrap();
        let mut tape = RandomTape::new(seed_for(1), 64);
        run(&mut c, &[q("y", Message::Data(vec![])), q("e", Message::Data(vec![]))], &mut tape);
        c.activate(&ChannelId::new("y"), &Message::Delete, &mut tape).unwrap();
        assert!(!c.contains(b"y"));
        assert_eq!(c.pending(), None);
    }

    #[test]
    fn timing_draw_width_and_range() {
        assert_eq!(TimingController::new(128).unwrap().bits, 7);
        assert_eq!(TimingController::new(100).unwrap().bits, 7);
        assert_eq!(TimingController::new(2).unwrap().bits, 1);
        assert!(TimingController::new(1).is_err());
    }

    #[test]
    fn query_response_and_determinism() {
        let traces = vec![
            vec![q("a", Op::insert("").to_message()), q("a", Op::get("").to_message()), q("b", Message::Delete)],
            vec![q("a", Message::Data(vec![3])), q("b", Message::Tick), q("a", Message::Data(pair(b"b", b"x")))],
        ];
        let seeds = [0, 1, 2, 3];
        let dict = DictController::new(true);
        assert!(check_query_response(&dict, &traces, 0).unwrap());
        assert!(check_deterministic_functionality(&dict, &traces, &seeds).unwrap());
        assert!(!check_query_response(&PushController::default(), &traces, 0).unwrap());
        let xor = XorController::new(8).unwrap();
        assert!(check_query_response(&xor, &traces, 0).unwrap());
        assert!(check_deterministic_functionality(&xor, &traces, &seeds).unwrap());
        let batch = BatchController::noisy_count(TruncatedGeometric::new(1.0, 8, 12).unwrap());
        assert!(check_query_response(&batch, &traces, 0).unwrap());
        assert!(!check_deterministic_functionality(&batch, &traces, &seeds).unwrap());
    }

    proptest! {
        #[test]
        fn collapse_inverts_one_sided_pairs(p in proptest::collection::vec(any::<u8>(), 0..8)) {
            let m = Message::Data(p);
            prop_assert_eq!(collapse(&Message::Data(pair_replies(Some(&m), None))), m.clone());
            prop_assert_eq!(collapse(&Message::Data(pair_replies(None, Some(&m)))), m.clone());
            let both = Message::Data(pair_replies(Some(&m), Some(&Message::Delete)));
            prop_assert_eq!(collapse(&both), both.clone());
        }
    }
}
