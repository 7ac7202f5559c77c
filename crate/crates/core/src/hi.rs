//! Abstract data types, the sorted-list dictionary, logical deletion and
//! the adaptive history independence game.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Debug;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{put_field, Reader};
use crate::dist::{check_indisting, estimate_from_samples, AuditMode, AuditOptions, ClosenessReport, FinitePmf};
use crate::enumerate::enumerate_paths;
use crate::error::{Error, Result};
use crate::exec::{ChannelId, Message};
use crate::tape::{derive_seed, Coins, PartyTapes, RandomTape, Recorder, Recording, Replayer, Stream, TapeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Insert,
    Set,
    Get,
    Delete,
    Tick,
    Upload,
    Download,
    Post,
    Read,
    GetCount,
    Feed,
}

impl OpKind {
    fn tag(self) -> Option<u8> {
        Some(match self {
            OpKind::Insert => 1,
            OpKind::Set => 2,
            OpKind::Get => 3,
            OpKind::Upload => 4,
            OpKind::Download => 5,
            OpKind::Post => 6,
            OpKind::Read => 7,
            OpKind::GetCount => 8,
            OpKind::Feed => 9,
            OpKind::Delete | OpKind::Tick => return None,
        })
    }

    fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            1 => OpKind::Insert,
            2 => OpKind::Set,
            3 => OpKind::Get,
            4 => OpKind::Upload,
            5 => OpKind::Download,
            6 => OpKind::Post,
            7 => OpKind::Read,
            8 => OpKind::GetCount,
            9 => OpKind::Feed,
            _ => return None,
        })
    }
}

/// One operation tagged by an id. `value` is `None` for operations without
/// an argument, and for `set(id, ⊤)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Op {
    pub op: OpKind,
    pub id: Vec<u8>,
    pub value: Option<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct OpRecord {
    op: OpKind,
    id: String,
    value_hex: Option<String>,
}

impl Serialize for Op {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        OpRecord {
            op: self.op,
            id: hex::encode(&self.id),
            value_hex: self.value.as_ref().map(hex::encode),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Op {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = OpRecord::deserialize(d)?;
        let id = hex::decode(&r.id).map_err(serde::de::Error::custom)?;
        let value = match r.value_hex {
            Some(v) => Some(hex::decode(v).map_err(serde::de::Error::custom)?),
            None => None,
        };
        Ok(Op { op: r.op, id, value })
    }
}

impl Op {
    pub fn new(op: OpKind, id: impl AsRef<[u8]>, value: Option<&[u8]>) -> Self {
        Op {
            op,
            id: id.as_ref().to_vec(),
            value: value.map(<[u8]>::to_vec),
        }
    }

    pub fn insert(id: impl AsRef<[u8]>) -> Self {
        Op::new(OpKind::Insert, id, None)
    }

    pub fn set(id: impl AsRef<[u8]>, value: impl AsRef<[u8]>) -> Self {
        Op::new(OpKind::Set, id, Some(value.as_ref()))
    }

    /// `set(id, ⊤)`.
    pub fn set_top(id: impl AsRef<[u8]>) -> Self {
        Op::new(OpKind::Set, id, None)
    }

    pub fn get(id: impl AsRef<[u8]>) -> Self {
        Op::new(OpKind::Get, id, None)
    }

    pub fn delete(id: impl AsRef<[u8]>) -> Self {
        Op::new(OpKind::Delete, id, None)
    }

    pub fn tick() -> Self {
        Op::new(OpKind::Tick, [], None)
    }

    /// The message carrying this operation on its owner's channel.
    pub fn to_message(&self) -> Message {
        match self.op.tag() {
            None if self.op == OpKind::Delete => Message::Delete,
            None => Message::Tick,
            Some(tag) => {
                let mut p = vec![tag];
                if let Some(v) = &self.value {
                    put_field(&mut p, v);
                }
                Message::Data(p)
            }
        }
    }

    /// Decodes a message received on `channel`; the channel becomes the id.
    /// `None` for payloads that are not operations.
    pub fn from_message(channel: &ChannelId, message: &Message) -> Option<Op> {
        let id = channel.as_bytes().to_vec();
        match message {
            Message::Delete => Some(Op {
                op: OpKind::Delete,
                id,
                value: None,
            }),
            Message::Tick => Some(Op {
                op: OpKind::Tick,
                id,
                value: None,
            }),
            Message::Fail => None,
            Message::Data(p) => {
                let (&tag, rest) = p.split_first()?;
                let op = OpKind::from_tag(tag)?;
                let mut r = Reader::new(rest);
                let value = if r.is_empty() {
                    None
                } else {
                    Some(r.field().ok()?.to_vec())
                };
                r.finish().ok()?;
                Some(Op { op, id, value })
            }
        }
    }
}

/// Pair encoding for two-part arguments such as `(name, file)`.
pub fn pair(a: &[u8], b: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    put_field(&mut out, a);
    put_field(&mut out, b);
    out
}

pub fn unpair(v: &[u8]) -> Option<(Vec<u8>, Vec<u8>)> {
    let mut r = Reader::new(v);
    let a = r.field().ok()?.to_vec();
    let b = r.field().ok()?.to_vec();
    r.finish().ok()?;
    Some((a, b))
}

/// A dictionary value: bytes or the default `⊤` stored by `insert`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DictValue {
    Top,
    Bytes(Vec<u8>),
}

impl DictValue {
    pub fn from_arg(v: &Option<Vec<u8>>) -> Self {
        match v {
            Some(b) => DictValue::Bytes(b.clone()),
            None => DictValue::Top,
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            DictValue::Top => out.push(0),
            DictValue::Bytes(b) => {
                out.push(1);
                put_field(out, b);
            }
        }
    }

    pub fn to_arg(&self) -> Option<Vec<u8>> {
        match self {
            DictValue::Top => None,
            DictValue::Bytes(b) => Some(b.clone()),
        }
    }
}

/// An abstract data type with deterministic transitions.
pub trait Adt: Send + Sync {
    type State: Clone + Ord + Debug + Send + Sync;

    fn initial(&self) -> Self::State;

    /// Logical transition and logical output.
    fn apply(&self, state: &Self::State, op: &Op) -> (Self::State, Option<Vec<u8>>);

    /// Operations explored by [`check_reversibility`].
    fn universe(&self) -> Vec<Op> {
        Vec::new()
    }

    /// A canonical sequence reaching `state`, if the state is map-shaped.
    fn canonical_ops(&self, _state: &Self::State) -> Option<Vec<Op>> {
        None
    }
}

/// Final logical state of `seq`.
pub fn logical_state<A: Adt>(adt: &A, seq: &[Op]) -> A::State {
    seq.iter().fold(adt.initial(), |s, op| adt.apply(&s, op).0)
}

pub fn logically_equivalent<A: Adt>(adt: &A, a: &[Op], b: &[Op]) -> bool {
    logical_state(adt, a) == logical_state(adt, b)
}

/// Last writer wins per key, then keys in byte order.
pub fn canonicalize<A: Adt>(adt: &A, seq: &[Op]) -> Result<Vec<Op>> {
    adt.canonical_ops(&logical_state(adt, seq))
        .ok_or_else(|| Error::Unsupported("canonicalization needs a map-shaped logical state".into()))
}

/// Whether appending `delete(id_star)` equals dropping every `id_star` op.
pub fn check_logical_deletion<A: Adt>(adt: &A, seq: &[Op], id_star: &[u8]) -> bool {
    let mut with_delete = seq.to_vec();
    with_delete.push(Op::delete(id_star));
    let without: Vec<Op> = seq.iter().filter(|o| o.id != id_star).cloned().collect();
    logically_equivalent(adt, &with_delete, &without)
}

/// Whether every logical state entered by a state-changing operation can
/// reach every other, exploring the ADT's operation universe.
pub fn check_reversibility<A: Adt>(adt: &A, bound: usize) -> Result<bool> {
    let ops = adt.universe();
    let init = adt.initial();
    let mut index: BTreeMap<A::State, usize> = BTreeMap::new();
    let mut states = vec![init.clone()];
    index.insert(init, 0);
    let mut fwd: Vec<Vec<usize>> = vec![Vec::new()];
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        for op in &ops {
            let (next, _) = adt.apply(&states[i], op);
            let j = match index.get(&next) {
                Some(&j) => j,
                None => {
                    if states.len() >= bound {
                        return Err(Error::StateBound { bound });
                    }
                    states.push(next.clone());
                    fwd.push(Vec::new());
                    index.insert(next, states.len() - 1);
                    queue.push_back(states.len() - 1);
                    states.len() - 1
                }
            };
            fwd[i].push(j);
        }
    }
    // The initial state only counts if some state-changing operation leads
    // back to it.
    let reached: BTreeSet<usize> = fwd
        .iter()
        .enumerate()
        .flat_map(|(a, outs)| outs.iter().copied().filter(move |&b| b != a))
        .collect();
    let Some(&root) = reached.iter().next() else {
        return Ok(true);
    };
    let mut back: Vec<Vec<usize>> = vec![Vec::new(); states.len()];
    for (a, outs) in fwd.iter().enumerate() {
        for &b in outs {
            back[b].push(a);
        }
    }
    let closure = |adj: &Vec<Vec<usize>>| {
        let mut seen = vec![false; states.len()];
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(a) = queue.pop_front() {
            for &b in &adj[a] {
                if !seen[b] {
                    seen[b] = true;
                    queue.push_back(b);
                }
            }
        }
        seen
    };
    let (f, b) = (closure(&fwd), closure(&back));
    Ok(reached.iter().all(|&s| f[s] && b[s]))
}

fn dict_universe(keys: &[Vec<u8>], values: &[Vec<u8>]) -> Vec<Op> {
    let mut ops = Vec::new();
    for k in keys {
        ops.push(Op::insert(k));
        ops.push(Op::delete(k));
        for v in values {
            ops.push(Op::set(k, v));
        }
    }
    ops
}

/// Key-value store: `insert(id) ≡ set(id, ⊤)`, `delete` removes the key.
#[derive(Debug, Clone, Default)]
pub struct DictionaryAdt {
    pub keys: Vec<Vec<u8>>,
    pub values: Vec<Vec<u8>>,
}

impl DictionaryAdt {
    pub fn over(keys: Vec<Vec<u8>>, values: Vec<Vec<u8>>) -> Self {
        DictionaryAdt { keys, values }
    }
}

pub type DictState = BTreeMap<Vec<u8>, DictValue>;

fn dict_apply(state: &DictState, op: &Op) -> (DictState, Option<Vec<u8>>) {
    let mut s = state.clone();
    let out = match op.op {
        OpKind::Insert => {
            s.insert(op.id.clone(), DictValue::Top);
            None
        }
        OpKind::Set => {
            s.insert(op.id.clone(), DictValue::from_arg(&op.value));
            None
        }
        OpKind::Delete => {
            s.remove(&op.id);
            None
        }
        OpKind::Get => s.get(&op.id).map(|v| {
            let mut out = Vec::new();
            v.encode(&mut out);
            out
        }),
        _ => None,
    };
    (s, out)
}

fn dict_canonical(state: &DictState) -> Vec<Op> {
    state
        .iter()
        .map(|(k, v)| Op::new(OpKind::Set, k, v.to_arg().as_deref()))
        .collect()
}

impl Adt for DictionaryAdt {
    type State = DictState;

    fn initial(&self) -> DictState {
        BTreeMap::new()
    }

    fn apply(&self, state: &DictState, op: &Op) -> (DictState, Option<Vec<u8>>) {
        dict_apply(state, op)
    }

    fn universe(&self) -> Vec<Op> {
        dict_universe(&self.keys, &self.values)
    }

    fn canonical_ops(&self, state: &DictState) -> Option<Vec<Op>> {
        Some(dict_canonical(state))
    }
}

/// Remembers the most recent non-delete id; `delete` is a no-op.
#[derive(Debug, Clone, Default)]
pub struct LastIdAdt {
    pub ids: Vec<Vec<u8>>,
}

impl Adt for LastIdAdt {
    type State = Option<Vec<u8>>;

    fn initial(&self) -> Self::State {
        None
    }

    fn apply(&self, state: &Self::State, op: &Op) -> (Self::State, Option<Vec<u8>>) {
        match op.op {
            OpKind::Delete => (state.clone(), None),
            _ => (Some(op.id.clone()), None),
        }
    }

    fn universe(&self) -> Vec<Op> {
        self.ids
            .iter()
            .flat_map(|i| [Op::insert(i), Op::delete(i)])
            .collect()
    }
}

/// Bounded append-only log; `delete` is ignored.
#[derive(Debug, Clone)]
pub struct AppendLogAdt {
    pub ids: Vec<Vec<u8>>,
    pub capacity: usize,
}

impl Adt for AppendLogAdt {
    type State = Vec<Vec<u8>>;

    fn initial(&self) -> Self::State {
        Vec::new()
    }

    fn apply(&self, state: &Self::State, op: &Op) -> (Self::State, Option<Vec<u8>>) {
        let mut s = state.clone();
        if op.op != OpKind::Delete && s.len() < self.capacity {
            s.push(op.id.clone());
        }
        (s, None)
    }

    fn universe(&self) -> Vec<Op> {
        self.ids
            .iter()
            .flat_map(|i| [Op::insert(i), Op::delete(i)])
            .collect()
    }
}

/// Dictionary plus a one-way tick flag. Dictionary operations keep their
/// meaning after the tick, and the tick commutes with them.
#[derive(Debug, Clone, Default)]
pub struct BatchAdt {
    pub keys: Vec<Vec<u8>>,
}

impl Adt for BatchAdt {
    type State = (DictState, bool);

    fn initial(&self) -> Self::State {
        (BTreeMap::new(), false)
    }

    fn apply(&self, state: &Self::State, op: &Op) -> (Self::State, Option<Vec<u8>>) {
        if op.op == OpKind::Tick {
            return ((state.0.clone(), true), None);
        }
        let (m, out) = dict_apply(&state.0, op);
        ((m, state.1), out)
    }

    fn universe(&self) -> Vec<Op> {
        let mut ops = dict_universe(&self.keys, &[]);
        ops.push(Op::tick());
        ops
    }

    fn canonical_ops(&self, state: &Self::State) -> Option<Vec<Op>> {
        let mut ops = Vec::new();
        if state.1 {
            ops.push(Op::tick());
        }
        ops.extend(dict_canonical(&state.0));
        Some(ops)
    }
}

/// Per-owner file stores: `upload(id, (name, file))` keeps the first file
/// under a name, `download(id, name)` reads the owner's file, `delete(id)`
/// drops the owner's store.
#[derive(Debug, Clone, Default)]
pub struct CloudAdt;

impl Adt for CloudAdt {
    type State = BTreeMap<(Vec<u8>, Vec<u8>), Vec<u8>>;

    fn initial(&self) -> Self::State {
        BTreeMap::new()
    }

    fn apply(&self, state: &Self::State, op: &Op) -> (Self::State, Option<Vec<u8>>) {
        let mut s = state.clone();
        let out = match op.op {
            OpKind::Upload => {
                if let Some((name, file)) = op.value.as_deref().and_then(unpair) {
                    s.entry((op.id.clone(), name)).or_insert(file);
                }
                None
            }
            OpKind::Download => op
                .value
                .as_ref()
                .and_then(|name| s.get(&(op.id.clone(), name.clone())).cloned()),
            OpKind::Delete => {
                s.retain(|(owner, _), _| owner != &op.id);
                None
            }
            _ => None,
        };
        (s, out)
    }

    fn canonical_ops(&self, state: &Self::State) -> Option<Vec<Op>> {
        Some(
            state
                .iter()
                .map(|((owner, name), file)| Op::new(OpKind::Upload, owner, Some(&pair(name, file))))
                .collect(),
        )
    }
}

/// Ordered list of `(id, message)` posts; `delete(id)` removes all of the
/// id's posts and keeps the order of the rest.
#[derive(Debug, Clone, Default)]
pub struct BoardAdt;

/// Encodes a board listing.
pub fn encode_board(posts: &[(Vec<u8>, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(posts.len() as u32).to_be_bytes());
    for (id, m) in posts {
        put_field(&mut out, id);
        put_field(&mut out, m);
    }
    out
}

impl Adt for BoardAdt {
    type State = Vec<(Vec<u8>, Vec<u8>)>;

    fn initial(&self) -> Self::State {
        Vec::new()
    }

    fn apply(&self, state: &Self::State, op: &Op) -> (Self::State, Option<Vec<u8>>) {
        let mut s = state.clone();
        let out = match op.op {
            OpKind::Post => {
                s.push((op.id.clone(), op.value.clone().unwrap_or_default()));
                None
            }
            OpKind::Read => Some(encode_board(&s)),
            OpKind::Delete => {
                s.retain(|(id, _)| id != &op.id);
                None
            }
            _ => None,
        };
        (s, out)
    }
}

/// A randomized implementation of an ADT.
pub trait Implementation: Send + Sync {
    /// Runs once before the first operation; may produce an output.
    fn init(&mut self, _coins: &mut dyn Coins) -> Result<Option<Vec<u8>>> {
        Ok(None)
    }

    fn apply(&mut self, op: &Op, coins: &mut dyn Coins) -> Result<Option<Vec<u8>>>;

    /// Canonical bytes of the physical state.
    fn physical_state(&self) -> Vec<u8>;

    fn box_clone(&self) -> Box<dyn Implementation>;
}

impl Clone for Box<dyn Implementation> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Dictionary stored as entries sorted by key bytes. Uses no randomness.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SortedListDict {
    entries: Vec<(Vec<u8>, DictValue)>,
}

impl SortedListDict {
    pub fn new() -> Self {
        SortedListDict::default()
    }

    fn find(&self, key: &[u8]) -> std::result::Result<usize, usize> {
        self.entries.binary_search_by(|(k, _)| k.as_slice().cmp(key))
    }

    pub fn set(&mut self, key: &[u8], value: DictValue) {
        match self.find(key) {
            Ok(i) => self.entries[i].1 = value,
            Err(i) => self.entries.insert(i, (key.to_vec(), value)),
        }
    }

    pub fn get(&self, key: &[u8]) -> Option<&DictValue> {
        self.find(key).ok().map(|i| &self.entries[i].1)
    }

    pub fn contains(&self, key: &[u8]) -> bool {
        self.find(key).is_ok()
    }

    pub fn delete(&mut self, key: &[u8]) {
        if let Ok(i) = self.find(key) {
            self.entries.remove(i);
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &Vec<u8>> {
        self.entries.iter().map(|(k, _)| k)
    }

    pub fn entries(&self) -> &[(Vec<u8>, DictValue)] {
        &self.entries
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for (k, v) in &self.entries {
            put_field(out, k);
            v.encode(out);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out);
        out
    }

    /// Dictionary semantics of `op`; other operation kinds are ignored.
    pub fn apply_op(&mut self, op: &Op) -> Option<Vec<u8>> {
        match op.op {
            OpKind::Insert => self.set(&op.id, DictValue::Top),
            OpKind::Set => self.set(&op.id, DictValue::from_arg(&op.value)),
            OpKind::Delete => self.delete(&op.id),
            OpKind::Get => {
                return self.get(&op.id).map(|v| {
                    let mut out = Vec::new();
                    v.encode(&mut out);
                    out
                })
            }
            _ => {}
        }
        None
    }
}

impl Implementation for SortedListDict {
    fn apply(&mut self, op: &Op, _coins: &mut dyn Coins) -> Result<Option<Vec<u8>>> {
        Ok(self.apply_op(op))
    }

    fn physical_state(&self) -> Vec<u8> {
        self.to_bytes()
    }

    fn box_clone(&self) -> Box<dyn Implementation> {
        Box::new(self.clone())
    }
}

/// Outputs `n` tape bits `r` at initialization. If the first operation is
/// `insert(r)` it records every operation in its state; otherwise its state
/// stays `r`.
#[derive(Debug, Clone)]
pub struct LeakyImpl {
    n: u32,
    r: Vec<u8>,
    first: bool,
    recording: Option<Vec<Op>>,
}

impl LeakyImpl {
    pub fn new(n: u32) -> Result<Self> {
        if n == 0 || n > 63 {
            return Err(Error::Parameter(format!("leak width must be in 1..=63, got {n}")));
        }
        Ok(LeakyImpl {
            n,
            r: Vec::new(),
            first: true,
            recording: None,
        })
    }

    fn token(n: u32, r: u64) -> Vec<u8> {
        let bytes = n.div_ceil(8) as usize;
        r.to_be_bytes()[8 - bytes..].to_vec()
    }
}

impl Implementation for LeakyImpl {
    fn init(&mut self, coins: &mut dyn Coins) -> Result<Option<Vec<u8>>> {
        let r = coins.bits(self.n)?;
        self.r = Self::token(self.n, r);
        Ok(Some(self.r.clone()))
    }

    fn apply(&mut self, op: &Op, _coins: &mut dyn Coins) -> Result<Option<Vec<u8>>> {
        if self.first {
            self.first = false;
            if op.op == OpKind::Insert && op.id == self.r {
                self.recording = Some(Vec::new());
            }
        }
        if let Some(rec) = &mut self.recording {
            rec.push(op.clone());
        }
        Ok(None)
    }

    fn physical_state(&self) -> Vec<u8> {
        match &self.recording {
            None => {
                let mut out = vec![0];
                put_field(&mut out, &self.r);
                out
            }
            Some(ops) => {
                let mut out = vec![1];
                out.extend(serde_json::to_vec(ops).expect("ops serialize"));
                out
            }
        }
    }

    fn box_clone(&self) -> Box<dyn Implementation> {
        Box::new(self.clone())
    }
}

/// Final state and outputs of running an implementation on a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Applied {
    pub state: Vec<u8>,
    pub init_output: Option<Vec<u8>>,
    pub outputs: Vec<Option<Vec<u8>>>,
}

/// Left fold of `impl_` over `seq` from a fresh copy.
pub fn apply_sequence(impl_: &dyn Implementation, seq: &[Op], coins: &mut dyn Coins) -> Result<Applied> {
    let mut m = impl_.box_clone();
    let init_output = m.init(coins)?;
    let outputs = seq.iter().map(|op| m.apply(op, coins)).collect::<Result<Vec<_>>>()?;
    Ok(Applied {
        state: m.physical_state(),
        init_output,
        outputs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AhiVariant {
    /// The replay reuses the real tape.
    Identical,
    /// The replay draws an independent tape.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AhiGameRecord {
    pub seq: Vec<Op>,
    pub seq_star: Vec<Op>,
    #[serde(with = "opt_hex")]
    pub init_output: Option<Vec<u8>>,
    #[serde(with = "vec_opt_hex")]
    pub outputs: Vec<Option<Vec<u8>>>,
    #[serde(with = "hex_bytes")]
    pub s_p: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub s_p_star: Vec<u8>,
    pub variant: AhiVariant,
    /// `seq_star` was not equivalent and the replayed state was overwritten.
    pub forced: bool,
}

impl AhiGameRecord {
    /// Byte encoding of the adversary's view `(σ, σ*, outputs)`.
    pub fn view_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_field(&mut out, &serde_json::to_vec(&self.seq).expect("ops serialize"));
        put_field(&mut out, &serde_json::to_vec(&self.seq_star).expect("ops serialize"));
        let outs: Vec<&Option<Vec<u8>>> = std::iter::once(&self.init_output).chain(&self.outputs).collect();
        for o in outs {
            match o {
                None => out.push(0),
                Some(b) => {
                    out.push(1);
                    put_field(&mut out, b);
                }
            }
        }
        out
    }

    /// `(view, s_P)` and `(view, s_P*)`.
    pub fn joint(&self) -> (Vec<u8>, Vec<u8>) {
        let v = self.view_bytes();
        let mut real = Vec::new();
        put_field(&mut real, &v);
        let mut star = real.clone();
        put_field(&mut real, &self.s_p);
        put_field(&mut star, &self.s_p_star);
        (real, star)
    }
}

pub(crate) mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

pub(crate) mod opt_hex {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().map(hex::encode).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| hex::decode(s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

pub(crate) mod vec_opt_hex {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Option<Vec<u8>>], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|o| o.as_ref().map(hex::encode))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<Vec<u8>>>, D::Error> {
        Vec::<Option<String>>::deserialize(d)?
            .into_iter()
            .map(|o| o.map(|s| hex::decode(s).map_err(serde::de::Error::custom)).transpose())
            .collect()
    }
}

/// Canonical-form function handed to adversaries.
pub type Canon = Arc<dyn Fn(&[Op]) -> Result<Vec<Op>> + Send + Sync>;

pub fn canon_of<A: Adt + Clone + 'static>(adt: &A) -> Canon {
    let adt = adt.clone();
    Arc::new(move |seq: &[Op]| canonicalize(&adt, seq))
}

/// How an adversary picks its equivalent sequence.
#[derive(Clone)]
pub enum StarRule {
    Canonical(Canon),
    /// Stable sort by id: keeps each id's operations in order.
    GroupById,
    Verbatim,
    Fixed(Vec<Op>),
}

impl StarRule {
    fn apply(&self, seq: &[Op]) -> Result<Vec<Op>> {
        match self {
            StarRule::Canonical(c) => c(seq),
            StarRule::GroupById => {
                let mut s = seq.to_vec();
                s.sort_by(|a, b| a.id.cmp(&b.id));
                Ok(s)
            }
            StarRule::Verbatim => Ok(seq.to_vec()),
            StarRule::Fixed(s) => Ok(s.clone()),
        }
    }
}

/// An adaptive adversary in the history independence game.
pub trait AhiAdversary: Send + Sync {
    fn name(&self) -> String;

    /// Next operation, or `None` to stop.
    fn next(
        &mut self,
        init_output: Option<&[u8]>,
        history: &[(Op, Option<Vec<u8>>)],
        coins: &mut dyn Coins,
    ) -> Result<Option<Op>>;

    /// The sequence to replay.
    fn equivalent(&mut self, seq: &[Op], coins: &mut dyn Coins) -> Result<Vec<Op>>;

    fn box_clone(&self) -> Box<dyn AhiAdversary>;
}

impl Clone for Box<dyn AhiAdversary> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Inserts the implementation's initial output as an id, deletes it, and
/// replays the canonical form.
#[derive(Clone)]
pub struct EchoAdversary {
    pub star: StarRule,
}

impl AhiAdversary for EchoAdversary {
    fn name(&self) -> String {
        "echo".into()
    }

    fn next(
        &mut self,
        init_output: Option<&[u8]>,
        history: &[(Op, Option<Vec<u8>>)],
        _coins: &mut dyn Coins,
    ) -> Result<Option<Op>> {
        let token = init_output.unwrap_or(b"echo").to_vec();
        Ok(match history.len() {
            0 => Some(Op::insert(&token)),
            1 => Some(Op::delete(&token)),
            _ => None,
        })
    }

    fn equivalent(&mut self, seq: &[Op], _coins: &mut dyn Coins) -> Result<Vec<Op>> {
        self.star.apply(seq)
    }

    fn box_clone(&self) -> Box<dyn AhiAdversary> {
        Box::new(self.clone())
    }
}

/// Issues `len` random dictionary operations over small key and value sets.
#[derive(Clone)]
pub struct RandomAdversary {
    pub keys: Vec<Vec<u8>>,
    pub values: Vec<Vec<u8>>,
    pub len: usize,
    pub star: StarRule,
}

fn draw_index(coins: &mut dyn Coins, n: usize) -> Result<usize> {
    // Power-of-two sizes keep the draw uniform without rejection.
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return Ok(0);
    }
    Ok(coins.bits(n.trailing_zeros())? as usize)
}

impl AhiAdversary for RandomAdversary {
    fn name(&self) -> String {
        "random".into()
    }

    fn next(
        &mut self,
        _init_output: Option<&[u8]>,
        history: &[(Op, Option<Vec<u8>>)],
        coins: &mut dyn Coins,
    ) -> Result<Option<Op>> {
        if history.len() >= self.len {
            return Ok(None);
        }
        let key = &self.keys[draw_index(coins, self.keys.len())?];
        Ok(Some(match coins.bits(2)? {
            0 => Op::insert(key),
            1 => Op::set(key, &self.values[draw_index(coins, self.values.len())?]),
            2 => Op::get(key),
            _ => Op::delete(key),
        }))
    }

    fn equivalent(&mut self, seq: &[Op], _coins: &mut dyn Coins) -> Result<Vec<Op>> {
        self.star.apply(seq)
    }

    fn box_clone(&self) -> Box<dyn AhiAdversary> {
        Box::new(self.clone())
    }
}

/// Plays a fixed script.
#[derive(Clone)]
pub struct ScriptedAdversary {
    pub label: String,
    pub ops: Vec<Op>,
    pub star: StarRule,
}

impl AhiAdversary for ScriptedAdversary {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn next(
        &mut self,
        _init_output: Option<&[u8]>,
        history: &[(Op, Option<Vec<u8>>)],
        _coins: &mut dyn Coins,
    ) -> Result<Option<Op>> {
        Ok(self.ops.get(history.len()).cloned())
    }

    fn equivalent(&mut self, seq: &[Op], _coins: &mut dyn Coins) -> Result<Vec<Op>> {
        self.star.apply(seq)
    }

    fn box_clone(&self) -> Box<dyn AhiAdversary> {
        Box::new(self.clone())
    }
}

/// Runs one history independence game. The real run reads the controller
/// stream; a fresh replay reads the aux stream; the adversary reads the
/// environment stream.
pub fn run_ahi_game<A: Adt>(
    impl_: &dyn Implementation,
    adt: &A,
    adversary: &dyn AhiAdversary,
    variant: AhiVariant,
    tapes: &mut dyn TapeSet,
    max_ops: usize,
) -> Result<AhiGameRecord> {
    let mut adv = adversary.box_clone();
    let mut real = impl_.box_clone();
    let mut rec = Recording::default();
    let init_output = real.init(&mut Recorder {
        inner: tapes.coins(Stream::Controller),
        recording: &mut rec,
    })?;
    let mut history: Vec<(Op, Option<Vec<u8>>)> = Vec::new();
    loop {
        let next = adv.next(init_output.as_deref(), &history, tapes.coins(Stream::Environment))?;
        let Some(op) = next else { break };
        if history.len() >= max_ops {
            return Err(Error::InvalidAdversary(format!(
                "{} did not stop within {max_ops} operations",
                adv.name()
            )));
        }
        let out = real.apply(
            &op,
            &mut Recorder {
                inner: tapes.coins(Stream::Controller),
                recording: &mut rec,
            },
        )?;
        history.push((op, out));
    }
    let s_p = real.physical_state();
    let (seq, outputs): (Vec<Op>, Vec<Option<Vec<u8>>>) = history.into_iter().unzip();
    let seq_star = adv.equivalent(&seq, tapes.coins(Stream::Environment))?;
    let mut replay = impl_.box_clone();
    match variant {
        AhiVariant::Identical => {
            let mut cursor = BTreeMap::new();
            let mut coins = Replayer {
                inner: tapes.coins(Stream::Controller),
                recording: &rec,
                cursor: &mut cursor,
            };
            replay.init(&mut coins)?;
            for op in &seq_star {
                replay.apply(op, &mut coins)?;
            }
        }
        AhiVariant::Fresh => {
            let coins = tapes.coins(Stream::Aux);
            replay.init(coins)?;
            for op in &seq_star {
                replay.apply(op, coins)?;
            }
        }
    }
    let forced = !logically_equivalent(adt, &seq, &seq_star);
    let s_p_star = if forced { s_p.clone() } else { replay.physical_state() };
    Ok(AhiGameRecord {
        seq,
        seq_star,
        init_output,
        outputs,
        s_p,
        s_p_star,
        variant,
        forced,
    })
}

/// Exact law of the game's joint outcomes: `(real, star)` pmfs.
pub fn ahi_joint_laws<A: Adt>(
    impl_: &dyn Implementation,
    adt: &A,
    adversary: &dyn AhiAdversary,
    variant: AhiVariant,
    max_ops: usize,
    cap: usize,
) -> Result<(FinitePmf, FinitePmf)> {
    let leaves = enumerate_paths(|pc| run_ahi_game(impl_, adt, adversary, variant, pc, max_ops), cap)?;
    let mut real = Vec::with_capacity(leaves.len());
    let mut star = Vec::with_capacity(leaves.len());
    for l in leaves {
        let (a, b) = l.value.joint();
        real.push((a, l.mass));
        star.push((b, l.mass));
    }
    Ok((FinitePmf::from_weights(real)?, FinitePmf::from_weights(star)?))
}

/// Seeded tapes for sampled trial `i`.
pub fn trial_tapes(seed: u64, i: u64) -> PartyTapes {
    let base = derive_seed(seed, i);
    let mut t = PartyTapes::new(
        RandomTape::lenient(derive_seed(base, 0), u64::MAX),
        RandomTape::lenient(derive_seed(base, 1), u64::MAX),
        RandomTape::lenient(derive_seed(base, 2), u64::MAX),
    );
    t.aux = RandomTape::lenient(derive_seed(base, 3), u64::MAX);
    t
}

/// Checks `(V, s_P) ≈ (V, s_P*)` for one adversary.
pub fn audit_ahi<A: Adt>(
    impl_: &dyn Implementation,
    adt: &A,
    adversary: &dyn AhiAdversary,
    variant: AhiVariant,
    eps: f64,
    delta: f64,
    opts: &AuditOptions,
) -> Result<ClosenessReport> {
    match opts.mode {
        AuditMode::Exact => {
            let (p, q) = ahi_joint_laws(impl_, adt, adversary, variant, opts.max_steps as usize, opts.enumeration_cap)?;
            Ok(check_indisting(&p, &q, eps, delta))
        }
        AuditMode::Sampled { trials, confidence } => {
            let runs = (0..trials)
                .into_par_iter()
                .map(|i| {
                    let mut tapes = trial_tapes(opts.seed, i);
                    run_ahi_game(impl_, adt, adversary, variant, &mut tapes, opts.max_steps as usize)
                        .map(|r| r.joint())
                })
                .collect::<Result<Vec<_>>>()?;
            let (ps, qs): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
            estimate_from_samples(&ps, &qs, eps, delta, confidence, derive_seed(opts.seed, u64::MAX))
        }
    }
}

/// Ids used by the shipped adversaries.
pub fn key_universe(n: usize) -> Vec<Vec<u8>> {
    (0..n).map(|i| vec![b'k', i as u8]).collect()
}

/// Whether every pair of sequences in `seqs` with the same logical state has
/// the same physical state.
pub fn canonical_representation<A: Adt>(
    adt: &A,
    impl_: &dyn Implementation,
    seqs: &[Vec<Op>],
    coins: &mut dyn Coins,
) -> Result<bool> {
    let mut seen: BTreeMap<A::State, Vec<u8>> = BTreeMap::new();
    for s in seqs {
        let phys = apply_sequence(impl_, s, coins)?.state;
        let logical = logical_state(adt, s);
        if let Some(prev) = seen.get(&logical) {
            if *prev != phys {
                return Ok(false);
            }
        } else {
            seen.insert(logical, phys);
        }
    }
    Ok(true)
}

/// Distinct ids mentioned by `seq`.
pub fn ids_of(seq: &[Op]) -> BTreeSet<Vec<u8>> {
    seq.iter().map(|o| o.id.clone()).collect()
}
