//! Parties, channels, transcripts and the real/ideal executions.
//!
//! The scheduler activates one party at a time. The environment (or the
//! dummy, in the ideal world) goes first; a party that sends a message hands
//! control to the recipient, and a party that halts silently hands control
//! back to the environment.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tape::{Coins, Stream, TapeSet};

/// Opaque channel token.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelId(pub Vec<u8>);

impl ChannelId {
    pub fn new(token: impl AsRef<[u8]>) -> Self {
        ChannelId(token.as_ref().to_vec())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", hex::encode(&self.0))
    }
}

impl Serialize for ChannelId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for ChannelId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s).map(ChannelId).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Message {
    Data(Vec<u8>),
    Delete,
    Tick,
    Fail,
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Data(_) => "data",
            Message::Delete => "delete",
            Message::Tick => "tick",
            Message::Fail => "fail",
        }
    }

    pub fn payload(&self) -> &[u8] {
        match self {
            Message::Data(p) => p,
            _ => &[],
        }
    }

    /// Byte encoding used for views and fingerprints.
    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Message::Data(p) => {
                out.push(0);
                out.extend_from_slice(&(p.len() as u32).to_be_bytes());
                out.extend_from_slice(p);
            }
            Message::Delete => out.push(1),
            Message::Tick => out.push(2),
            Message::Fail => out.push(3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Controller,
    Environment,
    Subject,
    Dummy,
}

/// One message to or from the controller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub step: u64,
    pub sender: Role,
    pub receiver: Role,
    pub channel: ChannelId,
    pub message: Message,
}

#[derive(Serialize, Deserialize)]
struct EntryRecord {
    step: u64,
    sender: Role,
    receiver: Role,
    channel: ChannelId,
    kind: String,
    payload_hex: String,
}

impl Entry {
    fn record(&self) -> EntryRecord {
        EntryRecord {
            step: self.step,
            sender: self.sender,
            receiver: self.receiver,
            channel: self.channel.clone(),
            kind: self.message.kind().to_string(),
            payload_hex: hex::encode(self.message.payload()),
        }
    }

    fn from_record(r: EntryRecord) -> Result<Self> {
        let payload = hex::decode(&r.payload_hex).map_err(|e| Error::Parameter(e.to_string()))?;
        let message = match r.kind.as_str() {
            "data" => Message::Data(payload),
            "delete" => Message::Delete,
            "tick" => Message::Tick,
            "fail" => Message::Fail,
            other => return Err(Error::Parameter(format!("unknown message kind {other}"))),
        };
        Ok(Entry {
            step: r.step,
            sender: r.sender,
            receiver: r.receiver,
            channel: r.channel,
            message,
        })
    }
}

/// A query the environment sent to the controller.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Query {
    pub channel: ChannelId,
    pub message: Message,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub entries: Vec<Entry>,
}

impl Transcript {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(&e.record()).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: EntryRecord =
                serde_json::from_str(line).map_err(|e| Error::Parameter(e.to_string()))?;
            entries.push(Entry::from_record(r)?);
        }
        Ok(Transcript { entries })
    }

    /// Replies and queries, without step indices.
    pub fn messages(&self) -> Vec<(Role, Role, ChannelId, Message)> {
        self.entries
            .iter()
            .map(|e| (e.sender, e.receiver, e.channel.clone(), e.message.clone()))
            .collect()
    }
}

/// The environment's queries to the controller, in order.
pub fn project_queries(transcript: &Transcript) -> Vec<Query> {
    transcript
        .entries
        .iter()
        .filter(|e| e.sender == Role::Environment && e.receiver == Role::Controller)
        .map(|e| Query {
            channel: e.channel.clone(),
            message: e.message.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ControllerState {
    Bytes(Vec<u8>),
    Bottom,
}

impl ControllerState {
    pub fn is_bottom(&self) -> bool {
        matches!(self, ControllerState::Bottom)
    }

    /// Lowercase hex, or `None` for Bottom.
    pub fn to_hex(&self) -> Option<String> {
        match self {
            ControllerState::Bytes(b) => Some(hex::encode(b)),
            ControllerState::Bottom => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionOutcome {
    pub transcript: Transcript,
    pub controller_state: ControllerState,
    pub tape_bits_consumed: u64,
    /// Every message the environment sent or received, including traffic
    /// with the subject. Empty for Bottom.
    pub environment_view: Vec<(Role, Role, ChannelId, Message)>,
}

impl ExecutionOutcome {
    fn bottom(bits: u64) -> Self {
        ExecutionOutcome {
            transcript: Transcript::default(),
            controller_state: ControllerState::Bottom,
            tape_bits_consumed: bits,
            environment_view: Vec::new(),
        }
    }

    pub fn queries(&self) -> Vec<Query> {
        project_queries(&self.transcript)
    }
}

/// A data controller.
pub trait Controller: Send + Sync {
    /// Runs once before the first activation.
    fn init(&mut self, _coins: &mut dyn Coins) -> Result<()> {
        Ok(())
    }

    /// Handles one incoming message and optionally writes one reply.
    fn activate(
        &mut self,
        channel: &ChannelId,
        message: &Message,
        coins: &mut dyn Coins,
    ) -> Result<Option<(ChannelId, Message)>>;

    /// Deterministic, injective encoding of the work state.
    fn canonical_state(&self) -> Vec<u8>;

    /// Channels whose data the state can refer to, if the controller tracks
    /// that. A controller only learns tokens from the messages it receives.
    fn referenced_channels(&self) -> Option<BTreeSet<ChannelId>> {
        None
    }

    fn box_clone(&self) -> Box<dyn Controller>;
}

impl Clone for Box<dyn Controller> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// What the environment or subject received.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Inbound {
    FromController(ChannelId, Message),
    FromPeer(Vec<u8>),
    /// The party's last send used a channel it does not hold.
    Fail(ChannelId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    ToController(ChannelId, Message),
    /// Message to the other non-controller party (environment to subject or back).
    ToPeer(Vec<u8>),
    Halt,
    /// Ends a confidentiality execution; treated as Halt elsewhere.
    Finish,
}

/// The environment or the data subject.
pub trait Participant: Send + Sync {
    fn activate(&mut self, input: Option<Inbound>, coins: &mut dyn Coins) -> Result<Action>;

    fn box_clone(&self) -> Box<dyn Participant>;
}

impl Clone for Box<dyn Participant> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Token of the environment/subject link; never seen by the controller.
pub fn peer_channel() -> ChannelId {
    ChannelId::new(b"peer")
}

enum Turn {
    Env(Option<Inbound>),
    Subj(Option<Inbound>),
    Ctrl {
        channel: ChannelId,
        message: Message,
        from: Role,
    },
}

/// Which world a confidentiality execution runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum World {
    Real,
    Ideal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ending {
    /// Ends after the controller processes the subject's first Delete.
    SubjectDelete,
    /// Ends on the environment's Finish.
    Finish { world: World, silent: bool },
}

/// Runs the real execution of `controller`, `environment` and `subject`.
pub fn run_real(
    controller: &mut dyn Controller,
    environment: &mut dyn Participant,
    subject: &mut dyn Participant,
    subject_channel: &ChannelId,
    tapes: &mut dyn TapeSet,
    max_steps: u64,
) -> Result<ExecutionOutcome> {
    schedule(
        controller,
        environment,
        subject,
        subject_channel,
        tapes,
        max_steps,
        Ending::SubjectDelete,
    )
}

/// Runs a confidentiality execution in `world`. In the ideal world every
/// message between subject and controller is dropped. With `silent`, a
/// subject message to the environment is an error.
pub fn run_confidentiality(
    controller: &mut dyn Controller,
    environment: &mut dyn Participant,
    subject: &mut dyn Participant,
    subject_channel: &ChannelId,
    tapes: &mut dyn TapeSet,
    max_steps: u64,
    world: World,
    silent: bool,
) -> Result<ExecutionOutcome> {
    schedule(
        controller,
        environment,
        subject,
        subject_channel,
        tapes,
        max_steps,
        Ending::Finish { world, silent },
    )
}

fn schedule(
    controller: &mut dyn Controller,
    environment: &mut dyn Participant,
    subject: &mut dyn Participant,
    subject_channel: &ChannelId,
    tapes: &mut dyn TapeSet,
    max_steps: u64,
    ending: Ending,
) -> Result<ExecutionOutcome> {
    if max_steps == 0 {
        return Err(Error::Parameter("max_steps must be positive".into()));
    }
    let peer = peer_channel();
    let mut transcript = Transcript::default();
    let mut view: Vec<(Role, Role, ChannelId, Message)> = Vec::new();
    let mut env_channels: BTreeSet<ChannelId> = BTreeSet::new();
    let mut subject_last_delete = false;
    let (ideal, silent) = match ending {
        Ending::Finish { world, silent } => (world == World::Ideal, silent),
        Ending::SubjectDelete => (false, false),
    };
    controller.init(tapes.coins(Stream::Controller))?;
    let mut turn = Turn::Env(None);
    let mut step: u64 = 0;
    loop {
        if step >= max_steps {
            let bits = tapes.coins(Stream::Controller).consumed_bits();
            return Ok(ExecutionOutcome::bottom(bits));
        }
        step += 1;
        turn = match turn {
            Turn::Env(input) => {
                if let Some(inb) = &input {
                    match inb {
                        Inbound::FromController(ch, m) => {
                            view.push((Role::Controller, Role::Environment, ch.clone(), m.clone()))
                        }
                        Inbound::FromPeer(p) => view.push((
                            Role::Subject,
                            Role::Environment,
                            peer.clone(),
                            Message::Data(p.clone()),
                        )),
                        Inbound::Fail(ch) => {
                            view.push((Role::Dummy, Role::Environment, ch.clone(), Message::Fail))
                        }
                    }
                }
                match environment.activate(input, tapes.coins(Stream::Environment))? {
                    Action::ToController(ch, m) => {
                        if &ch == subject_channel || ch == peer {
                            Turn::Env(Some(Inbound::Fail(ch)))
                        } else {
                            env_channels.insert(ch.clone());
                            view.push((Role::Environment, Role::Controller, ch.clone(), m.clone()));
                            transcript.entries.push(Entry {
                                step,
                                sender: Role::Environment,
                                receiver: Role::Controller,
                                channel: ch.clone(),
                                message: m.clone(),
                            });
                            Turn::Ctrl {
                                channel: ch,
                                message: m,
                                from: Role::Environment,
                            }
                        }
                    }
                    Action::ToPeer(p) => {
                        view.push((Role::Environment, Role::Subject, peer.clone(), Message::Data(p.clone())));
                        Turn::Subj(Some(Inbound::FromPeer(p)))
                    }
                    Action::Halt => Turn::Env(None),
                    Action::Finish => match ending {
                        Ending::SubjectDelete => Turn::Env(None),
                        Ending::Finish { .. } => {
                            if ideal || subject_last_delete {
                                return Ok(finish(controller, transcript, view, tapes));
                            }
                            // The subject deletes now and the run ends once the
                            // controller has processed it.
                            step += 1;
                            transcript.entries.push(Entry {
                                step,
                                sender: Role::Subject,
                                receiver: Role::Controller,
                                channel: subject_channel.clone(),
                                message: Message::Delete,
                            });
                            let reply = controller.activate(
                                subject_channel,
                                &Message::Delete,
                                tapes.coins(Stream::Controller),
                            )?;
                            if let Some((ch, m)) = reply {
                                record_reply(&mut transcript, step, &ch, m, subject_channel, &env_channels);
                            }
                            return Ok(finish(controller, transcript, view, tapes));
                        }
                    },
                }
            }
            Turn::Subj(input) => match subject.activate(input, tapes.coins(Stream::Subject))? {
                Action::ToController(ch, m) => {
                    if m == Message::Tick {
                        return Err(Error::ModelViolation("the subject sent Tick".into()));
                    }
                    if &ch != subject_channel {
                        Turn::Subj(Some(Inbound::Fail(ch)))
                    } else if ideal {
                        Turn::Env(None)
                    } else {
                        subject_last_delete = m == Message::Delete;
                        transcript.entries.push(Entry {
                            step,
                            sender: Role::Subject,
                            receiver: Role::Controller,
                            channel: ch.clone(),
                            message: m.clone(),
                        });
                        Turn::Ctrl {
                            channel: ch,
                            message: m,
                            from: Role::Subject,
                        }
                    }
                }
                Action::ToPeer(p) => {
                    if silent {
                        return Err(Error::SilentViolation);
                    }
                    Turn::Env(Some(Inbound::FromPeer(p)))
                }
                Action::Halt | Action::Finish => Turn::Env(None),
            },
            Turn::Ctrl {
                channel,
                message,
                from,
            } => {
                let reply = controller.activate(&channel, &message, tapes.coins(Stream::Controller))?;
                let ends = ending == Ending::SubjectDelete
                    && from == Role::Subject
                    && message == Message::Delete;
                if ends {
                    if let Some((ch, m)) = reply {
                        record_reply(&mut transcript, step, &ch, m, subject_channel, &env_channels);
                    }
                    return Ok(finish(controller, transcript, view, tapes));
                }
                match reply {
                    None => Turn::Env(None),
                    Some((ch, m)) => {
                        if &ch == subject_channel {
                            if ideal {
                                Turn::Env(None)
                            } else {
                                transcript.entries.push(Entry {
                                    step,
                                    sender: Role::Controller,
                                    receiver: Role::Subject,
                                    channel: ch.clone(),
                                    message: m.clone(),
                                });
                                Turn::Subj(Some(Inbound::FromController(ch, m)))
                            }
                        } else if env_channels.contains(&ch) {
                            transcript.entries.push(Entry {
                                step,
                                sender: Role::Controller,
                                receiver: Role::Environment,
                                channel: ch.clone(),
                                message: m.clone(),
                            });
                            Turn::Env(Some(Inbound::FromController(ch, m)))
                        } else {
                            Turn::Ctrl {
                                channel: ch,
                                message: Message::Fail,
                                from: Role::Controller,
                            }
                        }
                    }
                }
            }
        };
    }
}

fn record_reply(
    transcript: &mut Transcript,
    step: u64,
    ch: &ChannelId,
    m: Message,
    subject_channel: &ChannelId,
    env_channels: &BTreeSet<ChannelId>,
) {
    let receiver = if ch == subject_channel {
        Role::Subject
    } else if env_channels.contains(ch) {
        Role::Environment
    } else {
        return;
    };
    transcript.entries.push(Entry {
        step,
        sender: Role::Controller,
        receiver,
        channel: ch.clone(),
        message: m,
    });
}

fn finish(
    controller: &dyn Controller,
    transcript: Transcript,
    environment_view: Vec<(Role, Role, ChannelId, Message)>,
    tapes: &mut dyn TapeSet,
) -> ExecutionOutcome {
    ExecutionOutcome {
        transcript,
        controller_state: ControllerState::Bytes(controller.canonical_state()),
        tape_bits_consumed: tapes.coins(Stream::Controller).consumed_bits(),
        environment_view,
    }
}

/// Runs the ideal execution: a dummy replays `queries` on their original
/// channels, ignoring replies.
pub fn run_ideal(
    controller: &mut dyn Controller,
    queries: &[Query],
    coins: &mut dyn Coins,
    max_steps: u64,
) -> Result<ExecutionOutcome> {
    if max_steps == 0 {
        return Err(Error::Parameter("max_steps must be positive".into()));
    }
    let channels: BTreeSet<ChannelId> = queries.iter().map(|q| q.channel.clone()).collect();
    let mut transcript = Transcript::default();
    controller.init(coins)?;
    let mut step = 0u64;
    for q in queries {
        step += 1;
        transcript.entries.push(Entry {
            step,
            sender: Role::Dummy,
            receiver: Role::Controller,
            channel: q.channel.clone(),
            message: q.message.clone(),
        });
        let mut incoming = Some((q.channel.clone(), q.message.clone()));
        while let Some((ch, m)) = incoming.take() {
            if step >= max_steps {
                return Ok(ExecutionOutcome::bottom(coins.consumed_bits()));
            }
            step += 1;
            if let Some((out_ch, out_m)) = controller.activate(&ch, &m, coins)? {
                if channels.contains(&out_ch) {
                    transcript.entries.push(Entry {
                        step,
                        sender: Role::Controller,
                        receiver: Role::Dummy,
                        channel: out_ch,
                        message: out_m,
                    });
                } else {
                    incoming = Some((out_ch, Message::Fail));
                }
            }
        }
    }
    Ok(ExecutionOutcome {
        transcript,
        controller_state: ControllerState::Bytes(controller.canonical_state()),
        tape_bits_consumed: coins.consumed_bits(),
        environment_view: Vec::new(),
    })
}
