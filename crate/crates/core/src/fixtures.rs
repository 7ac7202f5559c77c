//! Scripted environments and data subjects, and the fixture library each
//! controller is audited against.

use std::collections::VecDeque;

use crate::controllers::{directory, BoardController, CloudController};
use crate::dp::feed;
use crate::error::Result;
use crate::exec::{Action, ChannelId, Inbound, Message, Participant};
use crate::games::Fixture;
use crate::hi::Op;
use crate::tape::Coins;

/// Subject command: send write number `i`.
pub fn write_cmd(i: u8) -> Vec<u8> {
    vec![0, i]
}

/// Subject command: send Delete.
pub const DELETE_CMD: &[u8] = &[1];

/// Subject command: reveal the subject's channel token to the environment.
pub const LEAK_CMD: &[u8] = &[2];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvStep {
    Send(ChannelId, Message),
    /// Command for the subject.
    Wake(Vec<u8>),
    /// Sends the last thing learned from the subject as a payload.
    Blacklist(ChannelId),
    /// Reads the last thing learned from the subject as a count `t` and
    /// contacts `t - 1` fresh channels `prefix‖i` with `message`.
    Pad(Vec<u8>, Message),
    Finish,
}

/// Environment that takes one scripted step per activation.
#[derive(Debug, Clone)]
pub struct ScriptedEnvironment {
    steps: Vec<EnvStep>,
    pos: usize,
    learned: Option<Vec<u8>>,
    queue: VecDeque<(ChannelId, Message)>,
}

impl ScriptedEnvironment {
    pub fn new(steps: Vec<EnvStep>) -> Self {
        ScriptedEnvironment {
            steps,
            pos: 0,
            learned: None,
            queue: VecDeque::new(),
        }
    }
}

fn learned_count(p: &[u8]) -> u64 {
    p.try_into().map(u64::from_be_bytes).unwrap_or(0)
}

impl Participant for ScriptedEnvironment {
    fn activate(&mut self, input: Option<Inbound>, _coins: &mut dyn Coins) -> Result<Action> {
        if let Some(Inbound::FromPeer(p)) = input {
            self.learned = Some(p);
        }
        loop {
            if let Some((ch, m)) = self.queue.pop_front() {
                return Ok(Action::ToController(ch, m));
            }
            let Some(step) = self.steps.get(self.pos).cloned() else {
                return Ok(Action::Finish);
            };
            self.pos += 1;
            match step {
                EnvStep::Send(ch, m) => return Ok(Action::ToController(ch, m)),
                EnvStep::Wake(cmd) => return Ok(Action::ToPeer(cmd)),
                EnvStep::Blacklist(ch) => {
                    let token = self.learned.clone().unwrap_or_default();
                    return Ok(Action::ToController(ch, Message::Data(token)));
                }
                EnvStep::Pad(prefix, m) => {
                    let t = self.learned.as_deref().map_or(0, learned_count);
                    for i in 1..t {
                        let mut ch = prefix.clone();
                        ch.extend_from_slice(&i.to_be_bytes());
                        self.queue.push_back((ChannelId(ch), m.clone()));
                    }
                }
                EnvStep::Finish => return Ok(Action::Finish),
            }
        }
    }

    fn box_clone(&self) -> Box<dyn Participant> {
        Box::new(self.clone())
    }
}

/// Subject that acts only on commands from the environment.
#[derive(Debug, Clone)]
pub struct ScriptedSubject {
    pub channel: ChannelId,
    pub writes: Vec<Message>,
    /// Passes every controller reply on to the environment.
    pub forward_replies: bool,
}

impl Participant for ScriptedSubject {
    fn activate(&mut self, input: Option<Inbound>, _coins: &mut dyn Coins) -> Result<Action> {
        Ok(match input {
            Some(Inbound::FromPeer(cmd)) => match cmd.as_slice() {
                [0, i] => match self.writes.get(*i as usize) {
                    Some(m) => Action::ToController(self.channel.clone(), m.clone()),
                    None => Action::Halt,
                },
                [1] => Action::ToController(self.channel.clone(), Message::Delete),
                [2] => Action::ToPeer(self.channel.as_bytes().to_vec()),
                _ => Action::Halt,
            },
            Some(Inbound::FromController(_, m)) if self.forward_replies => Action::ToPeer(m.payload().to_vec()),
            _ => Action::Halt,
        })
    }

    fn box_clone(&self) -> Box<dyn Participant> {
        Box::new(self.clone())
    }
}

/// How the fixtures talk to one controller.
#[derive(Debug, Clone)]
pub struct Dialect {
    /// Subject writes, in the order the scripts wake them.
    pub subject_writes: Vec<Message>,
    pub env_write: Message,
    /// A query from the environment that reads stored data.
    pub env_read: Option<Message>,
    pub tick: Option<Message>,
}

pub const SUBJECT: &str = "y";
pub const ENV_A: &str = "e1";
pub const ENV_B: &str = "e2";

pub fn dialect(controller: &str, xor_bits: u32) -> Option<Dialect> {
    let y = SUBJECT.as_bytes();
    Some(match controller {
        "xor" => {
            let mask = (1u64 << xor_bits) - 1;
            let word = |x: u64| {
                let b = xor_bits.div_ceil(8) as usize;
                (x & mask).to_be_bytes()[8 - b..].to_vec()
            };
            Dialect {
                subject_writes: vec![Message::Data(word(0x5a))],
                env_write: Message::Data(word(0x0f)),
                env_read: None,
                tick: None,
            }
        }
        "dict" | "dict_write_only" => Dialect {
            subject_writes: vec![Op::set("", b"y-value").to_message()],
            env_write: Op::set("", b"e-value").to_message(),
            env_read: Some(Op::get("").to_message()),
            tick: None,
        },
        "cloud" => Dialect {
            subject_writes: vec![CloudController::upload(b"notes", b"y-secret")],
            env_write: CloudController::upload(b"notes", b"e-file"),
            env_read: Some(CloudController::download(b"notes")),
            tick: None,
        },
        "bulletin" => Dialect {
            subject_writes: vec![BoardController::post(b"y-post")],
            env_write: BoardController::post(b"e-post"),
            env_read: Some(BoardController::read()),
            tick: None,
        },
        "batch" => Dialect {
            subject_writes: vec![Op::insert("").to_message()],
            env_write: Op::insert("").to_message(),
            env_read: None,
            tick: Some(Message::Tick),
        },
        "directory" | "directory_monolithic" => Dialect {
            subject_writes: vec![directory::set(b"y-listing"), directory::get(ENV_A.as_bytes())],
            env_write: directory::set(b"e-listing"),
            env_read: Some(directory::get(y)),
            tick: Some(directory::get_count()),
        },
        "pp_counter" => Dialect {
            subject_writes: vec![feed("", 1).to_message()],
            env_write: feed("", 1).to_message(),
            env_read: None,
            tick: Some(Message::Tick),
        },
        "ignore_delete" | "timing" => Dialect {
            subject_writes: vec![Message::Data(Vec::new())],
            env_write: Message::Data(Vec::new()),
            env_read: None,
            tick: None,
        },
        _ => return None,
    })
}

fn ch(s: &str) -> ChannelId {
    ChannelId::new(s)
}

fn fixture(name: &str, steps: Vec<EnvStep>, writes: &[Message], forward_replies: bool) -> Fixture {
    Fixture {
        name: name.into(),
        environment: Box::new(ScriptedEnvironment::new(steps)),
        subject: Box::new(ScriptedSubject {
            channel: ch(SUBJECT),
            writes: writes.to_vec(),
            forward_replies,
        }),
        subject_channel: ch(SUBJECT),
        silent: !forward_replies,
    }
}

/// Fixtures with a silent subject and an environment that only uses its
/// own channels.
pub fn honest_fixtures(d: &Dialect) -> Vec<Fixture> {
    use EnvStep::*;
    let w = &d.subject_writes;
    let wake_all: Vec<EnvStep> = (0..w.len() as u8).map(|i| Wake(write_cmd(i))).collect();
    let mut out = Vec::new();

    let mut s = wake_all.clone();
    s.extend([Wake(DELETE_CMD.to_vec()), Finish]);
    out.push(fixture("quiet", s, w, false));

    let mut s = vec![Send(ch(ENV_A), d.env_write.clone())];
    s.extend(wake_all.iter().cloned());
    s.extend([Send(ch(ENV_B), d.env_write.clone()), Wake(DELETE_CMD.to_vec()), Finish]);
    out.push(fixture("writer", s, w, false));

    let mut s = vec![Send(ch(ENV_A), d.env_write.clone())];
    s.extend(wake_all.iter().cloned());
    s.extend([
        Send(ch(ENV_A), d.env_write.clone()),
        Send(ch(ENV_B), d.env_write.clone()),
        Wake(DELETE_CMD.to_vec()),
        Finish,
    ]);
    out.push(fixture("busy", s, w, false));

    if let Some(r) = &d.env_read {
        let mut s = vec![Send(ch(ENV_A), d.env_write.clone())];
        s.extend(wake_all.iter().cloned());
        s.extend([
            Send(ch(ENV_A), r.clone()),
            Wake(DELETE_CMD.to_vec()),
            Send(ch(ENV_A), r.clone()),
            Finish,
        ]);
        out.push(fixture("reader", s, w, false));
    }
    if let Some(t) = &d.tick {
        let mut s = vec![Send(ch(ENV_A), d.env_write.clone())];
        s.extend(wake_all.iter().cloned());
        s.extend([
            Send(ch(ENV_A), t.clone()),
            Wake(DELETE_CMD.to_vec()),
            Send(ch(ENV_A), t.clone()),
            Finish,
        ]);
        out.push(fixture("ticker", s, w, false));
    }
    out
}

/// The subject leaks its token and the environment names it in a payload.
pub fn blacklist_trigger() -> Fixture {
    use EnvStep::*;
    fixture(
        "trigger",
        vec![
            Wake(write_cmd(0)),
            Wake(LEAK_CMD.to_vec()),
            Blacklist(ch(ENV_A)),
            Wake(DELETE_CMD.to_vec()),
            Finish,
        ],
        &[Message::Data(Vec::new())],
        true,
    )
}

/// The subject forwards the count it was told and the environment pads
/// the registry to exactly that size before the subject deletes.
pub fn padding_trigger() -> Fixture {
    use EnvStep::*;
    fixture(
        "trigger",
        vec![
            Wake(write_cmd(0)),
            Pad(b"p".to_vec(), Message::Data(Vec::new())),
            Wake(DELETE_CMD.to_vec()),
            Finish,
        ],
        &[Message::Data(Vec::new())],
        true,
    )
}

/// The fixtures a controller is audited against.
pub fn fixtures_for(controller: &str, xor_bits: u32) -> Vec<Fixture> {
    let Some(d) = dialect(controller, xor_bits) else {
        return Vec::new();
    };
    let mut out = honest_fixtures(&d);
    match controller {
        "ignore_delete" => out.push(blacklist_trigger()),
        "timing" => out.push(padding_trigger()),
        _ => {}
    }
    out
}
