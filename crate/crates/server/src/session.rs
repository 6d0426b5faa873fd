//! Operator state machine.
//!
//! ```text
//! 0 --config--> 1 --lock--> 2 --move--> 3
//!               1 <-unlock- 2 <-stop/converged/timeout- 3
//! ```
//!
//! The machine is pure: it returns replies for the sender and an effect for
//! the core task to carry out.

use teleop_core::controller::TargetCommand;
use teleop_core::{ModuleSpec, Vec3};

use crate::protocol::{Message, RobotSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Fsm {
    Disconnected = 0,
    Configured = 1,
    Locked = 2,
    Moving = 3,
}

impl Fsm {
    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Reconfigure(Vec<ModuleSpec>),
    StartMove(TargetCommand),
    StopMove,
}

/// Events raised by the controller rather than by a client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlEvent {
    Converged { error_mm: f64 },
    Timeout { error_mm: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Reaction {
    pub replies: Vec<Message>,
    pub effect: Option<Effect>,
}

impl Reaction {
    fn reply(msg: Message) -> Self {
        Self {
            replies: vec![msg],
            effect: None,
        }
    }

    fn with(msg: Message, effect: Effect) -> Self {
        Self {
            replies: vec![msg],
            effect: Some(effect),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    fsm: Fsm,
    specs: Vec<ModuleSpec>,
    configured: bool,
    pending: Option<TargetCommand>,
}

pub fn validate_spec(spec: &RobotSpec) -> Result<(), String> {
    if spec.modules.is_empty() {
        return Err("at least one module is required".into());
    }
    for (i, m) in spec.modules.iter().enumerate() {
        m.validate().map_err(|e| format!("module {i}: {e}"))?;
    }
    Ok(())
}

impl Session {
    /// `specs` is the geometry reported in `welcome` until a client
    /// configures the robot.
    pub fn new(specs: Vec<ModuleSpec>) -> Self {
        Self {
            fsm: Fsm::Disconnected,
            specs,
            configured: false,
            pending: None,
        }
    }

    pub fn fsm(&self) -> Fsm {
        self.fsm
    }

    pub fn specs(&self) -> &[ModuleSpec] {
        &self.specs
    }

    pub fn is_configured(&self) -> bool {
        self.configured
    }

    pub fn pending(&self) -> Option<&TargetCommand> {
        self.pending.as_ref()
    }

    fn bad_state(&self, what: &str) -> Reaction {
        Reaction::reply(Message::error(
            "bad_state",
            format!("{what} not allowed in fsm {}", self.fsm.code()),
        ))
    }

    pub fn handle_message(&mut self, msg: &Message) -> Reaction {
        use Fsm::*;
        match (self.fsm, msg) {
            (_, Message::Hello { .. }) => Reaction::reply(Message::Welcome {
                robot_spec: RobotSpec {
                    modules: self.specs.clone(),
                },
            }),
            (Disconnected | Configured, Message::Config { robot_spec }) => match validate_spec(robot_spec) {
                Ok(()) => {
                    self.specs = robot_spec.modules.clone();
                    self.configured = true;
                    self.pending = None;
                    self.fsm = Configured;
                    Reaction::with(Message::ack("config"), Effect::Reconfigure(self.specs.clone()))
                }
                Err(detail) => Reaction::reply(Message::error("bad_spec", detail)),
            },
            (Configured, Message::Lock) => {
                self.fsm = Locked;
                Reaction::reply(Message::ack("lock"))
            }
            (Locked, Message::Unlock) => {
                self.fsm = Configured;
                Reaction::reply(Message::ack("unlock"))
            }
            (Locked, Message::Target { module, pos_mm }) => {
                let target = TargetCommand {
                    module_index: *module,
                    target_mm: Vec3::from(*pos_mm),
                };
                match target.validate(&self.specs) {
                    Ok(()) => {
                        self.pending = Some(target);
                        Reaction::reply(Message::ack("target"))
                    }
                    Err(e) => Reaction::reply(Message::error("bad_target", e.to_string())),
                }
            }
            (Locked, Message::Move) => match self.pending {
                Some(target) => {
                    self.fsm = Moving;
                    Reaction::with(Message::ack("move"), Effect::StartMove(target))
                }
                None => Reaction::reply(Message::error("no_target", "send a target before move")),
            },
            (Moving, Message::Stop) => {
                self.fsm = Locked;
                Reaction::with(Message::ack("stop"), Effect::StopMove)
            }
            (_, m) if m.is_server_only() => {
                Reaction::reply(Message::error("bad_message", "message type is server-only"))
            }
            (_, m) => self.bad_state(message_name(m)),
        }
    }

    pub fn handle_event(&mut self, event: ControlEvent) -> Reaction {
        if self.fsm != Fsm::Moving {
            return Reaction::default();
        }
        self.fsm = Fsm::Locked;
        match event {
            ControlEvent::Converged { .. } => Reaction::reply(Message::ack("converged")),
            ControlEvent::Timeout { error_mm } => Reaction::reply(Message::error(
                "timeout",
                match error_mm {
                    Some(e) => format!("target not reached, error {:.2} mm", e),
                    None => "target not reached, no estimate".into(),
                },
            )),
        }
    }

    /// The controlling client went away: a running move is stopped.
    pub fn handle_disconnect(&mut self) -> Reaction {
        if self.fsm == Fsm::Moving {
            self.fsm = Fsm::Locked;
            return Reaction {
                replies: Vec::new(),
                effect: Some(Effect::StopMove),
            };
        }
        Reaction::default()
    }
}

fn message_name(m: &Message) -> &'static str {
    match m {
        Message::Hello { .. } => "hello",
        Message::Welcome { .. } => "welcome",
        Message::Config { .. } => "config",
        Message::Lock => "lock",
        Message::Unlock => "unlock",
        Message::Target { .. } => "target",
        Message::Move => "move",
        Message::Stop => "stop",
        Message::State { .. } => "state",
        Message::Ack { .. } => "ack",
        Message::Error { .. } => "error",
    }
}
