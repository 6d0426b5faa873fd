//! Wire messages: one JSON object per line, discriminated by `"type"`.

use serde::{Deserialize, Serialize};
use teleop_core::observer::fmt_decimal;
use teleop_core::ModuleSpec;

pub const MAX_LINE_BYTES: usize = 64 * 1024;
pub const PROTOCOL_VERSION: u32 = 1;

/// Robot geometry as exchanged in `welcome` and `config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSpec {
    pub modules: Vec<ModuleSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleState {
    pub phi_deg: f64,
    pub theta_deg: f64,
    pub h_mm: f64,
    pub lengths_mm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        version: u32,
    },
    Welcome {
        robot_spec: RobotSpec,
    },
    Config {
        robot_spec: RobotSpec,
    },
    Lock,
    Unlock,
    Target {
        module: usize,
        pos_mm: [f64; 3],
    },
    Move,
    Stop,
    State {
        seq: u64,
        t_ms: u64,
        fsm: u8,
        modules: Vec<ModuleState>,
        ee_mm: [f64; 3],
        stale: bool,
    },
    Ack {
        #[serde(rename = "ref")]
        reference: String,
    },
    Error {
        code: String,
        detail: String,
    },
}

impl Message {
    pub fn ack(reference: &str) -> Self {
        Self::Ack {
            reference: reference.into(),
        }
    }

    pub fn error(code: &str, detail: impl Into<String>) -> Self {
        Self::Error {
            code: code.into(),
            detail: detail.into(),
        }
    }

    /// Messages only the server may originate.
    pub fn is_server_only(&self) -> bool {
        matches!(
            self,
            Self::Welcome { .. } | Self::State { .. } | Self::Ack { .. } | Self::Error { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("bad_message: {detail}")]
pub struct DecodeError {
    pub detail: String,
}

impl DecodeError {
    pub fn to_message(&self) -> Message {
        Message::error("bad_message", self.detail.clone())
    }
}

/// One line of JSON, without the trailing newline.
pub fn encode(msg: &Message) -> String {
    serde_json::to_string(msg).expect("messages always serialize")
}

pub fn decode(line: &str) -> Result<Message, DecodeError> {
    if line.len() > MAX_LINE_BYTES {
        return Err(DecodeError {
            detail: format!("line exceeds {MAX_LINE_BYTES} bytes"),
        });
    }
    let msg: Message = serde_json::from_str(line.trim_end_matches(['\r', '\n'])).map_err(|e| DecodeError {
        detail: e.to_string(),
    })?;
    if let Message::State { fsm, .. } = &msg {
        if *fsm > 3 {
            return Err(DecodeError {
                detail: format!("fsm {fsm} out of range"),
            });
        }
    }
    Ok(msg)
}

/// Rounds to the four fractional digits used on the wire.
pub fn wire_round(v: f64) -> f64 {
    fmt_decimal(v).parse().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures() {
        assert_eq!(encode(&Message::Lock), r#"{"type":"lock"}"#);
        assert_eq!(decode(r#"{"type":"lock"}"#).unwrap(), Message::Lock);
        let t = Message::Target {
            module: 0,
            pos_mm: [10.0, -5.0, 80.0],
        };
        assert_eq!(encode(&t), r#"{"type":"target","module":0,"pos_mm":[10.0,-5.0,80.0]}"#);
        assert_eq!(decode(&encode(&t)).unwrap(), t);
        assert_eq!(encode(&Message::ack("move")), r#"{"type":"ack","ref":"move"}"#);
    }

    #[test]
    fn rejects_malformed() {
        for line in [
            r#"{"type":"warp"}"#,
            r#"{"type":"target","module":0}"#,
            r#"{"type":"target","module":0,"pos_mm":[1,2]}"#,
            r#"{"type":"target","module":-1,"pos_mm":[1,2,3]}"#,
            r#"{"type":"hello","version":"one"}"#,
            r#"{"module":0}"#,
            r#"{"type":"state","seq":1,"t_ms":0,"fsm":9,"modules":[],"ee_mm":[0,0,0],"stale":true}"#,
            "",
            "not json",
        ] {
            let err = decode(line).unwrap_err();
            assert_eq!(err.to_message(), Message::error("bad_message", err.detail.clone()), "{line}");
        }
        let huge = format!(r#"{{"type":"error","code":"x","detail":"{}"}}"#, "a".repeat(MAX_LINE_BYTES));
        assert!(decode(&huge).is_err());
    }

    #[test]
    fn wire_rounding() {
        assert_eq!(wire_round(1.23456), 1.2346);
        assert_eq!(wire_round(-0.00001), 0.0);
        assert_eq!(serde_json::to_string(&wire_round(85.00000001)).unwrap(), "85.0");
    }
}
