//! Newline-delimited JSON wire protocol spoken with detector backends.
//!
//! ```text
//! -> {"op":"hello","version":1,"task":"detect"}
//! <- {"op":"hello","version":1,"labels":["palm"]}
//! -> {"op":"detect","id":1,"image":"cache/tiles/20/1/2.png"}
//! <- {"op":"result","id":1,"detections":[{"box":[x0,y0,x1,y1],"score":0.9,"label":"palm"}]}
//! -> {"op":"classify","id":2,"image":"crop.jpg"}
//! <- {"op":"result","id":2,"probs":{"healthy":0.1,"infested":0.85,"unknown":0.05}}
//! <- {"op":"error","id":2,"message":"..."}
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::PixelBox;
use crate::timeline::ClassProbs;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detect,
    Classify,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Detect => "detect",
            Task::Classify => "classify",
        }
    }
}

/// Gateway-to-backend message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Hello { version: u32, task: Task },
    Detect { id: u64, image: String },
    Classify { id: u64, image: String },
}

impl Request {
    pub fn for_task(task: Task, id: u64, image: String) -> Self {
        match task {
            Task::Detect => Request::Detect { id, image },
            Task::Classify => Request::Classify { id, image },
        }
    }

    pub fn id(&self) -> Option<u64> {
        match self {
            Request::Hello { .. } => None,
            Request::Detect { id, .. } | Request::Classify { id, .. } => Some(*id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub score: f64,
    pub label: String,
}

/// Backend-to-gateway message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Response {
    Hello {
        version: u32,
        labels: Vec<String>,
    },
    Result {
        id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detections: Option<Vec<RawDetection>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        probs: Option<ClassProbs>,
    },
    Error {
        id: u64,
        message: String,
    },
}

impl Response {
    pub fn detections(id: u64, detections: Vec<RawDetection>) -> Self {
        Response::Result {
            id,
            detections: Some(detections),
            probs: None,
        }
    }

    pub fn probs(id: u64, probs: ClassProbs) -> Self {
        Response::Result {
            id,
            detections: None,
            probs: Some(probs),
        }
    }

    pub fn id(&self) -> Option<u64> {
        match self {
            Response::Hello { .. } => None,
            Response::Result { id, .. } | Response::Error { id, .. } => Some(*id),
        }
    }
}

/// Outcome of one request after protocol checks.
#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Detections(Vec<RawDetection>),
    Probs(ClassProbs),
    Failed(String),
}

pub fn encode<T: Serialize>(msg: &T) -> String {
    // message types contain only strings, numbers and arrays: cannot fail
    serde_json::to_string(msg).expect("protocol message serializes")
}

pub fn decode_response(line: &str) -> Result<Response> {
    serde_json::from_str(line.trim_end()).map_err(|e| Error::Protocol {
        message: e.to_string(),
        line: line.trim_end().to_string(),
    })
}

pub fn decode_request(line: &str) -> Result<Request> {
    serde_json::from_str(line.trim_end()).map_err(|e| Error::Protocol {
        message: e.to_string(),
        line: line.trim_end().to_string(),
    })
}

/// Checks a handshake reply.
pub fn check_hello(resp: &Response, raw: &str) -> Result<Vec<String>> {
    match resp {
        Response::Hello { version, labels } if *version == PROTOCOL_VERSION => Ok(labels.clone()),
        Response::Hello { version, .. } => Err(Error::Backend(format!(
            "backend speaks protocol version {version}, expected {PROTOCOL_VERSION}"
        ))),
        _ => Err(Error::Protocol {
            message: "expected hello reply".into(),
            line: raw.to_string(),
        }),
    }
}

/// Interprets a reply to request `id` for `task`.
pub fn interpret(task: Task, id: u64, resp: Response, raw: &str) -> Result<Reply> {
    let protocol = |message: &str| Error::Protocol {
        message: message.to_string(),
        line: raw.to_string(),
    };
    if resp.id() != Some(id) {
        return Err(protocol(&format!("reply does not echo request id {id}")));
    }
    match (task, resp) {
        (_, Response::Error { message, .. }) => Ok(Reply::Failed(message)),
        (
            Task::Detect,
            Response::Result {
                detections: Some(d),
                ..
            },
        ) => Ok(Reply::Detections(d)),
        (Task::Classify, Response::Result { probs: Some(p), .. }) => Ok(Reply::Probs(p)),
        (Task::Detect, _) => Err(protocol("detect result without detections")),
        (Task::Classify, _) => Err(protocol("classify result without probs")),
    }
}

/// Something that can answer protocol requests in-process.
pub trait Responder {
    fn labels(&self, task: Task) -> Vec<String>;
    fn respond(&self, request: &Request) -> Response;
}

/// Serves a responder over a line stream until EOF. Malformed request lines
/// are answered with an error carrying id 0.
pub fn serve<R: BufRead, W: Write>(
    responder: &dyn Responder,
    input: R,
    mut output: W,
) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match decode_request(&line) {
            Ok(Request::Hello { task, .. }) => Response::Hello {
                version: PROTOCOL_VERSION,
                labels: responder.labels(task),
            },
            Ok(req) => responder.respond(&req),
            Err(e) => Response::Error {
                id: 0,
                message: e.to_string(),
            },
        };
        writeln!(output, "{}", encode(&reply))?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_layout_is_exact() {
        assert_eq!(
            encode(&Request::Hello {
                version: 1,
                task: Task::Detect
            }),
            r#"{"op":"hello","version":1,"task":"detect"}"#
        );
        assert_eq!(
            encode(&Request::Detect {
                id: 7,
                image: "a.png".into()
            }),
            r#"{"op":"detect","id":7,"image":"a.png"}"#
        );
        assert_eq!(
            encode(&Request::Classify {
                id: 8,
                image: "b.jpg".into()
            }),
            r#"{"op":"classify","id":8,"image":"b.jpg"}"#
        );
        let det = Response::detections(
            7,
            vec![RawDetection {
                bbox: PixelBox::new(1.0, 2.0, 3.0, 4.0).unwrap(),
                score: 0.5,
                label: "palm".into(),
            }],
        );
        assert_eq!(
            encode(&det),
            r#"{"op":"result","id":7,"detections":[{"box":[1.0,2.0,3.0,4.0],"score":0.5,"label":"palm"}]}"#
        );
        let probs = Response::probs(8, ClassProbs::new(0.25, 0.5, 0.25).unwrap());
        assert_eq!(
            encode(&probs),
            r#"{"op":"result","id":8,"probs":{"healthy":0.25,"infested":0.5,"unknown":0.25}}"#
        );
    }

    #[test]
    fn decodes_integer_boxes_and_errors() {
        let r = decode_response(
            r#"{"op":"result","id":3,"detections":[{"box":[0,0,10,12],"score":1,"label":"palm"}]}"#,
        )
        .unwrap();
        match interpret(Task::Detect, 3, r, "").unwrap() {
            Reply::Detections(d) => assert_eq!(d[0].bbox.as_array(), [0.0, 0.0, 10.0, 12.0]),
            other => panic!("{other:?}"),
        }
        let e = decode_response(r#"{"op":"error","id":4,"message":"no such image"}"#).unwrap();
        assert_eq!(
            interpret(Task::Classify, 4, e, "").unwrap(),
            Reply::Failed("no such image".into())
        );
    }

    #[test]
    fn protocol_violations_carry_the_line() {
        let err = decode_response("not json").unwrap_err();
        match err {
            Error::Protocol { line, .. } => assert_eq!(line, "not json"),
            other => panic!("{other:?}"),
        }
        let r = decode_response(r#"{"op":"result","id":5,"detections":[]}"#).unwrap();
        assert!(matches!(
            interpret(Task::Detect, 6, r.clone(), "x"),
            Err(Error::Protocol { .. })
        ));
        assert!(matches!(
            interpret(Task::Classify, 5, r, "x"),
            Err(Error::Protocol { .. })
        ));
        let hello = decode_response(r#"{"op":"hello","version":2,"labels":[]}"#).unwrap();
        assert!(check_hello(&hello, "").is_err());
    }

    struct Echo;
    impl Responder for Echo {
        fn labels(&self, _task: Task) -> Vec<String> {
            vec!["palm".into()]
        }
        fn respond(&self, request: &Request) -> Response {
            Response::Error {
                id: request.id().unwrap_or(0),
                message: "echo".into(),
            }
        }
    }

    #[test]
    fn serve_answers_each_line() {
        let input = "{\"op\":\"hello\",\"version\":1,\"task\":\"detect\"}\n\n{\"op\":\"detect\",\"id\":9,\"image\":\"x\"}\ngarbage\n";
        let mut out = Vec::new();
        serve(&Echo, input.as_bytes(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], r#"{"op":"hello","version":1,"labels":["palm"]}"#);
        assert_eq!(lines[1], r#"{"op":"error","id":9,"message":"echo"}"#);
        assert!(lines[2].starts_with(r#"{"op":"error","id":0"#));
    }
}
