//! Client side of the detector bridge protocol.
//!
//! One JSON object per line in each direction, strictly request/response:
//!
//! ```text
//! -> {"cmd":"train","round":r,"labels":[{"box_id":i,"label":0|1},...],"config":{...}}
//! <- {"ok":true,"version":v}
//! -> {"cmd":"rescore","split":"train"|"val"}
//! <- {"ok":true,"boxes":[{"image_id":s,"bbox":[x1,y1,x2,y2],"confidence":c},...]}
//! <- {"ok":false,"error":"message"}
//! ```
//!
//! The bridge process gets the train and validation dump paths as its last
//! two command-line arguments.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::boxgeom::{BBox, DetectionSet, ScoredBox};
use crate::error::{Error, Result};

use super::{ModelVersion, OracleConfig, Reprediction, ScorerOracle, TrainingBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireLabel {
    pub box_id: u64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase", deny_unknown_fields)]
pub enum Request {
    Train {
        round: usize,
        labels: Vec<WireLabel>,
        config: OracleConfig,
    },
    Rescore {
        split: String,
    },
}

impl Request {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("requests serialize")
    }

    pub fn parse(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::BridgeProtocol(e.to_string()))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireBox {
    image_id: String,
    bbox: [f64; 4],
    confidence: f64,
}

fn reply_object(line: &str) -> Result<serde_json::Map<String, Value>> {
    let value: Value = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::BridgeProtocol(format!("unparseable reply: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(Error::BridgeProtocol("reply is not a JSON object".into()));
    };
    match obj.remove("ok") {
        Some(Value::Bool(true)) => Ok(obj),
        Some(Value::Bool(false)) => {
            let msg = match obj.get("error") {
                Some(Value::String(s)) => s.clone(),
                _ => "bridge reported failure without a message".into(),
            };
            Err(Error::BridgeProtocol(format!("bridge error: {msg}")))
        }
        _ => Err(Error::BridgeProtocol("reply lacks boolean \"ok\"".into())),
    }
}

/// Parses a reply to `train`.
pub fn parse_train_reply(line: &str) -> Result<ModelVersion> {
    let obj = reply_object(line)?;
    match obj.get("version").and_then(Value::as_u64) {
        Some(v) if obj.len() == 1 => Ok(ModelVersion(v)),
        Some(_) => Err(Error::BridgeProtocol("unexpected fields in train reply".into())),
        None => Err(Error::BridgeProtocol(
            "train reply lacks a non-negative integer \"version\"".into(),
        )),
    }
}

/// Parses a reply to `rescore`, validating every box.
pub fn parse_rescore_reply(line: &str) -> Result<Vec<ScoredBox>> {
    let mut obj = reply_object(line)?;
    let boxes = obj
        .remove("boxes")
        .ok_or_else(|| Error::BridgeProtocol("rescore reply lacks \"boxes\"".into()))?;
    if !obj.is_empty() {
        return Err(Error::BridgeProtocol("unexpected fields in rescore reply".into()));
    }
    let wire: Vec<WireBox> = serde_json::from_value(boxes)
        .map_err(|e| Error::BridgeProtocol(format!("bad box list: {e}")))?;
    wire.into_iter()
        .enumerate()
        .map(|(i, w)| {
            if !(0.0..=1.0).contains(&w.confidence) {
                return Err(Error::BridgeProtocol(format!(
                    "box {i}: confidence {} outside [0, 1]",
                    w.confidence
                )));
            }
            let bbox = BBox::try_from(w.bbox)
                .map_err(|e| Error::BridgeProtocol(format!("box {i}: {e}")))?;
            Ok(ScoredBox {
                image_id: w.image_id,
                bbox,
                confidence: w.confidence,
            })
        })
        .collect()
}

pub struct BridgeScorer<R, W> {
    reader: R,
    writer: W,
    child: Option<Child>,
    version: ModelVersion,
}

pub type SpawnedBridge = BridgeScorer<BufReader<ChildStdout>, ChildStdin>;

impl SpawnedBridge {
    /// Starts `program args... train_dump val_dump` with piped stdio.
    pub fn spawn(program: &str, args: &[String], train_dump: &Path, val_dump: &Path) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .arg(train_dump)
            .arg(val_dump)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::BridgeProtocol(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut bridge = BridgeScorer::from_streams(BufReader::new(stdout), stdin);
        bridge.child = Some(child);
        Ok(bridge)
    }
}

impl<R, W> Drop for BridgeScorer<R, W> {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl<R: BufRead, W: Write> BridgeScorer<R, W> {
    pub fn from_streams(reader: R, writer: W) -> Self {
        BridgeScorer {
            reader,
            writer,
            child: None,
            version: ModelVersion::SOURCE,
        }
    }

    fn round_trip(&mut self, request: &Request) -> Result<String> {
        let io_err = |e: std::io::Error| Error::BridgeProtocol(format!("i/o failure: {e}"));
        let mut line = request.to_line();
        line.push('\n');
        self.writer.write_all(line.as_bytes()).map_err(io_err)?;
        self.writer.flush().map_err(io_err)?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply).map_err(io_err)? == 0 {
            return Err(Error::BridgeProtocol("bridge closed its output".into()));
        }
        Ok(reply)
    }
}

impl<R: BufRead, W: Write> ScorerOracle for BridgeScorer<R, W> {
    fn train(
        &mut self,
        round: usize,
        batch: &TrainingBatch,
        config: &OracleConfig,
    ) -> Result<ModelVersion> {
        let request = Request::Train {
            round,
            labels: batch
                .examples
                .iter()
                .map(|e| WireLabel {
                    box_id: e.box_id,
                    label: u8::from(e.positive),
                })
                .collect(),
            config: config.clone(),
        };
        let reply = self.round_trip(&request)?;
        self.version = parse_train_reply(&reply)?;
        Ok(self.version)
    }

    fn rescore(&mut self, set: &DetectionSet) -> Result<Reprediction> {
        let request = Request::Rescore {
            split: set.role().split_name().to_string(),
        };
        let reply = self.round_trip(&request)?;
        Ok(Reprediction {
            boxes: parse_rescore_reply(&reply)?,
        })
    }

    fn version(&self) -> ModelVersion {
        self.version
    }
}
