//! JSON-lines bridge that lets an external process act as the model.
//!
//! One request per line on the child's stdin, one response per line on its
//! stdout. Requests carry an `"op"` tag:
//!
//! ```text
//! {"op":"capabilities"}
//! {"op":"encode","features":[[f32; F]; T]}
//! {"op":"decode","states":[[f64; d]; n],"prefix":[u32],"max_new":u32}
//! {"op":"count_words","features":[[f32; F]; T]}
//! ```
//!
//! Responses are `{"ok": <payload>}` or `{"error": "<message>"}`. Decode
//! payloads list attention matrices layer-major (`layer * heads + head`),
//! each as rows over source frames.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Capabilities, DecodeResult, EncoderStates, ModelAdapter};
use crate::attn::{AttentionMatrix, AttentionTensor};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Capabilities,
    Encode { features: Vec<Vec<f32>> },
    Decode { states: Vec<Vec<f64>>, prefix: Vec<u32>, max_new: usize },
    CountWords { features: Vec<Vec<f32>> },
}

#[derive(Debug, Serialize, Deserialize)]
struct DecodePayload {
    tokens: Vec<u32>,
    eos_reached: bool,
    attention: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EncodePayload {
    states: Vec<Vec<f64>>,
}

fn rows_of<T: Copy>(m: ArrayView2<'_, T>) -> Vec<Vec<T>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn matrix_of<T: Copy + Default>(rows: &[Vec<T>], width_hint: usize) -> Result<Array2<T>> {
    let width = rows.first().map_or(width_hint, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::dim("ragged matrix on the wire"));
    }
    let flat: Vec<T> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| Error::dim(e.to_string()))
}

fn handle(adapter: &dyn ModelAdapter, req: Request) -> Result<Value> {
    let caps = adapter.capabilities();
    Ok(match req {
        Request::Capabilities => serde_json::to_value(caps)?,
        Request::Encode { features } => {
            let x = matrix_of(&features, caps.feature_dim)?;
            let enc = adapter.encode(x.view())?;
            serde_json::to_value(EncodePayload { states: rows_of(enc.states.view()) })?
        }
        Request::Decode { states, prefix, max_new } => {
            let enc = EncoderStates { states: matrix_of(&states, 0)?, version: 0 };
            let r = adapter.decode_greedy(&enc, &prefix, max_new)?;
            let attention = (0..r.attention.num_layers())
                .flat_map(|l| (0..r.attention.num_heads()).map(move |h| (l, h)))
                .map(|(l, h)| rows_of(r.attention.get(l, h).expect("complete grid").weights()))
                .collect();
            serde_json::to_value(DecodePayload {
                tokens: r.tokens,
                eos_reached: r.eos_reached,
                attention,
            })?
        }
        Request::CountWords { features } => {
            let x = matrix_of(&features, caps.feature_dim)?;
            Value::from(adapter.count_source_words(x.view())?)
        }
    })
}

/// Answers requests from `input` until end of stream.
pub fn serve<R: BufRead, W: Write>(adapter: &dyn ModelAdapter, input: R, mut output: W) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line)
            .map_err(Error::from)
            .and_then(|req| handle(adapter, req))
        {
            Ok(v) => serde_json::json!({ "ok": v }),
            Err(e) => serde_json::json!({ "error": e.to_string() }),
        };
        serde_json::to_writer(&mut output, &reply)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

struct Channel {
    reader: Box<dyn BufRead + Send>,
    writer: Option<Box<dyn Write + Send>>,
    child: Option<Child>,
}

impl Channel {
    fn call(&mut self, req: &Request) -> Result<Value> {
        let writer = self.writer.as_mut().ok_or_else(|| Error::Adapter("bridge closed".into()))?;
        let io_err = |e: std::io::Error| Error::Adapter(format!("bridge I/O: {e}"));
        serde_json::to_writer(&mut *writer, req)?;
        writer.write_all(b"\n").map_err(io_err)?;
        writer.flush().map_err(io_err)?;
        let mut line = String::new();
        if self.reader.read_line(&mut line).map_err(io_err)? == 0 {
            return Err(Error::Adapter("bridge closed its output".into()));
        }
        let mut reply: serde_json::Map<String, Value> = serde_json::from_str(&line)
            .map_err(|e| Error::Adapter(format!("unreadable bridge reply: {e}")))?;
        if let Some(ok) = reply.remove("ok") {
            Ok(ok)
        } else if let Some(Value::String(msg)) = reply.remove("error") {
            Err(Error::Adapter(msg))
        } else {
            Err(Error::Adapter("bridge reply has neither ok nor error".into()))
        }
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        // closing stdin ends the serve loop
        self.writer.take();
        if let Some(mut child) = self.child.take() {
            let _ = child.wait();
        }
    }
}

/// A model adapter backed by a bridge peer.
pub struct BridgeAdapter {
    channel: Mutex<Channel>,
    caps: Capabilities,
}

impl BridgeAdapter {
    /// Launches `program args...` and talks to it over stdin/stdout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Adapter(format!("cannot launch {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::with_channel(Channel {
            reader: Box::new(BufReader::new(stdout)),
            writer: Some(Box::new(stdin)),
            child: Some(child),
        })
    }

    pub fn from_streams(
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
    ) -> Result<Self> {
        Self::with_channel(Channel { reader: Box::new(reader), writer: Some(Box::new(writer)), child: None })
    }

    fn with_channel(mut channel: Channel) -> Result<Self> {
        let caps = serde_json::from_value(channel.call(&Request::Capabilities)?)?;
        Ok(Self { channel: Mutex::new(channel), caps })
    }

    fn call(&self, req: &Request) -> Result<Value> {
        self.channel
            .lock()
            .map_err(|_| Error::Adapter("bridge lock poisoned".into()))?
            .call(req)
    }
}

impl ModelAdapter for BridgeAdapter {
    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn encode(&self, features: ArrayView2<'_, f32>) -> Result<EncoderStates> {
        let v = self.call(&Request::Encode { features: rows_of(features) })?;
        let p: EncodePayload = serde_json::from_value(v)?;
        Ok(EncoderStates { states: matrix_of(&p.states, 0)?, version: 0 })
    }

    fn decode_greedy(&self, enc: &EncoderStates, prefix: &[u32], max_new: usize) -> Result<DecodeResult> {
        let v = self.call(&Request::Decode {
            states: rows_of(enc.states.view()),
            prefix: prefix.to_vec(),
            max_new,
        })?;
        let p: DecodePayload = serde_json::from_value(v)?;
        let n = enc.num_frames();
        let matrices = p
            .attention
            .iter()
            .map(|rows| matrix_of(rows, n).and_then(AttentionMatrix::new))
            .collect::<Result<Vec<_>>>()?;
        let attention = AttentionTensor::new(self.caps.num_layers, self.caps.num_heads, matrices)?;
        Ok(DecodeResult { tokens: p.tokens, attention, eos_reached: p.eos_reached })
    }

    fn count_source_words(&self, features: ArrayView2<'_, f32>) -> Result<usize> {
        let v = self.call(&Request::CountWords { features: rows_of(features) })?;
        Ok(serde_json::from_value(v)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToyModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn in_process_bridge(seed: u64) -> (BridgeAdapter, std::thread::JoinHandle<()>) {
        let (req_rx, req_tx) = std::io::pipe().unwrap();
        let (resp_rx, resp_tx) = std::io::pipe().unwrap();
        let server = std::thread::spawn(move || {
            let model = ToyModel::with_seed(seed);
            serve(&model, BufReader::new(req_rx), resp_tx).unwrap();
        });
        let client = BridgeAdapter::from_streams(BufReader::new(resp_rx), req_tx).unwrap();
        (client, server)
    }

    #[test]
    fn bridge_matches_direct_model() {
        let direct = ToyModel::with_seed(4);
        let (bridge, server) = in_process_bridge(4);
        assert_eq!(bridge.capabilities(), direct.capabilities());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_simple_fn((60, 80), || rng.gen_range(-1.0f32..1.0));
        let a = direct.encode(x.view()).unwrap();
        let b = bridge.encode(x.view()).unwrap();
        assert_eq!(a, b);
        let ra = direct.decode_greedy(&a, &[], 32).unwrap();
        let rb = bridge.decode_greedy(&b, &[], 32).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(
            direct.count_source_words(x.view()).unwrap(),
            bridge.count_source_words(x.view()).unwrap()
        );
        drop(bridge);
        server.join().unwrap();
    }

    #[test]
    fn bridge_surfaces_peer_errors() {
        let (bridge, server) = in_process_bridge(4);
        let enc = EncoderStates { states: Array2::zeros((2, 32)), version: 0 };
        let err = bridge.decode_greedy(&enc, &[0], 4).unwrap_err();
        assert!(matches!(err, Error::Adapter(msg) if msg.contains("end-of-sequence")));
        drop(bridge);
        server.join().unwrap();
    }

    #[test]
    fn request_wire_shape() {
        let s = serde_json::to_string(&Request::Decode { states: vec![], prefix: vec![1], max_new: 2 }).unwrap();
        assert_eq!(s, r#"{"op":"decode","states":[],"prefix":[1],"max_new":2}"#);
        assert_eq!(serde_json::to_string(&Request::Capabilities).unwrap(), r#"{"op":"capabilities"}"#);
    }
}
