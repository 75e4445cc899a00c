// SPDX-License-Identifier: Apache-2.0

//! Event trace: one JSON object per line.
//!
//! ```json
//! {"seq":3,"kind":"DmaVerdict","subject":"ae1","attrs":{"dst":"ae2","len":64,"verdict":"Granted"}}
//! ```
//!
//! Attribute maps serialize with sorted keys, so identical runs give
//! byte-identical traces. Secrets never appear; CDIs are reduced to
//! fingerprints before they get here.

use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Boot,
    Wakeup,
    Suspend,
    Kill,
    Trap,
    MailboxPut,
    MailboxGet,
    SeOp,
    DmaVerdict,
    AvailabilityUpdate,
    CloudVerify,
    Exit,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: EventKind,
    /// Enclave name or subsystem responsible for the event.
    pub subject: String,
    #[serde(default)]
    pub attrs: Map<String, Value>,
}

impl TraceEvent {
    pub fn attr(&self, key: &str) -> Option<&Value> {
        self.attrs.get(key)
    }

    pub fn attr_str(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).and_then(Value::as_str)
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace events always serialize")
    }
}

/// In-memory trace with an optional streaming sink.
#[derive(Default)]
pub struct TraceLog {
    events: Vec<TraceEvent>,
    sink: Option<Box<dyn Write>>,
    sink_error: Option<io::Error>,
}

impl fmt::Debug for TraceLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TraceLog").field("events", &self.events.len()).finish()
    }
}

impl Clone for TraceLog {
    /// Copies the events; the clone has no sink.
    fn clone(&self) -> Self {
        Self { events: self.events.clone(), sink: None, sink_error: None }
    }
}

impl TraceLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Streams every subsequent event to `sink` as it is recorded.
    pub fn set_sink(&mut self, sink: Box<dyn Write>) {
        self.sink = Some(sink);
    }

    pub fn emit(&mut self, kind: EventKind, subject: impl Into<String>, attrs: Value) -> &TraceEvent {
        let attrs = match attrs {
            Value::Object(map) => map,
            Value::Null => Map::new(),
            other => Map::from_iter([("value".to_string(), other)]),
        };
        let event = TraceEvent { seq: self.events.len() as u64, kind, subject: subject.into(), attrs };
        if let Some(sink) = self.sink.as_mut() {
            if self.sink_error.is_none() {
                if let Err(e) = writeln!(sink, "{}", event.to_line()) {
                    self.sink_error = Some(e);
                }
            }
        }
        self.events.push(event);
        self.events.last().expect("just pushed")
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn kinds(&self) -> Vec<EventKind> {
        self.events.iter().map(|e| e.kind).collect()
    }

    /// Flushes the sink and reports the first write error, if any.
    pub fn finish(&mut self) -> io::Result<()> {
        if let Some(e) = self.sink_error.take() {
            return Err(e);
        }
        match self.sink.as_mut() {
            Some(s) => s.flush(),
            None => Ok(()),
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.events.iter().map(|e| e.to_line() + "\n").collect()
    }
}

/// Reads a JSON-lines trace.
pub fn read_trace(reader: impl BufRead) -> Result<Vec<TraceEvent>, String> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| format!("line {}: {e}", n + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", n + 1))?);
    }
    Ok(out)
}
