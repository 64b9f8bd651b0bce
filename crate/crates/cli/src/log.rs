//! JSON-lines progress log on stderr.

use std::io::Write;
use std::time::Instant;

use serde_json::{json, Map, Value};

#[derive(Debug, Clone)]
pub struct Logger {
    start: Instant,
    enabled: bool,
}

impl Logger {
    pub fn new(enabled: bool) -> Self {
        Self {
            start: Instant::now(),
            enabled,
        }
    }

    pub fn silent() -> Self {
        Self::new(false)
    }

    /// Emits `{"t_ms": .., "stage": .., "event": .., ...fields}`.
    pub fn event(&self, stage: &str, event: &str, fields: Value) {
        if !self.enabled {
            return;
        }
        let mut line = Map::new();
        line.insert("t_ms".into(), json!(self.start.elapsed().as_secs_f64() * 1e3));
        line.insert("stage".into(), json!(stage));
        line.insert("event".into(), json!(event));
        if let Value::Object(extra) = fields {
            line.extend(extra);
        }
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "{}", Value::Object(line));
    }

    /// Runs `f` and logs its wall time under `stage`.
    pub fn timed<T>(&self, stage: &str, fields: Value, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        let mut fields = match fields {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        fields.insert("elapsed_ms".into(), json!(t.elapsed().as_secs_f64() * 1e3));
        self.event(stage, "done", Value::Object(fields));
        out
    }
}
