//! Line-delimited JSON events on stderr.

use std::io::Write;

use egclmil::train::TrainEvent;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Off,
    Info,
    Debug,
}

#[derive(Debug, Clone, Copy)]
pub struct Logger {
    level: Level,
}

pub const LOG_ENV: &str = "EGCLMIL_LOG";

impl Logger {
    pub fn new(level: Level) -> Self {
        Self { level }
    }

    /// Reads `EGCLMIL_LOG` (`info` or `debug`, default `info`).
    pub fn from_env() -> Result<Self, CliError> {
        match std::env::var(LOG_ENV) {
            Err(_) => Ok(Self::new(Level::Info)),
            Ok(v) => match v.trim().to_ascii_lowercase().as_str() {
                "" | "info" => Ok(Self::new(Level::Info)),
                "debug" => Ok(Self::new(Level::Debug)),
                other => Err(CliError::Config(format!(
                    "{LOG_ENV} must be info or debug, got {other:?}"
                ))),
            },
        }
    }

    pub fn silent() -> Self {
        Self::new(Level::Off)
    }

    pub fn enabled(&self, level: Level) -> bool {
        level != Level::Off && level <= self.level
    }

    fn write(&self, level: Level, mut fields: Map<String, Value>) {
        if !self.enabled(level) {
            return;
        }
        let name = if level == Level::Debug { "debug" } else { "info" };
        let mut line = Map::new();
        line.insert("level".into(), Value::String(name.into()));
        line.append(&mut fields);
        let text = Value::Object(line).to_string();
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "{text}");
    }

    /// Logs `event` with the fields of `payload`, which must serialize to
    /// a JSON object.
    pub fn event<T: Serialize>(&self, level: Level, event: &str, payload: &T) {
        if !self.enabled(level) {
            return;
        }
        let mut fields = Map::new();
        fields.insert("event".into(), Value::String(event.into()));
        if let Ok(Value::Object(mut m)) = serde_json::to_value(payload) {
            fields.append(&mut m);
        }
        self.write(level, fields);
    }

    pub fn warn(&self, message: impl Into<String>) {
        let mut fields = Map::new();
        fields.insert("event".into(), Value::String("warning".into()));
        fields.insert("message".into(), Value::String(message.into()));
        self.write(Level::Info, fields);
    }

    /// Step events are debug-level; epoch and fold events are info.
    pub fn train_event(&self, ev: &TrainEvent) {
        let level = match ev {
            TrainEvent::Step { .. } => Level::Debug,
            _ => Level::Info,
        };
        if !self.enabled(level) {
            return;
        }
        if let Ok(Value::Object(m)) = serde_json::to_value(ev) {
            self.write(level, m);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels_nest() {
        let info = Logger::new(Level::Info);
        assert!(info.enabled(Level::Info));
        assert!(!info.enabled(Level::Debug));
        let debug = Logger::new(Level::Debug);
        assert!(debug.enabled(Level::Info) && debug.enabled(Level::Debug));
        let off = Logger::silent();
        assert!(!off.enabled(Level::Info) && !off.enabled(Level::Off));
    }
}
