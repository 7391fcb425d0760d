//! Errors raised by the command layer and their one-line JSON rendering.

use std::fmt;

use serde_json::json;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Failure {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Failure::new("usage", message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Failure::new("config", message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Failure::new("io", message)
    }

    pub fn parse(message: impl Into<String>) -> Self {
        Failure::new("parse", message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

/// Kind of the innermost recognized error in the chain.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if let Some(e) = cause.downcast_ref::<automlm_core::Error>() {
            return e.kind();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

/// `{"error": kind, "message": ...}` on a single line.
pub fn error_line(err: &anyhow::Error) -> String {
    let message = format!("{err:#}").replace('\n', " ");
    json!({ "error": error_kind(err), "message": message }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn renders_one_line_with_kind() {
        let err = anyhow::Error::new(automlm_core::Error::UnknownGoldId("k9".into())).context("loading\ntestset");
        let line = error_line(&err);
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "unknown_gold_id");
        assert!(v["message"].as_str().unwrap().contains("k9"));

        let err: anyhow::Result<()> = Err(Failure::usage("bad flag").into());
        assert_eq!(error_kind(&err.context("x").unwrap_err()), "usage");
    }
}
