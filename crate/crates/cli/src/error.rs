use std::fmt;

use serde_json::Value;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_AUTH: i32 = 3;
pub const EXIT_NOT_FOUND: i32 = 4;
pub const EXIT_CONFLICT: i32 = 5;
pub const EXIT_CAPACITY: i32 = 6;
pub const EXIT_TIMEOUT: i32 = 7;

/// Exit status for a server error code.
pub fn exit_code_for(code: &str) -> i32 {
    match code {
        "UNAUTHENTICATED" | "FORBIDDEN" | "BAD_PASSPHRASE" => EXIT_AUTH,
        "NOT_FOUND" | "GONE" | "PIN_NOT_FOUND" => EXIT_NOT_FOUND,
        "CONFLICT" | "ILLEGAL_TRANSITION" | "ALREADY_PUBLISHED" | "PIN_ALREADY_CLAIMED" | "PIN_EXPIRED"
        | "LEASE_LOST" | "NAME_TAKEN" => EXIT_CONFLICT,
        "INSUFFICIENT_CAPACITY" | "NO_CLOUDS" | "QUOTA_EXCEEDED" | "ACL_DENIED" | "UNSUPPORTED" => EXIT_CAPACITY,
        "TIMEOUT" => EXIT_TIMEOUT,
        "EMPTY_NAME" | "UNKNOWN_PLUGIN_SECTION" | "INVALID_VALUE" | "ENCRYPTED_NOT_PUBLISHABLE"
        | "ENCRYPTED_NOT_PAIRABLE" | "DUPLICATE_NAME" | "INVALID_DEFINITION" | "NOT_SCALABLE" | "BAD_TARGET"
        | "BAD_REQUEST" | "USAGE" => EXIT_USAGE,
        _ => EXIT_OTHER,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: String,
    pub message: String,
    /// The server's error body, when there was one.
    pub body: Option<Value>,
}

impl CliError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_owned(),
            message: message.into(),
            body: None,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("USAGE", message)
    }

    /// From an API error body `{code, message, ...}`.
    pub fn from_body(status: u16, body: Value) -> Self {
        let code = body["code"].as_str().map(str::to_owned);
        let message = body["message"].as_str().map(str::to_owned);
        Self {
            code: code.unwrap_or_else(|| format!("HTTP_{status}")),
            message: message.unwrap_or_else(|| format!("server answered HTTP {status}")),
            body: Some(body),
        }
    }

    pub fn exit_code(&self) -> i32 {
        exit_code_for(&self.code)
    }

    pub fn to_json(&self) -> Value {
        match &self.body {
            Some(b) if b.is_object() => b.clone(),
            _ => serde_json::json!({ "code": self.code, "message": self.message }),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_map_to_documented_exit_codes() {
        let cases = [
            ("UNAUTHENTICATED", 3),
            ("NOT_FOUND", 4),
            ("GONE", 4),
            ("ILLEGAL_TRANSITION", 5),
            ("CONFLICT", 5),
            ("INSUFFICIENT_CAPACITY", 6),
            ("QUOTA_EXCEEDED", 6),
            ("TIMEOUT", 7),
            ("NOT_SCALABLE", 2),
            ("INTERNAL", 1),
            ("SOMETHING_NEW", 1),
        ];
        for (code, exit) in cases {
            assert_eq!(exit_code_for(code), exit, "{code}");
        }
    }

    #[test]
    fn body_without_code_still_reports_status() {
        let e = CliError::from_body(502, Value::Null);
        assert_eq!(e.code, "HTTP_502");
        assert_eq!(e.to_json()["code"], "HTTP_502");
    }
}
