use serde::{Deserialize, Serialize};

use crate::cluster::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the system reports. Each variant has a stable wire code
/// (see [`Error::code`]) shared by the REST API, the bus protocol and the CLI.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0} is gone")]
    Gone(String),
    #[error("name must not be empty")]
    EmptyName,
    #[error("enabled plugin `{0}` has no section")]
    UnknownPluginSection(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("passphrase rejected")]
    BadPassphrase,
    #[error("encrypted contexts cannot be published")]
    EncryptedNotPublishable,
    #[error("context is already published")]
    AlreadyPublished,
    #[error("encrypted contexts cannot be paired")]
    EncryptedNotPairable,
    #[error("no pairing session for this pin")]
    PinNotFound,
    #[error("pairing pin expired")]
    PinExpired,
    #[error("pairing pin already claimed")]
    PinAlreadyClaimed,
    #[error("duplicate service name `{0}`")]
    DuplicateName(String),
    #[error("invalid cluster definition: {}", describe_violations(.0))]
    InvalidDefinition(Vec<Violation>),
    #[error("lease lost on request {0}")]
    LeaseLost(String),
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: String, to: String },
    #[error("bus name `{0}` is already connected")]
    NameTaken(String),
    #[error("`{0}` is unreachable")]
    Unreachable(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("authentication failed")]
    Unauthenticated,
    #[error("forbidden")]
    Forbidden,
    #[error("service `{0}` is not scalable")]
    NotScalable(String),
    #[error("bad scale target: {0}")]
    BadTarget(String),
    #[error("insufficient capacity: {0}")]
    InsufficientCapacity(String),
    #[error("no cloud agent answered capacity discovery")]
    NoClouds,
    #[error("access denied by cloud ACL")]
    AclDenied,
    #[error("quota exceeded: {0}")]
    QuotaExceeded(String),
    #[error("unsupported on this cloud: {0}")]
    Unsupported(String),
    #[error("driver failure: {0}")]
    DriverFailure(String),
    #[error("unknown driver reference `{0}`")]
    UnknownRef(String),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("internal error: {0}")]
    Internal(String),
}

fn describe_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::NotFound(_) => "NOT_FOUND",
            Error::Gone(_) => "GONE",
            Error::EmptyName => "EMPTY_NAME",
            Error::UnknownPluginSection(_) => "UNKNOWN_PLUGIN_SECTION",
            Error::InvalidValue(_) => "INVALID_VALUE",
            Error::BadPassphrase => "BAD_PASSPHRASE",
            Error::EncryptedNotPublishable => "ENCRYPTED_NOT_PUBLISHABLE",
            Error::AlreadyPublished => "ALREADY_PUBLISHED",
            Error::EncryptedNotPairable => "ENCRYPTED_NOT_PAIRABLE",
            Error::PinNotFound => "PIN_NOT_FOUND",
            Error::PinExpired => "PIN_EXPIRED",
            Error::PinAlreadyClaimed => "PIN_ALREADY_CLAIMED",
            Error::DuplicateName(_) => "DUPLICATE_NAME",
            Error::InvalidDefinition(_) => "INVALID_DEFINITION",
            Error::LeaseLost(_) => "LEASE_LOST",
            Error::IllegalTransition { .. } => "ILLEGAL_TRANSITION",
            Error::NameTaken(_) => "NAME_TAKEN",
            Error::Unreachable(_) => "UNREACHABLE",
            Error::Timeout(_) => "TIMEOUT",
            Error::Unauthenticated => "UNAUTHENTICATED",
            Error::Forbidden => "FORBIDDEN",
            Error::NotScalable(_) => "NOT_SCALABLE",
            Error::BadTarget(_) => "BAD_TARGET",
            Error::InsufficientCapacity(_) => "INSUFFICIENT_CAPACITY",
            Error::NoClouds => "NO_CLOUDS",
            Error::AclDenied => "ACL_DENIED",
            Error::QuotaExceeded(_) => "QUOTA_EXCEEDED",
            Error::Unsupported(_) => "UNSUPPORTED",
            Error::DriverFailure(_) => "DRIVER_FAILURE",
            Error::UnknownRef(_) => "UNKNOWN_REF",
            Error::ProtocolError(_) => "PROTOCOL_ERROR",
            Error::BadRequest(_) => "BAD_REQUEST",
            Error::Conflict(_) => "CONFLICT",
            Error::Storage(_) => "STORAGE",
            Error::Internal(_) => "INTERNAL",
        }
    }

    /// Errors a cloud agent raises when refusing admission.
    pub fn is_cloud_rejection(&self) -> bool {
        matches!(
            self,
            Error::AclDenied | Error::QuotaExceeded(_) | Error::Unsupported(_)
        )
    }

    /// Transport-level failures worth retrying later.
    pub fn is_transient(&self) -> bool {
        matches!(self, Error::Timeout(_) | Error::Unreachable(_))
    }

    pub fn to_body(&self) -> ErrorBody {
        let violations = match self {
            Error::InvalidDefinition(v) => v.clone(),
            _ => Vec::new(),
        };
        ErrorBody {
            code: self.code().to_owned(),
            message: self.to_string(),
            detail: self.detail(),
            violations,
        }
    }

    fn detail(&self) -> Option<String> {
        match self {
            Error::NotFound(s)
            | Error::Gone(s)
            | Error::UnknownPluginSection(s)
            | Error::InvalidValue(s)
            | Error::DuplicateName(s)
            | Error::LeaseLost(s)
            | Error::NameTaken(s)
            | Error::Unreachable(s)
            | Error::Timeout(s)
            | Error::NotScalable(s)
            | Error::BadTarget(s)
            | Error::InsufficientCapacity(s)
            | Error::QuotaExceeded(s)
            | Error::Unsupported(s)
            | Error::DriverFailure(s)
            | Error::UnknownRef(s)
            | Error::ProtocolError(s)
            | Error::BadRequest(s)
            | Error::Conflict(s)
            | Error::Storage(s)
            | Error::Internal(s) => Some(s.clone()),
            Error::IllegalTransition { from, to } => Some(format!("{from} {to}")),
            _ => None,
        }
    }

    /// Rebuilds an error from its wire form. Unknown codes become `Internal`.
    pub fn from_body(body: &ErrorBody) -> Error {
        let msg = body.detail.clone().unwrap_or_else(|| body.message.clone());
        match body.code.as_str() {
            "NOT_FOUND" => Error::NotFound(msg),
            "GONE" => Error::Gone(msg),
            "EMPTY_NAME" => Error::EmptyName,
            "UNKNOWN_PLUGIN_SECTION" => Error::UnknownPluginSection(msg),
            "INVALID_VALUE" => Error::InvalidValue(msg),
            "BAD_PASSPHRASE" => Error::BadPassphrase,
            "ENCRYPTED_NOT_PUBLISHABLE" => Error::EncryptedNotPublishable,
            "ALREADY_PUBLISHED" => Error::AlreadyPublished,
            "ENCRYPTED_NOT_PAIRABLE" => Error::EncryptedNotPairable,
            "PIN_NOT_FOUND" => Error::PinNotFound,
            "PIN_EXPIRED" => Error::PinExpired,
            "PIN_ALREADY_CLAIMED" => Error::PinAlreadyClaimed,
            "DUPLICATE_NAME" => Error::DuplicateName(msg),
            "INVALID_DEFINITION" => Error::InvalidDefinition(body.violations.clone()),
            "LEASE_LOST" => Error::LeaseLost(msg),
            "ILLEGAL_TRANSITION" => {
                let (from, to) = msg.split_once(' ').unwrap_or((msg.as_str(), ""));
                Error::IllegalTransition {
                    from: from.to_owned(),
                    to: to.to_owned(),
                }
            }
            "NAME_TAKEN" => Error::NameTaken(msg),
            "UNREACHABLE" => Error::Unreachable(msg),
            "TIMEOUT" => Error::Timeout(msg),
            "UNAUTHENTICATED" => Error::Unauthenticated,
            "FORBIDDEN" => Error::Forbidden,
            "NOT_SCALABLE" => Error::NotScalable(msg),
            "BAD_TARGET" => Error::BadTarget(msg),
            "INSUFFICIENT_CAPACITY" => Error::InsufficientCapacity(msg),
            "NO_CLOUDS" => Error::NoClouds,
            "ACL_DENIED" => Error::AclDenied,
            "QUOTA_EXCEEDED" => Error::QuotaExceeded(msg),
            "UNSUPPORTED" => Error::Unsupported(msg),
            "DRIVER_FAILURE" => Error::DriverFailure(msg),
            "UNKNOWN_REF" => Error::UnknownRef(msg),
            "PROTOCOL_ERROR" => Error::ProtocolError(msg),
            "BAD_REQUEST" => Error::BadRequest(msg),
            "CONFLICT" => Error::Conflict(msg),
            "STORAGE" => Error::Storage(msg),
            _ => Error::Internal(format!("{}: {}", body.code, msg)),
        }
    }
}

/// Wire representation of an [`Error`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    /// The variant's argument, when it has one, so the error rebuilds exactly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
}

impl ErrorBody {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_owned(),
            message: message.into(),
            ..Self::default()
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::BadRequest(err.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_survive_the_wire() {
        let samples = [
            Error::NotFound("context x".into()),
            Error::BadPassphrase,
            Error::PinAlreadyClaimed,
            Error::QuotaExceeded("max_instances".into()),
            Error::Unreachable("cloud-A".into()),
            Error::InvalidDefinition(vec![Violation::BadCount {
                service: "head".into(),
            }]),
        ];
        for err in samples {
            assert_eq!(Error::from_body(&err.to_body()), err);
        }
        let t = Error::IllegalTransition {
            from: "RUNNING".into(),
            to: "STARTING".into(),
        };
        assert_eq!(Error::from_body(&t.to_body()), t);
    }

    #[test]
    fn unknown_code_maps_to_internal() {
        let body = ErrorBody::new("WAT", "?");
        assert_eq!(Error::from_body(&body).code(), "INTERNAL");
    }
}
