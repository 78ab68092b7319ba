//! The REST endpoints the CLI calls, and a blocking client for them.

use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder};
use reqwest::{Method, Url};
use serde_json::Value;

use crate::config::Credential;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    ContextCreate,
    ContextGet,
    ContextClone,
    ContextRender,
    ContextPublish,
    Marketplace,
    PairingOpen,
    PairingClaim,
    Machines,
    DefinitionCreate,
    DefinitionGet,
    ClusterCreate,
    ClusterList,
    ClusterGet,
    ClusterScale,
    ClusterDestroy,
    InstancePause,
    InstanceResume,
    InstanceDestroy,
    CredentialCreate,
    CredentialRevoke,
    RequestGet,
}

impl Endpoint {
    pub const ALL: [Endpoint; 22] = [
        Endpoint::ContextCreate,
        Endpoint::ContextGet,
        Endpoint::ContextClone,
        Endpoint::ContextRender,
        Endpoint::ContextPublish,
        Endpoint::Marketplace,
        Endpoint::PairingOpen,
        Endpoint::PairingClaim,
        Endpoint::Machines,
        Endpoint::DefinitionCreate,
        Endpoint::DefinitionGet,
        Endpoint::ClusterCreate,
        Endpoint::ClusterList,
        Endpoint::ClusterGet,
        Endpoint::ClusterScale,
        Endpoint::ClusterDestroy,
        Endpoint::InstancePause,
        Endpoint::InstanceResume,
        Endpoint::InstanceDestroy,
        Endpoint::CredentialCreate,
        Endpoint::CredentialRevoke,
        Endpoint::RequestGet,
    ];

    /// (method, path template) as the server declares it.
    pub fn route(self) -> (&'static str, &'static str) {
        match self {
            Endpoint::ContextCreate => ("POST", "/api/v1/contexts"),
            Endpoint::ContextGet => ("GET", "/api/v1/contexts/{id}"),
            Endpoint::ContextClone => ("POST", "/api/v1/contexts/{id}/clone"),
            Endpoint::ContextRender => ("GET", "/api/v1/contexts/{id}/render"),
            Endpoint::ContextPublish => ("POST", "/api/v1/contexts/{id}/publish"),
            Endpoint::Marketplace => ("GET", "/api/v1/marketplace"),
            Endpoint::PairingOpen => ("POST", "/api/v1/pairings"),
            Endpoint::PairingClaim => ("POST", "/api/v1/pairings/{pin}/claim"),
            Endpoint::Machines => ("GET", "/api/v1/machines"),
            Endpoint::DefinitionCreate => ("POST", "/api/v1/definitions"),
            Endpoint::DefinitionGet => ("GET", "/api/v1/definitions/{id}"),
            Endpoint::ClusterCreate => ("POST", "/api/v1/clusters"),
            Endpoint::ClusterList => ("GET", "/api/v1/clusters"),
            Endpoint::ClusterGet => ("GET", "/api/v1/clusters/{id}"),
            Endpoint::ClusterScale => ("POST", "/api/v1/clusters/{id}/services/{name}/scale"),
            Endpoint::ClusterDestroy => ("DELETE", "/api/v1/clusters/{id}"),
            Endpoint::InstancePause => ("POST", "/api/v1/instances/{id}/pause"),
            Endpoint::InstanceResume => ("POST", "/api/v1/instances/{id}/resume"),
            Endpoint::InstanceDestroy => ("POST", "/api/v1/instances/{id}/destroy"),
            Endpoint::CredentialCreate => ("POST", "/api/v1/credentials"),
            Endpoint::CredentialRevoke => ("DELETE", "/api/v1/credentials/{id}"),
            Endpoint::RequestGet => ("GET", "/api/v1/requests/{id}"),
        }
    }

    pub fn authenticated(self) -> bool {
        self != Endpoint::PairingClaim
    }
}

/// What goes in the request body.
pub enum Body {
    None,
    Json(Value),
    Text(String),
}

/// What the server answered.
#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Json(Value),
    Text(String),
}

impl Reply {
    pub fn json(self) -> Value {
        match self {
            Reply::Json(v) => v,
            Reply::Text(t) => Value::String(t),
        }
    }

    pub fn text(self) -> String {
        match self {
            Reply::Text(t) => t,
            Reply::Json(v) => v.to_string(),
        }
    }
}

#[derive(Default)]
pub struct CallOptions<'a> {
    pub query: &'a [(&'a str, String)],
    pub idempotency_key: Option<&'a str>,
    pub passphrase: Option<&'a str>,
}

pub struct ApiClient {
    base: Url,
    credential: Option<Credential>,
    http: Client,
}

fn network(e: reqwest::Error) -> CliError {
    if e.is_timeout() {
        CliError::new("TIMEOUT", "the server did not answer in time")
    } else {
        // Only the URL is ever part of a reqwest error; it carries no secret.
        CliError::new("UNREACHABLE", e.to_string())
    }
}

impl ApiClient {
    pub fn new(server: &str, credential: Option<Credential>) -> Result<Self, CliError> {
        let base = Url::parse(server).map_err(|e| CliError::usage(format!("server URL {server:?}: {e}")))?;
        if base.cannot_be_a_base() {
            return Err(CliError::usage(format!("server URL {server:?} cannot be a base")));
        }
        let http = Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(network)?;
        Ok(Self { base, credential, http })
    }

    /// Fills the template's placeholders, in order, with `params`.
    pub fn url(&self, endpoint: Endpoint, params: &[&str]) -> Result<Url, CliError> {
        let (_, template) = endpoint.route();
        let mut url = self.base.clone();
        let mut params = params.iter();
        {
            let mut segs = url
                .path_segments_mut()
                .map_err(|_| CliError::usage("server URL cannot be a base"))?;
            segs.pop_if_empty();
            for seg in template.trim_start_matches('/').split('/') {
                if seg.starts_with('{') {
                    let value = params
                        .next()
                        .ok_or_else(|| CliError::new("INTERNAL", format!("missing parameter for {template}")))?;
                    segs.push(value);
                } else {
                    segs.push(seg);
                }
            }
        }
        if params.next().is_some() {
            return Err(CliError::new("INTERNAL", format!("too many parameters for {template}")));
        }
        Ok(url)
    }

    fn request(&self, endpoint: Endpoint, params: &[&str], opts: &CallOptions) -> Result<RequestBuilder, CliError> {
        let (method, _) = endpoint.route();
        let method = Method::from_bytes(method.as_bytes()).map_err(|e| CliError::new("INTERNAL", e.to_string()))?;
        let mut url = self.url(endpoint, params)?;
        if !opts.query.is_empty() {
            let mut q = url.query_pairs_mut();
            for (k, v) in opts.query {
                q.append_pair(k, v);
            }
        }
        let mut b = self.http.request(method, url);
        if endpoint.authenticated() {
            let cred = self.credential.as_ref().ok_or_else(|| {
                CliError::usage("no credential configured (--credential or CVMG_CREDENTIAL)")
            })?;
            b = b.header("Authorization", cred.authorization());
        }
        if let Some(k) = opts.idempotency_key {
            b = b.header("Idempotency-Key", k);
        }
        if let Some(p) = opts.passphrase {
            b = b.header("X-CVMG-Passphrase", p);
        }
        Ok(b)
    }

    pub fn call(&self, endpoint: Endpoint, params: &[&str], body: Body, opts: &CallOptions) -> Result<Reply, CliError> {
        let mut b = self.request(endpoint, params, opts)?;
        b = match body {
            Body::None => b,
            Body::Json(v) => b.json(&v),
            Body::Text(t) => b.header("Content-Type", "text/plain; charset=utf-8").body(t),
        };
        let res = b.send().map_err(network)?;
        let status = res.status();
        let is_json = res
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.starts_with("application/json"));
        let text = res.text().map_err(network)?;
        let reply = if is_json {
            Reply::Json(
                serde_json::from_str(&text)
                    .map_err(|e| CliError::new("PROTOCOL_ERROR", format!("unparseable reply: {e}")))?,
            )
        } else {
            Reply::Text(text)
        };
        if status.is_success() {
            Ok(reply)
        } else {
            Err(CliError::from_body(status.as_u16(), reply.json()))
        }
    }

    pub fn get(&self, endpoint: Endpoint, params: &[&str]) -> Result<Value, CliError> {
        self.call(endpoint, params, Body::None, &CallOptions::default()).map(Reply::json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn urls_are_built_from_templates() {
        let c = ApiClient::new("http://h:1/base/", None).unwrap();
        let u = c.url(Endpoint::ClusterScale, &["c1", "my worker"]).unwrap();
        assert_eq!(u.as_str(), "http://h:1/base/api/v1/clusters/c1/services/my%20worker/scale");
        assert!(c.url(Endpoint::ClusterScale, &["c1"]).is_err());
        assert!(c.url(Endpoint::ClusterList, &["x"]).is_err());
        let u = c.url(Endpoint::InstancePause, &["a/b"]).unwrap();
        assert!(u.as_str().ends_with("/instances/a%2Fb/pause"));
    }

    #[test]
    fn unauthenticated_call_without_credential_is_refused_locally() {
        let c = ApiClient::new("http://127.0.0.1:9", None).unwrap();
        let err = c.get(Endpoint::ClusterList, &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_server_url_is_usage() {
        assert_eq!(ApiClient::new("not a url", None).err().unwrap().exit_code(), 2);
    }
}
