//! HTTP client for an external query parser.
//!
//! The request body is the serialized `ProviderRequest`: query text, the
//! current time, the timezone and the query schema. Nothing else leaves
//! the machine.

use std::time::Duration;

use recall_core::retrieval::{ProviderError, ProviderRequest, QueryProvider};

pub struct HttpProvider {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpProvider { endpoint: endpoint.to_string(), agent }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

fn classify(e: ureq::Error) -> ProviderError {
    match e {
        ureq::Error::Timeout(_) => ProviderError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => ProviderError::Timeout,
        ureq::Error::StatusCode(code) => ProviderError::Status(code),
        other => ProviderError::Transport(other.to_string()),
    }
}

impl QueryProvider for HttpProvider {
    fn parse(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        let mut resp = self.agent.post(&self.endpoint).send_json(request).map_err(classify)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(ProviderError::Status(status));
        }
        resp.body_mut().read_to_string().map_err(classify)
    }
}
