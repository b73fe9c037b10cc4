use std::path::Path;

use vlmd::enrich::{FixtureClient, TextGenerator};
use vlmd::{Error, Result};

/// Text generator behind an HTTP endpoint. Each request is a JSON POST
/// `{"<field>": request}` answered with `{"text": "..."}`.
pub struct HttpClient {
    endpoint: String,
    field: &'static str,
    id: String,
}

impl HttpClient {
    pub fn new(endpoint: &str, field: &'static str) -> Self {
        Self { endpoint: endpoint.to_string(), field, id: format!("http:{endpoint}") }
    }
}

impl TextGenerator for HttpClient {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &str) -> Result<String> {
        let unavailable = |e: ureq::Error| Error::ClientUnavailable(format!("{}: {e}", self.endpoint));
        let body = serde_json::json!({ self.field: request });
        let mut resp = ureq::post(&self.endpoint).send_json(&body).map_err(unavailable)?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(unavailable)?;
        value
            .get("text")
            .and_then(|t| t.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::ClientUnavailable(format!("{}: response has no \"text\" field", self.endpoint)))
    }
}

/// Fixture mode wins over the endpoint when both are set.
pub fn open(fixture: Option<&Path>, endpoint: Option<&str>, field: &'static str) -> Result<Box<dyn TextGenerator>> {
    match (fixture, endpoint) {
        (Some(path), _) => Ok(Box::new(FixtureClient::load(path)?)),
        (None, Some(url)) => Ok(Box::new(HttpClient::new(url, field))),
        (None, None) => Err(Error::ClientUnavailable("set VLMD_LLM_ENDPOINT or VLMD_FIXTURE".into())),
    }
}
