//! Async client for the partgen HTTP service.

use std::collections::BTreeMap;

use partgen_core::pipeline::PartConstraint;
use partgen_core::wire::{
    CreateSessionRequest, CreateSessionResponse, ErrorBody, GenerateRequest, InterpolateRequest, MetaResponse, MixRequest, ResampleRequest,
    TransformRequest, TransformResponse, WireCloud,
};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server answered {status}: {message}")]
    Api { status: StatusCode, message: String },
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            Self::Api { status, .. } => Some(*status),
            Self::Http(e) => e.status(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self { base: base.into().trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    async fn finish<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|e| e.error).unwrap_or(text);
        Err(ClientError::Api { status, message })
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        Self::finish(self.http.post(format!("{}{path}", self.base)).json(body).send().await?).await
    }

    pub async fn meta(&self) -> Result<MetaResponse> {
        Self::finish(self.http.get(format!("{}/meta", self.base)).send().await?).await
    }

    pub async fn create_session(&self, cloud: WireCloud) -> Result<CreateSessionResponse> {
        self.post("/sessions", &CreateSessionRequest { cloud }).await
    }

    pub async fn resample(&self, session: &str, parts: Vec<usize>, seed: u64) -> Result<WireCloud> {
        self.post(&format!("/sessions/{session}/resample"), &ResampleRequest { parts, seed }).await
    }

    pub async fn mix(&self, session: &str, donor_session_ids: Vec<String>, assignment: BTreeMap<usize, String>, seed: u64) -> Result<WireCloud> {
        self.post(&format!("/sessions/{session}/mix"), &MixRequest { donor_session_ids, assignment, seed }).await
    }

    pub async fn interpolate(&self, session: &str, part: usize, target_session: &str, steps: usize, seed: u64) -> Result<Vec<WireCloud>> {
        let req = InterpolateRequest { part, target_session: target_session.to_string(), steps, seed };
        self.post(&format!("/sessions/{session}/interpolate"), &req).await
    }

    pub async fn transform(&self, session: &str, constraints: BTreeMap<usize, PartConstraint>, seed: u64, max_iters: Option<usize>) -> Result<TransformResponse> {
        self.post(&format!("/sessions/{session}/transform"), &TransformRequest { constraints, seed, max_iters }).await
    }

    pub async fn generate(&self, n: usize, seed: u64, points: Option<usize>) -> Result<Vec<WireCloud>> {
        self.post("/generate", &GenerateRequest { n, seed, points }).await
    }
}
