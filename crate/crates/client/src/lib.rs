//! Thin client for the pairdet service: submit a job, poll until it ends.

use std::time::Duration;

use pairdet_core::api::{
    ApiError, EvaluateRequest, EvaluateResult, ExperimentRequest, ExperimentResult, GenerateRequest, GenerateResult,
    Health, JobCreated, JobState, JobStatus, TrainRequest, TrainResult,
};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {message}")]
    Server { status: u16, message: String },
    #[error("job {id} failed: {message}")]
    JobFailed { id: String, message: String },
    #[error("unexpected response: {0}")]
    Decode(String),
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
    poll: Duration,
}

impl Client {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base: base_url.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
            poll: Duration::from_millis(200),
        }
    }

    pub fn with_poll_interval(mut self, poll: Duration) -> Self {
        self.poll = poll;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        let body = resp.bytes().await?;
        if !status.is_success() {
            let message = serde_json::from_slice::<ApiError>(&body)
                .map(|e| e.error)
                .unwrap_or_else(|_| String::from_utf8_lossy(&body).into_owned());
            return Err(ClientError::Server {
                status: status.as_u16(),
                message,
            });
        }
        serde_json::from_slice(&body).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        Self::decode(self.http.get(format!("{}/health", self.base)).send().await?).await
    }

    pub async fn job(&self, id: &str) -> Result<JobStatus, ClientError> {
        Self::decode(self.http.get(format!("{}/jobs/{id}", self.base)).send().await?).await
    }

    pub async fn jobs(&self) -> Result<Vec<JobStatus>, ClientError> {
        Self::decode(self.http.get(format!("{}/jobs", self.base)).send().await?).await
    }

    /// Posts `body` to `route` and returns the job id.
    pub async fn submit(&self, route: &str, body: &impl Serialize) -> Result<String, ClientError> {
        let created: JobCreated =
            Self::decode(self.http.post(format!("{}/{route}", self.base)).json(body).send().await?).await?;
        Ok(created.id)
    }

    /// Polls until the job leaves the running state and decodes its result.
    pub async fn wait<T: DeserializeOwned>(&self, id: &str) -> Result<T, ClientError> {
        loop {
            let st = self.job(id).await?;
            match st.state {
                JobState::Running => tokio::time::sleep(self.poll).await,
                JobState::Failed => {
                    return Err(ClientError::JobFailed {
                        id: st.id,
                        message: st.error.unwrap_or_default(),
                    })
                }
                JobState::Succeeded => {
                    let v = st.result.ok_or_else(|| ClientError::Decode("finished job has no result".into()))?;
                    return serde_json::from_value(v).map_err(|e| ClientError::Decode(e.to_string()));
                }
            }
        }
    }

    pub async fn generate(&self, req: &GenerateRequest) -> Result<GenerateResult, ClientError> {
        let id = self.submit("generate", req).await?;
        self.wait(&id).await
    }

    pub async fn train(&self, req: &TrainRequest) -> Result<TrainResult, ClientError> {
        let id = self.submit("train", req).await?;
        self.wait(&id).await
    }

    pub async fn evaluate(&self, req: &EvaluateRequest) -> Result<EvaluateResult, ClientError> {
        let id = self.submit("evaluate", req).await?;
        self.wait(&id).await
    }

    pub async fn experiment(&self, req: &ExperimentRequest) -> Result<ExperimentResult, ClientError> {
        let id = self.submit("experiments", req).await?;
        self.wait(&id).await
    }
}
