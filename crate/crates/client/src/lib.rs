//! Thin async client for the counterfactual service.

use latentcf_api::{
    ApiError, CounterfactualRequest, CounterfactualResponse, FrameDetail, FramePage, ModelInfo, PathStep,
};
use serde::de::DeserializeOwned;
use url::Url;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid base url: {0}")]
    Url(#[from] url::ParseError),
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    /// The service answered with a non-2xx status and an error body.
    #[error("service returned {status}: {} ({})", .body.message, .body.code)]
    Api { status: u16, body: ApiError },
    #[error("service returned {status} with an unreadable body: {text}")]
    Unexpected { status: u16, text: String },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } | ClientError::Unexpected { status, .. } => Some(*status),
            ClientError::Http(e) => e.status().map(|s| s.as_u16()),
            ClientError::Url(_) => None,
        }
    }

    /// Machine-readable reason from the error body, if any.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.code),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: Url,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Result<Self> {
        let mut base = Url::parse(base)?;
        if !base.path().ends_with('/') {
            let p = format!("{}/", base.path());
            base.set_path(&p);
        }
        Ok(Self {
            base,
            http: reqwest::Client::new(),
        })
    }

    pub fn base_url(&self) -> &Url {
        &self.base
    }

    fn url(&self, path: &str) -> Result<Url> {
        Ok(self.base.join(path)?)
    }

    async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        match serde_json::from_str::<ApiError>(&text) {
            Ok(body) => Err(ClientError::Api {
                status: status.as_u16(),
                body,
            }),
            Err(_) => Err(ClientError::Unexpected {
                status: status.as_u16(),
                text,
            }),
        }
    }

    pub async fn model(&self) -> Result<ModelInfo> {
        Self::decode(self.http.get(self.url("api/model")?).send().await?).await
    }

    pub async fn frames(&self, offset: usize, limit: usize) -> Result<FramePage> {
        let mut url = self.url("api/frames")?;
        url.query_pairs_mut()
            .append_pair("offset", &offset.to_string())
            .append_pair("limit", &limit.to_string());
        Self::decode(self.http.get(url).send().await?).await
    }

    pub async fn frame(&self, id: usize) -> Result<FrameDetail> {
        Self::decode(self.http.get(self.url(&format!("api/frames/{id}"))?).send().await?).await
    }

    pub async fn counterfactual(&self, req: &CounterfactualRequest) -> Result<CounterfactualResponse> {
        Self::decode(self.http.post(self.url("api/counterfactual")?).json(req).send().await?).await
    }

    pub async fn path_step(&self, result_id: &str, step: usize) -> Result<PathStep> {
        Self::decode(self.http.get(self.url(&format!("api/path/{result_id}/{step}"))?).send().await?).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_path_gets_trailing_slash() {
        let c = Client::new("http://localhost:9000/svc").unwrap();
        assert_eq!(c.url("api/model").unwrap().as_str(), "http://localhost:9000/svc/api/model");
        let c = Client::new("http://localhost:9000").unwrap();
        assert_eq!(c.url("api/frames/3").unwrap().as_str(), "http://localhost:9000/api/frames/3");
        assert!(Client::new("not a url").is_err());
    }
}
