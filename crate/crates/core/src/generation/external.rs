//! Seam for text-to-image generators that run outside this process.
//!
//! Wire format of [`HttpGeneratorClient`]: `POST <endpoint>` with a JSON body
//! `{"instance_id", "caption", "cfg_scale", "seed", "n"}`; the reply is
//! `{"images": ["<base64 PNG>", ...]}` with exactly `n` entries.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub const ENDPOINT_ENV: &str = "PERSREP_GEN_ENDPOINT";
pub const TIMEOUT_ENV: &str = "PERSREP_GEN_TIMEOUT_S";
pub const RETRIES_ENV: &str = "PERSREP_GEN_RETRIES";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub instance_id: String,
    pub caption: String,
    pub cfg_scale: Option<f64>,
    pub seed: u64,
    pub n: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub images: Vec<String>,
}

pub trait GeneratorClient: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<RgbImage>>;
}

#[derive(Clone, Debug)]
pub struct HttpGeneratorClient {
    pub endpoint: String,
    pub timeout: Duration,
    pub retries: usize,
}

impl HttpGeneratorClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(120),
            retries: 2,
        }
    }

    /// Client configured from `PERSREP_GEN_*`; `None` when no endpoint is set.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty())?;
        let mut client = Self::new(endpoint);
        if let Some(t) = std::env::var(TIMEOUT_ENV).ok().and_then(|s| s.parse::<f64>().ok()) {
            client.timeout = Duration::from_secs_f64(t.max(0.001));
        }
        if let Some(r) = std::env::var(RETRIES_ENV).ok().and_then(|s| s.parse().ok()) {
            client.retries = r;
        }
        Some(client)
    }

    fn attempt(&self, agent: &ureq::Agent, req: &GenerationRequest) -> Result<Vec<RgbImage>> {
        let resp: GenerationResponse = agent
            .post(&self.endpoint)
            .send_json(req)
            .map_err(|e| Error::ExternalGeneratorError(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::ExternalGeneratorError(e.to_string()))?;
        resp.images
            .iter()
            .map(|b64| {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b64)
                    .map_err(|e| Error::ExternalGeneratorError(format!("bad base64: {e}")))?;
                RgbImage::decode(&bytes)
            })
            .collect()
    }
}

impl GeneratorClient for HttpGeneratorClient {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<RgbImage>> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut last = None;
        for attempt in 0..=self.retries {
            match self.attempt(&agent, req) {
                Ok(imgs) if imgs.len() == req.n => return Ok(imgs),
                Ok(imgs) => {
                    last = Some(Error::ExternalGeneratorError(format!(
                        "asked for {} images, got {}",
                        req.n,
                        imgs.len()
                    )))
                }
                Err(e) => {
                    log::warn!("generator request attempt {attempt} failed: {e}");
                    last = Some(e);
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::ExternalGeneratorError("no attempt made".into())))
    }
}
