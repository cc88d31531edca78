//! Golden-request checks for anything claiming to speak the sidecar protocol.

use std::time::Duration;

use serde::Serialize;
use ureq::Agent;

use super::{Backend, RemoteBackend};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub route: String,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub endpoint: String,
    pub model_id: String,
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6 * (1.0 + x.abs()))
}

fn status_of(agent: &Agent, url: &str, body: &str) -> Result<u16, String> {
    agent
        .post(url)
        .header("content-type", "application/json")
        .send(body)
        .map(|r| r.status().as_u16())
        .map_err(|e| e.to_string())
}

pub fn conformance_suite(endpoint: &str, model_id: &str, timeout: Duration) -> ConformanceReport {
    let client = RemoteBackend::new(endpoint, timeout);
    let base = endpoint.trim_end_matches('/');
    let mut checks = Vec::new();
    let mut record = |route: &str, check: &str, outcome: Result<(), String>| {
        checks.push(CheckResult {
            route: route.to_string(),
            check: check.to_string(),
            passed: outcome.is_ok(),
            detail: outcome.err().unwrap_or_default(),
        });
    };

    let dim = match client.health(model_id) {
        Ok(h) if h.dim > 0 => {
            record("/v1/health", "reports dim", Ok(()));
            Some(h.dim)
        }
        Ok(h) => {
            record("/v1/health", "reports dim", Err(format!("dim {}", h.dim)));
            None
        }
        Err(e) => {
            record("/v1/health", "reports dim", Err(e.to_string()));
            None
        }
    };

    let texts: Vec<String> = ["a person sitting", "walking a dog", "cycling uphill"].map(String::from).to_vec();
    match client.embed_text(model_id, &texts) {
        Ok(forward) => {
            let shape = if forward.len() != texts.len() {
                Err(format!("{} embeddings for {} texts", forward.len(), texts.len()))
            } else if let Some(bad) = forward.iter().find(|v| Some(v.len()) != dim) {
                Err(format!("length {} vs health dim {dim:?}", bad.len()))
            } else {
                Ok(())
            };
            record("/v1/embed_text", "shape and dim stability", shape);
            let reversed: Vec<String> = texts.iter().rev().cloned().collect();
            let order = match client.embed_text(model_id, &reversed) {
                Ok(back) if back.len() == forward.len() => {
                    if forward.iter().zip(back.iter().rev()).all(|(a, b)| close(a, b)) {
                        Ok(())
                    } else {
                        Err("outputs do not follow input order".into())
                    }
                }
                Ok(back) => Err(format!("{} embeddings for {} texts", back.len(), reversed.len())),
                Err(e) => Err(e.to_string()),
            };
            record("/v1/embed_text", "batch order preserved", order);
        }
        Err(e) => record("/v1/embed_text", "shape and dim stability", Err(e.to_string())),
    }

    let images = vec![vec![0u8; 48], vec![255u8; 48]];
    let image_shape = match client.embed_image(model_id, &images) {
        Ok(v) if v.len() == 2 && v.iter().all(|e| Some(e.len()) == dim) => Ok(()),
        Ok(v) => Err(format!("{} embeddings, lengths {:?}", v.len(), v.iter().map(Vec::len).collect::<Vec<_>>())),
        Err(e) => Err(e.to_string()),
    };
    record("/v1/embed_image", "shape and dim stability", image_shape);

    let caption = client.caption(model_id, &images[0], "what is happening?", 5).map(|_| ()).map_err(|e| e.to_string());
    record("/v1/caption", "returns text", caption);

    let agent: Agent = Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
    let unknown = serde_json::json!({"model_id": format!("{model_id}-does-not-exist"), "texts": ["x"]}).to_string();
    let code = status_of(&agent, &format!("{base}/v1/embed_text"), &unknown)
        .and_then(|s| if s == 404 { Ok(()) } else { Err(format!("HTTP {s}, expected 404")) });
    record("/v1/embed_text", "unknown model is 404", code);
    let malformed = status_of(&agent, &format!("{base}/v1/embed_text"), "{not json")
        .and_then(|s| if (400..500).contains(&s) { Ok(()) } else { Err(format!("HTTP {s}, expected 4xx")) });
    record("/v1/embed_text", "malformed body is 4xx", malformed);

    ConformanceReport { endpoint: endpoint.to_string(), model_id: model_id.to_string(), checks }
}
