//! Blocking JSON-over-HTTP helpers with bounded retries.

use std::io::Read;
use std::time::Duration;

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(100),
        }
    }
}

#[derive(Debug)]
pub(crate) struct TransportFailure {
    pub attempts: u32,
    pub message: String,
}

pub(crate) fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(timeout))
        .build()
        .new_agent()
}

fn is_transient(e: &ureq::Error) -> bool {
    matches!(
        e,
        ureq::Error::Io(_) | ureq::Error::Timeout(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound
    )
}

/// POSTs `body` (or GETs when `None`), retrying transport failures with exponential backoff.
/// Any HTTP response, including non-2xx, is returned as `(status, body)`.
pub(crate) fn send_with_retry(
    agent: &ureq::Agent,
    url: &str,
    body: Option<&str>,
    headers: &[(String, String)],
    policy: RetryPolicy,
) -> Result<(u16, String), TransportFailure> {
    let attempts = policy.attempts.max(1);
    let mut last = String::new();
    for attempt in 1..=attempts {
        let result = match body {
            Some(b) => {
                let mut req = agent.post(url).header("content-type", "application/json");
                for (k, v) in headers {
                    req = req.header(k.as_str(), v.as_str());
                }
                req.send(b)
            }
            None => {
                let mut req = agent.get(url);
                for (k, v) in headers {
                    req = req.header(k.as_str(), v.as_str());
                }
                req.call()
            }
        };
        match result {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let mut text = String::new();
                resp.body_mut()
                    .as_reader()
                    .read_to_string(&mut text)
                    .map_err(|e| TransportFailure {
                        attempts: attempt,
                        message: format!("reading response body: {e}"),
                    })?;
                return Ok((status, text));
            }
            Err(e) if is_transient(&e) => {
                last = e.to_string();
                if attempt < attempts {
                    std::thread::sleep(policy.base_delay * 2u32.pow(attempt - 1));
                }
            }
            Err(e) => {
                return Err(TransportFailure {
                    attempts: attempt,
                    message: e.to_string(),
                })
            }
        }
    }
    Err(TransportFailure {
        attempts,
        message: last,
    })
}

/// Deserializes `body`, reporting the JSON path of the first bad field.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(body: &str) -> Result<T, (String, String)> {
    let de = &mut serde_json::Deserializer::from_str(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        (path, e.into_inner().to_string())
    })
}
