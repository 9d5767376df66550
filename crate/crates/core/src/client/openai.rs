//! OpenAI-compatible `/chat/completions` backend.

use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, ChoiceProb, Role};

#[derive(Debug)]
pub struct OpenAiBackend {
    url: String,
    model: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl OpenAiBackend {
    pub fn new(base_url: &str, model: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, String> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| e.to_string())?;
        Ok(OpenAiBackend {
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.into(),
            api_key,
            http,
        })
    }
}

/// JSON body for a chat request.
pub fn build_request_body(req: &ChatRequest, model: &str) -> Value {
    let messages: Vec<Value> = req
        .messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            match &m.image_uri {
                Some(uri) => json!({
                    "role": role,
                    "content": [
                        {"type": "image_url", "image_url": {"url": uri}},
                        {"type": "text", "text": m.text},
                    ],
                }),
                None => json!({"role": role, "content": m.text}),
            }
        })
        .collect();
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    });
    if req.samples > 1 {
        body["n"] = json!(req.samples);
    }
    if req.want_choice_distribution {
        body["logprobs"] = json!(true);
        body["top_logprobs"] = json!(20);
    }
    body
}

/// Extracts text, samples and first-token scores from a response body.
pub fn parse_response_body(body: &Value, want_distribution: bool) -> Result<ChatResponse, String> {
    let choices = body["choices"].as_array().filter(|c| !c.is_empty()).ok_or("response has no choices")?;
    let texts: Vec<String> = choices
        .iter()
        .map(|c| c["message"]["content"].as_str().unwrap_or_default().to_string())
        .collect();
    let mut resp = ChatResponse::text(texts[0].clone());
    if texts.len() > 1 {
        resp.samples = texts;
    }
    if want_distribution {
        if let Some(top) = choices[0]["logprobs"]["content"][0]["top_logprobs"].as_array() {
            let dist: Vec<ChoiceProb> = top
                .iter()
                .filter_map(|t| {
                    Some(ChoiceProb {
                        label: t["token"].as_str()?.to_string(),
                        probability: t["logprob"].as_f64()?.exp(),
                    })
                })
                .collect();
            if !dist.is_empty() {
                resp.choice_distribution = Some(dist);
            }
        }
    }
    Ok(resp)
}

impl ChatBackend for OpenAiBackend {
    fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut call = self.http.post(&self.url).json(&build_request_body(req, &self.model));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let res = call.send().map_err(|e| BackendError::new(e.status().map(|s| s.as_u16()), e.to_string()))?;
        let status = res.status();
        let text = res.text().map_err(|e| BackendError::new(None, e.to_string()))?;
        if !status.is_success() {
            let snippet: String = text.chars().take(300).collect();
            return Err(BackendError::new(Some(status.as_u16()), snippet));
        }
        let body: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::new(Some(status.as_u16()), format!("invalid JSON body: {e}")))?;
        parse_response_body(&body, req.want_choice_distribution).map_err(|m| BackendError::new(Some(status.as_u16()), m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    #[test]
    fn body_carries_image_and_scoring_flags() {
        let mut req = ChatRequest::with_image("e", "Q?", "https://x/y.jpg").max_tokens(1);
        req.want_choice_distribution = true;
        let b = build_request_body(&req, "m");
        assert_eq!(b["model"], "m");
        assert_eq!(b["max_tokens"], 1);
        assert_eq!(b["messages"][0]["content"][0]["image_url"]["url"], "https://x/y.jpg");
        assert_eq!(b["messages"][0]["content"][1]["text"], "Q?");
        assert_eq!(b["logprobs"], true);
        assert!(b.get("n").is_none());
    }

    #[test]
    fn parses_logprobs_and_samples() {
        let body = json!({
            "choices": [
                {"message": {"content": "A"}, "logprobs": {"content": [{"token": "A", "top_logprobs": [
                    {"token": "A", "logprob": -0.1}, {"token": "B", "logprob": -2.5}
                ]}]}},
                {"message": {"content": "B"}}
            ]
        });
        let r = parse_response_body(&body, true).unwrap();
        assert_eq!(r.text, "A");
        assert_eq!(r.samples, vec!["A", "B"]);
        let d = r.choice_distribution.unwrap();
        assert!((d[0].probability - (-0.1f64).exp()).abs() < 1e-12);
        assert!(parse_response_body(&json!({"choices": []}), false).is_err());
    }

    /// Serves exactly one HTTP response and returns the request body it saw.
    fn one_shot_server(status: u16, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let h = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            String::from_utf8(buf).unwrap()
        });
        (format!("http://{addr}/v1"), h)
    }

    #[test]
    fn round_trip_against_local_server() {
        let (url, h) = one_shot_server(200, r#"{"choices":[{"message":{"content":"C"}}]}"#);
        let b = OpenAiBackend::new(&url, "tiny", Some("k".into()), Duration::from_secs(5)).unwrap();
        let r = b.send(&ChatRequest::text("e", "pick").max_tokens(3)).unwrap();
        assert_eq!(r.text, "C");
        let sent: Value = serde_json::from_str(&h.join().unwrap()).unwrap();
        assert_eq!(sent["model"], "tiny");
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["messages"][0]["content"], "pick");
    }

    #[test]
    fn error_status_is_reported() {
        let (url, h) = one_shot_server(429, r#"{"error":"slow down"}"#);
        let b = OpenAiBackend::new(&url, "tiny", None, Duration::from_secs(5)).unwrap();
        let e = b.send(&ChatRequest::text("e", "x")).unwrap_err();
        h.join().unwrap();
        assert_eq!(e.status, Some(429));
        assert!(e.retryable());
    }
}
