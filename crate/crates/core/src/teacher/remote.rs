use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{parse_teacher_output, render_curation_prompt, PromptPack, TeacherError};
use crate::corpus::{normalize, QuestionRecord, ReasoningTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub samples: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub timeout_secs: f64,
    pub max_concurrent: usize,
    pub retry_budget: u32,
    pub backoff_ms: u64,
    /// A bundled pack name (`csqa`, `obqa`, `strategyqa`) or a file path.
    pub prompt_pack: String,
    /// Permits `samples` outside 4..=8.
    pub allow_any_samples: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: "TEACHER_API_KEY".into(),
            samples: 4,
            temperature: 0.8,
            max_tokens: 256,
            timeout_secs: 60.0,
            max_concurrent: 4,
            retry_budget: 5,
            backoff_ms: 500,
            prompt_pack: "csqa".into(),
            allow_any_samples: false,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<(), TeacherError> {
        let bad = |m: String| Err(TeacherError::Config(m));
        if !self.allow_any_samples && !(4..=8).contains(&self.samples) {
            return bad(format!("samples = {} outside 4..=8", self.samples));
        }
        if self.samples == 0 {
            return bad("samples must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature = {} must be positive", self.temperature));
        }
        if self.max_concurrent == 0 || self.max_tokens == 0 {
            return bad("max_concurrent and max_tokens must be positive".into());
        }
        if !(self.timeout_secs > 0.0) {
            return bad("timeout_secs must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawGeneration {
    pub question_id: String,
    pub sample: usize,
    pub text: String,
}

#[derive(Debug, Clone, Default)]
pub struct CurationReport {
    pub traces: Vec<ReasoningTrace>,
    pub raw: Vec<RawGeneration>,
    /// Samples dropped because they failed to parse.
    pub malformed: usize,
    pub duplicates: usize,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    #[serde(default)]
    index: usize,
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Completion texts of a chat-completions response body, ordered by choice
/// index. Missing content reads as empty text.
pub fn parse_chat_response(body: &str) -> Result<Vec<String>, TeacherError> {
    let mut parsed: ChatResponse =
        serde_json::from_str(body).map_err(|e| TeacherError::Transport(format!("malformed response: {e}")))?;
    parsed.choices.sort_by_key(|c| c.index);
    Ok(parsed
        .choices
        .into_iter()
        .map(|c| c.message.content.unwrap_or_default())
        .collect())
}

struct Client<'a> {
    agent: ureq::Agent,
    config: &'a TeacherConfig,
    key: String,
}

impl Client<'_> {
    fn attempt(&self, prompt: &str) -> Result<Vec<String>, TeacherError> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "n": self.config.samples,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        let transport = |e: ureq::Error| TeacherError::Transport(e.to_string());
        let mut resp = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.key))
            .send_json(&body)
            .map_err(transport)?;
        let status = resp.status().as_u16();
        if status == 429 {
            return Err(TeacherError::RateLimited);
        }
        if !(200..300).contains(&status) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(TeacherError::Transport(format!("HTTP {status}: {text}")));
        }
        let body = resp.body_mut().read_to_string().map_err(transport)?;
        parse_chat_response(&body)
    }

    fn request(&self, index: usize, record: &QuestionRecord, prompt: &str) -> Result<Vec<String>, TeacherError> {
        let mut rng = ChaCha8Rng::seed_from_u64(index as u64);
        let mut attempt = 0u32;
        loop {
            match self.attempt(prompt) {
                Err(TeacherError::RateLimited) if attempt < self.config.retry_budget => {
                    let base = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    let jitter = rng.random_range(0..=self.config.backoff_ms);
                    log::warn!(
                        "{}: rate limited, retry {} in {} ms",
                        record.id,
                        attempt + 1,
                        base + jitter
                    );
                    thread::sleep(Duration::from_millis(base + jitter));
                    attempt += 1;
                }
                Err(TeacherError::RateLimited) => {
                    return Err(TeacherError::BudgetExceeded {
                        question_id: record.id.clone(),
                        attempts: attempt + 1,
                    })
                }
                other => return other,
            }
        }
    }
}

/// Sends one n-sample request per record, at most `max_concurrent` at a time,
/// and returns parsed, de-duplicated traces in record order.
pub fn curate_remote(records: &[QuestionRecord], config: &TeacherConfig) -> Result<CurationReport, TeacherError> {
    let key = std::env::var(&config.api_key_env)
        .ok()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| TeacherError::AuthMissing(config.api_key_env.clone()))?;
    config.validate()?;
    let pack = PromptPack::load(&config.prompt_pack)?;
    let prompts = records
        .iter()
        .map(|r| render_curation_prompt(r, &pack))
        .collect::<Result<Vec<_>, _>>()?;

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into();
    let client = Client { agent, config, key };
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let results: Vec<Mutex<Option<Result<Vec<String>, TeacherError>>>> =
        records.iter().map(|_| Mutex::new(None)).collect();
    let workers = config.max_concurrent.min(records.len());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= records.len() || failed.load(Ordering::SeqCst) {
                    break;
                }
                let result = client.request(i, &records[i], &prompts[i]);
                if result.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                *results[i].lock().expect("lock") = Some(result);
            });
        }
    });

    let mut report = CurationReport::default();
    let mut seen = HashSet::new();
    for (record, slot) in records.iter().zip(results) {
        let Some(result) = slot.into_inner().expect("lock") else {
            continue;
        };
        for (sample, text) in result?.into_iter().enumerate() {
            let parsed = parse_teacher_output(&text, record);
            report.raw.push(RawGeneration {
                question_id: record.id.clone(),
                sample,
                text,
            });
            let trace = match parsed {
                Ok(trace) => trace,
                Err(e) => {
                    log::warn!("{} sample {sample}: {e}", record.id);
                    report.malformed += 1;
                    continue;
                }
            };
            let key = (
                trace.question_id.clone(),
                normalize(&trace.general),
                trace.specifics.values().map(|s| normalize(s)).collect::<Vec<_>>(),
            );
            if seen.insert(key) {
                report.traces.push(trace);
            } else {
                report.duplicates += 1;
            }
        }
    }
    if report.malformed > 0 {
        log::warn!("dropped {} malformed samples", report.malformed);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_responses() {
        let body = r#"{"choices": [
            {"index": 1, "message": {"role": "assistant", "content": "second"}},
            {"index": 0, "message": {"role": "assistant", "content": "first"}},
            {"index": 2, "message": {"role": "assistant", "content": null}}
        ], "usage": {"total_tokens": 3}}"#;
        assert_eq!(parse_chat_response(body).unwrap(), vec!["first", "second", ""]);
        assert!(matches!(parse_chat_response("{}"), Err(TeacherError::Transport(_))));
        assert!(matches!(
            parse_chat_response("not json"),
            Err(TeacherError::Transport(_))
        ));
    }

    #[test]
    fn config_bounds() {
        let ok = TeacherConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TeacherConfig {
                samples: 9,
                ..ok.clone()
            },
            TeacherConfig {
                temperature: 0.0,
                ..ok.clone()
            },
            TeacherConfig {
                max_concurrent: 0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        let any = TeacherConfig {
            samples: 2,
            allow_any_samples: true,
            ..ok
        };
        assert!(any.validate().is_ok());
    }
}
