//! Deterministic stand-in provider that replays responses from a scenario file.
//!
//! A scenario is a list of rules. Each call is matched against the rules in
//! order by stage, ledger id (glob with `*`/`?`), attempt, debug iteration, and
//! call ordinal; the first match answers. The ordinal counts calls per
//! `(ledger, stage, iteration)` starting at 0.
//!
//! Reply text may contain `{{ordinal}}`, `{{attempt}}`, `{{iteration}}` and
//! `{{ledger}}`, substituted per call.
//!
//! ```yaml
//! rules:
//!   - stage: reflection
//!     iteration: 1
//!     text: "decision: continue"
//!   - stage: codegen
//!     responses:            # indexed by ordinal, last one repeats
//!       - text: "```sh\necho hi\n```"
//!         input_tokens: 1200
//!         output_tokens: 300
//!   - stage: report
//!     truncated: true
//!     text: "..."
//!   - stage: summary
//!     fail: "upstream 503"
//!     retryable: true
//! ```

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::provider::{
    approx_tokens, CompletionRequest, Provider, ProviderError, ProviderReply, Stage, TokenEstimate,
};
use super::GatewayError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens: Option<u64>,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<String>,
    #[serde(default)]
    pub retryable: bool,
}

impl ScriptedReply {
    fn is_empty(&self) -> bool {
        self.text.is_none() && self.fail.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal: Option<u32>,
    #[serde(flatten)]
    pub reply: ScriptedReply,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub responses: Vec<ScriptedReply>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    /// Report declared token counts to the gateway before each call so budget
    /// projections are exact.
    #[serde(default = "yes")]
    pub disclose_estimates: bool,
}

fn yes() -> bool {
    true
}

impl Scenario {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Scenario {
            rules,
            disclose_estimates: true,
        }
    }

    pub fn from_yaml(text: &str) -> Result<Self, GatewayError> {
        let scenario: Scenario =
            serde_yaml::from_str(text).map_err(|e| GatewayError::Config(format!("scenario: {e}")))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text)
    }

    fn validate(&self) -> Result<(), GatewayError> {
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.responses.is_empty() && rule.reply.is_empty() {
                return Err(GatewayError::Config(format!(
                    "scenario rule {i} has neither `text`, `fail`, nor `responses`"
                )));
            }
            if let Some(j) = rule.responses.iter().position(ScriptedReply::is_empty) {
                return Err(GatewayError::Config(format!(
                    "scenario rule {i} response {j} has neither `text` nor `fail`"
                )));
            }
        }
        Ok(())
    }
}

/// `*` matches any run of characters, `?` exactly one.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

type CallKey = (String, Stage, u32);

pub struct ScriptedProvider {
    scenario: Scenario,
    ordinals: Mutex<HashMap<CallKey, u32>>,
    captured: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedProvider {
    pub fn new(scenario: Scenario) -> Self {
        ScriptedProvider {
            scenario,
            ordinals: Mutex::new(HashMap::new()),
            captured: Mutex::new(Vec::new()),
        }
    }

    /// Every request seen so far, in call order.
    pub fn captured(&self) -> Vec<CompletionRequest> {
        self.captured.lock().unwrap().clone()
    }

    fn key(req: &CompletionRequest) -> CallKey {
        (req.ctx.ledger.clone(), req.ctx.stage, req.ctx.iteration)
    }

    fn lookup(&self, req: &CompletionRequest, ordinal: u32) -> Option<&ScriptedReply> {
        let ctx = &req.ctx;
        self.scenario.rules.iter().find_map(|rule| {
            let matches = rule.stage.is_none_or(|s| s == ctx.stage)
                && rule
                    .ledger
                    .as_deref()
                    .is_none_or(|g| glob_match(g, &ctx.ledger))
                && rule.attempt.is_none_or(|a| Some(a) == ctx.attempt)
                && rule.iteration.is_none_or(|i| i == ctx.iteration)
                && rule.ordinal.is_none_or(|o| o == ordinal);
            if !matches {
                return None;
            }
            if rule.responses.is_empty() {
                Some(&rule.reply)
            } else {
                let idx = (ordinal as usize).min(rule.responses.len() - 1);
                Some(&rule.responses[idx])
            }
        })
    }

    fn tokens(req: &CompletionRequest, reply: &ScriptedReply) -> TokenEstimate {
        TokenEstimate {
            input_tokens: reply
                .input_tokens
                .unwrap_or_else(|| approx_tokens(req.prompt_chars())),
            output_tokens: reply
                .output_tokens
                .unwrap_or_else(|| approx_tokens(reply.text.as_deref().map_or(0, str::len))),
        }
    }
}

/// Substitute `{{ordinal}}`, `{{attempt}}`, `{{iteration}}` and `{{ledger}}`
/// in scripted text so one rule can yield distinct replies.
fn expand(text: &str, req: &CompletionRequest, ordinal: u32) -> String {
    if !text.contains("{{") {
        return text.to_string();
    }
    text.replace("{{ordinal}}", &ordinal.to_string())
        .replace("{{attempt}}", &req.ctx.attempt.unwrap_or(0).to_string())
        .replace("{{iteration}}", &req.ctx.iteration.to_string())
        .replace("{{ledger}}", &req.ctx.ledger)
}

impl Provider for ScriptedProvider {
    fn name(&self) -> &str {
        "scripted"
    }

    fn estimate(&self, req: &CompletionRequest) -> Option<TokenEstimate> {
        if !self.scenario.disclose_estimates {
            return None;
        }
        let ordinal = self
            .ordinals
            .lock()
            .unwrap()
            .get(&Self::key(req))
            .copied()
            .unwrap_or(0);
        self.lookup(req, ordinal)
            .filter(|r| r.fail.is_none())
            .map(|r| Self::tokens(req, r))
    }

    fn complete(&self, req: &CompletionRequest) -> Result<ProviderReply, ProviderError> {
        self.captured.lock().unwrap().push(req.clone());
        let ordinal = {
            let mut ordinals = self.ordinals.lock().unwrap();
            let slot = ordinals.entry(Self::key(req)).or_insert(0);
            let current = *slot;
            *slot += 1;
            current
        };
        let reply = self.lookup(req, ordinal).ok_or_else(|| {
            ProviderError::fatal(format!(
                "no scripted response for stage={} ledger={} attempt={:?} iteration={} ordinal={}",
                req.ctx.stage, req.ctx.ledger, req.ctx.attempt, req.ctx.iteration, ordinal
            ))
        })?;
        if let Some(msg) = &reply.fail {
            return Err(ProviderError {
                message: msg.clone(),
                retryable: reply.retryable,
            });
        }
        let tokens = Self::tokens(req, reply);
        Ok(ProviderReply {
            text: expand(reply.text.as_deref().unwrap_or_default(), req, ordinal),
            input_tokens: tokens.input_tokens,
            output_tokens: tokens.output_tokens,
            truncated: reply.truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CallContext, DecodingParams, Message};

    fn req(ledger: &str, stage: Stage, iteration: u32, attempt: Option<u32>) -> CompletionRequest {
        CompletionRequest {
            ctx: CallContext::pipeline(ledger, iteration, stage).with_attempt(attempt),
            model: "m".into(),
            messages: vec![Message::user("prompt text")],
            params: DecodingParams::default(),
        }
    }

    #[test]
    fn globs() {
        assert!(glob_match("run-*-5", "run-abc-5"));
        assert!(!glob_match("run-*-5", "run-abc-4"));
        assert!(glob_match("*", ""));
        assert!(glob_match("a?c", "abc"));
        assert!(!glob_match("a?c", "ac"));
        assert!(glob_match("*b*b", "abxbb"));
    }

    #[test]
    fn first_matching_rule_wins_and_ordinals_index_responses() {
        let s = Scenario::from_yaml(
            r#"
rules:
  - stage: reflection
    attempt: 2
    text: "decision: abort: no data"
  - stage: reflection
    responses:
      - text: "decision: continue"
      - text: "decision: success"
  - text: fallback
"#,
        )
        .unwrap();
        let p = ScriptedProvider::new(s);
        let r = |a| req("run-1", Stage::Reflection, 1, a);
        assert_eq!(p.complete(&r(Some(2))).unwrap().text, "decision: abort: no data");
        assert_eq!(p.complete(&r(Some(1))).unwrap().text, "decision: success");
        let r2 = req("run-2", Stage::Reflection, 1, Some(1));
        assert_eq!(p.complete(&r2).unwrap().text, "decision: continue");
        assert_eq!(p.complete(&r2).unwrap().text, "decision: success");
        assert_eq!(p.complete(&r2).unwrap().text, "decision: success");
        assert_eq!(
            p.complete(&req("x", Stage::Summary, 0, None)).unwrap().text,
            "fallback"
        );
        assert_eq!(p.captured().len(), 6);
    }

    #[test]
    fn estimate_peeks_without_consuming() {
        let s = Scenario::from_yaml(
            "rules:\n  - responses:\n      - {text: a, input_tokens: 5, output_tokens: 6}\n      - {text: b, input_tokens: 7, output_tokens: 8}\n",
        )
        .unwrap();
        let p = ScriptedProvider::new(s);
        let r = req("l", Stage::Codegen, 1, None);
        assert_eq!(p.estimate(&r).unwrap().input_tokens, 5);
        assert_eq!(p.estimate(&r).unwrap().input_tokens, 5);
        assert_eq!(p.complete(&r).unwrap().text, "a");
        assert_eq!(p.estimate(&r).unwrap().output_tokens, 8);
    }

    #[test]
    fn unmatched_call_and_invalid_rule() {
        let p = ScriptedProvider::new(Scenario::from_yaml("rules:\n  - stage: meta\n    text: m\n").unwrap());
        let err = p.complete(&req("l", Stage::Codegen, 1, None)).unwrap_err();
        assert!(err.message.contains("stage=codegen"));
        assert!(!err.retryable);
        assert!(Scenario::from_yaml("rules:\n  - stage: meta\n").is_err());
    }

    #[test]
    fn placeholders_expand_per_call() {
        let p = ScriptedProvider::new(
            Scenario::from_yaml("rules:\n  - text: \"n={{ordinal}} a={{attempt}} l={{ledger}}\"\n").unwrap(),
        );
        let r = req("run-x", Stage::Summary, 0, Some(3));
        assert_eq!(p.complete(&r).unwrap().text, "n=0 a=3 l=run-x");
        assert_eq!(p.complete(&r).unwrap().text, "n=1 a=3 l=run-x");
    }
}
