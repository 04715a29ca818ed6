//! Style-conditioned rewrite planning: styles, prompt templates, sampling
//! parameters, chunking of long documents and synthetic-document identity.
//!
//! Nothing here talks to a model. The companion crate sends the requests
//! built here and feeds completions back through [`make_synthetic`].

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, Origin};
use crate::digest::{sha256_hex, Checksum};
use crate::tokens::TokenCounter;

pub const PLACEHOLDER: &str = "{document}";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error("template for {style} must contain {PLACEHOLDER} exactly once (found {found})")]
    Placeholder { style: RewriteStyle, found: usize },
    #[error("unknown rewrite style {0:?}")]
    UnknownStyle(String),
    #[error("invalid sampling parameters: {0}")]
    Sampling(String),
    #[error("invalid chat request: {0}")]
    Request(String),
    #[error("document {id} has a paragraph of {tokens} tokens, over the {limit}-token input limit")]
    Oversize { id: String, tokens: u64, limit: u64 },
    #[error("document {0} is not an original document")]
    NotOriginal(String),
    #[error("empty rewrite")]
    EmptyRewrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteStyle {
    Easy,
    Medium,
    Hard,
    Qa,
}

impl RewriteStyle {
    pub const ALL: [RewriteStyle; 4] = [
        RewriteStyle::Easy,
        RewriteStyle::Medium,
        RewriteStyle::Hard,
        RewriteStyle::Qa,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RewriteStyle::Easy => "easy",
            RewriteStyle::Medium => "medium",
            RewriteStyle::Hard => "hard",
            RewriteStyle::Qa => "qa",
        }
    }
}

impl fmt::Display for RewriteStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewriteStyle {
    type Err = RewriteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RewriteStyle::ALL
            .into_iter()
            .find(|style| style.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| RewriteError::UnknownStyle(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleTemplate {
    style: RewriteStyle,
    system_instruction: String,
    user_template: String,
}

impl StyleTemplate {
    pub fn new(
        style: RewriteStyle,
        system_instruction: impl Into<String>,
        user_template: impl Into<String>,
    ) -> Result<Self, RewriteError> {
        let template = Self {
            style,
            system_instruction: system_instruction.into(),
            user_template: user_template.into(),
        };
        template.validate()?;
        Ok(template)
    }

    /// Templates deserialized from configuration must be re-validated.
    pub fn validate(&self) -> Result<(), RewriteError> {
        let found = self.user_template.matches(PLACEHOLDER).count();
        if found != 1 {
            return Err(RewriteError::Placeholder {
                style: self.style,
                found,
            });
        }
        Ok(())
    }

    pub fn style(&self) -> RewriteStyle {
        self.style
    }

    pub fn system_instruction(&self) -> &str {
        &self.system_instruction
    }

    pub fn user_template(&self) -> &str {
        &self.user_template
    }

    pub fn render(&self, text: &str) -> String {
        self.user_template.replacen(PLACEHOLDER, text, 1)
    }

    /// Built-in template for `style`.
    pub fn builtin(style: RewriteStyle) -> Self {
        const SYSTEM: &str = "You are an experienced editor of Brazilian Portuguese texts. \
            You rewrite web documents faithfully: every fact in the source must survive the rewrite, \
            and nothing may be invented. Always answer in Portuguese and output only the rewritten text.";
        let user = match style {
            RewriteStyle::Easy => {
                "Reescreva o texto abaixo para um leitor iniciante. Use frases curtas e palavras do dia a dia, \
                 explique termos difíceis e mantenha todas as informações importantes.\n\nTexto:\n{document}"
            }
            RewriteStyle::Medium => {
                "Reescreva o texto abaixo como um verbete bem organizado de enciclopédia, no tom neutro e claro \
                 da Wikipédia. Melhore a estrutura e a clareza, sem tornar o conteúdo mais simples nem mais \
                 difícil.\n\nTexto:\n{document}"
            }
            RewriteStyle::Hard => {
                "Reescreva o texto abaixo em registro formal e técnico, como em um artigo especializado. \
                 Use a terminologia precisa da área e frases elaboradas, preservando todo o conteúdo.\n\nTexto:\n{document}"
            }
            RewriteStyle::Qa => {
                "Transforme o texto abaixo em uma sequência de perguntas e respostas que cubra seus pontos \
                 principais. Use o formato \"Pergunta: ...\" seguido de \"Resposta: ...\" para cada par.\n\nTexto:\n{document}"
            }
        };
        Self {
            style,
            system_instruction: SYSTEM.to_string(),
            user_template: user.to_string(),
        }
    }
}

/// One template per style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet(BTreeMap<RewriteStyle, StyleTemplate>);

impl Default for TemplateSet {
    fn default() -> Self {
        Self(
            RewriteStyle::ALL
                .into_iter()
                .map(|s| (s, StyleTemplate::builtin(s)))
                .collect(),
        )
    }
}

impl TemplateSet {
    /// Overrides the built-ins with `templates`.
    pub fn with_overrides<I>(templates: I) -> Result<Self, RewriteError>
    where
        I: IntoIterator<Item = StyleTemplate>,
    {
        let mut set = Self::default();
        for t in templates {
            t.validate()?;
            set.0.insert(t.style, t);
        }
        Ok(set)
    }

    pub fn get(&self, style: RewriteStyle) -> &StyleTemplate {
        &self.0[&style]
    }

    /// Content digest, recorded in manifests so runs can be compared.
    pub fn digest(&self) -> String {
        let mut c = Checksum::new();
        for t in self.0.values() {
            for part in [t.style.as_str(), &t.system_instruction, &t.user_template] {
                c.update(&(part.len() as u64).to_le_bytes());
                c.update(part.as_bytes());
            }
        }
        c.finish_hex()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    /// Output cap as a multiple of the input token count.
    pub output_multiplier: u64,
    pub output_floor: u64,
    /// Upper bound imposed by the rewriter's context.
    pub output_cap: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            top_p: 0.95,
            output_multiplier: 2,
            output_floor: 64,
            output_cap: 8192,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), RewriteError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(RewriteError::Sampling(alloc::format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(RewriteError::Sampling(alloc::format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.output_floor == 0 || self.output_cap < self.output_floor {
            return Err(RewriteError::Sampling("need 0 < output_floor <= output_cap".into()));
        }
        Ok(())
    }

    pub fn max_output_tokens(&self, input_tokens: u64) -> u64 {
        input_tokens
            .saturating_mul(self.output_multiplier)
            .clamp(self.output_floor, self.output_cap)
    }

    pub fn digest(&self) -> String {
        sha256_hex(
            alloc::format!(
                "t={};p={};m={};f={};c={}",
                self.temperature,
                self.top_p,
                self.output_multiplier,
                self.output_floor,
                self.output_cap
            )
            .as_bytes(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u64,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), RewriteError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(RewriteError::Request("no user message".into()));
        }
        if self.messages.iter().any(|m| m.content.is_empty()) {
            return Err(RewriteError::Request("empty message content".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(RewriteError::Request("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(RewriteError::Request("top_p must be in (0, 1]".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(RewriteError::Request("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// System message from the style instruction, user message from the template
/// with the placeholder replaced by `text` verbatim.
pub fn build_prompt(
    template: &StyleTemplate,
    text: &str,
    input_tokens: u64,
    sampling: &SamplingParams,
    model: &str,
) -> Result<ChatRequest, RewriteError> {
    let request = ChatRequest {
        model: model.to_string(),
        messages: alloc::vec![
            ChatMessage {
                role: Role::System,
                content: template.system_instruction.clone(),
            },
            ChatMessage {
                role: Role::User,
                content: template.render(text),
            },
        ],
        temperature: sampling.temperature,
        top_p: sampling.top_p,
        max_output_tokens: sampling.max_output_tokens(input_tokens),
    };
    request.validate()?;
    Ok(request)
}

/// Splits `doc` at blank-line paragraph boundaries into chunks of at most
/// `max_input_tokens`. Documents that fit are returned whole.
pub fn split_for_context<'a>(
    doc: &'a Document,
    counter: &TokenCounter,
    max_input_tokens: u64,
) -> Result<Vec<&'a str>, RewriteError> {
    let text = doc.text.as_str();
    if counter.count(text) <= max_input_tokens {
        return Ok(alloc::vec![text]);
    }
    let mut chunks = Vec::new();
    // byte range of the chunk being grown
    let mut start: Option<usize> = None;
    let mut end = 0;
    for (para_start, para) in paragraphs(text) {
        let para_end = para_start + para.len();
        let tokens = counter.count(para);
        if tokens > max_input_tokens {
            return Err(RewriteError::Oversize {
                id: doc.id.clone(),
                tokens,
                limit: max_input_tokens,
            });
        }
        match start {
            None => {
                start = Some(para_start);
                end = para_end;
            }
            Some(s) => {
                if counter.count(&text[s..para_end]) <= max_input_tokens {
                    end = para_end;
                } else {
                    chunks.push(&text[s..end]);
                    start = Some(para_start);
                    end = para_end;
                }
            }
        }
    }
    if let Some(s) = start {
        chunks.push(&text[s..end]);
    }
    Ok(chunks)
}

/// Joins independently rewritten chunks back in order.
pub fn join_chunks<S: AsRef<str>>(parts: &[S]) -> String {
    let mut out = String::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        out.push_str(part.as_ref().trim_end());
    }
    out
}

fn paragraphs(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split("\n\n").filter_map(move |para| {
        let start = offset;
        offset += para.len() + 2;
        (!para.trim().is_empty()).then_some((start, para))
    })
}

/// Deterministic id of the rewrite of `parent_id` in `style`.
pub fn synthetic_id(parent_id: &str, style: RewriteStyle, attempt_seed: u64) -> String {
    let mut c = Checksum::new();
    c.update(&(parent_id.len() as u64).to_le_bytes());
    c.update(parent_id.as_bytes());
    c.update(style.as_str().as_bytes());
    c.update(&attempt_seed.to_le_bytes());
    let hex = c.finish_hex();
    alloc::format!("syn-{}-{}", style.as_str(), &hex[..24])
}

/// Wraps a completion as a synthetic document derived from `parent`.
///
/// The rewrite inherits the parent's quality scores. Its length is whatever
/// the rewriter produced.
pub fn make_synthetic(
    parent: &Document,
    style: RewriteStyle,
    completion: &str,
    attempt_seed: u64,
    counter: &TokenCounter,
) -> Result<Document, RewriteError> {
    if parent.origin.is_synthetic() {
        return Err(RewriteError::NotOriginal(parent.id.clone()));
    }
    let text = completion.trim();
    if text.is_empty() {
        return Err(RewriteError::EmptyRewrite);
    }
    Ok(Document {
        id: synthetic_id(&parent.id, style, attempt_seed),
        text: text.to_string(),
        scores: parent.scores,
        token_count: counter.count(text),
        origin: Origin::Synthetic {
            style,
            parent_id: parent.id.clone(),
        },
        source_url: parent.source_url.clone(),
        extra: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum RewriteStatus {
    Succeeded,
    Failed(String),
}

/// One ledger line: the outcome of one (document, style) task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteRecord {
    pub parent_id: String,
    pub style: RewriteStyle,
    #[serde(flatten)]
    pub status: RewriteStatus,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_doc_id: Option<String>,
}

impl RewriteRecord {
    pub fn succeeded(parent_id: &str, style: RewriteStyle, attempts: u32, output: &str) -> Self {
        Self {
            parent_id: parent_id.to_string(),
            style,
            status: RewriteStatus::Succeeded,
            attempts,
            output_doc_id: Some(output.to_string()),
        }
    }

    pub fn failed(parent_id: &str, style: RewriteStyle, attempts: u32, reason: impl Into<String>) -> Self {
        Self {
            parent_id: parent_id.to_string(),
            style,
            status: RewriteStatus::Failed(reason.into()),
            attempts,
            output_doc_id: None,
        }
    }

    pub fn is_succeeded(&self) -> bool {
        matches!(self.status, RewriteStatus::Succeeded)
    }

    /// Succeeded records carry an output id and failed ones do not.
    pub fn is_consistent(&self) -> bool {
        self.is_succeeded() == self.output_doc_id.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::QualityScores;

    fn original(id: &str, text: &str) -> Document {
        Document {
            id: id.into(),
            text: text.into(),
            scores: QualityScores::new(3.0, 1.0).unwrap(),
            token_count: TokenCounter::WhitespaceWords.count(text),
            origin: Origin::Original,
            source_url: Some("https://example.com.br/a".into()),
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn builtin_templates_are_valid_and_distinct() {
        let set = TemplateSet::default();
        let mut seen = alloc::collections::BTreeSet::new();
        for style in RewriteStyle::ALL {
            let t = set.get(style);
            t.validate().unwrap();
            assert!(seen.insert(t.user_template().to_string()));
        }
    }

    #[test]
    fn prompt_substitutes_document_verbatim() {
        let t = StyleTemplate::builtin(RewriteStyle::Easy);
        let req = build_prompt(&t, "X", 1, &SamplingParams::default(), "m").unwrap();
        assert_eq!(req.messages.len(), 2);
        assert_eq!(req.messages[0].role, Role::System);
        assert_eq!(req.messages[0].content, t.system_instruction());
        assert!(req.messages[1].content.ends_with("Texto:\nX"));
        assert!(!req.messages[1].content.contains(PLACEHOLDER));
    }

    #[test]
    fn placeholder_must_appear_once() {
        let err = StyleTemplate::new(RewriteStyle::Hard, "s", "{document} and {document}").unwrap_err();
        assert_eq!(
            err,
            RewriteError::Placeholder {
                style: RewriteStyle::Hard,
                found: 2
            }
        );
        assert!(StyleTemplate::new(RewriteStyle::Hard, "s", "no slot").is_err());
        assert!(StyleTemplate::new(RewriteStyle::Hard, "s", "go: {document}").is_ok());
    }

    #[test]
    fn tiny_document_gets_output_floor() {
        let t = StyleTemplate::builtin(RewriteStyle::Qa);
        let req = build_prompt(&t, "oi", 1, &SamplingParams::default(), "m").unwrap();
        assert!(req.max_output_tokens >= 64);
        let s = SamplingParams::default();
        assert_eq!(s.max_output_tokens(100), 200);
        assert_eq!(s.max_output_tokens(100_000), 8192);
    }

    #[test]
    fn sampling_requires_stochasticity() {
        let s = SamplingParams {
            temperature: 0.0,
            ..SamplingParams::default()
        };
        assert!(s.validate().is_err());
        assert!(SamplingParams::default().validate().is_ok());
    }

    #[test]
    fn style_parse_roundtrip() {
        for s in RewriteStyle::ALL {
            assert_eq!(s.as_str().parse::<RewriteStyle>().unwrap(), s);
        }
        assert_eq!("QA".parse::<RewriteStyle>().unwrap(), RewriteStyle::Qa);
        assert!("poem".parse::<RewriteStyle>().is_err());
    }

    #[test]
    fn synthetic_document_provenance() {
        let d1 = original("d1", "texto original aqui");
        let syn = make_synthetic(
            &d1,
            RewriteStyle::Medium,
            "REWRITTEN",
            7,
            &TokenCounter::WhitespaceWords,
        )
        .unwrap();
        assert_eq!(syn.text, "REWRITTEN");
        assert_eq!(
            syn.origin,
            Origin::Synthetic {
                style: RewriteStyle::Medium,
                parent_id: "d1".into()
            }
        );
        assert_eq!(syn.token_count, 1);
        let again = make_synthetic(
            &d1,
            RewriteStyle::Medium,
            "other text",
            7,
            &TokenCounter::WhitespaceWords,
        )
        .unwrap();
        assert_eq!(syn.id, again.id);
        let other_seed = make_synthetic(
            &d1,
            RewriteStyle::Medium,
            "REWRITTEN",
            8,
            &TokenCounter::WhitespaceWords,
        )
        .unwrap();
        assert_ne!(syn.id, other_seed.id);
        assert_ne!(synthetic_id("d1", RewriteStyle::Easy, 7), syn.id);
    }

    #[test]
    fn empty_rewrite_fails() {
        let d1 = original("d1", "abc");
        assert_eq!(
            make_synthetic(&d1, RewriteStyle::Qa, "  \n", 0, &TokenCounter::WhitespaceWords),
            Err(RewriteError::EmptyRewrite)
        );
    }

    #[test]
    fn synthetic_parent_rejected() {
        let d1 = original("d1", "abc");
        let syn = make_synthetic(&d1, RewriteStyle::Qa, "x", 0, &TokenCounter::WhitespaceWords).unwrap();
        assert!(matches!(
            make_synthetic(&syn, RewriteStyle::Qa, "y", 0, &TokenCounter::WhitespaceWords),
            Err(RewriteError::NotOriginal(_))
        ));
    }

    #[test]
    fn chunking_at_paragraphs() {
        let d = original("long", "a b c\n\nd e\n\nf g h i\n\nj");
        let chunks = split_for_context(&d, &TokenCounter::WhitespaceWords, 5).unwrap();
        assert_eq!(chunks, alloc::vec!["a b c\n\nd e", "f g h i\n\nj"]);
        let whole = split_for_context(&d, &TokenCounter::WhitespaceWords, 100).unwrap();
        assert_eq!(whole, alloc::vec![d.text.as_str()]);
        let err = split_for_context(&d, &TokenCounter::WhitespaceWords, 3).unwrap_err();
        assert!(matches!(err, RewriteError::Oversize { tokens: 4, .. }));
        assert_eq!(join_chunks(&["x ", "y"]), "x\n\ny");
    }

    #[test]
    fn record_serialization_shape() {
        let ok = RewriteRecord::succeeded("d1", RewriteStyle::Qa, 2, "syn-1");
        assert!(ok.is_consistent());
        let bad = RewriteRecord::failed("d1", RewriteStyle::Easy, 5, "empty rewrite");
        assert!(bad.is_consistent());
        assert!(!bad.is_succeeded());
    }

    #[test]
    fn digests_track_content() {
        let a = TemplateSet::default();
        let b =
            TemplateSet::with_overrides([StyleTemplate::new(RewriteStyle::Qa, "s", "{document}").unwrap()]).unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), TemplateSet::default().digest());
        let s = SamplingParams::default();
        assert_ne!(
            s.digest(),
            SamplingParams {
                temperature: 0.7,
                ..s.clone()
            }
            .digest()
        );
    }
}
