use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::hierarchy::GarmentHierarchy;
use crate::error::{Error, Result};

pub const SYSTEM_PROMPT: &str = include_str!("../../assets/describe_system_prompt.txt");

const PAIRED: &[&str] = &["shoe", "sock", "glove", "boot", "sandal", "sneaker", "earring"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionSource {
    Template,
    Llm,
    /// The language model failed twice; the template text was used.
    TemplateFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub text: String,
    pub source: DescriptionSource,
}

pub trait DescriptionBackend: Send + Sync {
    fn describe(&self, h: &GarmentHierarchy) -> Result<Description>;
}

/// Item structure handed to a description backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemStructure {
    pub category: String,
    pub top_level: Vec<String>,
    pub sub_level: Vec<(String, Vec<String>)>,
}

impl ItemStructure {
    pub fn from_hierarchy(h: &GarmentHierarchy) -> Self {
        Self {
            category: display_category(&h.category),
            top_level: h.top_level.clone(),
            sub_level: h
                .sub_level
                .iter()
                .map(|p| (capitalize(&display_category(&p.name)), p.attributes.clone()))
                .collect(),
        }
    }

    fn new(category: &str, top: &[&str], sub: &[(&str, &[&str])]) -> Self {
        let strings = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self {
            category: category.into(),
            top_level: strings(top),
            sub_level: sub.iter().map(|(n, a)| (n.to_string(), strings(a))).collect(),
        }
    }

    /// Indented dictionary layout used in the chat messages.
    pub fn render(&self) -> String {
        let q = |s: &str| serde_json::to_string(s).expect("string serializes");
        let list = |v: &[String]| format!("[{}]", v.iter().map(|s| q(s)).collect::<Vec<_>>().join(", "));
        let mut out = format!(
            "{{\n    \"category\": {},\n    \"top_level\": {},\n    \"sub_level\": ",
            q(&self.category),
            list(&self.top_level)
        );
        if self.sub_level.is_empty() {
            out.push_str("[]");
        } else {
            let rows: Vec<String> = self
                .sub_level
                .iter()
                .map(|(n, a)| format!("        {{{}: {}}}", q(n), list(a)))
                .collect();
            out.push_str(&format!("[\n{}\n    ]", rows.join(",\n")));
        }
        out.push_str("\n}");
        out
    }
}

/// The four worked examples sent ahead of every request.
pub fn in_context_samples() -> Vec<(ItemStructure, &'static str)> {
    vec![
        (
            ItemStructure::new(
                "coat",
                &["long", "wool"],
                &[("Collar", &["wide"]), ("Pockets", &["deep"]), ("Buttons", &["large"])],
            ),
            "A long wool coat with a wide collar, deep pockets and large buttons",
        ),
        (
            ItemStructure::new("trousers", &["slim-fit"], &[("Stitching", &["subtle"]), ("Leg", &["tapered"])]),
            "Slim-fit trousers with subtle stitching and a tapered leg",
        ),
        (ItemStructure::new("shirt", &["cotton"], &[]), "A cotton shirt"),
        (ItemStructure::new("shoe", &[], &[]), "A pair of shoes"),
    ]
}

/// First alternative of a category label, lowercased: `"shirt, blouse"` -> `"shirt"`.
pub fn display_category(category: &str) -> String {
    category.split(',').next().unwrap_or(category).trim().to_lowercase()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn is_plural(noun: &str) -> bool {
    noun.ends_with('s') && !noun.ends_with("ss")
}

fn article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn phrase(attrs: &[String], noun: &str) -> String {
    let mut words: Vec<&str> = attrs.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    words.push(noun);
    words.join(" ")
}

fn with_article(attrs: &[String], noun: &str) -> String {
    let p = phrase(attrs, noun);
    if is_plural(noun) || noun.ends_with("ing") {
        p
    } else {
        format!("{} {p}", article(&p))
    }
}

fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Deterministic sentence from an item structure.
pub fn template_text(item: &ItemStructure) -> String {
    let noun = item.category.to_lowercase();
    let head = if PAIRED.contains(&noun.as_str()) {
        format!("a pair of {}", phrase(&item.top_level, &format!("{noun}s")))
    } else {
        with_article(&item.top_level, &noun)
    };
    let parts: Vec<String> = item
        .sub_level
        .iter()
        .map(|(name, attrs)| with_article(attrs, &name.to_lowercase()))
        .collect();
    let mut text = capitalize(&head);
    if !parts.is_empty() {
        text.push_str(" with ");
        text.push_str(&join_list(&parts));
    }
    text
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateBackend;

impl DescriptionBackend for TemplateBackend {
    fn describe(&self, h: &GarmentHierarchy) -> Result<Description> {
        Ok(Description {
            text: template_text(&ItemStructure::from_hierarchy(h)),
            source: DescriptionSource::Template,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            content: content.into(),
        }
    }
}

/// System prompt, the worked examples as alternating turns, then the item.
pub fn build_messages(item: &ItemStructure) -> Vec<ChatMessage> {
    let mut m = vec![ChatMessage::new("system", SYSTEM_PROMPT)];
    for (input, output) in in_context_samples() {
        m.push(ChatMessage::new("user", input.render()));
        m.push(ChatMessage::new("assistant", format!("{{desc: {output}}}")));
    }
    m.push(ChatMessage::new("user", item.render()));
    m
}

/// Extracts the description from a `{desc: ...}` reply.
pub fn parse_reply(reply: &str) -> Option<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r#"(?s)\{\s*["']?desc["']?\s*:\s*(.*?)\s*\}"#).expect("valid regex"));
    let raw = re.captures(reply)?.get(1)?.as_str().trim();
    let text = raw
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .or_else(|| raw.strip_prefix('\'').and_then(|s| s.strip_suffix('\'')))
        .unwrap_or(raw)
        .trim();
    (!text.is_empty()).then(|| text.to_string())
}

pub trait ChatTransport: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String>;
}

/// Asks a chat model; an unusable reply is retried once, then the template
/// text is used and marked as a fallback.
pub struct LlmBackend<T: ChatTransport> {
    transport: T,
}

impl<T: ChatTransport> LlmBackend<T> {
    pub fn new(transport: T) -> Self {
        Self { transport }
    }
}

impl<T: ChatTransport> DescriptionBackend for LlmBackend<T> {
    fn describe(&self, h: &GarmentHierarchy) -> Result<Description> {
        let item = ItemStructure::from_hierarchy(h);
        let messages = build_messages(&item);
        for attempt in 0..2 {
            match self.transport.complete(&messages) {
                Ok(reply) => match parse_reply(&reply) {
                    Some(text) => {
                        return Ok(Description {
                            text,
                            source: DescriptionSource::Llm,
                        })
                    }
                    None => log::warn!("unparseable reply for item {} (attempt {})", h.annotation_id, attempt + 1),
                },
                Err(e) => log::warn!("chat request for item {} failed: {e}", h.annotation_id),
            }
        }
        Ok(Description {
            text: template_text(&item),
            source: DescriptionSource::TemplateFallback,
        })
    }
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpChatTransport {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    retries: usize,
    log: Option<Mutex<File>>,
}

impl HttpChatTransport {
    pub fn new(base_url: &str, model: &str, timeout: Duration, retries: usize) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Http(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.into(),
            retries,
            log: None,
        })
    }

    /// Appends every request and reply as one JSON line.
    pub fn with_prompt_log(mut self, path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.log = Some(Mutex::new(f));
        Ok(self)
    }

    fn record(&self, messages: &[ChatMessage], outcome: std::result::Result<&str, &str>) {
        let Some(log) = &self.log else { return };
        let line = match outcome {
            Ok(reply) => serde_json::json!({"url": self.url, "model": self.model, "messages": messages, "reply": reply}),
            Err(e) => serde_json::json!({"url": self.url, "model": self.model, "messages": messages, "error": e}),
        };
        if let Ok(mut f) = log.lock() {
            let _ = writeln!(f, "{line}");
        }
    }

    fn request_once(&self, messages: &[ChatMessage]) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": 0.0,
        });
        let resp = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| Error::Http(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Http(format!("status {status}")));
        }
        let v: serde_json::Value = resp.json().map_err(|e| Error::Http(e.to_string()))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Http("reply has no message content".into()))
    }
}

impl ChatTransport for HttpChatTransport {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let mut last = None;
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 * attempt as u64));
            }
            match self.request_once(messages) {
                Ok(reply) => {
                    self.record(messages, Ok(&reply));
                    return Ok(reply);
                }
                Err(e) => {
                    self.record(messages, Err(&e.to_string()));
                    last = Some(e);
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::Http("no attempt made".into())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketchy::hierarchy::GarmentPart;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn template_reproduces_worked_examples() {
        for (input, output) in in_context_samples() {
            assert_eq!(template_text(&input), output);
        }
    }

    #[test]
    fn first_example_renders_in_dictionary_layout() {
        let expected = "{\n    \"category\": \"coat\",\n    \"top_level\": [\"long\", \"wool\"],\n    \"sub_level\": [\n        {\"Collar\": [\"wide\"]},\n        {\"Pockets\": [\"deep\"]},\n        {\"Buttons\": [\"large\"]}\n    ]\n}";
        assert_eq!(in_context_samples()[0].0.render(), expected);
        let empty = "{\n    \"category\": \"shoe\",\n    \"top_level\": [],\n    \"sub_level\": []\n}";
        assert_eq!(in_context_samples()[3].0.render(), empty);
    }

    #[test]
    fn prompt_shape() {
        assert!(SYSTEM_PROMPT.starts_with("You are a fashion expert.  Describe"));
        assert!(SYSTEM_PROMPT.ends_with("{desc: description}."));
        assert_eq!(SYSTEM_PROMPT.lines().count(), 26);
        let m = build_messages(&in_context_samples()[2].0);
        assert_eq!(m.len(), 10);
        assert_eq!(m[2].content, "{desc: A long wool coat with a wide collar, deep pockets and large buttons}");
    }

    #[test]
    fn hierarchy_categories_are_simplified() {
        let h = GarmentHierarchy {
            annotation_id: 1,
            item_index: 0,
            category: "top, t-shirt, sweatshirt".into(),
            top_level: vec!["oversized".into()],
            sub_level: vec![GarmentPart {
                name: "sleeve".into(),
                attributes: vec!["elbow-length".into()],
                annotation_id: 2,
            }],
        };
        let d = TemplateBackend.describe(&h).unwrap();
        assert_eq!(d.text, "An oversized top with an elbow-length sleeve");
    }

    #[test]
    fn replies_are_parsed() {
        assert_eq!(parse_reply("{desc: A red top}").as_deref(), Some("A red top"));
        assert_eq!(parse_reply("Sure! {\"desc\": \"A red top\"}").as_deref(), Some("A red top"));
        assert_eq!(parse_reply("{'desc': 'Blue pants'}").as_deref(), Some("Blue pants"));
        assert_eq!(parse_reply("A red top"), None);
        assert_eq!(parse_reply("{desc: }"), None);
    }

    struct Scripted {
        replies: Vec<&'static str>,
        calls: AtomicUsize,
    }

    impl ChatTransport for Scripted {
        fn complete(&self, _: &[ChatMessage]) -> Result<String> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.replies[i.min(self.replies.len() - 1)].to_string())
        }
    }

    fn shoe() -> GarmentHierarchy {
        GarmentHierarchy {
            annotation_id: 1,
            item_index: 0,
            category: "shoe".into(),
            top_level: vec![],
            sub_level: vec![],
        }
    }

    #[test]
    fn retry_once_then_fallback() {
        let b = LlmBackend::new(Scripted {
            replies: vec!["garbage", "{desc: Black boots}"],
            calls: AtomicUsize::new(0),
        });
        let d = b.describe(&shoe()).unwrap();
        assert_eq!((d.text.as_str(), d.source), ("Black boots", DescriptionSource::Llm));

        let b = LlmBackend::new(Scripted {
            replies: vec!["garbage"],
            calls: AtomicUsize::new(0),
        });
        let d = b.describe(&shoe()).unwrap();
        assert_eq!(d.text, "A pair of shoes");
        assert_eq!(d.source, DescriptionSource::TemplateFallback);
        assert_eq!(b.transport.calls.load(Ordering::SeqCst), 2);
    }

    fn serve(responses: Vec<(u16, String)>) -> String {
        use std::io::{BufRead, BufReader, Read};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        format!("http://{addr}/v1")
    }

    #[test]
    fn http_transport_retries_and_logs() {
        let ok = serde_json::json!({"choices": [{"message": {"content": "{desc: A pair of red shoes}"}}]}).to_string();
        let url = serve(vec![(500, "{}".into()), (200, ok)]);
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("prompts.jsonl");
        let t = HttpChatTransport::new(&url, "test-model", Duration::from_secs(5), 1)
            .unwrap()
            .with_prompt_log(&log)
            .unwrap();
        let d = LlmBackend::new(t).describe(&shoe()).unwrap();
        assert_eq!(d.text, "A pair of red shoes");
        assert_eq!(d.source, DescriptionSource::Llm);
        let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0]["error"].is_string());
        assert_eq!(lines[1]["messages"][0]["content"], SYSTEM_PROMPT);
    }
}
