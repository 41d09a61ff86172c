//! Text to fixed-length token-id sequences and back.
//!
//! A vocabulary is specials first — `[PAD]` at id 0, `[UNK]` at id 1, then
//! one language token per configured language — followed by content tokens
//! ordered by corpus frequency (ties broken lexicographically). Language
//! tokens go on the source side only: the encoder input starts with
//! `<src> <tgt>` so the decoder sees the target-language signal through
//! cross-attention while target sequences stay purely content.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMode {
    Char,
    Word,
}

impl TokenMode {
    pub fn parse(s: &str) -> Result<TokenMode> {
        match s {
            "char" => Ok(TokenMode::Char),
            "word" => Ok(TokenMode::Word),
            other => Err(Error::Config(format!("unknown tokenizer mode `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TokenMode::Char => "char",
            TokenMode::Word => "word",
        }
    }
}

/// Which stream a sequence is encoded for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Encoder input: `<src> <tgt>` language tokens, then content.
    Source,
    /// Decoder stream: content only.
    Target,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    mode: TokenMode,
    /// All token strings, indexed by id. Specials first.
    tokens: Vec<String>,
    /// Content-token lookup (specials are addressed by role, not string).
    content_ids: HashMap<String, usize>,
    /// (tag, id) per configured language, in configuration order.
    langs: Vec<(String, usize)>,
}

fn validate_tag(tag: &str) -> Result<()> {
    if tag.is_empty()
        || !tag
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err(Error::Vocab(format!(
            "language tag `{tag}` must be non-empty ascii alphanumeric/_/-"
        )));
    }
    Ok(())
}

pub fn tokenize(text: &str, mode: TokenMode) -> Vec<String> {
    match mode {
        TokenMode::Char => text.chars().map(|c| c.to_string()).collect(),
        TokenMode::Word => text.split_whitespace().map(|w| w.to_string()).collect(),
    }
}

impl Vocabulary {
    /// Build from a corpus. Keeps the most frequent tokens up to a total
    /// size of `max_k` (including specials); ties break lexicographically.
    pub fn build<I, S>(
        corpus: I,
        mode: TokenMode,
        max_k: usize,
        languages: &[String],
    ) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for tag in languages {
            validate_tag(tag)?;
        }
        {
            let mut sorted: Vec<&String> = languages.iter().collect();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != languages.len() {
                return Err(Error::Vocab("duplicate language tags".into()));
            }
        }
        let n_specials = 2 + languages.len();
        if max_k < n_specials + 2 {
            return Err(Error::Vocab(format!(
                "max_K = {max_k} too small: need at least {} for specials plus 2 content tokens",
                n_specials + 2
            )));
        }

        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut saw_any = false;
        for line in corpus {
            saw_any = true;
            for tok in tokenize(line.as_ref(), mode) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !saw_any || counts.is_empty() {
            return Err(Error::Vocab("empty corpus".into()));
        }

        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_k - n_specials);

        let mut tokens = Vec::with_capacity(n_specials + ranked.len());
        tokens.push("[PAD]".to_string());
        tokens.push("[UNK]".to_string());
        let mut langs = Vec::with_capacity(languages.len());
        for tag in languages {
            langs.push((tag.clone(), tokens.len()));
            tokens.push(format!("<{tag}>"));
        }
        let mut content_ids = HashMap::new();
        for (tok, _) in ranked {
            content_ids.insert(tok.clone(), tokens.len());
            tokens.push(tok);
        }

        Ok(Vocabulary {
            mode,
            tokens,
            content_ids,
            langs,
        })
    }

    pub fn k(&self) -> usize {
        self.tokens.len()
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn n_specials(&self) -> usize {
        2 + self.langs.len()
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.langs.iter().map(|(tag, _)| tag.as_str())
    }

    pub fn lang_id(&self, tag: &str) -> Result<usize> {
        self.langs
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::UnknownLanguage(tag.to_string()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Encode to exactly `len` ids: language tokens (source side only),
    /// content (unknowns map to `[UNK]`), then `[PAD]`s; truncated at `len`.
    pub fn encode(
        &self,
        text: &str,
        src_lang: &str,
        tgt_lang: &str,
        len: usize,
        side: Side,
    ) -> Result<Vec<usize>> {
        let src_id = self.lang_id(src_lang)?;
        let tgt_id = self.lang_id(tgt_lang)?;
        let mut ids = Vec::with_capacity(len);
        if side == Side::Source {
            ids.push(src_id);
            ids.push(tgt_id);
        }
        for tok in tokenize(text, self.mode) {
            ids.push(self.content_ids.get(&tok).copied().unwrap_or(UNK_ID));
        }
        ids.truncate(len);
        ids.resize(len, PAD_ID);
        Ok(ids)
    }

    /// Concatenate content tokens, skipping specials wherever they occur.
    /// Model samples need not respect canonical padding.
    pub fn decode(&self, ids: &[usize]) -> String {
        let n_specials = self.n_specials();
        let mut parts = Vec::new();
        for &id in ids {
            if id < n_specials || id >= self.tokens.len() {
                continue;
            }
            parts.push(self.tokens[id].as_str());
        }
        match self.mode {
            TokenMode::Char => parts.concat(),
            TokenMode::Word => parts.join(" "),
        }
    }

    /// Serialize as the versioned text format: a header listing the mode
    /// and specials, then one escaped token per line in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("cdmt-vocab v1\n");
        let _ = writeln!(out, "mode {}", self.mode.as_str());
        let mut specials = format!("specials pad={PAD_ID} unk={UNK_ID}");
        for (tag, id) in &self.langs {
            let _ = write!(specials, " lang:{tag}={id}");
        }
        out.push_str(&specials);
        out.push('\n');
        let _ = writeln!(out, "count {}", self.tokens.len());
        for tok in &self.tokens {
            out.push_str(&escape(tok));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vocabulary> {
        let mut lines = text.lines();
        let bad = |msg: &str| Error::Vocab(format!("vocabulary file: {msg}"));
        if lines.next() != Some("cdmt-vocab v1") {
            return Err(bad("missing `cdmt-vocab v1` header"));
        }
        let mode_line = lines.next().ok_or_else(|| bad("missing mode line"))?;
        let mode = TokenMode::parse(
            mode_line
                .strip_prefix("mode ")
                .ok_or_else(|| bad("malformed mode line"))?,
        )?;
        let specials_line = lines.next().ok_or_else(|| bad("missing specials line"))?;
        let specials = specials_line
            .strip_prefix("specials ")
            .ok_or_else(|| bad("malformed specials line"))?;
        let mut langs = Vec::new();
        for part in specials.split(' ') {
            let (name, id) = part
                .split_once('=')
                .ok_or_else(|| bad("malformed specials entry"))?;
            let id: usize = id.parse().map_err(|_| bad("non-numeric special id"))?;
            match name {
                "pad" if id == PAD_ID => {}
                "unk" if id == UNK_ID => {}
                _ => {
                    let tag = name
                        .strip_prefix("lang:")
                        .ok_or_else(|| bad("unknown special kind"))?;
                    validate_tag(tag)?;
                    if id != 2 + langs.len() {
                        return Err(bad("language ids must be dense after pad/unk"));
                    }
                    langs.push((tag.to_string(), id));
                }
            }
        }
        let count_line = lines.next().ok_or_else(|| bad("missing count line"))?;
        let count: usize = count_line
            .strip_prefix("count ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad("malformed count line"))?;
        let tokens: Vec<String> = lines.map(unescape).collect::<Result<_>>()?;
        if tokens.len() != count {
            return Err(bad(&format!(
                "expected {count} tokens, found {}",
                tokens.len()
            )));
        }
        let n_specials = 2 + langs.len();
        if count < n_specials + 2 {
            return Err(bad("too few tokens for declared specials"));
        }
        let mut content_ids = HashMap::new();
        for (id, tok) in tokens.iter().enumerate().skip(n_specials) {
            content_ids.insert(tok.clone(), id);
        }
        Ok(Vocabulary {
            mode,
            tokens,
            content_ids,
            langs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }
}

fn escape(tok: &str) -> String {
    let mut out = String::with_capacity(tok.len());
    for c in tok.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            ' ' => out.push_str("\\s"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(line: &str) -> Result<String> {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            Some('s') => out.push(' '),
            other => {
                return Err(Error::Vocab(format!(
                    "bad escape `\\{}` in vocabulary file",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(out)
}
