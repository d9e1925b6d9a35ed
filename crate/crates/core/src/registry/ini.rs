//! Minimal INI reader/writer: `[section]` headers, `key = value` pairs,
//! `#`/`;` comments. Values are escaped so that any string round-trips.

use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<(String, String)>,
}

impl Section {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            line: 0,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, value: impl Into<String>) {
        self.entries.push((key.to_string(), value.into()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IniError {
    Syntax { line: usize, message: String },
    DuplicateSection { line: usize, name: String },
}

pub fn parse(text: &str) -> Result<Vec<Section>, IniError> {
    let mut sections: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| IniError::Syntax {
                line,
                message: "unterminated section header".into(),
            })?;
            let name = name.trim();
            if name.is_empty() {
                return Err(IniError::Syntax {
                    line,
                    message: "empty section name".into(),
                });
            }
            if sections.iter().any(|s| s.name == name) {
                return Err(IniError::DuplicateSection {
                    line,
                    name: name.to_string(),
                });
            }
            sections.push(Section {
                name: name.to_string(),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| IniError::Syntax {
            line,
            message: format!("expected `key = value`, found `{trimmed}`"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(IniError::Syntax {
                line,
                message: "empty key".into(),
            });
        }
        let section = sections.last_mut().ok_or_else(|| IniError::Syntax {
            line,
            message: "key outside of any section".into(),
        })?;
        if section.get(key).is_some() {
            return Err(IniError::Syntax {
                line,
                message: format!("duplicate key `{key}` in [{}]", section.name),
            });
        }
        section
            .entries
            .push((key.to_string(), value.trim().to_string()));
    }
    Ok(sections)
}

pub fn render(header: &str, sections: &[Section]) -> String {
    let mut out = String::new();
    for line in header.lines() {
        let _ = writeln!(out, "# {line}");
    }
    for (i, s) in sections.iter().enumerate() {
        if i > 0 || !header.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "[{}]", s.name);
        for (k, v) in &s.entries {
            if v.is_empty() {
                let _ = writeln!(out, "{k} =");
            } else {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
    }
    out
}

/// Escape a scalar so that `unescape(trim(escape(s))) == s`.
pub fn escape(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    for (i, &c) in chars.iter().enumerate() {
        let edge = i == 0 || i + 1 == chars.len();
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            ',' => out.push_str("\\,"),
            '#' if i == 0 => out.push_str("\\#"),
            c if edge && c.is_whitespace() => {
                let _ = write!(out, "\\u{{{:x}}}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(raw: &str) -> Result<String, String> {
    let mut out = String::with_capacity(raw.len());
    let mut it = raw.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            Some(',') => out.push(','),
            Some('#') => out.push('#'),
            Some('u') => {
                if it.next() != Some('{') {
                    return Err("malformed \\u escape".into());
                }
                let hex: String = it.by_ref().take_while(|&c| c != '}').collect();
                let code = u32::from_str_radix(&hex, 16)
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| format!("bad code point `{hex}`"))?;
                out.push(code);
            }
            Some(other) => return Err(format!("unknown escape `\\{other}`")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

pub fn escape_list(items: &[String]) -> String {
    items.iter().map(|s| escape(s)).collect::<Vec<_>>().join(", ")
}

pub fn unescape_list(raw: &str) -> Result<Vec<String>, String> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut parts = Vec::new();
    let mut cur = String::new();
    let mut chars = raw.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => {
                cur.push(c);
                if let Some(n) = chars.next() {
                    cur.push(n);
                }
            }
            ',' => parts.push(std::mem::take(&mut cur)),
            c => cur.push(c),
        }
    }
    parts.push(cur);
    parts.iter().map(|p| unescape(p.trim())).collect()
}
