//! Plain-text prompt templates.
//!
//! A template file is split into sections by header lines that consist of
//! exactly `[system]`, `[user]` or `[assistant]`. Each section is optional and
//! may appear once; leading and trailing blank lines of a section are dropped.
//!
//! Inside a section, `{name}` is a placeholder and `{{` / `}}` are literal
//! braces. Recognized names:
//!
//! | placeholder      | value                                              |
//! |------------------|----------------------------------------------------|
//! | `{question}`     | question stem                                      |
//! | `{choices}`      | one `X. text` line per choice, in letter order     |
//! | `{first letter}` | first choice letter                                |
//! | `{last letter}`  | last choice letter                                 |
//! | `{reasoning}`    | one sampled reasoning (answer template)            |
//! | `{reasonings}`   | numbered reasonings to summarize                   |
//! | `{majority}`     | majority answer letter (summary template)          |
//! | `{transcript}`   | `Expert k:` entries separated by blank lines       |
//!
//! Each template kind accepts only the placeholders it can fill; anything else
//! is rejected when the template is parsed.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placeholder {
    Question,
    Choices,
    FirstLetter,
    LastLetter,
    Reasoning,
    Reasonings,
    Majority,
    Transcript,
}

impl Placeholder {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "question" => Placeholder::Question,
            "choices" => Placeholder::Choices,
            "first letter" => Placeholder::FirstLetter,
            "last letter" => Placeholder::LastLetter,
            "reasoning" => Placeholder::Reasoning,
            "reasonings" => Placeholder::Reasonings,
            "majority" => Placeholder::Majority,
            "transcript" => Placeholder::Transcript,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Question => "question",
            Placeholder::Choices => "choices",
            Placeholder::FirstLetter => "first letter",
            Placeholder::LastLetter => "last letter",
            Placeholder::Reasoning => "reasoning",
            Placeholder::Reasonings => "reasonings",
            Placeholder::Majority => "majority",
            Placeholder::Transcript => "transcript",
        }
    }
}

/// The four prompt templates used by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateKind {
    Reasoning,
    Answer,
    Review,
    Summary,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 4] = [
        TemplateKind::Reasoning,
        TemplateKind::Answer,
        TemplateKind::Review,
        TemplateKind::Summary,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::Reasoning => "reasoning.txt",
            TemplateKind::Answer => "answer.txt",
            TemplateKind::Review => "review.txt",
            TemplateKind::Summary => "summary.txt",
        }
    }

    fn allows(self, p: Placeholder) -> bool {
        use Placeholder::*;
        match self {
            TemplateKind::Reasoning => matches!(p, Question | Choices | FirstLetter | LastLetter),
            TemplateKind::Answer => matches!(p, Question | Choices | FirstLetter | LastLetter | Reasoning),
            TemplateKind::Review => matches!(p, Question | Choices | FirstLetter | LastLetter | Transcript),
            TemplateKind::Summary => matches!(p, Majority | Reasonings),
        }
    }

    pub(crate) fn default_text(self) -> &'static str {
        match self {
            TemplateKind::Reasoning => include_str!("../../templates/reasoning.txt"),
            TemplateKind::Answer => include_str!("../../templates/answer.txt"),
            TemplateKind::Review => include_str!("../../templates/review.txt"),
            TemplateKind::Summary => include_str!("../../templates/summary.txt"),
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("{kind}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { kind: TemplateKind, name: String },
    #[error("{kind}: placeholder {{{name}}} is not available in this template")]
    Unavailable { kind: TemplateKind, name: &'static str },
    #[error("{kind}: unbalanced brace at line {line}")]
    Unbalanced { kind: TemplateKind, line: usize },
    #[error("{kind}: section [{section}] appears twice")]
    DuplicateSection { kind: TemplateKind, section: String },
    #[error("{kind}: only an [assistant] section is allowed")]
    AnswerSections { kind: TemplateKind },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Section {
    pieces: Vec<Piece>,
}

impl Section {
    pub fn render(&self, fill: &dyn Fn(Placeholder) -> String) -> String {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(p) => out.push_str(&fill(*p)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub kind: TemplateKind,
    pub system: Option<Section>,
    pub user: Option<Section>,
    pub assistant: Option<Section>,
}

impl Template {
    pub fn parse(kind: TemplateKind, text: &str) -> Result<Self, TemplateError> {
        let mut system = None;
        let mut user = None;
        let mut assistant = None;
        let mut current: Option<(&'static str, usize, Vec<&str>)> = None;

        let finish = |section: Option<(&'static str, usize, Vec<&str>)>,
                      system: &mut Option<Section>,
                      user: &mut Option<Section>,
                      assistant: &mut Option<Section>|
         -> Result<(), TemplateError> {
            let Some((name, first_line, lines)) = section else {
                return Ok(());
            };
            let slot = match name {
                "system" => system,
                "user" => user,
                _ => assistant,
            };
            if slot.is_some() {
                return Err(TemplateError::DuplicateSection {
                    kind,
                    section: name.into(),
                });
            }
            let body = lines.join("\n");
            *slot = Some(parse_section(kind, body.trim_matches('\n'), first_line)?);
            Ok(())
        };

        for (lineno, line) in text.lines().enumerate() {
            let header = match line.trim_end() {
                "[system]" => Some("system"),
                "[user]" => Some("user"),
                "[assistant]" => Some("assistant"),
                _ => None,
            };
            match header {
                Some(name) => {
                    finish(current.take(), &mut system, &mut user, &mut assistant)?;
                    current = Some((name, lineno + 2, Vec::new()));
                }
                None => match current.as_mut() {
                    Some((_, _, lines)) => lines.push(line),
                    // Text before the first header belongs to the user turn.
                    None if !line.trim().is_empty() => current = Some(("user", lineno + 1, vec![line])),
                    None => {}
                },
            }
        }
        finish(current.take(), &mut system, &mut user, &mut assistant)?;

        if kind == TemplateKind::Answer && (system.is_some() || user.is_some()) {
            return Err(TemplateError::AnswerSections { kind });
        }
        Ok(Template {
            kind,
            system,
            user,
            assistant,
        })
    }

    pub fn builtin(kind: TemplateKind) -> Self {
        Self::parse(kind, kind.default_text()).expect("built-in templates parse")
    }
}

fn parse_section(kind: TemplateKind, body: &str, first_line: usize) -> Result<Section, TemplateError> {
    let mut pieces = Vec::new();
    let mut literal = String::new();
    let mut chars = body.chars().peekable();
    let mut line = first_line;

    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                literal.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                literal.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some('{') | Some('\n') | None => return Err(TemplateError::Unbalanced { kind, line }),
                        Some(c) => name.push(c),
                    }
                }
                let placeholder = Placeholder::parse(&name).ok_or_else(|| TemplateError::UnknownPlaceholder {
                    kind,
                    name: name.clone(),
                })?;
                if !kind.allows(placeholder) {
                    return Err(TemplateError::Unavailable {
                        kind,
                        name: placeholder.name(),
                    });
                }
                if !literal.is_empty() {
                    pieces.push(Piece::Literal(std::mem::take(&mut literal)));
                }
                pieces.push(Piece::Slot(placeholder));
            }
            '}' => return Err(TemplateError::Unbalanced { kind, line }),
            c => {
                if c == '\n' {
                    line += 1;
                }
                literal.push(c);
            }
        }
    }
    if !literal.is_empty() {
        pieces.push(Piece::Literal(literal));
    }
    Ok(Section { pieces })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill(p: Placeholder) -> String {
        format!("<{}>", p.name())
    }

    #[test]
    fn builtins_parse() {
        for kind in TemplateKind::ALL {
            let t = Template::builtin(kind);
            assert!(t.assistant.is_some(), "{kind}");
        }
        let r = Template::builtin(TemplateKind::Reasoning);
        assert_eq!(r.user.unwrap().render(&fill), "<question>\n<choices>");
        assert_eq!(r.assistant.unwrap().render(&fill), "Let us think step by step. First,");
        let review = Template::builtin(TemplateKind::Review);
        assert_eq!(review.assistant.unwrap().render(&fill), "");
    }

    #[test]
    fn escapes_and_errors() {
        let t = Template::parse(TemplateKind::Reasoning, "[user]\n{{literal}} {question}").unwrap();
        assert_eq!(t.user.unwrap().render(&fill), "{literal} <question>");

        assert_eq!(
            Template::parse(TemplateKind::Reasoning, "[user]\n{nope}").unwrap_err(),
            TemplateError::UnknownPlaceholder {
                kind: TemplateKind::Reasoning,
                name: "nope".into()
            }
        );
        assert!(matches!(
            Template::parse(TemplateKind::Summary, "[user]\n{question}"),
            Err(TemplateError::Unavailable { .. })
        ));
        assert!(matches!(
            Template::parse(TemplateKind::Reasoning, "[user]\nopen {question\n"),
            Err(TemplateError::Unbalanced { line: 2, .. })
        ));
        assert!(matches!(
            Template::parse(TemplateKind::Reasoning, "[user]\na\n[user]\nb"),
            Err(TemplateError::DuplicateSection { .. })
        ));
        assert!(matches!(
            Template::parse(TemplateKind::Answer, "[system]\nx\n[assistant]\n{reasoning}"),
            Err(TemplateError::AnswerSections { .. })
        ));
    }

    #[test]
    fn headerless_text_is_user_turn() {
        let t = Template::parse(TemplateKind::Reasoning, "\n{question}\n").unwrap();
        assert!(t.system.is_none());
        assert_eq!(t.user.unwrap().render(&fill), "<question>");
    }
}
