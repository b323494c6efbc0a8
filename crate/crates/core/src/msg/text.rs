//! Text format for message definitions:
//!
//! ```text
//! # comment
//! sensor_msgs msg Image { height: u32; width: u32; step: u32; data: sequence<u8>; }
//! ```
//!
//! Definitions may span lines. Nested types are written `group/TypeName`.

use super::{FieldType, MessageTypeDef, MsgError, MsgKind, Scalar};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Punct(char),
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, MsgError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let mut chars = line.chars().peekable();
        while let Some(&c) = chars.peek() {
            if c.is_whitespace() {
                chars.next();
            } else if "{};:<>".contains(c) {
                out.push((lineno + 1, Tok::Punct(c)));
                chars.next();
            } else if c.is_alphanumeric() || c == '_' || c == '/' {
                let mut w = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_alphanumeric() || c == '_' || c == '/' || c == '-' {
                        w.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                out.push((lineno + 1, Tok::Word(w)));
            } else {
                return Err(MsgError::Parse { line: lineno + 1, msg: format!("unexpected character {c:?}") });
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn line(&self) -> usize {
        self.toks.get(self.pos).or(self.toks.last()).map(|t| t.0).unwrap_or(1)
    }

    fn err(&self, msg: impl Into<String>) -> MsgError {
        MsgError::Parse { line: self.line(), msg: msg.into() }
    }

    fn word(&mut self, what: &str) -> Result<String, MsgError> {
        match self.toks.get(self.pos) {
            Some((_, Tok::Word(w))) => {
                self.pos += 1;
                Ok(w.clone())
            }
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn punct(&mut self, p: char) -> Result<(), MsgError> {
        match self.toks.get(self.pos) {
            Some((_, Tok::Punct(c))) if *c == p => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err(format!("expected '{p}'"))),
        }
    }

    fn peek_punct(&self, p: char) -> bool {
        matches!(self.toks.get(self.pos), Some((_, Tok::Punct(c))) if *c == p)
    }

    fn field_type(&mut self) -> Result<FieldType, MsgError> {
        let w = self.word("field type")?;
        Ok(match w.as_str() {
            "u8" => FieldType::Scalar(Scalar::U8),
            "u16" => FieldType::Scalar(Scalar::U16),
            "u32" => FieldType::Scalar(Scalar::U32),
            "i32" => FieldType::Scalar(Scalar::I32),
            "f32" => FieldType::Scalar(Scalar::F32),
            "string" => FieldType::String,
            "sequence" => {
                self.punct('<')?;
                let inner = self.field_type()?;
                self.punct('>')?;
                FieldType::sequence(inner)
            }
            other => match other.split_once('/') {
                Some((g, n)) if !g.is_empty() && !n.is_empty() && !n.contains('/') => FieldType::nested(g, n),
                _ => return Err(self.err(format!("unknown field type {other:?}"))),
            },
        })
    }

    fn definition(&mut self) -> Result<MessageTypeDef, MsgError> {
        let group = self.word("group name")?;
        let kind_word = self.word("kind")?;
        let kind = MsgKind::parse(&kind_word).ok_or_else(|| self.err(format!("unknown kind {kind_word:?}")))?;
        let name = self.word("type name")?;
        let mut def = MessageTypeDef::new(&group, kind, &name);
        self.punct('{')?;
        while !self.peek_punct('}') {
            let fname = self.word("field name")?;
            self.punct(':')?;
            let ty = self.field_type()?;
            self.punct(';')?;
            def = def.field(&fname, ty);
        }
        self.punct('}')?;
        Ok(def)
    }
}

pub fn parse_definitions(text: &str) -> Result<Vec<MessageTypeDef>, MsgError> {
    let mut p = Parser { toks: tokenize(text)?, pos: 0 };
    let mut defs = Vec::new();
    while p.pos < p.toks.len() {
        defs.push(p.definition()?);
    }
    Ok(defs)
}

/// One definition per line, re-parseable by [`parse_definitions`].
pub fn render_definitions(defs: &[MessageTypeDef]) -> String {
    defs.iter().map(|d| format!("{d}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msg::tests_support::image_def;

    #[test]
    fn parses_multiline_with_comments() {
        let text = "
            # camera frame
            sensor_msgs msg Image {
                height: u32; width: u32;
                step: u32;
                data: sequence<u8>; # pixels
            }
            application_msgs srv-request SobelSrv { img: sensor_msgs/Image; }
            g msg Empty {}
        ";
        let defs = parse_definitions(text).unwrap();
        assert_eq!(defs.len(), 3);
        assert_eq!(defs[0], image_def());
        assert_eq!(defs[1].fields[0].ty, FieldType::nested("sensor_msgs", "Image"));
        assert!(defs[2].fields.is_empty());
    }

    #[test]
    fn render_round_trip() {
        let defs =
            parse_definitions("g action-goal G { a: sequence<sequence<i32>>; s: string; n: g/Other; x: f32; y: u16; }")
                .unwrap();
        assert_eq!(parse_definitions(&render_definitions(&defs)).unwrap(), defs);
    }

    #[test]
    fn reports_errors_with_line() {
        assert!(matches!(parse_definitions("g msg A { x: u64; }"), Err(MsgError::Parse { line: 1, .. })));
        assert!(matches!(parse_definitions("g bogus A {}"), Err(MsgError::Parse { .. })));
        assert!(matches!(parse_definitions("g msg A {\n x: u8\n}"), Err(MsgError::Parse { line: 3, .. })));
        assert!(matches!(parse_definitions("g msg A { x: u8; "), Err(MsgError::Parse { .. })));
        assert!(parse_definitions("").unwrap().is_empty());
    }
}
