//! Text form of service calls: `name(arg, ...)`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("syntax error at byte {position}: {message}")]
pub struct SyntaxError {
    pub position: usize,
    pub message: String,
}

/// A call split into name and raw argument strings. Not yet checked against
/// any registry.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct InvocationDraft {
    pub name: String,
    pub args: Vec<String>,
}

/// A typed argument after validation.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
#[serde(untagged)]
pub enum ArgValue {
    Int(i64),
    Text(String),
}

impl ArgValue {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            ArgValue::Int(v) => Some(*v),
            ArgValue::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            ArgValue::Text(v) => Some(v),
            ArgValue::Int(_) => None,
        }
    }
}

fn is_bare(text: &str) -> bool {
    !text.is_empty()
        && text
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Quotes text arguments that would not survive bare parsing.
pub fn format_arg(arg: &str) -> String {
    if is_bare(arg) {
        arg.to_string()
    } else {
        let escaped = arg.replace('\\', "\\\\").replace('"', "\\\"");
        format!("\"{escaped}\"")
    }
}

impl fmt::Display for ArgValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArgValue::Int(v) => write!(f, "{v}"),
            ArgValue::Text(t) => f.write_str(&format_arg(t)),
        }
    }
}

/// Formats `name(a, b)` with arguments separated by `", "`.
pub fn format_call<T: fmt::Display>(name: &str, args: &[T]) -> String {
    let args: Vec<String> = args.iter().map(ToString::to_string).collect();
    format!("{name}({})", args.join(", "))
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    fn error(&self, message: impl Into<String>) -> SyntaxError {
        SyntaxError { position: self.pos, message: message.into() }
    }

    fn quoted(&mut self, quote: char) -> Result<String, SyntaxError> {
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return Err(self.error("unterminated string")),
                Some('\\') => match self.bump() {
                    Some(c) => out.push(c),
                    None => return Err(self.error("unterminated escape")),
                },
                Some(c) if c == quote => return Ok(out),
                Some(c) => out.push(c),
            }
        }
    }

    fn bare(&mut self) -> Result<String, SyntaxError> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            match c {
                ',' | ')' => break,
                '(' | '"' | '\'' => return Err(self.error(format!("unexpected {c:?} in argument"))),
                _ => {
                    self.bump();
                }
            }
        }
        let arg = self.text[start..self.pos].trim();
        if arg.is_empty() {
            return Err(self.error("empty argument"));
        }
        Ok(arg.to_string())
    }
}

/// Parses `name(arg, ...)`. Whitespace is allowed around tokens, string
/// arguments may be quoted with `"` or `'`, and nullary calls use `()`.
pub fn parse_command(text: &str) -> Result<InvocationDraft, SyntaxError> {
    let mut cur = Cursor { text, pos: 0 };
    cur.skip_ws();
    let start = cur.pos;
    while cur.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
        cur.bump();
    }
    let name = &text[start..cur.pos];
    if name.is_empty() {
        return Err(cur.error("missing service name"));
    }
    if name.starts_with(|c: char| c.is_ascii_digit()) {
        return Err(SyntaxError { position: start, message: "service name starts with a digit".into() });
    }
    cur.skip_ws();
    if cur.bump() != Some('(') {
        return Err(cur.error("expected '('"));
    }
    let mut args = Vec::new();
    cur.skip_ws();
    if cur.peek() == Some(')') {
        cur.bump();
    } else {
        loop {
            cur.skip_ws();
            let arg = match cur.peek() {
                Some(q @ ('"' | '\'')) => {
                    cur.bump();
                    cur.quoted(q)?
                }
                Some(_) => cur.bare()?,
                None => return Err(cur.error("unbalanced parentheses")),
            };
            args.push(arg);
            cur.skip_ws();
            match cur.bump() {
                Some(',') => continue,
                Some(')') => break,
                Some(c) => return Err(cur.error(format!("unexpected {c:?} after argument"))),
                None => return Err(cur.error("unbalanced parentheses")),
            }
        }
    }
    cur.skip_ws();
    if cur.pos != text.len() {
        return Err(cur.error("trailing characters after call"));
    }
    Ok(InvocationDraft { name: name.to_string(), args })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn draft(name: &str, args: &[&str]) -> InvocationDraft {
        InvocationDraft { name: name.into(), args: args.iter().map(|a| a.to_string()).collect() }
    }

    #[test]
    fn parses_basic_forms() {
        assert_eq!(parse_command("wait(5)").unwrap(), draft("wait", &["5"]));
        assert_eq!(parse_command("pass()").unwrap(), draft("pass", &[]));
        assert_eq!(
            parse_command("  conveyor_belt_run( forward ,10 ) ").unwrap(),
            draft("conveyor_belt_run", &["forward", "10"])
        );
        assert_eq!(
            parse_command("send_alert_to_human_supervisor('stuck, at 0.3 m')").unwrap(),
            draft("send_alert_to_human_supervisor", &["stuck, at 0.3 m"])
        );
        assert_eq!(parse_command(r#"f("a \"q\" b")"#).unwrap(), draft("f", &[r#"a "q" b"#]));
        assert_eq!(parse_command("pass ( )").unwrap(), draft("pass", &[]));
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "conveyor_belt_run(forward, 10",
            "wait 5",
            "(5)",
            "",
            "wait(5))",
            "wait(5) now",
            "wait(,5)",
            "wait(5,)",
            "wait(\"5)",
            "wait((5))",
            "9lives()",
        ] {
            assert!(parse_command(bad).is_err(), "{bad:?} should not parse");
        }
    }

    #[test]
    fn format_quotes_when_needed() {
        assert_eq!(format_call("wait", &[ArgValue::Int(5)]), "wait(5)");
        assert_eq!(
            format_call("conveyor_belt_run", &[ArgValue::Text("forward".into()), ArgValue::Int(10)]),
            "conveyor_belt_run(forward, 10)"
        );
        assert_eq!(format_call::<ArgValue>("pass", &[]), "pass()");
        assert_eq!(format_arg("two words"), "\"two words\"");
        assert_eq!(format_arg(""), "\"\"");
    }

    proptest! {
        #[test]
        fn format_then_parse_round_trips(
            name in "[a-z_][a-z0-9_]{0,20}",
            args in proptest::collection::vec("[ -~]{0,24}", 0..4),
        ) {
            let values: Vec<ArgValue> = args.iter().map(|a| ArgValue::Text(a.clone())).collect();
            let text = format_call(&name, &values);
            let parsed = parse_command(&text).unwrap();
            prop_assert_eq!(parsed.name, name);
            // bare arguments are trimmed, so compare against trimmed-if-bare
            let expected: Vec<String> = args.iter().map(|a| if is_bare(a) { a.trim().to_string() } else { a.clone() }).collect();
            prop_assert_eq!(parsed.args, expected);
        }
    }
}
