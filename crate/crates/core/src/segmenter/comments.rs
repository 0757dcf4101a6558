/// Result of comment stripping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stripped {
    pub text: String,
    /// A `/*` without a closing `*/` swallowed the rest of the input.
    pub unterminated_block: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum State {
    Code,
    LineComment,
    BlockComment,
    Literal(char),
}

/// Removes `//` and `/* */` comments from C-like source.
///
/// String and character literals are respected. Every newline is kept,
/// including those inside block comments, so line `i` of the output is line
/// `i` of the input with its comments removed.
pub fn strip_comments(source: &str) -> String {
    let stripped = strip_comments_checked(source);
    if stripped.unterminated_block {
        log::warn!("unterminated block comment; stripped to end of input");
    }
    stripped.text
}

pub fn strip_comments_checked(source: &str) -> Stripped {
    let mut out = String::with_capacity(source.len());
    let mut state = State::Code;
    let mut chars = source.chars().peekable();
    while let Some(c) = chars.next() {
        match state {
            State::Code => match c {
                '/' if chars.peek() == Some(&'/') => {
                    chars.next();
                    state = State::LineComment;
                }
                '/' if chars.peek() == Some(&'*') => {
                    chars.next();
                    state = State::BlockComment;
                }
                '"' | '\'' => {
                    out.push(c);
                    state = State::Literal(c);
                }
                _ => out.push(c),
            },
            State::LineComment => match c {
                '\n' => {
                    out.push('\n');
                    state = State::Code;
                }
                // A backslash-newline continues the comment onto the next line.
                '\\' if chars.peek() == Some(&'\n') => {
                    chars.next();
                    out.push('\n');
                }
                _ => {}
            },
            State::BlockComment => match c {
                '*' if chars.peek() == Some(&'/') => {
                    chars.next();
                    state = State::Code;
                }
                '\n' => out.push('\n'),
                _ => {}
            },
            State::Literal(quote) => {
                out.push(c);
                match c {
                    '\\' => {
                        if let Some(next) = chars.next() {
                            out.push(next);
                        }
                    }
                    // Literals never span lines; recover at the newline.
                    '\n' => state = State::Code,
                    _ if c == quote => state = State::Code,
                    _ => {}
                }
            }
        }
    }
    Stripped {
        text: out,
        unterminated_block: state == State::BlockComment,
    }
}
