//! Tolerant HTTP/1.x response head parser.
//!
//! Reads the status line and header lines up to the first blank line.
//! A segment may end inside the head, in which case only complete lines are
//! kept and the body is empty. Bodies are never decoded.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header<'a> {
    /// Lower-cased.
    pub name: String,
    pub value: &'a [u8],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response<'a> {
    pub version: &'a [u8],
    pub status: u16,
    pub reason: &'a [u8],
    pub headers: Vec<Header<'a>>,
    /// Bytes after the blank line; empty when the head is incomplete.
    pub body: &'a [u8],
    pub head_complete: bool,
}

impl<'a> Response<'a> {
    pub fn header(&self, name: &str) -> Option<&'a [u8]> {
        self.headers.iter().find(|h| h.name.eq_ignore_ascii_case(name)).map(|h| h.value)
    }
}

fn trim(mut b: &[u8]) -> &[u8] {
    while let [first, rest @ ..] = b {
        if first.is_ascii_whitespace() {
            b = rest;
        } else {
            break;
        }
    }
    while let [rest @ .., last] = b {
        if last.is_ascii_whitespace() {
            b = rest;
        } else {
            break;
        }
    }
    b
}

/// Splits at the next line terminator (CRLF or bare LF).
fn next_line(b: &[u8]) -> Option<(&[u8], &[u8])> {
    let nl = b.iter().position(|&c| c == b'\n')?;
    let line = if nl > 0 && b[nl - 1] == b'\r' { &b[..nl - 1] } else { &b[..nl] };
    Some((line, &b[nl + 1..]))
}

pub fn parse_response(payload: &[u8]) -> Option<Response<'_>> {
    if !payload.starts_with(b"HTTP/") {
        return None;
    }
    let (status_line, mut rest) = next_line(payload)?;
    let mut parts = status_line.splitn(3, |&c| c == b' ');
    let version = parts.next()?;
    let code = parts.next()?;
    if code.len() != 3 || !code.iter().all(u8::is_ascii_digit) {
        return None;
    }
    let status = std::str::from_utf8(code).ok()?.parse().ok()?;
    let reason = parts.next().unwrap_or(b"");
    let mut headers = Vec::new();
    let mut head_complete = false;
    while let Some((line, after)) = next_line(rest) {
        rest = after;
        if line.is_empty() {
            head_complete = true;
            break;
        }
        if let Some(colon) = line.iter().position(|&c| c == b':') {
            let name = String::from_utf8_lossy(trim(&line[..colon])).to_ascii_lowercase();
            headers.push(Header { name, value: trim(&line[colon + 1..]) });
        }
    }
    let body = if head_complete { rest } else { &[][..] };
    Some(Response { version, status, reason, headers, body, head_complete })
}
