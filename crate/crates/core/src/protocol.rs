//! Parsing of model replies: fenced blocks and `key: value` tag lines.

/// A fenced block: the info string after the opening fence and the inner text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedBlock<'a> {
    pub info: &'a str,
    pub body: &'a str,
}

/// All ```-fenced blocks in `text`, in order. The body excludes the fence
/// lines; an unterminated trailing fence is ignored.
pub fn fenced_blocks(text: &str) -> Vec<FencedBlock<'_>> {
    let mut blocks = Vec::new();
    let mut offset = 0;
    let mut open: Option<(&str, usize)> = None;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_end_matches(['\n', '\r']);
        let start = offset;
        offset += line.len();
        let stripped = trimmed.trim_start();
        match open {
            None => {
                if let Some(info) = stripped.strip_prefix("```") {
                    open = Some((info.trim(), offset));
                }
            }
            Some((info, body_start)) => {
                if stripped.trim_end() == "```" {
                    blocks.push(FencedBlock {
                        info,
                        body: &text[body_start..start],
                    });
                    open = None;
                }
            }
        }
    }
    blocks
}

/// First fenced block whose info string equals one of `langs` (case-insensitive),
/// or the first block of any kind when `langs` is empty.
pub fn first_fenced<'a>(text: &'a str, langs: &[&str]) -> Option<FencedBlock<'a>> {
    fenced_blocks(text).into_iter().find(|b| {
        langs.is_empty() || langs.iter().any(|l| b.info.eq_ignore_ascii_case(l))
    })
}

/// Value of the first line of the form `key: value` (key case-insensitive,
/// leading `#`, `*` or whitespace ignored).
pub fn tag_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|line| {
        let line = line.trim_start_matches(|c: char| c.is_whitespace() || c == '#' || c == '*');
        let (k, v) = line.split_once(':')?;
        let k = k.trim_end_matches('*').trim();
        k.eq_ignore_ascii_case(key)
            .then(|| v.trim_matches(|c: char| c.is_whitespace() || c == '*'))
    })
}

/// Head and tail windows of `text`, each at most `window` bytes, joined by an
/// elision marker when anything was cut.
pub fn excerpt(text: &str, window: usize) -> String {
    if text.len() <= 2 * window {
        return text.to_string();
    }
    let head_end = floor_char_boundary(text, window);
    let tail_start = ceil_char_boundary(text, text.len() - window);
    format!(
        "{}\n[... {} bytes elided ...]\n{}",
        &text[..head_end],
        tail_start - head_end,
        &text[tail_start..]
    )
}

fn floor_char_boundary(s: &str, mut i: usize) -> usize {
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

fn ceil_char_boundary(s: &str, mut i: usize) -> usize {
    while !s.is_char_boundary(i) {
        i += 1;
    }
    i
}
