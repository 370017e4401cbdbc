//! Reserved token ids shared by the corpus and the model vocabulary.

/// Empty text condition used for classifier-free guidance.
pub const NULL_TOKEN: u32 = 0;

/// End-of-transcript terminal for recognition.
pub const END_TOKEN: u32 = 1;

/// Smallest id that carries content (has frames).
pub const FIRST_CONTENT_TOKEN: u32 = 2;

pub fn is_content(token: u32) -> bool {
    token >= FIRST_CONTENT_TOKEN
}

/// Content tokens with the terminal (and anything after it) removed.
pub fn strip_terminal(tokens: &[u32]) -> &[u32] {
    match tokens.iter().position(|&t| t == END_TOKEN) {
        Some(p) => &tokens[..p],
        None => tokens,
    }
}
