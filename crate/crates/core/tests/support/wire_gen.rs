//! Random valid stream messages.

use inferix_core::wire::{ErrorPayload, FramePayload, Hello, PromptUpdatePayload, StreamMessage, MAX_PROMPT_BYTES};
use rand::Rng;

fn text(rng: &mut impl Rng, max_bytes: usize) -> String {
    const ALPHABET: &[&str] = &["a", "Z", " ", "7", "é", "ß", "→", "雪", "🦊", "\n"];
    let mut s = String::new();
    let target = rng.random_range(0..=max_bytes);
    while s.len() < target {
        let piece = ALPHABET[rng.random_range(0..ALPHABET.len())];
        if s.len() + piece.len() > max_bytes {
            break;
        }
        s.push_str(piece);
    }
    s
}

pub fn random_message(rng: &mut impl Rng) -> StreamMessage {
    match rng.random_range(0..6) {
        0 => StreamMessage::Hello(Hello {
            width: rng.random(),
            height: rng.random(),
            frames_per_chunk: rng.random(),
            num_chunks: rng.random(),
            summary: text(rng, 200),
        }),
        1 => {
            let width = rng.random_range(0..=40u16);
            let height = rng.random_range(0..=40u16);
            let pixels = (0..usize::from(width) * usize::from(height)).map(|_| rng.random()).collect();
            StreamMessage::Frame(FramePayload {
                chunk_index: rng.random(),
                frame_index: rng.random(),
                width,
                height,
                pixels,
            })
        }
        2 => {
            let max = if rng.random_bool(0.05) { MAX_PROMPT_BYTES } else { 64 };
            StreamMessage::PromptUpdate(PromptUpdatePayload {
                effective_chunk: rng.random(),
                text: text(rng, max),
            })
        }
        3 => StreamMessage::Metrics(
            (0..rng.random_range(0..8))
                .map(|_| {
                    let v = match rng.random_range(0..4) {
                        0 => 0.0,
                        1 => f64::MAX,
                        2 => -rng.random::<f64>() * 1e9,
                        _ => rng.random::<f64>(),
                    };
                    (text(rng, 24), v)
                })
                .collect(),
        ),
        4 => StreamMessage::End,
        _ => StreamMessage::Error(ErrorPayload {
            code: rng.random(),
            chunk: rng.random(),
            message: text(rng, 80),
        }),
    }
}
