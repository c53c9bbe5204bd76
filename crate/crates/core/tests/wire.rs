mod support;

use std::fmt::Write as _;
use std::path::PathBuf;

use inferix_core::wire::{
    crc32, decode_message, encode_message, Decoder, ErrorPayload, FramePayload, Hello, PromptUpdatePayload,
    StreamMessage, WireError, ERR_RETROACTIVE,
};
use proptest::prelude::*;
use rand::Rng;
use support::rng;
use support::wire_gen::random_message;

fn golden_messages() -> Vec<(&'static str, StreamMessage)> {
    vec![
        (
            "hello",
            StreamMessage::Hello(Hello {
                width: 16,
                height: 16,
                frames_per_chunk: 4,
                num_chunks: 2,
                summary: "toy 2x2x8".into(),
            }),
        ),
        (
            "frame",
            StreamMessage::Frame(FramePayload {
                chunk_index: 1,
                frame_index: 3,
                width: 3,
                height: 2,
                pixels: vec![0, 1, 127, 128, 254, 255],
            }),
        ),
        (
            "prompt_update",
            StreamMessage::PromptUpdate(PromptUpdatePayload {
                effective_chunk: 5,
                text: "a fox at dusk".into(),
            }),
        ),
        (
            "metrics",
            StreamMessage::Metrics(vec![("block_ms".into(), 12.5), ("tokens_per_s".into(), -0.0)]),
        ),
        ("end", StreamMessage::End),
        (
            "error",
            StreamMessage::Error(ErrorPayload {
                code: ERR_RETROACTIVE,
                chunk: 1,
                message: "retroactive".into(),
            }),
        ),
    ]
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn unhex(s: &str) -> Vec<u8> {
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
        .collect()
}

/// `name<TAB>hex` per line. Set `INFERIX_BLESS=1` to rewrite.
#[test]
fn golden_vectors() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/wire_golden.tsv");
    let rendered: String = golden_messages()
        .iter()
        .map(|(name, m)| format!("{name}\t{}\n", hex(&encode_message(m).unwrap())))
        .collect();
    if std::env::var_os("INFERIX_BLESS").is_some() || !path.exists() {
        std::fs::write(&path, &rendered).unwrap();
    }
    let stored = std::fs::read_to_string(&path).unwrap();
    assert_eq!(stored, rendered, "wire layout changed; rerun with INFERIX_BLESS=1 if intended");
    for (line, (_, msg)) in stored.lines().zip(golden_messages()) {
        let bytes = unhex(line.split('\t').nth(1).unwrap());
        assert_eq!(decode_message(&bytes).unwrap(), (msg, bytes.len()));
    }
}

#[test]
fn end_layout() {
    let b = encode_message(&StreamMessage::End).unwrap();
    assert_eq!(b, [b'I', b'N', b'F', b'X', 1, 5, 0, 0, 0, 0, 0, 0, 0, 0]);
}

#[test]
fn crc_check_value() {
    assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
}

#[test]
fn every_single_bit_flip_detected() {
    let mut r = rng(9);
    for _ in 0..20 {
        let msg = random_message(&mut r);
        let bytes = encode_message(&msg).unwrap();
        for bit in 0..bytes.len() * 8 {
            let mut b = bytes.clone();
            b[bit / 8] ^= 1 << (bit % 8);
            if let Ok((m, _)) = decode_message(&b) { panic!("flip {bit} decoded as {m:?}") }
        }
    }
}

#[test]
fn decoder_reassembles_arbitrary_splits() {
    let mut r = rng(10);
    let msgs: Vec<StreamMessage> = (0..200).map(|_| random_message(&mut r)).collect();
    let stream: Vec<u8> = msgs.iter().flat_map(|m| encode_message(m).unwrap()).collect();
    let mut d = Decoder::new();
    let mut got = Vec::new();
    let mut pos = 0;
    while pos < stream.len() {
        let n = r.random_range(1..=97).min(stream.len() - pos);
        d.push(&stream[pos..pos + n]);
        pos += n;
        while let Some(m) = d.next_message().unwrap() {
            got.push(m);
        }
    }
    assert_eq!(got, msgs);
    assert_eq!(d.buffered(), 0);
}

#[test]
fn decode_never_reads_past_declared_length() {
    let a = encode_message(&StreamMessage::End).unwrap();
    let mut joined = a.clone();
    joined.extend_from_slice(b"garbage that is not a message");
    assert_eq!(decode_message(&joined).unwrap(), (StreamMessage::End, a.len()));
    assert_eq!(decode_message(&joined[a.len()..]).unwrap_err(), WireError::BadMagic);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn round_trip(seed in any::<u64>()) {
        let msg = random_message(&mut rng(seed));
        let bytes = encode_message(&msg).unwrap();
        let (back, used) = decode_message(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, msg);
    }
}
