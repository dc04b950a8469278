//! Canonical encodings of one message per protocol message type, checked
//! against files under `tests/golden/`. Regenerate with
//! `MTM_SIM_UPDATE_GOLDEN=1 cargo test -p mtm-sim --test golden`.

use std::path::PathBuf;

use mtm_core::protocols::{MessageType, ProtocolMessage};
use mtm_sim::samples::representative_messages;

fn golden_path(t: MessageType) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{}.hex", t.name()))
}

fn to_hex(bytes: &[u8]) -> String {
    let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
    let mut out = String::new();
    for line in hex.as_bytes().chunks(64) {
        out.push_str(std::str::from_utf8(line).unwrap());
        out.push('\n');
    }
    out
}

fn from_hex(text: &str) -> Vec<u8> {
    let digits: Vec<u8> = text.bytes().filter(|b| !b.is_ascii_whitespace()).collect();
    digits
        .chunks(2)
        .map(|pair| u8::from_str_radix(std::str::from_utf8(pair).unwrap(), 16).unwrap())
        .collect()
}

#[test]
fn encodings_match_golden_files() {
    let messages = representative_messages();
    assert_eq!(messages.len(), MessageType::ALL.len());
    let update = std::env::var_os("MTM_SIM_UPDATE_GOLDEN").is_some();
    for m in &messages {
        let path = golden_path(m.message_type());
        let bytes = m.encode();
        if update {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, to_hex(&bytes)).unwrap();
            continue;
        }
        let text =
            std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let golden = from_hex(&text);
        assert!(
            golden == bytes,
            "{} differs from {}",
            m.message_type().name(),
            path.display()
        );
        assert_eq!(&ProtocolMessage::decode(&golden).unwrap(), m);
    }
}

#[test]
fn every_type_is_represented_once() {
    let types: Vec<MessageType> = representative_messages()
        .iter()
        .map(ProtocolMessage::message_type)
        .collect();
    assert_eq!(types, MessageType::ALL.to_vec());
}
