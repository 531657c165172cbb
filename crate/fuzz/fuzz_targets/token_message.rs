#![no_main]

use bevcollab::comm::TokenMessage;
use libfuzzer_sys::fuzz_target;

// Any buffer that decodes must re-encode to the same bytes.
fuzz_target!(|data: &[u8]| {
    let Ok(msg) = TokenMessage::deserialize(data) else {
        return;
    };
    let bytes = msg.serialize().expect("decoded message re-encodes");
    assert_eq!(bytes.len(), msg.encoded_len());
    assert_eq!(bytes.as_slice(), data);
});
