#![no_main]

use libfuzzer_sys::fuzz_target;
use ttt_seg::tensor::{decode_tsr, encode_tsr};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_tsr(data) {
        let again = encode_tsr(&t.tensor, t.dtype).expect("decoded tensors re-encode");
        assert_eq!(again.as_slice(), data);
    }
});
