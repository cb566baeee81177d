#![no_main]

use libfuzzer_sys::fuzz_target;
use voxtrack::net::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(ckpt) = Checkpoint::from_bytes(data) else {
        return;
    };
    let first = ckpt.to_bytes();
    let again = Checkpoint::from_bytes(&first).expect("written checkpoint parses");
    assert_eq!(first, again.to_bytes());
});
