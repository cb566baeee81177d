#![no_main]

use libfuzzer_sys::fuzz_target;
use voxtrack::track::TrajectoryFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = TrajectoryFile::parse(data) {
        let json = serde_json::to_vec(&t).unwrap();
        assert_eq!(TrajectoryFile::parse(&json).expect("written trajectory parses"), t);
    }
});
