#![no_main]

use libfuzzer_sys::fuzz_target;
use voxtrack::learn::TrainConfig;
use voxtrack::track::TrackerConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<TrainConfig>(data) {
        let _ = cfg.validate();
    }
    let _ = serde_json::from_slice::<TrackerConfig>(data);
});
