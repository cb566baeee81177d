#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;
use voxtrack::sim::EpisodeHeader;

fuzz_target!(|data: &[u8]| {
    let _ = EpisodeHeader::parse(data, Path::new("episode.json"));
});
