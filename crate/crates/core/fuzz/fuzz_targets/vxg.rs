#![no_main]

use libfuzzer_sys::fuzz_target;
use voxtrack::grid::VoxelGrid;

fuzz_target!(|data: &[u8]| {
    let Ok(grid) = VoxelGrid::from_vxg_bytes(data) else {
        return;
    };
    let mut first = Vec::new();
    grid.write_to(&mut first).expect("a parsed grid writes back");
    let again = VoxelGrid::from_vxg_bytes(&first).expect("written grid parses");
    let mut second = Vec::new();
    again.write_to(&mut second).unwrap();
    assert_eq!(first, second);
});
