#![no_main]

use bevcollab::comm::DemandRequest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = DemandRequest::deserialize(data) {
        assert_eq!(req.serialize().unwrap().as_slice(), data);
    }
});
