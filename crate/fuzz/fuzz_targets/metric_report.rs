#![no_main]

use libfuzzer_sys::fuzz_target;
use mmsum::metrics::MetricReport;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = MetricReport::from_report_text(text);
    }
});
