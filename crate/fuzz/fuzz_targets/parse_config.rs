#![no_main]
use libfuzzer_sys::fuzz_target;
use mph_harness::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let mut c = ExperimentConfig::default();
    if c.apply_text(text).is_ok() {
        // whatever parsed must survive a round trip through its own text form
        let mut back = ExperimentConfig::default();
        back.apply_text(&c.to_text())
            .expect("to_text output parses");
        assert_eq!(back.to_text(), c.to_text());
    }
});
