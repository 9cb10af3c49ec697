//! Runs the three-method comparison on seeded synthetic datasets.
//!
//! `cargo run --release --example benchmark -- [seeds] [grey_sep] [chroma_sep] [noise] [first_seed]`

use facever::eval::{
    partition, run_loaded, synth_generate, ComparisonOptions, LoadedPartition, Method,
    ProtocolConfig, SynthParams,
};

fn main() -> facever::Result<()> {
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric argument"))
        .collect();
    let seeds = args.first().copied().unwrap_or(10.0) as u64;
    let defaults = SynthParams::default();
    let params = SynthParams {
        grey_separation: args.get(1).copied().unwrap_or(defaults.grey_separation),
        chroma_separation: args.get(2).copied().unwrap_or(defaults.chroma_separation),
        noise: args.get(3).copied().unwrap_or(defaults.noise),
        ..defaults
    };
    let opts = ComparisonOptions {
        timing: false,
        ..Default::default()
    };
    let mut ordered = 0;
    let first = args.get(4).copied().unwrap_or(0.0) as u64;
    for seed in first..first + seeds {
        let dir = std::env::temp_dir().join(format!("facever-bench-{seed}"));
        let manifest = synth_generate(&SynthParams { seed, ..params })?.write(&dir)?;
        let part = partition(&manifest, ProtocolConfig::I)?;
        let data = LoadedPartition::load(&manifest, &part, &opts.geometry)?;
        let report = run_loaded(&data, ProtocolConfig::I, &Method::ALL, &opts);
        let ter = |m| {
            report
                .get(m, ProtocolConfig::I)
                .map(|r| r.rates.ter)
                .unwrap_or(f64::NAN)
        };
        let (csf, grey, fused) = (ter(Method::Csf), ter(Method::Grey2D), ter(Method::Fused2D));
        let ok = fused <= grey && grey <= csf;
        ordered += usize::from(ok);
        let w = report
            .get(Method::Fused2D, ProtocolConfig::I)
            .and_then(|r| r.fusion_weight);
        println!(
            "seed {seed}: CSF {csf:6.2}  2D2G {grey:6.2}  2D2GC {fused:6.2}  w={w:?} {}",
            if ok { "ordered" } else { "" }
        );
        std::fs::remove_dir_all(&dir).ok();
    }
    println!("ordered in {ordered}/{seeds} seeds");
    Ok(())
}
