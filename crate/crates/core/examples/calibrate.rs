//! Runs the connectivity scenarios over a seed range and prints per-seed
//! barriers and the buffer-ablation comparison, for choosing and checking
//! acceptance thresholds.
//!
//! ```text
//! cargo run --release --example calibrate -- 101 120 [template.json]
//! ```
//! `template.json`, when given, is a full scenario configuration whose name
//! and seeds are replaced per run.

use std::time::Instant;

use basinmerge::experiments::{run_scenario, ScenarioConfig, ScenarioName};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let lo: u64 = args.first().map_or(Ok(101), |s| s.parse())?;
    let hi: u64 = args.get(1).map_or(Ok(120), |s| s.parse())?;
    let template: Option<ScenarioConfig> = match args.get(2) {
        Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    let seeds: Vec<u64> = (lo..=hi).collect();
    let scenarios = [ScenarioName::SharedPretrain, ScenarioName::RandomInit, ScenarioName::SharedInitNoPretrain];
    let mut barriers = Vec::new();
    for name in scenarios {
        let cfg = match &template {
            Some(t) => ScenarioConfig { name, seeds: seeds.clone(), ..t.clone() },
            None => ScenarioConfig::new(name, seeds.clone()),
        };
        let start = Instant::now();
        let report = run_scenario(&cfg)?;
        let arm = name.as_str();
        let b = report.stat(&format!("barrier.{arm}")).unwrap();
        let e = report.stat(&format!("endpoint_harmonic.{arm}")).unwrap();
        let m = report.stat(&format!("harmonic.{arm}.gaussian")).unwrap();
        println!(
            "{arm:<24} barrier median {:6.2} min {:6.2} max {:6.2} | endpoint H median {:6.2} | midpoint H median {:6.2} | {:.1}s",
            b.median,
            b.min,
            b.max,
            e.median,
            m.median,
            start.elapsed().as_secs_f64()
        );
        println!("  barriers: {:?}", b.values.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
        if name == ScenarioName::SharedPretrain {
            let ident = report.seeds.iter().filter(|s| s.identity_alignment == Some(true)).count();
            println!("  identity alignment: {ident}/{}", report.seeds.len());
        }
        barriers.push(b.values.clone());
    }
    let ordered = barriers[0].iter().zip(&barriers[1]).filter(|(s, r)| s < r).count();
    println!("shared_pretrain < random_init on {ordered}/{} seeds", seeds.len());

    let cfg = match &template {
        Some(t) => ScenarioConfig { name: ScenarioName::BufferAblation, seeds: seeds.clone(), ..t.clone() },
        None => ScenarioConfig::new(ScenarioName::BufferAblation, seeds.clone()),
    };
    let start = Instant::now();
    let report = run_scenario(&cfg)?;
    let g = report.stat("harmonic.gaussian.gaussian").unwrap();
    let k = report.stat("harmonic.keep_first.keep_first").unwrap();
    let wins = g.values.iter().zip(&k.values).filter(|(g, k)| g >= k).count();
    println!(
        "buffer_ablation          midpoint H median gaussian {:6.2} keep_first {:6.2} | gaussian >= keep_first on {wins}/{} seeds | {:.1}s",
        g.median,
        k.median,
        seeds.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
