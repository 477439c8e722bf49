use prism::baselines;
use prism::config::SynthConfig;
use prism::dataset::{self, shifted_family, SplitSpec};
use prism::oup;
use prism::tde::{self, TdeConfig};

fn main() -> Result<(), prism::Error> {
    // degeneration identity: mine(n=1, alpha=0) vs baseline_p0
    let synth = SynthConfig::default();
    let ds = dataset::generate_synthetic(&synth.name, &synth.domains, synth.window_len, synth.samples_per_class, 0)?;
    let split = SplitSpec { seed: 3, ..SplitSpec::default() };
    let (train, val, test) = dataset::split(&ds, &split)?;
    let cfg = TdeConfig { seed: 3, ..TdeConfig::default() };
    let p0 = baselines::baseline_p0(&train, &val, &test, &cfg)?;
    let degen = TdeConfig { n_domains: 1, alpha: 0.0, ..cfg.clone() };
    let (pack, _, _) = tde::mine(&train, &val, &degen)?;
    let mine_report = oup::evaluate(&pack, &test)?;
    println!("degeneration equal: {}", serde_json::to_string(&p0).unwrap() == serde_json::to_string(&mine_report).unwrap());

    // tiny-instance oracle fixture
    let two = dataset::generate_synthetic("twogroup", &shifted_family(2, 3, 4, 1.5, 0.1), 8, 24, 13)?;
    let split = SplitSpec { seed: 0, ..SplitSpec::default() };
    let (train, val, test) = dataset::split(&two, &split)?;
    let cfg = TdeConfig { seed: 0, n_domains: 2, ..TdeConfig::default() };
    let t0 = std::time::Instant::now();
    let (scheme, cost) = baselines::exhaustive_partition_oracle(&train, &val, &test, 2, "domain", &cfg)?;
    let mut sep = true;
    for ds2 in [&train, &test] {
        for s in &ds2.samples {
            let expect = scheme.assignment[&ds2.samples.iter().find(|t| t.meta["domain"] == s.meta["domain"]).unwrap().id];
            if scheme.assignment[&s.id] != expect {
                sep = false;
            }
        }
    }
    println!("oracle separates: {} total_error={:.4} ({:.0}s)", sep, cost.total_error, t0.elapsed().as_secs_f64());
    let (pack, _, _) = tde::mine(&train, &val, &cfg)?;
    let mined = baselines::scheme_from_pack(&pack, &[&train, &test])?;
    let mined_cost = baselines::eval_partition(&mined, &train, &val, &test, &cfg)?;
    println!("prism total_error={:.4} within slack: {}", mined_cost.total_error, mined_cost.total_error <= cost.total_error + 0.1);
    Ok(())
}
