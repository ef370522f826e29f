use std::collections::HashMap;

use imup::bench::{
    append_report, gen_workload, read_report, run_attack_sim, run_server_bench, write_report, AttackReport,
    AttackScenario, CsvRow, ServerBenchConfig, WorkloadSpec,
};
use imup::{ModuleId, ServerMetrics};

/// Least-squares slope of log(frequency) against log(rank).
fn loglog_slope(counts: &[u64]) -> f64 {
    let pts: Vec<(f64, f64)> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| (((i + 1) as f64).ln(), (c as f64).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn zipf_rank_frequency_slope() {
    let rank: Vec<ModuleId> = (0..200).map(ModuleId).collect();
    let spec = WorkloadSpec {
        min_per_request: 1,
        max_per_request: 1,
        ..WorkloadSpec::new(200, 100_000, 12)
    };
    let mut counts = vec![0u64; 200];
    for req in gen_workload(&spec, &rank).unwrap() {
        for id in req {
            counts[id.0 as usize] += 1;
        }
    }
    let slope = loglog_slope(&counts);
    assert!((slope + 1.0).abs() <= 0.15, "slope {slope}");
}

#[test]
fn workload_follows_popularity_rank_not_ids() {
    let rank: Vec<ModuleId> = (0..50).rev().map(ModuleId).collect();
    let spec = WorkloadSpec {
        zipf_exponent: 10.0,
        ..WorkloadSpec::new(50, 500, 2)
    };
    let reqs = gen_workload(&spec, &rank).unwrap();
    let top = reqs.iter().filter(|r| r.contains(&ModuleId(49))).count();
    assert!(top as f64 > 0.9 * reqs.len() as f64);
}

#[test]
fn report_schema_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_report::<ServerMetrics>(&path, &[]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.trim_end(), ServerMetrics::HEADER.join(","));

    let cfg = ServerBenchConfig::new(WorkloadSpec::new(30, 60, 1), 4, 1);
    let a = run_server_bench(&cfg, None).unwrap();
    append_report(&path, std::slice::from_ref(&a)).unwrap();
    let b = run_server_bench(&ServerBenchConfig::new(WorkloadSpec::new(30, 60, 2), 4, 1), None).unwrap();
    append_report(&path, std::slice::from_ref(&b)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], ServerMetrics::HEADER.join(","));
    assert_eq!(read_report::<ServerMetrics>(&path).unwrap(), vec![a, b]);

    // A report of another kind cannot be appended to this file.
    assert!(append_report(&path, &[AttackReport::default()]).is_err());
}

#[test]
fn bench_runs_are_deterministic_in_counts() {
    let cfg = ServerBenchConfig::new(WorkloadSpec::new(40, 300, 9), 5, 1);
    let a = run_server_bench(&cfg, None).unwrap();
    let b = run_server_bench(&cfg, None).unwrap();
    assert_eq!(a.firmware_count, b.firmware_count);
    assert_eq!(a.hit_rate_pct, b.hit_rate_pct);
    assert_eq!(a.storage_bytes, b.storage_bytes);
}

#[test]
fn attack_forges_only_through_the_device() {
    let s = AttackScenario::new(32, 0.75, 1, 3);
    let r = run_attack_sim(&s).unwrap();
    assert_eq!(r.unknown_bits, 8);
    assert!(r.runs.iter().all(|run| run.forged));
    assert!(r.runs.iter().all(|run| run.trials >= 1 && run.trials <= 256));
    assert!(r.extrapolated_time > 0.0);
}

/// Attacker cost grows by roughly 16x per difficulty step once the work
/// on the forged checkpoint dominates the key search.
#[test]
fn attacker_cost_tracks_difficulty() {
    let mut means = HashMap::new();
    for d in [4u8, 5] {
        // 12 of 40 key bits unknown. A 40-bit group keeps hundreds of
        // work solutions below the d=5 threshold.
        let s = AttackScenario::new(40, 0.7, d, 32);
        let r = run_attack_sim(&s).unwrap();
        assert_eq!(r.unknown_bits, 12);
        means.insert(d, r.measured_attacker_time);
    }
    let ratio = means[&5] / means[&4];
    assert!((8.0..=32.0).contains(&ratio), "A_C ratio {ratio}");
}
