// Temporary calibration probe; run with `cargo test --test cal -- --ignored --nocapture`.
use saga_sim::config::Strategy;
use saga_sim::fairness::FairnessPolicy;
use saga_sim::presets::*;

const SEEDS: [u64; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

#[test]
#[ignore]
fn cal_ratio() {
    for seed in SEEDS {
        let r = ratio_seed(0.5, seed).unwrap();
        println!(
            "seed {seed}: opt {} cap {} ratios {:?}",
            r.opt_cost, r.capacity_tokens, r.ratios
        );
    }
}

#[test]
#[ignore]
fn cal_ttl() {
    for cv in [1.0, 3.0] {
        for seed in SEEDS {
            let mut cfg = ttl_preset(cv);
            cfg.seed = seed;
            let m = saga_sim::sim::run(&cfg).unwrap().metrics;
            println!(
                "cv {cv} seed {seed}: coverage {:?} evict_rate {:.3}",
                m.ttl_coverage, m.eviction_rate
            );
        }
    }
}

#[test]
#[ignore]
fn cal_ablation() {
    let mut sums = std::collections::BTreeMap::new();
    for seed in &SEEDS {
        let base = ablation_seed(None, *seed).unwrap().metrics;
        println!(
            "seed {seed} full: tct {:.0} fin {} unfin {} evict {:.3} steals {} preempt {}",
            base.mean_tct_ms,
            base.tasks_finished,
            base.tasks_unfinished,
            base.eviction_rate,
            base.steals_total,
            base.preemptions_total
        );
        for c in ABLATION_COMPONENTS {
            let m = ablation_seed(Some(c), *seed).unwrap().metrics;
            let d = m.mean_tct_ms - base.mean_tct_ms;
            *sums.entry(c).or_insert(0.0) += d;
            println!(
                "  -{c}: tct {:.0} (delta {:+.0}) fin {} evict {:.3}",
                m.mean_tct_ms, d, m.tasks_finished, m.eviction_rate
            );
        }
    }
    for (c, s) in &sums {
        println!("MEAN -{c}: {:+.0}", s / SEEDS.len() as f64);
    }
}

#[test]
#[ignore]
fn cal_fairness() {
    use saga_sim::model::TenantClass;
    let classes = [TenantClass::Heavy, TenantClass::Medium, TenantClass::Light];
    for p in [FairnessPolicy::Afs, FairnessPolicy::Fcfs] {
        let mut sums = [0.0f64; 3];
        for seed in SEEDS {
            let m = fairness_seed(p, seed).unwrap().metrics;
            for (i, c) in classes.iter().enumerate() {
                sums[i] += m.slo.per_class[c];
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| s / SEEDS.len() as f64).collect();
        let spread = means.iter().cloned().fold(f64::MIN, f64::max)
            - means.iter().cloned().fold(f64::MAX, f64::min);
        println!("{p:?}: per-class means H/M/L {means:?} spread {spread:.3}");
    }
}

#[test]
#[ignore]
fn cal_steal() {
    for seed in SEEDS {
        let with = steal_seed(true, seed).unwrap().metrics;
        let without = steal_seed(false, seed).unwrap().metrics;
        println!(
            "seed {seed}: with busy {:?} ratio {:.2} steals {} | without busy {:?} ratio {:.2}",
            with.worker_busy_us,
            busy_ratio(&with.worker_busy_us),
            with.steals_total,
            without.worker_busy_us,
            busy_ratio(&without.worker_busy_us)
        );
    }
}

#[test]
#[ignore]
fn cal_strategy() {
    for seed in &SEEDS[..4] {
        for s in [Strategy::Bfs, Strategy::Hybrid, Strategy::Dfs] {
            let m = strategy_seed(s, *seed).unwrap().metrics;
            println!(
                "seed {seed} {s:?}: tput {:.2}/min evict {:.3} fin {} unfin {}",
                m.throughput_tasks_per_min, m.eviction_rate, m.tasks_finished, m.tasks_unfinished
            );
        }
    }
}

#[test]
#[ignore]
fn cal_pattern() {
    for seed in &SEEDS[..5] {
        let e = pattern_eval(*seed);
        println!(
            "seed {seed}: acc {:.3} edges {:?} terminal {:?}",
            e.holdout_accuracy, e.inferred.edges, e.inferred.terminal
        );
    }
}
#[test]
#[ignore]
fn cal_probe() {
    use saga_sim::fairness::FairnessPolicy;
    use saga_sim::model::EventKind;
    use saga_sim::presets::*;
    use std::collections::BTreeMap;
    for p in [FairnessPolicy::Afs, FairnessPolicy::Fcfs] {
        let out = fairness_seed(p, 1).unwrap();
        // first-admission wait per tenant class: TaskArrive -> first StepStartPrefill
        let mut arrive: BTreeMap<u64, (u64, u32)> = BTreeMap::new();
        let mut waits: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        // per-step waits after tool return: ToolDone -> next StepStartPrefill
        let mut tool_ret: BTreeMap<u64, u64> = BTreeMap::new();
        let mut step_waits: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for e in &out.events {
            match &e.kind {
                EventKind::TaskArrive { task_id, tenant_id } => {
                    arrive.insert(*task_id, (e.time_us, *tenant_id));
                }
                EventKind::ToolDone { task_id, .. } => {
                    tool_ret.insert(*task_id, e.time_us);
                }
                EventKind::StepStartPrefill { task_id, .. } => {
                    if let Some((t0, tid)) = arrive.remove(task_id) {
                        waits.entry(class_of(tid)).or_default().push((e.time_us - t0) as f64 / 1e6);
                    } else if let Some(t0) = tool_ret.remove(task_id) {
                        step_waits.entry(99).or_default().push((e.time_us - t0) as f64 / 1e6);
                    }
                }
                _ => {}
            }
        }
        for (cls, v) in &waits {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let mut sv = v.clone();
            sv.sort_by(f64::total_cmp);
            let p90 = sv[(sv.len() as f64 * 0.9) as usize];
            println!("{p:?} class {cls} first-wait mean {mean:.2}s p90 {p90:.2}s n {}", v.len());
        }
        for (_, v) in &step_waits {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            println!("{p:?} continuing-step wait mean {mean:.2}s n {}", v.len());
        }
    }
}

fn class_of(tenant: u32) -> u32 {
    match tenant {
        0..=2 => 0, // heavy
        3..=5 => 1, // medium
        _ => 2,     // light
    }
}

#[test]
#[ignore]
fn cal_sweep() {
    use saga_sim::presets::contention_preset;
    use saga_sim::sim::run;
    for kv in [10_000u64, 13_000, 16_000] {
        for f in [0.80f64, 0.90, 1.00] {
            let mut sums = [0.0f64; 6];
            for seed in 1u64..=10 {
                let mut cfg = contention_preset();
                cfg.cluster.kv_capacity_tokens = kv;
                for t in cfg.workload.tenants.iter_mut() {
                    t.rate_per_min *= f;
                }
                cfg.seed = seed;
                let base = run(&cfg).unwrap().metrics;
                for (i, c) in ["session-affinity", "eviction", "ttl", "prefetch", "stealing", "afs"]
                    .iter()
                    .enumerate()
                {
                    let mut cc = cfg.clone();
                    cc.ablate(c).unwrap();
                    let m = run(&cc).unwrap().metrics;
                    sums[i] += m.mean_tct_ms - base.mean_tct_ms;
                }
            }
            print!("KVF kv {kv} f {f}");
            for s in sums {
                print!(" {:+.0}", s / 10.0);
            }
            println!();
        }
    }
}
#[test]
#[ignore]
fn cal_prefetch_count() {
    use saga_sim::presets::contention_preset;
    use saga_sim::sim::run;
    use saga_sim::model::EventKind;
    let mut cfg = contention_preset();
    cfg.seed = 1;
    let out = run(&cfg).unwrap();
    let pf = out.events.iter().filter(|e| matches!(e.kind, EventKind::PrefetchStart { .. })).count();
    let pd = out.events.iter().filter(|e| matches!(e.kind, EventKind::PrefetchDone { .. })).count();
    println!("prefetch starts {pf} done {pd} evict_rate {:.3}", out.metrics.eviction_rate);
}

#[test]
#[ignore]
fn cal_diag() {
    use saga_sim::presets::contention_preset;
    use saga_sim::sim::run;
    for kv in [12_000u64, 16_000, 20_000, 26_000, 34_000] {
        for c in [None, Some("ttl"), Some("prefetch"), Some("eviction")] {
            let mut cfg = contention_preset();
            cfg.cluster.kv_capacity_tokens = kv;
            cfg.seed = 1;
            if let Some(c) = c {
                cfg.ablate(c).unwrap();
            }
            let m = run(&cfg).unwrap().metrics;
            println!(
                "kv {kv} {:?}: tct {:.0} evict_rate {:.3} regen {} useful_kv {:.2}",
                c, m.mean_tct_ms, m.eviction_rate, m.regen_tokens_total, m.useful_kv_fraction
            );
        }
    }
}
