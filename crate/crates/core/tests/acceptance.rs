//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use pcl_core::bridge::{sample_bridge, BridgeOptions, BridgeSpec, NoiseKey, PairingStrategy};
use pcl_core::buffer::{LossFilter, ReservoirBuffer, Sample};
use pcl_core::experiment::{
    ablation_jobs, parse_experiment, run_jobs, run_jobs_in, verify_pde, BundleSummary, Experiment,
};
use pcl_core::fkpde::suite::{verify_suite, Status, SuiteOptions};
use pcl_core::fkpde::{
    check_maximum_principle, solve_backward, solve_fd, stable_dt, BackwardProblem, BoundarySet, Grid1D,
};
use pcl_core::net::{soft_cross_entropy, DenseNetwork, Matrix};
use pcl_core::pcl::{pcl_loss_on_batch, DriftDescriptor, PclConfig};
use pcl_core::seed::{stream_rng, Purpose};
use pcl_core::stats::{bands_overlap, MeanSd};
use pcl_core::streams::make_stream;
use pcl_core::trainer::{run_with_observer, Method, RunConfig};
use pcl_core::Exec;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn bridge_correctness() -> Outcome {
    let mut rng = stream_rng(100, Purpose::Bridge, &[]);
    let mut pinned = true;
    for _ in 0..2000 {
        let d = rng.random_range(1..5);
        let x0: Vec<f64> = (0..d).map(|_| rng.random_range(-50.0..50.0)).collect();
        let x1: Vec<f64> = (0..d).map(|_| rng.random_range(-50.0..50.0)).collect();
        let sigma = rng.random_range(0.0..5.0);
        let spec = BridgeSpec {
            steps: rng.random_range(1..30),
            sigma_x: sigma,
            sigma_y: sigma,
            horizon: rng.random_range(0.1..3.0),
        };
        let p = sample_bridge(&x0, &x1, sigma, &spec, &mut rng).unwrap();
        pinned &= p.row(0) == &x0[..] && p.row(spec.steps) == &x1[..];
    }

    let n = 100_000;
    let spec = BridgeSpec {
        steps: 2,
        sigma_x: 1.0,
        sigma_y: 1.0,
        horizon: 1.0,
    };
    let mut sums = [0.0f64; 2];
    let mut sq = [0.0f64; 2];
    for _ in 0..n {
        let p = sample_bridge(&[0.0, 0.0], &[0.0, 0.0], 1.0, &spec, &mut rng).unwrap();
        for i in 0..2 {
            sums[i] += p.get(1, i);
            sq[i] += p.get(1, i).powi(2);
        }
    }
    let se = 0.25 * (2.0 / (n as f64 - 1.0)).sqrt();
    let vars: Vec<f64> = (0..2)
        .map(|i| (sq[i] - sums[i].powi(2) / n as f64) / (n as f64 - 1.0))
        .collect();
    let var_ok = vars.iter().all(|v| (v - 0.25).abs() < 3.0 * se);

    let (a, b) = ([0.3, -1.2, 7.0], [2.5, 0.4, -3.0]);
    let lin = BridgeSpec {
        steps: 9,
        sigma_x: 0.0,
        sigma_y: 0.0,
        horizon: 1.0,
    };
    let p = sample_bridge(&a, &b, 0.0, &lin, &mut rng).unwrap();
    let exact = (0..=9).all(|j| {
        let f = j as f64 / 9.0;
        (0..3).all(|i| p.get(j, i) == (1.0 - f) * a[i] + f * b[i])
    });
    outcome(
        pinned && var_ok && exact,
        format!(
            "endpoints pinned {pinned}; midpoint var {:.5}/{:.5} (0.25 +- {:.5}); sigma=0 bit-exact {exact}",
            vars[0],
            vars[1],
            3.0 * se
        ),
    )
}

fn reservoir_law() -> Outcome {
    let trials = 100_000;
    let mut parts = Vec::new();
    let mut pass = true;
    for (m, n) in [(1usize, 5u64), (2, 8)] {
        let mut counts = vec![0usize; n as usize];
        for t in 0..trials {
            let mut rng = stream_rng(t as u64, Purpose::Buffer, &[m as u64, n]);
            let mut buf = ReservoirBuffer::new(m, LossFilter::None);
            for i in 0..n {
                let s = Sample {
                    features: vec![i as f64],
                    label: vec![1.0],
                    task_id: 0,
                    stream_index: i,
                };
                buf.maybe_insert(s, &mut rng).unwrap();
            }
            for s in buf.items() {
                counts[s.stream_index as usize] += 1;
            }
        }
        let expected = (trials * m) as f64 / n as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = ChiSquared::new((n - 1) as f64).unwrap().sf(stat);
        let freq = counts.iter().map(|&c| c as f64 / trials as f64).fold(0.0, f64::max);
        pass &= p > 0.01;
        parts.push(format!(
            "(m={m},n={n}) p={p:.3} max inclusion {freq:.4} vs {:.4}",
            m as f64 / n as f64
        ));
    }
    outcome(pass, parts.join("; "))
}

fn rel_err(a: f64, fd: f64) -> f64 {
    let scale = a.abs().max(fd.abs());
    if scale < 1e-7 {
        // both effectively zero; compare absolutely
        (a - fd).abs() / 1e-7
    } else {
        (a - fd).abs() / scale
    }
}

fn gradient_fidelity() -> Outcome {
    let h = 1e-5;
    let mut worst_ce = 0.0f64;
    let mut worst_pcl = 0.0f64;
    for case in 0..12u64 {
        let mut rng = stream_rng(case, Purpose::Instance, &[7]);
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(2..6)];
        for _ in 1..depth {
            sizes.push(rng.random_range(3..12));
        }
        sizes.push(rng.random_range(2..5));
        let (d, c) = (sizes[0], *sizes.last().unwrap());
        let mut net = DenseNetwork::init(&sizes, &mut stream_rng(case, Purpose::Init, &[])).unwrap();
        let mut p = net.params();
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        net.set_params(&p).unwrap();
        let n = 6;
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
        let mut yv = vec![0.0; n * c];
        for r in 0..n {
            yv[r * c + rng.random_range(0..c)] = 1.0;
        }
        let y = Matrix::from_vec(n, c, yv).unwrap();

        let (logits, cache) = net.forward(&x).unwrap();
        let (_, g) = soft_cross_entropy(&logits, &y).unwrap();
        let ce_grad = net.backward(&cache, &g).unwrap().0.to_flat();
        let mut cfg = PclConfig {
            buffer_batch: 0,
            ..PclConfig::default()
        };
        cfg.bridge = BridgeSpec {
            steps: 4,
            sigma_x: 0.5,
            sigma_y: 0.2,
            horizon: 1.0,
        };
        if case % 2 == 1 {
            cfg.drift = DriftDescriptor::gaussian_prior(vec![0.1; d], 1.5);
        }
        let key = NoiseKey { seed: case, step: 3 };
        let pcl_grad = pcl_loss_on_batch(&net, &x, &y, &cfg, key, Exec::Sequential)
            .unwrap()
            .grads
            .to_flat();

        let mut probe = net.clone();
        let mut eval = |q: &[f64]| {
            probe.set_params(q).unwrap();
            let ce = soft_cross_entropy(&probe.predict(&x).unwrap(), &y).unwrap().0;
            let pl = pcl_loss_on_batch(&probe, &x, &y, &cfg, key, Exec::Sequential)
                .unwrap()
                .loss;
            (ce, pl)
        };
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i] += h;
            let up = eval(&q);
            q[i] -= 2.0 * h;
            let down = eval(&q);
            worst_ce = worst_ce.max(rel_err(ce_grad[i], (up.0 - down.0) / (2.0 * h)));
            worst_pcl = worst_pcl.max(rel_err(pcl_grad[i], (up.1 - down.1) / (2.0 * h)));
        }
    }
    outcome(
        worst_ce < 1e-5 && worst_pcl < 1e-5,
        format!("max rel err: cross-entropy {worst_ce:.2e}, parabolic loss {worst_pcl:.2e} (limit 1e-5)"),
    )
}

fn feynman_kac_oracle() -> Outcome {
    let rows = verify_suite(
        &SuiteOptions {
            n_paths: 10_000,
            dt: 1e-3,
            seed: 0,
        },
        Exec::Parallel,
    )
    .unwrap();
    let count = |s: Status| rows.iter().filter(|r| r.status == s).count();
    let worst_gap = rows
        .iter()
        .filter(|r| r.fd_value != 0.0)
        .map(|r| (r.fk_value - r.fd_value).abs() / r.fd_value.abs())
        .fold(0.0, f64::max);
    let drift_ok = rows
        .iter()
        .filter(|r| r.problem_id.starts_with("drift"))
        .all(|r| (r.fk_value - r.fd_value).abs() <= 0.10 * r.fd_value.abs());

    let (c, sigma) = (2.0, 0.8);
    let g = Grid1D::new(0.0, 1.0, 200).unwrap();
    let far = BoundarySet::new(vec![vec![50.0]], 0.1).unwrap();
    let src = move |_: &[f64]| c;
    let s = solve_fd(g, sigma, &src, &far, 4.0, stable_dt(g, sigma)).unwrap();
    let exact = |x: f64| c * x * (1.0 - x) / (sigma * sigma) + c;
    let poisson = s
        .nodes
        .iter()
        .zip(s.last())
        .map(|(&x, &u)| ((u - exact(x)) / exact(x)).abs())
        .fold(0.0, f64::max);

    let pass = count(Status::Pass) == rows.len() && poisson < 1e-3 && drift_ok;
    outcome(
        pass,
        format!(
            "{}/{} suite rows pass ({} fail, {} inconclusive), worst rel gap {worst_gap:.4}; drifted within 10% {drift_ok}; Poisson rel err {poisson:.2e}",
            count(Status::Pass),
            rows.len(),
            count(Status::Fail),
            count(Status::Inconclusive)
        ),
    )
}

fn smooth(seed: u64, i: u64) -> impl Fn(&[f64]) -> f64 + Sync {
    let mut rng = stream_rng(seed, Purpose::Instance, &[i]);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.05..0.3),
            )
        })
        .collect();
    move |x: &[f64]| {
        bumps
            .iter()
            .map(|(a, c, w)| a * (-((x[0] - c) / w).powi(2)).exp())
            .sum()
    }
}

fn maximum_principle() -> Outcome {
    let g = Grid1D::new(0.0, 1.0, 79).unwrap();
    let mut worst = f64::INFINITY;
    let mut held = 0;
    for i in 0..50u64 {
        let loss = smooth(2, 2 * i);
        let terminal = smooth(2, 2 * i + 1);
        let mut rng = stream_rng(2, Purpose::Instance, &[1000 + i]);
        let b = BoundarySet::new(
            (0..3).map(|_| vec![rng.random_range(0.0..1.0)]).collect(),
            rng.random_range(0.02..0.1),
        )
        .unwrap();
        let sigma = rng.random_range(0.3..1.5);
        let p = BackwardProblem {
            grid: g,
            sigma,
            boundary: &b,
            loss: &loss,
            terminal: &terminal,
        };
        let s = solve_backward(&p, 1.0, stable_dt(g, sigma), 5).unwrap();
        let r = check_maximum_principle(&s, 1e-6);
        held += usize::from(r.holds);
        worst = worst.min(r.margin);
    }
    outcome(
        held == 50,
        format!("{held}/50 instances hold; smallest margin {worst:.3e} (tolerance 1e-6)"),
    )
}

fn degenerate_equivalence() -> Outcome {
    let mut pcl = RunConfig {
        method: Method::Pcl,
        seed: 3,
        ..RunConfig::default()
    };
    pcl.stream.n_tasks = 3;
    pcl.pcl = PclConfig {
        bridge: BridgeSpec {
            steps: 1,
            sigma_x: 0.0,
            sigma_y: 0.0,
            horizon: 1.0,
        },
        options: BridgeOptions {
            pairing: PairingStrategy::Identity,
            ..BridgeOptions::default()
        },
        include_endpoints: true,
        ..PclConfig::default()
    };
    // two quadrature points per path, each weighted one: twice the replay loss
    let er = RunConfig {
        method: Method::Er,
        lr: 2.0 * pcl.lr,
        ..pcl.clone()
    };
    let mut a = Vec::new();
    let mut b = Vec::new();
    run_with_observer(&pcl, Exec::Parallel, |_, n| a.push(n.params())).unwrap();
    run_with_observer(&er, Exec::Parallel, |_, n| b.push(n.params())).unwrap();
    let worst = a
        .iter()
        .zip(&b)
        .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    outcome(
        a.len() == b.len() && worst <= 1e-10,
        format!("{} steps, max per-step parameter gap {worst:.2e}", a.len()),
    )
}

fn experiment(out: &Path, overrides: &[&str]) -> Experiment {
    let mut o = vec![format!("output_dir={:?}", out.display().to_string())];
    o.extend(overrides.iter().map(|s| s.to_string()));
    parse_experiment("", "defaults", Path::new("."), &o).unwrap()
}

fn final_accs(summary: &BundleSummary, method: Method) -> Vec<f64> {
    summary
        .seeds
        .iter()
        .filter(|s| s.record.method == method)
        .map(|s| s.record.final_acc)
        .collect()
}

fn method_ordering(clean: &BundleSummary) -> Outcome {
    let (p, e, s) = (
        final_accs(clean, Method::Pcl),
        final_accs(clean, Method::Er),
        final_accs(clean, Method::Sgd),
    );
    let (mp, me, ms) = (MeanSd::of(&p), MeanSd::of(&e), MeanSd::of(&s));
    let diff: Vec<f64> = p.iter().zip(&e).map(|(a, b)| a - b).collect();
    let d = MeanSd::of(&diff);
    let pass = p.len() == 5 && mp.mean > me.mean && me.mean > ms.mean && d.mean > 0.0 && d.mean > d.sd;
    outcome(
        pass,
        format!(
            "acc pcl {:.4}+-{:.4}, er {:.4}+-{:.4}, sgd {:.4}+-{:.4}; paired pcl-er {:.4}+-{:.4}",
            mp.mean, mp.sd, me.mean, me.sd, ms.mean, ms.sd, d.mean, d.sd
        ),
    )
}

fn corruption_robustness(clean: &BundleSummary, noisy: &BundleSummary) -> Outcome {
    let drop = |m| {
        let c = MeanSd::of(&final_accs(clean, m)).mean;
        let n = MeanSd::of(&final_accs(noisy, m)).mean;
        (c, n, (c - n) / c)
    };
    let (pc, pn, pd) = drop(Method::Pcl);
    let (ec, en, ed) = drop(Method::Er);
    outcome(
        pd <= ed,
        format!(
            "pcl {pc:.4} -> {pn:.4} (drop {:.1}%), er {ec:.4} -> {en:.4} (drop {:.1}%)",
            100.0 * pd,
            100.0 * ed
        ),
    )
}

fn bound_patterns(dir: &Path) -> Outcome {
    let (ok, n, worst) = {
        let outcome = pcl_core::experiment::check_bounds_dir(dir, None).unwrap();
        let (ok, n) = outcome
            .groups
            .get(&("default".to_string(), "pcl".to_string()))
            .copied()
            .unwrap_or((0, 0));
        let worst = outcome
            .rows
            .iter()
            .map(|r| r.forgetting_margin.min(r.lower_margin))
            .fold(f64::INFINITY, f64::min);
        (ok, n, worst)
    };
    outcome(
        n == 5 && ok >= 4,
        format!("both patterns hold for {ok}/{n} seeds; smallest margin {worst:.4}"),
    )
}

fn ablation_flatness(summary: &BundleSummary) -> Outcome {
    let bands: Vec<(String, MeanSd)> = summary
        .aggregate
        .iter()
        .map(|r| {
            (
                r.variant.clone(),
                MeanSd {
                    mean: r.acc_mean,
                    sd: r.acc_sd,
                    n: r.n_seeds,
                },
            )
        })
        .collect();
    let ms: Vec<MeanSd> = bands.iter().map(|(_, b)| *b).collect();
    let lo = ms.iter().map(MeanSd::lower).fold(f64::NEG_INFINITY, f64::max);
    let hi = ms.iter().map(MeanSd::upper).fold(f64::INFINITY, f64::min);
    let list: Vec<String> = bands
        .iter()
        .map(|(v, b)| format!("{v} {:.3}+-{:.3}", b.mean, b.sd))
        .collect();
    outcome(
        bands.len() == 7 && bands_overlap(&ms),
        format!("common band [{lo:.4}, {hi:.4}]; {}", list.join(", ")),
    )
}

fn read_runs(dir: &Path) -> HashMap<String, Vec<u8>> {
    fs::read_dir(dir.join("runs"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn determinism(first: &Path, root: &Path) -> Outcome {
    let again = root.join("rerun");
    let exp = experiment(&again, &["methods=[\"pcl\",\"er\",\"sgd\"]"]);
    run_jobs_in(&exp, &run_jobs(&exp.file), Exec::Sequential).unwrap();
    let (a, b) = (read_runs(first), read_runs(&again));
    let runs_same = a.len() == 15 && a == b;

    let opts = SuiteOptions {
        n_paths: 2000,
        ..SuiteOptions::default()
    };
    let (v1, v2) = (root.join("v1.csv"), root.join("v2.csv"));
    verify_pde(&opts, &v1, Exec::Parallel).unwrap();
    verify_pde(&opts, &v2, Exec::Sequential).unwrap();
    let pde_same = fs::read(&v1).unwrap() == fs::read(&v2).unwrap();

    let cfg = RunConfig::default();
    let m1 = serde_json::to_vec(&make_stream(&cfg.stream, 0).unwrap().manifest).unwrap();
    let m2 = serde_json::to_vec(&make_stream(&cfg.stream, 0).unwrap().manifest).unwrap();
    let cp = fs::read(first.join("checkpoints/default__pcl__seed0/task4_net.json")).unwrap()
        == fs::read(again.join("checkpoints/default__pcl__seed0/task4_net.json")).unwrap();
    outcome(
        runs_same && pde_same && m1 == m2 && cp,
        format!(
            "{} per-seed JSON files identical {runs_same}; checkpoints {cp}; verify-pde CSV {pde_same}",
            a.len()
        ),
    )
}

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let o = f();
        let took = start.elapsed();
        let in_time = limit.is_none_or(|l| took <= l);
        let pass = o.pass && in_time;
        self.failed += usize::from(!pass);
        let budget = limit.map_or(String::new(), |l| format!(" / {}s", l.as_secs()));
        let late = if in_time { "" } else { " OVER TIME LIMIT" };
        println!(
            "{} {id:>2} {name}: {} [{:.2}s{budget}{late}]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
    }
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let secs = Duration::from_secs;
    let mut r = Report { failed: 0 };

    r.check(1, "bridge correctness", Some(secs(5)), bridge_correctness);
    r.check(2, "reservoir law", Some(secs(30)), reservoir_law);
    r.check(3, "gradient fidelity", Some(secs(10)), gradient_fidelity);
    r.check(4, "Feynman-Kac oracle", Some(secs(60)), feynman_kac_oracle);
    r.check(5, "maximum principle", Some(secs(30)), maximum_principle);
    r.check(6, "degenerate equivalence", Some(secs(10)), degenerate_equivalence);

    let clean_dir = root.join("clean");
    let mut clean = None;
    r.check(7, "method ordering", Some(secs(180)), || {
        let exp = experiment(&clean_dir, &["methods=[\"pcl\",\"er\",\"sgd\"]"]);
        let s = run_jobs_in(&exp, &run_jobs(&exp.file), Exec::Parallel).unwrap();
        let o = method_ordering(&s);
        clean = Some(s);
        o
    });
    let clean = clean.unwrap();
    r.check(8, "corruption robustness", Some(secs(300)), || {
        let exp = experiment(
            &root.join("noisy"),
            &["methods=[\"pcl\",\"er\"]", "run.stream.corruption_rate=0.5"],
        );
        let noisy = run_jobs_in(&exp, &run_jobs(&exp.file), Exec::Parallel).unwrap();
        corruption_robustness(&clean, &noisy)
    });
    r.check(9, "bound patterns", Some(secs(60)), || bound_patterns(&clean_dir));
    r.check(10, "ablation flatness", Some(secs(900)), || {
        let exp = experiment(&root.join("ablate"), &[]);
        let s = run_jobs_in(&exp, &ablation_jobs(&exp.file).unwrap(), Exec::Parallel).unwrap();
        ablation_flatness(&s)
    });
    r.check(11, "determinism", None, || determinism(&clean_dir, root));

    println!("{} of 11 criteria passed", 11 - r.failed);
    if r.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
