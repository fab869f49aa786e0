use pcl_core::bounds::{bound_report, buffer_losses, estimate_lipschitz, mean_set_loss};
use pcl_core::buffer::Sample;
use pcl_core::experiment::{check_bounds_dir, parse_experiment, run_jobs, run_jobs_in};
use pcl_core::net::{DenseNetwork, Matrix};
use pcl_core::seed::{stream_rng, Purpose};
use pcl_core::streams::{make_stream, one_hot, EvalSet};
use pcl_core::trainer::{run, Method, RunConfig};
use pcl_core::Exec;
use rand::Rng;

fn samples(n: usize, d: usize, c: usize, seed: u64) -> Vec<Sample> {
    let mut rng = stream_rng(seed, Purpose::Instance, &[]);
    (0..n)
        .map(|i| {
            let mut label = vec![0.0; c];
            label[rng.random_range(0..c)] = 1.0;
            Sample {
                features: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                label,
                task_id: 0,
                stream_index: i as u64,
            }
        })
        .collect()
}

fn loss_at(net: &DenseNetwork, x: &[f64], y: &[f64]) -> f64 {
    let z = net.predict(&Matrix::from_vec(1, x.len(), x.to_vec()).unwrap()).unwrap();
    let z = z.row(0);
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    y.iter().zip(z).map(|(t, zi)| t * (lse - zi)).sum()
}

/// Largest slope over every ordered buffer pair on a fine grid of
/// segment offsets, with the same 0.05 segment length.
fn brute_force_lipschitz(net: &DenseNetwork, buffer: &[Sample]) -> f64 {
    let mut best = 0.0f64;
    let lerp =
        |a: &[f64], b: &[f64], l: f64| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| (1.0 - l) * p + l * q).collect() };
    for a in buffer {
        for b in buffer {
            if std::ptr::eq(a, b) {
                continue;
            }
            let gap = 0.05
                * a.features
                    .iter()
                    .chain(&a.label)
                    .zip(b.features.iter().chain(&b.label))
                    .map(|(p, q)| (q - p).powi(2))
                    .sum::<f64>()
                    .sqrt();
            for s in 0..=190 {
                let l = s as f64 * 0.005;
                let l0 = loss_at(net, &lerp(&a.features, &b.features, l), &lerp(&a.label, &b.label, l));
                let l1 = loss_at(
                    net,
                    &lerp(&a.features, &b.features, l + 0.05),
                    &lerp(&a.label, &b.label, l + 0.05),
                );
                best = best.max((l1 - l0).abs() / gap);
            }
        }
    }
    best
}

#[test]
fn lipschitz_estimate_is_bracketed_by_brute_force() {
    let net = DenseNetwork::init(&[3, 10, 4], &mut stream_rng(0, Purpose::Init, &[])).unwrap();
    let buffer = samples(6, 3, 4, 1);
    let brute = brute_force_lipschitz(&net, &buffer);
    let est = estimate_lipschitz(&net, &buffer, 5000, 2).unwrap();
    assert!(est <= brute * 1.01, "estimate {est} above brute force {brute}");
    assert!(est >= brute * 0.9, "estimate {est} far below brute force {brute}");
    assert_eq!(est, estimate_lipschitz(&net, &buffer, 5000, 2).unwrap());
}

#[test]
fn constant_logits_give_log_c_everywhere() {
    let mut net = DenseNetwork::init(&[3, 5], &mut stream_rng(0, Purpose::Init, &[])).unwrap();
    net.set_params(&vec![0.0; net.param_count()]).unwrap();
    let buffer = samples(8, 3, 5, 3);
    for l in buffer_losses(&net, &buffer).unwrap() {
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }
    assert!(estimate_lipschitz(&net, &buffer, 200, 0).unwrap() < 1e-12);
    let x = Matrix::from_rows(&[[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]).unwrap();
    let set = EvalSet {
        task_id: 0,
        classes: vec![0, 1],
        x,
        y: one_hot(&[0, 1], 5),
        labels: vec![0, 1],
    };
    assert!((mean_set_loss(&net, &set).unwrap() - 5f64.ln()).abs() < 1e-12);
}

fn small_run() -> RunConfig {
    let mut cfg = RunConfig {
        method: Method::Pcl,
        hidden: vec![16],
        buffer_capacity: 40,
        ..RunConfig::default()
    };
    cfg.stream.n_tasks = 3;
    cfg.stream.samples_per_class = 100;
    cfg.stream.feature_dim = 6;
    cfg
}

#[test]
fn bundle_report_equals_in_memory_report() {
    let dir = tempfile::tempdir().unwrap();
    let text = "seeds = [0, 1]\nmethods = [\"pcl\", \"er\", \"sgd\"]\n[run]\nhidden = [16]\nbuffer_capacity = 40\n\
         [run.stream]\nn_tasks = 3\nsamples_per_class = 100\nfeature_dim = 6\n[bounds]\nlipschitz_pairs = 300\n";
    let exp = parse_experiment(
        text,
        "inline",
        dir.path(),
        &[format!("output_dir={:?}", dir.path().join("b").display().to_string())],
    )
    .unwrap();
    run_jobs_in(&exp, &run_jobs(&exp.file), Exec::Parallel).unwrap();
    let offline = check_bounds_dir(&dir.path().join("b"), None).unwrap();

    // sgd runs are skipped; rows come in (method, seed) file order
    assert_eq!(offline.rows.len(), 2 * 2 * 3);
    let mut expected = Vec::new();
    for method in [Method::Pcl, Method::Er] {
        for seed in [0, 1] {
            let cfg = RunConfig {
                method,
                seed,
                ..small_run()
            };
            let out = run(&cfg, Exec::Sequential).unwrap();
            let stream = make_stream(&cfg.stream, seed).unwrap();
            expected.extend(bound_report(&out.checkpoints, &stream.eval, seed, 300).unwrap().rows);
        }
    }
    assert_eq!(offline.rows, expected);

    let csv = std::fs::read_to_string(dir.path().join("b/bounds.csv")).unwrap();
    assert!(csv.starts_with("schema_version,seed,task,tau,"));
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn margins_agree_with_flags() {
    let cfg = small_run();
    let out = run(&cfg, Exec::Parallel).unwrap();
    let report = bound_report(&out.checkpoints, &out.stream.eval, cfg.seed, 200).unwrap();
    for r in &report.rows {
        assert_eq!(r.forgetting_holds, r.buffer_loss_max >= r.earlier_task_loss);
        assert_eq!(r.lower_holds, r.future_task_loss >= r.buffer_loss_min);
        assert!((r.upper_margin - (r.lipschitz * r.tau as f64 + r.buffer_loss_max - r.future_task_loss)).abs() < 1e-12);
        assert!(r.buffer_loss_min <= r.buffer_loss_mean && r.buffer_loss_mean <= r.buffer_loss_max);
        assert_eq!(r.tau, 2 - r.task);
    }
}
