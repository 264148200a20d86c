//! Acceptance checks, one line per criterion. Criteria 6, 8, 9 and 10 read
//! the trained toy checkpoint (`artifacts/toy.ckpt`, or the path in
//! `FOMEMO_ACCEPTANCE_CKPT`). Pass criterion numbers as arguments to run a
//! subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use fomemo::acquisition::{
    acq_ucb, acq_uhvi, best_aggregation, propose_batch, run_optimization, AcqKind, AcquisitionSpec, Prompt, SimplexPreferences,
    Trajectory,
};
use fomemo::baselines::{gp_parego_step, run_gp_parego, sobol_search};
use fomemo::benchmarks::{make_problem, sobol_points, to_native, Problem};
use fomemo::linalg::JitterLadder;
use fomemo::metrics::{hv_estimate, hv_exact_2d, igd_plus, pareto_filter};
use fomemo::model::{
    batch_mean_loss, build_riemann_support, forward_logits, load_checkpoint, loss_and_grad, Episode, Model, ModelConfig, Params,
};
use fomemo::prior::{rbf_kernel_matrix, sample_gp_function_values, sample_gp_hyper, GpHyper};
use fomemo::scalarize::{dimension_constant, preference_to_refvec, refvec_to_preference, sample_preference, Preference};
use fomemo::trainer::{evaluate_checkpoint, TrainConfig};
use fomemo_cli::manifest::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn checkpoint_path() -> PathBuf {
    std::env::var_os("FOMEMO_ACCEPTANCE_CKPT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../artifacts/toy.ckpt")))
}

fn toy_model() -> std::result::Result<Model, String> {
    let path = checkpoint_path();
    let ckpt = load_checkpoint(&path).map_err(|e| format!("{}: {e} (train it with `fomemo train`)", path.display()))?;
    Model::new(ckpt.params, ckpt.support).map_err(|e| e.to_string())
}

fn random_front(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let k = rng.random_range(1..=8);
    let mut a: Vec<f64> = (0..k).map(|_| rng.random()).collect();
    let mut b: Vec<f64> = (0..k).map(|_| rng.random()).collect();
    a.sort_by(f64::total_cmp);
    b.sort_by(|x, y| y.total_cmp(x));
    a.into_iter().zip(b).map(|(x, y)| vec![x, y]).collect()
}

fn hypervolume_oracle() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let reference = [1.1, 1.1];
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let front = random_front(&mut rng);
        let exact = hv_exact_2d(&front, &reference).map_err(|e| e.to_string())?;
        let est = hv_estimate(&front, &reference, &[0.0, 0.0], 100_000, i).map_err(|e| e.to_string())?;
        worst = worst.max((est - exact).abs() / exact);
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(worst < 0.02 && secs < 30.0, format!("max relative error {:.3}% over 20 fronts, {secs:.1}s", 100.0 * worst))
}

fn worked_constants() -> Check {
    let c1 = dimension_constant(1);
    let c2 = dimension_constant(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut norm_err, mut trip_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let m = rng.random_range(2..=6);
        let pref = sample_preference(&mut rng, m);
        let w = preference_to_refvec(&pref);
        let norm = w.components().iter().map(|v| v * v).sum::<f64>().sqrt();
        norm_err = norm_err.max((norm - 1.0).abs());
        let back = refvec_to_preference(&w);
        for (a, b) in back.weights().iter().zip(pref.weights()) {
            trip_err = trip_err.max((a - b).abs());
        }
    }
    let ok = (c1 - 1.0).abs() <= 1e-12 && (c2 - std::f64::consts::FRAC_PI_4).abs() <= 1e-12 && norm_err <= 1e-9 && trip_err <= 1e-9;
    ensure(
        ok,
        format!(
            "c_1 = {c1}, c_2 - pi/4 = {:.1e}, max | |w| - 1 | = {norm_err:.1e}, max round-trip error = {trip_err:.1e}",
            c2 - std::f64::consts::FRAC_PI_4
        ),
    )
}

fn igd_plus_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..100 {
        let m = rng.random_range(1..=3);
        let cloud = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            let k = rng.random_range(1..=20);
            (0..k).map(|_| (0..m).map(|_| rng.random::<f64>() * 2.0 - 0.5).collect()).collect()
        };
        let (front, reference) = (cloud(&mut rng), cloud(&mut rng));
        let mut sum = 0.0;
        for z in &reference {
            let mut nearest = f64::INFINITY;
            for a in &front {
                let mut sq = 0.0;
                for j in 0..m {
                    let t = (a[j] - z[j]).max(0.0);
                    sq += t * t;
                }
                nearest = nearest.min(sq.sqrt());
            }
            sum += nearest;
        }
        let brute = sum / reference.len() as f64;
        if igd_plus(&front, &reference).map_err(|e| e.to_string())? != brute {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, format!("{mismatches} of 100 instances differ from the pairwise formula"))
}

fn gp_prior_fidelity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 2;
    let points = [0.1, 0.2, 0.4, 0.1, 0.5, 0.5, 0.7, 0.9, 0.95, 0.3];
    let hyper = GpHyper::isotropic(d, 0.5);
    let mut k = rbf_kernel_matrix(&points, d, &hyper);
    for i in 0..5 {
        k[i * 5 + i] += hyper.noise_variance;
    }
    let draws = 20_000;
    let mut sum = [0.0; 5];
    let mut cross = [0.0; 25];
    for _ in 0..draws {
        let f = sample_gp_function_values(&points, d, &hyper, JitterLadder::DEFAULT, &mut rng).map_err(|e| e.to_string())?;
        for i in 0..5 {
            sum[i] += f[i];
            for j in 0..5 {
                cross[i * 5 + j] += f[i] * f[j];
            }
        }
    }
    let n = draws as f64;
    let mut worst: f64 = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            let cov = cross[i * 5 + j] / n - (sum[i] / n) * (sum[j] / n);
            worst = worst.max((cov - k[i * 5 + j]).abs());
        }
    }
    let mean_ls = (0..100_000).map(|_| sample_gp_hyper(&mut rng, 1).lengthscales[0]).sum::<f64>() / 1e5;
    ensure(
        worst <= 0.05 && (mean_ls - 0.5).abs() <= 0.01,
        format!("max |cov - K| = {worst:.4}, mean lengthscale {mean_ls:.4}"),
    )
}

fn tiny_config() -> ModelConfig {
    ModelConfig { embed_dim: 16, ff_hidden_dim: 32, n_heads: 2, n_layers: 2, n_bins: 12, max_features: 8, max_objectives: 3, max_sample_len: 32 }
}

fn random_episode(rng: &mut ChaCha8Rng, d: usize, m: usize, n: usize, q: usize) -> Episode {
    let mut v = |k: usize| (0..k).map(|_| rng.random::<f64>()).collect::<Vec<f64>>();
    let traj_x = v(n * d);
    let traj_y = v(n * m);
    let query_x = v(q * d);
    let mut query_pref = Vec::new();
    for _ in 0..q {
        query_pref.extend_from_slice(sample_preference(rng, m).weights());
    }
    Episode { d, m, traj_x, traj_y, query_x, query_pref }
}

fn model_mechanics() -> Check {
    let started = Instant::now();
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = Params::<f64>::init(cfg, &mut rng);
    let samples: Vec<f64> = (0..4000).map(|i| -1.0 + 1.2 * (i as f64 / 3999.0).powi(2)).collect();
    let support = build_riemann_support(&samples, cfg.n_bins).map_err(|e| e.to_string())?;

    // permutation of trajectory rows
    let (d, m, n, q) = (3, 2, 9, 4);
    let ep = random_episode(&mut rng, d, m, n, q);
    let base = forward_logits(&params, std::slice::from_ref(&ep)).map_err(|e| e.to_string())?.remove(0);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.reverse();
    perm.swap(1, 5);
    let shuffled = Episode {
        traj_x: perm.iter().flat_map(|&i| ep.traj_x[i * d..(i + 1) * d].to_vec()).collect(),
        traj_y: perm.iter().flat_map(|&i| ep.traj_y[i * m..(i + 1) * m].to_vec()).collect(),
        ..ep.clone()
    };
    let moved = forward_logits(&params, &[shuffled]).map_err(|e| e.to_string())?.remove(0);
    let perm_drift = base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // each query alone versus all together
    let b = cfg.n_bins;
    let mut query_drift: f64 = 0.0;
    for j in 0..q {
        let single = Episode {
            query_x: ep.query_x[j * d..(j + 1) * d].to_vec(),
            query_pref: ep.query_pref[j * m..(j + 1) * m].to_vec(),
            ..ep.clone()
        };
        let alone = forward_logits(&params, &[single]).map_err(|e| e.to_string())?.remove(0);
        for (a, c) in alone.iter().zip(&base[j * b..(j + 1) * b]) {
            query_drift = query_drift.max((a - c).abs());
        }
    }

    // histogram normalization through the inference path
    let model = Model::new(params.cast::<f32>(), support.clone()).map_err(|e| e.to_string())?;
    let ctx = model.context(&ep.traj_x, &ep.traj_y, d, m).map_err(|e| e.to_string())?;
    let hists = model.predict(&ctx, &ep.query_x, &ep.query_pref).map_err(|e| e.to_string())?;
    let norm_err = hists.iter().map(|h| (h.probs.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);

    // finite differences at f64
    let episodes = vec![random_episode(&mut rng, 2, 2, 5, 3), random_episode(&mut rng, 4, 1, 3, 2)];
    let targets = vec![vec![-0.3, 0.05, -0.9], vec![0.1, -0.5]];
    let analytic = loss_and_grad(&params, &episodes, &targets, &support).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut grad_err: f64 = 0.0;
    let mut checked = 0;
    for spec in params.layout.tensors.iter() {
        for idx in spec.range().step_by(5) {
            let mut p = params.clone();
            p.data[idx] += h;
            let up = batch_mean_loss(&p, &episodes, &targets, &support).map_err(|e| e.to_string())?;
            p.data[idx] -= 2.0 * h;
            let down = batch_mean_loss(&p, &episodes, &targets, &support).map_err(|e| e.to_string())?;
            let fd = (up - down) / (2.0 * h);
            let g = analytic.grad[idx];
            grad_err = grad_err.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-4));
            checked += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(
        perm_drift < 1e-5 && query_drift < 1e-5 && norm_err <= 1e-6 && grad_err <= 1e-3 && secs < 300.0,
        format!(
            "permutation drift {perm_drift:.1e}, query drift {query_drift:.1e}, normalization error {norm_err:.1e}, \
             gradient rel err {grad_err:.1e} over {checked} coordinates, {secs:.1}s"
        ),
    )
}

fn training_signal() -> Check {
    let path = checkpoint_path();
    let ckpt = load_checkpoint(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if ckpt.params.config != ModelConfig::TOY {
        return Err(format!("checkpoint is not the toy configuration: {:?}", ckpt.params.config));
    }
    let config = TrainConfig::toy(&ModelConfig::TOY);
    let done = ckpt.optimizer.as_ref().map(|o| o.step).unwrap_or(0);
    let c = evaluate_checkpoint(&ckpt, &config).map_err(|e| e.to_string())?;
    let ok = done == config.total_steps() && c.nll < c.baseline_nll && (0.80..=0.97).contains(&c.coverage_90);
    ensure(
        ok,
        format!(
            "{done}/{} steps, held-out NLL {:.4} vs bin-frequency {:.4}, 90% coverage {:.3} (50%: {:.3}) on {} targets",
            config.total_steps(),
            c.nll,
            c.baseline_nll,
            c.coverage_90,
            c.coverage_50,
            c.n_targets
        ),
    )
}

fn uhvi_reduction() -> Check {
    let model = match toy_model() {
        Ok(m) => m,
        Err(_) => {
            let cfg = ModelConfig::TOY;
            let params = Params::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(7));
            let samples: Vec<f64> = (0..10_000).map(|i| -1.0 + i as f64 / 9999.0).collect();
            Model::new(params, build_riemann_support(&samples, cfg.n_bins).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pref = vec![Preference::new(&[1.0]).map_err(|e| e.to_string())?];
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(1..=30);
        let mut traj = Trajectory::default();
        for _ in 0..n {
            traj.push((0..d).map(|_| rng.random()).collect(), vec![rng.random::<f64>() * 4.0 - 2.0]);
        }
        let prompt = Prompt::new(&model, &traj).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..d).map(|_| rng.random()).collect();
        let u = acq_uhvi(&model, &prompt, &x, &pref, 1.0).map_err(|e| e.to_string())?;
        let h = prompt.posteriors(&model, std::slice::from_ref(&x), &pref).map_err(|e| e.to_string())?.remove(0);
        let g_best = best_aggregation(&prompt.y_norm, &pref[0]).map_err(|e| e.to_string())?;
        worst = worst.max((u - (acq_ucb(&h, 1.0) - g_best).max(0.0)).abs());
    }
    ensure(worst <= 1e-6, format!("max |UHVI - max(0, UCB - g*)| = {worst:.1e} over 100 trajectories"))
}

fn final_igd(traj: &Trajectory, reference: &[Vec<f64>]) -> f64 {
    igd_plus(&pareto_filter(&traj.y).points, reference).expect("nonempty")
}

fn end_to_end() -> Check {
    let model = toy_model()?;
    let started = Instant::now();
    let seeds = 5;
    let budget = 40;
    let mut lines = Vec::new();
    let mut beats_sobol = true;
    let mut near_parego = false;
    for name in ["zdt1", "omnitest"] {
        let mut problem = make_problem(name, None).map_err(|e| e.to_string())?;
        let reference = problem.true_front(1000).map_err(|e| e.to_string())?;
        let spec = AcquisitionSpec::new(AcqKind::Ucb);
        let mut mean = [0.0; 3];
        for r in 0..seeds {
            let seed = derive_seed(0, name, r);
            let mut sink = |_: &fomemo::acquisition::RunRecord| Ok(());
            let f = run_optimization(&mut problem, &model, &spec, budget, seed, &mut sink).map_err(|e| e.to_string())?;
            let s = sobol_search(&mut problem, budget, seed, &mut sink).map_err(|e| e.to_string())?;
            let g = run_gp_parego(&mut problem, &AcquisitionSpec::new(AcqKind::Ei), budget, seed, &mut sink).map_err(|e| e.to_string())?;
            for (k, t) in [f, s, g].iter().enumerate() {
                mean[k] += final_igd(t, &reference) / seeds as f64;
            }
        }
        beats_sobol &= mean[0] < mean[1];
        near_parego |= mean[0] <= 2.0 * mean[2];
        lines.push(format!(
            "{name} (d={}): fomemo-ucb {:.4}, sobol {:.4}, gp-parego {:.4}",
            problem.dim(),
            mean[0],
            mean[1],
            mean[2]
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(
        beats_sobol && near_parego && secs < 1800.0,
        format!("mean final IGD+ over {seeds} seeds; {}; {secs:.0}s", lines.join("; ")),
    )
}

fn mean_time(reps: usize, mut f: impl FnMut(u64) -> std::result::Result<(), String>) -> std::result::Result<Duration, String> {
    let mut total = Duration::ZERO;
    for r in 0..reps {
        let t = Instant::now();
        f(r as u64)?;
        total += t.elapsed();
    }
    Ok(total / reps as u32)
}

fn query_time() -> Check {
    let model = toy_model()?;
    let mut problem = make_problem("zdt1", None).map_err(|e| e.to_string())?;
    let d = problem.dim();
    let n = 50;
    let bounds = problem.bounds().to_vec();
    let mut traj = Trajectory::default();
    for x in sobol_points(d, n, 11).map_err(|e| e.to_string())? {
        let y = problem.evaluate(&to_native(&bounds, &x)).map_err(|e| e.to_string())?;
        traj.push(x, y);
    }
    let parego_spec = AcquisitionSpec::new(AcqKind::Ei);
    let gp = mean_time(5, |s| {
        gp_parego_step(&traj, &parego_spec, &mut ChaCha8Rng::seed_from_u64(s)).map(|_| ()).map_err(|e| e.to_string())
    })?;
    let mut parts = vec![format!("trajectory length {n}, gp-parego {:.1} ms", gp.as_secs_f64() * 1e3)];
    let mut all_faster = true;
    for kind in [AcqKind::Ei, AcqKind::Ucb, AcqKind::Uhvi] {
        let spec = AcquisitionSpec::new(kind);
        let t = mean_time(3, |s| {
            propose_batch(&model, &traj, &spec, &mut SimplexPreferences, &mut ChaCha8Rng::seed_from_u64(s))
                .map(|_| ())
                .map_err(|e| e.to_string())
        })?;
        let ratio = t.as_secs_f64() / gp.as_secs_f64();
        all_faster &= ratio < 1.0;
        parts.push(format!("fomemo-{} {:.1} ms (ratio {ratio:.2})", kind.as_str(), t.as_secs_f64() * 1e3));
    }
    ensure(all_faster, parts.join(", "))
}

fn determinism() -> Check {
    let ckpt = checkpoint_path();
    if !ckpt.exists() {
        return Err(format!("{} missing", ckpt.display()));
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> std::result::Result<String, String> {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_fomemo"))
            .args(["optimize", "--ckpt", ckpt.to_str().unwrap(), "--problem", "zdt1", "--acq", "ucb", "--budget", "10", "--seed", "7"])
            .arg("--out")
            .arg(&out)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(String::from_utf8_lossy(&o.stderr).into_owned());
        }
        std::fs::read_to_string(out.join("run.jsonl")).map_err(|e| e.to_string())
    };
    let strip = |text: &str| -> String {
        text.lines()
            .map(|l| match l.find(",\"wall_ms\":") {
                Some(i) => {
                    let rest = &l[i + 11..];
                    let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
                    format!("{}{}", &l[..i], &rest[end..])
                }
                None => l.to_string(),
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let (a, b) = (run("a")?, run("b")?);
    let lines = a.lines().count();
    ensure(
        strip(&a) == strip(&b) && lines == 18 + 10 && a.contains("\"wall_ms\":"),
        format!("{lines} records, identical apart from wall_ms: {}", strip(&a) == strip(&b)),
    )
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        ("hypervolume oracle agreement", hypervolume_oracle),
        ("worked constants", worked_constants),
        ("IGD+ oracle", igd_plus_oracle),
        ("GP prior fidelity", gp_prior_fidelity),
        ("model mechanics", model_mechanics),
        ("training signal", training_signal),
        ("UHVI reduction", uhvi_reduction),
        ("end-to-end optimization", end_to_end),
        ("query-time ordering", query_time),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
