use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPoolBuilder;

use rfsplat::fle::{basis_from_cos, basis_len, fle_basis, fle_eval};
use rfsplat::io::{Dataset, SceneCheckpoint, Split};
use rfsplat::loss::{fourier_loss, spectrum_loss, ssim, LossWeights};
use rfsplat::oracle::{
    bench_scene, generate_dataset, gradcheck, gradcheck_case, multipath_signal, naive_render_scene, random_scene,
    GenerateConfig, GradcheckConfig, GradcheckReport, Medium, PathSpec, RandomSpec, Source,
};
use rfsplat::render::{render_frame, SpectrumFrame};
use rfsplat::scene::{logit, AngularGrid, GaussianPrimitive};
use rfsplat::train::{
    densify, evaluate, evaluate_loss, initial_scene, primitive_radius, prune, trace_csv, train_loop, CheckpointWriter,
    TrainConfig,
};
use rfsplat::{Complex, Vec3};

/// Held-out PSNR of the reference training run, minus a small margin.
const TRAINING_PSNR_BOUND: f64 = 19.0;

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: u32, name: &'static str, pass: bool, detail: String) -> Verdict {
    let v = Verdict { id, name, pass, detail };
    println!(
        "criterion {:>2} {} {}: {}",
        v.id,
        if v.pass { "PASS" } else { "FAIL" },
        v.name,
        v.detail
    );
    v
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn interference() -> Verdict {
    let rx = Vec3::zeros();
    let tx = Vec3::new(3.0, 0.0, 0.0);
    let medium = Medium {
        speed_of_light: 3e8,
        ..Medium::default()
    };
    let half: f64 = 3.0625 / 2.0;
    let y = (half * half - 1.5 * 1.5).sqrt();
    let amplitude = 1.0;
    let paths = [
        PathSpec::direct(amplitude),
        PathSpec::bounce(Vec3::new(1.5, y, 0.0), amplitude, 0.0),
    ];
    let t = Instant::now();
    let s = multipath_signal(&paths, &tx, &rx, 2.4e9, &medium).unwrap();
    let elapsed = t.elapsed();
    let d1 = paths[0].length(&tx, &rx).unwrap();
    let d2 = paths[1].length(&tx, &rx).unwrap();
    let dphi = 2.0 * PI * 2.4e9 * (d2 - d1) / medium.speed_of_light;
    let pass = (dphi - PI).abs() < 1e-9 && s.norm() < 1e-9 * amplitude && elapsed < Duration::from_millis(1);
    verdict(
        1,
        "interference",
        pass,
        format!(
            "d1 {d1} m, d2 {d2} m, dphi - pi = {:.2e}, |S| = {:.2e}, {:.1} us",
            dphi - PI,
            s.norm(),
            secs(elapsed) * 1e6
        ),
    )
}

fn gradient_suite() -> (Verdict, Verdict) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = GradcheckConfig {
        weights: LossWeights {
            lambda1: 0.2,
            lambda2: 0.2,
        },
        ..GradcheckConfig::default()
    };
    let t = Instant::now();
    let mut total = GradcheckReport { classes: Vec::new() };
    for i in 0..20 {
        let n = if i == 0 { 20 } else { rng.random_range(1..=20) };
        let (scene, tx, gt) = gradcheck_case(&mut rng, n).unwrap();
        assert_eq!(scene.grid.n_rays(), 16 * 8);
        total.merge(&gradcheck(&scene, &tx, &gt, &cfg).unwrap());
    }
    let elapsed = t.elapsed();
    let err = |c: &str| total.class(c).map_or(f64::INFINITY, |r| r.max_rel_err);
    let first = [
        ("coeffs", 1e-4),
        ("trans_mag", 1e-4),
        ("trans_phase", 1e-4),
        ("mean", 1e-4),
        ("rotation", 1e-3),
        ("log_scale", 1e-3),
    ];
    let pass2 = first.iter().all(|(c, tol)| err(c) < *tol) && elapsed < Duration::from_secs(120);
    let detail2 = first
        .iter()
        .map(|(c, _)| format!("{c} {:.2e}", err(c)))
        .collect::<Vec<_>>()
        .join(", ");
    let skipped: usize = total.classes.iter().map(|c| c.skipped + c.kinks).sum();
    let checked: usize = total.classes.iter().map(|c| c.checked).sum();
    let v2 = verdict(
        2,
        "gradient correctness",
        pass2,
        format!(
            "{detail2}; {checked} checked, {skipped} near non-smooth points skipped, {:.1} s",
            secs(elapsed)
        ),
    );
    let cov = err("covariance");
    let v3 = verdict(
        3,
        "covariance gradient",
        cov < 1e-4,
        format!("covariance {cov:.2e} (tolerance 1e-4)"),
    );
    (v2, v3)
}

fn render_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = AngularGrid::degrees(360, 90).unwrap();
    let far = RandomSpec {
        distance: (4.5, 8.0),
        ..RandomSpec::default()
    };
    let t = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..50 {
        let n = if i == 0 { 500 } else { rng.random_range(1..=500) };
        let scene = random_scene(&mut rng, n, grid, 3, 1);
        let tx = rfsplat::oracle::random_primitive(&mut rng, &Vec3::zeros(), &far, 0, 1).mean;
        let tiled = render_frame(&scene, &tx).unwrap();
        let naive = naive_render_scene(&scene, &tx).unwrap();
        worst = worst.max(tiled.max_relative_deviation(&naive));
    }
    let elapsed = t.elapsed();
    verdict(
        4,
        "render equivalence",
        worst < 1e-6 && elapsed < Duration::from_secs(300),
        format!(
            "max relative deviation {worst:.2e} over 50 scenes, {:.1} s",
            secs(elapsed)
        ),
    )
}

fn primitive_with(radius: f64, rho: f64) -> GaussianPrimitive {
    let mut p = GaussianPrimitive::isotropic(Vec3::new(2.0, 0.5, -0.3), radius.sqrt(), 3, 1);
    p.trans_mag_raw = logit(rho);
    p
}

fn density_control() -> Verdict {
    let mut scene = random_scene(
        &mut ChaCha8Rng::seed_from_u64(5),
        0,
        AngularGrid::full_sphere(16, 8).unwrap(),
        3,
        1,
    );
    let small = primitive_with(1.0, 0.5);
    let large = primitive_with(12.0, 0.5);
    let boundary = primitive_with(10.0, 0.5);
    scene.primitives = vec![
        small.clone(),
        large.clone(),
        small.clone(),
        boundary.clone(),
        large.clone(),
    ];
    let cfg = TrainConfig {
        eps_radius: primitive_radius(&boundary),
        ..TrainConfig::default()
    };
    let eps = cfg.eps_mean;
    // clone, split, below threshold, boundary radius (clone), boundary gradient (kept).
    let avg = [3e-4, 3e-4, 1e-4, 3e-4, eps];
    let grads: Vec<Vec3> = (0..5).map(|i| Vec3::new(1.0, -2.0, 0.5) * (i + 1) as f64).collect();
    let lr = 1e-3;
    let report = densify(&mut scene, &avg, &grads, lr, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut ok = report.cloned == vec![0, 3] && report.split == vec![1];
    // Survivors in order, then the clone of 0, two children of 1, the clone of 3.
    ok &= scene.len() == 8;
    ok &= scene.primitives[..4] == [small.clone(), small.clone(), boundary.clone(), large.clone()];
    ok &= (scene.primitives[4].mean - (small.mean - grads[0] * lr)).norm() < 1e-15;
    ok &= (scene.primitives[7].mean - (boundary.mean - grads[3] * lr)).norm() < 1e-15;
    let shrink = 1.6f64.ln();
    for child in &scene.primitives[5..7] {
        ok &= (child.log_scale - large.log_scale.add_scalar(-shrink)).norm() < 1e-12;
    }
    let split_ratio = large.scales().x / scene.primitives[5].scales().x;

    let mut pruned = scene.clone();
    pruned.primitives = vec![
        primitive_with(1.0, 0.003),
        primitive_with(1.0, 0.5),
        primitive_with(1.0, 0.005),
    ];
    let at = primitive_with(1.0, 0.004);
    pruned.primitives.push(at.clone());
    let removed = prune(&mut pruned, at.transmittance_magnitude());
    ok &= removed == vec![0] && pruned.len() == 3;
    verdict(
        5,
        "density control",
        ok,
        format!(
            "cloned {:?}, split {:?}, child scale ratio {split_ratio:.4}, pruned {removed:?}; equal gradient and equal |rho| are kept",
            report.cloned, report.split
        ),
    )
}

fn fle_identities() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = basis_len(3);
    let mut ok = n == 16 && fle_basis(0.3, 0.2, 3).values.len() == 16;
    let coeffs = |rng: &mut ChaCha8Rng| -> Vec<Complex> {
        (0..16)
            .map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    };
    let mut lin = 0.0f64;
    let mut per = 0.0f64;
    for _ in 0..200 {
        let (c1, c2) = (coeffs(&mut rng), coeffs(&mut rng));
        let a = Complex::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let b = Complex::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let alpha = rng.random_range(0.0..2.0 * PI);
        let beta = rng.random_range(-PI / 2.0..PI / 2.0);
        let mix: Vec<Complex> = c1.iter().zip(&c2).map(|(x, y)| a * x + b * y).collect();
        let lhs = fle_eval(&mix, alpha, beta).unwrap();
        let rhs = a * fle_eval(&c1, alpha, beta).unwrap() + b * fle_eval(&c2, alpha, beta).unwrap();
        lin = lin.max((lhs - rhs).norm() / rhs.norm().max(1.0));
        let shifted = fle_eval(&c1, alpha + 2.0 * PI, beta).unwrap();
        let base = fle_eval(&c1, alpha, beta).unwrap();
        per = per.max((shifted - base).norm() / base.norm().max(1.0));
    }
    ok &= lin < 1e-12 && per < 1e-12;

    let (n_az, n_polar) = (360, 180);
    let mut gram = vec![vec![Complex::new(0.0, 0.0); n]; n];
    let (da, dt) = (2.0 * PI / n_az as f64, PI / n_polar as f64);
    for j in 0..n_polar {
        let theta = (j as f64 + 0.5) * dt;
        let w = theta.sin() * da * dt;
        for i in 0..n_az {
            let b = basis_from_cos((i as f64 + 0.5) * da, theta.cos(), 3);
            for p in 0..n {
                for q in p..n {
                    gram[p][q] += b[p] * b[q].conj() * w;
                }
            }
        }
    }
    let mut ortho = 0.0f64;
    for p in 0..n {
        for q in p + 1..n {
            ortho = ortho.max(gram[p][q].norm() / (gram[p][p].re * gram[q][q].re).sqrt());
        }
    }
    ok &= ortho < 1e-3;
    let elapsed = t.elapsed();
    ok &= elapsed < Duration::from_secs(10);
    verdict(
        6,
        "FLE identities",
        ok,
        format!(
            "{n} basis functions, linearity {lin:.1e}, periodicity {per:.1e}, off-diagonal {ortho:.1e}, {:.2} s",
            secs(elapsed)
        ),
    )
}

fn random_frame(rng: &mut ChaCha8Rng, n_az: usize, n_el: usize) -> SpectrumFrame {
    SpectrumFrame::new(
        n_az,
        n_el,
        (0..n_az * n_el).map(|_| rng.random_range(0.0..2.0)).collect(),
    )
    .unwrap()
}

fn loss_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut parseval = 0.0f64;
    let mut identity = 0.0f64;
    for _ in 0..10 {
        let a = random_frame(&mut rng, 32, 16);
        let b = random_frame(&mut rng, 32, 16);
        let (v, _) = fourier_loss(&a, &b).unwrap();
        let direct: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum();
        parseval = parseval.max((v - direct).abs() / direct);
        identity = identity.max((ssim(&a, &a).unwrap().0 - 1.0).abs());
    }
    let a = random_frame(&mut rng, 32, 16);
    let b = random_frame(&mut rng, 32, 16);
    let w = LossWeights::default();
    let g = spectrum_loss(&a, &b, &w).unwrap().grad;
    let scale = g.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for i in 0..a.len() {
        if (a.data[i] - b.data[i]).abs() <= h {
            kinks += 1;
            continue;
        }
        let mut p = a.clone();
        let mut m = a.clone();
        p.data[i] += h;
        m.data[i] -= h;
        let fd = (spectrum_loss(&p, &b, &w).unwrap().total - spectrum_loss(&m, &b, &w).unwrap().total) / (2.0 * h);
        let err = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-3 * scale);
        worst = worst.max(err);
    }
    verdict(
        7,
        "loss suite",
        parseval < 1e-9 && identity < 1e-12 && worst < 1e-4,
        format!("Parseval {parseval:.1e}, |SSIM(x, x) - 1| {identity:.1e}, gradient {worst:.2e} ({kinks} cells on an L1 kink)"),
    )
}

fn mean_train_loss(scene: &rfsplat::scene::RFScene, data: &Dataset, cfg: &TrainConfig) -> f64 {
    let train = data.split(Split::Train);
    train
        .iter()
        .map(|s| evaluate_loss(scene, s, &cfg.weights()).unwrap())
        .sum::<f64>()
        / train.len() as f64
}

fn training() -> Verdict {
    let gen = GenerateConfig {
        samples: 200,
        source: Source::Teacher {
            gaussians: 8,
            fle_degree: 3,
            shape: RandomSpec {
                distance: (2.0, 4.0),
                scale: (0.8, 1.5),
                amplitude: 0.1,
            },
        },
        ..GenerateConfig::default()
    };
    let data = generate_dataset(&gen).unwrap();
    let mut cfg = TrainConfig {
        iterations: 5000,
        cube_edge: 2.0,
        densify_every: 500,
        prune_every: 500,
        ..TrainConfig::default()
    };
    cfg.init.c00_magnitude = 0.15;
    let t = Instant::now();
    let mut scene = initial_scene(&data, &cfg).unwrap();
    let initial = mean_train_loss(&scene, &data, &cfg);
    let summary = train_loop(&mut scene, &data, &cfg, None).unwrap();
    let last = mean_train_loss(&scene, &data, &cfg);
    let psnr = evaluate(&scene, &data, Split::Test).unwrap().aggregate.unwrap().psnr;
    let elapsed = t.elapsed();
    let ratio = last / initial;
    verdict(
        8,
        "end-to-end training",
        ratio < 0.01 && psnr > TRAINING_PSNR_BOUND && elapsed < Duration::from_secs(600),
        format!(
            "loss {initial:.4e} -> {last:.4e} (ratio {ratio:.3}), held-out PSNR {psnr:.2} dB (bound {TRAINING_PSNR_BOUND}), {} primitives ({} cloned, {} split, {} pruned), {:.0} s",
            scene.len(),
            summary.cloned,
            summary.split,
            summary.pruned,
            secs(elapsed)
        ),
    )
}

fn best_time(repeats: usize, mut f: impl FnMut()) -> f64 {
    (0..repeats)
        .map(|_| {
            let t = Instant::now();
            f();
            secs(t.elapsed())
        })
        .fold(f64::INFINITY, f64::min)
}

fn performance() -> Verdict {
    let grid = AngularGrid::degrees(360, 90).unwrap();
    let scene = bench_scene(&mut ChaCha8Rng::seed_from_u64(9), 50_000, grid);
    let tx = Vec3::new(5.0, 3.0, 1.0);
    let one = ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let naive4 = four.install(|| {
        best_time(1, || {
            naive_render_scene(&scene, &tx).unwrap();
        })
    });
    let tiled4 = four.install(|| {
        best_time(3, || {
            render_frame(&scene, &tx).unwrap();
        })
    });
    let tiled1 = one.install(|| {
        best_time(3, || {
            render_frame(&scene, &tx).unwrap();
        })
    });
    let speedup = naive4 / tiled4;
    let scaling = tiled1 / tiled4;
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    verdict(
        9,
        "performance",
        speedup >= 2.0 && scaling >= 1.5,
        format!(
            "50k Gaussians: naive {naive4:.2} s, tiled {tiled4:.3} s on 4 workers (speedup {speedup:.1}x); 1 -> 4 worker scaling {scaling:.2}x on {cpus} available CPU(s)"
        ),
    )
}

fn training_run(data: &Dataset, cfg: &TrainConfig, dir: &std::path::Path) -> (Vec<u8>, String, Vec<Vec<u8>>) {
    let mut scene = initial_scene(data, cfg).unwrap();
    let summary = train_loop(&mut scene, data, cfg, Some(dir)).unwrap();
    let final_bytes = SceneCheckpoint::new(cfg.iterations, cfg, &scene).to_bytes().unwrap();
    let intermediate = (1..=cfg.iterations / cfg.checkpoint_every)
        .map(|k| std::fs::read(CheckpointWriter::path_for(dir, k * cfg.checkpoint_every)).unwrap())
        .collect();
    (final_bytes, trace_csv(&summary.trace), intermediate)
}

fn determinism() -> Verdict {
    let data = generate_dataset(&GenerateConfig {
        samples: 20,
        ..GenerateConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        iterations: 200,
        cube_edge: 2.0,
        densify_every: 40,
        prune_every: 40,
        checkpoint_every: 50,
        seed: 11,
        ..TrainConfig::default()
    };
    let one = ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = one.install(|| training_run(&data, &cfg, a.path()));
    let second = one.install(|| training_run(&data, &cfg, b.path()));
    let pass = first == second && first.2.len() == 4;
    verdict(
        10,
        "determinism",
        pass,
        format!(
            "final checkpoint {} bytes, {} trace rows, {} intermediate checkpoints identical: {pass}",
            first.0.len(),
            first.1.lines().count() - 1,
            first.2.len()
        ),
    )
}

#[test]
fn acceptance() {
    let mut verdicts = vec![interference()];
    let (v2, v3) = gradient_suite();
    verdicts.extend([
        v2,
        v3,
        render_equivalence(),
        density_control(),
        fle_identities(),
        loss_suite(),
        training(),
        performance(),
        determinism(),
    ]);
    let failed: Vec<String> = verdicts
        .iter()
        .filter(|v| !v.pass)
        .map(|v| format!("{} ({})", v.id, v.name))
        .collect();
    println!(
        "{} of {} criteria passed",
        verdicts.len() - failed.len(),
        verdicts.len()
    );
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
