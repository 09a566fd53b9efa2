//! Acceptance criteria 1-9. One PASS/FAIL line each; exits non-zero on any failure.

mod common;

use std::time::{Duration, Instant};

use common::*;
use gridcert::certificate::*;
use gridcert::network_model::*;
use gridcert::reduced_model::*;
use gridcert::simulator::*;
use gridcert::sweep::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn fail(detail: String) -> Outcome {
    Outcome { pass: false, detail }
}

fn check(ok: bool, detail: String) -> Outcome {
    Outcome { pass: ok, detail }
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut total, mut certified, mut violations, mut skipped) = (0, 0, 0, 0);
    let mut example = String::new();
    while total < 1000 {
        let spec = RandomNet {
            n: rng.gen_range(2..=4),
            load_scale: if rng.gen_bool(0.4) { 0.0 } else { 1.0 },
            ..Default::default()
        };
        let model = random_network(&mut rng, &spec);
        total += 1;
        let ms = match matrix_set_for(&model) {
            Ok(m) => m,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let rep = check_network(&ms, &model.inverter_ids()).unwrap();
        if rep.certified {
            certified += 1;
            let stable = eig_report(&ms).map(|r| r.stable).unwrap_or(false);
            if !stable {
                violations += 1;
                example = format!("{:?}", model.to_file().inverters);
            }
        }
    }
    let dt = t0.elapsed();
    check(
        violations == 0 && dt < Duration::from_secs(300),
        format!("{total} networks, {certified} certified, {violations} certified but unstable {example}, {skipped} outside model regime, {dt:.1?}"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut models = 0;
    while models < 50 {
        let spec = RandomNet {
            n: rng.gen_range(2..=4),
            load_scale: if rng.gen_bool(0.3) { 0.0 } else { 1.0 },
            ..Default::default()
        };
        let model = random_network(&mut rng, &spec);
        let Ok(ms) = matrix_set_for(&model) else { continue };
        let (Ok(ss), Ok(lb)) = (assemble_state_space(&ms), build_lyapunov(&ms)) else { continue };
        worst = worst.max(verify_lyapunov_identity(&ss, &lb, 100, &mut rng));
        models += 1;
    }
    check(worst < 1e-8, format!("max residual {worst:.3e} over {models} models x 100 states"))
}

fn criterion_3() -> Outcome {
    let base = two_bus();
    let tol = 1e-4;
    let axis_for = |a: f64| SweepAxis::new(AxisTarget::MpPercent, Scope::Global, 0.01 * a, 100.0 * a).unwrap();
    let b1 = match Problem::new(base.clone()).and_then(|p| boundary(&p, &axis_for(1.0), Method::Cert, tol)) {
        Ok(b) => b.value,
        Err(e) => return fail(format!("unscaled two-bus fixture: {e}")),
    };
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for alpha in [0.5, 2.0, 10.0] {
        let m = base.scaled_impedances(alpha);
        match Problem::new(m).and_then(|p| boundary(&p, &axis_for(alpha), Method::Cert, tol * alpha)) {
            Ok(b) => {
                let dev = (b.value - alpha * b1).abs() / alpha;
                worst = worst.max(dev);
                parts.push(format!("alpha {alpha}: {:.6} vs {:.6}", b.value, alpha * b1));
            }
            Err(e) => return fail(format!("alpha {alpha}: {e}")),
        }
    }
    check(worst <= tol, parts.join(", "))
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let loaded = Problem::new(two_bus()).unwrap();
    let unloaded = Problem::new(two_bus().without_loads()).unwrap();
    let spec = GridSpec {
        mp: (0.05, 30.0, 100),
        mq: (0.05, 30.0, 100),
        log: true,
        cap: GRID_CAP,
    };
    let gl = region_grid(&loaded, &spec, &[Method::Cert, Method::Eig]).unwrap();
    let g0 = region_grid(&unloaded, &spec, &[Method::Cert, Method::Eig]).unwrap();
    let (mut a_bad, mut b_bad, mut c_hits, mut cert_l, mut eig_l) = (0, 0, 0, 0, 0);
    for i in 0..100 {
        for j in 0..100 {
            let cl = gl.get(Method::Cert, i, j).unwrap();
            let el = gl.get(Method::Eig, i, j).unwrap();
            let c0 = g0.get(Method::Cert, i, j).unwrap();
            let e0 = g0.get(Method::Eig, i, j).unwrap();
            cert_l += cl as usize;
            eig_l += el as usize;
            a_bad += (cl && !el) as usize;
            b_bad += (el && !e0) as usize;
            c_hits += (c0 && !el) as usize;
        }
    }
    let dt = t0.elapsed();
    check(
        a_bad == 0 && b_bad == 0 && c_hits > 0 && dt < Duration::from_secs(600),
        format!(
            "(a) {a_bad} certified-unstable cells [{cert_l} certified], (b) {b_bad} loaded-stable cells outside the unloaded region [{eig_l} loaded-stable], (c) {c_hits} cells certified without loads but unstable with loads, {dt:.1?}"
        ),
    )
}

fn pair_axis(lo: f64, hi: f64) -> SweepAxis {
    SweepAxis::new(AxisTarget::MpPercent, Scope::Pair("828".into(), "830".into()), lo, hi).unwrap()
}

fn criterion_5() -> Outcome {
    let (model, lib) = ieee34();
    let names = ["C1", "C2", "C3", "C4", "C5"];
    let mut cert = Vec::new();
    let mut eig = Vec::new();
    let mut notes = Vec::new();
    for name in names {
        let m = model.with_conductor_between("828", "830", lib.get(name).unwrap(), name).unwrap();
        let p = Problem::new(m).unwrap();
        let axis = pair_axis(0.1, 400.0);
        match boundary(&p, &axis, Method::Cert, 1e-3) {
            Ok(b) => cert.push(Some(b.value)),
            Err(e) => {
                cert.push(None);
                notes.push(format!("{name} cert: {e}"));
            }
        }
        eig.push(boundary(&p, &axis, Method::Eig, 1e-3).map(|b| b.value).ok());
    }
    let cert_dec = cert.iter().all(|c| c.is_some()) && cert.windows(2).all(|w| w[1].unwrap() < w[0].unwrap());
    let ev: Vec<f64> = eig.iter().flatten().copied().collect();
    let (lo, hi) = ev.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let spread = if ev.len() == 5 { (hi - lo) / hi } else { f64::INFINITY };
    let fmt = |v: &[Option<f64>]| v.iter().map(|x| x.map_or("none".into(), |y| format!("{y:.3}"))).collect::<Vec<_>>().join(" ");
    check(
        cert_dec && spread < 0.15,
        format!(
            "cert C1..C5 [{}], eig C1..C5 [{}], eig spread {:.1}% {}",
            fmt(&cert),
            fmt(&eig),
            100.0 * spread,
            notes.first().cloned().unwrap_or_default()
        ),
    )
}

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let (model, lib) = ieee34();
    let model = model.with_conductor_between("828", "830", lib.get("C2").unwrap(), "C2").unwrap();
    let script = DisturbanceScript::load(data("step_828.json")).unwrap();
    let mut setup = SimSetup::default_for(&model);
    setup.disturbances = script.disturbances;
    setup.horizon = script.horizon.unwrap_or(setup.horizon);
    let p = Problem::new(model.clone()).unwrap().with_sim(setup.clone());
    let n = model.n_inverters();
    let at = |mp: f64| Droops {
        mp_percent: vec![mp; n],
        mq_percent: model.mq_percent(),
    };
    let v1 = p.evaluate(Method::Sim, &at(1.0)).unwrap();
    let v5 = p.evaluate(Method::Sim, &at(5.0)).unwrap();
    let axis = SweepAxis::new(AxisTarget::MpPercent, Scope::Global, 1.0, 10.0).unwrap();
    let sim = sim_boundary(&model, &axis, 0.05, &setup);
    let eig = boundary(&p, &axis, Method::Eig, 1e-3).map(|b| b.value);
    match (sim, eig) {
        (Ok(s), Ok(e)) => check(
            v1.stable && !v5.stable && (3.2..=5.2).contains(&s.value),
            format!(
                "1%: {}, 5%: {}, sim boundary {:.3}% (eig {:.3}%), {:.1?}",
                v1.note,
                v5.note,
                s.value,
                e,
                t0.elapsed()
            ),
        ),
        (s, e) => fail(format!("sim {:?} eig {:?}", s.map(|b| b.value), e)),
    }
}

fn monotone(v: &[Option<f64>]) -> bool {
    v.iter().all(|x| x.is_some()) && v.windows(2).all(|w| w[1].unwrap() >= w[0].unwrap() - 1e-9)
}

fn criterion_7() -> Outcome {
    let (model, lib) = ieee34();
    let mut ok = true;
    let mut parts = Vec::new();
    for file in ["heatmap_conductors.json", "heatmap_ratings.json"] {
        let sf = ScenarioFile::load(data(file)).unwrap();
        let table = match heatmap(&model, Some(&lib), &sf, 1e-3, None) {
            Ok(t) => t,
            Err(e) => return fail(format!("{file}: {e}")),
        };
        for row in &table.cells {
            let c: Vec<Option<f64>> = row.iter().map(|x| x.conservativeness).collect();
            let in_range = c.iter().all(|x| x.is_some_and(|v| (0.0..100.0).contains(&v)));
            ok &= monotone(&c) && in_range;
            parts.push(format!(
                "{} [{}]",
                row[0].pair.0.clone() + "-" + &row[0].pair.1,
                c.iter().map(|x| x.map_or("-".into(), |v| format!("{v:.1}"))).collect::<Vec<_>>().join(" ")
            ));
        }
    }
    check(ok, parts.join("; "))
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut points = 0;
    let mut worst_at = String::new();
    while points < 20 {
        let spec = RandomNet {
            n: rng.gen_range(2..=3),
            rx: (1.0, 3.0),
            tau: (0.1, 0.3),
            droop: (0.1, 2.0),
            mutual: 0.0,
            unbalanced_loads: false,
            load_scale: rng.gen_range(0.0..0.7),
        };
        let model = random_network(&mut rng, &spec);
        let Ok(ms) = matrix_set_for(&model) else { continue };
        let Ok(ss) = assemble_state_space(&ms) else { continue };
        let Ok(rep) = eigenvalues(&ss) else { continue };
        let n = model.n_inverters();
        let doubled: Vec<f64> = model.mp_percent().iter().map(|m| 2.0 * m).collect();
        let doubled_q: Vec<f64> = model.mq_percent().iter().map(|m| 2.0 * m).collect();
        let margin_ok = eig_report(&ms.with_droops(&doubled, &doubled_q)).is_ok_and(|r| r.stable);
        if rep.spectral_abscissa > -0.5 || !margin_ok {
            continue;
        }
        let dphi: Vec<f64> = (0..n).map(|_| 1e-4 * rng.gen_range(-1.0..1.0)).collect();
        let drho: Vec<f64> = (0..n).map(|_| 1e-4 * rng.gen_range(-1.0..1.0)).collect();
        let mut sim = Simulator::new(&model, &Droops::from_model(&model)).unwrap();
        let x0 = sim.perturbed_state(&dphi, &drho, &vec![0.0; n]);
        let opts = SimOptions {
            rtol: 1e-9,
            h_max: 1e-3,
            ..SimOptions::default()
        };
        let ids: Vec<String> = model.buses.iter().map(|b| b.id.clone()).collect();
        let tr = sim.run(x0, &[], 0.5, &ids, &opts).unwrap();
        let mut z0 = DVector::zeros(3 * n);
        for k in 0..n {
            z0[k] = dphi[k];
            z0[n + k] = drho[k];
        }
        let mut err = [0.0f64; 3];
        let mut mag = [0.0f64; 3];
        let step = (tr.t.len() / 100).max(1);
        for s in (0..tr.t.len()).step_by(step).chain(std::iter::once(tr.t.len() - 1)) {
            let z = (&ss.a * tr.t[s]).exp() * &z0;
            for k in 0..n {
                let full = [tr.delta[s][k], tr.v[s][k] / sim.v_nom()[k] - 1.0, tr.omega[s][k] - sim.omega0()];
                for g in 0..3 {
                    err[g] = err[g].max((full[g] - z[g * n + k]).abs());
                    mag[g] = mag[g].max(z[g * n + k].abs());
                }
            }
        }
        let rel = (0..3).map(|g| err[g] / mag[g]).fold(0.0, f64::max);
        if rel > worst {
            worst = rel;
            worst_at = format!("point {points}, tau {:.3}, abscissa {:.3}", ms.tau, rep.spectral_abscissa);
        }
        points += 1;
    }
    check(worst < 0.01, format!("worst relative deviation {:.3}% over {points} points ({worst_at})", 100.0 * worst))
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=8);
        let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (i, rng.gen_range(0..i))).collect();
        for _ in 0..rng.gen_range(0..n) {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if a != b && !edges.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a)) {
                edges.push((a, b));
            }
        }
        let topo = Topology::from_edges(n, &edges);
        let sym = |rng: &mut ChaCha8Rng, diag_only: bool| {
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                m[(i, i)] = rng.gen_range(-5.0..5.0);
            }
            if !diag_only {
                for &(a, b) in &edges {
                    let v = rng.gen_range(-5.0..5.0);
                    m[(a, b)] = v;
                    m[(b, a)] = v;
                }
            }
            m
        };
        // Lambda_p, Lambda_q, Btilde and Gtilde are diagonal; the rest follow the topology.
        let mats: Vec<DMatrix<f64>> = (0..8).map(|k| sym(&mut rng, matches!(k, 0 | 1 | 4 | 5))).collect();
        for x in &mats {
            let mut sum = DMatrix::zeros(n, n);
            for (i, k) in topo.pairs() {
                sum += embed_pair(&pair_partition(x, i, k, &topo).unwrap(), i, k, n);
            }
            worst = worst.max((&sum - x).amax() / x.amax());
        }
    }
    check(worst < 1e-12, format!("max relative reconstruction error {worst:.3e} over 100 topologies x 8 matrices"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("certificate soundness", criterion_1),
        ("Lyapunov identity", criterion_2),
        ("alpha scaling", criterion_3),
        ("two-bus region ordering", criterion_4),
        ("conductor monotonicity", criterion_5),
        ("step response at bus 828", criterion_6),
        ("heat-map monotonicity", criterion_7),
        ("reduced vs full agreement", criterion_8),
        ("partition reconstruction", criterion_9),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != k + 1) {
            continue;
        }
        let t0 = Instant::now();
        let out = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            fail(format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += !out.pass as usize;
        println!(
            "criterion {}: {} {name} ({:.1?}): {}",
            k + 1,
            if out.pass { "PASS" } else { "FAIL" },
            t0.elapsed(),
            out.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
