//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and exits non-zero
//! if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use partquad::amtc::{evaluate_amtc, plan_axes, predict_counts, FactorGrid};
use partquad::graph::{evaluate_naive, GraphBuilder, OpKind, PointSet};
use partquad::models;
use partquad::nipc::{moments, project};
use partquad::orthopoly::{basis_indices, gauss_rule_1d, Distribution, PolyFamily};
use partquad::partition::{bell_number, enumerate_partitions, Partition};
use partquad::pipeline::{run_mc, run_uq, RunConfig, UqModel};
use partquad::quadrature::{designed_quadrature, full_grid, smolyak_grid, DesignOptions};
use partquad::structure::SelectionMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    check(t < limit, format!("runtime {t:.2?} exceeds {limit:?}"))
}

fn five_families() -> Vec<PolyFamily> {
    vec![
        PolyFamily::Hermite,
        PolyFamily::Legendre,
        PolyFamily::Laguerre,
        PolyFamily::Jacobi { a: 1.5, b: 0.5 },
        PolyFamily::GeneralizedLaguerre { alpha: 2.0 },
    ]
}

/// E[x^n] under each family's probability measure, from closed forms.
fn exact_moment(fam: &PolyFamily, n: u32) -> f64 {
    match *fam {
        PolyFamily::Hermite => {
            if n % 2 == 1 {
                0.0
            } else {
                (1..n).step_by(2).map(f64::from).product()
            }
        }
        PolyFamily::Legendre => {
            if n % 2 == 1 {
                0.0
            } else {
                1.0 / f64::from(n + 1)
            }
        }
        PolyFamily::Laguerre => (1..=n).map(f64::from).product(),
        PolyFamily::GeneralizedLaguerre { alpha } => {
            (0..n).map(|i| alpha + 1.0 + f64::from(i)).product()
        }
        PolyFamily::Jacobi { a, b } => {
            // x = 2t - 1 with t ~ Beta(b + 1, a + 1)
            let t_moment = |j: u32| -> f64 {
                (0..j)
                    .map(|i| (b + 1.0 + f64::from(i)) / (a + b + 2.0 + f64::from(i)))
                    .product()
            };
            (0..=n)
                .map(|j| {
                    let c = partquad::orthopoly::binomial(n as u64, j as u64) as f64;
                    c * 2f64.powi(j as i32) * (-1f64).powi((n - j) as i32) * t_moment(j)
                })
                .sum()
        }
    }
}

fn rel_err(got: f64, exact: f64) -> f64 {
    (got - exact).abs() / exact.abs().max(1.0)
}

fn c1_gauss_exactness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut witness = 0.0f64;
    for fam in five_families() {
        for k in 1..=6usize {
            let rule = gauss_rule_1d(&fam, k).map_err(|e| e.to_string())?;
            let integrate = |n: u32| -> f64 {
                rule.nodes
                    .iter()
                    .zip(&rule.weights)
                    .map(|(x, w)| w * x.powi(n as i32))
                    .sum()
            };
            for n in 0..=(2 * k as u32 - 1) {
                let e = rel_err(integrate(n), exact_moment(&fam, n));
                check(
                    e <= 1e-10,
                    format!("{} k={k} degree {n}: rel err {e:e}", fam.name()),
                )?;
                worst = worst.max(e);
            }
            let n = 2 * k as u32;
            witness = witness.max(rel_err(integrate(n), exact_moment(&fam, n)));
        }
    }
    check(
        witness > 1e-6,
        format!("degree-2k error {witness:e} never exceeds 1e-6"),
    )?;
    within(start, Duration::from_secs(1))?;
    Ok(format!(
        "max rel err {worst:.1e}, degree-2k witness {witness:.1e}"
    ))
}

fn c2_full_grid_exactness() -> Outcome {
    let start = Instant::now();
    let dists = [
        Distribution::Normal {
            mean: 1.0,
            std: 2.0,
        },
        Distribution::Uniform {
            lower: -1.0,
            upper: 3.0,
        },
        Distribution::Beta {
            alpha: 2.0,
            beta: 3.0,
        },
    ];
    let rule = full_grid(&dists, 3).map_err(|e| e.to_string())?;
    check(rule.len() == 27, format!("{} points", rule.len()))?;
    let res = rule.moment_residual(5);
    check(
        res.indices.len() == 56,
        format!("{} conditions", res.indices.len()),
    )?;
    let worst = res.residual.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    check(worst <= 1e-9, format!("max residual {worst:e}"))?;
    within(start, Duration::from_secs(1))?;
    Ok(format!(
        "27 points, 56 conditions, max residual {worst:.1e}"
    ))
}

fn c3_designed() -> Outcome {
    let start = Instant::now();
    let opts = DesignOptions::default();
    let n = Distribution::Normal {
        mean: 0.0,
        std: 1.0,
    };
    let u = Distribution::Uniform {
        lower: -1.0,
        upper: 1.0,
    };
    let mut summary = Vec::new();
    // (dists, r, starting n); n grows by the escalation factor while infeasible
    let cases: [(Vec<Distribution>, usize, usize); 4] = [
        (vec![n, u], 3, 4),
        (vec![n, u, n], 5, 17),
        (vec![u, n, u, n], 3, 8),
        (vec![n, n, u, u], 5, 29),
    ];
    for (dists, r, n0) in cases {
        let d = dists.len();
        let mut pts = n0;
        let mut done = None;
        for attempt in 0..=opts.max_escalations {
            let rule =
                designed_quadrature(&dists, r, pts, &opts, attempt).map_err(|e| e.to_string())?;
            if rule.feasible {
                done = Some((rule.residual, attempt));
                break;
            }
            pts = (pts as f64 * opts.escalation_factor).ceil() as usize;
        }
        let (res, esc) = done.ok_or(format!("d={d} r={r}: infeasible after escalations"))?;
        check(res <= 1e-8, format!("d={d} r={r}: residual {res:e}"))?;
        summary.push(format!(
            "d={d},r={r},n={n0}->{pts} (res {res:.0e}, {esc} esc)"
        ));
    }
    let mut worst = 0.0f64;
    let one_d = [
        n,
        u,
        Distribution::Exponential { rate: 1.0 },
        Distribution::Beta {
            alpha: 2.0,
            beta: 3.0,
        },
        Distribution::Gamma {
            shape: 3.0,
            scale: 1.0,
        },
    ];
    for dist in one_d {
        for k in 1..=5 {
            let r =
                designed_quadrature(&[dist], 2 * k - 1, k, &opts, 0).map_err(|e| e.to_string())?;
            check(
                r.feasible,
                format!("{} k={k}: residual {:e}", dist.family_name(), r.residual),
            )?;
            let g = gauss_rule_1d(&dist.family(), k).map_err(|e| e.to_string())?;
            for (x, y) in r.nodes.iter().zip(&g.nodes) {
                worst = worst.max((x[0] - y).abs());
            }
        }
    }
    check(
        worst <= 1e-8,
        format!("1D designed vs Gauss node gap {worst:e}"),
    )?;
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "{}; 1D n=k node gap {worst:.1e}",
        summary.join(" ")
    ))
}

fn random_grid(p: &Partition, dists: &[Distribution], rng: &mut ChaCha8Rng) -> Vec<PointSet> {
    p.blocks()
        .iter()
        .map(|b| {
            let n = rng.random_range(1..=3usize);
            let mut data = Vec::with_capacity(n * b.len());
            for _ in 0..n {
                for &j in b {
                    data.push(dists[j].sample(rng));
                }
            }
            PointSet::new(b.len(), data)
        })
        .collect()
}

fn c4_amtc_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for m in models::all_builtins() {
        let d = m.distributions.len();
        let parts = enumerate_partitions(d).map_err(|e| e.to_string())?;
        check(parts.len() as u128 == bell_number(d), "partition count")?;
        for p in parts {
            let tg = plan_axes(&m.graph, &p).map_err(|e| e.to_string())?;
            let grid = FactorGrid::new(p.clone(), random_grid(&p, &m.distributions, &mut rng))
                .map_err(|e| e.to_string())?;
            let ev = evaluate_amtc(&tg, &grid, 0).map_err(|e| format!("{} {p}: {e}", m.name))?;
            let naive = evaluate_naive(&m.graph, &grid.expand()).map_err(|e| e.to_string())?;
            for (a, b) in ev.outputs.iter().zip(&naive.outputs) {
                check(
                    (a - b).abs() <= 1e-12 * b.abs().max(1.0),
                    format!("{} {p}: {a} vs {b}", m.name),
                )?;
            }
            let pred = predict_counts(&m.graph, &p, &grid.sizes());
            check(
                pred.counts == ev.counters.counts,
                format!(
                    "{} {p}: predicted {:?} measured {:?}",
                    m.name, pred.counts, ev.counters.counts
                ),
            )?;
            checked += 1;
        }
    }
    within(start, Duration::from_secs(120))?;
    Ok(format!("{checked} model/partition pairs agree"))
}

fn c5_toy_counts() -> Outcome {
    let m = models::toy2d();
    let rule = full_grid(&m.distributions, 3).map_err(|e| e.to_string())?;
    let naive = evaluate_naive(&m.graph, rule.nodes()).map_err(|e| e.to_string())?;
    let tg = plan_axes(&m.graph, rule.structure()).map_err(|e| e.to_string())?;
    let ev = evaluate_amtc(&tg, &FactorGrid::from_rule(&rule), 0).map_err(|e| e.to_string())?;
    let n: u64 = naive.counters.counts.iter().sum();
    let a: u64 = ev.counters.counts.iter().sum();
    check(n == 36 && a == 18, format!("naive {n}, amtc {a}"))?;
    check(
        ev.counters.counts[..3] == [3, 3, 3],
        format!("per-op {:?}", ev.counters.counts),
    )?;
    Ok(format!(
        "naive {n}, amtc {a}, single-input ops evaluated 3 times each"
    ))
}

fn c6_structure() -> Outcome {
    let uav: UqModel = models::uav4d().into();
    let plan =
        partquad::pipeline::select_plan(&uav, &RunConfig::new(3)).map_err(|e| e.to_string())?;
    let want = Partition::new(vec![vec![2, 3], vec![0], vec![1]], 4).unwrap();
    check(
        plan.partition == want,
        format!("uav4d chose {}", plan.partition),
    )?;

    let air: UqModel = models::airtaxi6d().into();
    let mut cfg = RunConfig::new(3);
    cfg.select.sparse_block = true;
    let plan2 = partquad::pipeline::select_plan(&air, &cfg).map_err(|e| e.to_string())?;
    let want2 = Partition::new(vec![vec![0, 1, 2], vec![3, 4, 5]], 6).unwrap();
    check(
        plan2.partition == want2,
        format!("airtaxi6d chose {}", plan2.partition),
    )?;
    Ok(format!(
        "uav4d {}, airtaxi6d {}",
        partquad::pipeline::named_partition(&plan.partition, uav.names()),
        partquad::pipeline::named_partition(&plan2.partition, air.names())
    ))
}

fn c7_cost_reduction() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for m in [models::uav4d(), models::airtaxi6d()] {
        let model: UqModel = m.into();
        let d = model.distributions.len();
        let mut cfg = RunConfig::new(3);
        cfg.order = Some(2);
        let partial = run_uq(&model, &cfg).map_err(|e| e.to_string())?.report;
        cfg.mode = SelectionMode::User(Partition::singletons(d));
        let gauss = run_uq(&model, &cfg).map_err(|e| e.to_string())?.report;
        cfg.mode = SelectionMode::User(Partition::single_block(d));
        let designed = run_uq(&model, &cfg).map_err(|e| e.to_string())?.report;
        let mc = run_mc(&model, 1_000_000, 7).map_err(|e| e.to_string())?;

        let ra = partial.work.amtc as f64 / gauss.work.amtc as f64;
        let rb = partial.work.amtc as f64 / designed.work.naive as f64;
        let z = (partial.mean - mc.mean).abs() / mc.mean_se;
        lines.push(format!(
            "{} {}: work {} vs full-grid amtc {} ({:.0}% lower) vs designed naive {} ({:.0}% lower), mean {:.6e} vs mc {:.6e} ({z:.2} se)",
            model.name,
            partial.partition,
            partial.work.amtc,
            gauss.work.amtc,
            100.0 * (1.0 - ra),
            designed.work.naive,
            100.0 * (1.0 - rb),
            partial.mean,
            mc.mean
        ));
        if ra > 0.6 {
            failures.push(format!(
                "{}: only {:.0}% below full grid",
                model.name,
                100.0 * (1.0 - ra)
            ));
        }
        if rb > 0.6 {
            failures.push(format!(
                "{}: only {:.0}% below designed",
                model.name,
                100.0 * (1.0 - rb)
            ));
        }
        if z > 3.0 {
            failures.push(format!("{}: mean off by {z:.2} se", model.name));
        }
    }
    within(start, Duration::from_secs(300))?;
    if failures.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(format!("{} [{}]", failures.join(", "), lines.join("; ")))
    }
}

fn c8_analytic_moments() -> Outcome {
    let mut b = GraphBuilder::new(&["u1", "u2"]);
    let (u1, u2) = (b.input(0), b.input(1));
    let a = b.op("a", OpKind::Mul, &[u1, u2]);
    let s = b.op("s", OpKind::Mul, &[u2, u2]);
    let f = b.op("f", OpKind::Add, &[a, s]);
    let g = b.finish(f).map_err(|e| e.to_string())?;
    let std_normal = Distribution::Normal {
        mean: 0.0,
        std: 1.0,
    };
    let rule = full_grid(&[std_normal, std_normal], 3).map_err(|e| e.to_string())?;
    let y = evaluate_naive(&g, rule.nodes())
        .map_err(|e| e.to_string())?
        .outputs;
    let pce = project(&y, &rule, 2).map_err(|e| e.to_string())?;
    let mo = moments(&pce);
    check((mo.mean - 1.0).abs() <= 1e-8, format!("mean {}", mo.mean))?;
    check(
        (mo.variance - 3.0).abs() <= 1e-6,
        format!("variance {}", mo.variance),
    )?;
    Ok(format!(
        "mean {:.12}, variance {:.12}",
        mo.mean, mo.variance
    ))
}

fn c9_enumeration() -> Outcome {
    let bells: Vec<u128> = (1..=6).map(bell_number).collect();
    check(bells == [1, 2, 5, 15, 52, 203], format!("bell {bells:?}"))?;
    for d in 1..=6 {
        let n = enumerate_partitions(d).map_err(|e| e.to_string())?.len() as u128;
        check(
            n == bells[d - 1],
            format!("enumerated {n} partitions for d={d}"),
        )?;
    }
    let fact = |n: usize| (1..=n as u128).product::<u128>();
    for d in 1..=8 {
        for p in 0..=6 {
            let want = fact(d + p) / (fact(d) * fact(p));
            let got = basis_indices(d, p).len() as u128;
            check(got == want, format!("d={d} p={p}: {got} vs {want}"))?;
        }
    }
    let order = basis_indices(2, 2).indices;
    let want: Vec<Vec<u32>> = vec![
        vec![0, 0],
        vec![1, 0],
        vec![0, 1],
        vec![2, 0],
        vec![1, 1],
        vec![0, 2],
    ];
    check(order == want, format!("d=2 p=2 order {order:?}"))?;
    Ok("Bell 1,2,5,15,52,203; basis counts for d<=8, p<=6; 2D order".into())
}

fn c10_smolyak() -> Outcome {
    let dists = [
        Distribution::Normal {
            mean: 0.0,
            std: 1.0,
        },
        Distribution::Uniform {
            lower: -1.0,
            upper: 1.0,
        },
    ];
    let sm = smolyak_grid(&dists, 3).map_err(|e| e.to_string())?;
    let fg = full_grid(&dists, 2).map_err(|e| e.to_string())?;
    let integrate = |r: &partquad::QuadratureRule, a: i32, b: i32| -> f64 {
        let z = r.standardized_nodes();
        z.rows()
            .zip(r.weights())
            .map(|(x, w)| w * x[0].powi(a) * x[1].powi(b))
            .sum()
    };
    let fams = [PolyFamily::Hermite, PolyFamily::Legendre];
    let mut worst = 0.0f64;
    for a in 0..=3 {
        for b in 0..=(3 - a) {
            let exact = exact_moment(&fams[0], a as u32) * exact_moment(&fams[1], b as u32);
            let s = integrate(&sm, a, b);
            let f = integrate(&fg, a, b);
            let e = (s - exact).abs().max((s - f).abs());
            check(
                e <= 1e-8,
                format!("z1^{a} z2^{b}: smolyak {s}, full grid {f}, exact {exact}"),
            )?;
            worst = worst.max(e);
        }
    }
    Ok(format!("{} nodes, max deviation {worst:.1e}", sm.len()))
}

fn c11_determinism() -> Outcome {
    let run = || -> Result<Vec<u8>, String> {
        let out = Command::new(env!("CARGO_BIN_EXE_partquad"))
            .args([
                "uq",
                "--model",
                "uav4d",
                "-k",
                "3",
                "--risk-threshold",
                "400000",
            ])
            .output()
            .map_err(|e| e.to_string())?;
        check(
            out.status.success(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        )?;
        Ok(out.stdout)
    };
    let (a, b) = (run()?, run()?);
    check(!a.is_empty() && a == b, "reports differ")?;
    Ok(format!("{} identical bytes", a.len()))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("1 one-dimensional Gauss exactness", c1_gauss_exactness),
        ("2 full-grid exactness", c2_full_grid_exactness),
        ("3 designed quadrature", c3_designed),
        ("4 transformed-graph oracle equivalence", c4_amtc_oracle),
        ("5 toy-model counts", c5_toy_counts),
        ("6 structure selection", c6_structure),
        ("7 cost reduction", c7_cost_reduction),
        ("8 analytic moments", c8_analytic_moments),
        ("9 enumeration laws", c9_enumeration),
        ("10 Smolyak sanity", c10_smolyak),
        ("11 determinism", c11_determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
