//! Acceptance gate: one PASS/FAIL line per criterion; exits non-zero when any
//! criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};

use dsgd_lab::bounds::{
    bound_convex, bound_nonconvex, bound_strongly, bound_worst_convex, bound_worst_convex_spectral,
    BoundInputs,
};
use dsgd_lab::datagen::MixtureSpec;
use dsgd_lab::engine::{DsgdConfig, Stepsize, Variant};
use dsgd_lab::losses::LossModel;
use dsgd_lab::stability::{
    bootstrap_fraction, bootstrap_ordering, descent_lemma_check, estimate_generalization, estimate_stability,
    link_lemma_check, GenError, GenExperiment, MonteCarlo, PairSelection, StabilityEstimate, StabilityMode,
};
use dsgd_lab::topology::{MixingMatrix, TopologyDiagnostics};

use common::{expansivity_violation, recursion_violation, Regime};

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        id,
        pass,
        detail: detail.into(),
    }
}

const GRAPH_NAMES: [&str; 4] = ["identity", "ring", "lazy_complete(0.9)", "complete"];

fn four_graphs(m: usize) -> Vec<MixingMatrix> {
    vec![
        MixingMatrix::identity(m).unwrap(),
        MixingMatrix::ring(m).unwrap(),
        MixingMatrix::lazy_complete(m, 0.9).unwrap(),
        MixingMatrix::complete_uniform(m).unwrap(),
    ]
}

fn figure_run(n: usize) -> Vec<GenError> {
    let exp = GenExperiment {
        spec: MixtureSpec::default(),
        n,
        algo: DsgdConfig::new(Variant::B, 300, Stepsize::Constant(0.03), 101),
        reps: 30,
        runs: 2,
        test_size: 500,
        data_seed: 2024,
    };
    four_graphs(10)
        .iter()
        .map(|w| estimate_generalization(w, &LossModel::logistic(), &exp).unwrap())
        .collect()
}

fn criteria_1_and_3() -> Vec<Outcome> {
    let res = figure_run(1);
    let t = 300;
    let (id, complete) = (&res[0], &res[3]);
    let frac = bootstrap_ordering(id, complete, t, 200, 7).unwrap();
    let finals: Vec<String> = res
        .iter()
        .zip(GRAPH_NAMES)
        .map(|(g, name)| format!("{name}={:.4}", g.final_value))
        .collect();
    let c1 = outcome(
        1,
        id.final_value < complete.final_value && frac >= 0.9,
        format!("low noise finals [{}]; identity<complete in {:.1}% of 200 bootstraps", finals.join(", "), 100.0 * frac),
    );

    let mut worst_ratio: f64 = 0.0;
    for t in 0..=20 {
        for a in 0..4 {
            for b in (a + 1)..4 {
                let diff = (res[a].per_iteration[t] - res[b].per_iteration[t]).abs();
                let se = res[a].std_error[t].hypot(res[b].std_error[t]);
                let ratio = if diff == 0.0 { 0.0 } else { diff / se };
                worst_ratio = worst_ratio.max(ratio);
            }
        }
    }
    let c3 = outcome(
        3,
        worst_ratio <= 3.0,
        format!("t<=20: max pairwise |diff| / combined stderr = {worst_ratio:.3} (limit 3)"),
    );
    vec![c1, c3]
}

fn criterion_2() -> Outcome {
    let res = figure_run(10);
    let t = 300;
    let finals: Vec<f64> = res.iter().map(|g| g.final_value).collect();
    let spread = |v: &[f64]| {
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        let min = v.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    };
    let refs: Vec<&GenError> = res.iter().collect();
    let frac = bootstrap_fraction(&refs, t, 200, 7, |g| spread(g) <= 2.0).unwrap();
    let names: Vec<String> = finals
        .iter()
        .zip(GRAPH_NAMES)
        .map(|(v, name)| format!("{name}={v:.4}"))
        .collect();
    outcome(
        2,
        spread(&finals) <= 2.0 && frac >= 0.9,
        format!(
            "high noise finals [{}]; max/min = {:.3} (limit 2); within factor 2 in {:.1}% of 200 bootstraps",
            names.join(", "),
            spread(&finals),
            100.0 * frac
        ),
    )
}

fn mc(n: usize, iterations: usize, eta: f64, num_mc: usize, seed: u64) -> MonteCarlo {
    MonteCarlo {
        spec: MixtureSpec::default(),
        n,
        algo: DsgdConfig::new(Variant::B, iterations, Stepsize::Constant(eta), seed),
        num_mc,
        data_seed: seed ^ 0x5eed,
    }
}

fn inputs(est: &StabilityEstimate, topo: TopologyDiagnostics, setup: &MonteCarlo) -> BoundInputs {
    BoundInputs {
        lipschitz: est.observed.lipschitz,
        smoothness: est.observed.smoothness,
        strong_convexity: est.observed.strong_convexity,
        sigma: 0.0,
        decay_c: None,
        stepsize: setup.algo.stepsize,
        iterations: setup.algo.iterations,
        m: topo.m,
        n: setup.n,
        topology: topo,
        init_gap: None,
    }
}

fn criteria_4_and_6() -> Vec<Outcome> {
    let setup = mc(5, 50, 0.03, 200, 44);
    let loss = LossModel::logistic();
    let modes = [StabilityMode::PerAgentMean, StabilityMode::WorstModel];
    let mut pass4 = true;
    let mut pass6 = true;
    let mut d4 = Vec::new();
    let mut d6 = Vec::new();
    for (w, name) in four_graphs(4).iter().zip(GRAPH_NAMES) {
        let est = estimate_stability(w, &loss, &setup, &PairSelection::Full, &modes).unwrap();
        let (mean, worst) = (&est[0], &est[1]);
        let inp = inputs(mean, w.default_diagnostics().unwrap(), &setup);
        let admissible = bound_convex(&inp).admissible;
        let l = inp.lipschitz;
        // Generalization bound divided by L gives the stability bound.
        let bound = bound_convex(&inp).value / l;
        let ok = admissible && mean.epsilon_hat <= bound + 3.0 * mean.std_error;
        pass4 &= ok;
        d4.push(format!(
            "{name}: {:.5}+-{:.5} vs {:.5}{}",
            mean.epsilon_hat,
            mean.std_error,
            bound,
            if admissible { "" } else { " (eta not admissible)" }
        ));
        if name == "identity" || name == "ring" {
            let worst_report = bound_worst_convex(&inp);
            let ok = worst_report.admissible && worst.epsilon_hat * l <= worst_report.value + 3.0 * l * worst.std_error;
            pass6 &= ok;
            d6.push(format!(
                "{name}: L*eps={:.4}+-{:.4} vs {:.4}",
                worst.epsilon_hat * l,
                l * worst.std_error,
                worst_report.value
            ));
        }
    }

    let mut spectral_fail = Vec::new();
    for m in 2..=20usize {
        let mut graphs = vec![
            ("identity", MixingMatrix::identity(m).unwrap()),
            ("complete", MixingMatrix::complete_uniform(m).unwrap()),
            ("lazy_complete(0.9)", MixingMatrix::lazy_complete(m, 0.9).unwrap()),
        ];
        if m >= 3 {
            graphs.push(("ring", MixingMatrix::ring(m).unwrap()));
        }
        for (name, w) in graphs {
            let inp = BoundInputs {
                lipschitz: 1.3,
                smoothness: 0.7,
                strong_convexity: None,
                sigma: 0.0,
                decay_c: None,
                stepsize: Stepsize::Constant(0.05),
                iterations: 37,
                m,
                n: 3,
                topology: w.default_diagnostics().unwrap(),
                init_gap: None,
            };
            if bound_worst_convex_spectral(&inp).value < bound_worst_convex(&inp).value {
                spectral_fail.push(format!("{name}({m})"));
            }
        }
    }
    pass6 &= spectral_fail.is_empty();
    d6.push(if spectral_fail.is_empty() {
        "spectral >= worst on all constructors m=2..20".to_string()
    } else {
        format!("spectral < worst for {}", spectral_fail.join(","))
    });
    vec![
        outcome(4, pass4, format!("per_agent_mean vs 2L sum(eta)/(mn): {}", d4.join("; "))),
        outcome(6, pass6, d6.join("; ")),
    ]
}

fn criterion_5() -> Outcome {
    let loss = LossModel::ridge(0.5, 10.0).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for (w, name) in [
        (MixingMatrix::identity(4).unwrap(), "identity"),
        (MixingMatrix::lazy_complete(4, 0.9).unwrap(), "lazy_complete(0.9)"),
    ] {
        // A T = 0 pass draws the same data and replacements, which fixes the
        // observed smoothness and with it the largest admissible stepsize.
        let probe = estimate_stability(&w, &loss, &mc(5, 0, 0.0, 200, 55), &PairSelection::Full, &[StabilityMode::PerAgentMean])
            .unwrap()[0];
        let eta = 0.95 * w.min_diag() / probe.observed.smoothness;
        let mut ests = Vec::new();
        for t in [100, 200] {
            let setup = mc(5, t, eta, 200, 55);
            let est = estimate_stability(&w, &loss, &setup, &PairSelection::Full, &[StabilityMode::PerAgentMean])
                .unwrap()[0];
            let inp = inputs(&est, w.default_diagnostics().unwrap(), &setup);
            let report = bound_strongly(&inp).unwrap();
            let bound = report.value / inp.lipschitz;
            pass &= report.admissible && est.epsilon_hat <= bound + 3.0 * est.std_error;
            if !report.admissible {
                detail.push(format!("{name}: eta not admissible at T={t}"));
            }
            ests.push((est, bound));
        }
        let (a, b) = (&ests[0].0, &ests[1].0);
        let diff = (a.epsilon_hat - b.epsilon_hat).abs();
        let se = a.std_error.hypot(b.std_error);
        pass &= diff <= 3.0 * se;
        detail.push(format!(
            "{name} (eta {eta:.4}): T=100 {:.5}+-{:.5}, T=200 {:.5}+-{:.5}, bound {:.3}, |diff|/se = {:.2}",
            a.epsilon_hat,
            a.std_error,
            b.epsilon_hat,
            b.std_error,
            ests[0].1,
            diff / se
        ));
    }
    outcome(5, pass, detail.join("; "))
}

fn criterion_7() -> Outcome {
    let tol = 1e-8;
    let viol: Vec<(&str, f64)> = [
        ("nonconvex", Regime::NonConvex),
        ("convex", Regime::Convex),
        ("strongly", Regime::Strongly),
    ]
    .into_iter()
    .map(|(n, r)| (n, expansivity_violation(r, 1000, 77)))
    .collect();
    let mut pass = viol.iter().all(|(_, v)| *v <= tol);

    // Growth recursion on single-agent coupled traces.
    let single = MixingMatrix::identity(1).unwrap();
    let mut growth = f64::NEG_INFINITY;
    let mut all_admissible = true;
    for s in 0..100u64 {
        let (v, adm) = recursion_violation(&single, 5, 60, 0.1, 1000 + s);
        growth = growth.max(v);
        all_admissible &= adm;
    }
    pass &= growth <= 1e-9 && all_admissible;
    outcome(
        7,
        pass,
        format!(
            "max expansivity excess {}; growth recursion max excess {growth:.3e} over 100 traces",
            viol.iter()
                .map(|(n, v)| format!("{n}={v:.3e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn criterion_8() -> Outcome {
    let graphs = four_graphs(4);
    let mut worst = f64::NEG_INFINITY;
    let mut admissible = true;
    for s in 0..100u64 {
        let w = &graphs[(s % 4) as usize];
        let (v, adm) = recursion_violation(w, 5, 50, 0.03, 5000 + s);
        worst = worst.max(v);
        admissible &= adm;
    }
    outcome(
        8,
        worst <= 1e-9 && admissible,
        format!("max excess {worst:.3e} over 100 coupled runs (tol 1e-9), all admissible: {admissible}"),
    )
}

fn criterion_9() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |what: &str, ok: bool| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    for m in [1usize, 4, 7] {
        let i = MixingMatrix::identity(m).unwrap().default_diagnostics().unwrap();
        if m > 1 {
            check("gap(I)=0", i.spectral_gap == 0.0);
        }
        check("C_W(I)=0", i.cw_limit == 0.0);
        check("conn(I)=m", i.connectivity_sum == m as f64);
        let c = MixingMatrix::complete_uniform(m).unwrap().default_diagnostics().unwrap();
        check("gap(complete)=1", (c.spectral_gap - 1.0).abs() <= 1e-9);
        if m > 1 {
            check("C_W(complete)=1", (c.cw_limit - 1.0).abs() <= 1e-9);
        }
        check("conn(complete)=1", (c.connectivity_sum - 1.0).abs() <= 1e-12);
    }
    let r = MixingMatrix::ring(4).unwrap().default_diagnostics().unwrap();
    check("gap(ring4)=2/3", (r.spectral_gap - 2.0 / 3.0).abs() <= 1e-9);
    check("C_W(ring4)=2", (r.cw_limit - 2.0).abs() <= 1e-6);
    let mut worst_dev: f64 = 0.0;
    for m in [2usize, 5, 10] {
        let mut ws = vec![
            MixingMatrix::identity(m).unwrap(),
            MixingMatrix::complete_uniform(m).unwrap(),
            MixingMatrix::lazy_complete(m, 0.9).unwrap(),
        ];
        if m >= 3 {
            ws.push(MixingMatrix::ring(m).unwrap());
        }
        for w in ws {
            for t in 0..=32 {
                let report = w.power(t).unwrap().validate();
                worst_dev = worst_dev.max(report.max_sum_deviation());
                check("W^t doubly stochastic", report.passed());
            }
        }
    }
    outcome(
        9,
        failures.is_empty(),
        if failures.is_empty() {
            format!("all golden values match; max row/col deviation of W^t (t<=32) {worst_dev:.1e}")
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

fn criterion_10() -> Outcome {
    let w = MixingMatrix::complete_uniform(4).unwrap();
    let base = BoundInputs {
        lipschitz: 1.0,
        smoothness: 1.0,
        strong_convexity: Some(0.5),
        sigma: 0.0,
        decay_c: None,
        stepsize: Stepsize::Constant(0.1),
        iterations: 10,
        m: 4,
        n: 5,
        topology: w.default_diagnostics().unwrap(),
        init_gap: None,
    };
    let convex = bound_convex(&base).value;
    let strongly = bound_strongly(&base).unwrap().value;
    let nonconvex = bound_nonconvex(&BoundInputs {
        stepsize: Stepsize::Decaying { c: 1.0 },
        iterations: 16,
        ..base.clone()
    })
    .unwrap()
    .value;
    // Independent arithmetic: (1 + 1/(bc)) (2cL^2)^{1/(bc+1)} T^{bc/(bc+1)} / (n m^{1/(bc+1)}).
    let expected_nc = 2.0 * 2f64.sqrt() * 4.0 / (5.0 * 2.0);
    let pass = (convex - 0.1).abs() <= 1e-9 && (strongly - 0.4).abs() <= 1e-9 && (nonconvex - expected_nc).abs() <= 1e-9;
    outcome(
        10,
        pass,
        format!("convex {convex:.12}, strongly {strongly:.12}, nonconvex {nonconvex:.12} (expected 0.1, 0.4, {expected_nc:.12})"),
    )
}

fn criterion_11() -> Outcome {
    let loss = LossModel::ridge(0.5, 10.0).unwrap();
    let w = MixingMatrix::ring(4).unwrap();
    let setup = mc(5, 50, 0.01, 200, 66);
    let descent = descent_lemma_check(&w, &loss, &setup).unwrap();
    let link = link_lemma_check(&w, &loss, &setup, 500).unwrap();
    outcome(
        11,
        descent.holds(3.0) && link.holds(3.0),
        format!(
            "descent: lhs {:.4}+-{:.4} vs rhs {:.4}+-{:.4}; link: |gap| {:.4}+-{:.4} vs bound {:.4}",
            descent.lhs_mean,
            descent.lhs_stderr,
            descent.rhs_mean,
            descent.rhs_stderr,
            link.gap.lhs_mean.abs(),
            link.gap.lhs_stderr,
            link.gap.rhs_mean
        ),
    )
}

const CLI_CONFIG: &str = r#"
[graph]
kind = ["identity", "ring", "lazy_complete", "complete"]
m = 4
self_weight = 0.9

[loss]
kind = "logistic"

[algo]
variant = "B"
T = 30
eta = 0.03
seed = 5

[data]
n = 3
seed = 8

[stability]
num_mc = 12
pair_subset_size = 6

[genexp]
reps = 6
runs = 2
test_size = 100
"#;

fn run_cli(command: &str, config: &Path, out: &Path, threads: usize) -> bool {
    Command::new(env!("CARGO_BIN_EXE_dsgd-lab"))
        .args([command, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--threads", &threads.to_string()])
        .env("RUST_LOG", "error")
        .stdout(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn criterion_12() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    fs::write(&config, CLI_CONFIG).unwrap();
    let mut failures = Vec::new();
    let mut files_checked = 0;
    for command in ["topology", "bounds", "stability", "genexp"] {
        let outs: Vec<_> = [(1usize, "a"), (8, "b"), (1, "c")]
            .iter()
            .map(|(threads, tag)| {
                let out = dir.path().join(format!("{command}-{tag}"));
                (run_cli(command, &config, &out, *threads), out)
            })
            .collect();
        if outs.iter().any(|(ok, _)| !ok) {
            failures.push(format!("{command}: command failed"));
            continue;
        }
        let mut names: Vec<_> = fs::read_dir(&outs[0].1)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        for name in names {
            let reference = fs::read(outs[0].1.join(&name)).unwrap();
            for (_, other) in &outs[1..] {
                if fs::read(other.join(&name)).ok().as_ref() != Some(&reference) {
                    failures.push(format!("{command}: {} differs", name.to_string_lossy()));
                }
            }
            files_checked += 1;
        }
    }
    outcome(
        12,
        failures.is_empty(),
        if failures.is_empty() {
            format!("{files_checked} output files byte-identical across runs and --threads 1/8")
        } else {
            failures.join("; ")
        },
    )
}

fn main() {
    let mut results = Vec::new();
    results.extend(criteria_1_and_3());
    results.push(criterion_2());
    results.extend(criteria_4_and_6());
    results.push(criterion_5());
    results.push(criterion_7());
    results.push(criterion_8());
    results.push(criterion_9());
    results.push(criterion_10());
    results.push(criterion_11());
    results.push(criterion_12());
    results.sort_by_key(|o| o.id);
    let mut failed = 0;
    for o in &results {
        println!(
            "[criterion {:>2}] {} {}",
            o.id,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {} failed", results.len() - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
