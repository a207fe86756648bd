//! End-to-end acceptance checks. Runs as a plain binary so that every
//! criterion prints exactly one line, in order, and timing checks do not
//! compete with other tests for cores.

mod common;

use std::time::{Duration, Instant};

use common::{gradient_error, rng, toy_instances, toy_model};
use mdl::backbone::Task;
use mdl::dependency::{
    dependency_loss, dependency_loss_by_fields, project_diagonal, refine, simplex_project, MuInit, RefineConfig,
};
use mdl::eval::{auc, evaluate, logloss_mean};
use mdl::ingest::{build_schema, encode_table, read_csv, split_and_batch, FieldDecl, FieldKind, RawTable};
use mdl::linalg::Mat;
use mdl::model::{GraphSpec, Mode};
use mdl::parallel::{default_threads, map_indexed};
use mdl::synthetic::{planted_table, LabelRule, PlantedConfig};
use mdl::trainer::{train, TrainConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

type Check = fn() -> Outcome;

fn main() {
    let criteria: Vec<(&str, Check)> = vec![
        ("simplex projection vs oracle", projection_oracle),
        ("budget limits", budget_limits),
        ("loss-form equivalence", loss_forms),
        ("gradient fidelity", gradient_fidelity),
        ("monotone inner loop", monotone_inner_loop),
        ("planted ablation ordering", planted_ablation),
        ("frappe reproduction", frappe),
        ("metric oracles", metric_oracles),
        ("refine complexity", refine_complexity),
        ("training determinism", determinism),
    ];
    // `MDL_ACCEPTANCE_ONLY=2,9` runs a subset.
    let only: Option<Vec<usize>> = std::env::var("MDL_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let line = match check() {
            Outcome::Pass(d) => format!("PASS  {:>2} {name}: {d}", i + 1),
            Outcome::Fail(d) => {
                failed += 1;
                format!("FAIL  {:>2} {name}: {d}", i + 1)
            }
            Outcome::NotRun(d) => format!("NOT RUN {:>2} {name}: {d}", i + 1),
        };
        println!("{line}");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

/// The multiplier `β` solving `Σ max(μ̂ − β, 0) = λ`, by bisection.
fn bisection_beta(hat: &[f64], lambda: f64) -> f64 {
    let max = hat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = hat.iter().cloned().fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (min - lambda, max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s: f64 = hat.iter().map(|&h| (h - mid).max(0.0)).sum();
        if s > lambda {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact projection by enumerating every candidate support and keeping the
/// feasible candidate closest to `μ̂`.
fn enumeration_oracle(hat: &[f64], lambda: f64) -> Vec<f64> {
    let m = hat.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << m) {
        let idx: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        let beta = (idx.iter().map(|&i| hat[i]).sum::<f64>() - lambda) / idx.len() as f64;
        let mut mu = vec![0.0; m];
        for &i in &idx {
            mu[i] = hat[i] - beta;
        }
        if mu.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let dist: f64 = mu.iter().zip(hat).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, mu));
        }
    }
    best.expect("some support is feasible").1
}

fn projection_oracle() -> Outcome {
    let mut r = rng(1);
    let lambdas = [0.01, 1.0, 100.0];
    let mut worst_gap: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    let mut elapsed = Duration::ZERO;
    for case in 0..1000 {
        let m = r.random_range(1..=50);
        let lambda = lambdas[case % 3];
        let spread = if r.random_bool(0.5) { 1.0 } else { lambda };
        let hat: Vec<f64> = (0..m).map(|_| spread * normal(&mut r)).collect();
        let start = Instant::now();
        let p = simplex_project(&hat, lambda).expect("valid input");
        elapsed += start.elapsed();
        worst_kkt = worst_kkt.max(p.certificate(&hat, lambda).max_violation());
        let beta = bisection_beta(&hat, lambda);
        let reference: Vec<f64> = if m <= 12 {
            enumeration_oracle(&hat, lambda)
        } else {
            hat.iter().map(|&h| (h - beta).max(0.0)).collect()
        };
        for (a, b) in p.mu.iter().zip(&reference) {
            worst_gap = worst_gap.max((a - b).abs());
        }
    }
    verdict(
        worst_gap <= 1e-8 && worst_kkt <= 1e-12 && elapsed < Duration::from_secs(1),
        format!(
            "max |mu - oracle| = {worst_gap:.2e} (tol 1e-8), max KKT violation = {worst_kkt:.2e} (tol 1e-12), {:.1} ms",
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

fn budget_limits() -> Outcome {
    let mut r = rng(2);
    let mut max_support_small = 0;
    let mut max_std_large: f64 = 0.0;
    for _ in 0..100 {
        let m = r.random_range(2..=30);
        let hat: Vec<f64> = (0..m).map(|_| r.random_range(0.0..1.0)).collect();
        let small = simplex_project(&hat, 1e-6).expect("valid input");
        let argmax = (0..m).max_by(|&a, &b| hat[a].total_cmp(&hat[b])).expect("non-empty");
        let support = small.mu.iter().filter(|&&v| v > 0.0).count();
        if small.mu[argmax] == 0.0 {
            return Outcome::Fail("small budget landed off the maximum".into());
        }
        max_support_small = max_support_small.max(support);
        let large = simplex_project(&hat, 1e6).expect("valid input");
        let scaled: Vec<f64> = large.mu.iter().map(|v| v / 1e6).collect();
        let mean = scaled.iter().sum::<f64>() / m as f64;
        let var = scaled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        max_std_large = max_std_large.max(var.sqrt());
    }
    verdict(
        max_support_small == 1 && max_std_large < 1e-6,
        format!("lambda=1e-6 max support {max_support_small}, lambda=1e6 max std(mu/lambda) {max_std_large:.2e} (tol 1e-6)"),
    )
}

fn random_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| normal(r)).collect()).expect("shape")
}

fn loss_forms() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = r.random_range(1..=8);
        let m = r.random_range(2..=12);
        let lambda = 10f64.powf(r.random_range(-2.0..2.0));
        let e = random_mat(&mut r, k, m);
        let w = project_diagonal(&random_mat(&mut r, m, m));
        let hat: Vec<f64> = (0..m).map(|_| normal(&mut r)).collect();
        let mu = simplex_project(&hat, lambda).expect("valid input").mu;
        let matrix = dependency_loss(&e, &w, &mu, lambda).expect("shapes agree");
        let fields = dependency_loss_by_fields(&e, &w, &mu, lambda).expect("shapes agree");
        // Direct summation: (1/(2λ)) Σ_k μ_k ‖Σ_i w_ik e_i‖².
        let mut direct = 0.0;
        for (c, &muc) in mu.iter().enumerate() {
            let mut sq = 0.0;
            for row in 0..k {
                let v: f64 = (0..m).map(|i| w[(i, c)] * e[(row, i)]).sum();
                sq += v * v;
            }
            direct += muc * sq;
        }
        direct /= 2.0 * lambda;
        worst = worst.max((matrix - fields).abs()).max((matrix - direct).abs());
    }
    verdict(worst <= 1e-12, format!("max abs difference {worst:.2e} (tol 1e-12)"))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for &steps in &[1usize, 2, 4] {
        for (seed, &(m, k)) in [(2usize, 2usize), (3, 2), (4, 3), (3, 4), (4, 4)].iter().enumerate() {
            let model = toy_model(m, k, 3, &[5, 4, 3], Task::Binary, false, 1000 + seed as u64 + 10 * steps as u64);
            let data = toy_instances(&model, 4, 2000 + seed as u64);
            let spec = GraphSpec {
                steps,
                eta: 0.2,
                lambda: 1.0,
                mu_init: MuInit::Uniform,
                mode: Mode::Mdl,
                zeta: 0.0,
                first_order: false,
            };
            worst = worst.max(gradient_error(&model, &spec, &data, 1e-6).0);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-4 && secs < 30.0,
        format!("worst block relative error {worst:.2e} (tol 1e-4) over T in {{1,2,4}}, {secs:.1} s"),
    )
}

struct InnerCase {
    e: Mat,
    w0: Mat,
}

fn inner_cases(r: &mut ChaCha8Rng, n: usize) -> Vec<InnerCase> {
    (0..n)
        .map(|_| {
            let k = r.random_range(2..=8);
            let m = r.random_range(2..=10);
            InnerCase {
                e: random_mat(r, k, m),
                w0: project_diagonal(&random_mat(r, m, m)),
            }
        })
        .collect()
}

fn monotone(cases: &[InnerCase], eta: f64) -> bool {
    cases.iter().all(|c| {
        let out = refine(&c.e, &c.w0, &RefineConfig::new(4, eta, 1.0)).expect("valid refinement");
        out.losses.windows(2).all(|w| w[1] <= w[0])
    })
}

fn monotone_inner_loop() -> Outcome {
    let mut r = rng(5);
    let calibration = inner_cases(&mut r, 100);
    let mut eta = 0.1;
    let mut halvings = 0;
    while !monotone(&calibration, eta) {
        eta *= 0.5;
        halvings += 1;
        if halvings > 30 {
            return Outcome::Fail("no step size below 0.1 gives monotone traces".into());
        }
    }
    let fresh = inner_cases(&mut r, 100);
    verdict(
        monotone(&fresh, eta),
        format!("eta = {eta} after {halvings} halvings; 100 fresh instances non-increasing over T=4"),
    )
}

fn planted_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.apply_text(
        "k=8\nt=2\neta=0.3\ninit_scale=0.1\nbatch_size=256\nepochs=25\npatience=3\ngamma=0.003\nzeta=0.001\n",
    )
    .expect("valid config");
    c.seed = seed;
    c
}

fn categorical_decls(table: &RawTable, label: &str) -> Vec<FieldDecl> {
    table
        .columns
        .iter()
        .filter(|c| c.as_str() != label)
        .map(|c| FieldDecl::new(c.clone(), FieldKind::Categorical, 1))
        .collect()
}

fn planted_ablation() -> Outcome {
    let start = Instant::now();
    let seeds: Vec<u64> = (10..15).collect();
    let modes = [Mode::Mdl, Mode::NoDep, Mode::GlobalDep];
    let jobs: Vec<(u64, Mode)> = seeds.iter().flat_map(|&s| modes.iter().map(move |&m| (s, m))).collect();
    let results = map_indexed(jobs.len(), default_threads(), |j| {
        let (seed, mode) = jobs[j];
        let table = planted_table(&PlantedConfig {
            rule: LabelRule::Residual,
            fields: 5,
            features: 20,
            instances: 50_000,
            latent_dim: 6,
            seed,
            ..PlantedConfig::default()
        });
        let schema = build_schema(table.records(), &categorical_decls(&table, "label"), "label").expect("schema");
        let data = encode_table(&table, &schema, 1).expect("encode");
        let config = TrainConfig {
            mode,
            ..planted_config(seed)
        };
        let split = split_and_batch(&data, config.split, config.batch_size, seed).expect("split");
        let out = train(&split, &schema, &config, 1, &mut |_| {}).expect("training");
        let report = evaluate(&out.checkpoint.model, &config.graph_spec(), &split.test, 1).expect("evaluate");
        report.logloss.expect("binary task")
    });
    let mean = |mode: Mode| {
        let v: Vec<f64> = jobs.iter().zip(&results).filter(|(j, _)| j.1 == mode).map(|(_, &l)| l).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (mdl, none, global) = (mean(Mode::Mdl), mean(Mode::NoDep), mean(Mode::GlobalDep));
    let secs = start.elapsed().as_secs_f64();
    verdict(
        mdl < none && mdl < global && secs < 900.0,
        format!("mean test logloss over 5 seeds: mdl {mdl:.5}, no_dep {none:.5}, global_dep {global:.5}; {secs:.0} s"),
    )
}

fn frappe() -> Outcome {
    let Ok(path) = std::env::var("MDL_FRAPPE_CSV") else {
        return Outcome::NotRun("dataset unavailable (set MDL_FRAPPE_CSV to a CSV with a 0/1 `label` column)".into());
    };
    let start = Instant::now();
    let mut table = match read_csv(std::path::Path::new(&path)) {
        Ok(t) => t,
        Err(e) => return Outcome::Fail(format!("cannot read {path}: {e}")),
    };
    let Some(label_col) = table.columns.iter().position(|c| c == "label") else {
        return Outcome::Fail("no `label` column".into());
    };
    for row in &mut table.rows {
        if row[label_col].trim() == "-1" {
            row[label_col] = "0".into();
        }
    }
    let schema = match build_schema(table.records(), &categorical_decls(&table, "label"), "label") {
        Ok(s) => s,
        Err(e) => return Outcome::Fail(format!("schema: {e}")),
    };
    let threads = default_threads();
    let data = encode_table(&table, &schema, threads).expect("encode after schema build");
    let config = TrainConfig {
        shards: threads,
        ..TrainConfig::default()
    };
    let split = split_and_batch(&data, config.split, config.batch_size, config.seed).expect("split");
    let out = match train(&split, &schema, &config, threads, &mut |_| {}) {
        Ok(o) => o,
        Err(e) => return Outcome::Fail(format!("training: {e}")),
    };
    let report = evaluate(&out.checkpoint.model, &config.graph_spec(), &split.test, threads).expect("evaluate");
    let (a, l) = (report.auc.unwrap_or(0.0), report.logloss.unwrap_or(f64::INFINITY));
    let secs = start.elapsed().as_secs_f64();
    verdict(
        a >= 0.975 && l <= 0.145 && secs <= 1800.0,
        format!("test auc {a:.4} (>= 0.975), logloss {l:.4} (<= 0.145), {secs:.0} s"),
    )
}

fn metric_oracles() -> Outcome {
    let mut r = rng(8);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(2..=1000);
        let labels: Vec<f64> = (0..n).map(|i| if i < 1 { 0.0 } else if i < 2 { 1.0 } else { f64::from(r.random_bool(0.3)) }).collect();
        // Coarse scores so that ties occur.
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0.0..1.0f64) * 20.0).floor() / 20.0).collect();
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            if yi != 1.0 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0.0 {
                    continue;
                }
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        worst = worst.max((auc(&scores, &labels).expect("both classes") - wins / pairs).abs());
    }
    let labels: Vec<f64> = (0..101).map(|i| f64::from(i % 3 == 0)).collect();
    let ll = logloss_mean(&vec![0.5; 101], &labels).expect("non-empty");
    let ll_gap = (ll - std::f64::consts::LN_2).abs();
    verdict(
        worst <= 1e-12 && ll_gap <= 1e-12,
        format!("auc vs pairwise oracle {worst:.2e}, logloss(0.5) - ln 2 = {ll_gap:.2e} (tol 1e-12)"),
    )
}

fn refine_complexity() -> Outcome {
    let mut r = rng(9);
    let (k, n) = (16usize, 200usize);
    let cfg = RefineConfig::new(4, 0.01, 1.0);
    let sizes = [4usize, 8, 16, 32];
    let cases: Vec<Vec<(Mat, Mat)>> = sizes
        .iter()
        .map(|&m| (0..n).map(|_| (random_mat(&mut r, k, m), project_diagonal(&random_mat(&mut r, m, m)))).collect())
        .collect();
    // Repetitions interleave the sizes so background load hits all of them alike.
    let mut best = vec![f64::INFINITY; sizes.len()];
    for _ in 0..15 {
        for (b, set) in best.iter_mut().zip(&cases) {
            let start = Instant::now();
            for (e, w0) in set {
                std::hint::black_box(refine(e, w0, &cfg).expect("valid refinement"));
            }
            *b = b.min(start.elapsed().as_secs_f64());
        }
    }
    let points: Vec<(f64, f64)> = sizes.iter().zip(&best).map(|(&m, &t)| ((m as f64).ln(), t.ln())).collect();
    let mx = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let my = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
    let times: Vec<String> = points.iter().zip(&sizes).map(|(p, m)| format!("m={m}: {:.2} ms", p.1.exp() * 1e3)).collect();
    verdict(
        (1.5..=2.5).contains(&slope),
        format!("log-log slope {slope:.2} (range [1.5, 2.5]); {}", times.join(", ")),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let data = dir.path().join("train.csv");
    let table = planted_table(&PlantedConfig {
        instances: 3000,
        latent_dim: 6,
        seed: 3,
        ..PlantedConfig::default()
    });
    table.write_csv(std::fs::File::create(&data).expect("create")).expect("write csv");
    let schema = dir.path().join("schema.tsv");
    let s = |p: &std::path::Path| p.to_str().expect("utf-8 path").to_string();
    let code = mdl::cli::run(["mdl", "build-schema", "--data", &s(&data), "--out", &s(&schema)]);
    if code != 0 {
        return Outcome::Fail(format!("build-schema exited {code}"));
    }
    let mut bytes = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("model{run}.ckpt"));
        let log = dir.path().join(format!("log{run}.csv"));
        let code = mdl::cli::run([
            "mdl", "train", "--data", &s(&data), "--schema", &s(&schema), "--out", &s(&out), "--log", &s(&log),
            "--threads", "3", "--shards", "4", "--k", "6", "--t", "2", "--epochs", "3", "--batch-size", "128",
            "--hidden", "16,16", "--seed", "11",
        ]);
        if code != 0 {
            return Outcome::Fail(format!("train exited {code}"));
        }
        bytes.push(std::fs::read(&out).expect("checkpoint written"));
    }
    verdict(
        bytes[0] == bytes[1],
        format!("two runs wrote {} and {} byte checkpoints, identical: {}", bytes[0].len(), bytes[1].len(), bytes[0] == bytes[1]),
    )
}
