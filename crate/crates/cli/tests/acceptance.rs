//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use pfcl_core::eval::{avg_accuracy, forgetting, EvalMatrix};
use pfcl_core::experiment::{build_aux, build_stream, parse_spec, ExperimentSpec};
use pfcl_core::linalg::{Matrix, Rng};
use pfcl_core::losses::{combined_loss, cross_entropy, kd_loss, Hyperparams, Regularization};
use pfcl_core::nn::{Gradients, Layer, MlpModel};
use pfcl_core::selection::{select_top_k, DiscrepancyScore};
use pfcl_core::tasks::{AuxiliaryPool, TaskStream};
use pfcl_core::trainer::{run_continual, Method, RunOutput, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type LossFn<'a> = Box<dyn Fn(&Matrix) -> (f64, Matrix) + 'a>;

fn benchmark(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../benchmarks")
        .join(format!("{name}.toml"))
}

fn random_matrix(r: usize, c: usize, scale: f64, rng: &mut Rng) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn random_labels(n: usize, classes: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes)).collect()
}

/// Visits every parameter as (layer, is_bias, flat index).
fn parameters(model: &MlpModel) -> Vec<(usize, bool, usize)> {
    let mut out = Vec::new();
    for (l, layer) in model.layers().iter().enumerate() {
        out.extend((0..layer.weight.data().len()).map(|i| (l, false, i)));
        out.extend((0..layer.bias.data().len()).map(|i| (l, true, i)));
    }
    out
}

fn perturbed(model: &MlpModel, (l, bias, i): (usize, bool, usize), delta: f64) -> MlpModel {
    let mut layers: Vec<Layer> = model.layers().to_vec();
    let m = if bias {
        &mut layers[l].bias
    } else {
        &mut layers[l].weight
    };
    let (r, c) = (i / m.cols(), i % m.cols());
    m.set(r, c, m.get(r, c) + delta);
    MlpModel::from_layers(layers).unwrap()
}

fn analytic(grads: &Gradients, (l, bias, i): (usize, bool, usize)) -> f64 {
    let g = &grads.layers[l];
    if bias {
        g.db.data()[i]
    } else {
        g.dw.data()[i]
    }
}

fn grad_close(a: f64, n: f64) -> bool {
    let diff = (a - n).abs();
    diff <= 1e-8 || diff / a.abs().max(n.abs()) <= 1e-4
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(20240);
    let eps = 1e-5;
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let instances = 60;
    for inst in 0..instances {
        let d = 2 + rng.below(5);
        let h = 2 + rng.below(6);
        let c = 2 + rng.below(5);
        let n = 2 + rng.below(5);
        let model = MlpModel::new(&[d, h, c], &mut rng).unwrap();
        let old = MlpModel::new(&[d, h, c], &mut rng).unwrap();
        let x = random_matrix(2 * n, d, 1.0, &mut rng);
        let labels = random_labels(n, c, &mut rng);
        let tau = 0.5 + 4.0 * rng.unit();
        let alpha = 2.0 * rng.unit();
        let hp = Hyperparams { alpha, tau };
        let k = 1 + rng.below(2 * n);
        let mut rows: Vec<usize> = rng.permutation(2 * n)[..k].to_vec();
        rows.sort_unstable();
        let z_old = old.logits(&x).unwrap();
        let x_lab = x.select_rows(&(0..n).collect::<Vec<_>>()).unwrap();
        let z_old_lab = old.logits(&x_lab).unwrap();

        // Each loss as a function of the parameters, plus its batch input.
        let losses: [(&str, &Matrix, LossFn); 3] = [
            (
                "ce",
                &x_lab,
                Box::new(|z: &Matrix| {
                    let o = cross_entropy(z, &labels).unwrap();
                    (o.value, o.dlogits)
                }),
            ),
            (
                "kd",
                &x_lab,
                Box::new(|z: &Matrix| {
                    let o = kd_loss(z, &z_old_lab, tau).unwrap();
                    (o.value, o.dlogits)
                }),
            ),
            (
                "combined",
                &x,
                Box::new(|z: &Matrix| {
                    let o = combined_loss(
                        z,
                        &labels,
                        Some(Regularization {
                            old_logits: &z_old,
                            rows: &rows,
                        }),
                        &hp,
                    )
                    .unwrap();
                    (o.value, o.dlogits)
                }),
            ),
        ];
        for (name, input, f) in &losses {
            let (z, cache) = model.forward(input).unwrap();
            let (_, dz) = f(&z);
            let grads = model.backward(&cache, &dz).unwrap();
            for p in parameters(&model) {
                let plus = f(&perturbed(&model, p, eps).logits(input).unwrap()).0;
                let minus = f(&perturbed(&model, p, -eps).logits(input).unwrap()).0;
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic(&grads, p);
                checked += 1;
                let scale = a.abs().max(numeric.abs());
                if scale > 1e-6 {
                    worst = worst.max((a - numeric).abs() / scale);
                }
                if !grad_close(a, numeric) && failures.len() < 3 {
                    failures.push(format!("instance {inst} {name} {p:?}: {a} vs {numeric}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        failures.is_empty() && secs < 60.0,
        format!(
            "{instances} instances, {checked} parameter checks, worst relative error {worst:.2e}, {secs:.1}s{}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failures.join("; "))
            }
        ),
    )
}

fn criterion_stationarity() -> Outcome {
    let mut rng = Rng::new(77);
    let mut worst_kd = 0.0f64;
    let mut worst_combined = 0.0f64;
    for _ in 0..20 {
        let n = 2 + rng.below(8);
        let c = 2 + rng.below(8);
        let z = random_matrix(2 * n, c, 3.0, &mut rng);
        let tau = 0.5 + 4.0 * rng.unit();
        let kd = kd_loss(&z, &z, tau).unwrap();
        worst_kd = worst_kd.max(kd.dlogits.max_abs());

        let labels = random_labels(n, c, &mut rng);
        let rows: Vec<usize> = (0..2 * n).filter(|_| rng.unit() < 0.6).collect();
        let hp = Hyperparams {
            alpha: 2.0 * rng.unit(),
            tau,
        };
        let comb = combined_loss(
            &z,
            &labels,
            Some(Regularization {
                old_logits: &z,
                rows: &rows,
            }),
            &hp,
        )
        .unwrap();
        let ce = combined_loss(&z, &labels, None, &hp).unwrap();
        worst_combined = worst_combined.max(comb.dlogits.sub(&ce.dlogits).unwrap().max_abs());
    }
    Outcome::new(
        worst_kd <= 1e-15 && worst_combined <= 1e-12,
        format!("20 instances, max |KD grad| {worst_kd:.1e}, max |combined - CE| {worst_combined:.1e}"),
    )
}

fn criterion_selection() -> Outcome {
    let mut rng = Rng::new(3);
    let mut mismatches = 0;
    let mut tie_instances = 0;
    for inst in 0..1000 {
        let m = 1 + rng.below(80);
        let k = 1 + rng.below(m);
        // Half the instances draw from a handful of values to force ties.
        let coarse = inst % 2 == 0;
        let scores: Vec<DiscrepancyScore> = (0..m)
            .map(|index| DiscrepancyScore {
                index,
                score: if coarse {
                    rng.below(5) as f64
                } else {
                    10.0 * rng.unit()
                },
            })
            .collect();
        let mut distinct: Vec<u64> = scores.iter().map(|s| s.score.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < m {
            tie_instances += 1;
        }
        let mut oracle = scores.clone();
        oracle.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
        let mut expected: Vec<usize> = oracle[..k].iter().map(|s| s.index).collect();
        expected.sort_unstable();
        if select_top_k(&scores, k).unwrap() != expected {
            mismatches += 1;
        }
    }
    Outcome::new(
        mismatches == 0,
        format!("1000 instances ({tie_instances} with tied scores), {mismatches} mismatches"),
    )
}

fn criterion_metrics() -> Outcome {
    let mut rng = Rng::new(11);
    let mut worst = 0.0f64;
    let mut invariance_broken = 0;
    for _ in 0..100 {
        let t = 2 + rng.below(9);
        // Entries a[i][t] for t > i are diagnostic; the oracle matrix
        // leaves them at 0 so the literal formula applies.
        let mut rows = vec![vec![0.0; t]; t];
        for (i, row) in rows.iter_mut().enumerate() {
            for v in row.iter_mut().take(i + 1) {
                *v = rng.unit();
            }
        }
        let m = EvalMatrix::from_rows(rows.clone()).unwrap();
        let acc_oracle = rows[t - 1].iter().sum::<f64>() / t as f64;
        let mut forget_sum = 0.0;
        for task in 0..t - 1 {
            let mut best = f64::NEG_INFINITY;
            for row in rows.iter().take(t - 1) {
                best = best.max(row[task] - rows[t - 1][task]);
            }
            forget_sum += best;
        }
        let forget_oracle = forget_sum / (t - 1) as f64;
        let acc = avg_accuracy(&m).unwrap();
        let forget = forgetting(&m).unwrap();
        worst = worst
            .max((acc - acc_oracle).abs())
            .max((forget - forget_oracle).abs());

        let mut filled = rows.clone();
        for (i, row) in filled.iter_mut().enumerate() {
            for v in row.iter_mut().skip(i + 1) {
                *v = rng.unit();
            }
        }
        let f2 = EvalMatrix::from_rows(filled).unwrap();
        if avg_accuracy(&f2).unwrap() != acc || forgetting(&f2).unwrap() != forget {
            invariance_broken += 1;
        }
    }
    let hand = EvalMatrix::from_rows(vec![vec![0.9, 0.0], vec![0.5, 0.7]]).unwrap();
    let hand_forget = forgetting(&hand).unwrap();
    Outcome::new(
        worst <= 1e-12 && invariance_broken == 0 && hand_forget == 0.4,
        format!(
            "100 matrices, max deviation {worst:.1e}, diagnostic-entry invariance broken {invariance_broken} times, hand case Forget = {hand_forget}"
        ),
    )
}

/// One trained run and its wall time.
struct Run {
    out: RunOutput,
    secs: f64,
}

struct Suite {
    stream: TaskStream,
    aux: Option<AuxiliaryPool>,
    spec: ExperimentSpec,
    runs: BTreeMap<(String, u64), Run>,
}

impl Suite {
    fn load(name: &str) -> Self {
        let spec = parse_spec(benchmark(name)).unwrap();
        let stream = build_stream(&spec.stream).unwrap();
        let aux = build_aux(&spec.aux, &stream).unwrap();
        Self {
            stream,
            aux,
            spec,
            runs: BTreeMap::new(),
        }
    }

    fn train(&mut self, label: &str, cfg: TrainConfig) {
        for &seed in &self.spec.seeds {
            let cfg = cfg.with_seed(seed);
            let start = Instant::now();
            let out = run_continual(&self.stream, self.aux.as_ref(), &cfg).unwrap();
            let secs = start.elapsed().as_secs_f64();
            self.runs.insert((label.to_string(), seed), Run { out, secs });
        }
    }

    fn method(&mut self, method: Method) {
        let cfg = self.spec.train.with_method(method);
        self.train(method.name(), cfg);
    }

    fn of(&self, label: &str) -> Vec<&Run> {
        self.runs
            .iter()
            .filter(|((l, _), _)| l == label)
            .map(|(_, r)| r)
            .collect()
    }

    fn mean_acc(&self, label: &str) -> f64 {
        let runs = self.of(label);
        runs.iter()
            .map(|r| avg_accuracy(&r.out.matrix).unwrap())
            .sum::<f64>()
            / runs.len() as f64
    }

    fn mean_task_il(&self, label: &str) -> f64 {
        let runs = self.of(label);
        runs.iter()
            .map(|r| avg_accuracy(r.out.task_il.as_ref().unwrap()).unwrap())
            .sum::<f64>()
            / runs.len() as f64
    }
}

fn criterion_forgetting(g: &Suite) -> Outcome {
    let jt = g.mean_acc("jt");
    let mut ok = jt >= 0.95;
    let mut parts = vec![format!("JT Acc {jt:.3}")];
    for r in g.of("ft") {
        let t = r.out.matrix.tasks();
        let acc = avg_accuracy(&r.out.matrix).unwrap();
        let last = r.out.matrix.get(t - 1, t - 1).unwrap();
        ok &= acc <= 0.35 && last >= 0.90 && r.secs < 120.0;
        parts.push(format!("FT Acc {acc:.3} a[T][T] {last:.3} ({:.1}s)", r.secs));
    }
    Outcome::new(ok, parts.join(", "))
}

fn criterion_regularization(g: &Suite) -> Outcome {
    let ft_til = g.mean_task_il("ft");
    let kd_til = g.mean_task_il("kd_only");
    let ft = g.mean_acc("ft");
    let pfcl = g.mean_acc("pfcl");
    Outcome::new(
        kd_til - ft_til >= 0.10 && pfcl - ft >= 0.15,
        format!(
            "Task-IL kd_only {kd_til:.3} vs ft {ft_til:.3} (+{:.3}); Class-IL pfcl {pfcl:.3} vs ft {ft:.3} (+{:.3})",
            kd_til - ft_til,
            pfcl - ft
        ),
    )
}

fn criterion_rss(g: &Suite) -> Outcome {
    let with = g.mean_acc("pfcl");
    let without = g.mean_acc("pfcl_no_rss");
    Outcome::new(
        with >= without - 0.03,
        format!("pfcl with RSS {with:.3}, without {without:.3} (difference {:+.3})", with - without),
    )
}

fn criterion_ordering(suites: &[(&str, &Suite)]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, s) in suites {
        let (jt, pfcl, ft) = (s.mean_acc("jt"), s.mean_acc("pfcl"), s.mean_acc("ft"));
        ok &= jt >= pfcl && pfcl >= ft;
        parts.push(format!("{name}: jt {jt:.3} >= pfcl {pfcl:.3} >= ft {ft:.3}"));
    }
    Outcome::new(ok, parts.join("; "))
}

fn criterion_masking(suites: &[(&str, &Suite)]) -> Outcome {
    let mut checked = 0;
    let mut violations = 0;
    let mut class_il_models = 0;
    for (_, s) in suites {
        for run in s.runs.values() {
            let Some(til) = &run.out.task_il else { continue };
            class_il_models += 1;
            let t = til.tasks();
            for i in 0..t {
                for j in 0..t {
                    if let (Some(a), Some(b)) = (til.get(i, j), run.out.matrix.get(i, j)) {
                        checked += 1;
                        if a < b {
                            violations += 1;
                        }
                    }
                }
            }
        }
    }
    Outcome::new(
        violations == 0 && checked > 0,
        format!("{class_il_models} class-incremental runs, {checked} entries, {violations} violations"),
    )
}

fn criterion_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_pfcl");
    let dir = tempfile::tempdir().unwrap();
    let spec = benchmark("gauss10-5");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(bin)
            .arg("run")
            .arg(&spec)
            .arg("--out")
            .arg(&out)
            .env("PFCL_WORKERS", "2")
            .output()
            .unwrap();
        if !status.status.success() {
            return Outcome::new(
                false,
                format!("run failed: {}", String::from_utf8_lossy(&status.stderr)),
            );
        }
        outputs.push(out);
    }
    let mut files = 0;
    let mut differing = Vec::new();
    for sub in ["matrices", "matrices_task_il"] {
        let mut names: Vec<_> = std::fs::read_dir(outputs[0].join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        for name in names {
            files += 1;
            let a = std::fs::read(outputs[0].join(sub).join(&name)).unwrap();
            let b = std::fs::read(outputs[1].join(sub).join(&name));
            if b.ok().as_ref() != Some(&a) {
                differing.push(name.to_string_lossy().into_owned());
            }
        }
    }
    Outcome::new(
        differing.is_empty() && files > 0,
        format!("{files} matrix files compared across two `pfcl run` executions, {} differ", differing.len()),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n, name, o: Outcome| {
        println!(
            "criterion {n:>2} [{name}]: {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };

    report(1, "gradient oracle", criterion_gradients());
    report(2, "KD stationarity", criterion_stationarity());
    report(3, "selection oracle", criterion_selection());
    report(4, "metric oracle", criterion_metrics());

    let mut gauss = Suite::load("gauss10-5");
    for m in [Method::Ft, Method::KdOnly, Method::Pfcl, Method::Jt] {
        gauss.method(m);
    }
    let no_rss = TrainConfig {
        rss: false,
        ..gauss.spec.train.with_method(Method::Pfcl)
    };
    gauss.train("pfcl_no_rss", no_rss);

    let mut rot = Suite::load("rot-digits-20");
    for m in [Method::Ft, Method::Pfcl, Method::Jt] {
        rot.method(m);
    }
    let mut digits = Suite::load("digits-5");
    for m in [Method::Ft, Method::Pfcl] {
        digits.method(m);
    }

    report(5, "catastrophic forgetting", criterion_forgetting(&gauss));
    report(6, "regularization trend", criterion_regularization(&gauss));
    report(7, "RSS non-degradation", criterion_rss(&gauss));
    report(
        8,
        "method ordering",
        criterion_ordering(&[("gauss10-5", &gauss), ("rot-digits-20", &rot)]),
    );
    report(
        9,
        "task-IL masking dominance",
        criterion_masking(&[("gauss10-5", &gauss), ("rot-digits-20", &rot), ("digits-5", &digits)]),
    );
    report(10, "determinism", criterion_determinism());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
