//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits nonzero on any failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use dse_core::clustering::{
    cluster_answers, required_checks, ClusterOptions, ClusterPolicy, EntailmentVerdict, JudgeCall, JudgeOutcome, Label,
};
use dse_core::corpus::{write_canonical, ImageQuestion, VQA_MED_2019};
use dse_core::entropy::{cluster_distribution, discrete_semantic_entropy, entropy_of_sizes, max_entropy};
use dse_core::evaluation::{
    bonferroni_significant, bootstrap_delta, bootstrap_deltas, coverage_curve, percent_display, selective_accuracy,
    subgroup_report, BootstrapConfig, QuestionResult,
};
use dse_core::gateway::{
    account_usage, AnswerSample, BackendJudge, CallUsage, GatewayError, JudgeRule, JudgeOptions, MockBackend, MockScript, PromptTemplates,
    RetryPolicy, SampleRole,
};
use dse_core::pipeline::{Pipeline, RunConfig};
use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------------------
// Arbitrary-precision entropy oracle

const DIGITS: u32 = 60;

fn scale() -> BigInt {
    BigInt::from(10).pow(DIGITS)
}

/// `atanh(p / q) * 10^DIGITS` by its power series.
fn atanh_fixed(p: i64, q: i64) -> BigInt {
    let s = scale();
    let (p, q) = (BigInt::from(p), BigInt::from(q));
    let mut num = s * &p;
    let mut den = q.clone();
    let p2 = &p * &p;
    let q2 = &q * &q;
    let mut sum = BigInt::from(0);
    let mut k = 1i64;
    loop {
        let term = &num / (&den * k);
        if term == BigInt::from(0) {
            return sum;
        }
        sum += term;
        num *= &p2;
        den *= &q2;
        k += 2;
    }
}

/// `ln(m) * 10^DIGITS` via `ln m = 2 atanh((m - 1) / (m + 1))`.
fn ln_fixed(m: i64) -> BigInt {
    atanh_fixed(m - 1, m + 1) * 2
}

/// `-Σ (c/n) log10(c/n)` evaluated in fixed point, returned as f64.
/// `logs[m]` holds `ln_fixed(m)`.
fn oracle_entropy(logs: &[BigInt], counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let ln_n = &logs[n];
    let mut acc = BigInt::from(0);
    for &c in counts {
        acc += (ln_n - &logs[c]) * BigInt::from(c);
    }
    let ln10 = logs[10].clone();
    // acc / (n * ln10), kept to 30 fractional digits
    let q = acc * BigInt::from(10).pow(30) / (ln10 * BigInt::from(n));
    q.to_string().parse::<f64>().unwrap() / 1e30
}

fn compositions(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for first in 1..=k {
        for mut rest in compositions(k - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn random_partition_sizes(rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
    let blocks = rng.gen_range(1..=k);
    let mut sizes = vec![0usize; blocks];
    for _ in 0..k {
        sizes[rng.gen_range(0..blocks)] += 1;
    }
    sizes.retain(|&s| s > 0);
    sizes
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut checked = 0;
    let mut worst = 0.0f64;
    let logs: Vec<BigInt> = (0..=15).map(|m| if m == 0 { BigInt::from(0) } else { ln_fixed(m) }).collect();
    let mut cases: Vec<Vec<usize>> = (1..=8).flat_map(compositions).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        cases.push(random_partition_sizes(&mut rng, 15));
    }
    for sizes in &cases {
        let got = discrete_semantic_entropy(&cluster_distribution(sizes).unwrap()).value;
        let want = oracle_entropy(&logs, sizes);
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-12, "{sizes:?}: {got} vs oracle {want}");
        checked += 1;
    }
    ensure!(entropy_of_sizes(&[15]).unwrap().value == 0.0, "[15] is not exactly 0");
    let singletons = entropy_of_sizes(&[1; 15]).unwrap().value;
    let log15 = oracle_entropy(&logs, &[1; 15]);
    ensure!((singletons - log15).abs() <= 1e-12, "singletons {singletons} vs {log15}");
    ensure!((log15 - 1.176_091_259_055_681).abs() < 1e-12, "oracle log10(15) = {log15}");
    ensure!(format!("{singletons:.2}") == "1.18", "singletons display {singletons:.2}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("{checked} partitions, max |error| {worst:.1e}, {elapsed:.2?}"))
}

// ---------------------------------------------------------------------------
// Clustering

fn canonical(mut clusters: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for c in clusters.iter_mut() {
        c.sort_unstable();
    }
    clusters.sort();
    clusters
}

fn samples(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("answer {i}")).collect()
}

fn run_judge<F>(k: usize, policy: ClusterPolicy, entails: F) -> Vec<Vec<usize>>
where
    F: Fn(usize, usize) -> bool + Sync,
{
    let judge = |c: &JudgeCall<'_>| -> Result<JudgeOutcome, GatewayError> {
        let label = if entails(c.premise_index, c.hypothesis_index) {
            Label::Entails
        } else {
            Label::DoesNotEntail
        };
        Ok(JudgeOutcome::plain(label))
    };
    let options = ClusterOptions {
        max_in_flight: 4,
        resume: None,
    };
    cluster_answers(&samples(k), &judge, "q", policy, &options)
        .unwrap()
        .clustering
        .clusters
}

/// Components of the mutual graph by transitive closure (Floyd–Warshall).
fn reachability_oracle(k: usize, entails: &dyn Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
    let mut reach = vec![vec![false; k]; k];
    for i in 0..k {
        reach[i][i] = true;
        for j in 0..k {
            if i != j && entails(i, j) && entails(j, i) {
                reach[i][j] = true;
            }
        }
    }
    for m in 0..k {
        for i in 0..k {
            for j in 0..k {
                if reach[i][m] && reach[m][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for i in 0..k {
        if seen.insert(i) {
            let class: Vec<usize> = (0..k).filter(|&j| reach[i][j]).collect();
            seen.extend(class.iter().copied());
            out.push(class);
        }
    }
    canonical(out)
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..500 {
        let k = rng.gen_range(1..=8);
        let labels: Vec<usize> = (0..k).map(|_| rng.gen_range(0..k)).collect();
        let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            classes.entry(l).or_default().push(i);
        }
        let want = canonical(classes.into_values().collect());
        for policy in [ClusterPolicy::ConnectedComponents, ClusterPolicy::GreedyRepresentative] {
            let got = canonical(run_judge(k, policy, |i, j| labels[i] == labels[j]));
            ensure!(got == want, "trial {trial} ({policy}): {got:?} vs classes {want:?}");
        }
    }
    for trial in 0..500 {
        let k = rng.gen_range(1..=8);
        let p = rng.gen_range(0.2..0.9);
        let verdicts: Vec<Vec<bool>> = (0..k).map(|_| (0..k).map(|_| rng.gen_bool(p)).collect()).collect();
        let entails = |i: usize, j: usize| verdicts[i][j];
        let components = canonical(run_judge(k, ClusterPolicy::ConnectedComponents, entails));
        let want = reachability_oracle(k, &entails);
        ensure!(components == want, "non-transitive trial {trial}: {components:?} vs {want:?}");
        let greedy = run_judge(k, ClusterPolicy::GreedyRepresentative, entails);
        for g in &greedy {
            ensure!(
                components.iter().any(|c| g.iter().all(|m| c.contains(m))),
                "greedy cluster {g:?} is not inside a component of {components:?}"
            );
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("1000 trials, {elapsed:.2?}"))
}

fn criterion_3() -> Check {
    let counter = AtomicUsize::new(0);
    let judge = |_: &JudgeCall<'_>| -> Result<JudgeOutcome, GatewayError> {
        counter.fetch_add(1, Ordering::SeqCst);
        Ok(JudgeOutcome::plain(Label::Entails))
    };
    let options = ClusterOptions {
        max_in_flight: 8,
        resume: None,
    };
    let out = cluster_answers(&samples(15), &judge, "q", ClusterPolicy::ConnectedComponents, &options)
        .map_err(|e| e.to_string())?;
    let calls = counter.load(Ordering::SeqCst);
    ensure!(calls == 210, "counting judge saw {calls} calls");
    ensure!(out.matrix.len() == 210 && out.matrix.is_complete(), "matrix has {} verdicts", out.matrix.len());

    let mock = MockBackend::new(MockScript::default());
    let judge_opts = JudgeOptions {
        model: "mock".into(),
        retry: RetryPolicy::immediate(0),
        unparseable_retries: 2,
        prompts: PromptTemplates::default(),
        image_url: None,
    };
    let judge = BackendJudge {
        backend: &mock,
        question_id: "q",
        options: &judge_opts,
    };
    cluster_answers(&samples(15), &judge, "q", ClusterPolicy::ConnectedComponents, &options).map_err(|e| e.to_string())?;
    ensure!(mock.judge_calls() == 210, "mock backend saw {} judge calls", mock.judge_calls());
    Ok("210 judge calls for k = 15 (closure and backend)".into())
}

// ---------------------------------------------------------------------------
// Evaluation fixtures

fn result(id: usize, dataset: &str, subgroup: &str, correct: bool, dse: f64) -> QuestionResult {
    QuestionResult {
        question_id: format!("q{id:04}"),
        dataset: dataset.into(),
        subgroup: subgroup.into(),
        baseline_correct: correct,
        dse,
        k: 15,
    }
}

/// Blocks of `(count, correct, dse)`; the first `correct` of each block are correct.
fn fixture(dataset: &str, subgroup: &str, blocks: &[(usize, usize, f64)]) -> Vec<QuestionResult> {
    let mut out = Vec::new();
    for &(count, correct, dse) in blocks {
        for i in 0..count {
            out.push(result(out.len(), dataset, subgroup, i < correct, dse));
        }
    }
    out
}

fn criterion_4() -> Check {
    let start = Instant::now();
    // 334 at DSE 0 (255 correct), 165 at 0.5 (59 correct), 207 at 1.0 (51 correct)
    let results = fixture("Combined", "all", &[(334, 255, 0.0), (165, 59, 0.5), (207, 51, 1.0)]);
    ensure!(results.len() == 706, "fixture size");
    let o = selective_accuracy(&results, 0.3).map_err(|e| e.to_string())?;
    ensure!(o.baseline_correct == 365, "baseline correct {}", o.baseline_correct);
    let line = o.summary_line();
    ensure!(line == "51.7 → 76.3 (Δ +24.6, n=334/706)", "got {line}");
    let o6 = selective_accuracy(&results, 0.6).map_err(|e| e.to_string())?;
    ensure!(
        o6.filtered_display() == "62.9" && o6.n_retained == 499,
        "0.6 row {}",
        o6.summary_line()
    );
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("{line}; DSE <= 0.6: {}", o6.summary_line()))
}

fn criterion_5() -> Check {
    // 114 at DSE <= 0.3 (96 correct), 11 in (0.3, 0.6] (6 correct)
    let results = fixture(VQA_MED_2019, "modality", &[(114, 96, 0.0), (11, 6, 0.45)]);
    let report = subgroup_report(&results, &[0.6, 0.3]).map_err(|e| e.to_string())?;
    ensure!(report.rows.len() == 1, "rows {}", report.rows.len());
    let row = &report.rows[0];
    let all = percent_display(row.baseline_correct, row.n);
    ensure!(row.n == 125 && all == "81.6", "all: {} {all}", row.n);
    let c6 = &row.cells[0];
    let acc6 = percent_display(c6.n_correct, c6.n_answered);
    ensure!(c6.n_answered == 125 && acc6 == "81.6", "0.6: {} {acc6}", c6.n_answered);
    let c3 = &row.cells[1];
    let acc3 = percent_display(c3.n_correct, c3.n_answered);
    ensure!(c3.n_answered == 114 && acc3 == "84.2", "0.3: {} {acc3}", c3.n_answered);
    Ok(format!("modality 125 {all} | <= 0.6: 125 {acc6} (no rejections) | <= 0.3: 114 {acc3}"))
}

/// Exact distribution of the resampled gain, conditioned on a nonempty
/// retained set, by enumerating all n^n index tuples.
fn enumerate_deltas(results: &[QuestionResult], t: f64) -> BTreeMap<i64, f64> {
    let n = results.len();
    let total = n.pow(n as u32);
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    let mut kept = 0;
    for code in 0..total {
        let mut c = code;
        let (mut correct, mut retained, mut retained_correct) = (0, 0, 0);
        for _ in 0..n {
            let r = &results[c % n];
            c /= n;
            correct += r.baseline_correct as usize;
            if r.dse <= t {
                retained += 1;
                retained_correct += r.baseline_correct as usize;
            }
        }
        if retained == 0 {
            continue;
        }
        kept += 1;
        let d = 100.0 * retained_correct as f64 / retained as f64 - 100.0 * correct as f64 / n as f64;
        *counts.entry((d * 1e6).round() as i64).or_default() += 1;
    }
    counts.into_iter().map(|(d, c)| (d, c as f64 / kept as f64)).collect()
}

fn criterion_6() -> Check {
    let start = Instant::now();
    let pair = vec![result(0, "d", "s", true, 0.0), result(1, "d", "s", false, 1.0)];
    let want = enumerate_deltas(&pair, 0.3);
    let iterations = 100_000;
    let deltas = bootstrap_deltas(&pair, 0.3, iterations, 2024).map_err(|e| e.to_string())?;
    let mut freq: BTreeMap<i64, f64> = BTreeMap::new();
    for d in &deltas {
        *freq.entry((d * 1e6).round() as i64).or_default() += 1.0 / iterations as f64;
    }
    ensure!(freq.keys().eq(want.keys()), "support {:?} vs {:?}", freq.keys(), want.keys());
    let mut worst = 0.0f64;
    for (d, p) in &want {
        worst = worst.max((freq[d] - p).abs());
    }
    ensure!(worst <= 0.01, "max frequency error {worst}");

    let config = BootstrapConfig {
        iterations,
        seed: 99,
        ..Default::default()
    };
    let mixed = fixture("d", "s", &[(6, 5, 0.0), (4, 1, 0.8)]);
    let a = bootstrap_delta(&mixed, 0.3, &config).map_err(|e| e.to_string())?;
    let b = bootstrap_delta(&mixed, 0.3, &config).map_err(|e| e.to_string())?;
    let bits = |r: &dse_core::evaluation::BootstrapResult| {
        [r.delta_point, r.ci_low, r.ci_high, r.p_value].map(f64::to_bits)
    };
    ensure!(a == b && bits(&a) == bits(&b), "seeded runs differ");
    ensure!(a.ci_low <= a.ci_high, "CI endpoints out of order");

    let all_correct = fixture("d", "s", &[(10, 10, 0.0), (5, 5, 0.9)]);
    let degenerate = bootstrap_delta(&all_correct, 0.3, &config).map_err(|e| e.to_string())?;
    ensure!(
        degenerate.ci_low == 0.0 && degenerate.ci_high == 0.0 && degenerate.p_value == 1.0,
        "degenerate CI [{}, {}] p {}",
        degenerate.ci_low,
        degenerate.ci_high,
        degenerate.p_value
    );

    let adjusted = 0.05 / 12.0;
    ensure!(format!("{adjusted:.4}") == "0.0042", "alpha/m = {adjusted}");
    ensure!(bonferroni_significant(0.003, 0.05, 12), ".003 should be significant");
    ensure!(!bonferroni_significant(0.100, 0.05, 12), ".100 should not be significant");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!(
        "n=2 max |freq error| {worst:.4} at 100000 iterations; degenerate CI [0, 0], p = 1; .05/12 = {adjusted:.4}; {elapsed:.2?}"
    ))
}

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let log15 = max_entropy(15).unwrap();
    for set in 0..1000 {
        let n = rng.gen_range(1..=60);
        let results: Vec<QuestionResult> = (0..n)
            .map(|i| {
                let dse = entropy_of_sizes(&random_partition_sizes(&mut rng, 15)).unwrap().value;
                result(i, "d", "s", rng.gen_bool(0.5), dse)
            })
            .collect();
        let mut ts: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.3)).collect();
        ts.extend([0.3, 0.6]);
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let retained = |t: f64| -> BTreeSet<&str> {
            results.iter().filter(|r| r.retained_at(t)).map(|r| r.question_id.as_str()).collect()
        };
        for w in ts.windows(2) {
            let (t, t_low) = (w[0], w[1]);
            ensure!(retained(t_low).is_subset(&retained(t)), "set {set}: retained({t_low}) not within retained({t})");
        }
        let curve = coverage_curve(&results, &ts).map_err(|e| e.to_string())?;
        for p in curve.windows(2) {
            ensure!(p[1].n_retained <= p[0].n_retained, "set {set}: coverage not monotone");
        }
        for t in [1.2, log15] {
            let o = selective_accuracy(&results, t).map_err(|e| e.to_string())?;
            ensure!(o.n_retained == n && o.delta == 0.0, "set {set}: t={t} retained {}/{n}, Δ {}", o.n_retained, o.delta);
            ensure!(o.fraction_rejected() == 0.0, "set {set}: coverage below 1 at {t}");
        }
    }
    Ok("1000 result sets monotone; t >= log10(15) keeps all with Δ 0".into())
}

// ---------------------------------------------------------------------------
// Cost model

/// Token assumptions: each answer call carries ~660 prompt tokens (image
/// plus question) and ~28 completion tokens; each judge call ~285 prompt
/// and ~5 completion tokens. 15 samples + 1 baseline, 210 judge calls.
fn criterion_8() -> Check {
    let sample = |ordinal, role| AnswerSample {
        question_id: "q".into(),
        role,
        ordinal,
        text: "CT".into(),
        temperature: 1.0,
        tokens_in: Some(660),
        tokens_out: Some(28),
        tokens_estimated: false,
        latency_ms: 3000,
        backend_fingerprint: "fixture".into(),
    };
    let mut answers: Vec<AnswerSample> = (0..15).map(|i| sample(i, SampleRole::Sample)).collect();
    answers.push(sample(0, SampleRole::Baseline));
    let verdicts: Vec<EntailmentVerdict> = required_checks(15)
        .into_iter()
        .map(|(i, j)| EntailmentVerdict {
            premise_index: i,
            hypothesis_index: j,
            label: Label::Entails,
            raw_judge_output: "ENTAILMENT".into(),
            fallback: false,
            usage: Some(CallUsage {
                tokens_in: Some(285),
                tokens_out: Some(5),
                estimated: false,
                latency_ms: 3000,
            }),
        })
        .collect();
    let c = account_usage(&answers, &verdicts, 10.0);
    ensure!((c.sampling_cost - 0.11).abs() <= 0.01, "sampling ${}", c.sampling_cost);
    ensure!((c.entailment_cost - 0.61).abs() <= 0.01, "entailment ${}", c.entailment_cost);
    ensure!((c.total_cost - 0.72).abs() <= 0.01, "total ${}", c.total_cost);
    ensure!((c.pipeline_latency_ms - 6000.0).abs() < 1e-9, "latency {} ms", c.pipeline_latency_ms);
    ensure!(c.complete && c.entailment_calls == 210 && c.sampling_calls == 16, "call counts");
    Ok(format!(
        "${:.3} sampling + ${:.3} entailment = ${:.3}; latency estimate {:.1} s",
        c.sampling_cost,
        c.entailment_cost,
        c.total_cost,
        c.pipeline_latency_ms / 1000.0
    ))
}

// ---------------------------------------------------------------------------
// End to end

fn demo_corpus() -> (Vec<ImageQuestion>, MockScript) {
    let rows: [(&str, &str, &str, &[&str], &str); 10] = [
        ("modality", "ct", "ct", &["ct", "computed tomography"], "ct"),
        ("modality", "mri", "mri", &["mri"], "mri"),
        ("modality", "ultrasound", "us", &["ultrasound", "ct", "ultrasound", "mri", "x-ray"], "ultrasound"),
        ("plane", "axial", "ax", &["axial"], "axial"),
        ("plane", "coronal", "co", &["coronal", "sagittal"], "sagittal"),
        ("organ", "lung", "lu", &["lung", "lung", "heart"], "lung"),
        ("organ", "kidney", "ki", &["kidney", "liver", "spleen", "pancreas", "kidney"], "liver"),
        ("abnormality", "meningioma", "me", &["meningioma", "glioma", "schwannoma"], "glioma"),
        ("abnormality", "osteosarcoma", "os", &["osteosarcoma"], "osteosarcoma"),
        ("abnormality", "cyst", "cy", &["cyst", "abscess"], "cyst"),
    ];
    let mut items = Vec::new();
    let mut script = MockScript {
        judge: JudgeRule::Classes {
            classes: vec![vec!["ct".into(), "computed tomography".into()]],
        },
        latency_ms: 2500,
        ..Default::default()
    };
    for (i, (subgroup, reference, tag, samples, baseline)) in rows.iter().enumerate() {
        let id = format!("synpic{i:02}-{tag}");
        items.push(ImageQuestion {
            id: id.clone(),
            image: "base64:iVBORw0KGgo=".into(),
            question: format!("what does image {i} show?"),
            reference: reference.to_string(),
            dataset: VQA_MED_2019.into(),
            subgroup: subgroup.to_string(),
        });
        script = script.with_samples(&id, samples).with_baseline(&id, baseline);
    }
    (items, script)
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().display().to_string(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn full_run(config: &RunConfig) -> Result<(usize, BTreeMap<String, Vec<u8>>), String> {
    let p = Pipeline::new(config.clone()).map_err(|e| e.to_string())?;
    p.sample().map_err(|e| e.to_string())?;
    p.cluster().map_err(|e| e.to_string())?;
    p.grade().map_err(|e| e.to_string())?;
    p.report().map_err(|e| e.to_string())?;
    Ok((p.backend_calls(), snapshot(&config.out_dir)))
}

fn criterion_9() -> Check {
    let start = Instant::now();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::env::set_current_dir(root.path()).map_err(|e| e.to_string())?;
    let (items, script) = demo_corpus();
    write_canonical("corpus.jsonl", &items).map_err(|e| e.to_string())?;
    fs::write("mock.json", serde_json::to_string_pretty(&script).unwrap()).map_err(|e| e.to_string())?;

    let mut config = RunConfig {
        corpus: "corpus.jsonl".into(),
        mock_script: Some("mock.json".into()),
        out_dir: "out".into(),
        seed: 11,
        ..Default::default()
    };
    // a closed port: any attempt at network access would fail the run
    config.backend.endpoint_url = "http://127.0.0.1:9/v1/chat/completions".into();
    config.backend.retry_limit = 0;

    let (calls_1, first) = full_run(&config)?;
    // 15 samples + 1 baseline and 210 judge calls per question; exact grading is local
    ensure!(calls_1 == 10 * (16 + 210), "first run made {calls_1} calls");
    fs::remove_dir_all("out").map_err(|e| e.to_string())?;
    let (_, second) = full_run(&config)?;
    ensure!(first == second, "two runs differ in {:?}", differing(&first, &second));
    ensure!(first.contains_key("reports/summary.json") && first.len() == 37, "{} files", first.len());

    config.cache_dir = Some("cache".into());
    fs::remove_dir_all("out").map_err(|e| e.to_string())?;
    let (cold_calls, cold) = full_run(&config)?;
    fs::remove_dir_all("out").map_err(|e| e.to_string())?;
    let (warm_calls, warm) = full_run(&config)?;
    ensure!(cold_calls > 0 && warm_calls == 0, "cold {cold_calls} / warm {warm_calls} calls");
    ensure!(cold == warm, "warm-cache run differs in {:?}", differing(&cold, &warm));

    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "{} output files byte-identical across runs; warm cache made 0 calls; {elapsed:.2?}",
        first.len()
    ))
}

fn differing(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    a.keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("1 entropy matches arbitrary-precision oracle", criterion_1),
        ("2 clustering matches equivalence classes and reachability", criterion_2),
        ("3 k = 15 issues exactly 210 judge calls", criterion_3),
        ("4 combined accuracy fixture reproduces", criterion_4),
        ("5 modality subgroup fixture reproduces", criterion_5),
        ("6 bootstrap statistics sanity", criterion_6),
        ("7 coverage is monotone in the threshold", criterion_7),
        ("8 cost and latency model", criterion_8),
        ("9 offline end-to-end runs are byte-identical", criterion_9),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
