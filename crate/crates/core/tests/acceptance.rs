//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mcqa::analyzer::{recompute_probabilities, PredictionRecord, DEFAULT_DISPLAY_BIAS};
use mcqa::composer::{fill_placeholder, ComposeConfig, InputMode};
use mcqa::dataset::{McqaExample, DEFAULT_PLACEHOLDER};
use mcqa::encoder::EncoderConfig;
use mcqa::evaluator::{
    cross_evaluate, evaluate, generalization_table, run_ablation, write_metrics_csv, AblationSetup,
    GeneralizationDirection, GeneralizationReport, MetricsRow, Task, I_TO_N, N_TO_I,
};
use mcqa::head::{argmax, nll_loss, option_distribution, score_option, HeadParams, OptionScores};
use mcqa::model::Model;
use mcqa::synthetic;
use mcqa::trainer::{load_checkpoint, train, TrainConfig, CHECKPOINT_FILE};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn infilling() -> Outcome {
    let q =
        "Heavy @placeholder vehicles have been involved in nine of this year 's 14 cyclist crash fatalities in London.";
    let s = fill_placeholder(q, "goods", DEFAULT_PLACEHOLDER).map_err(|e| e.to_string())?;
    ensure(
        s.text
            == "Heavy goods vehicles have been involved in nine of this year 's 14 cyclist crash fatalities in London.",
        || format!("filled text {:?}", s.text),
    )?;
    ensure(s.option_span == (6..11) && s.option_text() == "goods", || {
        format!("span {:?}", s.option_span)
    })?;

    let alphabet: Vec<char> = "abcxyz ,.'é漢-".chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let text = |rng: &mut ChaCha8Rng, max: usize| -> String {
        let n = rng.gen_range(0..=max);
        (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
    };
    for i in 0..1000 {
        let (before, after, option) = (text(&mut rng, 30), text(&mut rng, 30), text(&mut rng, 12));
        let question = format!("{before}{DEFAULT_PLACEHOLDER}{after}");
        let s = fill_placeholder(&question, &option, DEFAULT_PLACEHOLDER).map_err(|e| format!("pair {i}: {e}"))?;
        let len = |t: &str| t.chars().count();
        ensure(
            len(&s.text) == len(&question) - len(DEFAULT_PLACEHOLDER) + len(&option),
            || format!("pair {i}: length identity fails for {question:?} / {option:?}"),
        )?;
        ensure(s.option_text() == option && s.option_span.start == len(&before), || {
            format!("pair {i}: span {:?}", s.option_span)
        })?;
    }
    Ok("worked example fill exact; 1000 random pairs satisfy the length identity".into())
}

fn random_head(rng: &mut ChaCha8Rng, l: usize) -> HeadParams {
    let mut p = HeadParams::new(l, rng.gen());
    p.b = Array1::from_shape_simple_fn(l, || rng.gen_range(-0.5..0.5));
    p
}

fn head_oracles() -> Outcome {
    let l = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let head = random_head(&mut rng, l);
        let mut logits = [0.0; 5];
        for slot in &mut logits {
            let hp: Vec<f64> = (0..l).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let hs: Vec<f64> = (0..l).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut oracle = 0.0;
            for r in 0..l {
                let mut z = head.b[r];
                for c in 0..l {
                    z += head.w[[r, c]] * hp[c] + head.w[[r, l + c]] * hs[c];
                }
                oracle += head.v[r] * z.tanh();
            }
            let got =
                score_option(Array1::from(hp).view(), Array1::from(hs).view(), &head).map_err(|e| e.to_string())?;
            ensure(close(got, oracle, 1e-9), || {
                format!("instance {i}: score {got} vs {oracle}")
            })?;
            worst = worst.max((got - oracle).abs());
            *slot = got * rng.gen_range(1.0..20.0);
        }
        let exps: Vec<f64> = logits.iter().map(|s| s.exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs = option_distribution(&logits).map_err(|e| e.to_string())?;
        for k in 0..5 {
            ensure(close(probs[k], exps[k] / total, 1e-9), || {
                format!("instance {i}: P({k})")
            })?;
            worst = worst.max((probs[k] - exps[k] / total).abs());
        }
        let gold = rng.gen_range(0..5);
        let scores = OptionScores::from_logits(logits, Some(gold)).map_err(|e| e.to_string())?;
        let loss = nll_loss(&scores, gold).map_err(|e| e.to_string())?;
        let oracle = -(exps[gold] / total).ln();
        ensure(close(loss, oracle, 1e-9), || {
            format!("instance {i}: loss {loss} vs {oracle}")
        })?;
        worst = worst.max((loss - oracle).abs());
    }
    Ok(format!("100 instances at l=8, worst deviation {worst:.1e}"))
}

fn gradient_check() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        for (what, err) in [
            ("head", common::head_gradient_error(i, 8)),
            ("encoder", common::encoder_gradient_error(i)),
            ("model", common::model_gradient_error(i)),
        ] {
            ensure(err <= common::FD_TOLERANCE, || {
                format!("{what} instance {i}: relative error {err:.2e}")
            })?;
            worst = worst.max(err);
        }
    }
    Ok(format!(
        "20 instances each of head, encoder and full loss; worst relative error {worst:.1e}"
    ))
}

fn softmax_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst_shift: f64 = 0.0;
    for i in 0..1000 {
        let logits: [f64; 5] = std::array::from_fn(|_| rng.gen_range(-50.0..50.0));
        let p = option_distribution(&logits).map_err(|e| e.to_string())?;
        let sum: f64 = p.iter().sum();
        ensure((sum - 1.0).abs() <= 1e-9, || format!("instance {i}: sum {sum}"))?;
        for shift in [DEFAULT_DISPLAY_BIAS, rng.gen_range(-100.0..100.0)] {
            let q = option_distribution(&logits.map(|s| s + shift)).map_err(|e| e.to_string())?;
            for (a, b) in p.iter().zip(&q) {
                worst_shift = worst_shift.max((a - b).abs());
            }
        }
        ensure(worst_shift <= 1e-12, || {
            format!("instance {i}: shift changed P by {worst_shift:e}")
        })?;
        let example = McqaExample {
            id: format!("s{i}"),
            passage: "p".into(),
            question: DEFAULT_PLACEHOLDER.into(),
            options: std::array::from_fn(|k| format!("o{k}")),
            gold: Some(0),
        };
        let scores = OptionScores::from_logits(logits, Some(0)).map_err(|e| e.to_string())?;
        let record = PredictionRecord::from_scores(&example, &scores, DEFAULT_DISPLAY_BIAS);
        ensure(argmax(&record.display) == record.predicted, || {
            format!("instance {i}: argmax moved")
        })?;
        let again = recompute_probabilities(&record).map_err(|e| e.to_string())?;
        ensure(again.as_slice() == record.probabilities.as_slice(), || {
            format!("instance {i}: probabilities")
        })?;
    }
    Ok(format!("1000 instances; worst shift deviation {worst_shift:.1e}"))
}

fn overfit() -> Outcome {
    let mut epochs = Vec::new();
    for seed in 0..3u64 {
        let data = synthetic::separable(32, 7 + seed);
        let encoder = EncoderConfig {
            seed,
            ..Default::default()
        };
        let model = Model::new(encoder, synthetic::tokenizer_for(&data), ComposeConfig::default())
            .map_err(|e| e.to_string())?;
        let config = TrainConfig {
            epochs: 200,
            learning_rate: 3e-5,
            batch_size: 1,
            seed,
            input_mode: InputMode::PassageSummary,
            ..Default::default()
        };
        let outcome = train(&config, &data, &data, model).map_err(|e| e.to_string())?;
        let first = outcome
            .history
            .epochs
            .iter()
            .find(|r| r.dev_accuracy == 1.0)
            .map(|r| r.epoch);
        let best = outcome.history.best_record().map(|r| r.dev_accuracy).unwrap_or(0.0);
        let acc = evaluate(&outcome.model, &data, InputMode::PassageSummary)
            .map_err(|e| e.to_string())?
            .accuracy;
        ensure(first.is_some() && acc == 1.0, || {
            format!("seed {seed}: best train accuracy {best:.4} within 200 epochs")
        })?;
        epochs.push(first.unwrap());
    }
    Ok(format!("3 seeds reach train accuracy 1.0 at epochs {epochs:?}"))
}

fn chance_level() -> Outcome {
    let (seeds, per_seed) = (30u64, 50usize);
    let mut hits = 0u64;
    for seed in 0..seeds {
        let data = synthetic::uninformative(per_seed, 500 + seed);
        let encoder = EncoderConfig {
            seed,
            ..Default::default()
        };
        let model = Model::new(encoder, synthetic::tokenizer_for(&data), ComposeConfig::default())
            .map_err(|e| e.to_string())?;
        hits += evaluate(&model, &data, InputMode::PassageSummary)
            .map_err(|e| e.to_string())?
            .hits() as u64;
    }
    let n = seeds * per_seed as u64;
    let binom = Binomial::new(0.2, n).map_err(|e| e.to_string())?;
    let lo = (0..=n).find(|&k| binom.cdf(k) > 0.005).unwrap();
    let hi = (0..=n).find(|&k| binom.cdf(k) >= 0.995).unwrap();
    ensure((lo..=hi).contains(&hits), || {
        format!("{hits}/{n} correct, outside [{lo}, {hi}]")
    })?;
    Ok(format!("{hits}/{n} correct, 99% interval [{lo}, {hi}]"))
}

fn table2_arithmetic() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("generalization.csv");
    let report = GeneralizationReport {
        mode: InputMode::PassageSummaryQuestion,
        directions: vec![
            GeneralizationDirection::new(I_TO_N, 0.6476, 0.5065),
            GeneralizationDirection::new(N_TO_I, 0.6486, 0.5173),
        ],
    };
    report.write_csv(&path).map_err(|e| e.to_string())?;
    let back = GeneralizationReport::read_csv(&path, report.mode).map_err(|e| e.to_string())?;
    ensure(back == report, || "csv round trip changed values".into())?;
    let pct = |x: f64| format!("{:.2}", x * 100.0);
    for (d, (inp, cross, drop)) in back
        .directions
        .iter()
        .zip([("64.76", "50.65", "14.11"), ("64.86", "51.73", "13.13")])
    {
        ensure(d.drop == d.in_domain - d.cross_domain, || {
            format!("{}: drop field is not in - cross", d.direction)
        })?;
        ensure(
            pct(d.in_domain) == inp && pct(d.cross_domain) == cross && pct(d.drop) == drop,
            || {
                format!(
                    "{}: {} - {} = {}",
                    d.direction,
                    pct(d.in_domain),
                    pct(d.drop),
                    pct(d.cross_domain)
                )
            },
        )?;
    }
    let table = generalization_table(&[back]);
    ensure(
        table.contains("50.65(14.11 ↓)") && table.contains("51.73(13.13 ↓)"),
        || table.clone(),
    )?;
    Ok("64.76 - 14.11 = 50.65 and 64.86 - 13.13 = 51.73 recomputed from generalization.csv".into())
}

fn small_setup() -> AblationSetup {
    AblationSetup {
        train: TrainConfig {
            epochs: 3,
            learning_rate: 1e-3,
            ..Default::default()
        },
        encoder: EncoderConfig {
            hidden_dim: 8,
            layers: 1,
            ffn_dim: 8,
            seed: 5,
            ..Default::default()
        },
        compose: ComposeConfig {
            max_len: 64,
            ..Default::default()
        },
        stopwords: Vec::new(),
    }
}

fn tasks() -> Vec<Task> {
    let i = synthetic::separable(24, 101);
    let n = synthetic::separable(24, 202);
    vec![
        Task {
            name: "imperceptibility".into(),
            train: i[..16].to_vec(),
            dev: i[16..].to_vec(),
        },
        Task {
            name: "nonspecificity".into(),
            train: n[..16].to_vec(),
            dev: n[16..].to_vec(),
        },
    ]
}

fn pipeline(dir: &Path) -> Result<(), String> {
    let setup = small_setup();
    let tasks = tasks();
    let mode = InputMode::PassageSummaryQuestion;
    let mut rows = Vec::new();
    let mut ckpts = Vec::new();
    for task in &tasks {
        let ckpt_dir = dir.join(&task.name);
        let config = TrainConfig {
            input_mode: mode,
            checkpoint_dir: Some(ckpt_dir.clone()),
            ..setup.train.clone()
        };
        let all: Vec<McqaExample> = tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.dev).cloned())
            .collect();
        let model = Model::new(
            setup.encoder.clone(),
            synthetic::tokenizer_for(&all),
            setup.compose.clone(),
        )
        .map_err(|e| e.to_string())?;
        let outcome = train(&config, &task.train, &task.dev, model).map_err(|e| e.to_string())?;
        let m = evaluate(&outcome.model, &task.dev, mode).map_err(|e| e.to_string())?;
        rows.push(MetricsRow {
            dataset: task.name.clone(),
            mode,
            n: m.n,
            accuracy: m.accuracy,
        });
        ckpts.push(load_checkpoint(ckpt_dir.join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?);
    }
    write_metrics_csv(dir.join("metrics.csv"), &rows).map_err(|e| e.to_string())?;
    let report = cross_evaluate(&ckpts[0], &ckpts[1], &tasks[0].dev, &tasks[1].dev, mode).map_err(|e| e.to_string())?;
    report
        .write_csv(dir.join("generalization.csv"))
        .map_err(|e| e.to_string())?;
    let ablation = run_ablation(&InputMode::ALL, &tasks, &setup).map_err(|e| e.to_string())?;
    ablation
        .write_csv(dir.join("ablation.csv"))
        .map_err(|e| e.to_string())?;
    Ok(())
}

fn determinism() -> Outcome {
    let (a, b) = (
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    );
    pipeline(a.path())?;
    pipeline(b.path())?;
    for file in ["metrics.csv", "ablation.csv", "generalization.csv"] {
        let read = |d: &Path| std::fs::read(d.join(file)).map_err(|e| format!("{file}: {e}"));
        let (x, y) = (read(a.path())?, read(b.path())?);
        ensure(!x.is_empty() && x == y, || format!("{file} differs between runs"))?;
    }
    Ok("metrics.csv, ablation.csv, generalization.csv byte-identical across two runs".into())
}

fn mode_coverage() -> Outcome {
    let tasks = tasks();
    let report = run_ablation(&InputMode::ALL, &tasks[..1], &small_setup()).map_err(|e| e.to_string())?;
    ensure(report.rows.len() == 4, || format!("{} rows", report.rows.len()))?;
    let modes: Vec<InputMode> = report.rows.iter().map(|r| r.mode).collect();
    ensure(modes == InputMode::ALL, || format!("modes {modes:?}"))?;
    let first = &report.rows[0];
    ensure(
        report
            .rows
            .iter()
            .all(|r| r.config_hash == first.config_hash && r.task == first.task),
        || "rows differ in more than the mode".into(),
    )?;
    Ok(format!("4 rows, shared config hash {}", &first.config_hash[..12]))
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("infilling correctness", Duration::from_secs(1), infilling),
        ("head oracle equivalence", Duration::from_secs(5), head_oracles),
        ("gradient check", Duration::from_secs(60), gradient_check),
        ("softmax invariants", Duration::from_secs(1), softmax_invariants),
        ("overfit sanity", Duration::from_secs(300), overfit),
        ("chance-level sanity", Duration::MAX, chance_level),
        ("generalization arithmetic", Duration::MAX, table2_arithmetic),
        ("determinism", Duration::MAX, determinism),
        ("mode coverage", Duration::MAX, mode_coverage),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|msg| {
            if elapsed > budget {
                Err(format!("{msg}; took {elapsed:.2?}, budget {budget:.0?}"))
            } else {
                Ok(msg)
            }
        });
        let (status, detail) = match &result {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failed += 1;
                ("FAIL", m)
            }
        };
        println!("criterion {} {status} {name}: {detail} ({elapsed:.2?})", i + 1);
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
