//! Acceptance suite: one test per criterion, each printing a pass line.
//! Tolerances and thresholds are pinned in the assertions themselves.

mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use fdkt_core::augment::{parse_augmented_samples, AugmentPlan};
use fdkt_core::corpus::{Dataset, Label, Provenance, Record, TaskSpec};
use fdkt_core::demo;
use fdkt_core::dp::{
    calibrate_sigma, clip_gradient, dp_train, l2_norm, noisy_aggregate, rdp_epsilon, DpConfig,
    DpTrainOptions,
};
use fdkt_core::evalkit::{confusion_matrix, exact_accuracy, extract_label, rough_accuracy};
use fdkt_core::federation::{
    run_one_to_many, run_one_to_one, ClientSetup, CrossEval, FederationMessage, FilterSettings,
    GeneratorConfig, MessagePayload, ModelArch, OneToManyReport, RunConfig, RunMode, SlmConfig,
};
use fdkt_core::filter::{
    choose_cluster_count, filter_dataset, parse_filter_response, EmbeddingProvider, FilterOptions,
    ParseStatus,
};
use fdkt_core::gateway::{Gateway, GatewayConfig, MockScript};
use fdkt_core::lm::{decode, DecodeParams, TinyLM, Vocab};
use fdkt_core::synthgen::{generate_synthetic, SynthPlan};
use rand::{Rng, SeedableRng};

fn pass(number: u32, what: &str) {
    println!("ACCEPTANCE {number:02} ({what}): PASS");
}

fn mock_gateway(script: MockScript) -> Gateway {
    Gateway::mock(GatewayConfig::default(), script).unwrap()
}

// ---------------------------------------------------------------------------
// 1. DP accountant golden values
// ---------------------------------------------------------------------------

#[test]
fn a01_dp_accountant_tracks_brute_force_oracle() {
    let started = std::time::Instant::now();
    let grid: [(f64, f64, u64, f64); 12] = [
        (64.0 / 5000.0, 1.0, 7800, 1e-5),
        (64.0 / 4000.0, 1.1, 6250, 1e-5),
        (0.01, 0.8, 1000, 1e-5),
        (0.01, 2.0, 10000, 1e-6),
        (0.02, 1.5, 5000, 1e-5),
        (0.05, 1.2, 2000, 1e-5),
        (0.001, 0.7, 20000, 1e-5),
        (0.1, 3.0, 3000, 1e-6),
        (0.1, 2.0, 1500, 1e-5),
        (0.05, 0.9, 4000, 1e-5),
        (1.0, 1.0, 1, 1e-5),
        (0.15, 2.2, 900, 1e-5),
    ];
    for &(q, sigma, steps, delta) in &grid {
        let config = DpConfig {
            clip_norm: 1.0,
            noise_multiplier: sigma,
            sample_rate: q,
            steps,
            target_delta: delta,
            seed: 0,
        };
        let eps = rdp_epsilon(&config).unwrap();
        let oracle = common::oracle_epsilon(q, sigma, steps, delta);
        let rel = (eps - oracle).abs() / oracle;
        assert!(
            rel < 0.01,
            "q={q} sigma={sigma} T={steps}: accountant {eps} vs oracle {oracle} (rel {rel})"
        );
    }
    let zero = rdp_epsilon(&DpConfig {
        clip_norm: 1.0,
        noise_multiplier: 1.0,
        sample_rate: 0.01,
        steps: 0,
        target_delta: 1e-5,
        seed: 0,
    })
    .unwrap();
    assert_eq!(zero, 0.0, "T = 0 must spend exactly zero epsilon");
    assert!(
        started.elapsed().as_secs() < 5,
        "accountant check must finish in under 5 s"
    );
    pass(1, "DP accountant within 1% of brute-force oracle on 12-point grid");
}

// ---------------------------------------------------------------------------
// 2. Gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn a02_per_example_gradients_match_finite_differences() {
    let started = std::time::Instant::now();
    let mut rng = rand::rngs::StdRng::seed_from_u64(97);
    let words = [
        "north", "south", "east", "west", "river", "stone", "cloud", "ember", "grove", "ridge",
    ];
    for model_idx in 0..20 {
        let vocab_size = rng.random_range(4..=8);
        let corpus: Vec<String> = (0..vocab_size).map(|i| words[i].to_string()).collect();
        let joined = corpus.join(" ");
        let vocab = Arc::new(Vocab::build([joined.as_str()], 1));
        let model = TinyLM::new(
            vocab,
            rng.random_range(2..=5),
            rng.random_range(3..=7),
            rng.random_range(4..=9),
            1000 + model_idx,
        );
        let text: Vec<&str> = (0..rng.random_range(3..=6))
            .map(|_| words[rng.random_range(0..vocab_size)])
            .collect();
        let seq = model.vocab().tokenize(&text.join(" "));
        let (_, grad) = model.loss_and_gradient(&seq).unwrap();
        let h = 1e-4;
        for _ in 0..10 {
            let i = rng.random_range(0..model.param_count());
            let numeric = common::finite_difference_gradient(&model, &seq, i, h);
            let denom = grad[i].abs().max(1.0);
            let rel = (numeric - grad[i]).abs() / denom;
            assert!(
                rel <= 1e-4,
                "model {model_idx} coordinate {i}: numeric {numeric} vs analytic {} (rel {rel})",
                grad[i]
            );
        }
    }
    assert!(
        started.elapsed().as_secs() < 10,
        "gradient check must finish in under 10 s"
    );
    pass(2, "per-example gradients match central differences at 1e-4 over 20 models");
}

// ---------------------------------------------------------------------------
// 3. DP mechanics
// ---------------------------------------------------------------------------

#[test]
fn a03_dp_mechanics_clip_noise_and_sealed_ledger() {
    // Clipped norms never exceed C over 1,000 random vectors.
    let mut rng = rand::rngs::StdRng::seed_from_u64(55);
    for _ in 0..1000 {
        let dim = rng.random_range(1..40);
        let clip: f64 = rng.random_range(0.05..5.0);
        let grad: Vec<f64> = (0..dim).map(|_| rng.random_range(-30.0..30.0)).collect();
        let clipped = clip_gradient(&grad, clip);
        assert!(l2_norm(&clipped) <= clip * (1.0 + 1e-12));
    }

    // Monte-Carlo injected variance within 5% of sigma^2 C^2 / L^2.
    let config = DpConfig {
        clip_norm: 1.5,
        noise_multiplier: 1.2,
        sample_rate: 0.5,
        steps: 1,
        target_delta: 1e-5,
        seed: 0,
    };
    let lot = 10.0;
    let dim = 4;
    let reps = 10_000;
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    let mut noise_rng = rand::rngs::StdRng::seed_from_u64(2024);
    for _ in 0..reps {
        let out = noisy_aggregate(&[], dim, &config, lot, &mut noise_rng);
        for (k, &x) in out.iter().enumerate() {
            sum[k] += x;
            sum_sq[k] += x * x;
        }
    }
    let expected = (config.noise_multiplier * config.clip_norm / lot).powi(2);
    for k in 0..dim {
        let mean = sum[k] / reps as f64;
        let var = sum_sq[k] / reps as f64 - mean * mean;
        assert!(
            (var - expected).abs() / expected < 0.05,
            "coordinate {k}: variance {var} vs expected {expected}"
        );
    }

    // Sealed-ledger immutability across 10,000 post-training operations.
    let domain = demo::sentiment_domain();
    let private = domain.make_dataset(3, 77);
    let strings: Vec<String> = private
        .iter()
        .map(|r| fdkt_core::corpus::format_training_string(r, domain.task()))
        .collect();
    let vocab = Arc::new(Vocab::build(strings.iter().map(String::as_str), 1));
    let init = TinyLM::new(vocab, 4, 6, 8, 3);
    let dp = DpConfig {
        clip_norm: 1.0,
        noise_multiplier: 1.0,
        sample_rate: 0.4,
        steps: 8,
        target_delta: 1e-5,
        seed: 5,
    };
    let (generator, ledger) =
        dp_train(&init, &private, domain.task(), &dp, &DpTrainOptions::default()).unwrap();
    let epsilon_at_seal = ledger.epsilon_spent();
    let bits_at_seal = epsilon_at_seal.to_bits();
    for i in 0..10_000u64 {
        match i % 4 {
            0 => {
                let _ = decode(
                    &generator,
                    "Rating: 3 stars, Review:\n ",
                    &DecodeParams {
                        seed: i,
                        max_tokens: 4,
                        ..DecodeParams::default()
                    },
                )
                .unwrap();
            }
            1 => {
                let _ = ledger.summary();
            }
            2 => {
                let _ = (ledger.delta(), ledger.steps_taken(), ledger.is_sealed());
            }
            _ => {
                let plan = SynthPlan {
                    per_label_count: 0,
                    ..SynthPlan::default()
                };
                let (ds, _) =
                    generate_synthetic(&generator, Some(&ledger), domain.task(), &plan).unwrap();
                assert_eq!(ds.ledger().unwrap().epsilon_spent().to_bits(), bits_at_seal);
            }
        }
        assert_eq!(ledger.epsilon_spent().to_bits(), bits_at_seal);
    }
    pass(3, "clip bound, noise variance within 5%, sealed ledger immutable over 10k ops");
}

// ---------------------------------------------------------------------------
// 4. Privacy boundary fuzz
// ---------------------------------------------------------------------------

#[test]
fn a04_privacy_boundary_over_200_random_pipelines() {
    let domain = demo::sentiment_domain();
    let mut rng = rand::rngs::StdRng::seed_from_u64(404);
    for run in 0..200u64 {
        let per_label = rng.random_range(2..=3);
        let private = domain.make_dataset(per_label, 10_000 + run);
        let task = domain.task();

        // DP-train a tiny generator and sample raw synthetic data.
        let strings: Vec<String> = private
            .iter()
            .map(|r| fdkt_core::corpus::format_training_string(r, task))
            .collect();
        let vocab = Arc::new(Vocab::build(strings.iter().map(String::as_str), 1));
        let init = TinyLM::new(vocab, 4, 6, 8, run);
        let dp = DpConfig {
            clip_norm: 1.0,
            noise_multiplier: rng.random_range(0.6..1.5),
            sample_rate: rng.random_range(0.3..0.6),
            steps: rng.random_range(3..7),
            target_delta: 1e-5,
            seed: run,
        };
        let (generator, ledger) =
            dp_train(&init, &private, task, &dp, &DpTrainOptions::default()).unwrap();
        let plan = SynthPlan {
            per_label_count: rng.random_range(2..=3),
            decode: DecodeParams {
                seed: run,
                max_tokens: 10,
                ..DecodeParams::default()
            },
            ..SynthPlan::default()
        };
        let (raw_synth, _) = generate_synthetic(&generator, Some(&ledger), task, &plan).unwrap();

        // The upload payload must be disjoint from the private multiset and
        // carry only synthetic/filtered provenance.
        let (message, _) =
            FederationMessage::synthetic_upload("fuzz-client", &raw_synth, &private).unwrap();
        let MessagePayload::Dataset { data } = &message.payload else {
            panic!("upload must carry a dataset");
        };
        let private_texts: BTreeSet<&str> = private.iter().map(|r| r.text.as_str()).collect();
        for record in &data.records {
            assert!(
                !private_texts.contains(record.text.as_str()),
                "run {run}: uploaded text equals a private text"
            );
            assert!(matches!(
                record.provenance,
                Provenance::Synthetic | Provenance::Filtered
            ));
        }

        // Run the server-facing stages against the mock and audit traffic.
        let gateway = mock_gateway(domain.competent_mock());
        let guarded = {
            let (clean, _) =
                fdkt_core::federation::exclude_private_overlap(&raw_synth, &private);
            clean
        };
        if guarded.is_empty() {
            continue;
        }
        let provider = if run % 2 == 0 {
            EmbeddingProvider::deterministic(8)
        } else {
            EmbeddingProvider::remote("mock-remote", 8)
        };
        let options = FilterOptions {
            prompt_char_budget: if run % 5 == 0 { 400 } else { 12_000 },
            ..FilterOptions::default()
        };
        let (filtered, _) = filter_dataset(&guarded, &provider, &gateway, run, &options).unwrap();
        if !filtered.is_empty() {
            let plan = AugmentPlan::fdkt(rng.random_range(4..10), run);
            let _ = fdkt_core::augment::augment(Some(&filtered), task, &gateway, &plan).unwrap();
        }
        for request in gateway.request_log() {
            for text in &private_texts {
                assert!(
                    !request.content.contains(text),
                    "run {run}: private text crossed the gateway in {}",
                    request.request_id
                );
            }
        }
    }
    pass(4, "no private text crossed the gateway in 200 fuzzed pipelines; uploads disjoint");
}

// ---------------------------------------------------------------------------
// 5. Filter contract
// ---------------------------------------------------------------------------

#[test]
fn a05_filter_keeps_half_per_cluster_under_any_judge() {
    assert_eq!(choose_cluster_count(20_000), 1_000);

    let task = Arc::new(TaskSpec::rating_task("reviews", vec![1, 2, 3, 4, 5]));
    let mut rng = rand::rngs::StdRng::seed_from_u64(505);
    for case in 0..50u64 {
        let n = rng.random_range(1..=120);
        let records: Vec<Record> = (0..n)
            .map(|i| {
                Record::new(
                    format!("sample {case} {i} {}", rng.random_range(0..1000)),
                    (i % 5) as Label + 1,
                    Provenance::Synthetic,
                )
            })
            .collect();
        let dataset = Dataset::from_records(records, Arc::clone(&task)).unwrap();

        // Adversarial judge: rotates through garbage, duplicates,
        // out-of-range indices, empty strings, and the occasional valid
        // response.
        let script = MockScript::builder().catch_all(|_, call| match call % 6 {
            0 => "".to_string(),
            1 => "The eligible samples: 0 0 0 0 0 0 0".to_string(),
            2 => "The eligible samples: 999999 1000000 888".to_string(),
            3 => "no marker, just chaos \u{1F300} 7 3 7 3".to_string(),
            4 => "The eligible samples:\n\n0 1 2 3 4 5 6 7 8 9 10 11 12".to_string(),
            _ => "I will not comply.".to_string(),
        });
        let gateway = mock_gateway(script);
        let provider = EmbeddingProvider::deterministic(6);
        let (filtered, report) = filter_dataset(
            &dataset,
            &provider,
            &gateway,
            case,
            &FilterOptions::default(),
        )
        .unwrap();

        let expected: usize = report.clusters.iter().map(|c| c.size.div_ceil(2)).sum();
        assert_eq!(
            report.selected_before_subsample, expected,
            "case {case}: half-per-cluster violated"
        );
        assert_eq!(filtered.len(), expected);

        // Multiset containment in the input.
        let mut input_counts = std::collections::BTreeMap::new();
        for r in dataset.iter() {
            *input_counts.entry(r.text.as_str()).or_insert(0usize) += 1;
        }
        let mut output_counts = std::collections::BTreeMap::new();
        for r in filtered.iter() {
            *output_counts.entry(r.text.as_str()).or_insert(0usize) += 1;
        }
        for (text, count) in output_counts {
            assert!(
                input_counts.get(text).copied().unwrap_or(0) >= count,
                "case {case}: filter invented a record"
            );
        }
    }
    pass(5, "|F| = sum of per-cluster halves for 50 datasets under adversarial judges");
}

// ---------------------------------------------------------------------------
// 6. Parser robustness
// ---------------------------------------------------------------------------

#[test]
fn a06_parsers_survive_fuzz_and_classify_repairs() {
    let task = Arc::new(TaskSpec::rating_task("reviews", vec![1, 2, 3, 4, 5]));
    let mut rng = rand::rngs::StdRng::seed_from_u64(606);
    let pool: Vec<char> = "abc 0123456789*<>:.-\n\t\u{0}\u{7f}日本語é()[]The eligible samples Rating Review ******"
        .chars()
        .collect();
    for case in 0..10_000 {
        let len = rng.random_range(0..120);
        let mut text: String = (0..len)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        if case % 7 == 0 {
            // Truncations of an otherwise valid response.
            let valid = "The eligible samples:\n\n0 1 2 3\n- <Rating>: 4 stars.\n- <Review>: ok.";
            let cut = rng.random_range(0..valid.len());
            while !valid.is_char_boundary(cut) && cut > 0 {
                break;
            }
            let mut cut = cut;
            while !valid.is_char_boundary(cut) {
                cut -= 1;
            }
            text = valid[..cut].to_string();
        }
        let n = rng.random_range(1..40);
        let verdict = parse_filter_response(&text, n);
        assert_eq!(verdict.selected.len(), n.div_ceil(2));
        assert!(verdict.selected.iter().all(|&i| i < n));
        let (records, _) = parse_augmented_samples(&text, &task);
        assert!(records.iter().all(|r| task.contains_label(r.label)));
    }

    // 30 hand-built repair classifications.
    let ok = ParseStatus::Ok;
    let rep = ParseStatus::Repaired;
    let fail = ParseStatus::Failed;
    let cases: [(&str, usize, ParseStatus, &[usize]); 30] = [
        ("The eligible samples:\n\n0 3 5", 6, ok, &[0, 3, 5]),
        ("THE ELIGIBLE SAMPLES: 1 0", 4, ok, &[0, 1]),
        ("prefix text The eligible samples: 1", 2, ok, &[1]),
        ("The eligible samples:\n\n0 1 2 3 4", 10, ok, &[0, 1, 2, 3, 4]),
        ("The eligible samples: 9 8 7 6 5", 10, ok, &[5, 6, 7, 8, 9]),
        ("The eligible samples:\n\n0", 1, ok, &[0]),
        ("The eligible samples: 3, 1", 4, ok, &[1, 3]),
        ("The eligible samples:\n\n00 01", 4, ok, &[0, 1]),
        ("The eligible samples: 2 0", 4, ok, &[0, 2]),
        ("The eligible samples:\n\n1 2 0", 5, ok, &[0, 1, 2]),
        ("The eligible samples: 0 0 9 1", 4, rep, &[0, 1]),
        ("The eligible samples: 0 1 2 3", 4, rep, &[0, 1]),
        ("The eligible samples: 0", 4, rep, &[0, 1]),
        ("no marker but 0 and 2 here", 4, rep, &[0, 2]),
        ("The eligible samples: 5 5 5", 6, rep, &[0, 1, 5]),
        ("The eligible samples: 100 0", 4, rep, &[0, 1]),
        ("pick 3 1 2 0", 4, rep, &[1, 3]),
        ("The eligible samples:\n\n2 1 0 oh wait also 3 4 5", 6, rep, &[0, 1, 2]),
        ("The Eligible Samples: 1 2 duplicate 2", 4, rep, &[1, 2]),
        ("0 1", 4, rep, &[0, 1]),
        ("The eligible samples: idx=0003", 6, rep, &[0, 1, 3]),
        ("The eligible samples: 1 too few", 5, rep, &[0, 1, 2]),
        ("I refuse.", 4, fail, &[0, 1]),
        ("", 4, fail, &[0, 1]),
        ("The eligible samples: none", 4, fail, &[0, 1]),
        ("total garbage ###", 5, fail, &[0, 1, 2]),
        ("The eligible samples:", 2, fail, &[0]),
        ("no numbers at all here", 1, fail, &[0]),
        ("☃☃☃", 6, fail, &[0, 1, 2]),
        ("The eligible samples: 99 88", 4, fail, &[0, 1]),
    ];
    for (i, (response, n, expected_status, expected_selected)) in cases.iter().enumerate() {
        let verdict = parse_filter_response(response, *n);
        assert_eq!(
            verdict.parse_status, *expected_status,
            "case {i}: {response:?} -> {:?}",
            verdict.parse_status
        );
        let selected: Vec<usize> = verdict.selected.iter().copied().collect();
        assert_eq!(&selected, expected_selected, "case {i}: {response:?}");
    }
    pass(6, "parsers total on 10k fuzz cases; 30 repair statuses classified");
}

// ---------------------------------------------------------------------------
// Shared desk-scale run configuration for criteria 7-9
// ---------------------------------------------------------------------------

fn desk_arch() -> ModelArch {
    ModelArch {
        context_len: 6,
        embed_dim: 12,
        hidden_dim: 24,
    }
}

fn desk_config(
    mode: RunMode,
    seed: u64,
    sigma: f64,
    augment_target: usize,
    local_epochs: usize,
    augmented_epochs: usize,
) -> RunConfig {
    let arch = desk_arch();
    RunConfig {
        mode,
        generator: Some(GeneratorConfig {
            arch,
            dp: DpConfig {
                clip_norm: 1.0,
                noise_multiplier: sigma,
                sample_rate: 0.16,
                steps: 150,
                target_delta: 1e-5,
                seed,
            },
            lr: 0.25,
            freeze_embeddings: false,
        }),
        synth: Some(SynthPlan {
            per_label_count: 40,
            ..SynthPlan::default()
        }),
        filter: Some(FilterSettings::default()),
        augment: Some(match mode {
            RunMode::GenKt => AugmentPlan::zero_shot(augment_target, seed),
            _ => AugmentPlan::fdkt(augment_target, seed),
        }),
        slm: SlmConfig {
            arch,
            lr: 0.3,
            batch_size: 16,
            local_epochs,
            augmented_epochs,
        },
        seed,
    }
}

// ---------------------------------------------------------------------------
// 7. Scaled-down FDKT behavioral reproduction
// ---------------------------------------------------------------------------

#[test]
fn a07_fdkt_beats_local_ft_and_zero_shot_on_constructed_task() {
    let started = std::time::Instant::now();
    let domain = demo::sentiment_domain();
    // The client-side workflow fixes (epsilon = 8, delta = 1e-5) and derives
    // the noise multiplier from it.
    let sigma = calibrate_sigma(8.0, 0.16, 150, 1e-5).unwrap();

    let mut means = std::collections::BTreeMap::new();
    for mode in [RunMode::LocalFt, RunMode::Fdkt, RunMode::GenKt] {
        let mut accs = Vec::new();
        for seed in 0..5u64 {
            let (train, test) = domain.make_split(40, 40, 1000 + seed);
            assert_eq!(train.len(), 200);
            assert!(test.len() >= 195, "split collisions should be rare");
            let gateway = mock_gateway(domain.competent_mock());
            let config = desk_config(mode, seed, sigma, 1200, 60, 15);
            let report = run_one_to_one(&train, &test, &config, &gateway).unwrap();
            accs.push(report.exact_acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("  mode {}: mean exact {:.4} ({:?})", mode.as_str(), mean, accs);
        means.insert(mode.as_str(), mean);
    }
    let local = means["local_ft"];
    let fdkt = means["fdkt"];
    let gen_kt = means["gen_kt"];
    assert!(
        fdkt >= local + 0.03,
        "fdkt {fdkt:.4} must beat local_ft {local:.4} by >= 3 points"
    );
    assert!(
        gen_kt < fdkt,
        "template-mismatched zero-shot {gen_kt:.4} must trail fdkt {fdkt:.4}"
    );
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 300,
        "criterion 7 exceeded 5 minutes: {elapsed:?}"
    );
    pass(7, "fdkt >= local_ft + 3 points over 5 seeds; gen_kt < fdkt");
}

// ---------------------------------------------------------------------------
// 8. Data-scarcity trend
// ---------------------------------------------------------------------------

#[test]
fn a08_fdkt_holds_up_under_data_scarcity() {
    let started = std::time::Instant::now();
    let domain = demo::sentiment_domain();
    for (per_label, d_total) in [(10usize, 50usize), (20, 100), (40, 200)] {
        // Epoch counts scale inversely with data size, keeping gradient
        // steps roughly constant across sizes for both modes.
        let local_epochs = 60 * 200 / d_total;
        let augmented_epochs = 15 * 200 / d_total;
        let augment_target = 6 * d_total;
        let mut local_accs = Vec::new();
        let mut fdkt_accs = Vec::new();
        for seed in 0..3u64 {
            let (train, test) = domain.make_split(per_label, 40, 2000 + seed * 7 + d_total as u64);
            let gw_local = mock_gateway(domain.competent_mock());
            let local = run_one_to_one(
                &train,
                &test,
                &desk_config(RunMode::LocalFt, seed, 1.0, augment_target, local_epochs, augmented_epochs),
                &gw_local,
            )
            .unwrap();
            let gw_fdkt = mock_gateway(domain.competent_mock());
            let fdkt = run_one_to_one(
                &train,
                &test,
                &desk_config(RunMode::Fdkt, seed, 1.0, augment_target, local_epochs, augmented_epochs),
                &gw_fdkt,
            )
            .unwrap();
            local_accs.push(local.exact_acc);
            fdkt_accs.push(fdkt.exact_acc);
        }
        let local_mean = local_accs.iter().sum::<f64>() / 3.0;
        let fdkt_mean = fdkt_accs.iter().sum::<f64>() / 3.0;
        println!(
            "  |D| = {d_total}, |D^a| = {augment_target}: local {local_mean:.4} vs fdkt {fdkt_mean:.4}"
        );
        assert!(
            fdkt_mean >= local_mean,
            "|D| = {d_total}: fdkt {fdkt_mean:.4} below local {local_mean:.4}"
        );
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 300,
        "criterion 8 exceeded 5 minutes: {elapsed:?}"
    );
    pass(8, "fdkt >= local_ft at |D| in {50, 100, 200} with |D^a| = 6|D|");
}

// ---------------------------------------------------------------------------
// 9. One-to-many direction
// ---------------------------------------------------------------------------

#[test]
fn a09_one_to_many_out_domain_gap() {
    let started = std::time::Instant::now();
    let shop = demo::sentiment_domain();
    let news = demo::topic_domain();
    let base = 100u64;
    let (shop_train, shop_test) = shop.make_split(40, 40, base);
    let (news_train, news_test) = news.make_split(40, 40, base + 50);
    let gateway = mock_gateway(demo::combined_mock(&[&shop, &news]));

    let multitask_config = |seed: u64, augment_target: usize| {
        let arch = ModelArch {
            context_len: 6,
            embed_dim: 14,
            hidden_dim: 32,
        };
        RunConfig {
            slm: SlmConfig {
                arch,
                lr: 0.2,
                batch_size: 16,
                local_epochs: 60,
                augmented_epochs: 25,
            },
            generator: Some(GeneratorConfig {
                arch,
                dp: DpConfig {
                    clip_norm: 1.0,
                    noise_multiplier: 1.0,
                    sample_rate: 0.16,
                    steps: 150,
                    target_delta: 1e-5,
                    seed,
                },
                lr: 0.25,
                freeze_embeddings: false,
            }),
            augment: Some(AugmentPlan::fdkt(augment_target, seed)),
            ..desk_config(RunMode::Fdkt, seed, 1.0, augment_target, 60, 25)
        }
    };
    let clients = vec![
        ClientSetup {
            client_id: "shop".into(),
            private: shop_train,
            test: shop_test,
            config: multitask_config(base + 1, 2000),
        },
        ClientSetup {
            client_id: "news".into(),
            private: news_train,
            test: news_test,
            config: multitask_config(base + 2, 1200),
        },
    ];
    let report = run_one_to_many(&clients, &gateway, false).unwrap();
    let acc = |matrix: &[CrossEval], owner: &str, target: &str| {
        OneToManyReport::cell(matrix, owner, target)
            .unwrap()
            .report
            .exact_acc
    };

    // The evaluation inserts the target task's prefix, not the owner's.
    for cell in &report.fdkt {
        let expected = &report.prefixes[&cell.target];
        assert_eq!(cell.prefix_used.as_ref(), Some(expected));
    }

    for (owner, target) in [("shop", "news"), ("news", "shop")] {
        let fdkt_out = acc(&report.fdkt, owner, target);
        let local_out = acc(&report.local, owner, target);
        println!("  out-domain {owner}->{target}: fdkt {fdkt_out:.4} vs local {local_out:.4}");
        assert!(
            local_out < 0.40,
            "local out-domain should sit near chance, got {local_out:.4}"
        );
        assert!(
            fdkt_out >= local_out + 0.20,
            "{owner}->{target}: fdkt {fdkt_out:.4} must beat local {local_out:.4} by >= 20 points"
        );
    }
    for client in ["shop", "news"] {
        let fdkt_in = acc(&report.fdkt, client, client);
        let local_in = acc(&report.local, client, client);
        println!("  in-domain {client}: fdkt {fdkt_in:.4} vs local {local_in:.4}");
        assert!(
            fdkt_in >= local_in,
            "{client}: in-domain fdkt {fdkt_in:.4} below local {local_in:.4}"
        );
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 300,
        "criterion 9 exceeded 5 minutes: {elapsed:?}"
    );
    pass(9, "out-domain fdkt >= local + 20 points; in-domain fdkt >= local");
}

// ---------------------------------------------------------------------------
// 10. Determinism
// ---------------------------------------------------------------------------

#[test]
fn a10_pipeline_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let domain = demo::sentiment_domain();
    let data_dir = dir.path().join("data");
    std::fs::create_dir_all(&data_dir).unwrap();
    domain.task().save_json(data_dir.join("task.json")).unwrap();
    let (train, test) = domain.make_split(6, 4, 31);
    fdkt_core::corpus::save_jsonl(&train, data_dir.join("train.jsonl")).unwrap();
    fdkt_core::corpus::save_jsonl(&test, data_dir.join("test.jsonl")).unwrap();
    let config_path = dir.path().join("exp.toml");
    std::fs::write(
        &config_path,
        r#"
task = "data/task.json"
train_data = "data/train.jsonl"
test_data = "data/test.jsonl"
mode = "fdkt"
seeds = [1, 2]

[dp]
sample_rate = 0.3
steps = 12

[synth]
per_label_count = 5

[filter]

[augment]
target_count = 40

[slm]
local_epochs = 4
augmented_epochs = 3
"#,
    )
    .unwrap();
    let config = fdkt_core::experiment::load_config(&config_path).unwrap();

    let mut hashes = Vec::new();
    for invocation in 0..2 {
        let out = dir.path().join(format!("out{invocation}"));
        fdkt_core::experiment::run_pipeline(&config, &out, false, None, None).unwrap();
        let mut digest_input = Vec::new();
        let mut paths = Vec::new();
        collect_files(&out, &mut paths);
        paths.sort();
        for path in paths {
            let rel = path.strip_prefix(&out).unwrap().display().to_string();
            digest_input.extend_from_slice(rel.as_bytes());
            digest_input.extend_from_slice(&std::fs::read(&path).unwrap());
        }
        hashes.push(fdkt_core::experiment::sha256_hex(&digest_input));
    }
    assert_eq!(hashes[0], hashes[1], "two invocations must be byte-identical");
    pass(10, "two mock pipeline invocations produce identical artifact hashes");
}

fn collect_files(dir: &std::path::Path, out: &mut Vec<std::path::PathBuf>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(&path, out);
        } else {
            out.push(path);
        }
    }
}

// ---------------------------------------------------------------------------
// 11. Metric contracts
// ---------------------------------------------------------------------------

#[test]
fn a11_metric_contracts() {
    let task = {
        let mut t = TaskSpec::rating_task("reviews", vec![1, 2, 3, 4, 5]);
        t.rough_map = Some(std::collections::BTreeMap::from([
            (1, 0),
            (2, 0),
            (3, 1),
            (4, 2),
            (5, 2),
        ]));
        t
    };
    let rough_map = task.rough_map.clone().unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(1111);
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let preds: Vec<Option<Label>> = (0..n)
            .map(|_| {
                if rng.random_bool(0.15) {
                    None
                } else {
                    Some(rng.random_range(1..=5))
                }
            })
            .collect();
        let truths: Vec<Label> = (0..n).map(|_| rng.random_range(1..=5)).collect();
        let exact = exact_accuracy(&preds, &truths).unwrap();
        let rough = rough_accuracy(&preds, &truths, &rough_map).unwrap();
        assert!((0.0..=1.0).contains(&exact));
        assert!(rough >= exact - 1e-12, "rough {rough} below exact {exact}");
        let matrix = confusion_matrix(&preds, &truths, &task).unwrap();
        assert_eq!(matrix.total(), n, "confusion mass must equal sample count");
    }

    // Extraction failures are incorrect predictions, tracked off-diagonal.
    assert_eq!(extract_label("wonderful!", &task), None);
    let preds = vec![Some(4), None, Some(5)];
    let truths = vec![4, 3, 5];
    let acc = exact_accuracy(&preds, &truths).unwrap();
    assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    let matrix = confusion_matrix(&preds, &truths, &task).unwrap();
    assert_eq!(matrix.failures.iter().sum::<usize>(), 1);
    assert_eq!(matrix.diagonal(), 2);
    pass(11, "rough >= exact on 1k random sets; mass conserved; failures incorrect");
}
