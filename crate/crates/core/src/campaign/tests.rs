use std::sync::Arc;

use serde_json::json;
use tempfile::TempDir;

use super::*;
use crate::domain::write_dataset;
use crate::llm_backend::{MockChat, ScriptedFailure};
use crate::oracle_clients::stub::{HashingEmbedder, StubClassifier};
use crate::prompting::GenerationMode;
use crate::scripted;

struct Fixture {
    _dir: TempDir,
    config: RunConfig,
}

fn sample(id: &str, text: &str, label: &str) -> Sample {
    Sample {
        id: id.into(),
        input: SampleInput::text(text),
        gold_label: label.into(),
    }
}

fn fixture(samples: &[Sample], mode: CampaignMode) -> Fixture {
    let dir = TempDir::new().unwrap();
    let dataset = dir.path().join("data.jsonl");
    write_dataset(samples, std::fs::File::create(&dataset).unwrap()).unwrap();
    let mut config = RunConfig::new(
        TaskSpec::imdb(),
        dataset,
        mode,
        BackendSpec::new(
            "mock",
            "http://mock.invalid/v1/chat/completions",
            "mock-model",
        )
        .unwrap(),
        "http://classifier.invalid",
        "http://embedder.invalid",
        dir.path().join("run"),
    );
    config.retry = RetryPolicy::no_delay(2);
    config.workers = 3;
    Fixture { _dir: dir, config }
}

/// 4 flipping (great/awful) and 4 stable (nice/dull) samples.
fn polar_samples() -> Vec<Sample> {
    let mut out = Vec::new();
    for i in 0..4 {
        let (word, label) = if i % 2 == 0 {
            ("great", "positive")
        } else {
            ("awful", "negative")
        };
        out.push(sample(
            &format!("f{i}"),
            &format!("The plot was {word} in part {i}."),
            label,
        ));
    }
    for i in 0..4 {
        let (word, label) = if i % 2 == 0 {
            ("nice", "positive")
        } else {
            ("dull", "negative")
        };
        out.push(sample(
            &format!("s{i}"),
            &format!("The cast was {word} in act {i}."),
            label,
        ));
    }
    out
}

fn run(fx: &Fixture) -> CampaignResult {
    let services = scripted::services(&fx.config).unwrap();
    run_campaign(&fx.config, &services).unwrap()
}

#[test]
fn filter_keeps_everything_the_stub_gets_right() {
    let fx = fixture(&[], CampaignMode::Naive);
    let services = scripted::services(&fx.config).unwrap();
    let samples: Vec<Sample> = polar_samples().into_iter().take(5).collect();
    let r = filter_correctly_predicted(&samples, &services.classifier, 2).unwrap();
    assert_eq!((r.kept.len(), r.dropped.len(), r.errored.len()), (5, 0, 0));
}

#[test]
fn filter_drops_misclassified_samples() {
    let fx = fixture(&[], CampaignMode::Naive);
    let services = scripted::services(&fx.config).unwrap();
    let mut samples: Vec<Sample> = polar_samples().into_iter().take(5).collect();
    samples[1].gold_label = "positive".into();
    samples[4].gold_label = "negative".into();
    let r = filter_correctly_predicted(&samples, &services.classifier, 2).unwrap();
    assert_eq!((r.kept.len(), r.dropped.len()), (3, 2));
    let dropped: Vec<&str> = r.dropped.iter().map(|(s, _)| s.id.as_str()).collect();
    assert_eq!(dropped, ["f1", "s0"]);
}

#[test]
fn filter_buckets_permanent_errors() {
    let fx = fixture(&[], CampaignMode::Naive);
    let classifier = StubClassifier::new(|input| match input {
        SampleInput::Text { text } if text.contains("cast") => json!({ "label": "neutral" }),
        _ => json!({ "label": "positive" }),
    });
    let services = Services::with_transports(
        &fx.config,
        Arc::new(MockChat::new()),
        Arc::new(classifier),
        Arc::new(HashingEmbedder::new(8)),
    )
    .unwrap();
    let r = filter_correctly_predicted(&polar_samples(), &services.classifier, 2).unwrap();
    assert_eq!((r.kept.len(), r.dropped.len(), r.errored.len()), (2, 2, 4));
}

#[test]
fn naive_campaign_flips_exactly_the_swappable_half() {
    let fx = fixture(&polar_samples(), CampaignMode::Naive);
    let result = run(&fx);
    assert_eq!(result.report.lfs_pct, Some(50.0));
    assert_eq!(result.report.n_evaluated, 8);
    assert_eq!(result.records.len(), 8);
    let ids: Vec<&str> = result
        .records
        .iter()
        .map(|r| r.sample_id.as_str())
        .collect();
    assert_eq!(ids, ["f0", "f1", "f2", "f3", "s0", "s1", "s2", "s3"]);
    assert!(fx.config.out_dir.join(REPORT_CSV).exists());
    assert!(result.manifest.finalized);
}

#[test]
fn misclassified_originals_are_never_evaluated() {
    let mut samples = polar_samples();
    samples[0].gold_label = "negative".into();
    let fx = fixture(&samples, CampaignMode::Naive);
    let result = run(&fx);
    assert_eq!(result.report.n_dropped, 1);
    assert_eq!(result.report.n_kept, 7);
    assert!(result.records.iter().all(|r| r.sample_id != "f0"));
    for r in &result.records {
        let gold = &samples
            .iter()
            .find(|s| s.id == r.sample_id)
            .unwrap()
            .gold_label;
        assert_eq!(&r.original_prediction.as_ref().unwrap().label, gold);
    }
    assert_eq!(result.manifest.samples["f0"], SampleStatus::Dropped);
}

#[test]
fn guided_falls_back_to_naive_without_rationale_words() {
    let mut samples = polar_samples();
    samples.push(sample("plain", "A film about a dog.", "negative"));
    let fx = fixture(&samples, CampaignMode::Guided);
    let result = run(&fx);
    let plain = result
        .records
        .iter()
        .find(|r| r.sample_id == "plain")
        .unwrap();
    assert!(plain.fallback_naive);
    assert_eq!(plain.step1_failure.as_deref(), Some("empty-word-list"));
    assert_eq!(
        plain.prompt_modes(),
        [
            GenerationMode::ExplanationGuidedStep1,
            GenerationMode::ExplanationNaive
        ]
    );
    let guided = result.records.iter().find(|r| r.sample_id == "f0").unwrap();
    assert!(!guided.fallback_naive);
    assert_eq!(guided.rationale.as_ref().unwrap().words(), ["great"]);
    assert_eq!(guided.completions.len(), 2);
    assert_eq!(result.report.n_fallback_naive, 1);
    assert_eq!(result.report.n_evaluated, 9);
}

#[test]
fn guided_step1_empty_completion_falls_back() {
    let fx = fixture(&polar_samples()[..1], CampaignMode::Guided);
    let mock = MockChat::new().with_responder(|messages| {
        if messages.len() == 1 && messages[0].content.contains("List ONLY") {
            Some("   ".into())
        } else {
            scripted::respond(messages)
        }
    });
    let services = scripted::services_with(&fx.config, Arc::new(mock)).unwrap();
    let result = run_campaign(&fx.config, &services).unwrap();
    let r = &result.records[0];
    assert!(r.fallback_naive);
    assert_eq!(r.step1_failure.as_deref(), Some("empty-completion"));
    assert_eq!(r.status, RecordStatus::Ok);
}

#[test]
fn missing_tags_count_as_failures_not_flips() {
    let mut samples = polar_samples();
    samples.push(sample("nt", "It was great [notag].", "positive"));
    let mut fx = fixture(&samples, CampaignMode::Naive);
    let lenient = run(&fx);
    let r = lenient
        .records
        .iter()
        .find(|r| r.sample_id == "nt")
        .unwrap();
    assert_eq!(r.status, RecordStatus::GenerationFailed);
    assert_eq!(r.failure, Some(GenerationFailure::TagMissing));
    assert_eq!(lenient.report.n_failed, 1);
    assert_eq!(lenient.report.lfs_pct, Some(50.0));
    assert!((lenient.report.failure_rate_pct - 100.0 / 9.0).abs() < 1e-9);

    fx.config.strict_lfs = true;
    fx.config.out_dir = fx.config.out_dir.with_file_name("strict");
    let strict = run(&fx);
    assert!((strict.report.lfs_pct.unwrap() - 400.0 / 9.0).abs() < 1e-9);
}

#[test]
fn contrast_keeps_gold_and_skips_filter() {
    let mut samples = polar_samples();
    // Misclassified original whose contrast rewrite is classified correctly.
    samples[1].gold_label = "positive".into();
    let fx = fixture(&samples, CampaignMode::Contrast);
    let result = run(&fx);
    assert_eq!(result.report.n_kept, 8);
    assert_eq!(result.report.n_dropped, 0);
    for r in &result.records {
        let o = r.outcome.as_ref().unwrap();
        assert_eq!(o.contrast_gold.as_ref(), Some(&o.gold_label));
        assert_eq!(r.prompt_modes(), [GenerationMode::ContrastSet]);
    }
    let rep = &result.report;
    assert_eq!(rep.original_accuracy_pct, Some(87.5));
    assert_eq!(rep.contrast_accuracy_pct, Some(62.5));
    assert_eq!(rep.consistency_pct, Some(50.0));
    assert!(rep.consistency_pct < rep.original_accuracy_pct);
    assert!(rep.consistency_pct < rep.contrast_accuracy_pct);
    assert!(rep.lfs_pct.is_none());
}

#[test]
fn empty_dataset_fails_before_any_call() {
    let fx = fixture(&[], CampaignMode::Naive);
    let services = scripted::services(&fx.config).unwrap();
    let err = run_campaign(&fx.config, &services).unwrap_err();
    assert!(matches!(err, CampaignError::EmptyDataset));
    assert_eq!(services.network_calls(), 0);
}

#[test]
fn warm_cache_replays_without_network() {
    let fx = fixture(&polar_samples(), CampaignMode::Guided);
    let first = run(&fx);
    let mut again = fx.config.clone();
    again.out_dir = fx.config.out_dir.with_file_name("again");
    again.cache_dir = Some(fx.config.cache_dir());
    let services = scripted::services(&again).unwrap();
    let second = run_campaign(&again, &services).unwrap();
    assert_eq!(services.network_calls(), 0);
    assert_eq!(first.report, second.report);
}

#[test]
fn interrupted_run_resumes_only_missing_samples() {
    let fx = fixture(&polar_samples(), CampaignMode::Naive);
    let chat = Arc::new(scripted::generator());
    let services = scripted::services_with(&fx.config, chat.clone()).unwrap();
    let limits = RunLimits {
        max_new_samples: Some(3),
    };
    assert!(run_campaign_with(&fx.config, &services, limits)
        .unwrap()
        .is_none());
    assert_eq!(chat.calls(), 3);
    assert_eq!(
        read_records(&fx.config.out_dir.join(RECORDS_FILE))
            .unwrap()
            .len(),
        3
    );

    let chat = Arc::new(scripted::generator());
    let services = scripted::services_with(&fx.config, chat.clone()).unwrap();
    let result = run_campaign(&fx.config, &services).unwrap();
    assert_eq!(chat.calls(), 5);
    assert_eq!(result.report.n_evaluated, 8);
}

#[test]
fn resume_refuses_edited_dataset() {
    let fx = fixture(&polar_samples(), CampaignMode::Naive);
    let services = scripted::services(&fx.config).unwrap();
    run_campaign_with(
        &fx.config,
        &services,
        RunLimits {
            max_new_samples: Some(2),
        },
    )
    .unwrap();
    let mut samples = polar_samples();
    samples[7].input = SampleInput::text("The cast was dull, mostly.");
    write_dataset(&samples, std::fs::File::create(&fx.config.dataset).unwrap()).unwrap();
    match run_campaign(&fx.config, &services) {
        Err(CampaignError::ResumeMismatch(diffs)) => {
            assert!(diffs[0].starts_with("dataset content changed"), "{diffs:?}")
        }
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn resume_refuses_changed_config_but_not_worker_count() {
    let fx = fixture(&polar_samples(), CampaignMode::Naive);
    let services = scripted::services(&fx.config).unwrap();
    run_campaign_with(
        &fx.config,
        &services,
        RunLimits {
            max_new_samples: Some(2),
        },
    )
    .unwrap();

    let mut changed = fx.config.clone();
    changed.sampling.temperature = 0.9;
    let err = run_campaign(&changed, &services).unwrap_err();
    assert!(
        err.to_string().contains("config 'sampling' changed"),
        "{err}"
    );

    let mut more_workers = fx.config.clone();
    more_workers.workers = 7;
    assert!(run_campaign(&more_workers, &services).is_ok());
}

#[test]
fn finished_run_resumes_as_a_no_op() {
    let fx = fixture(&polar_samples(), CampaignMode::Contrast);
    let first = run(&fx);
    let report_before = std::fs::read(fx.config.out_dir.join(REPORT_JSON)).unwrap();
    let config = resume_config(&fx.config.manifest_path(), None).unwrap();
    let services = scripted::services(&config).unwrap();
    let again = run_campaign(&config, &services).unwrap();
    assert_eq!(services.network_calls(), 0);
    assert_eq!(first.report, again.report);
    assert_eq!(
        std::fs::read(fx.config.out_dir.join(REPORT_JSON)).unwrap(),
        report_before
    );
}

#[test]
fn exhausted_retries_halt_with_resumable_state() {
    let fx = fixture(&polar_samples(), CampaignMode::Naive);
    let mut config = fx.config.clone();
    config.workers = 1;
    let chat = Arc::new(scripted::generator().fail_from(4, ScriptedFailure::Status(503)));
    let services = scripted::services_with(&config, chat).unwrap();
    let err = run_campaign(&config, &services).unwrap_err();
    assert!(
        matches!(err, CampaignError::Halted { ref sample_id, .. } if sample_id == "s0"),
        "{err}"
    );
    let manifest = RunManifest::load(&config.manifest_path()).unwrap();
    assert!(!manifest.finalized);
    assert_eq!(status_counts(&manifest)[&SampleStatus::Done], 4);

    let services = scripted::services(&config).unwrap();
    let result = run_campaign(&config, &services).unwrap();
    assert_eq!(result.report.n_evaluated, 8);
}

#[test]
fn permanent_backend_errors_are_recorded_and_conserved() {
    let fx = fixture(&polar_samples(), CampaignMode::Naive);
    let mut config = fx.config.clone();
    config.workers = 1;
    let chat = Arc::new(scripted::generator().fail_calls(1..2, ScriptedFailure::Status(400)));
    let services = scripted::services_with(&config, chat).unwrap();
    let result = run_campaign(&config, &services).unwrap();
    let rep = &result.report;
    assert_eq!(rep.n_errored, 1);
    assert_eq!(rep.n_evaluated + rep.n_failed + rep.n_errored, rep.n_kept);
    let errored = result
        .records
        .iter()
        .find(|r| r.status == RecordStatus::Errored)
        .unwrap();
    assert_eq!(errored.sample_id, "f1");
    assert!(errored.outcome.is_none());
}

#[test]
fn long_inputs_are_truncated_before_prompting() {
    let long = format!("It was great. {}", "x".repeat(100));
    let mut fx = fixture(&[sample("long", &long, "positive")], CampaignMode::Naive);
    fx.config.truncate_chars = 20;
    let result = run(&fx);
    let r = &result.records[0];
    assert!(r.truncated);
    assert!(r.prompts[0].text.ends_with("Text: It was great. xxxxxx."));
}

#[test]
fn pair_tasks_rewrite_the_hypothesis() {
    let dir = TempDir::new().unwrap();
    let dataset = dir.path().join("snli.jsonl");
    let samples = vec![Sample {
        id: "p1".into(),
        input: SampleInput::pair("A man plays.", "The man is great."),
        gold_label: "entailment".into(),
    }];
    write_dataset(&samples, std::fs::File::create(&dataset).unwrap()).unwrap();
    let mut config = RunConfig::new(
        TaskSpec::snli(),
        dataset,
        CampaignMode::Naive,
        BackendSpec::new("mock", "http://mock.invalid/v1", "m").unwrap(),
        "http://c.invalid",
        "http://e.invalid",
        dir.path().join("run"),
    );
    config.retry = RetryPolicy::no_delay(1);
    let classifier =
        StubClassifier::keywords(vec![("awful".into(), "contradiction".into())], "entailment");
    let services = Services::with_transports(
        &config,
        Arc::new(scripted::generator()),
        Arc::new(classifier),
        Arc::new(HashingEmbedder::new(16)),
    )
    .unwrap();
    let result = run_campaign(&config, &services).unwrap();
    let r = &result.records[0];
    assert_eq!(
        r.counterfactual_input,
        Some(SampleInput::pair("A man plays.", "The man is awful."))
    );
    assert_eq!(result.report.lfs_pct, Some(100.0));

    config.pair_rewrite = PairRewrite::WholePair;
    config.out_dir = dir.path().join("whole");
    let result = run_campaign(&config, &services).unwrap();
    assert_eq!(result.report.n_evaluated, 1);
}

#[test]
fn flattened_pairs_parse_back() {
    assert_eq!(
        parse_flattened_pair("premise: A b.\nhypothesis: C d."),
        Some(("A b.".into(), "C d.".into()))
    );
    assert_eq!(
        parse_flattened_pair("  Premise: x Hypothesis: y"),
        Some(("x".into(), "y".into()))
    );
    assert_eq!(parse_flattened_pair("hypothesis: y"), None);
    assert_eq!(parse_flattened_pair("premise: \nhypothesis: y"), None);
}

#[test]
fn persisted_config_omits_credentials() {
    let mut fx = fixture(&polar_samples()[..2], CampaignMode::Naive);
    fx.config.backend.auth = Some("FIZLE_UNIT_TEST_TOKEN_VAR".into());
    run(&fx);
    let manifest = std::fs::read_to_string(fx.config.manifest_path()).unwrap();
    assert!(!manifest.contains("FIZLE_UNIT_TEST_TOKEN_VAR"));
    let config = resume_config(&fx.config.manifest_path(), Some(&fx.config.backend)).unwrap();
    assert_eq!(
        config.backend.auth.as_deref(),
        Some("FIZLE_UNIT_TEST_TOKEN_VAR")
    );
}

#[test]
fn mode_and_rewrite_parse() {
    assert_eq!(
        "Guided".parse::<CampaignMode>().unwrap(),
        CampaignMode::Guided
    );
    assert!("both".parse::<CampaignMode>().is_err());
    assert_eq!(
        "whole-pair".parse::<PairRewrite>().unwrap(),
        PairRewrite::WholePair
    );
}
