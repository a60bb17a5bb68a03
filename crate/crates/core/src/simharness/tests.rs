use super::*;
use crate::backends::{ChatBackend, GenerationParams};
use crate::orchestrator::{run_conversation, ExamplePool, OrchestratorConfig, StopReason};
use crate::retrieval::FewShotConfig;

fn world(n: usize) -> SimWorld {
    generate_world(&fixed(3, 6), n).unwrap()
}

fn fixed(min: usize, max: usize) -> FindingWorld {
    FindingWorld {
        min_findings: min,
        max_findings: max,
        ..FindingWorld::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let a = world(5);
    let b = world(5);
    assert_eq!(a.cases, b.cases);
    assert_eq!(a.index, b.index);
    let other = generate_world(&FindingWorld { seed: 2, ..fixed(3, 6) }, 5).unwrap();
    assert_ne!(a.cases, other.cases);
}

#[test]
fn zero_cases_is_an_error() {
    assert_eq!(generate_world(&FindingWorld::default(), 0).unwrap_err(), SimError::NoCases);
}

#[test]
fn rejects_small_vocabulary_and_bad_ranges() {
    let small = FindingWorld {
        vocabulary: default_vocabulary()[..7].to_vec(),
        ..FindingWorld::default()
    };
    assert!(matches!(small.validate(), Err(SimError::VocabularyTooSmall { .. })));
    assert!(fixed(0, 3).validate().is_err());
    assert!(fixed(4, 3).validate().is_err());
    assert!(fixed(3, 13).validate().is_err());
    let p = FindingWorld {
        present_probability: 1.5,
        ..FindingWorld::default()
    };
    assert!(p.validate().is_err());
}

#[test]
fn identical_hidden_states_render_identically() {
    let f = vec![
        Finding { name: "cardiomegaly".into(), present: true },
        Finding { name: "pneumothorax".into(), present: false },
    ];
    assert_eq!(render_report(&f), render_report(&f.clone()));
    assert_eq!(render_report(&f), "there is cardiomegaly. there is no pneumothorax.");
}

#[test]
fn reports_mention_each_finding_once() {
    let w = world(50);
    for c in &w.cases {
        assert!((3..=6).contains(&c.findings.len()));
        for f in &c.findings {
            assert_eq!(c.case.report_text.matches(&f.name).count(), 1, "{}", c.case.report_text);
        }
        assert_eq!(sentences(&c.case.report_text).len(), c.findings.len());
        c.case.validate().unwrap();
        for r in &c.case.image_refs {
            assert_eq!(case_id_from_image_ref(r), Some(c.case.case_id.as_str()));
        }
    }
}

#[test]
fn embeddings_are_one_hot_over_values() {
    let w = world(20);
    assert_eq!(w.index.dimension(), 24);
    for c in &w.cases {
        let v = w.index.get(&c.case.case_id).unwrap();
        assert_eq!(v.iter().sum::<f64>(), c.findings.len() as f64);
        assert!(v.iter().all(|&x| x == 0.0 || x == 1.0));
        assert!(v.chunks(2).all(|pair| pair[0] + pair[1] <= 1.0));
    }
}

#[test]
fn truncation_keeps_a_prefix() {
    let w = world(30);
    let t = w.truncated(10);
    assert_eq!(t.cases[..], w.cases[..10]);
    assert_eq!(t.index.len(), 10);
}

#[test]
fn vqa_boundaries() {
    let w = world(20);
    for c in &w.cases {
        for f in &c.findings {
            let q = format!("Is there {}?", f.name);
            assert_eq!(scripted_vqa(&w, c, &q, 0.0, 9), f.sentence());
            assert_eq!(scripted_vqa(&w, c, &q, 1.0, 9), sentence(&f.name, !f.present));
        }
    }
}

#[test]
fn vqa_error_fraction_matches_rate() {
    let w = world(250);
    let mut n = 0;
    let mut wrong = 0;
    'outer: for c in &w.cases {
        for f in &c.findings {
            let answer = scripted_vqa(&w, c, &format!("Any {}?", f.name), 0.3, 42);
            wrong += usize::from(answer != f.sentence());
            n += 1;
            if n == 1000 {
                break 'outer;
            }
        }
    }
    assert_eq!(n, 1000);
    let frac = wrong as f64 / n as f64;
    assert!((frac - 0.3).abs() <= 0.03, "{frac}");
}

#[test]
fn vqa_replays_and_handles_unknown_findings() {
    let w = world(5);
    let c = &w.cases[0];
    let q = format!("Is there {}?", c.findings[0].name);
    assert_eq!(scripted_vqa(&w, c, &q, 0.5, 3), scripted_vqa(&w, c, &q, 0.5, 3));
    assert_eq!(scripted_vqa(&w, c, "How is the patient?", 0.0, 3), CANNOT_ANSWER);
    let absent = w.params.vocabulary.iter().find(|n| c.finding(n).is_none()).unwrap();
    assert_eq!(scripted_vqa(&w, c, &format!("Any {absent}?"), 0.0, 3), CANNOT_ANSWER);
}

#[test]
fn longest_name_wins() {
    let mut params = FindingWorld::default();
    params.vocabulary.push("effusion".into());
    let w = generate_world(&params, 1).unwrap();
    assert_eq!(w.finding_named_in("Any pleural effusion?"), Some("pleural effusion"));
    assert_eq!(w.finding_named_in("Any effusion?"), Some("effusion"));
}

#[test]
fn selector_oracle() {
    let entry = |answer: &str| MemoryEntry {
        case_id: "c".into(),
        image_refs: vec![],
        question: "q".into(),
        answer: answer.into(),
        ground_truth: "there is cardiomegaly. there is no pneumothorax.".into(),
    };
    assert!(scripted_selector(&entry("there is cardiomegaly.")));
    assert!(scripted_selector(&entry("there is no pneumothorax.")));
    assert!(!scripted_selector(&entry("there is no cardiomegaly.")));
    assert!(!scripted_selector(&entry("there is pneumothorax.")));
    assert!(!scripted_selector(&entry(CANNOT_ANSWER)));
    assert!(!scripted_selector(&entry("")));
}

fn conversation(w: &SimWorld, sim: SimConfig, m: usize, case: usize) -> crate::orchestrator::Conversation {
    let backends = sim_backends(Arc::new(w.clone()), &sim);
    let config = OrchestratorConfig {
        max_questions: m,
        few_shot: FewShotConfig { k: 0, ..FewShotConfig::default() },
        ..OrchestratorConfig::default()
    };
    run_conversation(&w.cases[case].case, &config, &backends, &ExamplePool::default())
}

#[test]
fn coverage_agent_reproduces_the_report() {
    let w = generate_world(&fixed(3, 3), 4).unwrap();
    let conv = conversation(&w, SimConfig::default(), 6, 0);
    assert_eq!(conv.turns.len(), 3);
    assert_eq!(conv.stop_reason, StopReason::AgentStop);
    assert_eq!(conv.caption.as_deref(), Some(w.cases[0].case.report_text.as_str()));
    assert_eq!(w.finding_recall(&conv.case_id, conv.caption.as_deref().unwrap()), 1.0);
    for (t, f) in conv.turns.iter().zip(&w.cases[0].findings) {
        assert!(t.question.contains(&f.name));
        assert_eq!(t.answer, f.sentence());
    }
}

#[test]
fn budget_and_stop_after_limit_turns() {
    let w = generate_world(&fixed(4, 4), 2).unwrap();
    let conv = conversation(&w, SimConfig::default(), 2, 1);
    assert_eq!(conv.turns.len(), 2);
    assert_eq!(conv.stop_reason, StopReason::MaxQuestions);
    assert_eq!(w.finding_recall(&conv.case_id, conv.caption.as_deref().unwrap()), 0.5);

    let sim = SimConfig {
        agent_policy: AgentPolicy::StopAfter(1),
        ..SimConfig::default()
    };
    let conv = conversation(&w, sim, 6, 1);
    assert_eq!(conv.turns.len(), 1);
    assert_eq!(conv.stop_reason, StopReason::AgentStop);
}

#[test]
fn random_policy_never_repeats() {
    let w = world(3);
    let sim = SimConfig {
        agent_policy: AgentPolicy::Random,
        seed: 5,
        ..SimConfig::default()
    };
    let conv = conversation(&w, sim, 12, 0);
    assert_eq!(conv.turns.len(), 12);
    let mut asked: Vec<&str> = conv.turns.iter().map(|t| w.finding_named_in(&t.question).unwrap()).collect();
    asked.sort();
    asked.dedup();
    assert_eq!(asked.len(), 12);
    let again = conversation(&w, sim, 12, 0);
    assert_eq!(conv.turns, again.turns);
}

#[test]
fn selector_backend_fidelity() {
    let perfect = SimSelector::new(&SimConfig::default());
    let inverted = SimSelector::new(&SimConfig {
        selector_fidelity: 0.0,
        ..SimConfig::default()
    });
    let msgs = [crate::backends::ChatMessage::user(
        "Question: any cardiomegaly?\nAnswer: there is cardiomegaly.\nGround truth: there is cardiomegaly.",
    )];
    let p = GenerationParams::curation();
    assert_eq!(perfect.complete(&msgs, &p).unwrap(), r#"{"keep":true}"#);
    assert_eq!(inverted.complete(&msgs, &p).unwrap(), r#"{"keep":false}"#);
}

#[test]
fn empty_grid_is_an_error() {
    let err = run_ablation(AblationKind::IclCount, &[], &AblationConfig::default()).unwrap_err();
    assert_eq!(err, SimError::EmptyGrid);
}

fn grid(values: &[&str]) -> Vec<String> {
    values.iter().map(|s| s.to_string()).collect()
}

#[test]
fn conversation_length_recall_rises_to_one() {
    let config = AblationConfig {
        world: fixed(3, 3),
        n_cases: 40,
        ..AblationConfig::default()
    };
    let table = run_ablation(AblationKind::ConversationLength, &grid(&["1", "2", "3"]), &config).unwrap();
    let recall = table.column("finding_recall").unwrap();
    assert!(recall[0] < recall[1] && recall[1] < recall[2], "{recall:?}");
    assert_eq!(recall[2], 1.0);
    assert_eq!(table.rows.iter().map(|r| r.value.as_str()).collect::<Vec<_>>(), ["1", "2", "3"]);
}

#[test]
fn selection_precision_ordering() {
    let config = AblationConfig {
        n_cases: 120,
        sim: SimConfig {
            vqa_error_rate: 0.3,
            seed: 11,
            ..SimConfig::default()
        },
        ..AblationConfig::default()
    };
    let table = run_ablation(AblationKind::SelectionStrategy, &grid(&["none", "top-r=0.5", "agent"]), &config).unwrap();
    let none = table.get("none", "precision").unwrap();
    let top = table.get("top-r=0.5", "precision").unwrap();
    let agent = table.get("agent", "precision").unwrap();
    assert_eq!(agent, 1.0);
    assert_eq!(table.get("agent", "incorrect_selected"), Some(0.0));
    assert!(table.get("top-r=0.5", "incorrect_selected").unwrap() >= 1.0);
    assert!(none < top && top < agent, "{none} {top} {agent}");
    assert_eq!(table.get("none", "selection_ratio"), Some(1.0));
}

#[test]
fn icl_rows_record_example_counts() {
    let config = AblationConfig {
        n_cases: 60,
        ..AblationConfig::default()
    };
    let table = run_ablation(AblationKind::IclCount, &grid(&["0", "5"]), &config).unwrap();
    assert_eq!(table.get("0", "examples_injected"), Some(0.0));
    assert_eq!(table.get("5", "examples_injected"), Some(5.0));
    assert_eq!(table.get("0", "similarity_overlap"), Some(0.0));
    assert!(table.get("5", "similarity_overlap").unwrap() > table.get("5", "random_overlap").unwrap());
}

#[test]
fn data_size_rows_and_outputs() {
    let config = AblationConfig {
        sim: SimConfig {
            vqa_error_rate: 0.2,
            ..SimConfig::default()
        },
        ..AblationConfig::default()
    };
    let table = run_ablation(AblationKind::DataSize, &grid(&["10", "20"]), &config).unwrap();
    assert_eq!(table.get("10", "n_cases"), Some(10.0));
    assert!(table.get("20", "n_memories").unwrap() > table.get("10", "n_memories").unwrap());
    assert_eq!(table.get("20", "precision"), Some(1.0));

    let dir = tempfile::tempdir().unwrap();
    table.write(dir.path(), "data_size").unwrap();
    let csv = std::fs::read_to_string(dir.path().join("data_size.csv")).unwrap();
    assert!(csv.starts_with("data_size,n_cases,n_memories"));
    assert_eq!(csv.lines().count(), 3);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data_size.json")).unwrap()).unwrap();
    assert_eq!(json["rows"][1]["data_size"], "20");
}

#[test]
fn ablation_is_independent_of_parallelism() {
    let base = AblationConfig {
        n_cases: 30,
        sim: SimConfig {
            vqa_error_rate: 0.3,
            selector_fidelity: 0.8,
            ..SimConfig::default()
        },
        ..AblationConfig::default()
    };
    let wide = AblationConfig {
        parallelism: 8,
        ..base.clone()
    };
    let g = grid(&["none", "top-r=0.25", "agent"]);
    assert_eq!(
        run_ablation(AblationKind::SelectionStrategy, &g, &base).unwrap(),
        run_ablation(AblationKind::SelectionStrategy, &g, &wide).unwrap()
    );
}
