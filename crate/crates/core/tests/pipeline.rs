use routerec_core::analysis::{hypothesis_report, write_exports, Filters};
use routerec_core::config::{parse_experiment, reference_experiment, REFERENCE_CONFIG};
use routerec_core::protocol::{read_session_logs, run_batch, Lineage, Protocol};

#[test]
fn batch_on_disk_round_trips_through_analysis() {
    let exp = reference_experiment().with_rounds(40).unwrap();
    let protocol = Protocol::from_experiment(&exp).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut lineage = protocol.new_lineage();
    let logs = run_batch(&protocol, &mut lineage, &exp.agents, 6, 3, Some(dir.path())).unwrap();

    let loaded = read_session_logs(dir.path().join("logs")).unwrap();
    assert_eq!(loaded.len(), 6);
    for (a, b) in logs.iter().zip(&loaded) {
        assert_eq!(a.records, b.records);
    }

    let restored = Lineage::load(dir.path().join("lineage.json")).unwrap();
    assert_eq!(restored.completed_sessions(), 6);
    assert_eq!(restored.next_participant(), 7);
    assert_eq!(restored.p_hat(), lineage.p_hat());

    let filters = Filters {
        band: None,
        ..Filters::default()
    };
    let report = hypothesis_report(&loaded, &exp.protocol.initial_defection, 5.0, &filters).unwrap();
    assert_eq!(report.participants, 6);
    assert_eq!(report.rounds, 240);
    let last = report.h2.last().unwrap();
    let follows: usize = loaded.iter().map(|l| l.follow_count()).sum();
    assert!((last.cumulative_follow_frequency - follows as f64 / 240.0).abs() < 1e-12);

    let out = dir.path().join("export");
    let paths = write_exports(&report, &out).unwrap();
    let h2 = std::fs::read_to_string(&paths.h2).unwrap();
    assert_eq!(h2.lines().count(), 7);
}

#[test]
fn resumed_lineage_continues_numbering() {
    let exp = reference_experiment().with_rounds(20).unwrap();
    let protocol = Protocol::from_experiment(&exp).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let mut straight = protocol.new_lineage();
    let all = run_batch(&protocol, &mut straight, &exp.agents, 4, 8, None).unwrap();

    let mut first = protocol.new_lineage();
    run_batch(&protocol, &mut first, &exp.agents, 2, 8, Some(dir.path())).unwrap();
    let mut resumed = Lineage::load(dir.path().join("lineage.json")).unwrap();
    let rest = run_batch(&protocol, &mut resumed, &exp.agents, 2, 8, None).unwrap();

    // Each batch starts its own logical clock, so timestamps are not compared.
    let untimed = |logs: &[routerec_core::protocol::SessionLog]| {
        logs.iter()
            .flat_map(|l| l.records.iter().cloned())
            .map(|mut r| {
                r.t_start = 0;
                r.t_end = 0;
                r
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(rest[0].s, 3);
    assert_eq!(untimed(&rest), untimed(&all[2..]));
    assert_eq!(rest[1].final_rating, all[3].final_rating);
}

#[test]
fn config_text_edits_are_validated() {
    assert!(parse_experiment(REFERENCE_CONFIG).is_ok());
    let bad_prior = REFERENCE_CONFIG.replace("prior = [0.1, 0.2, 0.4, 0.05, 0.25]", "prior = [0.1, 0.2, 0.4, 0.05, 0.35]");
    assert!(parse_experiment(&bad_prior).is_err());
    let bad_rating = REFERENCE_CONFIG.replace("initial_rating = 2.5", "initial_rating = 7.5");
    assert!(parse_experiment(&bad_rating).is_err());
}
