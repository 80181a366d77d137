//! File-level round trips through the public API.

use sbmoe::data_io::{
    generate_synthetic, load_qrels, load_run, load_store, save_store, write_qrels, write_run,
    SyntheticSpec,
};
use sbmoe::moe_head::{head_forward, init_head, load_model, save_model, HeadConfig, Pooling};
use sbmoe::numerics::SeededRng;
use sbmoe::retrieval_eval::{compare_runs, evaluate, retrieve, Metric};
use sbmoe::training::Similarity;
use sbmoe::Error;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        dim: 12,
        domains: 3,
        docs_per_domain: 40,
        queries_per_domain: 10,
        noise: 0.0,
        seed: 7,
        rotation_dim: None,
        domain_offset: 0.0,
    }
}

#[test]
fn stores_qrels_and_runs_survive_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&small_spec()).unwrap();
    let qpath = dir.path().join("q.sbmv");
    save_store(&data.queries, &qpath).unwrap();
    let queries = load_store(&qpath).unwrap();
    assert_eq!(queries.ids(), data.queries.ids());
    for (i, (_, v)) in data.queries.iter().enumerate() {
        // Stored as f32.
        let expect: Vec<f64> = v.iter().map(|&x| x as f32 as f64).collect();
        assert_eq!(queries.vector(i), expect.as_slice());
    }

    let qrels_path = dir.path().join("qrels");
    write_qrels(&data.qrels, std::fs::File::create(&qrels_path).unwrap()).unwrap();
    let parsed = load_qrels(&qrels_path).unwrap();
    assert_eq!(parsed.qrels, data.qrels);
    assert_eq!(parsed.duplicates, 0);

    let run = retrieve(&queries, &data.docs, None, 20, Similarity::Cosine).unwrap();
    let run_path = dir.path().join("run");
    write_run(&run, "raw", std::fs::File::create(&run_path).unwrap()).unwrap();
    let reloaded = load_run(&run_path).unwrap();
    assert_eq!(reloaded.len(), 30);
    for (q, ranked) in &reloaded {
        let ids: Vec<&String> = ranked.iter().map(|(d, _)| d).collect();
        let orig: Vec<&String> = run[q].iter().map(|(d, _)| d).collect();
        assert_eq!(ids, orig);
    }
}

#[test]
fn identity_head_changes_nothing_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&small_spec()).unwrap();
    let head = init_head(
        HeadConfig::new(12, 3, Pooling::All).unwrap(),
        &mut SeededRng::new(42),
    )
    .unwrap();
    let path = dir.path().join("head.sbmh");
    save_model(&head, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    let (y, _) = head_forward(&loaded, data.docs.vector(0), None).unwrap();
    assert_eq!(y, data.docs.vector(0));

    let raw = retrieve(&data.queries, &data.docs, None, 100, Similarity::Cosine).unwrap();
    let with_head = retrieve(
        &data.queries,
        &data.docs,
        Some(&loaded),
        100,
        Similarity::Cosine,
    )
    .unwrap();
    assert_eq!(raw, with_head);
}

#[test]
fn ideal_run_scores_one_and_self_comparison_is_degenerate() {
    let data = generate_synthetic(&small_spec()).unwrap();
    let mut ideal = sbmoe::data_io::Run::new();
    for (q, judged) in &data.qrels {
        let ranked = judged.keys().map(|d| (d.clone(), 1.0)).collect();
        ideal.insert(q.clone(), ranked);
    }
    let report = evaluate(&ideal, &data.qrels, &[Metric::NDCG_10, Metric::RECALL_100]);
    assert_eq!(report.num_queries, 30);
    assert!(report.metrics.iter().all(|m| m.mean == 1.0));

    let err = compare_runs(&ideal, &ideal, &data.qrels, &[Metric::NDCG_10], 1).unwrap_err();
    assert!(matches!(err, Error::DegenerateVariance));
}
