use proptest::prelude::*;
use tokenwalk::accountant::{
    calibrate_sigma, distance_series_csv, mean_loss_by_distance, read_overlay_csv, rdp_to_dp, Accountant, AlphaChoice,
    DpPoint, Method, PrivacyParams, Statistic,
};
use tokenwalk::datasets::synth_linear;
use tokenwalk::graphs::{export_graph, generate, load_edge_list, shortest_path_distances, Family, GraphSpec};
use tokenwalk::optim::{run_rw_dpsgd, Objective, SgdConfig};
use tokenwalk::transition::{hamilton_weighting, validate, with_self_loops, TransitionMatrix};
use tokenwalk::walk::{read_binary, simulate};

#[test]
fn graph_and_chain_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate(&GraphSpec::new(Family::Geometric { n: 50, radius: None }, 3)).unwrap();
    let path = dir.path().join("geo.txt");
    export_graph(&g, &path).unwrap();
    let (loaded, ids) = load_edge_list(&path).unwrap();
    assert_eq!(loaded.n(), 50);
    assert_eq!(loaded.edge_count(), g.graph.edge_count());
    for (u, v) in loaded.edges() {
        assert!(g.graph.has_edge(ids[u] as usize, ids[v] as usize));
    }

    let w = hamilton_weighting(&g.graph);
    let wpath = dir.path().join("w.csv");
    w.export(&wpath).unwrap();
    let back = TransitionMatrix::import(&wpath).unwrap();
    assert_eq!(back.matrix(), w.matrix());
    assert_eq!(back.hash(), w.hash());
}

#[test]
fn trajectory_binary_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate(&GraphSpec::new(Family::Grid2d { rows: 4, cols: 5 }, 0)).unwrap().graph;
    let traj = simulate(&hamilton_weighting(&g), 7, 5000, 9).unwrap();
    let path = dir.path().join("walk.bin");
    traj.export_binary(&path).unwrap();
    assert_eq!(read_binary(&std::fs::read(&path).unwrap()).unwrap(), traj.nodes);
    for pair in traj.nodes.windows(2) {
        assert!(pair[0] == pair[1] || g.has_edge(pair[0], pair[1]));
    }
}

#[test]
fn accounting_pipeline_on_geometric_graph() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate(&GraphSpec::new(Family::Geometric { n: 40, radius: None }, 5)).unwrap().graph;
    let w = hamilton_weighting(&g);
    assert!(validate(&w, &g).all_pass());
    let acc = Accountant::new(w).unwrap();
    let p = PrivacyParams::new(2.0, 16.0, 400);
    let exact = acc.pairwise_matrix(&p, Method::Exact).unwrap();
    let dense = acc.pairwise_matrix(&p, Method::MatrixPower).unwrap();
    for (a, b) in exact.off_diagonal().zip(dense.off_diagonal()) {
        assert!((a - b).abs() <= 1e-9);
    }
    let dist = shortest_path_distances(&g);
    let series = mean_loss_by_distance(&exact, &dist).unwrap();
    assert_eq!(series.iter().map(|b| b.count).sum::<usize>(), 40 * 39);
    assert_eq!(series.len() as u32, dist.diameter());

    let path = dir.path().join("series.csv");
    std::fs::write(&path, distance_series_csv(&series)).unwrap();
    let curve = read_overlay_csv(&path).unwrap();
    assert_eq!(curve.len(), series.len());
    for ((d, m), b) in curve.iter().zip(&series) {
        assert_eq!(*d, b.distance);
        assert_eq!(*m, b.mean);
    }

    let mpath = dir.path().join("pairwise.csv");
    exact.export(&mpath).unwrap();
    assert!(mpath.with_extension("csv.json").is_file());
}

#[test]
fn calibrated_walk_trains_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let n = 64;
    let data = synth_linear(n, 8, 4, 0.1, 1).unwrap();
    let obj = Objective::logistic(data, 0.0).unwrap();
    let g = generate(&GraphSpec::new(Family::Ring { n }, 0)).unwrap().graph;
    let w = with_self_loops(&g, 0.5).unwrap();
    let acc = Accountant::new(w.clone()).unwrap();
    let steps = 20 * n as u64;
    let target = DpPoint {
        epsilon: 4.0,
        delta: 1e-5,
    };
    let cal = calibrate_sigma(
        &acc,
        &PrivacyParams::new(2.0, 16.0, steps),
        Method::Exact,
        target,
        Statistic::MeanPairs,
        &AlphaChoice::Optimal,
        None,
    )
    .unwrap();
    let check = acc.pairwise_matrix(&PrivacyParams::new(cal.alpha, cal.sigma2, steps), Method::Exact).unwrap();
    let eps = rdp_to_dp(cal.alpha, check.mean(), target.delta).unwrap().epsilon;
    assert!((eps - target.epsilon).abs() <= 1e-4 * target.epsilon);

    let mut cfg = SgdConfig::new(steps, 1.0 / obj.smoothness(), 2);
    cfg.sigma = cal.sigma2.sqrt();
    cfg.clip = 1.0;
    let record = run_rw_dpsgd(&w, &obj, &cfg).unwrap();
    assert_eq!(record.t.last().copied(), Some(steps));
    assert!(record.final_accuracy().unwrap() > 0.5);
    record.export(dir.path(), "rw").unwrap();
    let csv = std::fs::read_to_string(dir.path().join("rw.csv")).unwrap();
    assert_eq!(csv.lines().count(), record.t.len() + 1);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("rw.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn spectral_and_dense_accounting_agree(n in 6usize..24, q in 0.2f64..0.8, seed in 0u64..1000, steps in 1u64..300) {
        let g = generate(&GraphSpec::new(Family::ErdosRenyi { n, q }, seed)).unwrap().graph;
        let acc = Accountant::new(hamilton_weighting(&g)).unwrap();
        let p = PrivacyParams::new(2.0, 16.0, steps);
        let exact = acc.unit_matrix(steps, Method::Exact).unwrap();
        let dense = acc.unit_matrix(steps, Method::MatrixPower).unwrap();
        prop_assert!((exact - dense).amax() <= 1e-9 / (p.alpha / p.sigma2));
    }
}
