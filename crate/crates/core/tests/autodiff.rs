use fedpart::autodiff::{finite_difference_check, BnMode};

mod common;

#[test]
fn random_micro_graphs_match_central_differences() {
    for s in 0..50 {
        let (graph, params, batch) = common::random_micro_graph(s);
        let check = finite_difference_check(&graph, &params, &batch, 1e-6).unwrap();
        assert!(check.max_rel_error < 1e-5, "graph {s} ({:?}): {:?}", graph.op_kinds(), check.per_group);
    }
}

#[test]
fn micro_graphs_are_deterministic_and_finite() {
    for s in 0..10 {
        let (g1, p1, b1) = common::random_micro_graph(s);
        let (_, p2, _) = common::random_micro_graph(s);
        assert!(p1.bit_eq(&p2));
        let ev = g1.evaluate(&p1, &b1, BnMode::Batch).unwrap();
        assert!(ev.loss.is_finite() && ev.grads.all_finite());
    }
}
