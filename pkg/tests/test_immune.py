import numpy as np
import pytest
from hypothesis import given, strategies as st

from ftimmune.attack import PerturbationSet
from ftimmune.data import SbmSpec, sbm_generate, split_reliable
from ftimmune.graph import GraphData, build_laplacian, dense
from ftimmune.immune import (BoundError, DetectorError, DetectorFormatError, DetectorSet, EdgeVerdict,
                             FeasibilityError, Generator, GeneratorConfig, ImmuneConfig, RectifyError,
                             calibrate_rho, calibrate_rho_feasible, classify_deleted, classify_inserted,
                             deletion_candidates, detect_abnormal, detect_many, export_detectors,
                             gamma_bound, generate_chains, generate_feasible_fts, import_detectors,
                             produce_detectors, rectify, run_pipeline, screen, train_generator,
                             unique_trajectories, violation_rate)
from ftimmune.immune import pipeline as pipeline_mod
from ftimmune.immune.pipeline import defense_scores
from ftimmune.models import ConfigError, ModelArch, ModelState, TrainConfig, softmax, train_epoch
from ftimmune.trajectory import trajectory_mse

from conftest import random_graph


# ------------------------------------------------------------------- bound

def two_node():
    Z = np.array([[0.2, -0.4], [0.7, 0.1]])
    W = np.array([[1.0, -0.5], [0.3, 0.8]])
    g = GraphData(2, {(0, 1)}, Z, np.eye(2), np.ones(2, bool), np.zeros(2, bool), np.zeros(2, bool))
    return g, Z, W, build_laplacian(g)


def test_gamma_bound_trivial_cases():
    g, Z, W, L = two_node()
    assert gamma_bound(Z, W, L, g.labels, 0.1, O=g.labels).lam == 0.0
    assert gamma_bound(Z, W, L, g.labels, 0.0).lam == 0.0


def test_gamma_bound_dense_oracle():
    g, Z, W, L = two_node()
    Ld = dense(L)
    O = softmax(Ld @ Z @ W)
    M = Ld @ Z @ Z.T @ Ld @ (O - g.labels)
    oracle = 0.1 ** 2 * max(np.sum(M ** 2, axis=1))
    assert gamma_bound(Z, W, L, g.labels, 0.1).lam == pytest.approx(oracle, rel=1e-12)
    assert oracle > 0


def test_gamma_bound_rejects_non_stochastic_output():
    g, Z, W, L = two_node()
    with pytest.raises(BoundError):
        gamma_bound(Z, W, L, g.labels, 0.1, O=np.full((2, 2), 0.7))


def test_violation_rate():
    P = np.cumsum(np.ones((3, 5, 2)), axis=1)     # straight lines: products are all 2
    assert violation_rate(P, 1.0) == 0.0 and violation_rate(P, 3.0) == 1.0
    assert np.isnan(violation_rate(P[:, :2], 0.0))


# --------------------------------------------------------------- generator

def test_unconstrained_generator_always_satisfied():
    gen = train_generator(np.random.default_rng(0).standard_normal((5, 4, 3)), -np.inf,
                          cfg=GeneratorConfig(steps=10))
    assert gen.satisfaction == 1.0


def test_identity_generator_on_unit_vectors():
    gen = Generator.identity(3, lam=0.5)
    v = np.random.default_rng(1).standard_normal((100, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    assert np.all(np.einsum("nd,nd->n", gen(v), v) >= 0.5)


def test_trained_generator_satisfaction():
    # consecutive directions of smooth trajectories are correlated, as in training
    rng = np.random.default_rng(2)
    pool = rng.standard_normal((40, 1, 8)) + 0.3 * np.cumsum(rng.standard_normal((40, 6, 8)), axis=1)
    unit = np.sqrt(np.mean(np.sum(pool ** 2, axis=2)))
    gen = train_generator(pool, 0.3 * unit ** 2, seed=4)
    assert gen.satisfaction >= 0.95


def test_pure_noise_mode():
    gen = train_generator(np.zeros((0, 0, 0)), 0.5, dim=4, cfg=GeneratorConfig(steps=200))
    assert gen.dim == 4 and gen.satisfaction >= 0.95


@given(seed=st.integers(0, 10 ** 5), varrho=st.integers(3, 8))
def test_chains_satisfy_the_bound(seed, varrho):
    rng = np.random.default_rng(seed)
    gen = train_generator(rng.standard_normal((10, 4, 3)), 0.0, seed=seed, cfg=GeneratorConfig(steps=30))
    P = generate_chains(gen, rng.standard_normal((10, 3)), varrho, 20, seed=seed, jitter=1.0)
    assert P.shape == (20, varrho, 3) and np.all(P[:, 0] == 0)
    d = np.diff(P, axis=1)
    assert np.all(np.einsum("ntd,ntd->nt", d[:, :-1], d[:, 1:]) >= gen.lam)


def test_single_step_chains_are_deterministic():
    gen = Generator.identity(3)
    init = np.array([1.0, 2.0, 0.5])
    a = generate_feasible_fts(gen, init, 2, 5, seed=3)
    b = generate_feasible_fts(gen, init, 2, 5, seed=3)
    assert len(a) == 5 and all(np.array_equal(x.points, y.points) for x, y in zip(a, b))
    assert generate_feasible_fts(gen, init, 2, 0) == []


def test_infeasible_bound_raises():
    gen = Generator.identity(3, lam=1e6)
    with pytest.raises(FeasibilityError, match="recalibrate"):
        generate_chains(gen, np.ones(3), 4, 10, max_attempts=200)


# --------------------------------------------------------- negative selection

def brute_force(F, R, rho):
    return np.array([min(trajectory_mse(f, r) for r in R) > rho for f in F], dtype=bool)


def test_nsa_trivial_cases():
    R = np.random.default_rng(0).random((6, 4, 2))
    assert len(produce_detectors(R, R, 0.01)) == 0
    far = R + 10.0
    assert np.array_equal(produce_detectors(far, R, 0.01).detectors, far)
    with pytest.raises(DetectorError):
        produce_detectors(R, np.zeros((0, 4, 2)), 0.01)


@given(seed=st.integers(0, 10 ** 6), n=st.integers(1, 60), m=st.integers(1, 40))
def test_nsa_matches_brute_force_and_is_sound(seed, n, m):
    rng = np.random.default_rng(seed)
    R = rng.random((m, 5, 2))
    near = R[rng.integers(0, m, n)] + 0.05 * rng.standard_normal((n, 5, 2))
    F = np.concatenate([near, rng.random((n, 5, 2)) * 3])
    rho = 0.02
    ds = produce_detectors(F, R, rho)
    assert np.array_equal(ds.detectors, F[brute_force(F, R, rho)])
    abn, score = detect_many(R, ds)
    assert not abn.any() and np.all(score > rho)


def test_screen_exact_at_threshold():
    R = np.zeros((1, 2, 1))
    F = np.array([[[0.0], [2.0]]])          # mse = 2
    assert not screen(F, R, 2.0)[0] and screen(F, R, 2.0 - 1e-9)[0]


def test_detection_rule_examples():
    d = np.random.default_rng(3).random((3, 4, 2))
    ds = DetectorSet(d, 0.01, 1, 4, 2)
    empty = DetectorSet(np.zeros((0, 4, 2)), 0.01, 1, 4, 2)
    assert detect_abnormal(d[0], empty) == ("normal", float("inf"))
    assert detect_abnormal(d[1], ds) == ("abnormal", 0.0)
    probe = d[2].copy()
    probe[:, 0] += np.sqrt(0.01 + 1e-6)
    verdict, score = detect_abnormal(probe, ds)
    assert verdict == "normal" and score == pytest.approx(0.01 + 1e-6, rel=1e-9)
    with pytest.raises(DetectorError):
        detect_many(np.zeros((1, 3, 2)), ds)
    mean_abn, _ = detect_many(d, ds, rule="mean")
    assert mean_abn.shape == (3,)


def test_rho_calibration():
    R = np.random.default_rng(4).random((20, 4, 2))
    r1, r50 = calibrate_rho(R, 1.0), calibrate_rho(R, 50.0)
    assert 0 < r1 < r50
    F = R + 0.5
    rho = calibrate_rho_feasible(F, R, 80.0)
    kept = screen(F, R, rho).mean()
    assert kept <= 0.2 + 1e-9
    with pytest.raises(DetectorError):
        calibrate_rho(R[:1])


def test_unique_trajectories_keeps_first():
    R = np.random.default_rng(5).random((4, 3, 2))
    dup = np.concatenate([R, R[[1, 0]]])
    assert np.array_equal(unique_trajectories(dup), R)


# ------------------------------------------------------------ export/import

def test_detector_round_trip(tmp_path):
    ds = DetectorSet(np.random.default_rng(6).random((5, 4, 3)), 0.0123, 2, 4, 3, "edge", 1.7,
                     {"arch": "GCN", "eta": 0.3, "tag": "seed1", "epoch": 20})
    path = tmp_path / "det.txt"
    export_detectors(ds, path)
    back = import_detectors(path, expect=(2, 4, 3))
    assert np.array_equal(back.detectors, ds.detectors)
    assert (back.rho, back.scale, back.entity, back.provenance["tag"]) == (ds.rho, ds.scale, "edge", "seed1")
    with pytest.raises(DetectorError, match="dim"):
        import_detectors(path, expect=(2, 4, 5))
    with pytest.raises(DetectorError, match="length"):
        import_detectors(path, expect=(2, 6, 3))


@pytest.mark.parametrize("mutate", [
    lambda s: s.replace("version=1", "version=9"),
    lambda s: "\n".join(s.splitlines()[:2]),
    lambda s: s.replace("count=5", "count=6"),
    lambda s: s + "0.1 x\n",
    lambda s: "junk\n" + s,
])
def test_detector_format_errors(tmp_path, mutate):
    ds = DetectorSet(np.zeros((5, 2, 1)), 0.1, 1, 2, 1)
    path = tmp_path / "det.txt"
    export_detectors(ds, path)
    path.write_text(mutate(path.read_text()))
    with pytest.raises(DetectorError):
        import_detectors(path)


def test_short_detector_record(tmp_path):
    path = tmp_path / "det.txt"
    export_detectors(DetectorSet(np.zeros((1, 2, 2)), 0.1, 1, 2, 2), path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:4] + ["0.0 0.0 0.0"]) + "\n")
    with pytest.raises(DetectorError, match="expected 4 values"):
        import_detectors(path)


# ----------------------------------------------------------------- verdicts

def square():
    return GraphData(4, {(0, 1), (1, 2), (2, 3), (0, 3)}, np.eye(4), np.eye(2)[[0, 1, 0, 1]],
                     np.ones(4, bool), np.zeros(4, bool), np.zeros(4, bool))


def test_classify_inserted_rules():
    g = square()
    normal = {i: (False, 1.0) for i in range(4)}
    edges = {(0, 1): (True, 0.0), (1, 0): (True, 0.0), (0, 3): (False, 1.0)}
    assert classify_inserted(g, normal, edges) == []
    nodes = {**normal, 0: (True, 0.1)}
    out = classify_inserted(g, nodes, edges)
    assert [v.edge for v in out] == [(0, 1)] and out[0].verdict == "inserted"
    # both endpoints abnormal: still one verdict, with both as evidence
    nodes[1] = (True, 0.2)
    out = classify_inserted(g, nodes, edges)
    assert len(out) == 1 and out[0].evidence["abnormal_nodes"] == [0, 1]
    # abnormal node whose incident trajectories are normal: nothing flagged
    assert classify_inserted(g, {3: (True, 0.0)}, {(3, 0): (False, 1.0), (3, 2): (False, 1.0)}) == []


def test_classify_deleted_rules():
    g = square()
    calls = []

    def prober(edge):
        calls.append(edge)
        return edge == (0, 2), edge == (0, 2), {}

    assert classify_deleted(g, 0, [], 10, prober) is None
    assert classify_deleted(g, 0, [(0, 2)], 0, prober) is None and calls == []
    v = classify_deleted(g, 0, [(0, 2)], 10, prober)
    assert v.edge == (0, 2) and v.verdict == "deleted" and v.evidence["probes"] == 1
    edges_before = g.edges
    assert classify_deleted(g, 1, [(1, 3)], 10, prober) is None
    assert g.edges == edges_before


def test_deletion_candidates_two_hop_non_edges():
    g = square()
    assert deletion_candidates(g, 0, 10) == [(0, 2)]
    assert deletion_candidates(g, 0, 0) == []
    assert deletion_candidates(g, 0, 10, exclude=[(2, 0)]) == []


def trained_state(g, epochs=6):
    arch = ModelArch(layer_dims=(4, 3, 2))
    state = ModelState.initialize(arch, 0)
    cfg = TrainConfig(max_epochs=100)
    for _ in range(epochs):
        state, _, _ = train_epoch(g, state, arch, cfg)
    return state


def test_rectify_examples():
    g = random_graph(10, 0.3, 1)
    state = trained_state(g)
    g2, s2 = rectify(g, [], state, 2)
    assert g2 is g and s2.epoch == 6
    e = sorted(g.edges)[0]
    g3, s3 = rectify(g, [EdgeVerdict(e, "inserted")], state, 2)
    assert len(g3.edges) == len(g.edges) - 1 and s3.epoch == 4


def test_rectify_round_trip():
    g = random_graph(10, 0.3, 2)
    extra = next((i, j) for i in range(10) for j in range(i + 1, 10) if not g.has_edge(i, j))
    poisoned = g.with_edges(g.edges | {extra})
    fixed, _ = rectify(poisoned, [EdgeVerdict(extra, "inserted")], trained_state(poisoned), 1)
    assert fixed.edges == g.edges


def test_rectify_rejects_bad_verdicts():
    g = random_graph(10, 0.3, 3)
    state = trained_state(g)
    e = sorted(g.edges)[0]
    missing = next((i, j) for i in range(10) for j in range(i + 1, 10) if not g.has_edge(i, j))
    with pytest.raises(RectifyError, match="contradictory"):
        rectify(g, [EdgeVerdict(e, "inserted"), EdgeVerdict(e, "clean")], state, 1)
    with pytest.raises(RectifyError, match="absent"):
        rectify(g, [EdgeVerdict(missing, "inserted")], state, 1)
    with pytest.raises(RectifyError, match="present"):
        rectify(g, [EdgeVerdict(e, "deleted")], state, 1)


@given(seed=st.integers(0, 10 ** 5))
def test_rectify_cardinality(seed):
    g = random_graph(12, 0.3, seed)
    rng = np.random.default_rng(seed)
    present = [e for e in sorted(g.edges) if rng.random() < 0.3]
    absent = [(i, j) for i in range(12) for j in range(i + 1, 12) if not g.has_edge(i, j) and rng.random() < 0.1]
    state = ModelState.initialize(ModelArch(layer_dims=(4, 3, 2)), 0)
    verdicts = [EdgeVerdict(e, "inserted") for e in present] + [EdgeVerdict(e, "deleted") for e in absent]
    g2, _ = rectify(g, verdicts, state, 1)
    assert len(g2.edges) == len(g.edges) - len(present) + len(absent)
    assert not (set(present) & g2.edges) and set(absent) <= g2.edges


def test_defense_scores():
    gt = PerturbationSet(inserted=[(0, 1), (2, 3)], deleted=[(4, 5)], rate=0.1, seed=0)
    s = defense_scores({(0, 1), (6, 7)}, set(), gt)
    assert s["precision_inserted"] == 0.5 and s["recall_inserted"] == 0.5
    assert np.isnan(s["precision_deleted"]) and s["recall_deleted"] == 0.0


# ----------------------------------------------------------------- pipeline

ARCH = ModelArch(layer_dims=(8, 8, 2), activation="relu")
FAST = dict(generator_count=300, checkpoint_interval=10, generator=GeneratorConfig(steps=60))


@pytest.fixture(scope="module")
def small_graph():
    g = sbm_generate(SbmSpec(blocks=[60, 60], p_in=0.1, p_out=0.01, feature_dim=8, seed=3))
    return split_reliable(g, 0.25, seed=3)


def strip(records):
    return [{k: v for k, v in r.items() if not k.startswith("t_")} for r in records]


def test_interval_beyond_training_is_plain_training(small_graph):
    cfg = TrainConfig(learning_rate=0.3, max_epochs=15)
    res = run_pipeline(small_graph, ARCH, cfg, ImmuneConfig(**dict(FAST, checkpoint_interval=50)))
    assert res.graph.edges == small_graph.edges
    assert {r["type"] for r in res.records} == {"epoch", "final"}


def test_monitoring_is_read_only(small_graph):
    cfg = TrainConfig(learning_rate=0.3, max_epochs=25)
    off = ImmuneConfig(enabled=False)
    a = run_pipeline(small_graph, ARCH, cfg, off, monitor=True).state.params
    b = run_pipeline(small_graph, ARCH, cfg, off, monitor=False).state.params
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_snapshot_capacity_must_cover_rollback(small_graph):
    with pytest.raises(ConfigError, match="snapshot_capacity"):
        run_pipeline(small_graph, ARCH, TrainConfig(snapshot_capacity=5), ImmuneConfig(**FAST))


def test_subgraph_source_needs_reliable_nodes():
    g = random_graph(10, 0.3, 0, d=8)
    with pytest.raises(ConfigError, match="reliable"):
        run_pipeline(g, ARCH, TrainConfig(max_epochs=5), ImmuneConfig(**FAST))


def test_immune_config_validation():
    for bad in ({"varrho": 1}, {"checkpoint_interval": 0}, {"delta": 0}, {"rho": -1.0},
                {"lambda_mode": "x"}, {"rho_factor": 0}):
        with pytest.raises(ConfigError):
            ImmuneConfig(**bad)


def test_pipeline_runs_checkpoints_deterministically(small_graph):
    cfg = TrainConfig(learning_rate=0.3, max_epochs=30)
    a = run_pipeline(small_graph, ARCH, cfg, ImmuneConfig(**FAST))
    b = run_pipeline(small_graph, ARCH, cfg, ImmuneConfig(**FAST))
    cps = [r for r in a.records if r["type"] == "checkpoint"]
    assert len(cps) == 2 and all("error" not in r for r in cps)
    assert cps[0]["n_node_detectors"] > 0
    assert strip(a.records) == strip(b.records)
    assert a.graph.edges == b.graph.edges
    # NSA soundness on the produced sets
    assert a.node_detectors.rho > 0 and a.edge_detectors is not None


def test_checkpoint_failure_does_not_stop_training(small_graph, monkeypatch):
    def boom(*args, **kw):
        raise RuntimeError("boom")

    monkeypatch.setattr(pipeline_mod._Defense, "checkpoint", boom)
    res = run_pipeline(small_graph, ARCH, TrainConfig(learning_rate=0.3, max_epochs=20), ImmuneConfig(**FAST))
    cps = [r for r in res.records if r["type"] == "checkpoint"]
    assert cps and all("boom" in r["error"] for r in cps)
    assert res.records[-1]["type"] == "final" and res.state.epoch == 20


def test_imported_detectors_are_rescreened(small_graph):
    cfg = TrainConfig(learning_rate=0.3, max_epochs=20)
    src = run_pipeline(small_graph, ARCH, cfg, ImmuneConfig(**FAST))
    det = (src.node_detectors, src.edge_detectors)
    res = run_pipeline(small_graph, ARCH, TrainConfig(learning_rate=0.3, max_epochs=20, seed=1),
                       ImmuneConfig(**FAST, rescreen_imported=True), detectors=det)
    cp = [r for r in res.records if r["type"] == "checkpoint"][0]
    kept = cp["imported_kept"]
    assert kept[0] <= len(det[0]) and kept[1] <= len(det[1])
    bad = DetectorSet(np.zeros((1, 3, 8)), 0.1, 1, 3, 8)
    with pytest.raises(DetectorError):
        run_pipeline(small_graph, ARCH, cfg, ImmuneConfig(**FAST), detectors=(bad, bad))


def test_exogenous_source(small_graph):
    from ftimmune.immune import ExogenousSource
    other = split_reliable(sbm_generate(SbmSpec(blocks=[60, 60], p_in=0.1, p_out=0.01, feature_dim=8, seed=9)),
                           0.25, seed=9)
    res = run_pipeline(small_graph, ARCH, TrainConfig(learning_rate=0.3, max_epochs=20), ImmuneConfig(**FAST),
                       reliable_source=ExogenousSource(other, seed=9))
    cp = [r for r in res.records if r["type"] == "checkpoint"][0]
    assert cp["reliable_nodes"] == 120 and "error" not in cp
