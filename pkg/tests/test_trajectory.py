import numpy as np
import pytest
from hypothesis import given, strategies as st

from ftimmune.graph import GraphData, build_laplacian, reduced_laplacian
from ftimmune.models import ModelArch, ModelState, TrainConfig, train
from ftimmune.trajectory import (DirectionVector, TrajectoryBuffer, TrajectoryError, TrajectoryMonitor,
                                 dump_trajectories, edge_direction_gat, edge_direction_gcn,
                                 edge_direction_sage, exact_mse_rows, householder_to_axis, load_trajectories,
                                 mse_matrix, node_direction, normalize, normalize_array, trajectory_mse)

from conftest import random_graph


def monitored(g, arch, epochs=10, seed=0):
    mon = TrajectoryMonitor(g, arch)
    train(g, arch, TrainConfig(max_epochs=epochs, seed=seed), observers=[mon])
    return mon


def test_gcn_direction_zero_step():
    g = random_graph(5, 0.6, 1)
    L = build_laplacian(g)
    e = next(iter(g.edges))
    d = edge_direction_gcn(g.features, np.zeros((4, 3)), reduced_laplacian(L, g, e), e[1])
    assert np.array_equal(d.vector, np.zeros(3))


def test_gcn_direction_two_node_oracle():
    X = np.array([[1.0, 0.0], [0.0, 2.0]])
    g = GraphData(2, {(0, 1)}, X, np.eye(2), np.ones(2, bool), np.zeros(2, bool), np.zeros(2, bool))
    dW = np.array([[1.0, -1.0], [0.5, 0.5]])
    R = reduced_laplacian(build_laplacian(g), g, (0, 1))
    d = edge_direction_gcn(X, dW, R, 1)
    # the edge carries half of node 0's row into node 1
    assert np.allclose(d.vector, 0.5 * X[0] @ dW, atol=1e-15)


def test_gcn_direction_shape_mismatch():
    g = random_graph(4, 0.8, 0)
    R = reduced_laplacian(build_laplacian(g), g, next(iter(g.edges)))
    with pytest.raises(TrajectoryError):
        edge_direction_gcn(g.features, np.zeros((5, 2)), R, 0)


@given(n=st.integers(2, 50), p=st.floats(0.05, 0.4), seed=st.integers(0, 10 ** 5))
def test_node_direction_is_sum_of_edge_directions(n, p, seed):
    g = random_graph(n, p, seed)
    arch = ModelArch(layer_dims=(4, 3, 2))
    mon = monitored(g, arch, seed=seed)
    node_dirs = np.diff(mon.node_positions(), axis=1)
    total = mon.self_directions().copy()
    np.add.at(total, mon.dir_dst, mon.edge_directions())
    assert np.max(np.abs(node_dirs - total)) <= 1e-9


def test_node_direction_helpers():
    assert np.array_equal(node_direction([], dim=3).vector, np.zeros(3))
    with pytest.raises(TrajectoryError):
        node_direction([])
    dirs = [DirectionVector(0, 1, np.eye(3)[k]) for k in range(3)]
    assert np.array_equal(node_direction(dirs).vector, np.ones(3))
    with pytest.raises(TrajectoryError):
        DirectionVector(0, 1, np.array([np.nan]))


def test_star_centre_collects_every_leaf():
    n = 5
    g = GraphData(n, {(0, k) for k in range(1, n)}, np.random.default_rng(0).standard_normal((n, 4)),
                  np.eye(2)[np.arange(n) % 2], np.ones(n, bool), np.zeros(n, bool), np.zeros(n, bool))
    mon = monitored(g, ModelArch(layer_dims=(4, 3, 2)), epochs=4)
    into_centre = mon.dir_dst == 0
    assert into_centre.sum() == n - 1
    total = mon.edge_directions()[into_centre].sum(axis=0) + mon.self_directions()[0]
    assert np.allclose(total, np.diff(mon.node_positions()[0], axis=0), atol=1e-12)


def test_gat_direction_examples():
    z = np.array([1.0, -2.0])
    W = np.array([[1.0, 2.0, 3.0], [0.0, 1.0, -1.0]])
    assert np.array_equal(edge_direction_gat([1.0], [W], z), z @ W)
    assert np.allclose(edge_direction_gat([0.3, 0.3], [W, -W], z), 0.0)


def sage_setup():
    g = random_graph(6, 0.6, 4)
    arch = ModelArch(kind="SAGE", layer_dims=(4, 3, 2))
    return g, arch, ModelState.initialize(arch, 0)


def test_sage_single_neighbour():
    X = np.random.default_rng(1).standard_normal((2, 4))
    g = GraphData(2, {(0, 1)}, X, np.eye(2), np.ones(2, bool), np.zeros(2, bool), np.zeros(2, bool))
    arch = ModelArch(kind="SAGE", layer_dims=(4, 3, 2))
    state = ModelState.initialize(arch, 0)
    d = edge_direction_sage(g, state, arch, 0, 1, 1, X)
    assert np.allclose(d, X[1] @ state.params["Wn1"], atol=1e-15)


def test_sage_direction_is_linear():
    g, arch, state = sage_setup()
    i, j = next(iter(g.edges))
    rng = np.random.default_rng(2)
    z1, z2 = rng.standard_normal((2, 6, 4))
    lhs = edge_direction_sage(g, state, arch, i, j, 1, z1 + 2.5 * z2)
    rhs = edge_direction_sage(g, state, arch, i, j, 1, z1) + 2.5 * edge_direction_sage(g, state, arch, i, j, 1, z2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_sage_direction_needs_neighbour():
    g, arch, state = sage_setup()
    missing = next((i, j) for i in range(6) for j in range(6) if i != j and not g.has_edge(i, j))
    with pytest.raises(TrajectoryError):
        edge_direction_sage(g, state, arch, *missing, 1, g.features)


@pytest.mark.parametrize("kind", ["GCN", "SAGE", "GAT"])
def test_monitor_shapes_and_edge_origin(kind):
    g = random_graph(12, 0.3, 3)
    arch = ModelArch(kind=kind, layer_dims=(4, 3, 2), num_heads=2 if kind == "GAT" else 1)
    mon = monitored(g, arch, epochs=7)
    E = len(g.edges)
    assert len(mon) == 7 and list(mon.epochs) == list(range(7))
    assert mon.node_positions().shape == (12, 7, 3)
    assert mon.edge_directions().shape == (2 * E, 6, 3)
    pos = mon.edge_positions()
    assert np.array_equal(pos[:, 0], np.zeros((2 * E, 3)))
    assert np.allclose(np.diff(pos, axis=1), mon.edge_directions())
    src, dst = mon.directed_edges()[0]
    buf = mon.edge_buffer(src, dst, length=4)
    assert len(buf) == 4 and buf.entity == ("edge", (src, dst))


def test_sage_node_direction_decomposes():
    g, arch, _ = sage_setup()
    mon = monitored(g, arch, epochs=6)
    total = mon.self_directions().copy()
    np.add.at(total, mon.dir_dst, mon.edge_directions())
    assert np.allclose(total, np.diff(mon.node_positions(), axis=1), atol=1e-10)


def test_monitor_history_management():
    g = random_graph(10, 0.3, 1)
    mon = monitored(g, ModelArch(layer_dims=(4, 3, 2)), epochs=8)
    twin = mon.fork()
    mon.truncate_from(5)
    assert list(mon.epochs) == [0, 1, 2, 3, 4] and len(twin) == 8
    mon.reset_nodes([2], 3)
    assert list(mon.window_valid(np.array([1, 2]), 3)) == [True, False]
    assert not mon.window_valid(np.array([1]), 9)[0]
    with pytest.raises(TrajectoryError):
        mon.edge_buffer(0, 0)


def test_normalization_worked_example():
    P = np.array([[[1.0, 1.0], [2.0, 3.0], [4.0, 5.0]]])
    Q, deg, scale = normalize_array(P, scale=1.0)
    assert not deg[0]
    assert np.allclose(Q[0, 0], 0.0) and np.allclose(Q[0, -1], [5.0, 0.0], atol=1e-12)
    # reflection keeps distances from the origin
    assert np.linalg.norm(Q[0, 1]) == pytest.approx(np.sqrt(5.0), abs=1e-12)
    Q, _, scale = normalize_array(P)
    assert scale == pytest.approx(5.0) and np.allclose(Q[0, -1], [1.0, 0.0])


def test_constant_trajectory_is_degenerate():
    P = np.ones((1, 4, 3))
    Q, deg, _ = normalize_array(P)
    assert deg[0] and np.array_equal(Q[0], np.zeros((4, 3)))
    assert normalize([np.ones((4, 3))])[0].degenerate


def test_normalization_needs_two_points():
    with pytest.raises(TrajectoryError):
        normalize_array(np.zeros((2, 1, 3)))
    assert normalize([]) == []


def test_householder_maps_to_axis():
    v = np.array([3.0, -4.0, 12.0])
    H = householder_to_axis(v)
    assert np.allclose(H @ v, [13.0, 0, 0]) and np.allclose(H @ H.T, np.eye(3))
    assert np.array_equal(householder_to_axis(np.array([2.0, 0.0])), np.eye(2))


arrays = st.integers(0, 10 ** 6).map(
    lambda s: np.random.default_rng(s).standard_normal((int(3 + s % 5), int(2 + s % 4), int(1 + s % 3))))


@given(P=arrays)
def test_normalization_invariants(P):
    Q, deg, scale = normalize_array(P)
    assert np.all(Q[:, 0] == 0)
    assert np.all(Q >= 0) and Q.max() <= 1 + 1e-12
    ends = np.linalg.norm(P[:, -1] - P[:, 0], axis=1) / scale
    ok = ~deg
    assert np.allclose(Q[ok, -1, 0], ends[ok]) and np.allclose(Q[ok, -1, 1:], 0)
    Q2, _, _ = normalize_array(Q)
    assert np.allclose(Q2, Q, atol=1e-12)


@given(P=arrays, shift=st.floats(-100, 100))
def test_normalization_translation_invariant(P, shift):
    assert np.allclose(normalize_array(P)[0], normalize_array(P + shift)[0], atol=1e-9)


@given(A=arrays)
def test_mse_properties(A):
    B = A[::-1] * 0.5
    M = mse_matrix(A, B)
    assert M.shape == (len(A), len(B)) and np.all(M >= 0)
    for i in range(len(A)):
        assert trajectory_mse(A[i], A[i]) == 0
        assert trajectory_mse(A[i], B[0]) == pytest.approx(trajectory_mse(B[0], A[i]))
        assert M[i, 0] == pytest.approx(trajectory_mse(A[i], B[0]), abs=1e-9)
    idx = np.arange(len(A))
    assert np.allclose(exact_mse_rows(A, B, idx, idx), np.diag(M), atol=1e-9)


def test_mse_shape_mismatch():
    with pytest.raises(TrajectoryError):
        trajectory_mse(np.zeros((3, 2)), np.zeros((4, 2)))


def test_buffer_validation():
    with pytest.raises(TrajectoryError):
        TrajectoryBuffer(("node", 0), 1, np.zeros((3, 2)), [0, 2, 1])
    with pytest.raises(TrajectoryError):
        TrajectoryBuffer(("node", 0), 1, np.zeros((3, 2)), [0, 1])
    b = TrajectoryBuffer(("node", 0), 1, np.arange(8.0).reshape(4, 2), [0, 1, 2, 3])
    assert len(b.tail(2)) == 2 and b.directions().shape == (3, 2)


def test_dump_load_round_trip(tmp_path):
    g = random_graph(8, 0.4, 2)
    mon = monitored(g, ModelArch(layer_dims=(4, 3, 2)), epochs=5)
    src, dst = mon.directed_edges()[0]
    bufs = [mon.node_buffer(0), mon.node_buffer(3), mon.edge_buffer(src, dst)]
    path = tmp_path / "traj.txt"
    dump_trajectories(path, bufs)
    back = load_trajectories(path)
    assert [b.entity for b in back] == [b.entity for b in bufs]
    for a, b in zip(bufs, back):
        assert np.array_equal(a.points, b.points) and np.array_equal(a.epochs, b.epochs)
    path.write_text("garbage\n")
    with pytest.raises(TrajectoryError):
        load_trajectories(path)
