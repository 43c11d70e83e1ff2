import numpy as np
import pytest
import scipy.sparse as sp

from fracflow.assembly import ContinuumSpec, CouplingSpec, assemble_system
from fracflow.geometry import build_grid
from fracflow.nlmc import (
    AssemblyConsistencyError,
    assemble_coarse,
    average_fine_to_coarse,
    build_coarse_grid,
    build_nlmc,
    compute_bases,
    fracture_coarse_cells,
    layer_energy_fraction,
    load_basis_cache,
    local_problem,
    run_coarse,
    save_basis_cache,
    solve_basis,
)
from fracflow.timestepping import check_stability_condition, make_split, run

from conftest import three_continua, two_continua


def single(n=4, k=1.0, c=1.0):
    return assemble_system(build_grid(n, n, 1.0 / n), None, [ContinuumSpec(1, "matrix", c, k)])


def test_coarse_grid_layout(sys2):
    cg = build_coarse_grid(sys2, 4, 4, m=1)
    assert cg.n_cells == 16
    assert cg.H == pytest.approx((0.25, 0.25))
    assert cg.sizes[0] == 16
    fm = sys2.setup.fracture_mesh
    assert cg.sizes[1] == len(np.unique(fracture_coarse_cells(sys2.setup.grid, fm, 4, 4)))
    P = cg.prolongation_pattern(sys2.sizes)
    # K_i^a partition every continuum's fine dofs
    np.testing.assert_array_equal(np.asarray(P.sum(axis=0)).ravel(), 1.0)
    np.testing.assert_array_equal(np.asarray(P[:16].sum(axis=1)).ravel(), 4.0)


def test_fracture_cells_follow_host_coarse_cell(sys2):
    g, fm = sys2.setup.grid, sys2.setup.fracture_mesh
    cc = fracture_coarse_cells(g, fm, 2, 2)
    mids = fm.midpoints
    expect = (np.minimum(mids[:, 1] // 0.5, 1) * 2 + np.minimum(mids[:, 0] // 0.5, 1)).astype(int)
    on_line = np.isclose(mids % 0.5, 0).any(axis=1)
    np.testing.assert_array_equal(cc[~on_line], expect[~on_line])


def test_oversampled_region_clipping():
    cg = build_coarse_grid(single(4), 2, 2, m=1)
    for i in range(4):
        assert sorted(cg.oversampled(i)) == [0, 1, 2, 3]
    cg = build_coarse_grid(single(10), 5, 5, m=1)
    assert sorted(cg.oversampled(0)) == [0, 1, 5, 6]
    assert len(cg.oversampled(12)) == 9


def test_non_divisible_rejected():
    with pytest.raises(ValueError):
        build_coarse_grid(single(10), 3, 3)
    with pytest.raises(ValueError):
        build_coarse_grid(single(4), 2, 2, m=0)


def test_benchmark_coarse_matrix_dofs():
    sys_ = single(200)
    cg = build_coarse_grid(sys_, 20, 20)
    assert cg.n_dofs == 400
    assert np.all(np.bincount(cg.cell_of[0]) == 100)
    assert build_coarse_grid(sys_, 40, 40).n_dofs == 1600


def _dense_basis_oracle(sys_, cg, i):
    """Dense saddle solve on all fine dofs (K_i^+ = domain), constraints built from scratch."""
    A = (sys_.D + sys_.Q).toarray()
    n = sys_.n
    rows, rhs = [], []
    owner = np.repeat(np.arange(sys_.L), sys_.sizes)
    cmap = np.concatenate(cg.cell_of)
    for a in range(sys_.L):
        for j in cg.cells[a]:
            mask = (owner == a) & (cmap == j)
            r = np.where(mask, sys_.measure, 0.0)
            rows.append(r / r.sum())
            rhs.append((a, j))
    C = np.array(rows)
    K = np.block([[A, C.T], [C, np.zeros((len(rows), len(rows)))]])
    out = []
    for t in range(sys_.L):
        if cg.local_index[t][i] < 0:
            continue
        b = np.zeros(n + len(rows))
        b[n + rhs.index((t, i))] = 1.0
        out.append(np.linalg.solve(K, b)[:n])
    return np.array(out).T


def test_basis_matches_dense_oracle_single_continuum():
    sys_ = single(4)
    cg = build_coarse_grid(sys_, 2, 2, m=1)
    R = compute_bases(sys_, cg, threads=1)
    for i in range(4):
        np.testing.assert_allclose(R[i].toarray().ravel(), _dense_basis_oracle(sys_, cg, i)[:, 0], atol=1e-10)


def test_basis_matches_dense_oracle_two_continua():
    sys_ = two_continua(n=4, wells=False, segments=[[0.1, 0.3, 0.9, 0.6]])
    cg = build_coarse_grid(sys_, 2, 2, m=1)
    R = compute_bases(sys_, cg, threads=1).toarray()
    for i in range(4):
        ref = _dense_basis_oracle(sys_, cg, i)
        for col, a in enumerate(t for t in range(2) if cg.local_index[t][i] >= 0):
            np.testing.assert_allclose(R[cg.coarse_dof(a, i)], ref[:, col], atol=1e-10 * np.abs(ref).max())


def test_constraints_hold_for_every_basis(sys3):
    cg = build_coarse_grid(sys3, 4, 4, m=1)
    for i in range(cg.n_cells):
        prob = local_problem(sys3, cg, i)
        np.testing.assert_allclose(np.asarray(prob.C.sum(axis=1)).ravel(), 1.0)
        psi = solve_basis(prob)
        n = prob.dofs.size
        for t, a in enumerate(prob.targets):
            got = prob.C @ psi[:, t]
            want = np.array([1.0 if key == (a, i) else 0.0 for key in prob.keys])
            assert np.abs(got - want).max() <= 1e-8
        assert np.abs(prob.rhs[n:]).sum() == len(prob.targets)


def test_exterior_dofs_are_zero():
    sys_ = single(12)
    cg = build_coarse_grid(sys_, 6, 6, m=1)
    R = compute_bases(sys_, cg, threads=1)
    inside = np.isin(cg.cell_of[0], cg.oversampled(0))
    assert np.all(R[0].toarray().ravel()[~inside] == 0.0)


def test_global_support_gives_constant_kernel():
    sys_ = single(8, k=3.0)
    space = build_nlmc(sys_, 4, 4, m=4, threads=1)
    assert np.abs(space.Dbar @ np.ones(16)).max() <= 1e-10 * abs(space.Dbar).max()


def test_coarse_mass_is_c_times_measure(sys2):
    space = build_nlmc(sys2, 4, 4, m=1, threads=1)
    M = space.system.M
    assert (M - sp.diags(M.diagonal())).count_nonzero() == 0
    np.testing.assert_allclose(M.diagonal()[:16], 0.1 * 0.25 ** 2)
    fm = sys2.setup.fracture_mesh
    cc = fracture_coarse_cells(sys2.setup.grid, fm, 4, 4)
    frac_len = np.bincount(cc, weights=fm.length, minlength=16)[space.cgrid.cells[1]]
    np.testing.assert_allclose(M.diagonal()[16:], 1.0 * frac_len)


def test_zero_sigma_zero_exchange():
    sys_ = two_continua(sigma=0.0, wells=False)
    for exchange in ("galerkin", "direct"):
        space = build_nlmc(sys_, 4, 4, m=1, threads=1, exchange=exchange)
        assert abs(space.system.Q).max() == 0.0


def test_coarse_operator_symmetric_and_psd(sys3):
    space = build_nlmc(sys3, 4, 4, m=2, threads=1)
    A = space.system.A
    assert abs(A - A.T).max() <= 1e-10 * abs(A).max()
    rng = np.random.default_rng(0)
    for v in rng.standard_normal((20, A.shape[0])):
        assert v @ (A @ v) >= -1e-10 * abs(A).max() * (v @ v)


def test_conservative_form_has_constant_kernel(sys2):
    space = build_nlmc(sys2.without_wells(), 4, 4, m=1, threads=1)
    A = space.system.A
    assert np.abs(A @ np.ones(A.shape[0])).max() <= 1e-10 * abs(A).max()
    literal = build_nlmc(sys2.without_wells(), 4, 4, m=1, threads=1, conservative=False)
    assert abs(literal.system.D - literal.Dbar).max() == 0


def test_direct_and_projected_exchange_agree(sys3):
    space = build_nlmc(sys3, 4, 4, m=1, threads=1, exchange="direct")
    P = space.P
    for name, fine in (("Q", sys3.Q), ("W", sys3.W)):
        proj = (P @ fine @ P.T).toarray()
        np.testing.assert_allclose(proj, space.direct[name].toarray(), atol=1e-12 * np.abs(proj).max())


def test_cross_check_detects_inconsistent_bases(sys2):
    cg = build_coarse_grid(sys2, 4, 4, m=1)
    R = compute_bases(sys2, cg, threads=1)
    with pytest.raises(AssemblyConsistencyError):
        assemble_coarse(sys2, cg, 1.01 * R)
    assemble_coarse(sys2, cg, 1.01 * R, check=False)


def test_average_fine_to_coarse():
    sys_ = single(8)
    cg = build_coarse_grid(sys_, 2, 2, m=1)
    np.testing.assert_allclose(average_fine_to_coarse(np.full(64, 3.0), cg, sys_.measure), 3.0)
    x = sys_.setup.grid.centers()[:, 0]
    got = average_fine_to_coarse(x, cg, sys_.measure)
    oracle = [x[cg.cell_of[0] == j].mean() for j in range(4)]
    np.testing.assert_allclose(got, oracle)
    np.testing.assert_allclose(got, [0.25, 0.75, 0.25, 0.75])


def test_empty_fracture_cells_emit_no_dofs():
    sys_ = two_continua(n=8, segments=[[0.05, 0.05, 0.2, 0.2]])
    cg = build_coarse_grid(sys_, 4, 4, m=1)
    assert cg.sizes[1] == 1
    assert cg.coarse_dof(1, 5) == -1


def test_decoupled_equals_coupled_when_blocks_vanish():
    sys_ = two_continua(sigma=0.0)
    space = build_nlmc(sys_, 4, 4, threads=1)
    assert abs(space.system.block(space.system.A, 0, 1)).max() == 0
    ref = run_coarse(space, "coupled", 0.01, 4, tol=1e-12)
    for kind in ("d", "l", "u"):
        rec = run_coarse(space, kind, 0.01, 4, tol=1e-12)
        assert np.abs(rec.snapshots - ref.snapshots).max() <= 1e-10 * np.abs(ref.snapshots).max()


def test_constant_trajectory_without_sources(sys2):
    space = build_nlmc(sys2.without_wells(), 4, 4, m=1, threads=1)
    rec = run_coarse(space, "coupled", 0.01, 3)
    np.testing.assert_allclose(rec.snapshots, 1.0, rtol=1e-10)


@pytest.mark.parametrize("kind", ["coupled", "d", "l", "u"])
def test_coarse_energy_decay(sys3, kind):
    space = build_nlmc(sys3.without_wells(), 4, 4, m=2, threads=1)
    c = space.system
    p0 = np.random.default_rng(5).standard_normal(c.n)
    a = run(c, kind, 0.01, 10, p0=p0, tol=1e-12).anorms
    assert np.all(a[1:] <= a[:-1] + 1e-8 * a[0])
    assert check_stability_condition(make_split(c, kind))[0]


@pytest.mark.parametrize("m", [2, 3])
def test_basis_decay_homogeneous(m):
    sys_ = single(28)
    cg = build_coarse_grid(sys_, 7, 7, m=m)
    assert layer_energy_fraction(sys_, cg, 24) < 0.10


def test_cache_round_trip(tmp_path, sys2):
    cg = build_coarse_grid(sys2, 4, 4, m=1)
    R = compute_bases(sys2, cg, threads=1)
    path = tmp_path / "b.bin"
    save_basis_cache(path, R)
    raw = path.read_bytes()
    assert raw[:8] == b"FFNLMC01"
    back = load_basis_cache(path)
    assert (back != R).nnz == 0
    with pytest.raises(ValueError):
        (tmp_path / "bad.bin").write_bytes(b"nonsense" * 8)
        load_basis_cache(tmp_path / "bad.bin")


def test_build_with_cache_reuses_bases(tmp_path, sys2):
    a = build_nlmc(sys2, 4, 4, m=1, threads=1, cache_dir=tmp_path)
    files = list(tmp_path.glob("nlmc_*.bin"))
    assert len(files) == 1
    stamp = files[0].stat().st_mtime_ns
    b = build_nlmc(sys2, 4, 4, m=1, threads=1, cache_dir=tmp_path)
    assert files[0].stat().st_mtime_ns == stamp
    assert abs(a.system.A - b.system.A).max() == 0
    build_nlmc(sys2, 4, 4, m=2, threads=1, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("nlmc_*.bin"))) == 2


def test_threads_do_not_change_bases(sys2, monkeypatch):
    cg = build_coarse_grid(sys2, 4, 4, m=1)
    one = compute_bases(sys2, cg, threads=1)
    monkeypatch.setenv("FRACFLOW_THREADS", "3")
    many = compute_bases(sys2, cg)
    assert (one != many).nnz == 0
