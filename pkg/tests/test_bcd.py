import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liftnet.arch import ArchitectureSpec, EdgeKind, fig2_spec, init_weights
from liftnet.bcd import (TrainConfig, TrainingError, TrainTrace, convergence_report,
                         hidden_nnz_fraction, nnz_fractions, read_trace_csv, theta, train)
from liftnet.data import make_synthetic

L, I = EdgeKind.LEARNABLE, EdgeKind.IDENTITY


def tiny():
    data = make_synthetic(20, 4, 2, seed=0)
    spec = ArchitectureSpec((4, 5, 2), (((0, L),),))
    return data, spec


def test_theta_examples():
    assert theta(1, 2) == 0.25
    assert theta(1, 2, offset=0) == 1.0
    vals = [theta(t, 2) for t in range(1, 200)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    for bad in [(1, 1.0), (0, 2), (1, 2, -1)]:
        with pytest.raises(ValueError):
            theta(*bad)


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_theta_tail_sums_below_integral_bound(p):
    # with theta_k = (k+1)^-p, theta/(1-theta) = 1/(s^p - 1) for s = k+1, and the
    # tail from k=t is bounded by the term at t plus the integral from s=t+1
    T = 200000
    k = np.arange(1, T + 1, dtype=float)
    w = 1.0 / ((k + 1) ** p - 1.0)
    tails = np.cumsum(w[::-1])[::-1]
    for t in [1, 2, 5, 10, 50, 100]:
        s = t + 1.0
        integral = (s ** p - 1) ** (1 / p - 1) / (p - 1)
        assert tails[t - 1] <= w[t - 1] + integral
    assert np.all(np.diff(tails) < 0)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(schedule_power=1.0)
    with pytest.raises(ValueError):
        TrainConfig(max_epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(radius=0.0)


def test_tiny_run_monotone_after_iteration_two():
    data, spec = tiny()
    W, trace = train(data, spec, TrainConfig(max_epochs=50, u_tol=1e-10, w_tol=1e-10,
                                             max_iter=20000))
    f = trace.objective
    assert len(trace) == 50 and np.all(np.isfinite(f))
    assert np.all(np.diff(f[1:]) <= 1e-9)
    assert f[-1] < trace.initial_objective
    rep = convergence_report(trace, p=2.0)
    assert rep.dominated and np.isfinite(rep.constant)
    assert np.all(rep.observed_tail <= rep.bound_tail + 1e-12)


def test_theta_zero_changes_nothing():
    data, spec = tiny()
    init = init_weights(spec, 0, 0.01)
    W, trace = train(data, spec, TrainConfig(max_epochs=5, theta_fn=lambda t: 0.0), init=init)
    assert np.array_equal(W.hidden[(1, 0)], init.hidden[(1, 0)])
    assert np.array_equal(W.classifier, init.classifier)
    assert np.all(trace.total_delta() == 0)


def test_runs_are_bit_identical(tmp_path):
    data = make_synthetic(60, 6, 3, seed=1)
    spec = fig2_spec(6, input_dim=6, classes=3)
    cfg = TrainConfig(max_epochs=8)
    _, a = train(data, spec, cfg)
    _, b = train(data, spec, cfg)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_sparse_run_keeps_rows_in_ball():
    data = make_synthetic(40, 6, 3, seed=2)
    spec = fig2_spec(6, input_dim=6, classes=3)
    W, trace = train(data, spec, TrainConfig(max_epochs=6, sparse=True, init_scale=0.5))
    for w in W.hidden.values():
        assert np.all(np.abs(w).sum(axis=1) <= 1 + 1e-10)
    assert "nnz_W1_0" in trace.columns and "nnz_V" in trace.columns


def test_trace_csv_round_trip(tmp_path):
    data, spec = tiny()
    _, trace = train(data, spec, TrainConfig(max_epochs=3))
    trace.to_csv(tmp_path / "t.csv")
    back = read_trace_csv(tmp_path / "t.csv")
    assert back.columns == trace.columns
    assert np.array_equal(back.objective, trace.objective)
    trace.to_csv(tmp_path / "s.csv", with_timing=True)
    header = (tmp_path / "s.csv").read_text().splitlines()[0].split(",")
    assert header[:7] == ["iter", "objective", "du", "dV", "dW", "theta", "seconds"]
    trace.timing_to_csv(tmp_path / "time.csv")
    assert (tmp_path / "time.csv").read_text().startswith("iter,seconds\n1,")


def test_zero_epochs():
    data, spec = tiny()
    W, trace = train(data, spec, TrainConfig(max_epochs=0))
    assert len(trace) == 0 and np.isfinite(trace.initial_objective)


def test_rejects_mismatched_data():
    data, _ = tiny()
    with pytest.raises(ValueError):
        train(data, ArchitectureSpec((5, 3, 2), (((0, L),),)), TrainConfig(max_epochs=1))


def test_rising_objective_aborts_with_diagnostics(monkeypatch):
    data, spec = tiny()
    # a V-solver that pushes V away from the data makes the objective climb
    monkeypatch.setattr("liftnet.bcd.solvers.solve_v_subproblem",
                        lambda batch, V, theta, wd=0.0: V + 1e3 / theta)
    with pytest.raises(TrainingError, match="5 consecutive") as err:
        train(data, spec, TrainConfig(max_epochs=30))
    e = err.value
    assert len(e.trace) == 5 + (e.trace.objective[0] <= e.trace.initial_objective)
    assert len(e.diagnostics["objective"]) == 6
    assert e.weights is not None


def test_callback_sees_every_iteration():
    data, spec = tiny()
    calls = []
    train(data, spec, TrainConfig(max_epochs=7), callback=lambda t, b, W: calls.append(t))
    assert calls == list(range(1, 8))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_objective_aborts():
    data, spec = tiny()
    init = init_weights(spec, 0).replace(classifier=np.full((2, 5), 1e308))
    with pytest.raises(TrainingError) as err:
        train(data, spec, TrainConfig(max_epochs=3, theta_fn=lambda t: 0.0), init=init)
    assert err.value.trace is not None and len(err.value.trace) == 1


def test_strict_solvers_raise():
    data, spec = tiny()
    with pytest.raises(TrainingError, match="sub-solver"):
        train(data, spec, TrainConfig(max_epochs=2, max_iter=1, u_tol=1e-14,
                                      strict_solvers=True))


def test_convergence_report_constructed():
    def fake(deltas):
        tr = TrainTrace()
        for t, d in enumerate(deltas, start=1):
            tr.append({"iter": t, "objective": 0.0, "du": d, "dV": 0.0, "dW": 0.0,
                       "theta": theta(t, 2.0)}, 0.0)
        return tr

    rep = convergence_report(fake([0.0] * 12))
    assert rep.dominated and rep.constant == 0.0
    ths = np.array([theta(t, 2.0) for t in range(1, 13)])
    rep = convergence_report(fake(ths / (1 - ths)), p=2.0)
    assert rep.dominated and rep.constant == pytest.approx(1.0)
    with pytest.raises(ValueError):
        convergence_report(fake([0.0] * 5))


def test_nnz_fractions():
    spec = fig2_spec(4, input_dim=4, classes=2)
    W = init_weights(spec, 0, 1.0)
    z = W.replace(hidden={k: np.zeros_like(w) for k, w in W.hidden.items()})
    assert hidden_nnz_fraction(W) == 1.0 and hidden_nnz_fraction(z) == 0.0
    fr = nnz_fractions(z)
    assert fr["V"] == 1.0 and fr["W1_0"] == 0.0 and set(fr) == {"W1_0", "W2_1", "W3_2", "V"}
    tiny_w = W.replace(hidden={k: np.full_like(w, 1e-7) for k, w in W.hidden.items()})
    assert hidden_nnz_fraction(tiny_w) == 0.0


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_iterates_stay_feasible(seed):
    data = make_synthetic(15, 3, 2, seed=seed)
    spec = ArchitectureSpec((3, 3, 3, 2), (((0, L),), ((0, I), (1, L))))
    seen = []
    train(data, spec, TrainConfig(max_epochs=4, seed=seed),
          callback=lambda t, b, W: seen.append(b.violations(x=data.features)))
    assert seen == [[]] * 4
