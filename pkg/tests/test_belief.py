import numpy as np
import pytest

from delaybelief.belief import (
    DFBT, DFBTBelief, DFBTConfig, Normalizer, OracleBelief, RecursiveBelief, RecursiveConfig,
    RecursiveModel, belief_error, dfbt_forward, dfbt_loss, evaluate_belief, full_windows,
    masked_loss, one_step_error, recursive_forecast, recursive_loss, split_dataset, train_dfbt,
    train_recursive, write_belief_csv,
)
from delaybelief.delay import AugmentedState, DelaySpec, tokenize, trajectory_windows
from delaybelief.envs import (
    MassSpringDamper, Pendulum, RandomPolicy, collect_dataset, msd_policy_mix, rollout,
)
from delaybelief.numcore import DArray, grad_check_params, make_generator


def _tiny(delta=6, ds=2, da=1, gaussian=False, layers=1, hidden=8, dropout=0.0, seed=0):
    cfg = DFBTConfig(ds, da, delta, n_layers=layers, hidden=hidden, n_heads=2,
                     attn_dropout=dropout, resid_dropout=dropout, hidden_dropout=dropout,
                     gaussian_head=gaussian)
    return DFBT(cfg, Normalizer.identity(ds, da), make_generator(seed, "init"))


@pytest.fixture(scope="module")
def msd_data():
    env = MassSpringDamper()
    ds = collect_dataset(env, msd_policy_mix(env), 6000, seed=11)
    return env, ds


# ------------------------------------------------------------------ DFBT


def test_causality_probe():
    model = _tiny(delta=8, layers=2, hidden=16)
    rng = np.random.default_rng(0)
    for _ in range(100):
        tok = rng.normal(size=(1, 8, 4))
        i = int(rng.integers(0, 7))
        pert = tok.copy()
        pert[0, i + 1:] = rng.normal(size=pert[0, i + 1:].shape) * 10
        a, b = model.predict(tok), model.predict(pert)
        assert a[0, :i + 1].tobytes() == b[0, :i + 1].tobytes()


def test_delta_one_single_prediction_and_no_collapse():
    model = _tiny(delta=1)
    ts = tokenize(AugmentedState(np.array([0.3, -0.1]), np.array([[0.5]]), np.array([1.0]), 1), 1)
    assert dfbt_forward(model, ts).shape == (1, 2)
    model = _tiny(delta=4, hidden=16)
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 4, 4))
    assert not np.allclose(model.predict(x), model.predict(y))


def test_dfbt_forward_masks_and_shape_errors():
    model = _tiny(delta=5)
    aug = AugmentedState(np.zeros(2), np.ones((3, 1)), np.zeros(3), 3)
    out = dfbt_forward(model, tokenize(aug, 5))
    assert out.shape == (5, 2) and np.all(out[3:] == 0)
    with pytest.raises(ValueError):
        model.predict(np.zeros((1, 6, 4)))


def test_dropout_only_in_train_mode():
    model = _tiny(dropout=0.5, hidden=16)
    tok = np.random.default_rng(2).normal(size=(3, 6, 4))
    a, _ = model.forward(tok, train=False)
    b, _ = model.forward(tok, train=False)
    c, _ = model.forward(tok, train=True, rng=make_generator(0, "d"))
    assert np.array_equal(a.data, b.data) and not np.allclose(a.data, c.data)


def test_mse_zero_on_perfect_prediction():
    t = np.random.default_rng(0).normal(size=(4, 3, 2))
    assert masked_loss(DArray(t), None, t, np.ones((4, 3))).item() == 0.0


def test_nll_unit_sigma_is_half_mse_plus_constant():
    rng = np.random.default_rng(3)
    mean, target = rng.normal(size=(5, 4, 3)), rng.normal(size=(5, 4, 3))
    mask = (rng.random((5, 4)) > 0.3).astype(float)
    mse = masked_loss(DArray(mean), None, target, mask, "mse").item()
    const = 1.5 * np.log(2 * np.pi)
    nll_fixed = masked_loss(DArray(mean), None, target, mask, "gaussian_nll").item()
    nll_zero = masked_loss(DArray(mean), DArray(np.zeros((5, 4, 3))), target, mask,
                           "gaussian_nll").item()
    assert nll_fixed == pytest.approx(mse / 2 + const, rel=1e-13)
    assert nll_zero == pytest.approx(mse / 2 + const, rel=1e-13)


def test_loss_errors():
    with pytest.raises(ValueError):
        masked_loss(DArray(np.zeros((2, 1))), None, np.zeros((2, 1)), np.zeros(2))
    with pytest.raises(ValueError):
        masked_loss(DArray(np.zeros((2, 1))), None, np.zeros((2, 1)), np.ones(2), "huber")
    model = _tiny()
    with pytest.raises(ValueError):
        dfbt_loss(model, np.zeros((1, 6, 4)), np.ones((1, 6)), np.zeros((1, 6, 2)),
                  "gaussian_nll")


def test_masked_positions_do_not_contribute():
    model = _tiny()
    rng = np.random.default_rng(4)
    tok, tgt = rng.normal(size=(2, 6, 4)), rng.normal(size=(2, 6, 2))
    mask = np.ones((2, 6))
    mask[:, 4:] = 0
    base = dfbt_loss(model, tok, mask, tgt).item()
    tgt2 = tgt.copy()
    tgt2[:, 4:] += 100.0
    assert dfbt_loss(model, tok, mask, tgt2).item() == base


@pytest.mark.parametrize("kind,gaussian", [("mse", False), ("gaussian_nll", True)])
def test_dfbt_loss_gradients(kind, gaussian):
    rng = np.random.default_rng(5)
    model = _tiny(delta=4, gaussian=gaussian)
    tok, tgt = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 2))
    mask = np.ones((3, 4))
    mask[0, 2:] = 0
    err = grad_check_params(lambda: dfbt_loss(model, tok, mask, tgt, kind), model.parameters(),
                            n_probe=6, rng=rng)
    assert err < 1e-3


def test_recursive_loss_gradients():
    rng = np.random.default_rng(6)
    pm = RecursiveModel(RecursiveConfig(2, 1, (8, 8), gaussian_head=True),
                        Normalizer.identity(2, 1), make_generator(0, "init"))
    s, a, s2 = rng.normal(size=(5, 2)), rng.normal(size=(5, 1)), rng.normal(size=(5, 2))
    for kind in ("mse", "gaussian_nll"):
        assert grad_check_params(lambda: recursive_loss(pm, s, a, s2, kind),
                                 pm.parameters()) < 1e-3


# ------------------------------------------------------------------ training


def test_train_dfbt_zero_epochs_and_determinism(msd_data):
    _, ds = msd_data
    norm = Normalizer.fit(ds)
    cfg = DFBTConfig(2, 1, 4, n_layers=1, hidden=16, n_heads=2)
    m0 = DFBT(cfg, norm, make_generator(0, "init"))
    before = m0.state_dict()
    train_dfbt(m0, ds, DelaySpec("constant", 4), 0, seed=1)
    assert all(np.array_equal(before[k], v) for k, v in m0.state_dict().items())
    runs = []
    for _ in range(2):
        m = DFBT(cfg, norm, make_generator(0, "init"))
        _, curve = train_dfbt(m, ds, DelaySpec("uniform", 4), 2, seed=3, batch_size=32,
                              steps_per_epoch=5)
        runs.append((m.state_dict(), curve))
    assert runs[0][1] == runs[1][1]
    assert all(runs[0][0][k].tobytes() == runs[1][0][k].tobytes() for k in runs[0][0])


def test_train_dfbt_rejects_short_data():
    env = Pendulum()
    ds = collect_dataset(env, [("random", 1.0, RandomPolicy(env.spec))], 10, seed=0, horizon=5)
    m = _tiny(delta=8)
    with pytest.raises(ValueError):
        train_dfbt(m, ds, DelaySpec("constant", 8), 1, seed=0)


def test_dfbt_learns_linear_system(msd_data):
    env, ds = msd_data
    tr, te = split_dataset(ds, 0.2, 0)
    norm = Normalizer.fit(tr)
    m = DFBT(DFBTConfig(2, 1, 8, n_layers=1, hidden=32, n_heads=2, attn_dropout=0.0,
                        resid_dropout=0.0, hidden_dropout=0.0), norm, make_generator(0, "init"))
    train_dfbt(m, tr, DelaySpec("constant", 8), 200, seed=0, batch_size=64, lr=3e-3,
               steps_per_epoch=20, lr_schedule="cosine")
    curve = evaluate_belief(DFBTBelief(m), te, 8)
    # L1 error against the L1 size of a typical state deviation
    assert curve.mean.max() < 0.05 * norm.state_std.sum()
    # horizon-wise error stays within a constant factor of the horizon-1 error
    assert curve.mean.max() <= 10 * curve.mean[0]


def test_train_recursive_one_step_accuracy(msd_data):
    env, ds = msd_data
    tr, te = split_dataset(ds, 0.2, 0)
    norm = Normalizer.fit(tr)
    pm = RecursiveModel(RecursiveConfig(2, 1), norm, make_generator(0, "init"))
    before = pm.state_dict()
    train_recursive(pm, tr, 0, seed=0)
    assert all(np.array_equal(before[k], v) for k, v in pm.state_dict().items())
    _, curve = train_recursive(pm, tr, 150, seed=0, batch_size=64, lr=1e-3,
                               lr_schedule="cosine")
    assert curve[-1] < curve[0]
    assert one_step_error(pm, te) < 1e-3 * np.linalg.norm(norm.state_std)


def test_train_recursive_determinism(msd_data):
    _, ds = msd_data
    norm = Normalizer.fit(ds)
    runs = []
    for _ in range(2):
        pm = RecursiveModel(RecursiveConfig(2, 1, (32,)), norm, make_generator(0, "init"))
        train_recursive(pm, ds, 2, seed=4)
        runs.append(pm.state_dict())
    assert all(runs[0][k].tobytes() == v.tobytes() for k, v in runs[1].items())


# ------------------------------------------------------------------ recursive forecasting


class _Scalar:
    """1-D system ``s' = L s + a`` with an additive model bias."""

    def __init__(self, L, bias=0.0):
        self.L, self.bias = L, bias

    def predict(self, s, a):
        return self.L * s + a + self.bias


def test_recursive_delta_one_single_application():
    aug = AugmentedState(np.array([2.0]), np.array([[0.5]]), np.zeros(1), 1)
    np.testing.assert_array_equal(recursive_forecast(_Scalar(0.5), aug), [[1.5]])


def test_recursive_with_oracle_dynamics_is_exact():
    env = Pendulum()
    traj = rollout(env, RandomPolicy(env.spec), 40, seed=2)
    tokens, mask, targets = trajectory_windows(traj, 8)
    pred = OracleBelief(env).predict_tokens(tokens[:33])
    assert pred.tobytes() == targets[:33].tobytes()


@pytest.mark.parametrize("L", [0.5, 0.9, 1.2])
def test_recursive_bias_follows_geometric_series(L):
    eps, delta = 0.01, 20
    rng = np.random.default_rng(7)
    acts = rng.normal(size=(delta, 1))
    aug = AugmentedState(np.array([0.3]), acts, np.zeros(delta), delta)
    true = recursive_forecast(_Scalar(L), aug)[:, 0]
    pred = recursive_forecast(_Scalar(L, eps), aug)[:, 0]
    err = np.abs(pred - true)
    bound = eps * np.array([(1 - L ** k) / (1 - L) for k in range(1, delta + 1)])
    np.testing.assert_allclose(err, bound, rtol=1e-9)
    if L > 1:
        assert np.all(np.diff(err) > 0)
    else:
        assert np.all(err <= eps / (1 - L) + 1e-15)


def test_recursive_forecast_rejects_non_finite():
    aug = AugmentedState(np.array([1.0]), np.zeros((3, 1)), np.zeros(3), 3)
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        recursive_forecast(_Scalar(1e300), aug)


# ------------------------------------------------------------------ metric & IO


def test_belief_error_arithmetic():
    rng = np.random.default_rng(8)
    true = rng.normal(size=(10, 5, 3))
    c = belief_error(true, true)
    assert np.all(c.mean == 0) and np.all(c.n == 10)
    c = belief_error(true + 0.25, true)
    np.testing.assert_allclose(c.mean, 3 * 0.25, rtol=1e-12)
    mask = np.ones((10, 5))
    mask[:4, 3:] = 0
    assert belief_error(true, true, mask).n.tolist() == [10, 10, 10, 6, 6]
    with pytest.raises(ValueError):
        belief_error(true[:0], true[:0])
    with pytest.raises(ValueError):
        belief_error(true, true[:, :4])


def test_belief_csv(tmp_path):
    true = np.zeros((2, 3, 1))
    write_belief_csv(tmp_path / "b.csv", {"dfbt": belief_error(true + 1, true)})
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "horizon,method,mean_L1,std_L1,n"
    assert lines[1] == "1,dfbt,1,0,2" and len(lines) == 4


def test_model_arrays_roundtrip(msd_data):
    _, ds = msd_data
    norm = Normalizer.fit(ds)
    m = DFBT(DFBTConfig(2, 1, 4, n_layers=1, hidden=8, n_heads=2), norm, make_generator(0, "a"))
    m2 = DFBT(DFBTConfig(2, 1, 4, n_layers=1, hidden=8, n_heads=2), Normalizer.identity(2, 1),
              make_generator(1, "b"))
    m2.load_arrays(m.to_arrays())
    tokens, _ = full_windows(ds, 4)
    assert m.predict(tokens[:10]).tobytes() == m2.predict(tokens[:10]).tobytes()
    pm = RecursiveModel(RecursiveConfig(2, 1, (8,)), norm, make_generator(0, "a"))
    rb = RecursiveBelief(pm, 2, 1)
    assert rb.predict_tokens(tokens[:3]).shape == (3, 4, 2)
