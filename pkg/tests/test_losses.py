import numpy as np
import pytest

from cdtlearn import tensor as T
from cdtlearn.errors import ContractError, DimensionError
from cdtlearn.losses import LossConfig, cdt_loss, cdt_margins, lmcl_loss, triplet_loss

from conftest import check_grad


def unit_rows(rng, n, e):
    x = rng.normal(size=(n, e))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_psd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T / d


def cdt_loop(a, p, n, sp, sn, tau):
    """Scalar loop-nest recomputation of the cross-domain triplet loss."""
    b, h, w, _ = a.shape
    total = 0.0
    for i in range(b):
        pos = neg = 0.0
        for y in range(h):
            for x in range(w):
                rp = a[i, y, x] - p[i, y, x]
                rn = a[i, y, x] - n[i, y, x]
                pos += rp @ sp @ rp
                neg += rn @ sn @ rn
        total += max(0.0, pos / (h * w) - neg / (h * w) + tau)
    return total / b


def test_loss_config_validation():
    LossConfig()
    for bad in ({"tau": 0}, {"rho": -1}, {"s": 0}, {"m": 1.0}, {"lmcl_form": "arc"}):
        with pytest.raises(ContractError):
            LossConfig(**bad)


def test_cdt_inactive_hinge():
    a = np.zeros((1, 1, 1, 2))
    n = np.array([[[[2.0, 0.0]]]])
    assert cdt_loss(a, a, n, np.eye(2), np.eye(2), tau=1.0).item() == 0.0


def test_cdt_hand_value():
    a = np.zeros((1, 1, 1, 2))
    p = np.array([[[[0.2, 0.0]]]])  # d+^2 = 0.04
    n = np.array([[[[0.9, 0.0]]]])  # d-^2 = 0.81
    assert cdt_loss(a, p, n, np.eye(2), np.eye(2), tau=1.0).item() == pytest.approx(0.23, abs=1e-15)


def test_cdt_matches_loop_nest(rng):
    for _ in range(5):
        a, p, n = (rng.normal(size=(4, 2, 3, 5)) for _ in range(3))
        sp, sn = random_psd(rng, 5), random_psd(rng, 5)
        tau = rng.uniform(0.5, 3.0)
        got = cdt_loss(a, p, n, sp, sn, tau).item()
        assert abs(got - cdt_loop(a, p, n, sp, sn, tau)) < 1e-10


def test_cdt_errors(rng):
    a = rng.normal(size=(2, 1, 1, 3))
    with pytest.raises(DimensionError):
        cdt_loss(a, a, a, np.eye(2), np.eye(2))
    with pytest.raises(ContractError):
        cdt_loss(np.zeros((0, 1, 1, 3)), np.zeros((0, 1, 1, 3)), np.zeros((0, 1, 1, 3)), np.eye(3), np.eye(3))


def test_cdt_gradients(rng):
    sp, sn = random_psd(rng, 3), random_psd(rng, 3)
    checked = 0
    while checked < 5:
        a, p, n = (rng.uniform(-2, 2, (3, 2, 1, 3)) for _ in range(3))
        margins = cdt_margins(a, p, n, sp, sn, 1.0).data
        if np.min(np.abs(margins)) < 1e-3:
            continue
        check_grad(lambda x, y, z: cdt_loss(x, y, z, sp, sn, 1.0), a, p, n)
        checked += 1


def test_cdt_with_identity_metrics_is_position_averaged_triplet(rng):
    a, p, n = (rng.normal(size=(6, 2, 2, 4)) for _ in range(3))
    dp = np.mean(np.sum((a - p) ** 2, axis=-1), axis=(1, 2))
    dn = np.mean(np.sum((a - n) ** 2, axis=-1), axis=(1, 2))
    expected = np.mean(np.maximum(0.0, dp - dn + 1.0))
    assert abs(cdt_loss(a, p, n, np.eye(4), np.eye(4), 1.0).item() - expected) < 1e-10


def test_cdt_scaling_is_linear_before_hinge(rng):
    a, p, n = (rng.normal(size=(5, 1, 2, 3)) for _ in range(3))
    sp, sn = random_psd(rng, 3), random_psd(rng, 3)
    base = cdt_margins(a, p, n, sp, sn, 0.0).data
    np.testing.assert_allclose(cdt_margins(a, p, n, 2.5 * sp, 2.5 * sn, 0.0).data, 2.5 * base, rtol=1e-12)


def test_triplet_hand_values():
    a = np.array([[1.0, 0.0]])
    n = np.array([[0.0, 1.0]])  # |a-n|^2 = 2
    assert triplet_loss(a, a, n, rho=1.0).item() == 0.0
    # d+^2 = 0.04, d-^2 = 0.81 on the unit circle
    def on_circle(d2):
        c = 1 - d2 / 2
        return np.array([[c, np.sqrt(1 - c * c)]])

    assert triplet_loss(a, on_circle(0.04), on_circle(0.81), 1.0).item() == pytest.approx(0.23, abs=1e-12)


def test_triplet_matches_loop(rng):
    a, p, n = (unit_rows(rng, 3, 4) for _ in range(3))
    expected = np.mean([max(0.0, np.sum((a[i] - p[i]) ** 2) - np.sum((a[i] - n[i]) ** 2) + 1.0) for i in range(3)])
    assert triplet_loss(a, p, n, 1.0).item() == pytest.approx(expected, abs=1e-14)


def test_triplet_rejects_unnormalized(rng):
    a = unit_rows(rng, 2, 3)
    with pytest.raises(ContractError):
        triplet_loss(a * 1.01, a, a)


def test_triplet_gradient_through_normalization(rng):
    checked = 0
    while checked < 5:
        raw = [rng.uniform(-2, 2, (3, 4)) for _ in range(3)]
        u = [r / np.linalg.norm(r, axis=1, keepdims=True) for r in raw]
        m = np.sum((u[0] - u[1]) ** 2, axis=1) - np.sum((u[0] - u[2]) ** 2, axis=1) + 1.0
        if np.min(np.abs(m)) < 1e-3:
            continue
        check_grad(lambda x, y, z: triplet_loss(T.l2_normalize(x), T.l2_normalize(y), T.l2_normalize(z)), *raw)
        checked += 1


def test_lmcl_hand_value():
    f = np.array([[1.0, 0.0]])
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    got = lmcl_loss(f, [0], w, s=1.0, m=0.0).item()
    assert got == pytest.approx(-np.log(np.e / (np.e + 1.0)), abs=1e-15)
    assert got == pytest.approx(0.3133, abs=1e-4)


def lmcl_loop(f, y, w, s, m, form):
    total = 0.0
    for i in range(len(y)):
        logits = s * (w @ f[i])
        if form == "paper":
            logits[y[i]] -= m
        else:
            logits[y[i]] -= s * m
        mx = logits.max()
        total += mx + np.log(np.sum(np.exp(logits - mx))) - logits[y[i]]
    return total / len(y)


@pytest.mark.parametrize("form", ["paper", "cosface"])
def test_lmcl_matches_loop(form, rng):
    f = unit_rows(rng, 6, 5)
    w = unit_rows(rng, 4, 5)
    y = rng.integers(0, 4, 6)
    got = lmcl_loss(f, y, w, s=8.0, m=0.35, form=form).item()
    assert abs(got - lmcl_loop(f, y, w, 8.0, 0.35, form)) < 1e-10


def test_lmcl_zero_margin_is_softmax_cross_entropy(rng):
    f = unit_rows(rng, 5, 3)
    w = unit_rows(rng, 3, 3)
    y = rng.integers(0, 3, 5)
    logits = 4.0 * f @ w.T
    ce = np.mean(np.log(np.sum(np.exp(logits), axis=1)) - logits[np.arange(5), y])
    for form in ("paper", "cosface"):
        assert lmcl_loss(f, y, w, s=4.0, m=0.0, form=form).item() == pytest.approx(ce, abs=1e-12)


def test_lmcl_decreases_with_target_cosine():
    w = np.eye(3)
    values = []
    for angle in np.linspace(1.2, 0.0, 5):
        f = np.array([[np.cos(angle), np.sin(angle), 0.0]])
        values.append(lmcl_loss(f, [0], w, s=5.0, m=0.5).item())
    assert all(b < a for a, b in zip(values, values[1:]))


def test_lmcl_label_range(rng):
    with pytest.raises(ContractError):
        lmcl_loss(unit_rows(rng, 2, 3), [0, 3], unit_rows(rng, 3, 3))


def test_lmcl_gradients(rng):
    y = rng.integers(0, 4, 3)
    check_grad(
        lambda f, w: lmcl_loss(T.l2_normalize(f), y, T.l2_normalize(w), s=6.0, m=0.5),
        rng.uniform(-2, 2, (3, 5)),
        rng.uniform(-2, 2, (4, 5)),
    )


def test_losses_nonnegative(rng):
    for _ in range(10):
        a, p, n = (rng.normal(size=(3, 1, 2, 3)) for _ in range(3))
        assert cdt_loss(a, p, n, random_psd(rng, 3), random_psd(rng, 3)).item() >= 0
        assert triplet_loss(*(unit_rows(rng, 3, 4) for _ in range(3))).item() >= 0
        assert lmcl_loss(unit_rows(rng, 3, 4), rng.integers(0, 2, 3), unit_rows(rng, 2, 4)).item() >= 0
