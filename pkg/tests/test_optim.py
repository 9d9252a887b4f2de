import numpy as np

import pairglow.tensor as T
from pairglow.optim import Adam


def reference_adam(theta, gs, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Straight transcription of the bias-corrected update, kept separate
    from the implementation under test."""
    theta = theta.astype(np.float64).copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(gs, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta


def test_zero_gradient_fresh_state_keeps_params(f64):
    p = T.Parameter(np.array([1.0, -2.0, 3.0]))
    before = p.data.copy()
    Adam([p], lr=0.1).step({p.node_id: np.zeros(3)})
    assert np.array_equal(p.data, before)


def test_first_step_is_signed_lr(f64):
    # With |g| >> eps the bias-corrected first step is -lr * sign(g):
    # m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps)
    p = T.Parameter(np.array([0.0, 0.0]))
    g = np.array([7.0, -0.3])
    Adam([p], lr=1e-2).step({p.node_id: g})
    assert np.allclose(p.data, -1e-2 * np.sign(g), atol=1e-8)


def test_two_steps_match_reference(f64, rng):
    init = rng.normal(size=(4, 3))
    g1 = rng.normal(size=(4, 3))
    g2 = rng.normal(size=(4, 3))
    p = T.Parameter(init.copy())
    opt = Adam([p], lr=3e-3)
    opt.step({p.node_id: g1})
    opt.step({p.node_id: g2})
    want = reference_adam(init, [g1, g2], lr=3e-3)
    assert np.max(np.abs(p.data - want)) < 1e-12


def test_missing_gradient_treated_as_zero(f64, rng):
    p = T.Parameter(rng.normal(size=3))
    q = T.Parameter(rng.normal(size=3))
    q_before = q.data.copy()
    opt = Adam([p, q], lr=1e-2)
    opt.step({p.node_id: np.ones(3)})
    assert not np.array_equal(p.data, q_before)
    assert np.array_equal(q.data, q_before)
