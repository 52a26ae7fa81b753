import numpy as np
import pytest

from mtlopt.optimizers import Adam, Sgd, modulation_coefficient


def adam_oracle(theta, grads, lr=0.01, b1=0.9, b2=0.999, eps=1e-8, sigmas=None):
    """Hand-unrolled Adam with optional per-step decay modulation."""
    v = np.zeros_like(theta)
    s = np.zeros_like(theta)
    out = theta.copy()
    for t, g in enumerate(grads, start=1):
        sigma = 1.0 if sigmas is None else sigmas[t - 1]
        v = sigma * b1 * v + (1.0 - sigma * b1) * g
        s = sigma * b2 * s + (1.0 - sigma * b2) * g * g
        v_hat = v / (1.0 - b1 ** t)
        s_hat = s / (1.0 - b2 ** t)
        out = out - lr * v_hat / (np.sqrt(s_hat) + eps)
    return out, v, s


GRADS = [
    np.array([0.5, -1.0, 0.25]),
    np.array([0.25, 0.75, -0.1]),
    np.array([-0.5, 0.1, 0.9]),
]


class TestModulationCoefficient:
    def test_parallel_gives_one(self):
        assert modulation_coefficient(np.array([2.0, 0.0]), np.array([5.0, 0.0])) == 1.0

    def test_orthogonal_gives_zero(self):
        assert modulation_coefficient(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_antiparallel_clamps_to_zero(self):
        assert modulation_coefficient(np.array([1.0, 0.0]), np.array([-1.0, 0.0])) == 0.0

    def test_degenerate_zero_vector(self):
        assert modulation_coefficient(np.zeros(2), np.array([1.0, 0.0])) == 0.0


class TestAdam:
    def test_plain_path_matches_hand_unroll_bitwise(self):
        theta = np.array([1.0, 2.0, 3.0])
        opt = Adam(dim=3, lr=0.01)
        cur = theta.copy()
        for g in GRADS:
            cur = opt.step(cur, g)
        ref, v_ref, s_ref = adam_oracle(theta, GRADS)
        assert (cur == ref).all()
        assert (opt.v == v_ref).all()
        assert (opt.s == s_ref).all()

    def test_sigma_zero_discards_history(self):
        theta = np.array([1.0, 2.0, 3.0])
        opt = Adam(dim=3, lr=0.01)
        cur = opt.step(theta.copy(), GRADS[0])
        cur = opt.step(cur, GRADS[1])
        opt.arm(0.0)
        cur = opt.step(cur, GRADS[2])
        assert (opt.v == GRADS[2]).all()
        assert (opt.s == GRADS[2] ** 2).all()

    def test_sigma_one_pending_equals_plain_path(self):
        theta = np.array([1.0, 2.0, 3.0])
        a, b = Adam(dim=3, lr=0.01), Adam(dim=3, lr=0.01)
        ca, cb = theta.copy(), theta.copy()
        ca = a.step(ca, GRADS[0])
        cb = b.step(cb, GRADS[0])
        b.arm(1.0)
        ca = a.step(ca, GRADS[1])
        cb = b.step(cb, GRADS[1])
        assert (ca == cb).all()
        assert (a.v == b.v).all() and (a.s == b.s).all()

    def test_sigma_07_matches_modulated_oracle_bitwise(self):
        theta = np.array([1.0, 2.0, 3.0])
        opt = Adam(dim=3, lr=0.01)
        cur = theta.copy()
        cur = opt.step(cur, GRADS[0])
        opt.arm(0.7)
        cur = opt.step(cur, GRADS[1])
        cur = opt.step(cur, GRADS[2])
        ref, v_ref, s_ref = adam_oracle(theta, GRADS, sigmas=[1.0, 0.7, 1.0])
        assert (cur == ref).all()
        assert (opt.v == v_ref).all() and (opt.s == s_ref).all()

    def test_one_shot_reset(self):
        opt = Adam(dim=2, lr=0.01)
        opt.arm(0.3)
        assert opt.pending and opt.sigma == 0.3
        opt.step(np.zeros(2), np.ones(2))
        assert not opt.pending and opt.sigma == 1.0

    def test_double_arm_is_error(self):
        opt = Adam(dim=2)
        opt.arm(0.5)
        with pytest.raises(RuntimeError):
            opt.arm(0.5)

    def test_arm_out_of_range(self):
        opt = Adam(dim=2)
        with pytest.raises(ValueError):
            opt.arm(1.5)
        with pytest.raises(ValueError):
            opt.arm(-0.1)

    def test_three_teleport_scripted_trace(self):
        # arm/step pairs at steps 2, 4, 6; exactly those steps see sigma != 1
        sigma_script = {2: 0.7, 4: 0.0, 6: 0.4}
        grads = [np.array([0.3 * (i + 1), -0.1 * i]) for i in range(8)]
        opt = Adam(dim=2, lr=0.01)
        cur = np.array([1.0, -1.0])
        sigmas_seen = []
        for i, g in enumerate(grads, start=1):
            if i in sigma_script:
                opt.arm(sigma_script[i])
            sigmas_seen.append(opt.sigma if opt.pending else 1.0)
            cur = opt.step(cur, g)
            assert not opt.pending and opt.sigma == 1.0  # reset after every step
        expected = [1.0] * 8
        for i, s in sigma_script.items():
            expected[i - 1] = s
        assert sigmas_seen == expected
        ref, v_ref, s_ref = adam_oracle(np.array([1.0, -1.0]), grads, sigmas=expected)
        assert (cur == ref).all()
        assert (opt.v == v_ref).all() and (opt.s == s_ref).all()

    def test_interpolation_between_sigma_extremes(self, rng):
        g_prev = rng.normal(size=4)
        g_new = rng.normal(size=4)
        base_v = rng.normal(size=4)
        for sigma in (0.0, 0.25, 0.5, 0.75, 1.0):
            opt = Adam(dim=4, lr=0.01)
            opt.v = base_v.copy()
            opt.s = np.abs(rng.normal(size=4))
            opt.arm(sigma)
            opt.step(np.zeros(4), g_new)
            lo = np.minimum(g_new, 0.9 * base_v + 0.1 * g_new)
            hi = np.maximum(g_new, 0.9 * base_v + 0.1 * g_new)
            assert (opt.v >= lo - 1e-12).all() and (opt.v <= hi + 1e-12).all()

    def test_second_moment_stays_nonnegative(self, rng):
        for sigma in (0.0, 0.3, 1.0):
            opt = Adam(dim=3, lr=0.01)
            cur = np.zeros(3)
            for i in range(10):
                if i == 5:
                    opt.arm(sigma)
                cur = opt.step(cur, rng.normal(size=3))
                assert (opt.s >= 0.0).all()

    def test_bias_correction_counts_across_teleports(self):
        opt = Adam(dim=1, lr=0.01)
        cur = np.array([1.0])
        cur = opt.step(cur, np.array([1.0]))
        opt.arm(0.5)
        cur = opt.step(cur, np.array([1.0]))
        assert opt.step_count == 2  # not reset by the modulation


class TestSgd:
    def test_plain_step(self):
        opt = Sgd(dim=2, lr=0.1)
        out = opt.step(np.array([1.0, 1.0]), np.array([1.0, -1.0]))
        np.testing.assert_allclose(out, [0.9, 1.1])

    def test_decay_rate_formula(self):
        assert Sgd.decay_rate(2.0, 4096) == pytest.approx(1.0 / (2.0 * np.sqrt(4095)))
        with pytest.raises(ValueError):
            Sgd.decay_rate(2.0, 1)

    def test_arm_is_noop(self):
        opt = Sgd(dim=2, lr=0.1)
        opt.arm(0.5)  # no history to modulate
        out = opt.step(np.zeros(2), np.ones(2))
        np.testing.assert_allclose(out, [-0.1, -0.1])
