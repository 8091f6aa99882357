import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wdsm import score_net as sn
from wdsm.errors import NumericalError

SMALL = sn.layout_for(25)


def _random_batch(rng, n=8):
    return sn.Batch(
        rng.normal(0, 3, n),
        np.exp(rng.uniform(np.log(0.01), np.log(50), n)),
        rng.normal(0, 2, n),
        rng.uniform(0, 2, n),
    )


def _fd_grad(params, batch, h=1e-5):
    g = np.empty(params.vector.size)
    for i in range(g.size):
        plus, minus = params.copy(), params.copy()
        plus.vector[i] += h
        minus.vector[i] -= h
        g[i] = (sn.loss_and_grad(plus, batch)[0] - sn.loss_and_grad(minus, batch)[0]) / (2 * h)
    return g


class TestLayout:
    @pytest.mark.parametrize("count", [25, 361, 1321])
    def test_shipped_counts_are_exact(self, count):
        assert sn.layout_for(count).param_count == count

    def test_six_hidden_units(self):
        assert SMALL.widths == (2, 6, 1)
        assert SMALL.header() == "mlp 2 6 1"

    def test_unknown_count(self):
        with pytest.raises(ValueError):
            sn.layout_for(26)

    def test_two_layer_count(self):
        assert sn.MlpLayout((16, 16)).param_count == 16 * 3 + 17 * 16 + 17


class TestForward:
    def test_zero_params_give_zero(self):
        p = sn.MlpParams(SMALL, np.zeros(25))
        assert sn.forward(p, 1.3, 0.5) == 0.0
        assert np.all(sn.forward(p, np.linspace(-3, 3, 7), 2.0) == 0.0)

    def test_output_bias_only(self):
        vec = np.zeros(25)
        vec[-1] = 0.7
        assert sn.forward(sn.MlpParams(SMALL, vec), -4.0, 10.0) == pytest.approx(0.7)

    def test_saturation_bound(self):
        p = sn.init(SMALL, 3)
        w_out, b_out = p.layers[-1]
        for W, _ in p.layers[:-1]:
            W *= 1e6
        bound = np.abs(w_out).sum() + abs(b_out[0])
        out = sn.forward(p, np.linspace(-1e3, 1e3, 101), 0.5)
        assert np.all(np.abs(out) <= bound + 1e-12)

    def test_views_share_storage(self):
        p = sn.init(SMALL, 0)
        p.vector[:] = 0.0
        assert np.all(p.layers[0][0] == 0)

    def test_input_grad_matches_finite_difference(self):
        p = sn.init(sn.layout_for(361), 4)
        x = np.linspace(-3, 3, 11)
        h = 1e-6
        fd = (sn.forward(p, x + h, 0.7) - sn.forward(p, x - h, 0.7)) / (2 * h)
        assert np.allclose(sn.input_grad(p, x, 0.7), fd, rtol=1e-6, atol=1e-8)

    def test_non_finite_output_raises(self):
        vec = np.zeros(25)
        vec[12:18] = 5.0  # hidden biases, saturated
        vec[18:24] = 1e308  # output weights overflow when summed
        p = sn.MlpParams(SMALL, vec)
        with pytest.raises(NumericalError):
            sn.forward(p, np.ones(3), 1.0)


class TestGradient:
    def test_all_coordinates_against_finite_differences(self):
        rng = np.random.default_rng(0)
        p = sn.init(SMALL, 1)
        p.vector[:] += rng.normal(0, 0.3, 25)
        batch = _random_batch(rng)
        _, g = sn.loss_and_grad(p, batch)
        fd = _fd_grad(p, batch)
        assert np.all(np.abs(g - fd) <= 1e-5 * np.maximum(np.abs(fd), 1e-3))

    def test_deeper_layout(self):
        rng = np.random.default_rng(1)
        p = sn.init(sn.MlpLayout((5, 4)), 2)
        batch = _random_batch(rng, 16)
        _, g = sn.loss_and_grad(p, batch)
        assert np.allclose(g, _fd_grad(p, batch), rtol=1e-5, atol=1e-8)

    def test_zero_weights_zero_gradient(self):
        rng = np.random.default_rng(2)
        b = _random_batch(rng)
        loss, g = sn.loss_and_grad(sn.init(SMALL, 0), b._replace(weight=np.zeros(8)))
        assert loss == 0.0 and np.all(g == 0.0)

    def test_per_sample_rows_average_to_batch_gradient(self):
        rng = np.random.default_rng(3)
        p = sn.init(SMALL, 5)
        b = _random_batch(rng, 32)
        assert np.allclose(sn.per_sample_grads(p, b).mean(axis=0), sn.loss_and_grad(p, b)[1], rtol=1e-12, atol=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.1, 10.0))
    def test_gradient_scales_with_weight(self, c):
        rng = np.random.default_rng(4)
        p = sn.init(SMALL, 6)
        b = _random_batch(rng)
        _, g1 = sn.loss_and_grad(p, b)
        _, gc = sn.loss_and_grad(p, b._replace(weight=c * b.weight))
        assert np.allclose(gc, c * g1, rtol=1e-12, atol=1e-15)

    def test_rejects_bad_batches(self):
        p = sn.init(SMALL, 0)
        with pytest.raises(ValueError):
            sn.loss_and_grad(p, sn.Batch(np.array([]), np.array([]), np.array([]), np.array([])))
        with pytest.raises(ValueError):
            sn.loss_and_grad(p, sn.Batch(np.array([np.nan]), np.ones(1), np.ones(1), np.ones(1)))
        with pytest.raises(ValueError):
            sn.loss_and_grad(p, sn.Batch(np.ones(1), np.ones(1), np.ones(1), -np.ones(1)))


class TestPersistence:
    def test_round_trip_is_exact(self, tmp_path):
        p = sn.init(sn.layout_for(361), 9)
        sn.save(p, tmp_path / "m.txt")
        assert sn.load(tmp_path / "m.txt") == p
        assert (tmp_path / "m.txt").read_text().splitlines()[0] == "mlp 2 90 1"

    def test_truncated_file(self, tmp_path):
        p = sn.init(SMALL, 0)
        sn.save(p, tmp_path / "m.txt")
        lines = (tmp_path / "m.txt").read_text().splitlines()
        (tmp_path / "m.txt").write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ValueError, match="expected 25 parameters, found 24"):
            sn.load(tmp_path / "m.txt")

    def test_layout_mismatch(self, tmp_path):
        sn.save(sn.init(SMALL, 0), tmp_path / "m.txt")
        with pytest.raises(ValueError, match="does not match"):
            sn.load(tmp_path / "m.txt", sn.layout_for(361))

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.txt").write_text("net 2 6 1\n")
        with pytest.raises(ValueError, match=":1:"):
            sn.load(tmp_path / "m.txt")
