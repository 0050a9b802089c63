import numpy as np
import pytest

from windrecon.fields import GridSpec, VelocityField
from windrecon.neural import engine as en
from windrecon.neural.engine import Tensor
from windrecon.neural.models import (
    ArchitectureSpec,
    CWGAN,
    UNet,
    ViTAE,
    build_model,
    encode_input,
    encode_input_batch,
)
from windrecon.placement import uniform_layout

from conftest import fd_gradient, random_field, rel_err

# Published reference parameter counts and tolerances.
UNET_REFERENCE = 471_586
VITAE_REFERENCE = 467_491
CWGAN_REFERENCE = 8_770_000


class TestParameterCounts:
    def test_unet_within_10_percent(self):
        model = build_model(ArchitectureSpec.unet(), seed=0)
        assert abs(model.param_count - UNET_REFERENCE) <= 0.10 * UNET_REFERENCE
        assert model.param_count == 491_666  # frozen analytic count

    def test_vitae_within_10_percent(self):
        model = build_model(ArchitectureSpec.vitae(), seed=0)
        assert abs(model.param_count - VITAE_REFERENCE) <= 0.10 * VITAE_REFERENCE
        assert model.param_count == 459_138

    def test_cwgan_within_15_percent(self):
        model = build_model(ArchitectureSpec.cwgan(), seed=0)
        assert abs(model.param_count - CWGAN_REFERENCE) <= 0.15 * CWGAN_REFERENCE
        assert model.param_count == 8_736_323

    def test_unet_below_6_percent_of_cwgan(self):
        unet = build_model(ArchitectureSpec.unet(), seed=0)
        cwgan = build_model(ArchitectureSpec.cwgan(), seed=0)
        assert unet.param_count / cwgan.param_count < 0.06

    def test_flat_round_trip(self):
        model = build_model(ArchitectureSpec.unet(), seed=1)
        flat = model.get_flat()
        assert flat.size == model.param_count
        model.set_flat(flat * 2.0)
        np.testing.assert_array_equal(model.get_flat(), flat * 2.0)


class TestDeterminism:
    @pytest.mark.parametrize("variant", ["unet", "cwgan", "vitae"])
    def test_same_seed_same_parameters(self, variant):
        spec = getattr(ArchitectureSpec, variant)()
        a = build_model(spec, seed=42)
        b = build_model(spec, seed=42)
        np.testing.assert_array_equal(a.get_flat(), b.get_flat())
        c = build_model(spec, seed=43)
        assert np.abs(a.get_flat() - c.get_flat()).max() > 0


class TestShapes:
    def test_unet_output_shape(self):
        model = build_model(ArchitectureSpec.unet(), seed=0)
        out = model.forward(Tensor(np.random.default_rng(0).standard_normal((3, 3, 15, 15))))
        assert out.data.shape == (3, 2, 15, 15)

    def test_vitae_output_shape(self):
        model = build_model(ArchitectureSpec.vitae(), seed=0)
        out = model.forward(Tensor(np.random.default_rng(1).standard_normal((2, 3, 15, 15))))
        assert out.data.shape == (2, 2, 15, 15)

    def test_cwgan_generator_output_shape(self):
        model = build_model(ArchitectureSpec.cwgan(), seed=0)
        x = np.random.default_rng(2).standard_normal((2, 3, 15, 15))
        noise = np.random.default_rng(3).standard_normal((2, 1, 15, 15))
        out = model.forward(Tensor(x), noise)
        assert out.data.shape == (2, 2, 15, 15)

    def test_cwgan_critic_output_shape(self):
        model = build_model(ArchitectureSpec.cwgan(), seed=0)
        cond = Tensor(np.random.default_rng(4).standard_normal((3, 3, 15, 15)))
        fld = Tensor(np.random.default_rng(5).standard_normal((3, 2, 15, 15)))
        score = model.criticize(cond, fld, training=True)
        assert score.data.shape == (3, 1)


class TestPatching:
    def test_vitae_patching_lossless(self):
        # 15x15 with 3x3 patches -> 25 patches covering every cell once.
        model = build_model(ArchitectureSpec.vitae(), seed=0)
        x = np.arange(3 * 15 * 15, dtype=np.float64).reshape(1, 3, 15, 15)
        t = Tensor(x)
        p = 3
        tok = (
            t.reshape(1, 3, 5, p, 5, p).transpose(0, 2, 4, 1, 3, 5).reshape(1, 25, 27)
        )
        assert tok.data.shape == (1, 25, 27)
        # Every input value appears exactly once across the token matrix.
        assert sorted(tok.data.ravel().tolist()) == sorted(x.ravel().tolist())
        # Patch (row r, col c) holds the 3x3 block at rows 3r.., cols 3c..
        np.testing.assert_array_equal(
            tok.data[0, 7].reshape(3, 3, 3), x[0, :, 3:6, 6:9]
        )


class TestEncodeInput:
    def test_mask_and_sparsity(self, grid):
        rng = np.random.default_rng(6)
        layout = uniform_layout(grid, 12, seed=0)
        f = random_field(rng)
        enc = encode_input(layout, f)
        assert enc.shape == (3, 15, 15)
        assert np.count_nonzero(enc[2]) == 12
        assert set(np.unique(enc[2])) <= {0.0, 1.0}
        # Channels 0-1 vanish wherever the mask is zero.
        assert np.all(enc[0][enc[2] == 0] == 0.0)
        assert np.all(enc[1][enc[2] == 0] == 0.0)
        for x, y in layout.cells:
            assert enc[0, y, x] == f.values[y, x, 0]
            assert enc[1, y, x] == f.values[y, x, 1]

    def test_saturated_layout_reproduces_field(self, grid):
        rng = np.random.default_rng(7)
        layout = uniform_layout(grid, 225, seed=0)
        f = random_field(rng)
        enc = encode_input(layout, f)
        np.testing.assert_array_equal(enc[0], f.values[:, :, 0])
        np.testing.assert_array_equal(enc[1], f.values[:, :, 1])
        assert np.all(enc[2] == 1.0)

    def test_batch_matches_single(self, grid):
        rng = np.random.default_rng(8)
        layout = uniform_layout(grid, 9, seed=1)
        values = rng.standard_normal((4, 15, 15, 2))
        batch = encode_input_batch(layout, values)
        for i in range(4):
            single = encode_input(layout, VelocityField(grid, values[i]))
            np.testing.assert_array_equal(batch[i], single)


class TestEndToEndGradients:
    """Loss-to-input gradients of each full architecture vs finite differences."""

    def _check(self, forward, x_data, rng, n_probe=6):
        x = Tensor(x_data, requires_grad=True)
        target = Tensor(rng.standard_normal((x_data.shape[0], 2, 15, 15)))

        def loss_value():
            return float(en.mean_squared_error(forward(x), target).data)

        loss = en.mean_squared_error(forward(x), target)
        x.grad = None
        loss.backward()
        idxs = rng.choice(x.size, size=n_probe, replace=False)
        fd = fd_gradient(loss_value, x.data, idxs, h=1e-5)
        return rel_err(fd, x.grad.ravel()[idxs])

    def test_unet_input_gradient(self):
        rng = np.random.default_rng(9)
        model = build_model(ArchitectureSpec.unet(), seed=0)
        err = self._check(lambda t: model.forward(t), rng.standard_normal((1, 3, 15, 15)), rng)
        assert err < 1e-3

    def test_vitae_input_gradient(self):
        rng = np.random.default_rng(10)
        model = build_model(ArchitectureSpec.vitae(), seed=0)
        err = self._check(lambda t: model.forward(t), rng.standard_normal((1, 3, 15, 15)), rng)
        assert err < 1e-3

    def test_cwgan_generator_input_gradient(self):
        rng = np.random.default_rng(11)
        model = build_model(ArchitectureSpec.cwgan(), seed=0)
        noise = rng.standard_normal((1, 1, 15, 15))
        err = self._check(
            lambda t: model.forward(t, noise), rng.standard_normal((1, 3, 15, 15)), rng, n_probe=4
        )
        assert err < 1e-3
