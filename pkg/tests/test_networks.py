"""Architectures: shapes, the fully convolutional property, Bayesian
convolution moments, deterministic mode and checkpoint round trips."""

import numpy as np
import pytest

from uqsr.autodiff import Tensor, no_grad
from uqsr.errors import ContractError, FormatError, GeometryError
from uqsr.networks import (LayerSpec, NetworkSpec, SRNetwork,
                           VariationalConv3d, build_network,
                           deterministic_mode, load_checkpoint,
                           save_checkpoint)


class TestSpecValidation:
    def test_final_layer_filter_count_enforced(self):
        with pytest.raises(ContractError):
            NetworkSpec(layers=[LayerSpec(kernel=3, filters=10)],
                        rate=2, channels=6)

    def test_sr_default_margin(self):
        spec = NetworkSpec.sr_default(rate=2)
        assert spec.margin == 4
        assert spec.layers[-1].filters == 6 * 8

    def test_dict_roundtrip(self):
        spec = NetworkSpec.sr_default(rate=3, channels=2, mode="heteroscedastic",
                                      dropout="var2")
        assert NetworkSpec.from_dict(spec.to_dict()) == spec


class TestForwardShapes:
    def test_table_geometry_11_to_14(self, rng):
        net = build_network(NetworkSpec.sr_default(rate=2), init_seed=0)
        x = Tensor(rng.standard_normal((2, 11, 11, 11, 6)).astype(np.float32))
        with no_grad():
            out = net.forward(x)
        assert out.mean.shape == (2, 14, 14, 14, 6)

    def test_zero_weights_zero_output(self, rng):
        net = build_network(NetworkSpec.sr_default(rate=2), init_seed=0)
        for p in net.parameters():
            p.data[...] = 0.0
        x = Tensor(rng.standard_normal((1, 11, 11, 11, 6)).astype(np.float32))
        with no_grad():
            out = net.forward(x)
        assert (out.mean.data == 0).all()

    def test_input_below_receptive_field_raises(self, rng):
        net = build_network(NetworkSpec.sr_default(rate=2), init_seed=0)
        x = Tensor(rng.standard_normal((1, 4, 11, 11, 6)).astype(np.float32))
        with pytest.raises(GeometryError):
            net.forward(x)

    def test_fully_convolutional_consistency(self, rng):
        # a large input patch agrees with tiled small patches (float32)
        net = build_network(NetworkSpec.sr_default(rate=2), init_seed=1)
        big = rng.standard_normal((1, 18, 11, 11, 6)).astype(np.float32)
        with no_grad():
            whole = net.forward(Tensor(big)).mean.data
            left = net.forward(Tensor(big[:, :11])).mean.data
            right = net.forward(Tensor(big[:, 7:])).mean.data
        np.testing.assert_allclose(whole[:, :14], left, atol=1e-5)
        np.testing.assert_allclose(whole[:, 14:], right, atol=1e-5)


class TestHetero:
    def test_constant_variance_head(self, rng):
        net = build_network(
            NetworkSpec.sr_default(rate=2, mode="heteroscedastic"), init_seed=0
        )
        for p in net.var_net.parameters():
            p.data[...] = 0.0
        net.var_net.convs[-1].bias.data[...] = 0.7
        x = Tensor(rng.standard_normal((1, 11, 11, 11, 6)).astype(np.float32))
        with no_grad():
            out = net.forward(x)
        expect = np.log1p(np.exp(0.7))
        np.testing.assert_allclose(out.var.data, expect, atol=1e-6)

    def test_variance_strictly_positive(self, rng):
        net = build_network(
            NetworkSpec.sr_default(rate=2, mode="heteroscedastic"), init_seed=2
        )
        x = Tensor(rng.standard_normal((1, 11, 11, 11, 6)).astype(np.float32))
        with no_grad():
            out = net.forward(x)
        assert (out.var.data > 0).all()

    def test_mean_tower_isolation(self, rng):
        hetero = build_network(
            NetworkSpec.sr_default(rate=2, mode="heteroscedastic"), init_seed=3
        )
        x = Tensor(rng.standard_normal((1, 11, 11, 11, 6)).astype(np.float32))
        with no_grad():
            joint = hetero.forward(x).mean.data
            alone = hetero.mean_net.forward(Tensor(x.data)).data
        np.testing.assert_array_equal(joint, alone)


class TestBayesConv:
    def test_alpha_to_zero_is_deterministic_conv(self, rng):
        layer = VariationalConv3d(2, 3, k=3, flavour="var1",
                                  rng=np.random.default_rng(0),
                                  dtype=np.float64, log_alpha_init=-40.0)
        x = Tensor(rng.standard_normal((1, 4, 4, 4, 2)))
        with no_grad():
            noisy = layer.forward(x, rng=np.random.default_rng(1), stochastic=True)
            quiet = layer.forward(x, stochastic=False)
        # the variance floor inside sqrt leaves ~1e-6 residual noise
        np.testing.assert_allclose(noisy.data, quiet.data, atol=1e-5)

    def test_closed_form_moments(self):
        # x=[2], eta=3, alpha=0.25: output ~ N(6, 0.25*9*4 = 9)
        layer = VariationalConv3d(1, 1, k=1, flavour="var1",
                                  rng=np.random.default_rng(0), dtype=np.float64)
        layer.eta.data[...] = 3.0
        layer.bias.data[...] = 0.0
        layer.log_alpha.data[...] = np.log(0.25)
        x = Tensor(np.full((100000, 1, 1, 1, 1), 2.0))
        with no_grad():
            out = layer.forward(x, rng=np.random.default_rng(42),
                                stochastic=True).data.reshape(-1)
        n = out.size
        assert out.mean() == pytest.approx(6.0, abs=3 * 3.0 / np.sqrt(n))
        se_var = 9.0 * np.sqrt(2.0 / (n - 1))
        assert out.var(ddof=1) == pytest.approx(9.0, abs=3 * se_var)

    def test_fixed_seed_bit_identical(self, rng):
        layer = VariationalConv3d(2, 3, k=3, flavour="var2",
                                  rng=np.random.default_rng(5), dtype=np.float32)
        x = Tensor(rng.standard_normal((2, 5, 5, 5, 2)).astype(np.float32))
        with no_grad():
            a = layer.forward(x, rng=np.random.default_rng(9), stochastic=True)
            b = layer.forward(x, rng=np.random.default_rng(9), stochastic=True)
        np.testing.assert_array_equal(a.data, b.data)

    def test_gauss_flavour_freezes_rate(self):
        layer = VariationalConv3d(2, 3, k=1, flavour="gauss:0.2",
                                  rng=np.random.default_rng(0))
        assert not layer.log_alpha.requires_grad
        assert layer.log_alpha.data.reshape(()) == pytest.approx(np.log(0.2 / 0.8))
        with pytest.raises(ContractError):
            VariationalConv3d(2, 3, k=1, flavour="gauss:1.5",
                              rng=np.random.default_rng(0))


class TestDeterministicMode:
    def test_idempotent(self):
        net = build_network(
            NetworkSpec.sr_default(rate=2, dropout="var1"), init_seed=0
        )
        once = deterministic_mode(net)
        twice = deterministic_mode(once)
        assert once.force_deterministic and twice.force_deterministic
        assert not net.force_deterministic

    def test_matches_mc_average_linear_stack(self, rng):
        # mean propagation equals the MC average exactly when no
        # nonlinearity sits between the noise and the output
        spec = NetworkSpec(
            layers=[LayerSpec(kernel=3, filters=8, relu=False),
                    LayerSpec(kernel=3, filters=2 * 8, relu=False)],
            rate=2, channels=2, dropout="var1",
        )
        net = build_network(spec, init_seed=1)
        for layer in net.variational_layers():
            layer.log_alpha.data[...] = np.log(0.05)
        x = Tensor(rng.standard_normal((1, 7, 7, 7, 2)).astype(np.float32))
        det = deterministic_mode(net)
        with no_grad():
            quiet = det.forward(x).mean.data.astype(np.float64)
            draws = np.stack([
                net.forward(x, rng=np.random.default_rng(t),
                            stochastic=True).mean.data.astype(np.float64)
                for t in range(400)
            ])
        mc = draws.mean(axis=0)
        se = draws.std(axis=0, ddof=1) / np.sqrt(draws.shape[0])
        frac_ok = (np.abs(mc - quiet) <= 3 * se + 1e-7).mean()
        assert frac_ok > 0.98

    def test_relu_stack_bias_shrinks_with_rate(self, rng):
        # through ReLUs the eps=0 pass is only the small-noise limit of
        # the MC mean: the gap must shrink as the dropout rate drops
        x = Tensor(rng.standard_normal((1, 7, 7, 7, 2)).astype(np.float32))
        gaps = []
        for la in (np.log(0.05), np.log(0.002)):
            net = build_network(
                NetworkSpec.sr_default(rate=2, channels=2, dropout="var1"),
                init_seed=1,
            )
            for layer in net.variational_layers():
                layer.log_alpha.data[...] = la
            det = deterministic_mode(net)
            with no_grad():
                quiet = det.forward(x).mean.data.astype(np.float64)
                draws = np.stack([
                    net.forward(x, rng=np.random.default_rng(t),
                                stochastic=True).mean.data.astype(np.float64)
                    for t in range(200)
                ])
            gaps.append(np.abs(draws.mean(axis=0) - quiet).mean())
        assert gaps[1] < gaps[0] * 0.5

    def test_alpha_zero_identical(self, rng):
        net = build_network(
            NetworkSpec.sr_default(rate=2, channels=2, dropout="var1"),
            init_seed=1,
        )
        for layer in net.variational_layers():
            layer.log_alpha.data[...] = -45.0
        x = Tensor(rng.standard_normal((1, 7, 7, 7, 2)).astype(np.float32))
        with no_grad():
            a = net.forward(x, rng=np.random.default_rng(3), stochastic=True)
            b = deterministic_mode(net).forward(x)
        np.testing.assert_allclose(a.mean.data, b.mean.data, atol=1e-5)


class TestCheckpoint:
    def test_roundtrip_bitexact_forward(self, tmp_path, rng):
        net = build_network(
            NetworkSpec.sr_default(rate=2, mode="heteroscedastic", dropout="var2"),
            init_seed=7,
        )
        stats = {"mean": [0.0] * 6, "std": [1.0] * 6,
                 "clip_lo": [-3.0] * 6, "clip_hi": [3.0] * 6,
                 "constant": [False] * 6}
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, net, norm_stats=stats, metadata={"note": "t"})
        net2, stats2, meta = load_checkpoint(path)
        assert meta["note"] == "t"
        assert stats2["std"] == stats["std"]
        x = Tensor(rng.standard_normal((1, 11, 11, 11, 6)).astype(np.float32))
        with no_grad():
            a = net.forward(x, rng=np.random.default_rng(0), stochastic=True)
            b = net2.forward(x, rng=np.random.default_rng(0), stochastic=True)
        np.testing.assert_array_equal(a.mean.data, b.mean.data)
        np.testing.assert_array_equal(a.var.data, b.var.data)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(FormatError):
            load_checkpoint(p)

    def test_truncated_block_rejected(self, tmp_path):
        net = build_network(NetworkSpec.sr_default(rate=2), init_seed=0)
        p = tmp_path / "t.ckpt"
        save_checkpoint(p, net)
        raw = p.read_bytes()
        p.write_bytes(raw[:len(raw) - 100])
        with pytest.raises(FormatError):
            load_checkpoint(p)
