import numpy as np
import pytest

from vesselseg import netgraph as ng
from vesselseg.volcore import ShapeError

import oracles


def toy_spec(combine=False):
    """Small two-stage net exercising conv, pool, and optionally a merge."""
    layers = []
    if combine:
        inputs = ("image", "recursive")
        layers += [
            ng.LayerSpec("A", "conv", ("image",), kernel=(1, 3, 3), maps=2, act="tanh"),
            ng.LayerSpec("B", "conv", ("recursive",), kernel=(1, 3, 3), maps=2, act="tanh"),
            ng.LayerSpec("M", "combine", ("A", "B")),
            ng.LayerSpec("P", "max_filter", ("M",), window=(1, 2, 2)),
            ng.LayerSpec("C", "conv", ("P",), kernel=(1, 3, 3), maps=3, act="relu"),
            ng.LayerSpec("Output", "output", ("C",), kernel=(1, 1, 1), maps=2),
        ]
    else:
        inputs = ("image",)
        layers += [
            ng.LayerSpec("A", "conv", ("image",), kernel=(1, 3, 3), maps=2, act="tanh"),
            ng.LayerSpec("P", "max_filter", ("A",), window=(1, 2, 2)),
            ng.LayerSpec("C", "conv", ("P",), kernel=(1, 3, 3), maps=3, act="relu"),
            ng.LayerSpec("D", "dropout", ("C",), p=0.5),
            ng.LayerSpec("Output", "output", ("D",), kernel=(1, 1, 1), maps=2),
        ]
    return ng.NetworkSpec("toy", inputs, layers)


class TestPresets:
    def test_vd2d_parameter_count(self):
        n = ng.param_count(ng.build_preset("VD2D"))
        assert abs(n - 230_000) / 230_000 < 0.05

    def test_vd2d3d_parameter_count(self):
        n = ng.param_count(ng.build_preset("VD2D3D"))
        assert abs(n - 310_000) / 310_000 < 0.05

    def test_v3_first_conv_is_3d(self):
        v3 = ng.build_preset("VD2D3D_v3")
        assert v3.layer("Conv1a").kernel[0] == 3
        assert ng.build_preset("VD2D").layer("Conv1a").kernel[0] == 1

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="unknown preset"):
            ng.build_preset("VD4D")

    def test_conv1c_filter_and_conv5_width(self):
        vd2d = ng.build_preset("VD2D")
        assert vd2d.layer("Conv1c").kernel == (1, 2, 2)
        assert vd2d.layer("Conv5").maps == 200
        assert ng.build_preset("VD2D3D").layer("Conv4c").maps == 100

    def test_width_scale_floors_at_one(self):
        spec = ng.build_preset("VD2D", 0.01)
        assert all(l.maps >= 1 for l in spec.conv_layers())
        assert spec.layers[-1].maps == 2  # output width untouched

    def test_param_count_invariant_to_seed(self):
        spec = ng.build_preset("VD2D", 0.1)
        assert (
            ng.init_weights(spec, seed=0).param_count()
            == ng.init_weights(spec, seed=1).param_count()
            == ng.param_count(spec)
        )


class TestReceptiveField:
    def test_single_conv(self):
        spec = ng.NetworkSpec(
            "t", ("image",),
            [ng.LayerSpec("Output", "output", ("image",), kernel=(1, 3, 3), maps=2)],
        )
        assert ng.receptive_field(spec) == (1, 3, 3)

    def test_two_stacked_convs_compose(self):
        spec = ng.NetworkSpec(
            "t", ("image",),
            [
                ng.LayerSpec("A", "conv", ("image",), kernel=(1, 3, 3), maps=1, act="tanh"),
                ng.LayerSpec("Output", "output", ("A",), kernel=(1, 3, 3), maps=2),
            ],
        )
        assert ng.receptive_field(spec) == (1, 5, 5)

    def test_vd2d_in_plane_field_is_odd(self):
        fz, fy, fx = ng.receptive_field(ng.build_preset("VD2D"))
        assert fy % 2 == 1 and fx % 2 == 1

    def test_pool_multiplies_downstream_dilation(self):
        spec = toy_spec()
        dil = {name: d for name, (d, _) in ng.trace(spec).items()}
        assert dil["A"] == (1, 1, 1)
        assert dil["P"] == (1, 2, 2)


class TestForward:
    def test_zero_weights_give_exactly_half(self, rng):
        spec = toy_spec()
        ps = ng.init_weights(spec, seed=0)
        for k in ps.kernels.values():
            k.weights[:] = 0.0
            k.bias[:] = 0.0
        probs, _ = ng.forward(spec, ps, rng.random((1, 1, 12, 12)))
        assert (probs == 0.5).all()

    def test_softmax_channels_sum_to_one(self, rng):
        spec = toy_spec()
        ps = ng.init_weights(spec, seed=3)
        probs, _ = ng.forward(spec, ps, rng.random((1, 1, 14, 14)))
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-6)
        assert (probs >= 0).all()

    def test_two_layer_net_matches_hand_computation(self):
        # one 2x2 ones-conv (tanh) into a 1x1 output conv with weights (1, -1)
        spec = ng.NetworkSpec(
            "t", ("image",),
            [
                ng.LayerSpec("A", "conv", ("image",), kernel=(1, 2, 2), maps=1, act="tanh"),
                ng.LayerSpec("Output", "output", ("A",), kernel=(1, 1, 1), maps=2),
            ],
        )
        ps = ng.ParamStore("t")
        ps.kernels["A"] = ng.KernelStack(np.ones((1, 1, 1, 2, 2)), np.array([0.1]))
        ps.kernels["Output"] = ng.KernelStack(
            np.array([1.0, -1.0]).reshape(2, 1, 1, 1, 1), np.zeros(2)
        )
        x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3) / 10.0
        probs, _ = ng.forward(spec, ps, x)
        # hand: window sums + bias, tanh, then softmax over (h, -h)
        sums = np.array([[0 + 1 + 3 + 4, 1 + 2 + 4 + 5], [3 + 4 + 6 + 7, 4 + 5 + 7 + 8]]) / 10.0
        h = np.tanh(sums + 0.1)
        expect = 1.0 / (1.0 + np.exp(2.0 * h))  # P(class 1) = softmax(-h vs h)
        np.testing.assert_allclose(probs[1, 0], expect, atol=1e-12)

    def test_undersized_input_names_limiting_axis(self):
        spec = ng.build_preset("VD2D", 0.05)
        ps = ng.init_weights(spec)
        with pytest.raises(ShapeError, match="axis y"):
            ng.forward(spec, ps, np.zeros((1, 1, 50, 200)))

    def test_arity_mismatch(self, rng):
        spec = ng.build_preset("VD2D3D", 0.05)
        ps = ng.init_weights(spec)
        with pytest.raises(ShapeError, match="input stream"):
            ng.forward(spec, ps, rng.random((1, 4, 120, 120)))

    def test_infer_forward_is_bitwise_deterministic(self, rng):
        spec = toy_spec()
        ps = ng.init_weights(spec, seed=9)
        x = rng.random((1, 1, 16, 16))
        a, _ = ng.forward(spec, ps, x)
        b, _ = ng.forward(spec, ps, x)
        assert (a == b).all()

    def test_dropout_only_active_in_train_mode(self, rng):
        spec = toy_spec()
        ps = ng.init_weights(spec, seed=1)
        x = rng.random((1, 1, 16, 16))
        infer1, _ = ng.forward(spec, ps, x, mode="infer", seed=1)
        infer2, _ = ng.forward(spec, ps, x, mode="infer", seed=2)
        assert (infer1 == infer2).all()
        train1, _ = ng.forward(spec, ps, x, mode="train", seed=1)
        assert not (train1 == infer1).all()

    def test_dense_equals_fragment_oracle_toy(self, rng):
        for combine in (False, True):
            spec = toy_spec(combine)
            ps = ng.init_weights(spec, seed=5)
            ins = [rng.random((1, 2, 13, 14)) for _ in range(spec.arity)]
            dense, _ = ng.forward(spec, ps, ins)
            frag = oracles.fragment_forward(spec, ps, ins)
            np.testing.assert_allclose(dense, frag, atol=1e-12)

    def test_fragment_oracle_agrees_with_patchwise_oracle(self, rng):
        spec = toy_spec()
        ps = ng.init_weights(spec, seed=6)
        x = rng.random((1, 1, 9, 10))
        frag = oracles.fragment_forward(spec, ps, x)
        patch = oracles.patchwise_forward(spec, ps, x)
        np.testing.assert_allclose(frag, patch, atol=1e-12)


class TestBackward:
    def _setup(self, rng, combine=False):
        spec = toy_spec(combine)
        ps = ng.init_weights(spec, seed=2)
        ins = [rng.random((1, 1, 12, 12)) for _ in range(spec.arity)]
        probs, cache = ng.forward(spec, ps, ins, mode="train", seed=7)
        return spec, ps, ins, probs, cache

    def test_uniform_output_gives_ln2(self, rng):
        spec = toy_spec()
        ps = ng.init_weights(spec, seed=0)
        for k in ps.kernels.values():
            k.weights[:] = 0.0
            k.bias[:] = 0.0
        x = rng.random((1, 1, 12, 12))
        probs, cache = ng.forward(spec, ps, x, mode="train")
        target = (rng.random(probs.shape[1:]) > 0.5).astype(np.uint8)
        w = np.ones(target.shape)
        _, err, _ = ng.backward(spec, ps, cache, target, w)
        np.testing.assert_allclose(err, np.log(2.0), rtol=1e-12)

    def test_matching_saturated_target_gives_zero_cls(self, rng):
        spec, ps, ins, probs, cache = self._setup(rng)
        # saturate the output distribution via the output bias
        ps2 = ps.copy()
        ps2.kernels["Output"].weights *= 0.0
        ps2.kernels["Output"].bias[:] = (20.0, -20.0)
        probs, cache = ng.forward(spec, ps2, ins, mode="train", seed=7)
        target = probs.argmax(axis=0).astype(np.uint8)
        grads, err, cls = ng.backward(spec, ps2, cache, target, np.ones(target.shape))
        assert cls == 0.0
        gmax = max(max(np.abs(g).max(), np.abs(gb).max()) for g, gb in grads.values())
        assert gmax < 1e-8

    def test_full_network_gradients_vs_finite_differences(self, rng):
        for combine in (False, True):
            spec, ps, ins, probs, cache = self._setup(rng, combine)
            target = (rng.random(probs.shape[1:]) > 0.5).astype(np.uint8)
            w = 1.0 + rng.random(target.shape)
            grads, err, cls = ng.backward(spec, ps, cache, target, w)

            def loss(store):
                pr, ca = ng.forward(spec, store, ins, mode="train", seed=7)
                return ng.loss_terms(pr, ca["logp"], target, w)[0]

            eps = 1e-6
            for name in grads:
                for _ in range(2):
                    idx = tuple(
                        int(rng.integers(0, s)) for s in ps.kernels[name].weights.shape
                    )
                    sp, sm = ps.copy(), ps.copy()
                    sp.kernels[name].weights[idx] += eps
                    sm.kernels[name].weights[idx] -= eps
                    fd = (loss(sp) - loss(sm)) / (2 * eps)
                    an = grads[name][0][idx]
                    assert abs(fd - an) / max(abs(fd), abs(an), 1e-9) < 1e-3

    def test_shape_mismatch(self, rng):
        spec, ps, ins, probs, cache = self._setup(rng)
        with pytest.raises(ShapeError):
            ng.backward(spec, ps, cache, np.zeros((2, 2)), np.ones((2, 2)))


class TestInitWeights:
    def test_same_seed_identical(self):
        spec = ng.build_preset("VD2D", 0.1)
        a = ng.init_weights(spec, seed=11)
        b = ng.init_weights(spec, seed=11)
        for name in a.kernels:
            assert (a.kernels[name].weights == b.kernels[name].weights).all()

    def test_different_seeds_differ(self):
        spec = ng.build_preset("VD2D", 0.1)
        a = ng.init_weights(spec, seed=11)
        b = ng.init_weights(spec, seed=12)
        assert any(
            (a.kernels[n].weights != b.kernels[n].weights).any() for n in a.kernels
        )

    def test_variance_tracks_fan_in(self):
        spec = ng.build_preset("VD2D")  # full width: >10k samples in big layers
        store = ng.init_weights(spec, seed=5)
        for name in ("Conv5", "Conv4b"):
            w = store.kernels[name].weights
            fan_in = int(np.prod(w.shape[1:]))
            assert w.size > 10_000
            assert abs(w.var() * fan_in - 1.0) < 0.2
            assert not store.kernels[name].bias.any()


class TestTransfer:
    def test_shared_layers_bit_identical(self):
        vd2d = ng.init_weights(ng.build_preset("VD2D", 0.1), seed=1)
        spec2 = ng.build_preset("VD2D3D", 0.1)
        out = ng.transfer_vd2d_into(vd2d, spec2, seed=2)
        for name in ("Conv1a", "Conv1b", "Conv1c", "Conv2a", "Conv3b"):
            assert (out.kernels[name].weights == vd2d.kernels[name].weights).all()
            assert (out.kernels[name].bias == vd2d.kernels[name].bias).all()

    def test_widened_kernels_put_plane_at_central_tap(self):
        vd2d = ng.init_weights(ng.build_preset("VD2D", 0.1), seed=1)
        spec2 = ng.build_preset("VD2D3D", 0.1)
        out = ng.transfer_vd2d_into(vd2d, spec2, seed=2)
        w = out.kernels["Conv4a"].weights  # kz widened 1 -> 2
        assert (w[:, :, 0] == vd2d.kernels["Conv4a"].weights[:, :, 0]).all()
        assert not w[:, :, 1].any()

    def test_widened_kernel_reproduces_2d_response_on_z_constant_input(self, rng):
        from vesselseg import volcore as vc

        w2d = rng.standard_normal((2, 3, 1, 3, 3))
        w3d = np.zeros((2, 3, 3, 3, 3))
        w3d[:, :, 1] = w2d[:, :, 0]
        plane = rng.random((3, 1, 8, 8))
        x = np.repeat(plane, 5, axis=1)  # constant along z
        r2 = vc.conv_direct(plane, vc.KernelStack(w2d))
        r3 = vc.conv_direct(x, vc.KernelStack(w3d))
        np.testing.assert_allclose(r3[:, 1], r2[:, 0], atol=1e-12)

    def test_fresh_layers_depend_on_seed(self):
        vd2d = ng.init_weights(ng.build_preset("VD2D", 0.1), seed=1)
        spec2 = ng.build_preset("VD2D3D", 0.1)
        a = ng.transfer_vd2d_into(vd2d, spec2, seed=2)
        b = ng.transfer_vd2d_into(vd2d, spec2, seed=3)
        assert (a.kernels["Conv4c"].weights != b.kernels["Conv4c"].weights).any()
        assert (a.kernels["Output"].weights != b.kernels["Output"].weights).any()

    def test_recursive_stream_seeded_from_image_stream_without_sharing(self):
        vd2d = ng.init_weights(ng.build_preset("VD2D", 0.1), seed=1)
        spec2 = ng.build_preset("VD2D3D", 0.1)
        out = ng.transfer_vd2d_into(vd2d, spec2, seed=2)
        for rname, sname in (("Conv1aR", "Conv1a"), ("Conv1cR", "Conv1c")):
            assert (out.kernels[rname].weights == vd2d.kernels[sname].weights).all()
            # separate buffers: updating one stream must not touch the other
            assert out.kernels[rname].weights is not out.kernels[sname].weights

    def test_incompatible_pairing_raises(self):
        vd2d = ng.init_weights(ng.build_preset("VD2D", 0.1), seed=1)
        with pytest.raises(ValueError):
            ng.transfer_vd2d_into(vd2d, ng.build_preset("VD2D", 0.1))
        with pytest.raises(ValueError, match="incompatible preset pairing"):
            ng.transfer_vd2d_into(vd2d, ng.build_preset("VD2D3D", 0.5))

    def test_transfer_preserves_image_stream_function_through_conv4b(self, rng):
        """Zeroed recursive stream + central-tap widening reproduce the 2-d
        features (through the last transferred layer) on z-constant input."""
        spec1 = ng.build_preset("VD2D", 0.1)
        spec2 = ng.build_preset("VD2D3D", 0.1)
        vd2d = ng.init_weights(spec1, seed=4)
        t = ng.transfer_vd2d_into(vd2d, spec2, seed=5)
        for name in ("Conv1aR", "Conv1bR", "Conv1cR"):
            t.kernels[name].weights[:] = 0.0
            t.kernels[name].bias[:] = 0.0
        rf2 = ng.receptive_field(spec2)
        plane = rng.random((1, 1, rf2[1] + 3, rf2[2] + 3))
        x3 = np.repeat(plane, rf2[0] + 1, axis=1)
        _, cache1 = ng.forward(spec1, vd2d, plane)
        _, cache2 = ng.forward(spec2, t, [x3, np.zeros_like(x3)])
        a1 = cache1["acts"]["Conv4b"]
        a2 = cache2["acts"]["Conv4b"]
        # every surviving z slice of the 3-d net equals the 2-d response
        for z in range(a2.shape[1]):
            np.testing.assert_allclose(a2[:, z], a1[:, 0], atol=1e-5)


class TestCheckpoints:
    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        spec = ng.build_preset("VD2D3D", 0.1)
        store = ng.init_weights(spec, seed=8)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        ng.save_checkpoint(p1, store)
        loaded = ng.load_checkpoint(p1)
        ng.save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.preset_id == "VD2D3D" and loaded.width_scale == 0.1
        again = ng.load_checkpoint(p2)
        for name in loaded.kernels:
            assert (loaded.kernels[name].weights == again.kernels[name].weights).all()

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"hello\nend\n")
        with pytest.raises(ValueError):
            ng.load_checkpoint(p)

    def test_loaded_params_drive_forward(self, tmp_path, rng):
        spec = toy_spec()
        store = ng.init_weights(spec, seed=0)
        ng.save_checkpoint(tmp_path / "t.ckpt", store)
        loaded = ng.load_checkpoint(tmp_path / "t.ckpt")
        loaded.preset_id = spec.preset_id
        x = rng.random((1, 1, 14, 14))
        a, _ = ng.forward(spec, store, x)
        # float32 serialization rounds the weights; outputs stay close
        b, _ = ng.forward(spec, loaded, x)
        np.testing.assert_allclose(a, b, atol=1e-5)
