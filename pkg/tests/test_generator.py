import numpy as np
import pytest
import torch

from camnet.errors import ConfigError, ShapeError
from camnet.generator import (CascadeConfig, init_weights, load_checkpoint, parameter_census, read_checkpoint_header,
                              rrdb_forward, save_checkpoint)
from camnet.pyramid import build_pyramid
from helpers import TINY, random_inputs, random_latents
from oracles import naive_conv2d


class TestConfig:
    @pytest.mark.parametrize("bad", [{"K": 0}, {"feat_ch": 0}, {"beta": 0.0}, {"beta": 1.5}])
    def test_rejects_invalid(self, bad):
        with pytest.raises(ConfigError):
            CascadeConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            CascadeConfig.from_dict({"K": 2, "channels": 3})


class TestInit:
    def test_deterministic(self):
        a, b = init_weights(TINY, 3), init_weights(TINY, 3)
        for (na, pa), (nb, pb) in zip(a.named_parameters_sorted(), b.named_parameters_sorted()):
            assert na == nb and torch.equal(pa, pb)

    def test_different_seeds_differ(self):
        a, b = init_weights(TINY, 3), init_weights(TINY, 4)
        assert not torch.equal(a.stages[0].fuse.weight_v, b.stages[0].fuse.weight_v)

    def test_census_hand_count(self):
        cfg = CascadeConfig(K=1, feat_ch=8, rrdb_per_module=1, dense_blocks_per_rrdb=1,
                            convs_per_dense_block=2, growth_ch=4)
        fuse = 8 * 9 * 9 + 8 + 8                       # (1 input + 8 latent) -> 8, with gain and bias
        dense_block = (4 * 8 * 9 + 4 + 4) + (8 * 12 * 9 + 8 + 8)
        out = 3 * 8 * 9 + 3 + 3
        mapping = 3 * (64 * 64 + 64) + (16 * 64 + 16)  # three hidden layers, head of 2*8 outputs
        expected = fuse + dense_block + out + mapping
        assert expected == 15582
        assert parameter_census(cfg) == expected
        assert init_weights(cfg, 0).num_parameters() == expected

    @pytest.mark.parametrize("wn,mapping", [(True, True), (False, True), (True, False), (False, False)])
    def test_census_matches_module(self, wn, mapping):
        cfg = CascadeConfig(K=3, weight_norm=wn, mapping_enabled=mapping)
        assert parameter_census(cfg) == init_weights(cfg, 0).num_parameters()

    def test_weight_norm_flag_controls_all_convs(self):
        names = [n for n, _ in init_weights(TINY, 0).named_parameters()]
        assert not any(n.endswith(".weight") and "mapping" not in n for n in names)
        plain = CascadeConfig(**{**TINY.__dict__, "weight_norm": False})
        names = [n for n, _ in init_weights(plain, 0).named_parameters()]
        assert not any("weight_v" in n or "weight_g" in n for n in names)

    def test_modulation_is_identity_at_zero_latent(self):
        net = init_weights(TINY, 0)
        gamma, delta = net.stages[1].mapping(torch.zeros(2, TINY.latent_global_dim))
        torch.testing.assert_close(gamma, torch.ones_like(gamma))
        torch.testing.assert_close(delta, torch.zeros_like(delta))


class TestRRDB:
    def test_zero_weights_is_identity(self):
        net = init_weights(TINY, 0)
        rrdb = net.stages[0].rrdbs[0]
        with torch.no_grad():
            for p in rrdb.parameters():
                p.zero_()
        x = torch.randn(2, TINY.feat_ch, 4, 4)
        torch.testing.assert_close(rrdb_forward(rrdb, x), x)

    def test_small_beta_is_identity(self):
        cfg = CascadeConfig(**{**TINY.__dict__, "beta": 1e-30})
        rrdb = init_weights(cfg, 0).stages[0].rrdbs[0]
        x = torch.randn(1, cfg.feat_ch, 4, 4)
        torch.testing.assert_close(rrdb_forward(rrdb, x), x)

    def test_single_pointwise_conv_formula(self):
        cfg = CascadeConfig(K=1, feat_ch=3, dense_blocks_per_rrdb=1, convs_per_dense_block=1, weight_norm=False,
                            beta=0.3)
        rrdb = init_weights(cfg, 0).stages[0].rrdbs[0]
        conv = rrdb.blocks[0].convs[0]
        # shrink to a 1x1 kernel: embed it in the centre of the 3x3 kernel
        w = torch.randn(3, 3)
        with torch.no_grad():
            conv.weight.zero_()
            conv.weight[:, :, 1, 1] = w
            conv.bias.zero_()
        x = torch.randn(1, 3, 4, 4)
        expected = x + 0.3 * torch.einsum("oc,nchw->nohw", w, x)
        torch.testing.assert_close(rrdb_forward(rrdb, x), expected, atol=1e-5, rtol=1e-5)

    def test_modulation_applied(self):
        rrdb = init_weights(TINY, 0).stages[0].rrdbs[0]
        x = torch.randn(2, TINY.feat_ch, 4, 4)
        gamma, delta = torch.full((2, TINY.feat_ch), 2.0), torch.full((2, TINY.feat_ch), 0.5)
        torch.testing.assert_close(rrdb_forward(rrdb, x, gamma, delta), 2.0 * rrdb(x) + 0.5)

    def test_channel_mismatch(self):
        rrdb = init_weights(TINY, 0).stages[0].rrdbs[0]
        with pytest.raises(ShapeError):
            rrdb(torch.randn(1, TINY.feat_ch + 1, 4, 4))


# -- independent straight-line oracle of one module ----------------------------

def _lrelu(x, s):
    return np.where(x > 0, x, s * x)


def _np(p):
    return p.detach().double().numpy()


def _conv_oracle(conv, x):
    if conv.weight_norm:
        v, g = _np(conv.weight_v), _np(conv.weight_g)
        w = v * (g / np.sqrt((v.reshape(len(v), -1) ** 2).sum(1)))[:, None, None, None]
    else:
        w = _np(conv.weight)
    return naive_conv2d(x, w, _np(conv.bias), 1, 1)


def module_oracle(stage, cfg, cond, prev, code):
    parts = [cond, code[0]]
    if prev is not None:
        parts.append(prev.repeat(2, axis=2).repeat(2, axis=3))
    feats = _conv_oracle(stage.fuse, np.concatenate(parts, axis=1))
    h = feats
    z = code[1]
    if stage.mapping is not None:
        for layer in stage.mapping.layers[:-1]:
            z = _lrelu(z @ _np(layer.weight).T + _np(layer.bias), cfg.leaky_slope)
        head = stage.mapping.layers[-1]
        mod = (z @ _np(head.weight).T + _np(head.bias)).reshape(-1, cfg.rrdb_per_module, 2, cfg.feat_ch)
    for i, rrdb in enumerate(stage.rrdbs):
        b = h
        for block in rrdb.blocks:
            acts = [b]
            for j, conv in enumerate(block.convs):
                a = _conv_oracle(conv, np.concatenate(acts, axis=1))
                if j < len(block.convs) - 1:
                    a = _lrelu(a, cfg.leaky_slope)
                acts.append(a)
            b = b + cfg.beta * acts[-1]
        h = b
        if stage.mapping is not None:
            h = h * mod[:, i, 0][:, :, None, None] + mod[:, i, 1][:, :, None, None]
    return _conv_oracle(stage.out, feats + cfg.beta * h)


class TestModuleForward:
    def test_zero_output_conv_gives_zero_image(self):
        net = init_weights(TINY, 0)
        with torch.no_grad():
            net.stages[0].out.weight_g.zero_()
            net.stages[0].out.bias.zero_()
        inp, lat = random_inputs(TINY), random_latents(TINY)
        out = net.module_forward(0, inp.levels[0], None, lat.codes[0])
        assert torch.count_nonzero(out) == 0

    def test_mapping_disabled_equals_identity_modulation(self):
        off = CascadeConfig(**{**TINY.__dict__, "mapping_enabled": False})
        net_on, net_off = init_weights(TINY, 5), init_weights(off, 5)
        with torch.no_grad():
            for stage in net_on.stages:
                stage.mapping.layers[-1].weight.zero_()
        inp, lat = random_inputs(TINY), random_latents(TINY)
        torch.testing.assert_close(net_on(inp, lat)[-1], net_off(inp, lat)[-1])

    @pytest.mark.parametrize("wn", [True, False])
    def test_matches_straight_line_oracle(self, wn):
        cfg = CascadeConfig(**{**TINY.__dict__, "weight_norm": wn})
        net = init_weights(cfg, 11)
        inp, lat = random_inputs(cfg, batch=2), random_latents(cfg, batch=2)
        prev = net.module_forward(0, inp.levels[0], None, lat.codes[0])
        out = net.module_forward(1, inp.levels[1], prev, lat.codes[1])
        ref0 = module_oracle(net.stages[0], cfg, _np(inp.levels[0]), None,
                             (_np(lat.codes[0].spatial), _np(lat.codes[0].global_)))
        ref1 = module_oracle(net.stages[1], cfg, _np(inp.levels[1]), ref0,
                             (_np(lat.codes[1].spatial), _np(lat.codes[1].global_)))
        np.testing.assert_allclose(prev.detach().numpy(), ref0, atol=1e-4)
        np.testing.assert_allclose(out.detach().numpy(), ref1, atol=1e-4)

    def test_resolution_mismatch(self):
        net = init_weights(TINY, 0)
        lat = random_latents(TINY)
        with pytest.raises(ShapeError):
            net.module_forward(0, torch.zeros(1, 1, 8, 8), None, lat.codes[0])
        with pytest.raises(ShapeError):
            net.module_forward(1, torch.zeros(1, 1, 8, 8), None, lat.codes[1])


class TestCascade:
    def test_up_to_one_is_module_zero(self):
        net = init_weights(TINY, 0)
        inp, lat = random_inputs(TINY), random_latents(TINY)
        torch.testing.assert_close(net.cascade_forward(inp, lat, 1)[0],
                                   net.module_forward(0, inp.levels[0], None, lat.codes[0]))

    def test_output_shapes(self):
        cfg = CascadeConfig(K=4, feat_ch=4, rrdb_per_module=1, dense_blocks_per_rrdb=1, convs_per_dense_block=2,
                            growth_ch=2, latent_global_dim=4, mapping_layers=1)
        net = init_weights(cfg, 0)
        for up_to in range(1, 5):
            outs = net.cascade_forward(random_inputs(cfg), random_latents(cfg), up_to)
            assert [o.shape[-1] for o in outs] == cfg.resolutions[:up_to]
            assert all(o.shape[1] == cfg.out_ch for o in outs)

    def test_composition(self):
        net = init_weights(TINY, 2)
        inp, lat = random_inputs(TINY, 3), random_latents(TINY, 3)
        full = net(inp, lat)
        o0 = net.module_forward(0, inp.levels[0], None, lat.codes[0])
        o1 = net.module_forward(1, inp.levels[1], o0, lat.codes[1])
        torch.testing.assert_close(full[0], o0)
        torch.testing.assert_close(full[1], o1)

    def test_depth_errors(self):
        net = init_weights(TINY, 0)
        with pytest.raises(ShapeError):
            net.cascade_forward(random_inputs(TINY), random_latents(TINY), 3)
        with pytest.raises(ShapeError):
            net.cascade_forward(build_pyramid(torch.rand(1, 1, 4, 4), 1), random_latents(TINY), 2)

    @pytest.mark.parametrize("seed", range(10))
    def test_latent_sensitivity(self, seed):
        net = init_weights(TINY, seed)
        inp = random_inputs(TINY)
        a = net(inp, random_latents(TINY, seed=2 * seed))[-1]
        b = net(inp, random_latents(TINY, seed=2 * seed + 1))[-1]
        assert float((a - b).detach().norm()) > 0

    def test_gradient_reaches_every_parameter_group(self):
        net = init_weights(TINY, 0)
        inp, lat = random_inputs(TINY, 2), random_latents(TINY, 2)
        targets = build_pyramid(torch.rand(2, 3, 8, 8), 2)
        loss = sum(((o - t) ** 2).mean() for o, t in zip(net(inp, lat), targets.levels))
        loss.backward()
        for name, p in net.named_parameters():
            assert p.grad is not None and float(p.grad.norm()) > 1e-12, name


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = init_weights(TINY, 9)
        path = tmp_path / "m.camn"
        save_checkpoint(path, net, seed=9, step=42)
        loaded, header = load_checkpoint(path)
        assert header["seed"] == 9 and header["step"] == 42
        assert loaded.cfg == TINY
        for (na, pa), (nb, pb) in zip(net.named_parameters_sorted(), loaded.named_parameters_sorted()):
            assert na == nb and torch.equal(pa, pb)

    def test_layout(self, tmp_path):
        net = init_weights(TINY, 1)
        path = tmp_path / "m.camn"
        save_checkpoint(path, net, seed=1, step=0)
        raw = path.read_bytes()
        assert raw[:4] == b"CAMN"
        assert int.from_bytes(raw[4:8], "little") == 1
        names = [n for n, _ in read_checkpoint_header(path)["params"]]
        assert names == sorted(names)
        assert len(raw) - 12 - int.from_bytes(raw[8:12], "little") == 4 * net.num_parameters()

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.camn"
        save_checkpoint(path, init_weights(TINY, 1), seed=1, step=0)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(ConfigError, match="version"):
            load_checkpoint(path)
