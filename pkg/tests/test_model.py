import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from astrosnn.errors import CheckpointError, ConfigError, ParameterError, ShapeError
from astrosnn.model import (ModelConfig, build_model, decode, encode, forward_lm, init_states,
                            load_checkpoint, read_checkpoint, save_checkpoint, step_lm, tau_schedule)


def small(seed=0, **kw):
    cfg = dict(layers=2, dim=8, heads=2, vocab=16, context_len=32, dtype="f64", seed=seed,
               tau_a_min=1.5, tau_a_max=8.0)
    cfg.update(kw)
    m = build_model(ModelConfig(**cfg))
    # give the zero-initialised head some weight so logits carry signal
    m.params["head"].data = np.random.default_rng(seed + 1).normal(size=m.head.shape).astype(m.head.dtype)
    return m


class TestTauSchedule:
    def test_endpoints(self):
        t = tau_schedule(8)
        assert t[0] == 32 and t[-1] == pytest.approx(512, rel=1e-14)

    def test_second_head(self):
        assert tau_schedule(8)[1] == pytest.approx(47.5518, abs=1e-4)
        assert tau_schedule(8)[1] == pytest.approx(32 * 16 ** (1 / 7), rel=1e-14)

    def test_two_heads_and_one(self):
        assert tau_schedule(2) == pytest.approx([32, 512])
        assert tau_schedule(1) == [32]

    def test_geometric(self):
        t = np.array(tau_schedule(8))
        assert np.allclose(t[1:] / t[:-1], 16 ** (1 / 7))

    def test_efold_divisors(self):
        m = build_model(ModelConfig(dim=16, heads=2, efold=True))
        p = m.layers[0]
        assert p.tau_n == pytest.approx(math.exp(0.5))
        assert p.tau_a == pytest.approx((math.exp(1 / 32), math.exp(1 / 512)))
        assert build_model(ModelConfig(dim=16, heads=2)).layers[0].tau_a == (32.0, 512.0)

    def test_bad_range(self):
        with pytest.raises(ParameterError):
            tau_schedule(4, 512, 32)


class TestBuild:
    def test_parameter_count(self):
        m = build_model(ModelConfig(layers=1, dim=8, heads=2, vocab=16, norm=False, ffn=False))
        assert m.num_parameters() == 512

    def test_seeded_determinism(self):
        a = build_model(ModelConfig(dim=16, heads=2, seed=3))
        b = build_model(ModelConfig(dim=16, heads=2, seed=3))
        c = build_model(ModelConfig(dim=16, heads=2, seed=4))
        assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
        assert a.params["layers.0.w_x"].data.tobytes() != c.params["layers.0.w_x"].data.tobytes()

    @pytest.mark.parametrize("kw", [dict(heads=3, dim=8), dict(layers=0), dict(vocab=1),
                                    dict(tau_a_min=600.0), dict(dtype="f16")])
    def test_invalid_configs(self, kw):
        with pytest.raises((ConfigError, ParameterError)):
            build_model(ModelConfig(**kw))

    def test_config_dict_round_trip(self):
        c = ModelConfig(dim=16, heads=4, ffn=True)
        assert ModelConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({**c.to_dict(), "nope": 1})
        legacy = {k: v for k, v in c.to_dict().items() if k != "efold"}
        assert ModelConfig.from_dict(legacy).efold is False

    def test_initial_prediction_is_uniform(self):
        m = build_model(ModelConfig(dim=16, heads=2, context_len=8))
        z = forward_lm(m, np.arange(8)).data
        assert np.all(z == 0)

    def test_state_size(self):
        m = build_model(ModelConfig(layers=2, dim=128, heads=8))
        assert m.state_size() == 2 * (128 + 8 * 16 * 16)
        assert sum(s.size() for s in init_states(m)) == m.state_size()


class TestForward:
    def test_single_token_shape(self):
        assert forward_lm(small(), [3]).shape == (1, 16)

    def test_modes_agree(self):
        m = small(1)
        x = np.random.default_rng(2).integers(0, 16, size=(2, 12))
        par = forward_lm(m, x, "parallel").data
        assert np.abs(forward_lm(m, x, "recurrent").data - par).max() < 1e-8
        assert np.abs(forward_lm(m, x, "chunked", chunk=5).data - par).max() < 1e-8

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([1, 2, 4]), st.booleans(), st.booleans())
    def test_modes_agree_random_configs(self, seed, heads, norm, ffn):
        m = small(seed % 1000, heads=heads, norm=norm, ffn=ffn)
        x = np.random.default_rng(seed).integers(0, 16, size=9)
        par = forward_lm(m, x).data
        assert np.abs(forward_lm(m, x, "recurrent").data - par).max() < 1e-8

    def test_modes_agree_with_efold(self):
        m = small(2, efold=True)
        x = np.random.default_rng(3).integers(0, 16, size=(2, 20))
        par = forward_lm(m, x).data
        assert np.abs(forward_lm(m, x, "recurrent").data - par).max() < 1e-8
        assert np.abs(forward_lm(m, x, "chunked", chunk=6).data - par).max() < 1e-8

    def test_truncation_causality(self):
        m = small(3)
        x = np.random.default_rng(4).integers(0, 16, size=20)
        full = forward_lm(m, x).data
        for t in (1, 7, 19):
            # equal up to BLAS blocking differences between matrix sizes
            assert np.abs(forward_lm(m, x[:t]).data - full[:t]).max() < 1e-12

    def test_step_lm_matches(self):
        m = small(5)
        x = np.random.default_rng(6).integers(0, 16, size=10)
        full = forward_lm(m, x).data
        states = init_states(m)
        for t, tok in enumerate(x):
            z, states = step_lm(m, states, tok)
            assert np.abs(z.data - full[t]).max() < 1e-8

    def test_inter_layer_inputs_binary(self):
        m = small(7, norm=False, ffn=False)
        from astrosnn import amsu, tensor as tn
        x = tn.embedding(m.embed, np.arange(10))
        s, _ = amsu.forward_parallel(m.layers[0], x)
        assert set(np.unique(s.data)) <= {0.0, 1.0}

    def test_errors(self):
        m = small()
        with pytest.raises(IndexError):
            forward_lm(m, [0, 16])
        with pytest.raises(ShapeError):
            forward_lm(m, np.zeros(33, dtype=int))
        with pytest.raises(ConfigError):
            forward_lm(m, [1, 2], mode="sideways")


class TestTokenizer:
    @given(st.binary(max_size=200))
    def test_round_trip(self, b):
        assert decode(encode(b)) == b

    def test_every_byte_one_id(self):
        ids = encode(bytes(range(256)))
        assert ids.tolist() == list(range(256))

    def test_text(self):
        assert decode(encode("héllo")).decode("utf-8") == "héllo"


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = small(8, ffn=True, dtype="f32")
        m.step = 42
        m.optim_moments = {"m/embed": np.ones((16, 8), np.float32), "v/embed": np.full((16, 8), 2.0, np.float32)}
        p = tmp_path / "m.ckpt"
        save_checkpoint(m, p)
        back = load_checkpoint(p)
        assert back.config == m.config and back.step == 42
        for k in m.params:
            assert back.params[k].data.tobytes() == m.params[k].data.tobytes()
            assert back.params[k].dtype == m.params[k].dtype
        assert np.array_equal(back.optim_moments["v/embed"], m.optim_moments["v/embed"])
        x = np.arange(10) % 16
        assert forward_lm(back, x).data.tobytes() == forward_lm(m, x).data.tobytes()

    def test_header_layout(self, tmp_path):
        m = small(9)
        p = tmp_path / "m.ckpt"
        save_checkpoint(m, p)
        raw = p.read_bytes()
        assert raw[:4] == b"ASNN" and struct.unpack("<I", raw[4:8]) == (1,)
        (n,) = struct.unpack("<Q", raw[8:16])
        blob, tensors = read_checkpoint(p)
        assert blob["dim"] == 8 and blob["step"] == 0
        (count,) = struct.unpack("<I", raw[16 + n:20 + n])
        assert count == len(tensors) == len(m.params)
        (ln,) = struct.unpack("<H", raw[20 + n:22 + n])
        name = raw[22 + n:22 + n + ln].decode()
        tag, rank = raw[22 + n + ln], raw[23 + n + ln]
        assert name == "embed" and tag == 1 and rank == 2

    def test_truncated(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(small(), p)
        raw = p.read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:len(raw) - 100])
        with pytest.raises(CheckpointError, match="tensor table"):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(small(), p)
        p.write_bytes(b"XXXX" + p.read_bytes()[4:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_version_checked_before_tensors(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(small(), p)
        raw = bytearray(p.read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        p.write_bytes(bytes(raw[:12]))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_efold_survives_round_trip(self, tmp_path):
        save_checkpoint(small(efold=True), tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.config.efold and back.layers[0].tau_n == pytest.approx(math.exp(0.5))

    def test_config_mismatch(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(small(dim=8), p)
        expected = ModelConfig(layers=2, dim=16, heads=2, vocab=16, context_len=32, dtype="f64",
                               tau_a_min=1.5, tau_a_max=8.0)
        with pytest.raises(ConfigError, match="dim"):
            load_checkpoint(p, expected=expected)

    def test_trailing_garbage(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(small(), p)
        p.write_bytes(p.read_bytes() + b"\0")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(p)


def test_untrained_loss_is_log_vocab():
    from astrosnn import tensor as tn
    m = build_model(ModelConfig(context_len=16))
    x = np.random.default_rng(0).integers(0, 256, size=(2, 17))
    loss = tn.cross_entropy_logits(forward_lm(m, x[:, :-1]), x[:, 1:]).item()
    assert abs(loss - math.log(256)) < 1e-6
