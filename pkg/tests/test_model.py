import struct

import numpy as np
import pytest

from conftest import max_rel_err, numeric_grad
from crnn_mer.dataset import Batch
from crnn_mer.layers import ConfigError
from crnn_mer.model import (CRNN, CheckpointError, ModelSpec, build, count_params, glorot_limit,
                            load, save)
from crnn_mer.numerics import DimensionError, Rng
from crnn_mer.training import TrainConfig, objective

# Exact trainable-parameter counts, pinned from the layer-wise tally:
#   conv 3*3*1*8 + 8 = 80, batch norm 2*8 = 16
#   per branch: FC F*8*8 + 8, BiGRU 2*3*(8*8 + 8*8 + 8) = 816, maxout 2*16*O + 2*O
BRANCHED_260 = 35092
UNBRANCHED_260 = 17628
BRANCHED_64 = 10004


def micro(branched=True, dropout=0.0, seed=0):
    return CRNN(ModelSpec(4, cnn_filters=2, fc_units=2, gru_units=2, branched=branched,
                          dropout_rate=dropout), Rng(seed))


def test_branch_prefixes_disjoint():
    m = build(ModelSpec(260), Rng(0))
    val = {k for k in m.params if k.startswith("valence/")}
    aro = {k for k in m.params if k.startswith("arousal/")}
    assert val and aro and not (val & aro)
    assert {k.split("/", 1)[1] for k in val} == {k.split("/", 1)[1] for k in aro}
    assert not any(k.startswith("shared/") for k in m.params)


def test_unbranched_has_single_shared_branch():
    m = build(ModelSpec(260, branched=False), Rng(0))
    assert {k.split("/")[0] for k in m.params} == {"conv", "bn", "shared"}
    assert m.params["shared/maxout/pieces"].shape == (2, 16, 2)


def test_parameter_shapes_f260():
    m = build(ModelSpec(260), Rng(0))
    assert m.params["conv/kernel"].shape == (3, 3, 1, 8)
    assert m.params["valence/fc/W"].shape == (260 * 8, 8)
    assert m.params["arousal/fc/W"].shape == (260 * 8, 8)
    assert m.params["valence/gru/fwd_W"].shape == (8, 24)
    assert m.params["valence/gru/bwd_U"].shape == (8, 24)
    assert m.params["valence/maxout/pieces"].shape == (2, 16, 1)


def test_same_seed_same_params():
    a, b = build(ModelSpec(16), Rng(4)), build(ModelSpec(16), Rng(4))
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    c = build(ModelSpec(16), Rng(5))
    assert a.params["conv/kernel"].tobytes() != c.params["conv/kernel"].tobytes()


def test_initializer():
    m = build(ModelSpec(16), Rng(0))
    for name, p in m.params.items():
        leaf = name.rsplit("/", 1)[1]
        if leaf == "gamma":
            np.testing.assert_array_equal(p, 1.0)
        elif leaf in ("bias", "b", "beta", "fwd_b", "bwd_b"):
            np.testing.assert_array_equal(p, 0.0)
        else:
            assert np.all(np.abs(p) <= glorot_limit(p.shape)) and np.any(p != 0)
    assert glorot_limit((3, 3, 1, 8)) == pytest.approx(np.sqrt(6 / (9 + 72)))
    assert glorot_limit((128, 8)) == pytest.approx(np.sqrt(6 / 136))


@pytest.mark.parametrize("spec,expected", [
    (ModelSpec(260), BRANCHED_260),
    (ModelSpec(260, branched=False), UNBRANCHED_260),
    (ModelSpec(64), BRANCHED_64),
])
def test_count_params_pinned(spec, expected):
    assert count_params(spec) == expected
    assert build(spec, Rng(0)).n_params() == expected


def test_count_params_branch_relation():
    b, u = ModelSpec(260), ModelSpec(260, branched=False)
    fc = 260 * 8 * 8 + 8
    gru = 2 * 3 * (8 * 8 + 8 * 8 + 8)
    one_output_head = 2 * 16 * 1 + 2 * 1
    two_output_head = 2 * 16 * 2 + 2 * 2
    assert count_params(b) == count_params(u) + (fc + gru + one_output_head) - (two_output_head - one_output_head)


@pytest.mark.parametrize("branched", [True, False])
def test_forward_shape_and_range(branched, rng):
    m = CRNN(ModelSpec(5, branched=branched), Rng(1))
    for B, L in [(1, 1), (3, 7)]:
        x = rng.uniform(-50, 50, (B, L, 5))  # large inputs push outputs beyond [-1, 1]
        y = m.forward(x)
        assert y.shape == (B, L, 2)
        assert np.all(np.abs(y) <= 1.0)


def test_forward_rejects_wrong_feature_dim():
    with pytest.raises(DimensionError):
        CRNN(ModelSpec(5), Rng(0)).forward(np.zeros((1, 2, 4)))


def test_infer_forward_deterministic(rng):
    m = CRNN(ModelSpec(6, dropout_rate=0.5), Rng(2))
    x = rng.uniform(-1, 1, (2, 4, 6))
    assert m.forward(x).tobytes() == m.forward(x).tobytes()


def test_train_forward_with_dropout_needs_rng():
    with pytest.raises(ConfigError):
        CRNN(ModelSpec(3, dropout_rate=0.5), Rng(0)).forward(np.zeros((1, 2, 3)), train=True)


def test_branch_independence_perturbation():
    r = Rng(77)
    for trial in range(100):
        m = CRNN(ModelSpec(4, cnn_filters=2, fc_units=3, gru_units=2), Rng(trial))
        x = r.uniform(-1, 1, (2, 3, 4))
        base = m.forward(x)
        for branch, other_ch, own_ch in (("valence", 1, 0), ("arousal", 0, 1)):
            saved = {k: v.copy() for k, v in m.params.items() if k.startswith(branch + "/")}
            for k in saved:
                m.params[k] += r.uniform(-0.5, 0.5, m.params[k].shape)
            out = m.forward(x)
            assert out[..., other_ch].tobytes() == base[..., other_ch].tobytes()
            for k, v in saved.items():
                m.params[k][...] = v
        # zeroing the arousal branch touches only channel 1
        for k in [k for k in m.params if k.startswith("arousal/")]:
            m.params[k][...] = 0.0
        out = m.forward(x)
        assert out[..., 0].tobytes() == base[..., 0].tobytes()


def test_branch_independence_gradient(rng):
    m = micro()
    x = rng.uniform(-1, 1, (2, 3, 4))
    m.forward(x, train=True)
    g = np.zeros((2, 3, 2))
    g[..., 1] = rng.uniform(-1, 1, (2, 3))
    m.zero_grad()
    m.backward(g)
    for k, v in m.grads.items():
        if k.startswith("valence/"):
            np.testing.assert_array_equal(v, 0.0)
        if k.startswith("arousal/"):
            assert np.any(v != 0)


@pytest.mark.parametrize("branched", [True, False])
def test_full_model_gradient(branched, rng):
    m = micro(branched)
    x, y = rng.uniform(-1, 1, (2, 3, 4)), rng.uniform(-1, 1, (2, 3, 2))
    batch = Batch(x, y, np.ones((2, 3)))
    cfg = TrainConfig(l1=0.1, l2=0.001, dropout=0.0)
    objective(m, batch, cfg)

    def f():
        return objective(m, batch, cfg, backward=False)[0]

    grads = {k: g.copy() for k, g in m.grads.items()}
    worst = max(max_rel_err(grads[k], numeric_grad(f, p)) for k, p in m.params.items())
    assert worst < 1e-4


# ---------------------------------------------------------------- checkpoints

def trained_like(seed=3):
    m = CRNN(ModelSpec(6, branched=True), Rng(seed))
    r = Rng(seed + 1)
    for v in m.state().values():
        v += r.uniform(-0.1, 0.1, v.shape)
    return m


def test_save_load_bitwise(tmp_path):
    m = trained_like()
    save(m, tmp_path / "m.ckpt")
    m2 = load(tmp_path / "m.ckpt")
    assert m2.spec == m.spec
    assert list(m2.state()) == list(m.state())
    for k, v in m.state().items():
        assert m2.state()[k].tobytes() == v.tobytes()


def test_save_load_forward_identical(tmp_path, rng):
    for branched in (True, False):
        m = CRNN(ModelSpec(6, branched=branched), Rng(0))
        save(m, tmp_path / "m.ckpt")
        x = rng.uniform(-1, 1, (3, 5, 6))
        assert load(tmp_path / "m.ckpt").forward(x).tobytes() == m.forward(x).tobytes()


def test_truncated_checkpoint(tmp_path):
    save(trained_like(), tmp_path / "m.ckpt")
    data = (tmp_path / "m.ckpt").read_bytes()
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        (tmp_path / "t.ckpt").write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load(tmp_path / "t.ckpt")


def test_bad_magic_and_version(tmp_path):
    save(trained_like(), tmp_path / "m.ckpt")
    data = bytearray((tmp_path / "m.ckpt").read_bytes())
    (tmp_path / "a").write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(CheckpointError, match="not a CRNN"):
        load(tmp_path / "a")
    data[8:12] = struct.pack("<I", 99)
    (tmp_path / "b").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load(tmp_path / "b")
    with pytest.raises(CheckpointError):
        load(tmp_path / "missing")


def test_checkpoint_layout(tmp_path):
    m = CRNN(ModelSpec(2, cnn_filters=1, fc_units=1, gru_units=1), Rng(0))
    save(m, tmp_path / "m.ckpt")
    data = (tmp_path / "m.ckpt").read_bytes()
    assert data[:8] == b"CRNNMER\0"
    version, n = struct.unpack("<II", data[8:16])
    assert version == 1
    pos = 16 + n
    (count,) = struct.unpack("<I", data[pos:pos + 4])
    assert count == len(m.state())
    pos += 4
    (name_len,) = struct.unpack("<I", data[pos:pos + 4])
    assert data[pos + 4:pos + 4 + name_len] == b"conv/kernel"
    pos += 4 + name_len
    rank, *dims = struct.unpack("<I4Q", data[pos:pos + 36])
    assert rank == 4 and dims == [3, 3, 1, 1]
    first = struct.unpack("<9d", data[pos + 36:pos + 36 + 72])
    np.testing.assert_array_equal(first, m.params["conv/kernel"].ravel())


def test_load_state_shape_mismatch():
    m = CRNN(ModelSpec(3), Rng(0))
    state = {k: v.copy() for k, v in m.state().items()}
    state["conv/kernel"] = np.zeros((2, 2))
    with pytest.raises(CheckpointError):
        m.load_state(state)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec(0)
    with pytest.raises(ConfigError):
        ModelSpec(4, dropout_rate=1.0)
    with pytest.raises(ConfigError):
        ModelSpec.from_dict({"feature_dim": 3, "colour": "red"})
