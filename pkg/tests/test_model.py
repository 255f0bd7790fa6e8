import numpy as np
import pytest

import msagcn.tensor as T
from msagcn import model as M
from msagcn.graphs import ConfigurationError, default_pyramid

PYR2 = default_pyramid(16, num_scales=2)
PYR3 = default_pyramid(16, num_scales=3)

TINY = M.MsaGcnConfig(
    scales=(0, 1),
    stages=(M.StageConfig(4, 1, 1, 1), M.StageConfig(8, 1, 0, 2)),
)


def tiny_model(seed=0):
    return M.build(TINY, PYR2, seed=seed)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        M.MsaGcnConfig(scales=(1, 2))            # must include the finest
    with pytest.raises(ConfigurationError):
        M.MsaGcnConfig(scales=(0, 2, 1))         # must be sorted
    with pytest.raises(ConfigurationError):
        M.MsaGcnConfig(kernel_pair=(4, 9))       # even kernel
    with pytest.raises(ConfigurationError):
        M.MsaGcnConfig(kernel_pair=(5, 5))
    with pytest.raises(ConfigurationError):
        M.MsaGcnConfig(stages=())
    with pytest.raises(ConfigurationError):
        M.MsaGcnConfig(stages=(M.StageConfig(8, stride=3),))
    with pytest.raises(ConfigurationError):
        M.MsaGcnConfig(temporal_mode="lstm")


def test_config_dict_roundtrip_and_unknown_keys():
    cfg = M.MsaGcnConfig()
    again = M.MsaGcnConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ConfigurationError):
        M.MsaGcnConfig.from_dict({"scales": [0], "bogus": 1})


def test_default_stage_plan():
    cfg = M.MsaGcnConfig()
    assert [s.channels for s in cfg.stages] == [32, 64, 128, 256]
    assert [s.stride for s in cfg.stages] == [1, 2, 2, 2]
    assert cfg.final_channels == 256


def test_build_assigns_unique_names():
    m = tiny_model()
    names = [n for n, _ in m.state_items()]
    assert len(names) == len(set(names))
    assert all(p.name == n for n, p in m.state_items())


def test_build_is_deterministic():
    a, b = tiny_model(3), tiny_model(3)
    for (na, pa), (nb, pb) in zip(a.state_items(), b.state_items()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_forward_shape_and_distribution():
    m = tiny_model()
    x = T.Tensor(np.random.default_rng(0).normal(size=(3, 3, 16, 16)))
    p = m.forward(x)
    assert p.shape == (3, 4)
    np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-9)


def test_forward_rejects_wrong_shapes():
    m = tiny_model()
    with pytest.raises(T.ShapeError):
        m.forward(T.Tensor(np.zeros((2, 3, 16, 10))))
    with pytest.raises(T.ShapeError):
        m.forward(T.Tensor(np.zeros((2, 4, 16, 16))))


def test_scale_out_of_pyramid_range():
    with pytest.raises(ConfigurationError):
        M.build(M.MsaGcnConfig(scales=(0, 1, 2)), PYR2)


def test_input_standardization_applied():
    m = tiny_model()
    x = np.random.default_rng(1).normal(size=(2, 3, 16, 16))
    base = m.forward(T.Tensor(x)).data
    m.set_input_stats(np.array([1.0, 2.0, 3.0]), np.array([2.0, 2.0, 2.0]))
    shifted = m.forward(T.Tensor(x * 2.0 + np.array([1.0, 2.0, 3.0])[None, :, None, None])).data
    np.testing.assert_allclose(shifted, base, atol=1e-9)


def test_has_csfm_parameters():
    assert tiny_model().has_csfm_parameters()
    single = M.MsaGcnConfig(scales=(0,), stages=(M.StageConfig(4, 1, 1, 1),))
    assert not M.build(single, PYR2).has_csfm_parameters()


def test_single_tcn_mode_builds_and_runs():
    cfg = M.MsaGcnConfig(scales=(0, 1), temporal_mode="single_tcn",
                         stages=(M.StageConfig(4, 1, 0, 1),))
    m = M.build(cfg, PYR2)
    p = m.forward(T.Tensor(np.random.default_rng(2).normal(size=(2, 3, 12, 16))))
    assert p.shape == (2, 4)


def test_checkpoint_roundtrip_is_exact_at_float32(tmp_path):
    m = tiny_model(5)
    m.set_input_stats(np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0]))
    path = tmp_path / "model.ckpt"
    M.save_checkpoint(m, path)
    again = M.load_checkpoint(path)
    assert again.config == m.config
    for (na, pa), (nb, pb) in zip(m.state_items(), again.state_items()):
        assert na == nb
        np.testing.assert_array_equal(pa.data.astype(np.float32),
                                      pb.data.astype(np.float32))
    # a second save of the loaded model is byte-identical
    path2 = tmp_path / "model2.ckpt"
    M.save_checkpoint(again, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_preserves_predictions(tmp_path):
    m = tiny_model(6)
    x = np.random.default_rng(3).normal(size=(2, 3, 16, 16))
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(m, path)
    again = M.load_checkpoint(path)
    a = m.forward(T.Tensor(x)).data
    b = again.forward(T.Tensor(x)).data
    np.testing.assert_allclose(a, b, atol=1e-6)   # float32 storage


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(M.CheckpointFormatError, match="magic"):
        M.load_checkpoint(path)


def test_checkpoint_truncation(tmp_path):
    m = tiny_model()
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(m, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(M.CheckpointCorruptError, match="truncated"):
        M.load_checkpoint(path)


def test_checkpoint_trailing_bytes(tmp_path):
    m = tiny_model()
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(m, path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(M.CheckpointCorruptError, match="trailing"):
        M.load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    m = tiny_model()
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(m, path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(M.CheckpointFormatError, match="version"):
        M.load_checkpoint(path)


def test_parameter_count_positive_and_stable():
    m = tiny_model()
    assert m.parameter_count() == tiny_model().parameter_count() > 0
