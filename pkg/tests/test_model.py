import numpy as np
import pytest

from splicefx import model as mdl
from splicefx import nncore as nn
from splicefx.jpeg import encode
from splicefx.splicegen import generate_image


def conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def bn_params(c):
    return 2 * c


def involution_params(c, k=3, r=4):
    return (c // r) * c + c // r + k * k * (c // r) + k * k


def branch_oracle(variant):
    total, cin = 0, 1
    for cout in (8, 16, 32, 32):
        if variant == "cnn":
            total += conv_params(cin, cout, 3)
        else:
            total += conv_params(cin, cout, 1) + involution_params(cout)
        total += bn_params(cout)
        cin = cout
    # 16x128 pooled four times -> 1x8
    return total + 32 * 1 * 8 * 16 + 16


FUSION = 32 * 64 + 64 + 2 * 64 + 64 * 2 + 2
TINY = (conv_params(3, 8, 3) + bn_params(8) + conv_params(8, 16, 3) + bn_params(16)
        + conv_params(16, 16, 3) + bn_params(16) + 16 * 16 + 16)


def test_oracle_values():
    assert branch_oracle("cnn") == 19424
    assert branch_oracle("inn") == 6896
    assert FUSION == 2370


@pytest.mark.parametrize("branch", ["cnn", "inn"])
@pytest.mark.parametrize("spatial,embed_dim", [("none", 0), ("tiny", 0), ("embed", 64)])
def test_param_counts(branch, spatial, embed_dim):
    m = mdl.build(mdl.ModelConfig(branch, spatial, embed_dim))
    counts = m.branch_param_counts()
    assert counts["compression"] == branch_oracle(branch)
    assert counts["fusion"] == FUSION
    spatial_expected = {"none": 0, "tiny": TINY, "embed": embed_dim * 16 + 16}[spatial]
    assert counts["spatial"] == spatial_expected
    assert mdl.param_count(m) == sum(counts.values()) < mdl.PARAM_LIMIT


def test_totals():
    cnn = mdl.param_count(mdl.build(mdl.ModelConfig("cnn")))
    inn = mdl.param_count(mdl.build(mdl.ModelConfig("inn")))
    assert cnn == 19424 + 2370 == 21794
    assert inn < cnn


def test_parameter_budget():
    with pytest.raises(mdl.ConfigError):
        mdl.build(mdl.ModelConfig("cnn", "embed", 5000))


@pytest.mark.parametrize("cfg", [mdl.ModelConfig("vgg"), mdl.ModelConfig("cnn", "resnet"),
                                 mdl.ModelConfig("cnn", "embed", 0),
                                 mdl.ModelConfig("cnn", "tiny", 8)])
def test_bad_config(cfg):
    with pytest.raises(mdl.ConfigError):
        mdl.build(cfg)


def test_build_deterministic():
    a = mdl.build(mdl.ModelConfig("inn", "tiny"), seed=4)
    b = mdl.build(mdl.ModelConfig("inn", "tiny"), seed=4)
    for (_, la, ka), (_, lb, kb) in zip(a.named_tensors(), b.named_tensors()):
        np.testing.assert_array_equal(la.params[ka], lb.params[kb])


def test_none_adapter_ignores_spatial(rng):
    m = mdl.build(mdl.ModelConfig("cnn"))
    f = rng.standard_normal((3, 16, 128)).astype(np.float32)
    a = m.forward(None, f)
    b = m.forward(rng.standard_normal((3, 3, 64, 64)), f)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(nn.softmax(a.astype(np.float64)).sum(axis=1), 1, atol=1e-6)


def test_shape_mismatch(rng):
    m = mdl.build(mdl.ModelConfig("cnn", "tiny"))
    with pytest.raises(nn.ShapeMismatch):
        m.forward(rng.standard_normal((2, 3, 64, 64)), rng.standard_normal((2, 16, 64)))
    with pytest.raises(nn.ShapeMismatch):
        m.forward(rng.standard_normal((2, 3, 32, 32)), rng.standard_normal((2, 16, 128)))
    with pytest.raises(nn.ShapeMismatch):
        m.forward(None, rng.standard_normal((2, 16, 128)))


def _perturb_buffers(m, rng):
    for _, layer, key in m.named_tensors("buffers"):
        layer.buffers[key] = rng.uniform(0.5, 2, layer.buffers[key].shape).astype(np.float32)


@pytest.mark.parametrize("branch,spatial,dim", [("cnn", "none", 0), ("inn", "tiny", 0),
                                                ("cnn", "embed", 12)])
def test_save_load_bit_exact(tmp_path, rng, branch, spatial, dim):
    m = mdl.build(mdl.ModelConfig(branch, spatial, dim), seed=9)
    _perturb_buffers(m, rng)
    path = tmp_path / "m.splc"
    mdl.save(m, path, metadata={"seed": 9, "epochs": 3, "final_lr": 0.001})
    m2, meta = mdl.load(path, with_metadata=True)
    assert meta == {"seed": 9, "epochs": 3, "final_lr": 0.001}
    assert m2.config == m.config
    f = rng.standard_normal((100, 16, 128)).astype(np.float32)
    s = None
    if spatial == "tiny":
        s = rng.standard_normal((100, 3, 64, 64)).astype(np.float32)
    elif spatial == "embed":
        s = rng.standard_normal((100, dim)).astype(np.float32)
    np.testing.assert_array_equal(m.forward(s, f), m2.forward(s, f))


def test_checkpoint_header(tmp_path):
    path = tmp_path / "m.splc"
    mdl.save(mdl.build(mdl.ModelConfig()), path)
    raw = path.read_bytes()
    assert raw[:4] == b"SPLC"
    assert int.from_bytes(raw[4:8], "little") == mdl.CKPT_VERSION


def test_bad_magic(tmp_path):
    path = tmp_path / "m.splc"
    mdl.save(mdl.build(mdl.ModelConfig()), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(mdl.LoadError):
        mdl.load(path)


def test_truncated(tmp_path):
    path = tmp_path / "m.splc"
    mdl.save(mdl.build(mdl.ModelConfig()), path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(mdl.LoadError):
        mdl.load(path)


@pytest.fixture(scope="module")
def jpeg():
    return encode(generate_image(1, 5, 96), 80)


class TestPredict:
    @pytest.mark.parametrize("spatial", ["none", "tiny"])
    def test_contract(self, jpeg, spatial):
        m = mdl.build(mdl.ModelConfig("cnn", spatial), seed=1)
        a = mdl.predict(m, jpeg)
        b = mdl.predict(m, jpeg)
        assert a == b
        assert 0.0 <= a["p_spliced"] <= 1.0
        assert a["label"] == ("spliced" if a["p_spliced"] > 0.5 else "original")

    def test_missing_embedding(self, jpeg):
        m = mdl.build(mdl.ModelConfig("cnn", "embed", 4))
        with pytest.raises(mdl.MissingEmbedding):
            mdl.predict(m, jpeg)
        out = mdl.predict(m, jpeg, embedding=np.ones(4))
        assert 0.0 <= out["p_spliced"] <= 1.0


def test_spatial_tensor(rng):
    px = rng.integers(0, 256, (100, 130, 3), dtype=np.uint8)
    t = mdl.spatial_tensor(px)
    assert t.shape == (3, 64, 64) and t.dtype == np.float32
    np.testing.assert_allclose(t.mean(axis=(1, 2)), 0, atol=1e-5)
    gray = mdl.spatial_tensor(px[..., 0])
    assert gray.shape == (3, 64, 64)


def test_embeddings_round_trip(tmp_path, rng):
    table = {"a/x.jpg": rng.standard_normal(5), "b/y.jpg": rng.standard_normal(5)}
    path = tmp_path / "e.embd"
    mdl.write_embeddings(path, table)
    assert path.read_bytes()[:4] == b"EMBD"
    dim, got = mdl.read_embeddings(path)
    assert dim == 5
    np.testing.assert_allclose(got["a/x.jpg"], table["a/x.jpg"], rtol=1e-6)
    # basename fallback
    np.testing.assert_allclose(mdl.lookup_embedding(got, "elsewhere/y.jpg"), table["b/y.jpg"],
                               rtol=1e-6)
    with pytest.raises(mdl.MissingEmbedding):
        mdl.lookup_embedding(got, "z.jpg")
