import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronosurv import model as M
from chronosurv.config import ArchConfig
from chronosurv.errors import ContractViolation, InvalidInputError, NonFiniteInputError
from chronosurv.projection import COLLAGE_SHAPE

POOLED = ArchConfig(input_pool=8)


@pytest.fixture(scope="module")
def net():
    rng = np.random.default_rng(0)
    params = M.init_params(POOLED, rng)
    params.flat += rng.normal(0, 0.02, params.flat.shape)
    x = rng.random(COLLAGE_SHAPE)
    return params, x


def _hand_count(arch):
    n, c_in = 0, arch.in_channels
    for w in arch.conv_widths:
        n += w * c_in * 9 + w
        c_in = w
    n += arch.embed_dim * c_in + arch.embed_dim
    n += arch.time_hidden * 2 + arch.embed_dim * arch.time_hidden + arch.embed_dim
    n += arch.cls_hidden * arch.embed_dim + arch.cls_hidden + arch.cls_hidden + 1
    return n


def test_param_count_reference():
    arch = ArchConfig()
    assert M.param_count(arch) == 33329 == _hand_count(arch)
    dense = ArchConfig(encoder="dense")
    assert M.param_count(dense) == 64 * 15 + 64 + 64 * 64 + 64 + 2176 + 2080 + 33


def test_layout_partitions_flat_vector():
    for arch in (ArchConfig(), ArchConfig(encoder="dense"), ArchConfig(use_time=False)):
        end = 0
        for _, offset, shape in M.layout_table(arch):
            assert offset == end
            end += int(np.prod(shape))
        assert end == M.param_count(arch)


def test_saturated_classifier(net):
    params, x = net
    p = params.copy()
    p["cls.fc1.w"][...] = 0
    p["cls.fc1.b"][...] = 0
    p["cls.fc2.w"][...] = 0
    p["cls.fc2.b"][...] = 20.0
    for t in (0.0, 0.3, 1.0):
        prob, _ = M.forward(p, x, t)
        assert prob == pytest.approx(0.9999999979388463, abs=1e-15)


def test_forward_deterministic_and_in_range(net):
    params, x = net
    a, _ = M.forward(params, x, 0.4)
    b, _ = M.forward(params, x, 0.4)
    assert a == b
    assert 0.0 < a < 1.0


def test_time_ones_fusion_identity(net):
    params, x = net
    p = params.copy()
    p["time.fc1.w"][...] = 0
    p["time.fc1.b"][...] = 0
    p["time.fc2.w"][...] = 0
    p["time.fc2.b"][...] = 1.0
    probs = [M.forward(p, x, t)[0] for t in np.linspace(0, 1, 7)]
    assert len(set(probs)) == 1
    free = M.ModelParams(ArchConfig(input_pool=8, use_time=False))
    for name in free.names():
        free[name] = p[name]
    assert M.forward(free, x, 0.0)[0] == probs[0]


def test_forward_rejects_bad_inputs(net):
    params, x = net
    bad = x.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteInputError):
        M.forward(params, bad, 0.5)
    with pytest.raises(InvalidInputError):
        M.forward(params, x[:11], 0.5)
    with pytest.raises(InvalidInputError):
        M.forward(params, x, 1.5)


def test_backward_zero_upstream(net):
    params, x = net
    _, cache = M.forward(params, x, 0.5)
    assert not M.backward(params, cache, 0.0).flat.any()


def test_backward_duplicate_sample_doubles_gradient(net):
    params, x = net
    xp = M.prepare_input(POOLED, x)[None]
    _, one = M.forward_batch(params, xp, [0], [0.3])
    _, two = M.forward_batch(params, xp, [0, 0], [0.3, 0.3])
    g1, _ = M.backward_batch(params, one, [1.0])
    g2, _ = M.backward_batch(params, two, [1.0, 1.0])
    # equal up to rounding: BLAS may fuse the two identical products
    np.testing.assert_allclose(g2.flat, 2 * g1.flat, rtol=1e-12, atol=1e-15)


def test_backward_rejects_foreign_cache(net):
    params, x = net
    other = M.init_params(ArchConfig(input_pool=8, use_time=False), np.random.default_rng(1))
    _, cache = M.forward(other, x, 0.5)
    with pytest.raises(ContractViolation):
        M.backward(params, cache, 1.0)
    with pytest.raises(ContractViolation):
        M.backward(params, object(), 1.0)


def test_batched_matches_single(net):
    params, x = net
    xp = M.prepare_input(POOLED, x)
    ts = [0.0, 0.25, 0.9]
    batched = M.predict_probs(params, xp, ts)
    single = [M.forward(params, x, t)[0] for t in ts]
    np.testing.assert_allclose(batched, single, rtol=0, atol=1e-15)


def test_normalize_collage():
    arr = np.zeros((2, 3, 4))
    arr[0] = np.arange(12).reshape(3, 4)
    arr[1] = 5.0
    out = M.normalize_collage(arr)
    assert out[0].min() == 0.0 and out[0].max() == 1.0
    assert not out[1].any()


def test_pool_input_requires_divisible_shape():
    assert M.pool_input(np.ones((1, 8, 8)), 4).shape == (1, 2, 2)
    with pytest.raises(InvalidInputError):
        M.pool_input(np.ones((1, 6, 8)), 4)


# ------------------------------------------------------------------ curves

def test_predict_curve_grid_length_one(net):
    params, x = net
    curve = M.predict_curve(params, x, [365])
    assert curve.probs.shape == (1,)
    assert curve.probs[0] == M.forward(params, x, 0.2)[0]


def test_predict_curve_errors(net):
    params, x = net
    with pytest.raises(InvalidInputError):
        M.predict_curve(params, x, [])
    with pytest.raises(InvalidInputError):
        M.predict_curve(params, x, [0, 30, 30])


@settings(max_examples=30)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_monotonize_running_min(probs):
    out = M.monotonize(probs)
    assert np.all(np.diff(out) <= 0)
    assert np.all(out <= np.asarray(probs))
    assert out[0] == probs[0]


def test_predict_curve_monotonized(net):
    from chronosurv.sampling import evaluation_grid

    params, x = net
    curve = M.predict_curve(params, x, evaluation_grid(), monotonize_output=True)
    assert curve.monotonized and curve.probs.size == 62
    assert np.all(np.diff(curve.probs) <= 0)


# ---------------------------------------------------------------- saliency

def test_saliency_zero_when_classifier_is_constant(net):
    params, x = net
    p = params.copy()
    for name in ("cls.fc1.w", "cls.fc2.w"):
        p[name][...] = 0
    heat = M.saliency(p, x, 0.5)
    assert heat.shape == (400, 512) and not heat.any()


def test_saliency_normalized(net):
    params, x = net
    heat = M.saliency(params, x, 0.5)
    assert heat.min() >= 0 and heat.max() == 1.0


def test_saliency_confined_to_tumor_channels():
    arch = ArchConfig()
    rng = np.random.default_rng(3)
    params = M.init_params(arch, rng)
    params["enc.conv0.w"][:, :10] = 0
    params["enc.conv0.w"][:, 10:] = np.abs(params["enc.conv0.w"][:, 10:])
    params["enc.conv0.b"][...] = 0
    x = np.zeros(COLLAGE_SHAPE)
    tumor = np.zeros((400, 512), dtype=bool)
    tumor[180:200, 100:130] = True
    tumor[180:200, 300:320] = True
    x[10:, tumor] = rng.uniform(0.5, 1.0, size=(2, tumor.sum()))
    heat = M.saliency(params, x, 0.5)
    assert heat.max() == 1.0
    # zero bias keeps first-layer units off unless their 3x3 window touches the
    # tumor, and such a window reaches at most two pixels past it
    near = np.zeros_like(tumor)
    rows, cols = np.nonzero(tumor)
    for dr in range(-2, 3):
        for dc in range(-2, 3):
            near[np.clip(rows + dr, 0, 399), np.clip(cols + dc, 0, 511)] = True
    assert not heat[~near].any()
    assert heat[tumor].any()


# ------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path, net):
    params, _ = net
    path = M.save_checkpoint(tmp_path / "ck.bin", params, seed=4, epoch=9, meta={"val_ids": ["p1"]})
    loaded, header = M.load_checkpoint(path)
    assert np.array_equal(loaded.flat, params.flat)
    assert loaded.arch == params.arch
    assert (header["seed"], header["epoch"], header["meta"]) == (4, 9, {"val_ids": ["p1"]})


def test_checkpoint_layout_mismatch(tmp_path, net):
    params, _ = net
    path = M.save_checkpoint(tmp_path / "ck.bin", params)
    raw = bytearray(path.read_bytes())
    raw[raw.index(b'"embed_dim": 64') + 13:raw.index(b'"embed_dim": 64') + 15] = b"32"
    path.write_bytes(bytes(raw))
    with pytest.raises(ContractViolation):
        M.load_checkpoint(path)
    (tmp_path / "junk.bin").write_bytes(b"nope")
    with pytest.raises(ContractViolation):
        M.load_checkpoint(tmp_path / "junk.bin")
