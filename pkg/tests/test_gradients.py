import pytest

from chronosurv.config import ArchConfig
from gradcheck import input_gradient_errors, loss_errors, model_block_errors

CONV = ArchConfig(input_pool=8)
DENSE = ArchConfig(encoder="dense")
BLOCKS = [
    ("conv", CONV, ("enc.conv",)),
    ("conv-projection", CONV, ("enc.proj",)),
    ("dense", DENSE, ("enc.",)),
    ("fusion", CONV, ("time.",)),
    ("classifier", CONV, ("cls.",)),
    ("classifier-no-time", ArchConfig(input_pool=8, use_time=False), ("cls.", "enc.proj")),
]


@pytest.mark.parametrize("name,arch,prefixes", BLOCKS, ids=[b[0] for b in BLOCKS])
def test_model_block_gradients(name, arch, prefixes):
    errs, rejected = model_block_errors(arch, prefixes)
    assert errs.size == 100
    assert rejected <= 10
    assert errs.max() < 1e-4


def test_input_gradient():
    errs, rejected = input_gradient_errors(CONV)
    assert errs.size == 100 and rejected <= 10
    assert errs.max() < 1e-4


def test_kink_detection_sees_a_flip():
    # a probe straddling a ReLU kink must be recognised rather than compared
    import numpy as np

    from chronosurv import model as M
    from gradcheck import EPS, relu_pattern

    params = M.init_params(DENSE, np.random.default_rng(0))
    x = np.zeros((1, DENSE.n_features))
    x[0, 0] = 1.0
    params["enc.fc1.w"][0, 0] = 1.0
    params["enc.fc1.b"][0] = -1.0  # unit 0 sits exactly on its kink
    pats = []
    for sign in (1, -1):
        q = params.copy()
        q["enc.fc1.b"][0] += sign * EPS
        _, cache = M.forward_batch(q, x, [0], [0.5])
        pats.append(relu_pattern(cache))
    assert pats[0] != pats[1]


def test_loss_gradients():
    errs = loss_errors()
    assert errs["focal"].max() < 1e-6
    assert errs["scl"].max() < 1e-6
    assert errs["cox"].max() < 1e-6
