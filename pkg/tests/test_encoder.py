import numpy as np
import pytest

from tsp_transformer import tensor as T
from tsp_transformer.encoder import encode
from tsp_transformer.model import ModelConfig, TSPModel
from tsp_transformer.tensor import Tensor, gradcheck
from tsp_transformer.tsp import generate, stack

from conftest import SMALL, TINY, make_model


def test_output_shape():
    model = make_model(SMALL)
    out = model.encode(stack(generate(3, 2, 0)))
    assert out.shape == (2, 4, SMALL.d)
    assert np.all(np.isfinite(out.data))


def test_mixed_sizes_rejected():
    with pytest.raises(ValueError):
        stack([generate(3, 1, 0)[0], generate(4, 1, 0)[0]])


@pytest.mark.parametrize("seed", range(10))
def test_permutation_equivariance_eval_mode(seed):
    model = make_model(SMALL, seed=seed)
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 15))
    coords = rng.random((2, n, 2))
    perm = rng.permutation(n)
    a = model.encode(coords).data
    b = model.encode(coords[:, perm]).data
    assert np.max(np.abs(a[:, 1:][:, perm] - b[:, 1:])) < 1e-5
    assert np.max(np.abs(a[:, 0] - b[:, 0])) < 1e-5


def test_identical_instances_identical_rows():
    model = make_model(SMALL)
    inst = generate(6, 1, 5)[0].coords
    out = model.encode(np.stack([inst, inst]), training=True).data
    np.testing.assert_array_equal(out[0], out[1])


def test_eval_mode_is_deterministic():
    model = make_model(SMALL)
    coords = stack(generate(7, 3, 1))
    np.testing.assert_array_equal(model.encode(coords).data, model.encode(coords).data)


def test_eval_without_stats_errors():
    model = TSPModel.init(SMALL, 0, np.float64)
    with pytest.raises(RuntimeError, match="uninitialized running statistics"):
        model.encode(stack(generate(5, 1, 0)))


def test_start_token_shape_and_dims():
    model = TSPModel.init(ModelConfig(d=16, heads=4, enc_layers=1, dec_layers=1, d_ff=8), 0)
    assert model.params["enc.start"].shape == (2,)
    assert model.params["enc.embed.W"].shape == (2, 16)


def test_encoder_gradcheck():
    model = make_model(TINY, n=5)
    coords = stack(generate(5, 2, 3))
    proj = np.random.default_rng(0).standard_normal((2, 6, TINY.d))
    names = [k for k in model.params if k.startswith("enc.")]

    def loss():
        out = encode(coords, model.params, model.stats, model.config, True)
        return T.sum(T.mul(out, Tensor(proj)))

    errs = gradcheck(loss, [model.params[k] for k in names])
    worst = max(zip(errs, names))
    assert worst[0] < 1e-4, worst
