import numpy as np
import pytest

from lcforge.autodiff import Tensor, no_grad
from lcforge.lc_block import FoldError, LCBlock
from lcforge.models import (ModelSpec, build_resnet_lc, effective_filters, fold_model, param_census,
                            spatial_layers)
from lcforge.nn import Conv2d


def count_oracle(depth, width, expansion=1, k=3, lc=False, classes=10, c0=3):
    """Parameter count written out from the architecture description, independent of the builders."""
    n = (depth - 2) // 6

    def spatial(ci, co):
        if lc:
            return co * expansion * ci * k * k + co * co * expansion
        return co * ci * k * k

    total = spatial(c0, width) + 2 * width
    ci = width
    for co in (width, 2 * width, 4 * width):
        for b in range(n):
            total += spatial(ci, co) + spatial(co, co) + 4 * co
            if ci != co:
                total += ci * co + 2 * co
            ci = co
    return total + 4 * width * classes + classes


def test_resnet20_parameter_count():
    m = build_resnet_lc(ModelSpec(20, 16, use_lc=False))
    assert param_census(m)["total"] == 272_474 == count_oracle(20, 16)


@pytest.mark.parametrize("depth,width,e,k", [(8, 4, 1, 3), (14, 8, 8, 3), (8, 8, 2, 5), (20, 16, 4, 9)])
def test_lc_parameter_count(depth, width, e, k):
    m = build_resnet_lc(ModelSpec(depth, width, e, k))
    assert param_census(m)["total"] == count_oracle(depth, width, e, k, lc=True)


def test_census_frozen_split():
    spec = ModelSpec(14, 8, 8, frozen_spatial=True)
    c = param_census(build_resnet_lc(spec))
    frozen_expected = sum(t["count"] for t in c["per_tensor"] if t["kind"] == "lc_spatial")
    assert c["frozen_count"] == frozen_expected > 0
    assert c["trainable_count"] + c["frozen_count"] == c["total"]
    assert all(t["frozen"] == (t["kind"] == "lc_spatial") for t in c["per_tensor"])
    # shortcuts stay plain and trainable
    shortcuts = [t for t in c["per_tensor"] if t["kind"] == "shortcut"]
    assert len(shortcuts) == 2 and not any(t["frozen"] for t in shortcuts)
    assert sum(layer["frozen"] for layer in c["per_layer"]) == c["frozen_count"]


@pytest.mark.parametrize("depth", [8, 14, 20, 32])
def test_spatial_layer_count(depth):
    m = build_resnet_lc(ModelSpec(depth, 4))
    layers = spatial_layers(m)
    assert len(layers) == depth - 1  # stem + two per block
    assert all(isinstance(mod, LCBlock) for _, mod in layers)
    assert layers[0][0] == "stem"


@pytest.mark.parametrize("depth", [7, 9, 12, 2])
def test_depth_validation(depth):
    with pytest.raises(ValueError, match="6n"):
        ModelSpec(depth)


def test_spec_validation_and_names():
    with pytest.raises(ValueError, match="kernel_size"):
        ModelSpec(kernel_size=4)
    with pytest.raises(ValueError, match="only apply"):
        ModelSpec(expansion=2, use_lc=False)
    assert ModelSpec(20, 16, 8).name == "ResNet-LC-20-16x8"
    assert ModelSpec(14, 8, use_lc=False).name == "ResNet-14-8"
    spec = ModelSpec(14, 8, 2, 5, True, "bnrelu")
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError, match="unknown"):
        ModelSpec.from_dict({"depth": 8, "colour": 1})


def test_forward_shapes():
    m = build_resnet_lc(ModelSpec(8, 4, 2))
    x = Tensor(np.random.default_rng(0).standard_normal((3, 3, 16, 16)))
    assert m(x).shape == (3, 10)
    m1 = build_resnet_lc(ModelSpec(8, 4, input_channels=1, num_classes=7))
    assert m1(Tensor(np.zeros((2, 1, 8, 8)))).shape == (2, 7)


def test_same_seed_same_weights():
    a = build_resnet_lc(ModelSpec(8, 4, 2), seed=5).state_dict()
    b = build_resnet_lc(ModelSpec(8, 4, 2), seed=5).state_dict()
    c = build_resnet_lc(ModelSpec(8, 4, 2), seed=6).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["stem.spatial"], c["stem.spatial"])


def test_spatial_init_independent_of_expansion_stream_layout():
    # streams are per layer, so the stem's first filter bank slice is unaffected by later layers
    a = build_resnet_lc(ModelSpec(8, 4, 1, frozen_spatial=True), seed=0)
    b = build_resnet_lc(ModelSpec(14, 4, 1, frozen_spatial=True), seed=0)
    np.testing.assert_array_equal(a.stem.spatial.data, b.stem.spatial.data)


def test_fold_model_equivalence(f64):
    rng = np.random.default_rng(0)
    m = build_resnet_lc(ModelSpec(8, 4, 3, frozen_spatial=True), seed=1)
    for _, buf in m.named_buffers():
        buf[...] = rng.uniform(0.5, 1.5, buf.shape)  # non-trivial running stats
    m.eval()
    folded = fold_model(m).eval()
    assert not any(isinstance(mod, LCBlock) for _, mod in folded.named_modules())
    x = Tensor(rng.standard_normal((4, 3, 12, 12)))
    with no_grad():
        np.testing.assert_allclose(folded(x).data, m(x).data, atol=1e-10)
    for name, mod in spatial_layers(folded):
        assert isinstance(mod, Conv2d)
        np.testing.assert_array_equal(effective_filters(mod), effective_filters(dict(m.named_modules())[name]))


def test_fold_model_errors():
    with pytest.raises(FoldError, match="nothing to fold"):
        fold_model(build_resnet_lc(ModelSpec(8, 4, use_lc=False)))
    with pytest.raises(FoldError, match="intermediate"):
        fold_model(build_resnet_lc(ModelSpec(8, 4, 2, intermediate="relu")))
