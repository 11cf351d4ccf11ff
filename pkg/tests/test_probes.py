import csv
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convscope.arch import ArchitectureSpec
from convscope.layers import ParameterError
from convscope.model import Model
from convscope.network import init_params, net_forward
from convscope.probes import (ProbeInputError, correspondence_score, feature_difference, feature_spread,
                              invariance_sweep, occlude_part, occlusion_sweep, paste_square, sign3,
                              strongest_map, write_invariance_csv, write_occlusion_report)

SMALL = """\
input c=3 h=16 w=16
conv out=4 k=3 pad=1
relu
pool k=2 stride=2
flatten
fc out=5
softmax classes=5
"""
LINEAR = "input c=1 h=4 w=4\nflatten\nfc out=3\nsoftmax classes=3\n"


@pytest.fixture(scope="module")
def model():
    arch = ArchitectureSpec.from_text(SMALL)
    return Model(arch, init_params(arch, np.random.default_rng(0), 0.2))


@pytest.fixture
def image():
    return np.random.default_rng(1).normal(size=(3, 16, 16))


def test_paste_square_clips_at_border():
    x = np.ones((1, 4, 4))
    out = paste_square(x, 2, 3, 3, 0.0)
    assert out.sum() == 16 - 2
    assert x.sum() == 16  # input untouched


def test_occlusion_with_noop_fill_is_flat(model):
    x = np.full((3, 16, 16), 0.7)
    rep = occlusion_sweep(model, x, label=2, layer=2, fill=0.7)
    assert rep.prob_map.shape == (4, 4)
    assert np.ptp(rep.prob_map) < 1e-12
    assert abs(rep.prob_map[0, 0] - rep.baseline[0]) < 1e-12
    assert np.ptp(rep.act_map) < 1e-9


def test_occlusion_grid_geometry(model, image):
    rep = occlusion_sweep(model, image, label=0, layer=1, occ_size=4, occ_stride=4)
    assert rep.positions == [0, 4, 8, 12]
    assert rep.centres.tolist() == [1.5, 5.5, 9.5, 13.5]
    assert rep.map_index == strongest_map(model, image, 1)
    # one grid cell equals a manual forward of the occluded input
    manual = net_forward(model.arch, model.params, paste_square(image, 4, 8, 4, 0.0)[None]).probs[0, 0]
    assert rep.prob_map[1, 2] == pytest.approx(manual, abs=1e-12)


def test_full_size_occluder_is_blank_input(model, image):
    rep = occlusion_sweep(model, image, label=3, layer=1, occ_size=16, occ_stride=1, map_index=0)
    assert rep.prob_map.shape == (1, 1)
    blank = net_forward(model.arch, model.params, np.zeros((1, 3, 16, 16))).probs[0, 3]
    assert rep.prob_map[0, 0] == pytest.approx(blank, abs=1e-12)


def test_occlusion_parameter_errors(model, image):
    with pytest.raises(ParameterError):
        occlusion_sweep(model, image, 0, 1, occ_stride=0)
    with pytest.raises(ParameterError):
        occlusion_sweep(model, image, 0, 1, occ_size=17)


def test_feature_difference_cases(model, image):
    assert not np.any(feature_difference(model, image, image, 2))
    other = image.copy()
    other[:, :4, :4] = 0
    d = feature_difference(model, image, other, 2)
    a = net_forward(model.arch, model.params, image[None]).outputs[2]
    b = net_forward(model.arch, model.params, other[None]).outputs[2]
    assert np.array_equal(d, (a - b).reshape(-1))


def test_feature_difference_linear_model():
    arch = ArchitectureSpec.from_text(LINEAR)
    params = init_params(arch, np.random.default_rng(2), 1.0)
    m = Model(arch, params)
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 4, 4))
    w = params["1.weight"]
    assert np.allclose(feature_difference(m, x, y, 1), w @ (x - y).reshape(-1), atol=1e-12)


def test_correspondence_hand_values():
    same = correspondence_score([np.array([1.0, -2.0, 0.0])] * 3)
    assert same.mean == 0 and same.std == 0 and same.pairs == 3
    opposite = correspondence_score([np.array([1.0, -1.0]), np.array([-1.0, 1.0])])
    assert opposite.mean == 1.0
    # magnitudes under the dead zone count as zero
    assert correspondence_score([np.array([1e-9, 1.0]), np.array([0.0, 5.0])]).mean == 0
    with pytest.raises(ParameterError):
        correspondence_score([np.ones(3)])


def test_sign3():
    assert sign3(np.array([-1.0, -1e-7, 0.0, 1e-7, 2.0])).tolist() == [-1, 0, 0, 0, 1]


vectors = st.lists(st.floats(-3, 3), min_size=4, max_size=4)


@settings(max_examples=60)
@given(st.lists(vectors, min_size=2, max_size=6))
def test_correspondence_range_and_symmetry(vecs):
    eps = [np.array(v) for v in vecs]
    r = correspondence_score(eps)
    assert 0 <= r.mean <= 1 and r.std >= 0
    back = correspondence_score(eps[::-1])
    assert back.mean == pytest.approx(r.mean, abs=1e-12)


def test_occlude_part():
    x = np.arange(16, dtype=float).reshape(1, 4, 4)
    out = occlude_part(x, (1, 1, 3, 3), fill=-1)
    expected = x.copy()
    expected[0, 1:3, 1:3] = -1
    assert np.array_equal(out, expected)
    assert np.all(occlude_part(x, (0, 0, 4, 4)) == 0)
    assert np.array_equal(occlude_part(x, (2, 2, 2, 3)), x)
    marks = {"img0": {"eye": [0, 0, 2, 2]}}
    assert occlude_part(x, "eye", image_id="img0", landmarks=marks)[0, :2, :2].sum() == 0
    with pytest.raises(ProbeInputError, match="nose"):
        occlude_part(x, "nose", image_id="img0", landmarks=marks)
    with pytest.raises(ParameterError):
        occlude_part(x, (0, 0, 5, 2))


def test_invariance_identity_and_full_turn(model, image):
    images = np.stack([image, image[:, ::-1]])
    (c0, c1) = invariance_sweep(model, images, [1, 2], [1, 4], "rotate", [0, 90, 360])
    for c in (c0, c1):
        assert c.distances[1][0] == 0 and c.distances[4][0] == 0
        assert c.distances[4][2] < 1e-6
        assert c.unit == "degrees"
    assert c0.true_prob.shape == (3,)


def test_invariance_errors(model, image):
    with pytest.raises(ParameterError):
        invariance_sweep(model, image[None], [0], [1], "scale", [0.0, 1.0])
    with pytest.raises(ParameterError, match="identity"):
        invariance_sweep(model, image[None], [0], [1], "translate", [1, 2])
    with pytest.raises(ParameterError):
        invariance_sweep(model, image[None], [0], [1], "shear", [0])


def test_feature_spread(model, image):
    assert feature_spread(model, np.stack([image, image]), 4) == 0
    with pytest.raises(ParameterError):
        feature_spread(model, image[None], 4)


def test_writers(tmp_path, model, image):
    rep = occlusion_sweep(model, image, label=1, layer=1)
    paths = write_occlusion_report(rep, tmp_path, class_names=list("abcde"))
    assert all(os.path.exists(p) for p in paths.values())
    rows = list(csv.DictReader(open(paths["grid.csv"])))
    assert len(rows) == rep.prob_map.size
    legend = json.load(open(paths["legend.json"]))
    assert set(legend) == {str(v) for v in np.unique(rep.label_map)}
    curves = invariance_sweep(model, image[None], [0], [1], "translate", [-2, 0, 2])
    write_invariance_csv(curves, tmp_path / "inv.csv", ids=["im"])
    rows = list(csv.DictReader(open(tmp_path / "inv.csv")))
    assert [r["value"] for r in rows] == ["-2", "0", "2"] and rows[1]["dist_layer1"] == "0"
