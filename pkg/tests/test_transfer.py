import numpy as np
import pytest

from convscope.arch import ArchitectureError, ArchitectureSpec, preset
from convscope.data import Dataset
from convscope.model import Model
from convscope.network import init_params
from convscope.trainer import Preprocessor
from convscope.transfer import (DegenerateProblem, EvaluationError, FeatureMatrix, HeadConfig, RemoveStages,
                                ResizeStage, ablate, evaluate_per_class, extract_features, parse_edit,
                                per_class_accuracy, sample_per_class, size_sweep, train_head, write_sweep_csv)

SMALL = """\
input c=3 h=8 w=8
conv out=4 k=3 pad=1
relu
pool k=2 stride=2
flatten
fc out=6
relu
softmax classes=3
"""


def clusters(per_class, classes=3, dim=5, spread=0.6, seed=0):
    rng = np.random.default_rng(seed)
    centres = rng.normal(scale=2.0, size=(classes, dim))
    y = np.repeat(np.arange(classes), per_class)
    return centres[y] + spread * rng.normal(size=(len(y), dim)), y


@pytest.fixture(scope="module")
def small_model():
    arch = ArchitectureSpec.from_text(SMALL)
    return Model(arch, init_params(arch, np.random.default_rng(0), 0.3))


def test_extract_input_layer_is_identity(small_model):
    x = np.random.default_rng(1).normal(size=(4, 3, 8, 8))
    fm = extract_features(small_model, x, "input")
    assert fm.layer == -1 and np.array_equal(fm.features, x.reshape(4, -1))


def test_extract_duplicate_rows_and_preprocessing(small_model):
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 255, size=(3, 8, 8))
    m = Model(small_model.arch, small_model.params, Preprocessor(np.full((3, 8, 8), 100.0), 8, 0.5))
    ds = Dataset(np.stack([img, img, img * 0.5]), [0, 0, 1])
    fm = extract_features(m, ds, 5)
    assert fm.dim == 6 and fm.labels.tolist() == [0, 0, 1]
    assert np.array_equal(fm.features[0], fm.features[1])
    assert not np.array_equal(fm.features[0], fm.features[2])
    with pytest.raises(ArchitectureError):
        extract_features(small_model, np.zeros((1, 3, 8, 8)), 9)


def test_imagenet_pool5_has_9216_columns():
    arch = preset("imagenet")
    rng = np.random.default_rng(0)
    last_conv = arch.stage_output(5)
    # parameters for the conv stages only; nothing past the layer is evaluated
    params = {k: rng.normal(scale=0.01, size=s) for k, s in arch.param_shapes().items()
              if int(k.split(".")[0]) <= last_conv}
    fm = extract_features(Model(arch, params), rng.normal(size=(1, 3, 224, 224)), last_conv)
    assert fm.features.shape == (1, 9216)


@pytest.mark.parametrize("kind", ["softmax", "svm"])
def test_separable_two_class_problem(kind):
    f, y = clusters(40, classes=2, spread=0.2)
    head = train_head(f, y, kind)
    assert np.array_equal(head.predict(f), y)


@pytest.mark.parametrize("kind", ["softmax", "svm"])
def test_shuffled_labels_stay_near_chance(kind):
    rng = np.random.default_rng(4)
    f = rng.normal(size=(1000, 20))
    y = rng.integers(0, 10, size=1000)
    head = train_head(f[:500], y[:500], kind, HeadConfig(epochs=30), num_classes=10)
    held_out = np.mean(head.predict(f[500:]) == y[500:])
    assert held_out <= 0.15


def test_hinge_boundary_on_three_points():
    f = np.array([[-2.0], [-1.0], [1.0]])
    y = np.array([0, 0, 1])
    head = train_head(f, y, "svm", HeadConfig(epochs=2000, batch=3, standardize=False, tol=0))
    # the max-margin scorer for class 1 is x itself
    w, b = head.weights[1, 0], head.biases[1]
    assert w == pytest.approx(1.0, abs=0.02) and abs(b) < 0.02
    assert head.predict(f).tolist() == [0, 0, 1]


def test_head_training_leaves_model_untouched(small_model):
    before = {k: v.tobytes() for k, v in small_model.params.items()}
    x = np.random.default_rng(6).normal(size=(30, 3, 8, 8))
    fm = extract_features(small_model, x, 5)
    train_head(fm, np.arange(30) % 3, "svm", HeadConfig(epochs=5))
    assert {k: v.tobytes() for k, v in small_model.params.items()} == before


def test_degenerate_and_determinism():
    f, y = clusters(10)
    with pytest.raises(DegenerateProblem):
        train_head(f, np.zeros(len(f), int))
    frozen = f.copy()
    a = train_head(f, y, "softmax", HeadConfig(seed=5, epochs=10))
    b = train_head(f, y, "softmax", HeadConfig(seed=5, epochs=10))
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.biases, b.biases)
    assert np.array_equal(f, frozen)
    with pytest.raises(ValueError):
        train_head(f, y, "tree")


def test_per_class_accuracy_values():
    y = np.array([0] * 9 + [1])
    assert per_class_accuracy(y, y, 2)[0] == 1.0
    mean, per = per_class_accuracy(np.zeros(10, int), y, 2)
    assert mean == 0.5 and per.tolist() == [1.0, 0.0]
    y4 = np.repeat(np.arange(4), 5)
    assert per_class_accuracy(np.full(20, 2), y4, 4)[0] == pytest.approx(0.25)
    with pytest.raises(EvaluationError, match="'dog'"):
        per_class_accuracy(np.zeros(3, int), np.zeros(3, int), 2, ["cat", "dog"])


def test_evaluate_head_wraps_predict():
    f, y = clusters(20, spread=0.1)
    head = train_head(f, y)
    assert evaluate_per_class(head, FeatureMatrix(f, -1, labels=y), y)[0] == 1.0


def test_sample_per_class():
    y = np.repeat(np.arange(3), [5, 6, 7])
    idx = sample_per_class(y, 4, np.random.default_rng(0))
    assert len(idx) == 12 and np.all(np.diff(idx) > 0)
    assert np.bincount(y[idx]).tolist() == [4, 4, 4]
    with pytest.raises(ValueError, match="'a'"):
        sample_per_class(y, 6, np.random.default_rng(0), ["a", "b", "c"])


def test_size_sweep(tmp_path):
    f, y = clusters(60, classes=4, spread=1.6, seed=3)
    tf, ty = clusters(30, classes=4, spread=1.6, seed=3)
    train = FeatureMatrix(f, -1, labels=y)
    test = FeatureMatrix(tf, -1, labels=ty)
    pts = size_sweep(train, test, [5, 30], folds=5)
    assert [p.count for p in pts] == [5, 30] and len(pts[0].folds) == 5
    assert sum(b >= a for a, b in zip(pts[0].folds, pts[1].folds)) >= 4
    full = size_sweep(train, test, [60], folds=1)[0].mean
    direct = evaluate_per_class(train_head(f, y, hyper=HeadConfig(seed=0), num_classes=4), test, ty)[0]
    assert full == pytest.approx(direct)
    with pytest.raises(ValueError):
        size_sweep(train, test, [61], folds=1)
    write_sweep_csv(pts, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "per_class,mean_acc,std_acc,folds"


def test_ablate_remove_conv_stages():
    arch = preset("imagenet")
    out = ablate(arch, ["remove 3,4"])
    assert out.conv_stage_count() == 3
    assert out.shapes()[-1] == (1000, 1, 1)
    conv3 = 384 * 256 * 9 + 384
    conv4 = 384 * 384 * 9 + 384
    conv5_before = 256 * 384 * 9 + 256
    conv5_after = 256 * 256 * 9 + 256
    assert arch.param_count() - out.param_count() == conv3 + conv4 + conv5_before - conv5_after
    assert ablate(arch, []) == arch


@pytest.mark.parametrize("size", [2048, 8192])
def test_ablate_resize_fc6(size):
    arch = preset("imagenet")
    out = ablate(arch, [ResizeStage(6, size)])
    before = 9216 * 4096 + 4096 + 4096 * 4096 + 4096
    after = 9216 * size + size + size * 4096 + 4096
    assert arch.param_count() - out.param_count() == before - after


def test_ablate_errors():
    arch = ArchitectureSpec.from_text(
        "input c=3 h=3 w=3\nconv out=2 k=1 pad=2\nrelu\nconv out=2 k=5\nrelu\nflatten\nsoftmax classes=2\n")
    with pytest.raises(ArchitectureError):
        ablate(arch, [RemoveStages((1,))])  # the k=5 conv no longer fits a 3x3 input
    with pytest.raises(ArchitectureError, match="classifier"):
        ablate(arch, ["remove 3"])
    with pytest.raises(ArchitectureError):
        ablate(arch, ["remove 9"])
    for bad in ["drop 3", "resize 3", "remove x"]:
        with pytest.raises(ArchitectureError):
            parse_edit(bad)
    assert parse_edit("resize 1=8, 2=4") == [ResizeStage(1, 8), ResizeStage(2, 4)]
