import pytest

from margintrack import config as C


def write(tmp_path, text):
    p = tmp_path / "cfg.yaml"
    p.write_text(text)
    return p


def test_empty_file_gives_defaults(tmp_path):
    cfg = C.load_config(write(tmp_path, ""), env={})
    assert cfg.epochs == 40 and cfg.tracked_train == cfg.tracked_test == 1000
    assert cfg.pgd.epsilon == 0.3 and cfg.pgd.alpha == pytest.approx(0.075)
    assert cfg.optimizer.lr == 0.01 and cfg.optimizer.batch_size == 64


def test_nested_sections(tmp_path):
    text = """
dataset: fashion-mnist
architecture: cnn
mode: adversarial
epochs: 3
train_subset: 500
seed: 7
tracked: {train: 20, test: 30}
optimizer: {lr: 0.05}
deepfool: {max_iterations: 5, candidates: 3}
margins: {max_retries: 4, histogram_bins: 10}
"""
    cfg = C.load_config(write(tmp_path, text), env={})
    assert (cfg.dataset, cfg.architecture, cfg.mode, cfg.epochs) == ("fashion-mnist", "cnn", "adversarial", 3)
    assert cfg.pgd.epsilon == 0.1  # per-dataset default
    assert (cfg.tracked_train, cfg.tracked_test, cfg.train_subset, cfg.seed) == (20, 30, 500, 7)
    assert cfg.optimizer.lr == 0.05 and cfg.optimizer.momentum == 0.9
    assert cfg.deepfool.candidates == 3 and cfg.max_retries == 4 and cfg.histogram_bins == 10


def test_round_trip(tmp_path):
    cfg = C.load_config(write(tmp_path, "epochs: 2\npgd: {epsilon: 0.2, steps: 3}\n"), env={})
    assert C.config_from_dict(C.config_to_dict(cfg), env={}) == cfg


def test_exponent_without_point_is_a_number(tmp_path):
    cfg = C.load_config(write(tmp_path, "optimizer: {lr: 1e-3}\npgd: {epsilon: 3e-1}\n"), env={})
    assert cfg.optimizer.lr == 0.001 and cfg.pgd.epsilon == 0.3


def test_env_overrides_data_root(tmp_path):
    cfg = C.load_config(write(tmp_path, "data_root: here\n"), env={C.DATA_ROOT_ENV: "/elsewhere"})
    assert cfg.data_root == "/elsewhere"


@pytest.mark.parametrize("text", [
    "epochs: 0\n",
    "epoch: 3\n",
    "optimizer: {learning_rate: 1}\n",
    "pgd: {epsilon: -0.1}\n",
    "pgd: {epsilon: 0.1, step_size: 0.5}\n",
    "dataset: cifar\n",
    "tracked: 5\n",
    "- a\n- b\n",
    "epochs: [1\n",
    "optimizer: {lr: fast}\n",
])
def test_invalid(tmp_path, text):
    with pytest.raises(C.ConfigInvalid):
        C.load_config(write(tmp_path, text), env={})


def test_missing_file(tmp_path):
    with pytest.raises(C.ConfigInvalid):
        C.load_config(tmp_path / "nope.yaml")
