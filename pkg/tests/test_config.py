import pytest

from daml.config import HyperParams, TrainConfig, as_flat_dict, load_config_file, resolve
from daml.errors import ConfigError


def test_full_scale_defaults():
    hp, train = HyperParams(), TrainConfig()
    assert (hp.alpha, hp.lambda1, hp.lambda2, hp.lambda3, hp.rho) == (0.5, 0.1, 0.7, 1.2, 1.2)
    assert (hp.eps, hp.min_samples, hp.P, hp.K_per_id) == (0.6, 4, 16, 4)
    assert (train.lr_teacher, train.lr_student) == (1e-2, 8e-3)
    assert (train.weight_decay_teacher, train.weight_decay_student) == (5e-4, 1e-4)
    assert train.momentum == 0.9 and train.milestones == (40, 70)
    assert train.image_size == (256, 128)
    assert (train.teacher_dim, train.student_dim) == (64, 48)


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("alpha: 0.4\neps: 0.3\nadapt_epochs: 2\n")
    hp, train, data = resolve(load_config_file(str(path)), {"alpha": "0.2", "n-ids": "6"})
    assert hp.alpha == 0.2 and hp.eps == 0.3 and train.adapt_epochs == 2 and data.n_ids == 6


@pytest.mark.parametrize("overrides", [{"alhpa": "1"}, {"P": "2.5"}, {"smooth_update": "3"},
                                       {"eps": "-1"}, {"teacher_dim": "48"}])
def test_bad_settings_rejected(overrides):
    with pytest.raises(ConfigError):
        resolve({}, overrides)


def test_nested_file_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("training:\n  epochs: 3\n")
    with pytest.raises(ConfigError):
        load_config_file(str(path))


def test_value_parsing():
    hp, train, _ = resolve({}, {"milestones": "[5, 9]", "smooth_update": "false",
                                "adapt_lr_teacher": "0.01", "pretrain_iters": "3"})
    assert train.milestones == (5, 9) and hp.smooth_update is False
    assert train.teacher_adapt_lr == 0.01 and train.pretrain_iters == 3


def test_flat_dict_is_plain():
    flat = as_flat_dict(HyperParams(), TrainConfig())
    assert flat["milestones"] == [40, 70] and flat["alpha"] == 0.5
