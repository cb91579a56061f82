import numpy as np
import pytest

from flowkd.checkpoint import CheckpointError, load_model, save_model
from flowkd.data import AugmentSpec, make_blob_draw, make_blobs, make_pattern_images, stream
from flowkd.distill import DistillPlan, NumericalFailure, Supervision, make_plan
from flowkd.hog import HogTeacher
from flowkd.nn import build_model
from flowkd.training import (TrainConfig, distill_student, evaluate, kd_loss_value, train_auxiliary, train_teacher)


@pytest.fixture(scope="module")
def blobs():
    return make_blobs(24, 3, 6, 0.6, seed=0), make_blob_draw(10, 3, 6, 0.6, seed=0, draw=1)


def mlp(arch="mlp", seed=0, n_classes=None):
    return build_model(arch, (6,), n_classes, rng=stream(seed, 0, 1))


def test_architecture_sizes():
    counts = {a: build_model(a, (3, 16, 16)).n_params() for a in ("cnn1-l", "cnn1", "cnn1-a", "cnn1-h")}
    assert counts == {"cnn1-l": 2176, "cnn1": 8256, "cnn1-a": 32128, "cnn1-h": 126720}
    m = build_model("cnn1", (3, 16, 16), 10)
    assert m.n_transfer_points == 4 and m.representation_dim(3) == 64
    assert m.n_params(include_head=True) == 8256 + 650
    with pytest.raises(ValueError):
        build_model("resnet18", (3, 16, 16))


def test_zero_epochs_leaves_student_unchanged(blobs):
    train, _ = blobs
    teacher, student = mlp("mlp-a", 1), mlp()
    before = {k: v.copy() for k, v in student.state_arrays().items()}
    distill_student(teacher, student, make_plan("proposed", 3, 3), train, TrainConfig(epochs=0, batch_size=16))
    assert all(np.array_equal(before[k], v) for k, v in student.state_arrays().items())


def test_pkt_single_equals_proposed_last_pair(blobs):
    train, _ = blobs
    teacher = mlp("mlp-a", 1)
    runs = []
    for p in (make_plan("pkt_single", 3, 3), DistillPlan(pairs=[(2, 2)], method="proposed")):
        _, state = distill_student(teacher, mlp(), p, train, TrainConfig(epochs=3, batch_size=16, seed=4))
        runs.append(state.step_losses)
    assert runs[0] == runs[1]


def test_distill_bit_reproducible(blobs):
    train, test = blobs
    teacher = mlp("mlp-a", 1)
    out = []
    for _ in range(2):
        s, state = distill_student(teacher, mlp(), make_plan("proposed", 3, 3, supervision=Supervision("contrastive")),
                                   train, TrainConfig(epochs=2, batch_size=16, seed=5), test)
        out.append((state.step_losses, s.state_arrays()))
    assert out[0][0] == out[1][0]
    assert all(np.array_equal(out[0][1][k], out[1][1][k]) for k in out[0][1])


def test_alpha_scales_intermediate_component(blobs):
    train, _ = blobs
    teacher = mlp("mlp-a", 1)
    cfg = TrainConfig(epochs=1, batch_size=16, frozen_student=True, shuffle=False)
    rows = []
    for a in (100.0, 300.0):
        _, st = distill_student(teacher, mlp(), make_plan("proposed", 3, 3, alpha_init=a), train, cfg)
        rows.append(st.history[0])
    for i in (0, 1):
        assert rows[1][f"kd_loss_{i}"] == pytest.approx(3.0 * rows[0][f"kd_loss_{i}"], rel=1e-12)
    assert rows[1]["kd_loss_2"] == rows[0]["kd_loss_2"]


def test_frozen_student_decays_by_gamma(blobs):
    train, _ = blobs
    cfg = TrainConfig(epochs=4, batch_size=16, frozen_student=True, shuffle=False)
    _, st = distill_student(mlp("mlp-a", 1), mlp(), make_plan("proposed", 3, 3), train, cfg)
    col = [h["kd_loss_0"] for h in st.history]
    for a, b in zip(col, col[1:]):
        assert b / a == pytest.approx(0.7, rel=1e-12)
    assert len({h["kd_loss_2"] for h in st.history}) == 1


def test_auxiliary_copy_has_zero_loss(blobs):
    train, _ = blobs
    teacher = mlp()
    aux = teacher.copy()
    _, st = train_auxiliary(teacher, aux, train, TrainConfig(epochs=1, batch_size=16, frozen_student=True))
    assert st.history[0]["kd_loss_2"] == pytest.approx(0.0, abs=1e-9)
    assert kd_loss_value(teacher, aux, train, 16) == pytest.approx(0.0, abs=1e-9)


def test_auxiliary_loss_decreases(blobs):
    train, _ = blobs
    _, st = train_auxiliary(mlp("mlp-h", 1), mlp("mlp-a", 2), train, TrainConfig(epochs=20, batch_size=24))
    assert st.history[-1]["total_loss"] < st.history[0]["total_loss"]


def test_hog_auxiliary_improves_retrieval():
    train = make_pattern_images(12, classes=3, size=8, noise=0.3, seed=1)
    test = make_pattern_images(6, classes=3, size=8, noise=0.3, seed=1, draw=1)
    aux = build_model("cnn1-a", (3, 8, 8), rng=stream(0, 0, 1))
    before = evaluate(aux, train, test)["eval_mAP_c"]
    train_auxiliary(HogTeacher(), aux, train, TrainConfig(epochs=8, batch_size=12), test)
    assert evaluate(aux, train, test)["eval_mAP_c"] > before


def test_teacher_training_learns(blobs):
    train, test = blobs
    model = mlp(n_classes=3)
    _, st = train_teacher(model, train, TrainConfig(epochs=15, batch_size=16), test)
    assert st.history[-1]["eval_accuracy"] > 0.9


def test_softlabel_hint_and_metrics_file(blobs, tmp_path):
    train, test = blobs
    teacher = mlp("mlp-a", 1, n_classes=3)
    student = mlp(n_classes=3)
    path = tmp_path / "m.csv"
    distill_student(teacher, student, make_plan("softlabel", 3, 3), train, TrainConfig(epochs=1, batch_size=16),
                    test, path)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["epoch", "total_loss", "kd_loss_0", "kd_loss_1", "kd_loss_2", "supervision_loss",
                      "eval_mAP_e", "eval_mAP_c", "eval_top_k", "eval_accuracy", "wallclock_s"]
    _, st = distill_student(teacher, mlp(), make_plan("hint", 3, 3), train, TrainConfig(epochs=2, batch_size=16))
    assert np.isfinite(st.history[-1]["total_loss"])


def test_image_training_with_augmentation():
    train = make_pattern_images(4, classes=2, size=8, seed=0)
    teacher = build_model("cnn1-a", (3, 8, 8), rng=stream(0, 0, 1))
    student = build_model("cnn1-l", (3, 8, 8), rng=stream(0, 0, 2))
    cfg = TrainConfig(epochs=2, batch_size=4, augment=AugmentSpec(seed=0))
    _, st = distill_student(teacher, student, make_plan("proposed", 4, 4), train, cfg)
    assert len(st.step_losses) == 4


def test_bad_pairs_rejected(blobs):
    train, _ = blobs
    with pytest.raises(ValueError):
        distill_student(mlp(), mlp(), DistillPlan(pairs=[(5, 0)]), train, TrainConfig(epochs=1, batch_size=16))


def test_numerical_failure_names_epoch(blobs):
    train, _ = blobs
    student = mlp()
    student.layers[0].weight.data[:] = np.inf
    with pytest.raises(NumericalFailure):
        distill_student(mlp("mlp-a", 1), student, make_plan("proposed", 3, 3), train,
                        TrainConfig(epochs=1, batch_size=16))


def test_checkpoint_roundtrip(tmp_path):
    model = build_model("cnn1-l", (3, 8, 8), 4, rng=np.random.default_rng(0))
    model.layers[1].running_mean[:] = 0.25
    path = save_model(model, tmp_path / "m.ckpt", {"role": "x"})
    back, extra = load_model(path)
    assert extra == {"role": "x"}
    x = np.random.default_rng(1).standard_normal((3, 3, 8, 8))
    assert np.array_equal(back.logits(x), model.logits(x))
    save_model(back, tmp_path / "again.ckpt", {"role": "x"})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "none.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "junk.ckpt")


def test_periodic_checkpoints(blobs, tmp_path):
    train, _ = blobs
    cfg = TrainConfig(epochs=4, batch_size=16, checkpoint_every=2, out_dir=tmp_path)
    _, st = distill_student(mlp("mlp-a", 1), mlp(), make_plan("proposed", 3, 3), train, cfg)
    assert [p.name for p in st.checkpoints] == ["epoch002.ckpt", "epoch004.ckpt"]
