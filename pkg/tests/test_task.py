import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icmaux import autodiff as ad
from icmaux.autodiff import Tensor
from icmaux.codec import CodecModel
from icmaux.task import (
    N_SEG_CLASSES,
    AuxiliaryBranch,
    ConfigurationError,
    PretrainingFailed,
    RecognitionModel,
    aux_forward,
    aux_input_shape,
    generate_sample,
    make_batch,
    pretrain_recognizer,
    recognize,
    task_loss,
    teacher_labels,
)


@pytest.fixture(scope="module")
def rec():
    return RecognitionModel()


# --- data ---------------------------------------------------------------


def test_sample_is_pure_in_seed_and_index():
    a, b = generate_sample(3, 17), generate_sample(3, 17)
    assert a.image.tobytes() == b.image.tobytes()
    assert np.array_equal(a.seg_mask, b.seg_mask)
    assert generate_sample(3, 18).image.tobytes() != a.image.tobytes()


def test_sample_format():
    s = generate_sample(0, 0)
    assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
    assert 0 <= s.image.min() and s.image.max() <= 1
    assert s.seg_mask.shape == (64, 64) and s.seg_mask.max() < N_SEG_CLASSES


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_presence_consistent_with_mask(seed, index):
    s = generate_sample(seed, index)
    for k in range(3):
        assert bool(s.presence[k]) == bool(np.any(s.seg_mask == k + 1))


def test_class_frequencies():
    batch = make_batch(123, range(1000))
    freq = batch.presence.mean(axis=0)
    assert np.all((freq >= 0.4) & (freq <= 0.8)), freq


# --- recognizer ---------------------------------------------------------


def test_recognizer_outputs_and_taps(rec):
    out = recognize(rec, Tensor(np.zeros((2, 3, 64, 64), np.float32)))
    assert out["seg"].shape == (2, N_SEG_CLASSES, 64, 64)
    assert out["presence"].shape == (2, 3)
    for name, t in out["taps"].items():
        assert t.shape[1:] == rec.tap_shape(name)


def test_recognizer_rejects_wrong_shape(rec):
    with pytest.raises(ad.ShapeError):
        rec(Tensor(np.zeros((1, 3, 32, 32), np.float32)))


def test_frozen_recognizer_passes_gradient_to_input():
    model = RecognitionModel()
    model.freeze()
    x = Tensor(make_batch(0, range(2)).x, requires_grad=True)
    ad.backward(task_loss(model(x), {"seg": np.zeros((2, 64, 64), int)}, "segmentation"))
    assert x.grad is not None and np.any(x.grad)
    assert all(p.grad is None for p in model.parameters())


def test_recognize_deterministic(rec):
    x = make_batch(1, range(2)).x
    assert rec(Tensor(x))["seg"].data.tobytes() == rec(Tensor(x))["seg"].data.tobytes()


def test_teacher_labels_gradient_free_and_stable(rec):
    x = Tensor(make_batch(2, range(3)).x, requires_grad=True)
    a, b = teacher_labels(rec, x), teacher_labels(rec, x)
    assert a["seg"].shape == (3, 64, 64) and a["presence"].shape == (3, 3)
    assert np.array_equal(a["seg"], b["seg"]) and np.array_equal(a["presence"], b["presence"])
    assert x.grad is None


def test_unknown_task(rec):
    with pytest.raises(ConfigurationError):
        task_loss({}, {}, "detection")


def test_pretraining_is_deterministic_and_gated():
    kw = dict(batch_size=4, n_heldout=8, min_miou=0.0, min_presence_acc=0.0)
    a, ra = pretrain_recognizer(5, 3, 1e-3, **kw)
    b, rb = pretrain_recognizer(5, 3, 1e-3, **kw)
    assert ra.to_dict() == rb.to_dict()
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    assert all(not p.requires_grad for p in a.parameters())
    with pytest.raises(PretrainingFailed):
        pretrain_recognizer(5, 1, 1e-3, batch_size=4, n_heldout=8, min_miou=1.01)


# --- auxiliary branch ---------------------------------------------------


@pytest.mark.parametrize("position", ["AuxEnc", "AuxDec", "AuxTask"])
@pytest.mark.parametrize("task", ["segmentation", "presence"])
def test_aux_output_shapes(position, task, rec):
    codec = CodecModel()
    shape = aux_input_shape(position, codec, rec)
    branch = AuxiliaryBranch(position, task, shape)
    out = aux_forward(branch, Tensor(np.zeros((2, *shape), np.float32)))
    assert out.shape == ((2, N_SEG_CLASSES, 64, 64) if task == "segmentation" else (2, 3))
    assert branch.calls == 1
    assert {p.group for p in branch.parameters()} == {"aux_branch"}


def test_aux_enc_reads_latent(rec):
    assert aux_input_shape("AuxEnc", CodecModel(), rec) == (32, 8, 8)


def test_aux_dec_downsamples_first():
    branch = AuxiliaryBranch("AuxDec", "segmentation", (64, 32, 32))
    assert branch.trunk[0].resample == "down"


def test_aux_branch_is_lightweight(rec):
    n_rec = rec.num_parameters()
    for pos in ("AuxEnc", "AuxDec", "AuxTask"):
        b = AuxiliaryBranch(pos, "segmentation", aux_input_shape(pos, CodecModel(), rec))
        assert b.num_parameters() < 0.25 * n_rec


def test_aux_shape_mismatch():
    b = AuxiliaryBranch("AuxEnc", "presence", (32, 8, 8))
    with pytest.raises(ConfigurationError):
        b(Tensor(np.zeros((1, 16, 8, 8), np.float32)))
    with pytest.raises(ConfigurationError):
        AuxiliaryBranch("AuxMid", "presence", (32, 8, 8))
