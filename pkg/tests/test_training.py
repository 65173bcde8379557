import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advseg import autodiff as ad
from advseg.checkpoint import load_checkpoint
from advseg.data import LabeledImage
from advseg.gradcheck import numeric_grad, rel_error
from advseg.nets import Network, build_dilated, build_discriminator, build_fcn, receptive_field
from advseg.training import (GENERATED, IMAGE_PATCH, LABEL_PATCH, MANUAL, PatchExtractor, RMSprop, Trainer,
                             TrainingConfig, TrainingDiverged, adversarial_step, cross_entropy_map, disc_step,
                             one_hot, plan_centers, resume, rmsprop_step, sample_patches, seg_step,
                             train_adversarial, train_baseline, write_loss_csv)


def tiny_fcn(C=3):
    return build_fcn(C, width=4, hidden=8)


def tiny_disc(C=3):
    return build_discriminator(C, width=4, dense=8)


def blob_images(n=2, C=3, size=48, seed=0):
    """Stripes of C classes with class-dependent intensity (easy to separate)."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        labels = (np.arange(size)[None, :] * C // size).repeat(size, axis=0)
        labels = np.roll(labels, i * 3, axis=1)
        image = (labels * 2.0 + 0.1 * rng.normal(size=labels.shape)).astype(np.float32)
        out.append(LabeledImage(image, labels, f"b{i}"))
    return out


# -- losses ------------------------------------------------------------------


def test_ce_one_hot_prediction():
    labels = np.random.default_rng(0).integers(0, 4, size=(2, 3, 3))
    loss, _ = cross_entropy_map(one_hot(labels, 4, np.float64), labels)
    assert loss <= 1e-6


def test_ce_uniform():
    loss, _ = cross_entropy_map(np.full((2, 7, 3, 3), 1 / 7), np.zeros((2, 3, 3), int))
    assert abs(loss - math.log(7)) < 1e-12


def test_ce_loop_oracle_and_grad():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(2, 5, 3, 4))
    prob = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    labels = rng.integers(0, 5, size=(2, 3, 4))
    total = 0.0
    for n in range(2):
        for i in range(3):
            for j in range(4):
                total -= math.log(max(prob[n, labels[n, i, j], i, j], 1e-7))
    loss, grad = cross_entropy_map(prob, labels)
    assert abs(loss - total / 24) < 1e-6
    num = numeric_grad(lambda: cross_entropy_map(prob, labels)[0], prob, 1e-6)
    assert rel_error(grad, num) < 1e-4


def test_ce_clamps():
    prob = np.zeros((1, 2, 1, 1))
    prob[0, 1] = 1
    loss, grad = cross_entropy_map(prob, np.zeros((1, 1, 1), int))
    assert abs(loss + math.log(1e-7)) < 1e-9
    assert not grad.any()  # clamped region is flat


def test_ce_errors():
    with pytest.raises(ValueError):
        cross_entropy_map(np.full((1, 2, 1, 1), 0.5), np.array([[[2]]]))
    with pytest.raises(ValueError):
        cross_entropy_map(np.full((1, 2, 1, 1), 0.5), np.zeros((1, 2, 1), int))


# -- RMSprop -----------------------------------------------------------------


def test_rmsprop_hand_value():
    acc, p = np.zeros(1), np.zeros(1)
    d = rmsprop_step(acc, p, np.ones(1), 1e-3, 0.9, 1e-8)
    expected = -1e-3 / (math.sqrt(0.1) + 1e-8)
    assert abs(d[0] - expected) < 1e-15 and abs(expected + 3.1623e-3) < 1e-7
    assert abs(acc[0] - 0.1) < 1e-15 and p[0] == d[0]


def test_rmsprop_zero_grad_and_shrinking_steps():
    acc, p = np.zeros(3), np.arange(3.0)
    rmsprop_step(acc, p, np.zeros(3), 1e-3)
    np.testing.assert_array_equal(p, np.arange(3.0))
    acc, p = np.zeros(1), np.zeros(1)
    d1 = rmsprop_step(acc, p, np.ones(1), 1e-3).copy()
    d2 = rmsprop_step(acc, p, np.ones(1), 1e-3)
    assert abs(d2[0]) < abs(d1[0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_rmsprop_ascend_negates(seed):
    g = np.random.default_rng(seed).normal(size=5)
    a1, p1, a2, p2 = np.zeros(5), np.zeros(5), np.zeros(5), np.zeros(5)
    d1 = rmsprop_step(a1, p1, g, 1e-3, direction="descend")
    d2 = rmsprop_step(a2, p2, g, 1e-3, direction="ascend")
    np.testing.assert_array_equal(d2, -d1)
    assert (a1 >= 0).all()
    with pytest.raises(ValueError):
        rmsprop_step(a1, p1, g, 1e-3, direction="sideways")


def test_rmsprop_state_roundtrip():
    net = Network(tiny_fcn())
    opt = RMSprop(net.params, 1e-3)
    for p in net.params:
        p.grad[...] = 1
    opt.step()
    other = RMSprop(net.params, 1e-3)
    other.load_state("o", opt.state("o"))
    for k in opt.acc:
        np.testing.assert_array_equal(other.acc[k], opt.acc[k])


# -- config ------------------------------------------------------------------


def test_config_defaults_and_validation():
    c = TrainingConfig()
    assert (c.lr_seg, c.lr_disc, c.batch_baseline, c.batch_adversarial_each, c.epochs) == (1e-3, 1e-5, 300, 100, 5)
    assert c.lr_seg / c.lr_disc == pytest.approx(100)
    assert c.patches_per_class_per_image == 2000
    assert TrainingConfig.paper().patches_per_class_per_image == 50_000
    assert c.samples_per_step == 300 and TrainingConfig(adversarial=True).samples_per_step == 300
    assert TrainingConfig.from_dict(c.to_dict()) == c
    for bad in ({"lr_seg": 0}, {"lr_disc": -1}, {"lr_adv": 0.0}, {"batch_baseline": 0}, {"batch_adversarial_each": 3}):
        with pytest.raises(ValueError):
            TrainingConfig(**bad)
    with pytest.raises(ValueError):
        TrainingConfig.from_dict({"learning_rate": 1})


def test_adv_rate_defaults_to_seg_rate():
    tr = Trainer(blob_images(), tiny_fcn(), tiny_config(adversarial=True), tiny_disc())
    assert tr.config.lr_adv is None and tr.adv_opt.lr == tr.config.lr_seg
    tr = Trainer(blob_images(), tiny_fcn(), tiny_config(adversarial=True, lr_adv=1e-5), tiny_disc())
    assert tr.adv_opt.lr == 1e-5 and tr.seg_opt.lr == 1e-3


def test_config_files_load():
    from pathlib import Path
    from advseg.experiment import DESK

    root = Path(__file__).resolve().parents[1] / "configs"
    desk = TrainingConfig.from_json(root / "train_desk.json")
    assert all(getattr(desk, k) == v for k, v in DESK.items())
    paper = TrainingConfig.from_json(root / "train_paper.json")
    assert paper == TrainingConfig.paper()


# -- sampling ----------------------------------------------------------------


def test_plan_is_balanced_and_centered():
    images = blob_images()
    plan = plan_centers(images, 3, 17, np.random.default_rng(0))
    assert len(plan) == 2 * 3 * 17
    np.testing.assert_array_equal(np.bincount(plan[:, 3]), [34, 34, 34])
    for img, r, c, cls in plan:
        assert images[img].labels[r, c] == cls


def test_absent_class_borrowed():
    images = blob_images(n=2)
    images[1] = LabeledImage(images[1].image, np.where(images[1].labels == 2, 0, images[1].labels), "no2")
    plan = plan_centers(images, 3, 10, np.random.default_rng(0))
    np.testing.assert_array_equal(np.bincount(plan[:, 3]), [20, 20, 20])
    assert (plan[plan[:, 3] == 2, 0] == 0).all()
    gone = [LabeledImage(im.image, np.minimum(im.labels, 1), im.id) for im in images]
    with pytest.raises(ValueError):
        plan_centers(gone, 3, 5, np.random.default_rng(0))


@pytest.mark.parametrize("builder,size", [(build_fcn, 51), (build_dilated, 87)])
def test_patch_geometry(builder, size):
    spec = builder(3)
    images = blob_images(size=64)
    batch = sample_patches(images, spec, 4, np.random.default_rng(0))
    assert batch.inputs.shape == (24, 1, size, size)
    assert batch.labels.shape == (24, LABEL_PATCH, LABEL_PATCH)
    assert batch.images.shape == (24, 1, IMAGE_PATCH, IMAGE_PATCH)
    # the label patch centre is the sampled class; image patch is the input centre
    np.testing.assert_array_equal(batch.labels[:, 10, 10], batch.classes)
    h, o = size // 2, size // 2 - 12
    np.testing.assert_array_equal(batch.images, batch.inputs[:, :, o : o + 25, o : o + 25])
    for k, (i, r, c) in enumerate(batch.centers):
        assert batch.inputs[k, 0, h, h] == images[i].image[r, c]


def test_sampling_deterministic():
    images, spec = blob_images(), tiny_fcn()
    a = sample_patches(images, spec, 5, np.random.default_rng(9))
    b = sample_patches(images, spec, 5, np.random.default_rng(9))
    assert a.inputs.tobytes() == b.inputs.tobytes() and (a.centers == b.centers).all()


# -- update steps -------------------------------------------------------------


def _setup(seed=0):
    images = blob_images()
    seg, disc = Network(tiny_fcn(), seed=seed), Network(tiny_disc(), seed=seed + 1)
    batch = sample_patches(images, seg.spec, 4, np.random.default_rng(seed))
    return seg, disc, batch


def test_disc_step_leaves_seg_untouched():
    seg, disc, batch = _setup()
    before_s, before_d = seg.params.snapshot(), disc.params.snapshot()
    bufs = {k: v.copy() for k, v in seg.buffers().items()}
    disc_step(seg, disc, RMSprop(disc.params, 1e-5), batch, (0, 1))
    for k, v in seg.params.snapshot().items():
        assert v.tobytes() == before_s[k].tobytes()
    for k, v in seg.buffers().items():
        assert v.tobytes() == bufs[k].tobytes()
    assert any(v.tobytes() != before_d[k].tobytes() for k, v in disc.params.snapshot().items())


def test_seg_step_leaves_disc_untouched():
    seg, disc, batch = _setup()
    before = disc.params.snapshot()
    seg_step(seg, RMSprop(seg.params, 1e-3), batch, (0, 0))
    for k, v in disc.params.snapshot().items():
        assert v.tobytes() == before[k].tobytes()


@settings(max_examples=3, deadline=None)
@given(seed=st.integers(0, 1000))
def test_reversal_sign_on_adversarial_step(seed):
    out = []
    for reversal in (False, True):
        seg, disc, batch = _setup(seed)
        _, ds, dd = adversarial_step(seg, disc, RMSprop(seg.params, 1e-3), RMSprop(disc.params, 1e-5), batch,
                                     (0, 2), reversal)
        out.append((ds, dd))
    (s0, d0), (s1, d1) = out
    for k in s0:
        np.testing.assert_array_equal(s1[k], -s0[k])
    for k in d0:
        np.testing.assert_array_equal(d1[k], d0[k])


def test_freeze_disc_during_adv():
    seg, disc, batch = _setup()
    before = disc.params.snapshot()
    _, ds, dd = adversarial_step(seg, disc, RMSprop(seg.params, 1e-3), RMSprop(disc.params, 1e-5), batch, (0, 2),
                                 freeze_disc=True)
    assert dd == {} and ds
    for k, v in disc.params.snapshot().items():
        assert v.tobytes() == before[k].tobytes()


def test_adversarial_targets():
    assert MANUAL != GENERATED


# -- loops ---------------------------------------------------------------------


def tiny_config(**kw):
    base = dict(batch_baseline=12, batch_adversarial_each=4, patches_per_class_per_image=6, epochs=2, seed=0)
    return TrainingConfig(**{**base, **kw})


def test_one_alternation_consumes_three_batches():
    cfg = tiny_config(adversarial=True)
    tr = Trainer(blob_images(), tiny_fcn(), cfg, tiny_disc())
    seen = []
    orig = tr.extractor.extract
    tr.extractor.extract = lambda centers: seen.append(len(centers)) or orig(centers)
    tr.train_step()
    assert seen == [12]  # 4 + 4 + 4
    assert tr.steps_per_epoch == (2 * 3 * 6) // 12


def test_baseline_learns_separable_task():
    images = blob_images(C=2, size=40)
    cfg = TrainingConfig(batch_baseline=16, patches_per_class_per_image=64, epochs=6, lr_seg=3e-3)
    res = train_baseline(images, build_fcn(2, width=8, hidden=32, depth=3), cfg)
    assert all(math.isfinite(r[1]) for r in res.losses)
    assert np.mean([r[1] for r in res.losses[-3:]]) < 0.1


def test_training_deterministic(tmp_path):
    cfg = tiny_config(adversarial=True)
    a = train_adversarial(blob_images(), tiny_fcn(), tiny_disc(), cfg, tmp_path / "a")
    b = train_adversarial(blob_images(), tiny_fcn(), tiny_disc(), cfg, tmp_path / "b")
    assert a.losses == b.losses
    for f in sorted((tmp_path / "a").rglob("*.mt01")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny_config(adversarial=True, epochs=3)
    full = train_adversarial(blob_images(), tiny_fcn(), tiny_disc(), cfg, tmp_path / "full")
    tr = Trainer(blob_images(), tiny_fcn(), cfg, tiny_disc())
    tr.run(tmp_path / "part", stop_after=4)
    assert load_checkpoint(tmp_path / "part").meta["step"] == 4
    res = resume(blob_images(), tmp_path / "part")
    assert res.losses == full.losses
    for f in sorted((tmp_path / "full").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "part" / f.relative_to(tmp_path / "full")).read_bytes()


def test_divergence_aborts():
    images = blob_images()
    images[0] = LabeledImage(np.full_like(images[0].image, np.nan), images[0].labels, "nan")
    with pytest.raises(TrainingDiverged):
        train_baseline(images, tiny_fcn(), tiny_config())


def test_disc_class_mismatch():
    with pytest.raises(ValueError):
        Trainer(blob_images(), tiny_fcn(3), tiny_config(adversarial=True), tiny_disc(4))


def test_loss_csv(tmp_path):
    write_loss_csv([(0, 1.5, float("nan"), float("nan")), (1, 1.25, 0.5, 0.75)], tmp_path / "l.csv")
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines == ["step,L_s,L_d,L_a", "0,1.5,,", "1,1.25,0.5,0.75"]


def test_patch_extractor_pads_by_half_input():
    spec = tiny_fcn()
    ex = PatchExtractor(blob_images(size=48), spec)
    assert ex.size == receptive_field(spec) + 20
    assert ex.images[0].shape == (48 + 2 * (ex.size // 2),) * 2
