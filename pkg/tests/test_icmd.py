import math

import numpy as np
import pytest

from vdmini import icmd
from vdmini import netgraph as ng
from vdmini import pruner as pr
from vdmini import synthdata as sd
from vdmini.diffusion import NoiseSchedule
from vdmini.errors import NonFiniteError, ShapeError, VdminiError
from vdmini.tensor import Tensor

SMALL_WIDTHS = (4, 6, 8)


def _models():
    graph = ng.make_unet_graph(ng.ORIGIN_LAYER_COUNTS, SMALL_WIDTHS, emb_dim=8)
    teacher = ng.build(graph, 1)
    student = pr.apply_plan(teacher, pr.plan_vdmini(graph))
    return teacher, student


def _batch(n=2, frames=2):
    return sd.gen_dataset(n, 4, frames=frames).tensors()


class _FixedNormal:
    """Stub rng whose standard_normal always returns a fixed value."""

    def __init__(self, value=0.0):
        self.value = value

    def standard_normal(self, *shape):
        return self.value if not shape else np.full(shape[0], self.value)


# ---------------------------------------------------------------------------
# feature alignment and the distillation loss
# ---------------------------------------------------------------------------

def test_icd_identical_features_is_zero():
    f = {"a": Tensor(np.ones((2, 3))), "b": Tensor(np.zeros(4))}
    assert icmd.icd_loss(f, dict(f)).item() == 0.0


def test_icd_constant_one_difference_two_layers():
    t = {"a": Tensor(np.zeros((2, 3))), "b": Tensor(np.zeros(5))}
    s = {"a": Tensor(np.ones((2, 3))), "b": Tensor(np.ones(5))}
    assert icmd.icd_loss(t, s).item() == pytest.approx(2.0)


def test_icd_is_quadratic_per_layer():
    t = {"a": Tensor(np.zeros(4)), "b": Tensor(np.zeros(4))}
    s1 = {"a": Tensor(np.ones(4)), "b": Tensor(np.zeros(4))}
    s2 = {"a": Tensor(2.0 * np.ones(4)), "b": Tensor(np.zeros(4))}
    l1 = icmd.icd_loss(t, s1).item()
    l2 = icmd.icd_loss(t, s2).item()
    assert l2 == pytest.approx(4.0 * l1)


def test_icd_no_shared_layers_errors():
    with pytest.raises(VdminiError, match="no aligned feature layers"):
        icmd.icd_loss({"a": Tensor(np.zeros(2))}, {"b": Tensor(np.zeros(2))})


def test_align_shape_mismatch_names_the_layer():
    t = {"D.2": Tensor(np.zeros((2, 3)))}
    s = {"D.2": Tensor(np.zeros((2, 4)))}
    with pytest.raises(ShapeError, match="D.2"):
        icmd.align_features(t, s)


def test_align_unpruned_models_share_all_boundaries():
    graph = ng.make_unet_graph(ng.ORIGIN_LAYER_COUNTS, SMALL_WIDTHS, emb_dim=8)
    teacher = ng.build(graph, 1)
    clone = ng.Model(graph, dict(teacher.params))
    x = Tensor(np.zeros((2, 1, 16, 16)))
    _, ft = teacher.forward(x, 0.1, collect_features=True)
    _, fs = clone.forward(x, 0.1, collect_features=True)
    pairs = icmd.align_features(ft, fs)
    assert len(pairs) == len(ft)
    for _, t, s in pairs:
        assert np.array_equal(t.data, s.data)


def test_align_pruned_student_keeps_eight_boundaries():
    teacher, student = _models()
    x = Tensor(np.zeros((2, 1, 16, 16)))
    _, ft = teacher.forward(x, 0.1, collect_features=True)
    _, fs = student.forward(x, 0.1, collect_features=True)
    pairs = icmd.align_features(ft, fs)
    assert len(pairs) == 8
    assert [k for k, _, _ in pairs] == ["D.0", "D.1", "D.2", "D.3",
                                        "U.0", "U.1", "U.2", "U.3"]
    for _, t, s in pairs:
        assert t.shape == s.shape


# ---------------------------------------------------------------------------
# instance noise
# ---------------------------------------------------------------------------

def test_instance_noise_at_the_mean():
    params = icmd.InstanceNoiseParams()
    t, sigma = icmd.sample_instance_noise(params, _FixedNormal(0.0))
    assert sigma == pytest.approx(math.exp(0.7), rel=1e-9)
    assert sigma == pytest.approx(2.013753, abs=1e-6)
    assert t == 500  # the exact middle of 999 log-spaced bins


def test_instance_noise_range_and_log_mean():
    params = icmd.InstanceNoiseParams()
    rng = np.random.default_rng(0)
    ts = []
    logs = []
    for _ in range(10 ** 5):
        t, sigma = icmd.sample_instance_noise(params, rng)
        ts.append(t)
        logs.append(math.log(sigma))
    assert min(ts) >= 1 and max(ts) <= 999
    assert abs(np.mean(logs) - params.p_mean) < 0.02


def test_instance_noise_bad_index():
    params = icmd.InstanceNoiseParams()
    with pytest.raises(VdminiError):
        params.sigma_of(0)
    with pytest.raises(VdminiError):
        params.sigma_of(1000)


# ---------------------------------------------------------------------------
# adversarial losses
# ---------------------------------------------------------------------------

def test_gen_loss_values():
    assert icmd.mca_gen_loss(Tensor(0.0)).item() == pytest.approx(math.log(2.0))
    assert icmd.mca_gen_loss(Tensor(30.0)).item() < 1e-12
    big = icmd.mca_gen_loss(Tensor(-30.0)).item()
    assert big == pytest.approx(30.0, abs=1e-9)


def test_disc_loss_values():
    def loss(fake, real):
        return icmd.mca_disc_loss(Tensor(fake), Tensor(real)).item()
    assert loss(-1.0, 1.0) == 0.0
    assert loss(0.0, 0.0) == pytest.approx(2.0)
    assert loss(2.0, -2.0) == pytest.approx(6.0)
    assert loss(-5.0, 7.0) == 0.0


# ---------------------------------------------------------------------------
# the discriminator
# ---------------------------------------------------------------------------

def test_discriminator_initial_logit_is_zero():
    disc = icmd.Discriminator(seed=3)
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((3, 1, 16, 16)))
    assert disc.forward(x, sigma=1.0).item() == 0.0


def test_discriminator_rejects_bad_shape():
    disc = icmd.Discriminator()
    with pytest.raises(ShapeError):
        disc.forward(Tensor(np.zeros((2, 3, 16, 16))), sigma=1.0)


def _trained_disc():
    # nudge the zero-initialized output layers so logits are informative
    disc = icmd.Discriminator(seed=3)
    rng = np.random.default_rng(1)
    for name in ("spatio.out.w", "temporal.out.w"):
        disc.params[name] = Tensor(rng.standard_normal(disc.params[name].shape) * 0.1,
                                   requires_grad=True)
    return disc


def test_discriminator_temporal_head_sees_frame_order():
    disc = _trained_disc()
    video = sd.gen_dataset(1, 2, frames=6, speeds=(3,)).tensors()[0]
    shuffled = Tensor(video.data[[3, 1, 5, 0, 2, 4]])
    a = disc.forward(video, sigma=1.0).item()
    b = disc.forward(shuffled, sigma=1.0).item()
    assert a != b


def test_discriminator_static_video_is_order_invariant():
    disc = _trained_disc()
    frame = np.random.default_rng(2).standard_normal((1, 1, 16, 16))
    static = Tensor(np.repeat(frame, 6, axis=0))
    rolled = Tensor(np.roll(static.data, 2, axis=0))
    assert disc.forward(static, 1.0).item() == disc.forward(rolled, 1.0).item()


def test_discriminator_conditions_on_sigma():
    disc = _trained_disc()
    x = Tensor(np.random.default_rng(3).standard_normal((2, 1, 16, 16)))
    assert disc.forward(x, 0.1).item() != disc.forward(x, 10.0).item()


# ---------------------------------------------------------------------------
# the alternating distillation step
# ---------------------------------------------------------------------------

def _state(**kw):
    teacher, student = _models()
    return icmd.DistillState(student=student, teacher=teacher,
                             disc=icmd.Discriminator(seed=2),
                             schedule=NoiseSchedule(), **kw)


def test_distill_step_zero_weights_total_equals_task():
    state = _state(weights=icmd.LossWeights(lambda_icd=0.0, lambda_mca=0.0))
    out = icmd.distill_step(state, _batch(), np.random.default_rng(0))
    assert out["total"] == out["task"]
    assert out["step"] == 1


def test_distill_step_warmup_gates_adversarial_terms():
    state = _state(weights=icmd.LossWeights(mca_warmup_steps=3))
    disc_before = {n: p.data.copy() for n, p in state.disc.params.items()}
    out = icmd.distill_step(state, _batch(), np.random.default_rng(0))
    assert out["mca_gen"] == 0.0 and out["mca_disc"] == 0.0
    for n, p in state.disc.params.items():
        assert np.array_equal(p.data, disc_before[n])


def test_distill_step_past_warmup_engages_adversary():
    state = _state(weights=icmd.LossWeights(mca_warmup_steps=0))
    out = icmd.distill_step(state, _batch(), np.random.default_rng(0))
    # the hinge is scored against the zero-initialized critic, exactly 2;
    # the generator term follows one tiny critic update, so it is near ln 2
    assert out["mca_disc"] == pytest.approx(2.0, abs=1e-12)
    assert out["mca_gen"] == pytest.approx(math.log(2.0), abs=1e-3)


def test_distill_step_breakdown_identity():
    state = _state()
    out = icmd.distill_step(state, _batch(), np.random.default_rng(1))
    expect = out["task"] + 0.1 * out["icd"] + 1.0 * (out["mca_gen"] + out["mca_disc"])
    assert out["total"] == pytest.approx(expect, rel=0.0, abs=0.0)


def test_distill_step_teacher_frozen():
    state = _state()
    before = state.teacher.param_checksum()
    for i in range(2):
        icmd.distill_step(state, _batch(), np.random.default_rng(i))
    assert state.teacher.param_checksum() == before


def test_distill_step_moves_student_and_disc():
    state = _state()
    s_before = state.student.param_checksum()
    d_before = {n: p.data.copy() for n, p in state.disc.params.items()}
    icmd.distill_step(state, _batch(), np.random.default_rng(0))
    assert state.student.param_checksum() != s_before
    assert any(not np.array_equal(p.data, d_before[n])
               for n, p in state.disc.params.items())


def test_distill_step_nonfinite_names_term():
    state = _state(weights=icmd.LossWeights(mca_warmup_steps=10))
    name = next(iter(state.student.params))
    bad = state.student.params[name].data.copy()
    bad.flat[0] = np.nan
    state.student.params[name] = Tensor(bad, requires_grad=True)
    with pytest.raises(NonFiniteError, match="task|icd"):
        icmd.distill_step(state, _batch(), np.random.default_rng(0))


def test_distill_step_rejects_mutated_teacher():
    state = _state()
    name = next(iter(state.teacher.params))
    state.teacher.params[name] = Tensor(state.teacher.params[name].data + 1.0,
                                        requires_grad=True)
    with pytest.raises(VdminiError, match="teacher parameters changed"):
        icmd.distill_step(state, _batch(), np.random.default_rng(0))


def test_distill_step_empty_batch():
    state = _state()
    with pytest.raises(VdminiError, match="empty batch"):
        icmd.distill_step(state, [], np.random.default_rng(0))
