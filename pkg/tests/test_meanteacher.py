"""Teacher EMA, pseudo-label plumbing, and the consistency objective."""

import math

import numpy as np
import pytest
import torch

from mdbank.detector import Detector, DetectorConfig, image_to_tensor
from mdbank.meanteacher import (
    TeacherState,
    consistency_loss,
    ema_update,
    make_teacher,
    student_on_shared_proposals,
    teacher_pseudo_labels,
)
from mdbank.synthdata import SceneSpec, render_scene

LN2 = math.log(2.0)


def target_image(seed=5):
    spec = SceneSpec(
        objects=[(1, (30.0, 30.0), 20.0, 0.0), (3, (64.0, 62.0), 24.0, 0.3)], rng_seed=seed
    )
    return image_to_tensor(render_scene(spec, "target").pixels)


class TestMakeTeacher:
    def test_frozen_and_eval(self):
        teacher = make_teacher(Detector())
        assert not teacher.detector.training
        assert all(not p.requires_grad for p in teacher.detector.parameters())
        assert teacher.initialized_from_student

    def test_deep_copy_isolation(self):
        student = Detector()
        teacher = make_teacher(student)
        with torch.no_grad():
            next(student.parameters()).add_(1.0)
        s = next(student.parameters())
        t = next(teacher.detector.parameters())
        assert not torch.equal(s, t)

    @pytest.mark.parametrize("alpha", [-0.1, 1.0, 1.5])
    def test_alpha_domain(self, alpha):
        with pytest.raises(ValueError):
            TeacherState(detector=Detector(), alpha=alpha)


class TestEMAUpdate:
    def test_exact_convex_combination(self):
        torch.manual_seed(0)
        student = Detector()
        teacher = make_teacher(student, alpha=0.99)
        with torch.no_grad():
            for p in student.parameters():
                p.add_(torch.randn_like(p))
        before = {n: p.clone() for n, p in teacher.detector.named_parameters()}
        ema_update(teacher, student)
        s_params = dict(student.named_parameters())
        for n, p in teacher.detector.named_parameters():
            expected = 0.99 * before[n] + (1.0 - 0.99) * s_params[n]
            assert torch.equal(p, expected), n

    def test_alpha_zero_copies_student(self):
        student = Detector()
        teacher = make_teacher(student, alpha=0.0)
        with torch.no_grad():
            for p in student.parameters():
                p.mul_(1.3).add_(0.1)
        ema_update(teacher, student)
        for (n, t), (_, s) in zip(
            teacher.detector.named_parameters(), student.named_parameters()
        ):
            assert torch.equal(t, s), n

    def test_contraction_factor_over_100_steps(self):
        torch.manual_seed(1)
        student = Detector(DetectorConfig(feat_dim=16, head_hidden=32)).double()
        teacher = make_teacher(student, alpha=0.99)
        with torch.no_grad():
            for p in teacher.detector.parameters():
                p.add_(torch.randn_like(p))

        @torch.no_grad()
        def gap():
            total = 0.0
            s_params = dict(student.named_parameters())
            for n, t in teacher.detector.named_parameters():
                total += float(((t - s_params[n]) ** 2).sum())
            return math.sqrt(total)

        g = gap()
        for _ in range(100):
            ema_update(teacher, student)
            g_next = gap()
            assert g_next == pytest.approx(0.99 * g, abs=1e-9 * max(1.0, g))
            g = g_next

    def test_student_untouched(self):
        student = Detector()
        before = {n: p.clone() for n, p in student.named_parameters()}
        teacher = make_teacher(student)
        with torch.no_grad():
            next(teacher.detector.parameters()).add_(2.0)
        ema_update(teacher, student)
        for n, p in student.named_parameters():
            assert torch.equal(p, before[n])

    def test_name_mismatch_rejected(self):
        teacher = make_teacher(Detector())
        with pytest.raises(ValueError, match="names differ"):
            ema_update(teacher, torch.nn.Linear(3, 3))

    def test_shape_mismatch_rejected(self):
        teacher = make_teacher(Detector())
        with pytest.raises(ValueError, match="shape mismatch"):
            ema_update(teacher, Detector(DetectorConfig(feat_dim=32)))


@pytest.fixture(scope="module")
def teacher():
    torch.manual_seed(2)
    return make_teacher(Detector())


class TestPseudoLabels:

    def test_deterministic(self, teacher):
        img = target_image()
        a = teacher_pseudo_labels(teacher, img, 64)
        b = teacher_pseudo_labels(teacher, img, 64)
        assert torch.equal(a.proposals, b.proposals)
        assert torch.equal(a.teacher_probs, b.teacher_probs)
        assert torch.equal(a.teacher_deltas, b.teacher_deltas)

    def test_shapes_and_simplex(self, teacher):
        out = teacher_pseudo_labels(teacher, target_image(), 64)
        k = out.proposals.shape[0]
        assert 0 < k <= 64
        assert out.teacher_probs.shape == (k, 4)
        assert out.teacher_deltas.shape == (k, 3, 4)
        sums = out.teacher_probs.sum(dim=1)
        assert float((sums - 1).abs().max()) < 1e-6

    def test_outputs_detached(self, teacher):
        out = teacher_pseudo_labels(teacher, target_image(), 16)
        assert not out.proposals.requires_grad
        assert not out.teacher_probs.requires_grad
        assert not out.teacher_deltas.requires_grad

    def test_training_mode_restored(self, teacher):
        teacher.detector.train()
        try:
            teacher_pseudo_labels(teacher, target_image(), 8)
            assert teacher.detector.training
        finally:
            teacher.detector.eval()


class TestSharedProposals:
    def test_identical_networks_agree(self):
        torch.manual_seed(3)
        student = Detector()
        teacher = make_teacher(student)
        img = target_image()
        pseudo = teacher_pseudo_labels(teacher, img, 32)
        head, features = student_on_shared_proposals(student, img, pseudo.proposals)
        assert torch.equal(head.class_probs.detach(), pseudo.teacher_probs)
        assert torch.equal(head.box_deltas.detach(), pseudo.teacher_deltas)
        assert features.shape == (pseudo.proposals.shape[0], student.config.pooled_dim)

    def test_permutation_equivariance(self):
        torch.manual_seed(4)
        student = Detector()
        img = target_image()
        proposals = teacher_pseudo_labels(make_teacher(student), img, 24).proposals
        perm = torch.randperm(proposals.shape[0])
        head_a, feats_a = student_on_shared_proposals(student, img, proposals)
        head_b, feats_b = student_on_shared_proposals(student, img, proposals[perm])
        assert torch.equal(head_b.class_probs, head_a.class_probs[perm])
        assert torch.equal(feats_b, feats_a[perm])

    def test_gradient_reaches_student_not_teacher(self):
        torch.manual_seed(5)
        student = Detector()
        teacher = make_teacher(student)
        # identical nets agree exactly -> zero loss with exactly-zero gradient,
        # so push the student away from the teacher first
        with torch.no_grad():
            for p in student.parameters():
                p.add_(0.01 * torch.randn_like(p))
        img = target_image()
        pseudo = teacher_pseudo_labels(teacher, img, 16)
        head, _ = student_on_shared_proposals(student, img, pseudo.proposals)
        weights = torch.full_like(pseudo.teacher_probs, LN2)
        loss = consistency_loss(
            pseudo.teacher_probs, pseudo.teacher_deltas,
            head.class_probs, head.box_deltas, weights,
        )
        loss.backward()
        assert any(
            p.grad is not None and float(p.grad.abs().sum()) > 0
            for p in student.parameters()
        )
        assert all(p.grad is None for p in teacher.detector.parameters())


class TestConsistencyLoss:
    def test_hand_computed_value(self):
        p_t = torch.tensor([[1.0, 0.0]])
        p_s = torch.tensor([[0.0, 1.0]])
        b = torch.zeros(1, 1, 4)
        w = torch.full((1, 2), LN2)
        loss = consistency_loss(p_t, b, p_s, b, w)
        assert float(loss) == pytest.approx(LN2 * math.sqrt(2.0), rel=1e-6)

    def test_perfect_agreement_is_zero(self):
        torch.manual_seed(6)
        p = torch.softmax(torch.randn(5, 4), dim=1)
        b = torch.randn(5, 3, 4)
        w = torch.rand(5, 4) * LN2
        assert float(consistency_loss(p, b, p.clone(), b.clone(), w)) == 0.0

    def test_zero_weights_zero_loss_and_gradient(self):
        torch.manual_seed(7)
        p_t = torch.softmax(torch.randn(4, 4), dim=1)
        p_s = torch.softmax(torch.randn(4, 4), dim=1).requires_grad_()
        b_t = torch.randn(4, 3, 4)
        b_s = torch.randn(4, 3, 4, requires_grad=True)
        loss = consistency_loss(p_t, b_t, p_s, b_s, torch.zeros(4, 4))
        assert float(loss.detach()) == 0.0
        loss.backward()
        assert float(p_s.grad.abs().max()) == 0.0
        assert float(b_s.grad.abs().max()) == 0.0
        assert not torch.isnan(p_s.grad).any()

    def test_matches_numpy_reference(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            k, c = int(rng.integers(1, 9)), int(rng.integers(1, 5))
            p_t = rng.dirichlet(np.ones(c + 1), size=k)
            p_s = rng.dirichlet(np.ones(c + 1), size=k)
            b_t = rng.standard_normal((k, c, 4))
            b_s = rng.standard_normal((k, c, 4))
            w = rng.uniform(0, LN2, size=(k, c + 1))

            cls = np.linalg.norm(w * (p_t - p_s), axis=1).mean()
            box = np.linalg.norm(
                (w[:, :c, None] * (b_t - b_s)).reshape(k, -1), axis=1
            ).mean()

            loss = consistency_loss(
                torch.tensor(p_t), torch.tensor(b_t),
                torch.tensor(p_s), torch.tensor(b_s), torch.tensor(w),
            )
            assert float(loss) == pytest.approx(cls + box, rel=1e-12)

    def test_background_weight_never_touches_boxes(self):
        torch.manual_seed(8)
        p = torch.softmax(torch.randn(3, 4), dim=1)
        b_t = torch.randn(3, 3, 4)
        b_s = torch.randn(3, 3, 4)
        w1 = torch.rand(3, 4)
        w2 = w1.clone()
        w2[:, -1] = 0.0  # background column
        a = consistency_loss(p, b_t, p.clone(), b_s, w1)
        b = consistency_loss(p, b_t, p.clone(), b_s, w2)
        assert float(a) == pytest.approx(float(b), rel=1e-12)

    def test_teacher_inputs_never_get_gradient(self):
        p_t = torch.softmax(torch.randn(2, 4), dim=1).requires_grad_()
        b_t = torch.randn(2, 3, 4, requires_grad=True)
        p_s = torch.softmax(torch.randn(2, 4), dim=1).requires_grad_()
        b_s = torch.randn(2, 3, 4, requires_grad=True)
        loss = consistency_loss(p_t, b_t, p_s, b_s, torch.ones(2, 4))
        loss.backward()
        assert p_t.grad is None and b_t.grad is None
        assert p_s.grad is not None

    def test_negative_weights_rejected(self):
        p = torch.softmax(torch.randn(2, 4), dim=1)
        b = torch.randn(2, 3, 4)
        w = torch.ones(2, 4)
        w[0, 0] = -1e-6
        with pytest.raises(ValueError, match="non-negative"):
            consistency_loss(p, b, p, b, w)

    def test_nan_input_rejected(self):
        p = torch.softmax(torch.randn(2, 4), dim=1)
        b = torch.randn(2, 3, 4)
        bad = p.clone()
        bad[0, 0] = float("nan")
        with pytest.raises(ValueError, match="student_probs"):
            consistency_loss(p, b, bad, b, torch.ones(2, 4))

    def test_shape_mismatch_rejected(self):
        p = torch.softmax(torch.randn(2, 4), dim=1)
        b = torch.randn(2, 3, 4)
        with pytest.raises(ValueError):
            consistency_loss(p, b, p[:1], b[:1], torch.ones(2, 4))
        with pytest.raises(ValueError):
            consistency_loss(p, b, p, b, torch.ones(2, 3))
