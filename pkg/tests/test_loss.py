import numpy as np
import pytest
import torch

from phasevsr.errors import ShapeError
from phasevsr.loss import stage_l1, total_loss
from phasevsr.model import StagedOutput


def abs_sum_oracle(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    frames = pred.reshape(-1, *pred.shape[-2:])
    tgt = target.reshape(-1, *target.shape[-2:])
    total = 0.0
    for f, g in zip(frames, tgt):
        total += sum(abs(float(a) - float(b)) for a, b in zip(f.ravel(), g.ravel()))
    return total / len(frames)


def staged(preds, aux_f=None, aux_b=None):
    return StagedOutput(list(preds), list(aux_f if aux_f is not None else preds),
                        list(aux_b if aux_b is not None else preds))


def test_zero_at_perfect_prediction():
    x = torch.rand(2, 3, 8, 8)
    assert stage_l1(x, x).item() == 0.0


def test_hand_example_two_by_two():
    pred = torch.zeros(1, 2, 2, dtype=torch.float64)
    assert stage_l1(pred, pred + 0.5).item() == 2.0


def test_matches_oracle():
    rng = np.random.default_rng(0)
    pred, target = rng.random((2, 5, 6, 7)), rng.random((2, 5, 6, 7))
    got = stage_l1(torch.from_numpy(pred), torch.from_numpy(target)).item()
    assert abs(got - abs_sum_oracle(pred, target)) <= 1e-10


def test_mean_reduction():
    pred, target = torch.zeros(3, 4, 4), torch.full((3, 4, 4), 0.25)
    assert stage_l1(pred, target, reduction="mean").item() == pytest.approx(0.25)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        stage_l1(torch.zeros(2, 4, 4), torch.zeros(2, 4, 5))


def test_gradient_is_sign_over_frames():
    gen = torch.Generator().manual_seed(3)
    pred = torch.rand(5, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    target = torch.rand(5, 4, 4, generator=gen, dtype=torch.float64)
    stage_l1(pred, target).backward()
    assert torch.equal(pred.grad, torch.sign(pred.detach() - target) / 5)

    # central differences, away from ties
    h = 1e-6
    for idx in [(0, 0, 0), (2, 1, 3), (4, 3, 2)]:
        p = pred.detach().clone()
        p[idx] += h
        up = stage_l1(p, target).item()
        p[idx] -= 2 * h
        down = stage_l1(p, target).item()
        assert (up - down) / (2 * h) == pytest.approx(pred.grad[idx].item(), rel=1e-6)


def test_tie_subgradient_zero():
    pred = torch.zeros(1, 2, 2, requires_grad=True)
    stage_l1(pred, torch.zeros(1, 2, 2)).backward()
    assert torch.count_nonzero(pred.grad) == 0


def test_total_single_stage():
    target = torch.zeros(1, 2, 4, 4)
    out = staged([torch.full_like(target, 0.1)], [torch.full_like(target, 0.2)], [torch.full_like(target, 0.3)])
    rep = total_loss(out, target)
    main, f, b = rep.per_stage[0]
    assert rep.total == pytest.approx(main + f + b, rel=1e-6)
    assert (main, f, b) == pytest.approx((1.6, 3.2, 4.8), rel=1e-6)


def test_total_counts_every_term():
    gen = torch.Generator().manual_seed(0)
    target = torch.rand(2, 3, 8, 8, generator=gen)
    n_stages = 3
    outs = [[torch.rand(2, 3, 8, 8, generator=gen) for _ in range(n_stages)] for _ in range(3)]
    rep = total_loss(StagedOutput(*outs), target)
    assert len(rep.per_stage) == n_stages
    expected = sum(stage_l1(o, target).item() for group in outs for o in group)
    assert rep.total == pytest.approx(expected, rel=1e-6)
    assert rep.total == pytest.approx(sum(sum(t) for t in rep.per_stage), rel=1e-6)


def test_total_zero_when_exact():
    target = torch.rand(1, 2, 4, 4)
    assert total_loss(staged([target, target]), target).total == 0.0


def test_total_homogeneous():
    gen = torch.Generator().manual_seed(5)
    target = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    errs = [torch.randn(2, 3, 8, 8, generator=gen, dtype=torch.float64) for _ in range(6)]
    one = total_loss(StagedOutput([target + errs[0], target + errs[1]], [target + errs[2], target + errs[3]],
                                  [target + errs[4], target + errs[5]]), target).total
    two = total_loss(StagedOutput([target + 2 * errs[0], target + 2 * errs[1]],
                                  [target + 2 * errs[2], target + 2 * errs[3]],
                                  [target + 2 * errs[4], target + 2 * errs[5]]), target).total
    assert two == pytest.approx(2 * one, rel=1e-12)


def test_missing_auxiliary_outputs():
    target = torch.zeros(1, 2, 4, 4)
    with pytest.raises(ShapeError):
        total_loss(StagedOutput([target, target], [target], [target, target]), target)
    with pytest.raises(ShapeError):
        total_loss(StagedOutput([target], [], []), target)
