import pytest

from cmrl.curiosity import CuriosityConfig, intrinsic_reward
from cmrl.errors import ContractViolation
from cmrl.world_model import CodeLengthReport


def _report(total, steps=10):
    return CodeLengthReport(E=0.0, bits_H=total, bits_M=0.0, steps_scored=steps)


def test_disabled_gives_zero():
    cfg = CuriosityConfig(eta=0.5, enabled=False)
    assert intrinsic_reward(_report(120), _report(100), cfg) == 0.0


def test_arithmetic():
    cfg = CuriosityConfig(eta=0.01, enabled=True)
    assert intrinsic_reward(_report(120.0), _report(100.0), cfg) == pytest.approx(0.2)


def test_clip_negative():
    cfg = CuriosityConfig(eta=0.01, enabled=True, clip_negative=True)
    assert intrinsic_reward(_report(100.0), _report(130.0), cfg) == 0.0
    uncapped = CuriosityConfig(eta=0.01, enabled=True, clip_negative=False)
    assert intrinsic_reward(_report(100.0), _report(130.0), uncapped) == pytest.approx(-0.3)


def test_zero_improvement_zero_reward():
    cfg = CuriosityConfig(eta=0.7, enabled=True)
    assert intrinsic_reward(_report(55.5), _report(55.5), cfg) == 0.0


def test_scale_linearity():
    a = CuriosityConfig(eta=0.02, enabled=True)
    b = CuriosityConfig(eta=0.04, enabled=True)
    r1 = intrinsic_reward(_report(200.0), _report(150.0), a)
    r2 = intrinsic_reward(_report(200.0), _report(150.0), b)
    assert r2 == pytest.approx(2 * r1)


def test_span_mismatch_rejected():
    cfg = CuriosityConfig(eta=0.01, enabled=True)
    with pytest.raises(ContractViolation):
        intrinsic_reward(_report(120, steps=10), _report(100, steps=11), cfg)


def test_negative_eta_rejected():
    with pytest.raises(ContractViolation):
        CuriosityConfig(eta=-0.1)
