import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semicontrast.losses import UNLABELED
from semicontrast.pseudolabel import (
    SWEEP_THRESHOLDS,
    ConfidenceMap,
    Source,
    confidence_from_logits,
    merge_labels,
    refresh_pseudo_labels,
)


def _conf_from_probs(probs):
    """Build a confidence map directly from a (C, H, W) probability tensor."""
    probs = torch.as_tensor(probs, dtype=torch.float64)
    maxprob, argmax = probs.max(0)
    return ConfidenceMap(probs=probs, argmax=argmax, maxprob=maxprob)


class TestConfidence:
    def test_uniform_tie_goes_to_smaller_id(self):
        conf = confidence_from_logits(torch.zeros(2, 1, 1))
        assert conf.maxprob.item() == pytest.approx(0.5) and conf.argmax.item() == 0

    def test_scalar_oracle(self):
        conf = confidence_from_logits(torch.tensor([2.0, 0.0, 0.0], dtype=torch.float64).reshape(3, 1, 1))
        expected = math.exp(2) / (math.exp(2) + 2)
        assert expected == pytest.approx(0.7870, abs=1e-4)
        assert conf.maxprob.item() == pytest.approx(expected, abs=1e-12)

    def test_saturation(self):
        conf = confidence_from_logits(torch.tensor([30.0, 0.0], dtype=torch.float64).reshape(2, 1, 1))
        assert conf.maxprob.item() == pytest.approx(1.0, abs=1e-9)

    def test_rows_sum_to_one_and_consistent(self):
        logits = torch.randn(2, 5, 4, 4, generator=torch.Generator().manual_seed(0)) * 10
        conf = confidence_from_logits(logits)
        assert torch.allclose(conf.probs.sum(-3), torch.ones(2, 4, 4), atol=1e-5)
        assert torch.equal(conf.argmax, logits.argmax(-3))
        assert torch.allclose(conf.maxprob, conf.probs.max(-3).values)


class TestMerge:
    def test_threshold_examples(self):
        y = torch.tensor([[1, UNLABELED, UNLABELED]])
        probs = np.zeros((3, 1, 3))
        probs[:, 0, 0] = [0.98, 0.01, 0.01]  # labeled pixel, confident disagreement
        probs[:, 0, 1] = [0.03, 0.02, 0.95]
        probs[:, 0, 2] = [0.85, 0.10, 0.05]
        mask = merge_labels(y, _conf_from_probs(probs), 0.9)
        assert mask.grid.tolist() == [[1, 2, UNLABELED]]
        assert mask.source.tolist() == [[Source.GROUND_TRUTH, Source.PSEUDO, Source.NONE]]
        assert mask.num_pseudo() == 1

    def test_threshold_above_one_disables(self):
        conf = confidence_from_logits(torch.tensor([50.0, 0.0]).reshape(2, 1, 1).expand(2, 3, 3))
        mask = merge_labels(torch.full((3, 3), UNLABELED), conf, 1.01)
        assert mask.num_pseudo() == 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            merge_labels(torch.zeros(2, 2, dtype=torch.long), confidence_from_logits(torch.zeros(3, 2, 3)), 0.9)

    def test_nonpositive_threshold(self):
        with pytest.raises(ValueError):
            merge_labels(torch.zeros(1, 1, dtype=torch.long), confidence_from_logits(torch.zeros(2, 1, 1)), 0.0)

    def test_sweep_thresholds(self):
        assert SWEEP_THRESHOLDS == (0.99, 0.9, 0.7, 0.5)


@st.composite
def grids(draw):
    seed = draw(st.integers(0, 2**31 - 1))
    rng = np.random.default_rng(seed)
    c, h, w = int(rng.integers(2, 6)), int(rng.integers(1, 8)), int(rng.integers(1, 8))
    logits = torch.as_tensor(rng.standard_normal((c, h, w)) * rng.uniform(0.1, 8))
    y = torch.as_tensor(rng.choice(list(range(c)) + [UNLABELED] * c, size=(h, w)))
    return y, confidence_from_logits(logits)


thresholds = st.floats(min_value=0.01, max_value=1.2)


@settings(max_examples=100, deadline=None)
@given(grids(), thresholds, thresholds)
def test_monotone_in_threshold(yc, t1, t2):
    y, conf = yc
    lo, hi = sorted((t1, t2))
    pseudo_lo = merge_labels(y, conf, lo).source == Source.PSEUDO
    pseudo_hi = merge_labels(y, conf, hi).source == Source.PSEUDO
    assert not bool((pseudo_hi & ~pseudo_lo).any())


@settings(max_examples=100, deadline=None)
@given(grids(), thresholds)
def test_ground_truth_conserved(yc, t):
    y, conf = yc
    mask = merge_labels(y, conf, t)
    gt = mask.source == Source.GROUND_TRUTH
    assert int(gt.sum()) == int((y != UNLABELED).sum())
    assert torch.equal(mask.grid[gt], y[gt])
    assert bool((mask.grid[mask.source == Source.NONE] == UNLABELED).all())


@settings(max_examples=100, deadline=None)
@given(grids(), thresholds)
def test_idempotent(yc, t):
    y, conf = yc
    once = merge_labels(y, conf, t)
    again = merge_labels(y, conf, t)
    twice = merge_labels(once.grid, conf, t)
    assert torch.equal(once.grid, again.grid) and torch.equal(once.source, again.source)
    assert torch.equal(twice.grid, once.grid)


class _FixedLogits(torch.nn.Module):
    """Logits that depend only on the image so refreshes are reproducible."""

    def __init__(self, c=3):
        super().__init__()
        self.proj = torch.nn.Conv2d(3, c, 1)
        torch.nn.init.constant_(self.proj.weight, 0.0)
        with torch.no_grad():
            self.proj.weight[:, :, 0, 0] = torch.tensor([[8.0, 0, 0], [0, 8.0, 0], [0, 0, 8.0]])

    def forward(self, x):
        return self.proj(x)


def _dataset(n=5, size=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    out = []
    for _ in range(n):
        img = torch.rand(3, size, size, generator=g)
        lab = torch.randint(0, 3, (size, size), generator=g)
        lab[torch.rand(size, size, generator=g) < 0.5] = UNLABELED
        out.append((img, lab))
    return out


def test_refresh_deterministic_and_threshold_effects():
    model, data = _FixedLogits(), _dataset()
    a = refresh_pseudo_labels(model, data, 0.5, batch_size=2)
    b = refresh_pseudo_labels(model, data, 0.5, batch_size=3)
    assert all(torch.equal(x.grid, y.grid) and torch.equal(x.source, y.source) for x, y in zip(a, b))
    strict = refresh_pseudo_labels(model, data, 1.01)
    assert all(m.num_pseudo() == 0 for m in strict)
    hi = refresh_pseudo_labels(model, data, 0.9)
    for m_lo, m_hi in zip(a, hi):
        assert not bool(((m_hi.source == Source.PSEUDO) & (m_lo.source != Source.PSEUDO)).any())


def test_refresh_restores_training_mode():
    model = _FixedLogits().train()
    refresh_pseudo_labels(model, _dataset(2), 0.9)
    assert model.training


class _FlakyModel(_FixedLogits):
    """Fails on any batch containing the poisoned image."""

    def forward(self, x):
        if bool((x[:, 0, 0, 0] == -1.0).any()):
            raise RuntimeError("boom")
        return super().forward(x)


def test_refresh_skips_failing_image(caplog):
    data = _dataset(4)
    img, lab = data[2]
    img = img.clone()
    img[0, 0, 0] = -1.0
    data[2] = (img, lab)
    with caplog.at_level(logging.WARNING):
        masks = refresh_pseudo_labels(_FlakyModel(), data, 0.5, batch_size=4)
    assert len(masks) == 4
    assert masks[2].num_pseudo() == 0 and torch.equal(masks[2].grid, lab)
    assert any("image 2" in r.message for r in caplog.records)
    assert masks[0].num_pseudo() > 0
