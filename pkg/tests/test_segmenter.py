import numpy as np
import pytest
import torch

from pcn.core import LabelMask, Phase, Volume
from pcn.errors import ShapeMismatchError
from pcn.segmenter import (
    ProbMap,
    SegArch,
    mask_to_tensor,
    probs_loss,
    seg_forward,
    seg_init,
    seg_loss,
    volume_to_tensor,
)

from gradcheck import directional_check

MICRO = SegArch(depth=1, base_width=4, num_classes=3)


def micro_model(seed=1, dtype=torch.float64):
    return seg_init(MICRO, seed=seed, dtype=dtype)


class TestSegInit:
    def test_deterministic_bitwise(self):
        a = seg_init(MICRO, seed=7)
        b = seg_init(MICRO, seed=7)
        assert torch.equal(a.params(), b.params())

    def test_different_seeds_differ(self):
        assert not torch.equal(seg_init(MICRO, seed=1).params(),
                               seg_init(MICRO, seed=2).params())

    def test_output_shape(self):
        m = seg_init(SegArch(depth=1, base_width=4, num_classes=5), seed=0)
        out = m.probs(torch.zeros(1, 1, 64, 64))
        assert out.shape == (1, 5, 64, 64)

    def test_probmap_rows_sum_to_one(self):
        m = micro_model()
        vol = Volume(data=np.random.default_rng(0)
                     .uniform(-125, 275, (16, 16)).astype(np.float32),
                     phase=Phase.ARTERIAL, case_id="c")
        pm = seg_forward(m, vol)
        assert np.allclose(pm.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_too_deep_for_grid(self):
        with pytest.raises(ValueError):
            seg_init(SegArch(depth=4, base_width=4, num_classes=2), seed=0,
                     grid_size=16)
        m = seg_init(SegArch(depth=4, base_width=4, num_classes=2), seed=0)
        with pytest.raises(ValueError):
            m.probs(torch.zeros(1, 1, 16, 16))

    def test_micro_param_budget(self):
        assert micro_model().param_count <= 5000

    def test_default_param_scale(self):
        m = seg_init(SegArch(), seed=0)
        assert 5e4 <= m.param_count <= 2e5


class TestSegForward:
    def test_purity(self):
        m = micro_model()
        x = torch.randn(2, 1, 16, 16, dtype=torch.float64)
        assert torch.equal(m.probs(x), m.probs(x))

    def test_input_normalization_fixed_map(self):
        # the forward consumes HU via (hu - 75) / 200; feeding the
        # pre-normalized tensor must agree with the Volume path
        m = micro_model()
        rng = np.random.default_rng(3)
        hu = rng.uniform(-125, 275, (16, 16)).astype(np.float32)
        vol = Volume(data=hu, phase=Phase.ARTERIAL, case_id="c")
        via_volume = seg_forward(m, vol).data
        unit = (torch.from_numpy(hu).double() - 75.0) / 200.0
        via_tensor = m.probs(unit.unsqueeze(0).unsqueeze(0))[0].permute(1, 2, 0).detach().numpy()
        assert np.allclose(via_volume, via_tensor, atol=1e-12)

    def test_parameter_gradient_matches_finite_differences(self):
        m = micro_model()
        g = torch.Generator().manual_seed(5)
        x = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64) * 1.6 - 0.8
        y = torch.randint(0, 3, (1, 16, 16), generator=g)
        directional_check(lambda: seg_loss(m, x, y), m.net.parameters(),
                          n_dirs=8, seed=2)

    def test_shape_mismatch(self):
        m = micro_model()
        with pytest.raises(ShapeMismatchError):
            seg_loss(m, torch.zeros(1, 1, 16, 16, dtype=torch.float64),
                     torch.zeros(2, 16, 16, dtype=torch.long))


class TestSegLoss:
    def test_zero_iff_exact_onehot(self):
        # construct probabilities exactly one-hot equal to the labels
        y = torch.randint(0, 3, (1, 8, 8))
        onehot = torch.nn.functional.one_hot(y, 3).permute(0, 3, 1, 2).double()
        assert float(probs_loss(onehot, y, 3)) == 0.0
        off = onehot.clone()
        off[0, 0, 0, 0] += 0.5
        assert float(probs_loss(off, y, 3)) > 0.0

    def test_uniform_two_class_value(self):
        y = torch.zeros(1, 8, 8, dtype=torch.long)
        uniform = torch.full((1, 2, 8, 8), 0.5, dtype=torch.float64)
        assert float(probs_loss(uniform, y, 2)) == pytest.approx(0.5)

    def test_uniform_four_class_value(self):
        # per cell: |1/4 - 1| + 3*|1/4| = 1.5 over 4 channels -> mean 0.375
        y = torch.zeros(1, 8, 8, dtype=torch.long)
        uniform = torch.full((1, 4, 8, 8), 0.25, dtype=torch.float64)
        assert float(probs_loss(uniform, y, 4)) == pytest.approx(0.375)

    def test_class_permutation_covariance(self):
        m = micro_model()
        g = torch.Generator().manual_seed(9)
        x = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64)
        y = torch.randint(0, 3, (1, 16, 16), generator=g)
        probs = m.probs(x)
        perm = torch.tensor([2, 0, 1])
        base = float(probs_loss(probs, y, 3))
        permuted = float(probs_loss(probs[:, perm], perm.argsort()[y], 3))
        # relabeling classes consistently in both the labels and the
        # channel order leaves the loss unchanged
        y_relabelled = torch.empty_like(y)
        for new_idx, old_idx in enumerate(perm.tolist()):
            y_relabelled[y == old_idx] = new_idx
        assert float(probs_loss(probs[:, perm], y_relabelled, 3)) == pytest.approx(base)

    def test_softdice_option(self):
        y = torch.randint(0, 3, (1, 8, 8))
        onehot = torch.nn.functional.one_hot(y, 3).permute(0, 3, 1, 2).double()
        assert float(probs_loss(onehot, y, 3, kind="softdice")) == pytest.approx(0.0, abs=1e-5)
        with pytest.raises(ValueError):
            probs_loss(onehot, y, 3, kind="hinge")

    def test_one_sgd_step_decreases_batch_loss(self):
        m = seg_init(MICRO, seed=3, dtype=torch.float64)
        g = torch.Generator().manual_seed(1)
        x = torch.rand(4, 1, 16, 16, generator=g, dtype=torch.float64)
        y = torch.randint(0, 3, (4, 16, 16), generator=g)
        opt = torch.optim.SGD(m.net.parameters(), lr=1e-3)
        before = seg_loss(m, x, y)
        opt.zero_grad()
        before.backward()
        opt.step()
        after = seg_loss(m, x, y)
        assert float(after) <= float(before)


class TestProbMap:
    def test_invalid_probabilities_rejected(self):
        bad = np.full((8, 8, 2), 0.8)
        with pytest.raises(ValueError):
            ProbMap(data=bad)

    def test_argmax_tie_breaks_to_lowest_class(self):
        data = np.full((8, 8, 3), 1.0 / 3.0)
        pm = ProbMap(data=data)
        assert np.all(pm.argmax_mask().data == 0)

    def test_argmax_basic(self):
        data = np.zeros((8, 8, 2))
        data[..., 1] = 1.0
        assert np.all(ProbMap(data=data).argmax_mask().data == 1)


class TestTensorHelpers:
    def test_volume_roundtrip_range(self):
        hu = np.array([[-125, 275], [75, -25]], dtype=np.float32)
        hu = np.tile(hu, (4, 4))
        vol = Volume(data=hu, phase=Phase.ARTERIAL, case_id="c")
        t = volume_to_tensor(vol, torch.float64)
        assert float(t.min()) == -1.0 and float(t.max()) == 1.0

    def test_mask_to_tensor_shape(self):
        m = LabelMask(data=np.zeros((8, 8), dtype=np.uint8), num_classes=2)
        assert mask_to_tensor(m).shape == (1, 8, 8)
