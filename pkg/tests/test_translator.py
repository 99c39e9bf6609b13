import numpy as np
import pytest
import torch

from pcn.core import HU_MAX, HU_MIN, Phase, Volume
from pcn.errors import PhaseMismatchError
from pcn.translator import (
    DiscArch,
    GenArch,
    adversarial_distance,
    cycle_loss,
    disc_init,
    gen_init,
    translate,
)

from gradcheck import directional_check

MICRO_GEN = GenArch(num_res_blocks=1, base_width=4)
MICRO_DISC = DiscArch(base_width=4)
A2V = (Phase.ARTERIAL, Phase.VENOUS)
V2A = (Phase.VENOUS, Phase.ARTERIAL)


def micro_pair(dtype=torch.float64, amp=1.0):
    g_av = gen_init(MICRO_GEN, A2V, seed=1, dtype=dtype)
    g_va = gen_init(MICRO_GEN, V2A, seed=2, dtype=dtype)
    if amp != 1.0:
        # move away from the near-identity init so L1 terms sit clear of
        # their kink during finite-difference sweeps
        g_av.set_params(g_av.params() * amp)
        g_va.set_params(g_va.params() * amp)
    return g_av, g_va


def unit_batch(seed, shape=(2, 1, 16, 16), span=0.8):
    g = torch.Generator().manual_seed(seed)
    # interior of the normalized range so the output clamp stays inactive
    return (torch.rand(shape, generator=g, dtype=torch.float64) * 2 - 1) * span


class ConstantShiftGen:
    """Test double: adds a constant on the normalized scale."""

    def __init__(self, direction, shift=0.0, dtype=torch.float64):
        self.direction = direction
        self.shift = shift
        self.dtype = dtype

    @property
    def source(self):
        return self.direction[0]

    @property
    def target(self):
        return self.direction[1]

    def fake(self, x):
        return x + self.shift


class TestTranslate:
    def test_shape_and_phase_tag(self):
        g_av, _ = micro_pair()
        vol = Volume(data=np.zeros((16, 16), dtype=np.float32),
                     phase=Phase.ARTERIAL, case_id="c")
        out = translate(g_av, vol)
        assert out.shape == vol.shape
        assert out.phase is Phase.VENOUS
        assert out.case_id == "c"

    def test_output_within_hu_window(self):
        g_av, _ = micro_pair(dtype=torch.float32)
        rng = np.random.default_rng(0)
        vol = Volume(data=rng.uniform(-125, 275, (16, 16)).astype(np.float32),
                     phase=Phase.ARTERIAL, case_id="c")
        out = translate(g_av, vol)
        assert out.data.min() >= HU_MIN and out.data.max() <= HU_MAX

    def test_wrong_phase_rejected(self):
        g_av, _ = micro_pair()
        vol = Volume(data=np.zeros((16, 16), dtype=np.float32),
                     phase=Phase.VENOUS, case_id="c")
        with pytest.raises(PhaseMismatchError):
            translate(g_av, vol)

    def test_deterministic(self):
        g_av, _ = micro_pair()
        x = unit_batch(3)
        assert torch.equal(g_av.fake(x), g_av.fake(x))

    def test_init_deterministic(self):
        a = gen_init(MICRO_GEN, A2V, seed=9)
        b = gen_init(MICRO_GEN, A2V, seed=9)
        assert torch.equal(a.params(), b.params())


class TestAdversarialDistance:
    class ConstantDisc:
        def __init__(self, value):
            self.value = value
            self.phase = Phase.VENOUS

        def scores(self, x):
            return torch.full((x.shape[0], 1, 3, 3), self.value, dtype=x.dtype)

    def test_perfect_discriminator_closed_form(self):
        # D=1 on reals and 0 on fakes: disc_term 0, gen_term 1
        class SplitDisc:
            phase = Phase.VENOUS

            def __init__(self):
                self.calls = 0

            def scores(self, x):
                self.calls += 1
                val = 0.0 if self.calls in (1, 3) else 1.0  # fake, real, fake order
                return torch.full((x.shape[0], 1, 3, 3), val, dtype=x.dtype)

        d = SplitDisc()
        fake = unit_batch(1)
        real = unit_batch(2)
        gen_term, disc_term = adversarial_distance(d, fake, real)
        assert float(gen_term) == pytest.approx(1.0)
        assert float(disc_term) == pytest.approx(0.0)

    def test_constant_half_closed_form(self):
        d = self.ConstantDisc(0.5)
        gen_term, disc_term = adversarial_distance(d, unit_batch(1), unit_batch(2))
        assert float(gen_term) == pytest.approx(0.25)
        assert float(disc_term) == pytest.approx(0.5)

    def test_terms_nonnegative_random(self):
        d = disc_init(MICRO_DISC, Phase.VENOUS, seed=3, dtype=torch.float64)
        for seed in range(5):
            gen_term, disc_term = adversarial_distance(d, unit_batch(seed),
                                                       unit_batch(seed + 50))
            assert float(gen_term) >= 0.0 and float(disc_term) >= 0.0

    def test_empty_real_batch_rejected(self):
        d = disc_init(MICRO_DISC, Phase.VENOUS, seed=3, dtype=torch.float64)
        with pytest.raises(ValueError):
            adversarial_distance(d, unit_batch(0), torch.zeros(0, 1, 16, 16))

    def test_generator_gradient_matches_finite_differences(self):
        g_av, _ = micro_pair(amp=5.0)
        d = disc_init(MICRO_DISC, Phase.VENOUS, seed=3, dtype=torch.float64)
        x = unit_batch(6, span=0.5)
        reals = unit_batch(5)
        directional_check(
            lambda: adversarial_distance(d, g_av.fake(x), reals)[0],
            g_av.net.parameters(), n_dirs=8, seed=1)

    def test_disc_term_detaches_generator(self):
        g_av, _ = micro_pair()
        d = disc_init(MICRO_DISC, Phase.VENOUS, seed=3, dtype=torch.float64)
        x = unit_batch(4)
        _, disc_term = adversarial_distance(d, g_av.fake(x), unit_batch(5))
        grads = torch.autograd.grad(disc_term, list(g_av.net.parameters()),
                                    allow_unused=True)
        assert all(g is None for g in grads)

    def test_patch_output_is_a_grid(self):
        d = disc_init(DiscArch(base_width=8), Phase.ARTERIAL, seed=0)
        out = d.scores(torch.zeros(1, 1, 64, 64))
        assert out.shape[-1] > 1 and out.shape[-2] > 1


class TestCycleLoss:
    def test_identity_generators_zero(self):
        g_ab = ConstantShiftGen(A2V, 0.0)
        g_ba = ConstantShiftGen(V2A, 0.0)
        x = unit_batch(1)
        assert float(cycle_loss(g_ab, g_ba, x)) == 0.0

    def test_constant_shift_closed_form(self):
        g_ab = ConstantShiftGen(A2V, 0.07)
        g_ba = ConstantShiftGen(V2A, 0.0)
        x = unit_batch(1)
        assert float(cycle_loss(g_ab, g_ba, x)) == pytest.approx(0.07)

    def test_direction_mismatch(self):
        g_av, _ = micro_pair()
        with pytest.raises(PhaseMismatchError):
            cycle_loss(g_av, g_av, unit_batch(1))

    def test_gradient_matches_finite_differences(self):
        g_av, g_va = micro_pair(amp=5.0)
        x = unit_batch(6, span=0.5)
        params = list(g_av.net.parameters()) + list(g_va.net.parameters())
        directional_check(lambda: cycle_loss(g_av, g_va, x), params,
                          n_dirs=8, seed=4)

    def test_volume_input_checks_phase(self):
        g_av, g_va = micro_pair(dtype=torch.float32)
        vol = Volume(data=np.zeros((16, 16), dtype=np.float32),
                     phase=Phase.VENOUS, case_id="c")
        with pytest.raises(PhaseMismatchError):
            cycle_loss(g_av, g_va, vol)
