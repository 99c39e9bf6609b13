import numpy as np
import pytest

from pcn.core import HU_MAX, HU_MIN, Phase, Volume, dsc
from pcn.errors import ConfigError, EmptyRegionError, ShapeMismatchError
from pcn.phantom import (
    ARTERY_CLASS,
    ORGAN_CLASS,
    VEIN_CLASS,
    PhantomConfig,
    deform_labels,
    entropy_report,
    generate_dataset,
    intensity_histogram,
    make_preset,
    render_phase,
    sample_anatomy,
    warp_labels,
    weak_phase_of,
)


class TestSampleAnatomy:
    def test_two_classes_only(self):
        cfg = PhantomConfig(num_classes=2,
                            intensity_table={0: {Phase.ARTERIAL: (-60, 10), Phase.VENOUS: (-60, 10)},
                                             1: {Phase.ARTERIAL: (50, 10), Phase.VENOUS: (100, 10)}})
        mask = sample_anatomy(cfg, seed=3)
        assert set(np.unique(mask.data)) <= {0, 1}

    def test_deterministic(self):
        cfg = PhantomConfig()
        a = sample_anatomy(cfg, seed=11)
        b = sample_anatomy(cfg, seed=11)
        assert np.array_equal(a.data, b.data)

    def test_distinct_seeds_differ(self):
        cfg = PhantomConfig()
        a = sample_anatomy(cfg, seed=1)
        b = sample_anatomy(cfg, seed=2)
        assert not np.array_equal(a.data, b.data)

    def test_class_areas_within_bounds(self):
        cfg = PhantomConfig()
        total = cfg.grid_size ** 2
        for seed in range(10):
            mask = sample_anatomy(cfg, seed=seed)
            areas = np.bincount(mask.data.ravel(), minlength=cfg.num_classes) / total
            for c in range(1, cfg.num_classes):
                assert 0.01 <= areas[c] <= 0.30, (seed, c, areas[c])


class TestDeformLabels:
    def test_sigma_zero_identity(self):
        cfg = PhantomConfig()
        y = sample_anatomy(cfg, seed=5)
        warped, field = deform_labels(y, 0.0, seed=9)
        assert np.array_equal(warped.data, y.data)
        assert not field.any()

    def test_rms_matches_sigma(self):
        y = sample_anatomy(PhantomConfig(), seed=5)
        for sigma in (0.5, 1.5, 3.0):
            _, field = deform_labels(y, sigma, seed=2)
            rms = np.sqrt(np.mean(field[0] ** 2 + field[1] ** 2))
            assert rms == pytest.approx(sigma, rel=1e-5)

    def test_dsc_band_for_large_classes(self):
        # measured over seeded draws during phantom design; the band is the
        # calibration contract for the default magnitude
        cfg = PhantomConfig()
        for seed in range(12):
            y = sample_anatomy(cfg, seed=seed)
            warped, _ = deform_labels(y, 1.5, seed=seed + 500)
            for c in range(1, cfg.num_classes):
                if (y.data == c).mean() < 0.03:
                    continue
                d = dsc(y.class_mask(c), warped.class_mask(c))
                assert 0.6 <= d <= 0.99, (seed, c, d)

    def test_independent_seeds_differ(self):
        y = sample_anatomy(PhantomConfig(), seed=5)
        wa, fa = deform_labels(y, 1.5, seed=1)
        wv, fv = deform_labels(y, 1.5, seed=2)
        assert not np.array_equal(fa, fv)
        assert not np.array_equal(wa.data, wv.data)

    def test_negative_sigma_rejected(self):
        y = sample_anatomy(PhantomConfig(), seed=5)
        with pytest.raises(ValueError):
            deform_labels(y, -1.0, seed=0)


class TestRenderPhase:
    def test_degenerate_render_is_constant(self):
        table = {0: {Phase.ARTERIAL: (-60.0, 0.0), Phase.VENOUS: (-60.0, 0.0)},
                 1: {Phase.ARTERIAL: (50.0, 0.0), Phase.VENOUS: (100.0, 0.0)}}
        cfg = PhantomConfig(num_classes=2, intensity_table=table, noise_std=0.0,
                            bias_field_amplitude=0.0)
        y = sample_anatomy(cfg, seed=4)
        vol = render_phase(y, Phase.ARTERIAL, cfg, seed=1)
        assert np.all(vol.data[y.data == 1] == 50.0)
        assert np.all(vol.data[y.data == 0] == -60.0)

    def test_output_clamped(self):
        cfg = PhantomConfig()
        y = sample_anatomy(cfg, seed=4)
        for phase in Phase:
            vol = render_phase(y, phase, cfg, seed=2)
            assert vol.data.min() >= HU_MIN and vol.data.max() <= HU_MAX

    def test_organ_peaks_near_configured_means(self):
        # arterial organ peak near 50 HU, venous near 100 HU
        cfg = PhantomConfig(noise_std=10.0)
        y = sample_anatomy(cfg, seed=8)
        for phase, mean in ((Phase.ARTERIAL, 50.0), (Phase.VENOUS, 100.0)):
            vol = render_phase(y, phase, cfg, seed=3)
            hist = intensity_histogram(vol, y.class_mask(ORGAN_CLASS), bins=40)
            assert abs(hist.mode_center() - mean) <= 10.0

    def test_phase_contrast_directions(self):
        cfg = PhantomConfig()
        for seed in range(6):
            y = sample_anatomy(cfg, seed=seed)
            va = render_phase(y, Phase.ARTERIAL, cfg, seed=seed + 70)
            vv = render_phase(y, Phase.VENOUS, cfg, seed=seed + 70)
            artery = y.class_mask(ARTERY_CLASS)
            vein = y.class_mask(VEIN_CLASS)
            organ = y.class_mask(ORGAN_CLASS)
            assert va.data[artery].mean() > vv.data[artery].mean()
            assert vv.data[vein].mean() > va.data[vein].mean()
            assert vv.data[organ].mean() > va.data[organ].mean()

    def test_missing_table_entry_is_config_error(self):
        cfg = PhantomConfig()
        y = sample_anatomy(cfg, seed=4)
        broken = PhantomConfig(intensity_table={0: cfg.intensity_table[0]})
        with pytest.raises(ConfigError):
            render_phase(y, Phase.ARTERIAL, broken, seed=0)


class TestGenerateDataset:
    def test_single_case(self):
        data = generate_dataset(PhantomConfig(), 1, seed=0)
        assert len(data) == 1
        case = data.cases[0]
        assert case.has_phase(Phase.ARTERIAL) and case.has_phase(Phase.VENOUS)
        assert case.latent_label is not None

    def test_counts_paired(self):
        data = generate_dataset(PhantomConfig(), 3, seed=0)
        assert data.counts == {Phase.ARTERIAL: 3, Phase.VENOUS: 3}

    def test_deterministic(self):
        a = generate_dataset(PhantomConfig(), 2, seed=4)
        b = generate_dataset(PhantomConfig(), 2, seed=4)
        for ca, cb in zip(a.cases, b.cases):
            assert np.array_equal(ca.arterial[0].data, cb.arterial[0].data)
            assert np.array_equal(ca.venous[1].data, cb.venous[1].data)

    def test_phase_masks_differ_but_overlap(self):
        data = generate_dataset(PhantomConfig(), 3, seed=9)
        for case in data.cases:
            ya, yv = case.arterial[1], case.venous[1]
            assert not np.array_equal(ya.data, yv.data)
            for c in range(1, 4):
                if (ya.data == c).mean() >= 0.03 and (yv.data == c).mean() >= 0.03:
                    assert dsc(ya.class_mask(c), yv.class_mask(c)) >= 0.6

    def test_warp_fields_reproduce_masks(self):
        data = generate_dataset(PhantomConfig(), 2, seed=9)
        for case in data.cases:
            y_star = case.latent_label.data
            assert np.array_equal(warp_labels(y_star, case.field_arterial),
                                  case.arterial[1].data)
            assert np.array_equal(warp_labels(y_star, case.field_venous),
                                  case.venous[1].data)


class TestIntensityHistogram:
    def test_constant_volume_single_bin(self):
        v = Volume(data=np.full((8, 8), 100.0, dtype=np.float32),
                   phase=Phase.ARTERIAL, case_id="c")
        hist = intensity_histogram(v, np.ones((8, 8), dtype=bool), bins=40)
        assert hist.freqs.max() == 1.0
        lo = hist.bin_edges[np.argmax(hist.freqs)]
        hi = hist.bin_edges[np.argmax(hist.freqs) + 1]
        assert lo <= 100.0 <= hi

    def test_normalization(self):
        rng = np.random.default_rng(0)
        v = Volume(data=rng.uniform(-125, 275, (16, 16)).astype(np.float32),
                   phase=Phase.ARTERIAL, case_id="c")
        hist = intensity_histogram(v, rng.random((16, 16)) < 0.5, bins=13)
        assert abs(hist.freqs.sum() - 1.0) <= 1e-9

    def test_empty_mask_raises(self):
        v = Volume(data=np.zeros((8, 8), dtype=np.float32), phase=Phase.ARTERIAL,
                   case_id="c")
        with pytest.raises(EmptyRegionError):
            intensity_histogram(v, np.zeros((8, 8), dtype=bool))

    def test_shape_mismatch(self):
        v = Volume(data=np.zeros((8, 8), dtype=np.float32), phase=Phase.ARTERIAL,
                   case_id="c")
        with pytest.raises(ShapeMismatchError):
            intensity_histogram(v, np.ones((9, 8), dtype=bool))

    def test_rendered_mode_bin_contains_class_mean(self):
        cfg = PhantomConfig()
        y = sample_anatomy(cfg, seed=2)
        vol = render_phase(y, Phase.VENOUS, cfg, seed=5)
        hist = intensity_histogram(vol, y.class_mask(ORGAN_CLASS), bins=40)
        idx = int(np.argmax(hist.freqs))
        assert hist.bin_edges[idx] - 10 <= 100.0 <= hist.bin_edges[idx + 1] + 10


class TestEntropyReport:
    def _vol(self, data):
        return Volume(data=np.asarray(data, dtype=np.float32), phase=Phase.ARTERIAL,
                      case_id="c")

    def test_identical_volumes_degenerate_joint(self):
        rng = np.random.default_rng(1)
        x = self._vol(rng.uniform(-125, 275, (32, 32)))
        h_joint, h_a, h_v = entropy_report(x, x, bins=8)
        assert h_joint == pytest.approx(h_a, abs=1e-12)
        assert h_a == pytest.approx(h_v, abs=1e-12)

    def test_independent_uniform_adds(self):
        rng = np.random.default_rng(7)
        x = self._vol(rng.uniform(-125, 275, (64, 64)))
        y = self._vol(rng.uniform(-125, 275, (64, 64)))
        h_joint, h_a, h_v = entropy_report(x, y, bins=4)
        assert abs(h_joint - (h_a + h_v)) <= 0.1

    def test_inequality_on_phantom_pairs(self):
        data = generate_dataset(PhantomConfig(), 5, seed=3)
        for case in data.cases:
            h_joint, h_a, h_v = entropy_report(case.arterial[0], case.venous[0], bins=8)
            assert h_joint >= max(h_a, h_v) - 1e-9


class TestPresets:
    def test_weak_preset_pins_organ_to_background(self):
        cfg = make_preset("weak-arterial")
        assert weak_phase_of(cfg) is Phase.ARTERIAL
        organ_mean, organ_std = cfg.table_entry(ORGAN_CLASS, Phase.ARTERIAL)
        bg_mean, bg_std = cfg.table_entry(0, Phase.ARTERIAL)
        assert organ_mean == bg_mean
        assert organ_std != bg_std  # texture cue stays

    def test_default_has_no_weak_phase(self):
        assert weak_phase_of(make_preset("default")) is None

    def test_deformation_presets(self):
        assert make_preset("abnormal").deformation_magnitude > \
            make_preset("normal").deformation_magnitude

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            make_preset("nope")

    def test_invalid_config_lists_all_errors(self):
        with pytest.raises(ConfigError) as exc:
            PhantomConfig(grid_size=4, num_classes=1, deformation_magnitude=-1)
        assert len(exc.value.errors) == 3
