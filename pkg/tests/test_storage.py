import json

import numpy as np
import pytest

from pcn.core import FoldSplit, LabelMask, Phase, Volume
from pcn.errors import ChecksumError, LockError, MissingArtifactError
from pcn.phantom import PhantomConfig, generate_dataset
from pcn.storage import (
    ManifestWriter,
    acquire_lock,
    load_checkpoint,
    load_dataset,
    load_folds,
    load_mask,
    load_volume,
    release_lock,
    save_checkpoint,
    save_dataset,
    save_folds,
    save_mask,
    save_volume,
    sha256_file,
)


class TestGridContainers:
    def test_volume_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        v = Volume(data=rng.uniform(-125, 275, (16, 12)).astype(np.float32),
                   phase=Phase.VENOUS, case_id="k7", spacing=(0.7, 0.9))
        path = tmp_path / "v.pcnvol"
        save_volume(path, v)
        out = load_volume(path)
        assert np.array_equal(out.data, v.data)
        assert out.phase is Phase.VENOUS
        assert out.case_id == "k7"
        assert out.spacing == (0.7, 0.9)

    def test_volume_header_is_text(self, tmp_path):
        v = Volume(data=np.zeros((8, 8), dtype=np.float32), phase=Phase.ARTERIAL,
                   case_id="c")
        path = tmp_path / "v.pcnvol"
        save_volume(path, v)
        head = path.read_bytes()[:7]
        assert head == b"PCNVOL1"

    def test_mask_round_trip_with_latent_phase(self, tmp_path):
        m = LabelMask(data=np.arange(64, dtype=np.uint8).reshape(8, 8) % 4,
                      num_classes=4, phase=None)
        path = tmp_path / "m.pcnvol"
        save_mask(path, m)
        out = load_mask(path)
        assert np.array_equal(out.data, m.data)
        assert out.phase is None
        assert out.num_classes == 4

    def test_truncated_payload_detected(self, tmp_path):
        v = Volume(data=np.zeros((8, 8), dtype=np.float32), phase=Phase.ARTERIAL,
                   case_id="c")
        path = tmp_path / "v.pcnvol"
        save_volume(path, v)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ChecksumError):
            load_volume(path)

    def test_bad_magic_detected(self, tmp_path):
        path = tmp_path / "v.pcnvol"
        path.write_bytes(b"NOTAVOL\nend\n")
        with pytest.raises(ChecksumError):
            load_volume(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_volume(tmp_path / "absent.pcnvol")

    def test_kind_mismatch(self, tmp_path):
        v = Volume(data=np.zeros((8, 8), dtype=np.float32), phase=Phase.ARTERIAL,
                   case_id="c")
        path = tmp_path / "v.pcnvol"
        save_volume(path, v)
        with pytest.raises(ChecksumError):
            load_mask(path)


class TestDatasetDirectory:
    def test_round_trip(self, tmp_path):
        data = generate_dataset(PhantomConfig(grid_size=16, deformation_smoothness=3.0),
                                3, seed=5)
        save_dataset(tmp_path / "d", data, config_snapshot={"x": 1}, seed=5)
        out = load_dataset(tmp_path / "d")
        assert len(out) == 3
        for ca, cb in zip(data.cases, out.cases):
            assert np.array_equal(ca.arterial[0].data, cb.arterial[0].data)
            assert np.array_equal(ca.venous[1].data, cb.venous[1].data)
            assert np.array_equal(ca.latent_label.data, cb.latent_label.data)

    def test_manifest_lists_checksums(self, tmp_path):
        data = generate_dataset(PhantomConfig(grid_size=16, deformation_smoothness=3.0),
                                1, seed=5)
        manifest = save_dataset(tmp_path / "d", data, seed=5)
        entry = manifest["cases"][0]
        for name, digest in entry["files"].items():
            assert sha256_file(tmp_path / "d" / entry["case_id"] / name) == digest

    def test_corruption_detected_on_load(self, tmp_path):
        data = generate_dataset(PhantomConfig(grid_size=16, deformation_smoothness=3.0),
                                1, seed=5)
        save_dataset(tmp_path / "d", data, seed=5)
        victim = next((tmp_path / "d").glob("case_*/arterial_volume.pcnvol"))
        raw = bytearray(victim.read_bytes())
        raw[-1] ^= 0xFF
        victim.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_dataset(tmp_path / "d")


class TestFoldSerialization:
    def test_round_trip(self, tmp_path):
        folds = FoldSplit(k=4, assignments={"a": 0, "b": 1, "c": 2, "d": 3}, seed=9)
        save_folds(tmp_path / "folds.json", folds)
        out = load_folds(tmp_path / "folds.json")
        assert out == folds

    def test_json_is_structured_text(self, tmp_path):
        folds = FoldSplit(k=2, assignments={"a": 0, "b": 1}, seed=1)
        save_folds(tmp_path / "folds.json", folds)
        parsed = json.loads((tmp_path / "folds.json").read_text())
        assert parsed["k"] == 2


class TestCheckpointContainer:
    def test_round_trip(self, tmp_path):
        blocks = [np.linspace(0, 1, 11), np.zeros(3)]
        header = {"format": "test", "models": [{"name": "a", "param_count": 11},
                                               {"name": "b", "param_count": 3}]}
        path = tmp_path / "c.pcnckpt"
        save_checkpoint(path, header, blocks)
        out_header, out_blocks = load_checkpoint(path)
        assert out_header["format"] == "test"
        assert np.array_equal(out_blocks[0], blocks[0])
        assert np.array_equal(out_blocks[1], blocks[1])

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "c.pcnckpt"
        save_checkpoint(path, {"models": [{"name": "a", "param_count": 4}]},
                        [np.ones(4)])
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_bitflip_detected(self, tmp_path):
        path = tmp_path / "c.pcnckpt"
        save_checkpoint(path, {"models": [{"name": "a", "param_count": 4}]},
                        [np.ones(4)])
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_checkpoint(path)


class TestLockAndManifest:
    def test_lock_exclusive(self, tmp_path):
        lock = acquire_lock(tmp_path / "run")
        try:
            with pytest.raises(LockError):
                acquire_lock(tmp_path / "run")
        finally:
            release_lock(lock)
        lock2 = acquire_lock(tmp_path / "run")
        release_lock(lock2)

    def test_manifest_records_artifacts_and_warnings(self, tmp_path):
        run = tmp_path / "run"
        run.mkdir()
        (run / "out.txt").write_text("hello")
        mw = ManifestWriter(run, "test-cmd", config_snapshot={"a": 1}, seeds=[3])
        mw.add_artifact(run / "out.txt")
        mw.warn("heads up")
        data = mw.finish()
        on_disk = json.loads((run / "run_manifest.json").read_text())
        assert on_disk["command"] == "test-cmd"
        assert on_disk["warnings"] == ["heads up"]
        assert "out.txt" in on_disk["artifacts"]
        assert data["seeds"] == [3]
