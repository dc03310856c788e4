"""Export jobs end to end, on a small generated image corpus.

Tests run with the seeded-weights policy so they are deterministic offline;
the resnet18 tap keeps them fast. The default (resnet50/layer3) contract is
checked once.
"""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from fssexport import (ExportError, ExportJob, downsample_mask, export,
                       read_feature_file, read_mask_file)
from fssexport.backbones import BackboneError, build


def _write_corpus(root: Path, count: int = 3, size: int = 64) -> tuple[Path, Path]:
    img_dir, mask_dir = root / "images", root / "masks"
    img_dir.mkdir(), mask_dir.mkdir()
    rng = np.random.default_rng(5)
    for i in range(count):
        pixels = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
        mask = np.zeros((size, size), dtype=np.uint8)
        mask[10:40, 5 * (i + 1):60] = 255
        Image.fromarray(pixels).save(img_dir / f"sample{i}.png")
        Image.fromarray(mask).save(mask_dir / f"sample{i}.png")
    return img_dir, mask_dir


def _job(tmp_path, **overrides) -> ExportJob:
    img_dir, mask_dir = _write_corpus(tmp_path)
    defaults = dict(image_dir=img_dir, mask_dir=mask_dir,
                    output_dir=tmp_path / "out", backbone="resnet18",
                    layer="layer3", weights="seeded")
    defaults.update(overrides)
    return ExportJob(**defaults)


def _tree_hash(directory: Path) -> str:
    digest = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            digest.update(p.name.encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


def test_job_exports_pair_per_image_plus_manifest(tmp_path):
    job = _job(tmp_path)
    manifest_path = export(job)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    assert [e["id"] for e in manifest] == ["sample0", "sample1", "sample2"]
    channels = set()
    for entry in manifest:
        feature = read_feature_file(job.output_dir / entry["feature_path"])
        mask = read_mask_file(job.output_dir / entry["mask_path"])
        channels.add(feature.shape[0])
        assert mask.shape == feature.shape[1:]  # mask lives on the feature grid
        assert np.isfinite(feature).all()
    assert len(channels) == 1  # identical C across the job


def test_resnet18_layer3_grid_and_channels(tmp_path):
    job = _job(tmp_path)
    manifest = json.loads(export(job).read_text(encoding="utf-8"))
    feature = read_feature_file(job.output_dir / manifest[0]["feature_path"])
    assert feature.shape == (256, 4, 4)  # stride-16 stage on 64x64 inputs


def test_default_backbone_is_the_1024_channel_stage(tmp_path):
    job = _job(tmp_path, backbone="resnet50")
    manifest = json.loads(export(job).read_text(encoding="utf-8"))
    feature = read_feature_file(job.output_dir / manifest[0]["feature_path"])
    assert feature.shape == (1024, 4, 4)


def test_rerunning_a_job_reproduces_identical_bytes(tmp_path):
    job_a = _job(tmp_path, output_dir=tmp_path / "a")
    job_b = ExportJob(image_dir=job_a.image_dir, mask_dir=job_a.mask_dir,
                      output_dir=tmp_path / "b", backbone="resnet18",
                      layer="layer3", weights="seeded")
    export(job_a)
    export(job_b)
    assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")


def test_different_seed_changes_features(tmp_path):
    job_a = _job(tmp_path, output_dir=tmp_path / "a", seed=0)
    job_b = ExportJob(image_dir=job_a.image_dir, mask_dir=job_a.mask_dir,
                      output_dir=tmp_path / "b", backbone="resnet18",
                      layer="layer3", weights="seeded", seed=1)
    export(job_a)
    export(job_b)
    assert _tree_hash(tmp_path / "a") != _tree_hash(tmp_path / "b")


def test_parallel_workers_match_sequential(tmp_path):
    job_seq = _job(tmp_path, output_dir=tmp_path / "seq")
    job_par = ExportJob(image_dir=job_seq.image_dir, mask_dir=job_seq.mask_dir,
                        output_dir=tmp_path / "par", backbone="resnet18",
                        layer="layer3", weights="seeded", workers=3)
    export(job_seq)
    export(job_par)
    assert _tree_hash(tmp_path / "seq") == _tree_hash(tmp_path / "par")


def test_unreadable_image_fails_alone_and_is_listed(tmp_path, capsys):
    job = _job(tmp_path)
    (job.image_dir / "sample1.png").write_bytes(b"this is not a png")
    manifest = json.loads(export(job).read_text(encoding="utf-8"))
    assert [e["id"] for e in manifest] == ["sample0", "sample2"]
    err = capsys.readouterr().err
    assert "sample1" in err and "1 of 3" in err


def test_missing_mask_pair_fails_alone(tmp_path, capsys):
    job = _job(tmp_path)
    (job.mask_dir / "sample2.png").unlink()
    manifest = json.loads(export(job).read_text(encoding="utf-8"))
    assert [e["id"] for e in manifest] == ["sample0", "sample1"]
    assert "sample2" in capsys.readouterr().err


def test_nonbinary_mask_fails_alone(tmp_path, capsys):
    job = _job(tmp_path)
    gray = np.full((64, 64), 128, dtype=np.uint8)
    Image.fromarray(gray).save(job.mask_dir / "sample0.png")
    manifest = json.loads(export(job).read_text(encoding="utf-8"))
    assert [e["id"] for e in manifest] == ["sample1", "sample2"]
    assert "not binary" in capsys.readouterr().err


def test_shape_drift_aborts_naming_offender(tmp_path):
    job = _job(tmp_path)
    rng = np.random.default_rng(9)
    big = rng.integers(0, 255, size=(96, 96, 3), dtype=np.uint8)
    Image.fromarray(big).save(job.image_dir / "sample9.png")
    Image.fromarray(np.zeros((96, 96), dtype=np.uint8) + 255).save(
        job.mask_dir / "sample9.png")
    with pytest.raises(ExportError, match="sample9"):
        export(job)


def test_empty_image_dir_is_a_job_error(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    job = ExportJob(image_dir=tmp_path / "images", mask_dir=tmp_path / "masks",
                    output_dir=tmp_path / "out", weights="seeded")
    with pytest.raises(ExportError, match="no images"):
        export(job)


def test_all_inputs_failing_is_a_job_error(tmp_path):
    job = _job(tmp_path)
    for p in job.mask_dir.iterdir():
        p.unlink()
    with pytest.raises(ExportError, match="nothing was exported"):
        export(job)


def test_unknown_backbone_and_layer_rejected(tmp_path):
    with pytest.raises(BackboneError, match="unknown backbone"):
        build("alexnet", "layer3", weights="seeded")
    with pytest.raises(BackboneError, match="unknown layer"):
        build("resnet18", "stage7", weights="seeded")
    with pytest.raises(BackboneError, match="weights policy"):
        build("resnet18", "layer3", weights="maybe")


def test_masks_accept_both_binary_encodings(tmp_path):
    job = _job(tmp_path)
    zero_one = (np.asarray(Image.open(job.mask_dir / "sample0.png")) > 0)
    Image.fromarray(zero_one.astype(np.uint8)).save(job.mask_dir / "sample0.png")
    manifest = json.loads(export(job).read_text(encoding="utf-8"))
    assert len(manifest) == 3


def test_downsample_block_mean_threshold():
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[:4, :2] = 1          # top-left cell half-covered -> 1
    mask[4:, :1] = 1          # bottom-left quarter-covered -> 0
    out = downsample_mask(mask, (2, 2))
    assert out.tolist() == [[1, 0], [0, 0]]


def test_downsample_ragged_uses_cell_centers():
    mask = np.zeros((7, 5), dtype=np.uint8)
    mask[3, :] = 1
    out = downsample_mask(mask, (2, 2))
    assert out.shape == (2, 2)
    assert out.dtype == np.uint8


def test_vgg16_tap_exports(tmp_path):
    job = _job(tmp_path, backbone="vgg16", layer="conv5")
    manifest = json.loads(export(job).read_text(encoding="utf-8"))
    feature = read_feature_file(job.output_dir / manifest[0]["feature_path"])
    assert feature.shape[0] == 512
