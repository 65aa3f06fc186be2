import json
import struct

import numpy as np
import pytest
import torch

from conftest import STUB_CLASSES, TinyEmbedder, write_png

from geosift_sidecar.config import EMBEDDING_DIM, SidecarConfig, SidecarError
from geosift_sidecar.models import FunctionHead, build_embedder, load_head
from geosift_sidecar.ops import (
    detect_objects,
    extract_embeddings,
    list_images,
    predict_classes,
)


def read_embedding_file(path):
    blob = open(path, "rb").read()
    _, n_rows, dim = struct.unpack("<IQI", blob[4:20])
    data = np.frombuffer(blob, dtype="<f4", count=n_rows * dim, offset=20)
    ids = blob[20 + n_rows * dim * 4:].decode().split("\n") if n_rows else []
    return ids, data.reshape(n_rows, dim)


def test_list_images_sorted_and_filtered(image_dir):
    found = list_images(image_dir)
    assert [image_id for image_id, _ in found] == [
        "alpha", "alpha_copy", "blank", "broken", "gamma",
    ]


def test_extract_embeddings_skips_unreadable(image_dir, embedder, tmp_path, caplog):
    config = SidecarConfig(image_dir, embeddings_out=str(tmp_path / "e.emb"))
    with caplog.at_level("WARNING"):
        ids, skipped = extract_embeddings(config, embedder)
    assert ids == ["alpha", "alpha_copy", "blank", "gamma"]
    assert skipped == ["broken"]
    assert any("broken" in m for m in caplog.messages)


def test_duplicate_image_yields_identical_rows(image_dir, embedder, tmp_path):
    config = SidecarConfig(image_dir, embeddings_out=str(tmp_path / "e.emb"))
    ids, _ = extract_embeddings(config, embedder)
    file_ids, matrix = read_embedding_file(config.embeddings_out)
    assert file_ids == ids
    assert np.array_equal(matrix[ids.index("alpha")], matrix[ids.index("alpha_copy")])


def test_repeat_run_is_deterministic(image_dir, embedder, tmp_path):
    config = SidecarConfig(image_dir, embeddings_out=str(tmp_path / "e.emb"))
    extract_embeddings(config, embedder)
    first = open(config.embeddings_out, "rb").read()
    extract_embeddings(config, embedder)
    assert open(config.embeddings_out, "rb").read() == first


def test_batch_size_does_not_change_output(image_dir, embedder, tmp_path):
    small = SidecarConfig(image_dir, embeddings_out=str(tmp_path / "a.emb"),
                          batch_size=1)
    big = SidecarConfig(image_dir, embeddings_out=str(tmp_path / "b.emb"),
                        batch_size=16)
    extract_embeddings(small, embedder)
    extract_embeddings(big, embedder)
    _, one = read_embedding_file(small.embeddings_out)
    _, many = read_embedding_file(big.embeddings_out)
    assert np.allclose(one, many, atol=1e-6)


def test_ten_images_header(tmp_path, embedder):
    root = tmp_path / "ten"
    root.mkdir()
    rng = np.random.default_rng(1)
    for i in range(10):
        write_png(root / f"im{i:02d}.png", rng.integers(0, 256, size=(16, 16, 3)))
    config = SidecarConfig(str(root), embeddings_out=str(tmp_path / "e.emb"))
    extract_embeddings(config, embedder)
    blob = open(config.embeddings_out, "rb").read()
    _, n_rows, dim = struct.unpack("<IQI", blob[4:20])
    assert (n_rows, dim) == (10, EMBEDDING_DIM)


def test_real_embedder_feature_width():
    net = build_embedder(pretrained=False)
    with torch.no_grad():
        out = net(torch.zeros(1, 3, 224, 224))
    assert out.shape == (1, EMBEDDING_DIM)
    assert float(out.min()) >= 0.0  # post-activation features


def test_detect_blank_image_has_no_rows(image_dir, detector, tmp_path):
    config = SidecarConfig(image_dir, detections_out=str(tmp_path / "d.jsonl"))
    ids, skipped = detect_objects(config, detector, STUB_CLASSES)
    assert skipped == ["broken"]
    rows = [json.loads(l) for l in open(config.detections_out)]
    assert all(r["image_id"] != "blank" for r in rows)
    assert {r["image_id"] for r in rows} == {"alpha", "alpha_copy", "gamma"}


def test_detect_rows_normalized_and_named(image_dir, detector, tmp_path):
    config = SidecarConfig(image_dir, detections_out=str(tmp_path / "d.jsonl"))
    detect_objects(config, detector, STUB_CLASSES)
    rows = [json.loads(l) for l in open(config.detections_out)]
    by_image = {}
    for r in rows:
        by_image.setdefault(r["image_id"], []).append(r)
    for dets in by_image.values():
        assert [d["class_name"] for d in dets] == ["Building", "Car"]
        for d in dets:
            assert 0.0 <= d["x0"] <= d["x1"] <= 1.0
            assert 0.0 <= d["y0"] <= d["y1"] <= 1.0
    building = by_image["alpha"][0]
    assert building["x0"] == pytest.approx(0.1)
    assert building["y1"] == pytest.approx(0.8)


def test_custom_detector_requires_class_names(image_dir, detector, tmp_path):
    config = SidecarConfig(image_dir, detections_out=str(tmp_path / "d.jsonl"))
    with pytest.raises(SidecarError, match="class_names"):
        detect_objects(config, detector)


def save_head(path, seed):
    generator = torch.Generator().manual_seed(seed)
    head = FunctionHead()
    with torch.no_grad():
        head.linear.weight.copy_(
            torch.randn(head.linear.weight.shape, generator=generator)
        )
        head.linear.bias.zero_()
    torch.save(head.state_dict(), path)


def test_predict_probabilities_sum_to_one(image_dir, embedder, tmp_path):
    ckpt = tmp_path / "head.pt"
    save_head(ckpt, 11)
    config = SidecarConfig(image_dir, predictions_out=str(tmp_path / "p.jsonl"))
    ids, skipped = predict_classes(config, {"m0": str(ckpt)}, embedder)
    assert skipped == ["broken"]
    rows = [json.loads(l) for l in open(config.predictions_out)]
    assert len(rows) == len(ids)
    for r in rows:
        assert r["p_com"] + r["p_oth"] + r["p_res"] == pytest.approx(1.0, abs=1e-6)


def test_predict_duplicate_image_identical_vectors(image_dir, embedder, tmp_path):
    ckpt = tmp_path / "head.pt"
    save_head(ckpt, 11)
    config = SidecarConfig(image_dir, predictions_out=str(tmp_path / "p.jsonl"))
    predict_classes(config, {"m0": str(ckpt)}, embedder)
    rows = {r["image_id"]: r for r in map(json.loads, open(config.predictions_out))}
    for key in ("p_com", "p_oth", "p_res"):
        assert rows["alpha"][key] == rows["alpha_copy"][key]


def test_predict_missing_checkpoint_errors(image_dir, embedder, tmp_path):
    config = SidecarConfig(image_dir, predictions_out=str(tmp_path / "p.jsonl"))
    with pytest.raises(SidecarError, match="checkpoint"):
        predict_classes(config, {"m0": str(tmp_path / "nope.pt")}, embedder)
    with pytest.raises(SidecarError, match="checkpoint"):
        predict_classes(config, {}, embedder)


def test_load_head_rejects_wrong_shape(tmp_path):
    bad = tmp_path / "bad.pt"
    torch.save({"linear.weight": torch.zeros(2, 2)}, bad)
    with pytest.raises(SidecarError, match="bad checkpoint"):
        load_head(str(bad))
