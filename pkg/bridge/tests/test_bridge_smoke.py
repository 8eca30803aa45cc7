"""End-to-end smoke run: 20 real image files and prompt-generated texts go
through the bridge's offline encoder into .taie stores, the training pipeline
consumes them through its CLI only, and the resulting image-side mAP must
beat the 0.5-constant-score baseline.

One test per stage plus the final assertion, all sharing a session workspace
so the pipeline reads like the shell session a user would run.
"""

import json
import subprocess

import numpy as np
import pytest
from PIL import Image

from clipbridge.encoders import PALETTE

modapt_dataio = pytest.importorskip("modapt.dataio")
from modapt.metrics import mean_ap  # noqa: E402  (test-only conformance import)

N_LABELS = 20
N_IMAGES = 60


def run_cli(*args):
    result = subprocess.run([*args], capture_output=True, text=True)
    assert result.returncode == 0, f"{args} failed:\n{result.stdout}\n{result.stderr}"
    return result


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("smoke")
    names = list(PALETTE)[:N_LABELS]
    (ws / "vocab.json").write_text(json.dumps(names))

    # Real image files: one or two color bands per image, labels exact.
    gen = np.random.Generator(np.random.PCG64(7))
    manifest = ws / "images.jsonl"
    with open(manifest, "w") as f:
        for i in range(N_IMAGES):
            k = int(gen.integers(1, 3))
            labels = sorted(int(j) for j in gen.choice(N_LABELS, size=k, replace=False))
            img = Image.new("RGB", (48, 48))
            for x in range(48):
                color = PALETTE[names[labels[min(x * k // 48, k - 1)]]]
                for y in range(48):
                    img.putpixel((x, y), color)
            img_path = ws / f"img{i:03d}.png"
            img.save(img_path)
            f.write(json.dumps({"id": f"img{i:03d}", "path": img_path.name, "labels": labels}) + "\n")
    return ws, names


def test_prompt_texts_via_primary_cli(workspace):
    ws, _ = workspace
    run_cli("modapt", "gen-prompt-texts", "--vocab", str(ws / "vocab.json"),
            "--count", "600", "--min-k", "1", "--max-k", "2", "--seed", "11",
            "--out", str(ws / "texts.jsonl"))
    assert sum(1 for _ in open(ws / "texts.jsonl")) == 600


def test_bridge_exports_load_in_primary(workspace):
    ws, names = workspace
    run_cli("clipbridge", "export-texts", "--texts", str(ws / "texts.jsonl"),
            "--vocab", str(ws / "vocab.json"), "--encoder", "palette:64",
            "--out", str(ws / "texts.taie"))
    run_cli("clipbridge", "export-images", "--images", str(ws / "images.jsonl"),
            "--vocab", str(ws / "vocab.json"), "--encoder", "palette:64",
            "--resolution", "224", "--out", str(ws / "images.taie"))
    vocab = modapt_dataio.LabelVocab.from_json_file(ws / "vocab.json")
    texts = modapt_dataio.read_store(ws / "texts.taie", vocab)
    images = modapt_dataio.read_store(ws / "images.taie", vocab)
    assert len(texts) == 600 and len(images) == N_IMAGES
    manifest = json.loads((ws / "images.taie.manifest.json").read_text())
    assert manifest["config"]["resolution"] == 224


def test_end_to_end_training_beats_random_baseline(workspace):
    ws, _ = workspace
    run_cli("modapt", "train", "--texts", str(ws / "texts.taie"),
            "--vocab", str(ws / "vocab.json"), "--mode", "zsl",
            "--epochs", "25", "--batch-size", "64", "--max-lr", "1e-2",
            "--dropout", "0", "--weight-decay", "0", "--hidden", "32,32",
            "--radius", "3", "--seed", "0", "--out", str(ws / "model.adpt"))
    run_cli("modapt", "predict", "--model", str(ws / "model.adpt"),
            "--store", str(ws / "images.taie"), "--vocab", str(ws / "vocab.json"),
            "--out", str(ws / "scores.jsonl"))
    run_cli("modapt", "eval", "--scores", str(ws / "scores.jsonl"),
            "--truth", str(ws / "images.taie"), "--vocab", str(ws / "vocab.json"),
            "--out", str(ws / "report.json"))
    trained_map = json.loads((ws / "report.json").read_text())["map"]

    vocab = modapt_dataio.LabelVocab.from_json_file(ws / "vocab.json")
    images = modapt_dataio.read_store(ws / "images.taie", vocab)
    baseline_scores = [(r.source_id, np.full(N_LABELS, 0.5)) for r in images]
    baseline_map = mean_ap(baseline_scores, images).map
    print(f"\nsmoke run: trained image-side mAP {trained_map:.3f} vs 0.5-score baseline {baseline_map:.3f}")
    assert trained_map > baseline_map
