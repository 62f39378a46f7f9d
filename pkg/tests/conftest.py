"""Shared fixtures.

Two tiers of trained artifacts:

- mini_stack: a deliberately tiny, quality-free stack trained in seconds,
  for mechanics tests (determinism, wiring, interfaces).
- full_stack: the real desk-scale stack at the pinned training recipe,
  cached under tests/_artifacts so the expensive training runs once; the
  acceptance suite asserts its quality gates.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from sketchdiff.backbone import BackboneBundle, train_backbone
from sketchdiff.datasets import default_spec, gen_dataset, load_dataset
from sketchdiff.lctn import LatentCodeTranslator, train_lctn
from sketchdiff.metrics import ShapeClassifier
from sketchdiff.schedule import make_schedule

ARTIFACT_DIR = Path(__file__).parent / "_artifacts"

# full-stack training configuration (cached; delete _artifacts to retrain)
FULL_CONFIG = {
    "data": {"per_class": 200, "seed": 7},
    "backbone": {"ae_steps": 4000, "dn_steps": 12000, "batch_size": 16,
                 "lr": 1e-3, "channels": 32, "T": 100, "seed": 0},
    "lctn": {"iters": 20000, "batch_size": 4, "lr": 1e-3, "warmup": 100,
             "seed": 1},
    "judge": {"steps": 3000, "seed": 2},
}


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini_data")
    spec = default_spec(per_class=6, seed=3)
    gen_dataset(spec, root)
    return load_dataset(root)


@pytest.fixture(scope="session")
def mini_stack(mini_dataset):
    bundle = train_backbone(mini_dataset, ae_steps=250, dn_steps=400,
                            batch_size=8, channels=8, seed=0)
    lctn = train_lctn(bundle, mini_dataset, iters=250, seed=1)
    return mini_dataset, bundle, lctn


def _build_full_artifacts() -> None:
    cfg_path = ARTIFACT_DIR / "config.json"
    wanted = json.dumps(FULL_CONFIG, sort_keys=True)
    if cfg_path.exists() and cfg_path.read_text() == wanted and \
            all((ARTIFACT_DIR / f).exists()
                for f in ("data/manifest.json", "backbone.dsk", "lctn.dsk",
                          "judge.dsk")):
        return
    ARTIFACT_DIR.mkdir(parents=True, exist_ok=True)
    spec = default_spec(**FULL_CONFIG["data"])
    gen_dataset(spec, ARTIFACT_DIR / "data", force=True)
    dataset = load_dataset(ARTIFACT_DIR / "data")
    bb = FULL_CONFIG["backbone"]
    bundle = train_backbone(dataset, ae_steps=bb["ae_steps"],
                            dn_steps=bb["dn_steps"], batch_size=bb["batch_size"],
                            lr=bb["lr"], channels=bb["channels"],
                            sched=make_schedule(bb["T"]), seed=bb["seed"],
                            log=lambda m: print(f"[artifacts] {m}", flush=True))
    bundle.save(ARTIFACT_DIR / "backbone.dsk")
    lc = FULL_CONFIG["lctn"]
    lctn = train_lctn(bundle, dataset, iters=lc["iters"],
                      batch_size=lc["batch_size"], lr=lc["lr"],
                      warmup=lc["warmup"], seed=lc["seed"],
                      log=lambda m: print(f"[artifacts] {m}", flush=True))
    lctn.save(ARTIFACT_DIR / "lctn.dsk", backbone_digest=bundle.content_digest)
    train = dataset.subset("train")
    judge = ShapeClassifier(n_classes=len(dataset.class_names),
                            steps=FULL_CONFIG["judge"]["steps"],
                            seed=FULL_CONFIG["judge"]["seed"])
    judge.fit(train.images, train.class_ids)
    judge.save(ARTIFACT_DIR / "judge.dsk")
    cfg_path.write_text(wanted)


@pytest.fixture(scope="session")
def full_stack():
    _build_full_artifacts()
    dataset = load_dataset(ARTIFACT_DIR / "data")
    bundle = BackboneBundle.load(ARTIFACT_DIR / "backbone.dsk")
    lctn = LatentCodeTranslator.load(ARTIFACT_DIR / "lctn.dsk", bundle=bundle)
    judge = ShapeClassifier.load(ARTIFACT_DIR / "judge.dsk")
    return dataset, bundle, lctn, judge
