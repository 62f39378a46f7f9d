import json
from pathlib import Path

import numpy as np
import pytest

from sketchdiff import pnm
from sketchdiff.cli import main


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def tiny_env(tmp_path_factory):
    """A dataset plus tiny trained checkpoints, built through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run(["gen-data", "--out", str(data), "--per-class", "6",
                "--seed", "3"]) == 0
    backbone = root / "backbone.dsk"
    assert run(["train-backbone", "--data", str(data), "--out", str(backbone),
                "--ae-steps", "120", "--dn-steps", "150", "--batch", "8",
                "--channels", "8", "--seed", "0"]) == 0
    lctn = root / "lctn.dsk"
    assert run(["train-lctn", "--data", str(data), "--backbone", str(backbone),
                "--out", str(lctn), "--iters", "120", "--seed", "1"]) == 0
    return root, data, backbone, lctn


class TestGenData:
    def test_item_arithmetic(self, tmp_path):
        out = tmp_path / "d"
        assert run(["gen-data", "--out", str(out), "--per-class", "10",
                    "--seed", "7"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["items"]) == 80
        assert (out / "run-manifest.json").exists()

    def test_byte_identical_rerun(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["gen-data", "--out", str(out), "--per-class", "4",
                        "--seed", "5"]) == 0
        for rel in sorted(p.relative_to(a) for p in a.rglob("*.ppm")):
            assert (a / rel).read_bytes() == (b / rel).read_bytes()
        assert (a / "manifest.json").read_bytes() == \
               (b / "manifest.json").read_bytes()

    def test_missing_out_is_usage_error(self, capsys):
        assert run(["gen-data", "--per-class", "4"]) == 2
        capsys.readouterr()

    def test_refuses_overwrite_without_force(self, tmp_path):
        out = tmp_path / "d"
        assert run(["gen-data", "--out", str(out), "--per-class", "2"]) == 0
        assert run(["gen-data", "--out", str(out), "--per-class", "2"]) == 3
        assert run(["gen-data", "--out", str(out), "--per-class", "2",
                    "--force"]) == 0


class TestTraining:
    def test_backbone_checkpoint_loadable_and_manifest(self, tiny_env):
        root, data, backbone, lctn = tiny_env
        from sketchdiff.backbone import BackboneBundle
        bundle = BackboneBundle.load(backbone)
        assert bundle.frozen
        manifest = json.loads(backbone.with_suffix(".run.json").read_text())
        assert manifest["results"]["content_digest"] == bundle.content_digest
        assert "final_ae_loss" in manifest["results"]

    def test_lctn_records_unchanged_digest(self, tiny_env):
        root, data, backbone, lctn = tiny_env
        manifest = json.loads(lctn.with_suffix(".run.json").read_text())
        assert manifest["results"]["digest_unchanged"] is True

    def test_backbone_digest_seed_reproducible(self, tiny_env, tmp_path):
        root, data, backbone, _ = tiny_env
        again = tmp_path / "again.dsk"
        assert run(["train-backbone", "--data", str(data), "--out", str(again),
                    "--ae-steps", "120", "--dn-steps", "150", "--batch", "8",
                    "--channels", "8", "--seed", "0"]) == 0
        a = json.loads(backbone.with_suffix(".run.json").read_text())
        b = json.loads(again.with_suffix(".run.json").read_text())
        assert a["results"]["content_digest"] == b["results"]["content_digest"]

    def test_mismatched_backbone_rejected(self, tiny_env, tmp_path):
        root, data, backbone, lctn = tiny_env
        other = tmp_path / "other.dsk"
        assert run(["train-backbone", "--data", str(data), "--out", str(other),
                    "--ae-steps", "120", "--dn-steps", "150", "--batch", "8",
                    "--channels", "8", "--seed", "99"]) == 0
        sketch = root / "s.pgm"
        pnm.write_pgm(sketch, np.zeros((32, 32), dtype=np.uint8))
        code = run(["sample", "--backbone", str(other), "--lctn", str(lctn),
                    "--sketch", str(sketch), "--class", "orange",
                    "--out", str(tmp_path / "o.ppm")])
        assert code == 4

    def test_missing_data_dir_is_data_error(self, tmp_path):
        assert run(["train-backbone", "--data", str(tmp_path / "nope"),
                    "--out", str(tmp_path / "b.dsk")]) == 3


class TestSample:
    def test_sample_writes_images_and_manifest(self, tiny_env, tmp_path):
        root, data, backbone, lctn = tiny_env
        ds_edge = next((data / "edge").glob("*.pgm"))
        out = tmp_path / "gen.ppm"
        assert run(["sample", "--backbone", str(backbone), "--lctn", str(lctn),
                    "--sketch", str(ds_edge), "--class", "basketball",
                    "--k", "0.8", "--seed", "9", "--out", str(out),
                    "--also-direct"]) == 0
        img = pnm.read_ppm(out)
        assert img.shape == (32, 32, 3)
        assert pnm.read_ppm(Path(str(out.with_suffix("")) + ".direct.ppm")).shape \
            == (32, 32, 3)
        manifest = json.loads(out.with_suffix(".run.json").read_text())
        assert manifest["results"]["k_used"] == 80
        assert set(manifest["results"]["timings_ms"]) == {
            "encode", "features", "lctn", "perturb", "denoise", "decode"}

    def test_sample_reproducible(self, tiny_env, tmp_path):
        root, data, backbone, lctn = tiny_env
        ds_edge = next((data / "edge").glob("*.pgm"))
        outs = []
        for name in ("a.ppm", "b.ppm"):
            out = tmp_path / name
            assert run(["sample", "--backbone", str(backbone), "--lctn",
                        str(lctn), "--sketch", str(ds_edge), "--class", "star",
                        "--seed", "4", "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_unknown_class_lists_names(self, tiny_env, tmp_path, capsys):
        root, data, backbone, lctn = tiny_env
        ds_edge = next((data / "edge").glob("*.pgm"))
        code = run(["sample", "--backbone", str(backbone), "--lctn", str(lctn),
                    "--sketch", str(ds_edge), "--class", "dragon",
                    "--out", str(tmp_path / "x.ppm")])
        assert code == 4
        assert "orange" in capsys.readouterr().out

    def test_paper_literal_mode_accepted(self, tiny_env, tmp_path):
        root, data, backbone, lctn = tiny_env
        ds_edge = next((data / "edge").glob("*.pgm"))
        assert run(["sample", "--backbone", str(backbone), "--lctn", str(lctn),
                    "--sketch", str(ds_edge), "--class", "square",
                    "--mode", "paper-literal", "--seed", "2",
                    "--out", str(tmp_path / "pl.ppm")]) == 0


class TestEvalAndSweep:
    def test_eval_report_keys(self, tiny_env, tmp_path):
        root, data, backbone, lctn = tiny_env
        out = tmp_path / "report.json"
        assert run(["eval", "--data", str(data), "--backbone", str(backbone),
                    "--lctn", str(lctn), "--limit", "4", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert {"psnr", "ssim", "iou"} <= set(report["metrics"])
        assert report["n"] == 4
        assert report["judge_real_acc"] is not None

    def test_sweep_rows_match_points(self, tiny_env, tmp_path):
        root, data, backbone, lctn = tiny_env
        out = tmp_path / "sweep.json"
        assert run(["sweep-k", "--data", str(data), "--backbone", str(backbone),
                    "--lctn", str(lctn), "--from", "0.5", "--to", "0.9",
                    "--points", "3", "--limit", "2", "--out", str(out)]) == 0
        table = json.loads(out.read_text())
        assert len(table["rows"]) == 3
        assert table["rows"][0]["k_ratio"] == 0.5

    def test_sweep_deterministic(self, tiny_env, tmp_path):
        root, data, backbone, lctn = tiny_env
        payloads = []
        for name in ("s1.json", "s2.json"):
            out = tmp_path / name
            assert run(["sweep-k", "--data", str(data), "--backbone",
                        str(backbone), "--lctn", str(lctn), "--points", "2",
                        "--limit", "2", "--seed", "5", "--out", str(out)]) == 0
            payloads.append(out.read_bytes())
        assert payloads[0] == payloads[1]


def test_version_flag(capsys):
    assert run(["--version"]) == 0
    assert capsys.readouterr().out.strip()


def test_no_command_is_usage_error(capsys):
    assert run([]) == 2
    capsys.readouterr()
